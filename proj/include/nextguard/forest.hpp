#ifndef NEXTGUARD_FOREST_HPP
#define NEXTGUARD_FOREST_HPP

// Bagged CART trees (Gini) over sparse non-dense rows. Splits are "x <= t"
// with t an observed training value, so any strictly increasing transform of
// a feature (applied to training and test values alike) leaves every
// decision unchanged once t is mapped through it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nextguard/detail/binary_io.hpp>
#include <nextguard/detail/random.hpp>
#include <nextguard/error.hpp>
#include <nextguard/sae.hpp>

namespace nextguard {

/// Row-major sparse matrix; absent entries are 0. Column indices within a row
/// are strictly increasing.
class SparseRows {
public:
    explicit SparseRows(std::size_t n_cols = 0) : n_cols_(n_cols) {}

    void add_row(std::span<const FeatureEntry> entries)
    {
        for (std::size_t i = 0; i < entries.size(); ++i) {
            require(entries[i].index < n_cols_, ErrorCode::IndexOutOfRange, "sparse row column out of range");
            require(i == 0 || entries[i - 1].index < entries[i].index, ErrorCode::InvalidArgument,
                    "sparse row columns must be strictly increasing");
            require(std::isfinite(entries[i].value), ErrorCode::NonFinite, "sparse row holds a non-finite value");
        }
        entries_.insert(entries_.end(), entries.begin(), entries.end());
        row_ptr_.push_back(entries_.size());
    }

    std::size_t n_rows() const noexcept { return row_ptr_.size() - 1; }
    std::size_t n_cols() const noexcept { return n_cols_; }
    std::size_t nnz() const noexcept { return entries_.size(); }

    std::span<const FeatureEntry> row(std::size_t r) const noexcept
    {
        return {entries_.data() + row_ptr_[r], row_ptr_[r + 1] - row_ptr_[r]};
    }

    float value(std::size_t r, std::uint32_t col) const noexcept { return lookup(row(r), col); }

    static float lookup(std::span<const FeatureEntry> row, std::uint32_t col) noexcept
    {
        const auto it = std::lower_bound(row.begin(), row.end(), col,
                                         [](const FeatureEntry &e, std::uint32_t c) { return e.index < c; });
        return it != row.end() && it->index == col ? it->value : 0.0f;
    }

private:
    std::size_t n_cols_;
    std::vector<std::size_t> row_ptr_{0};
    std::vector<FeatureEntry> entries_;
};

struct ForestParams {
    std::uint32_t n_trees = 100;
    std::uint32_t max_depth = 12;
    std::uint32_t min_leaf = 5;
    /// Features tried per split; 0 means floor(sqrt(n_cols)).
    std::uint32_t mtry = 0;
    std::uint64_t seed = 0;
    unsigned n_threads = 1;

    friend bool operator==(const ForestParams &a, const ForestParams &b)
    {
        return a.n_trees == b.n_trees && a.max_depth == b.max_depth && a.min_leaf == b.min_leaf &&
               a.mtry == b.mtry && a.seed == b.seed;
    }
};

/// Internal nodes have feature >= 0; leaves have feature = -1 and children -1.
struct TreeNode {
    std::int32_t feature = -1;
    float threshold = 0.0f;
    std::int32_t left = -1;
    std::int32_t right = -1;
    /// Bootstrap-weighted class counts of the training rows reaching the node.
    float count0 = 0.0f;
    float count1 = 0.0f;

    bool is_leaf() const noexcept { return feature < 0; }
    double proba() const noexcept { return count1 / (static_cast<double>(count0) + count1); }
    friend bool operator==(const TreeNode &, const TreeNode &) = default;
};

struct DecisionTree {
    std::vector<TreeNode> nodes;

    const TreeNode &leaf_for(std::span<const FeatureEntry> row) const noexcept
    {
        std::size_t i = 0;
        while (!nodes[i].is_leaf()) {
            const auto &n = nodes[i];
            const float x = SparseRows::lookup(row, static_cast<std::uint32_t>(n.feature));
            i = static_cast<std::size_t>(x <= n.threshold ? n.left : n.right);
        }
        return nodes[i];
    }

    double predict(std::span<const FeatureEntry> row) const noexcept { return leaf_for(row).proba(); }

    std::size_t depth() const
    {
        std::vector<std::size_t> d(nodes.size(), 0);
        std::size_t best = 0;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            best = std::max(best, d[i]);
            if (!nodes[i].is_leaf()) {
                d[static_cast<std::size_t>(nodes[i].left)] = d[i] + 1;
                d[static_cast<std::size_t>(nodes[i].right)] = d[i] + 1;
            }
        }
        return best;
    }

    friend bool operator==(const DecisionTree &, const DecisionTree &) = default;
};

namespace detail {

class TreeBuilder {
public:
    TreeBuilder(const SparseRows &rows, const std::vector<std::vector<FeatureEntry>> &cols,
                std::span<const std::uint8_t> labels, const ForestParams &hp, std::uint32_t mtry, std::uint64_t seed)
        : rows_(rows), cols_(cols), labels_(labels), hp_(hp), mtry_(mtry), rng_(seed),
          weight_(rows.n_rows(), 0.0), features_(rows.n_cols())
    {
        std::iota(features_.begin(), features_.end(), 0u);
    }

    /// `weights[r]` is the bootstrap multiplicity of row r.
    DecisionTree build(std::span<const double> weights)
    {
        std::vector<std::uint32_t> members;
        for (std::size_t r = 0; r < weights.size(); ++r) {
            if (weights[r] > 0.0) {
                members.push_back(static_cast<std::uint32_t>(r));
            }
        }
        boot_ = weights;
        tree_.nodes.clear();
        grow(members, 0);
        return std::move(tree_);
    }

private:
    struct Group {
        float value;
        double w0;
        double w1;
    };

    struct Item {
        float value;
        double w;
        std::uint8_t y;
    };

    static double gini(double w0, double w1)
    {
        const double n = w0 + w1;
        if (n <= 0.0) {
            return 0.0;
        }
        const double p = w1 / n;
        return 2.0 * p * (1.0 - p);
    }

    // Value groups of one feature over the node's rows, ascending by value.
    void collect(std::uint32_t f, const std::vector<std::uint32_t> &members, double tot0, double tot1,
                 std::vector<Group> &groups)
    {
        items_.clear();
        const auto &col = cols_[f];
        if (col.size() <= members.size() * 4) {
            for (const auto &e : col) {
                const double w = weight_[e.index];
                if (w > 0.0) {
                    items_.push_back({e.value, w, labels_[e.index]});
                }
            }
        } else {
            for (auto r : members) {
                const float v = rows_.value(r, f);
                if (v != 0.0f) {
                    items_.push_back({v, weight_[r], labels_[r]});
                }
            }
        }
        double nz0 = 0.0, nz1 = 0.0;
        for (const auto &it : items_) {
            (it.y ? nz1 : nz0) += it.w;
        }
        const double z0 = tot0 - nz0;
        const double z1 = tot1 - nz1;
        if (z0 + z1 > 1e-9) {
            items_.push_back({0.0f, z0, 0});
            items_.push_back({0.0f, z1, 1});
        }
        std::sort(items_.begin(), items_.end(), [](const Item &a, const Item &b) { return a.value < b.value; });
        groups.clear();
        for (const auto &it : items_) {
            if (groups.empty() || groups.back().value != it.value) {
                groups.push_back({it.value, 0.0, 0.0});
            }
            (it.y ? groups.back().w1 : groups.back().w0) += it.w;
        }
    }

    std::int32_t grow(const std::vector<std::uint32_t> &members, std::size_t depth)
    {
        double w0 = 0.0, w1 = 0.0;
        for (auto r : members) {
            (labels_[r] ? w1 : w0) += boot_[r];
        }
        const auto id = static_cast<std::int32_t>(tree_.nodes.size());
        tree_.nodes.push_back({-1, 0.0f, -1, -1, static_cast<float>(w0), static_cast<float>(w1)});

        const double n = w0 + w1;
        if (depth >= hp_.max_depth || w0 == 0.0 || w1 == 0.0 || n < 2.0 * hp_.min_leaf) {
            return id;
        }
        for (auto r : members) {
            weight_[r] = boot_[r];
        }
        // Partial Fisher-Yates: the first mtry entries become this node's candidates.
        const std::size_t p = features_.size();
        for (std::size_t i = 0; i < mtry_; ++i) {
            std::swap(features_[i], features_[i + rng_.below(p - i)]);
        }
        const double parent = gini(w0, w1);
        double best_gain = 1e-12;
        std::int32_t best_f = -1;
        float best_t = 0.0f;
        for (std::size_t c = 0; c < mtry_; ++c) {
            const auto f = features_[c];
            collect(f, members, w0, w1, groups_);
            double l0 = 0.0, l1 = 0.0;
            for (std::size_t g = 0; g + 1 < groups_.size(); ++g) {
                l0 += groups_[g].w0;
                l1 += groups_[g].w1;
                const double nl = l0 + l1;
                const double nr = n - nl;
                if (nl < hp_.min_leaf || nr < hp_.min_leaf) {
                    continue;
                }
                const double child = (nl * gini(l0, l1) + nr * gini(w0 - l0, w1 - l1)) / n;
                const double gain = parent - child;
                if (gain > best_gain) {
                    best_gain = gain;
                    best_f = static_cast<std::int32_t>(f);
                    best_t = groups_[g].value;
                }
            }
        }
        for (auto r : members) {
            weight_[r] = 0.0;
        }
        if (best_f < 0) {
            return id;
        }
        std::vector<std::uint32_t> left, right;
        for (auto r : members) {
            (rows_.value(r, static_cast<std::uint32_t>(best_f)) <= best_t ? left : right).push_back(r);
        }
        tree_.nodes[static_cast<std::size_t>(id)].feature = best_f;
        tree_.nodes[static_cast<std::size_t>(id)].threshold = best_t;
        const auto l = grow(left, depth + 1);
        tree_.nodes[static_cast<std::size_t>(id)].left = l;
        const auto r = grow(right, depth + 1);
        tree_.nodes[static_cast<std::size_t>(id)].right = r;
        return id;
    }

    const SparseRows &rows_;
    const std::vector<std::vector<FeatureEntry>> &cols_;
    std::span<const std::uint8_t> labels_;
    const ForestParams &hp_;
    std::uint32_t mtry_;
    Rng rng_;
    std::vector<double> weight_;
    std::span<const double> boot_;
    std::vector<std::uint32_t> features_;
    DecisionTree tree_;
    std::vector<Group> groups_;
    std::vector<Item> items_;
};

/// Stratified bootstrap: positives and negatives are resampled separately,
/// each to its original count, so every tree sees the original positive rate.
inline std::vector<double> stratified_bootstrap(std::span<const std::uint8_t> labels, Rng &rng)
{
    std::vector<std::uint32_t> pos, neg;
    for (std::size_t r = 0; r < labels.size(); ++r) {
        (labels[r] ? pos : neg).push_back(static_cast<std::uint32_t>(r));
    }
    std::vector<double> w(labels.size(), 0.0);
    for (const auto *cls : {&neg, &pos}) {
        for (std::size_t i = 0; i < cls->size(); ++i) {
            w[(*cls)[rng.below(cls->size())]] += 1.0;
        }
    }
    return w;
}

} // namespace detail

/// Trained forest plus the pool of SAE features its columns refer to.
struct Forest {
    ForestParams hyper;
    /// Column c of every split is SAE feature pool[c].
    std::vector<std::uint32_t> pool;
    std::string sae_fingerprint;
    std::vector<DecisionTree> trees;

    /// Mean over trees of the leaf's class-1 frequency. `row` is indexed by
    /// pool position.
    double predict_proba(std::span<const FeatureEntry> row) const noexcept
    {
        double acc = 0.0;
        for (const auto &t : trees) {
            acc += t.predict(row);
        }
        return acc / static_cast<double>(trees.size());
    }

    friend bool operator==(const Forest &, const Forest &) = default;
};

/// Trains on `rows` (columns = pool positions) with 0/1 `labels`.
/// `oob_proba`, when given, receives each row's out-of-bag prediction (NaN
/// for rows that were in every bootstrap).
inline Forest train_forest(const SparseRows &rows, std::span<const std::uint8_t> labels, const ForestParams &hp,
                           std::vector<std::uint32_t> pool = {}, std::string sae_fingerprint = {},
                           std::vector<double> *oob_proba = nullptr)
{
    require(rows.n_rows() == labels.size(), ErrorCode::DimensionMismatch, "forest: rows and labels differ in length");
    require(rows.n_cols() > 0, ErrorCode::InvalidArgument, "forest: no feature columns");
    require(hp.n_trees >= 1 && hp.min_leaf >= 1, ErrorCode::InvalidArgument, "forest: n_trees and min_leaf must be >= 1");
    const auto n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
    for (auto y : labels) {
        require(y <= 1, ErrorCode::InvalidArgument, "forest: labels must be 0 or 1");
    }
    if (n_pos == 0 || n_pos == labels.size()) {
        fail(ErrorCode::InsufficientData, "forest: training set has a single class");
    }
    if (pool.empty()) {
        pool.resize(rows.n_cols());
        std::iota(pool.begin(), pool.end(), 0u);
    }
    require(pool.size() == rows.n_cols(), ErrorCode::DimensionMismatch, "forest: pool size differs from column count");

    const auto mtry = hp.mtry ? std::min<std::uint32_t>(hp.mtry, static_cast<std::uint32_t>(rows.n_cols()))
                              : std::max<std::uint32_t>(1, static_cast<std::uint32_t>(std::sqrt(rows.n_cols())));
    std::vector<std::vector<FeatureEntry>> cols(rows.n_cols());
    for (std::size_t r = 0; r < rows.n_rows(); ++r) {
        for (const auto &e : rows.row(r)) {
            cols[e.index].push_back({static_cast<std::uint32_t>(r), e.value});
        }
    }

    Forest forest{hp, std::move(pool), std::move(sae_fingerprint), std::vector<DecisionTree>(hp.n_trees)};
    std::vector<std::vector<double>> boots(oob_proba ? hp.n_trees : 0);
    const auto train_range = [&](std::size_t first, std::size_t step) {
        for (std::size_t t = first; t < hp.n_trees; t += step) {
            detail::Rng rng(detail::derive_seed(hp.seed, t));
            const auto w = detail::stratified_bootstrap(labels, rng);
            detail::TreeBuilder builder(rows, cols, labels, hp, mtry, rng.next());
            forest.trees[t] = builder.build(w);
            if (oob_proba) {
                boots[t] = w;
            }
        }
    };
    const unsigned n_threads = std::max(1u, std::min<unsigned>(hp.n_threads, hp.n_trees));
    if (n_threads == 1) {
        train_range(0, 1);
    } else {
        std::vector<std::jthread> pool_threads;
        for (unsigned i = 0; i < n_threads; ++i) {
            pool_threads.emplace_back(train_range, i, n_threads);
        }
    }
    if (oob_proba) {
        oob_proba->assign(rows.n_rows(), 0.0);
        std::vector<std::size_t> count(rows.n_rows(), 0);
        for (std::size_t t = 0; t < hp.n_trees; ++t) {
            for (std::size_t r = 0; r < rows.n_rows(); ++r) {
                if (boots[t][r] == 0.0) {
                    (*oob_proba)[r] += forest.trees[t].predict(rows.row(r));
                    ++count[r];
                }
            }
        }
        for (std::size_t r = 0; r < rows.n_rows(); ++r) {
            (*oob_proba)[r] = count[r] ? (*oob_proba)[r] / static_cast<double>(count[r]) : std::nan("");
        }
    }
    return forest;
}

// ---------------------------------------------------------------------------
// NGRF format

inline constexpr std::string_view kForestMagic{"NGRF\0", 5};
inline constexpr std::uint16_t kForestVersion = 1;

inline void validate_forest(const Forest &f)
{
    require(!f.trees.empty(), ErrorCode::Malformed, "forest has no trees");
    require(!f.pool.empty(), ErrorCode::Malformed, "forest has an empty feature pool");
    for (std::size_t t = 0; t < f.trees.size(); ++t) {
        const auto &nodes = f.trees[t].nodes;
        const std::string where = "forest tree " + std::to_string(t);
        require(!nodes.empty(), ErrorCode::Malformed, where + " is empty");
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            const auto &n = nodes[i];
            require(n.count0 >= 0.0f && n.count1 >= 0.0f && n.count0 + n.count1 > 0.0f, ErrorCode::Malformed,
                    where + ": node without training weight");
            if (n.is_leaf()) {
                require(n.left == -1 && n.right == -1, ErrorCode::Malformed, where + ": leaf with children");
                continue;
            }
            require(static_cast<std::size_t>(n.feature) < f.pool.size(), ErrorCode::Malformed,
                    where + ": split on a feature outside the pool");
            require(std::isfinite(n.threshold), ErrorCode::NonFinite, where + ": non-finite threshold");
            // Children always follow their parent, so the node graph is acyclic.
            const auto ok = [&](std::int32_t c) {
                return c > static_cast<std::int32_t>(i) && static_cast<std::size_t>(c) < nodes.size();
            };
            require(ok(n.left) && ok(n.right) && n.left != n.right, ErrorCode::Malformed,
                    where + ": invalid child index");
        }
        require(f.trees[t].depth() <= f.hyper.max_depth, ErrorCode::Malformed, where + " exceeds max_depth");
    }
}

inline std::string serialize_forest(const Forest &f)
{
    detail::ByteWriter w;
    w.bytes(kForestMagic);
    w.scalar<std::uint16_t>(kForestVersion);
    w.scalar<std::uint32_t>(f.hyper.n_trees);
    w.scalar<std::uint32_t>(f.hyper.max_depth);
    w.scalar<std::uint32_t>(f.hyper.min_leaf);
    w.scalar<std::uint32_t>(f.hyper.mtry);
    w.scalar<std::uint64_t>(f.hyper.seed);
    w.scalar<std::uint16_t>(static_cast<std::uint16_t>(f.sae_fingerprint.size()));
    w.bytes(f.sae_fingerprint);
    w.scalar<std::uint32_t>(static_cast<std::uint32_t>(f.pool.size()));
    for (auto j : f.pool) {
        w.scalar<std::uint32_t>(j);
    }
    w.scalar<std::uint32_t>(static_cast<std::uint32_t>(f.trees.size()));
    for (const auto &t : f.trees) {
        w.scalar<std::uint32_t>(static_cast<std::uint32_t>(t.nodes.size()));
        for (const auto &n : t.nodes) {
            w.scalar<std::int32_t>(n.feature);
            w.scalar<float>(n.threshold);
            w.scalar<std::int32_t>(n.left);
            w.scalar<std::int32_t>(n.right);
            w.scalar<float>(n.count0);
            w.scalar<float>(n.count1);
        }
    }
    return w.take();
}

inline Forest parse_forest(std::string_view bytes)
{
    detail::ByteReader r(bytes, "NGRF");
    if (r.bytes(kForestMagic.size()) != kForestMagic) {
        fail(ErrorCode::Malformed, "NGRF: bad magic");
    }
    const auto version = r.scalar<std::uint16_t>();
    if (version != kForestVersion) {
        fail(ErrorCode::UnsupportedVersion, "NGRF: unsupported version " + std::to_string(version));
    }
    Forest f;
    f.hyper.n_trees = r.scalar<std::uint32_t>();
    f.hyper.max_depth = r.scalar<std::uint32_t>();
    f.hyper.min_leaf = r.scalar<std::uint32_t>();
    f.hyper.mtry = r.scalar<std::uint32_t>();
    f.hyper.seed = r.scalar<std::uint64_t>();
    f.sae_fingerprint = std::string(r.bytes(r.scalar<std::uint16_t>()));
    const auto n_pool = r.scalar<std::uint32_t>();
    require(n_pool <= r.remaining() / 4, ErrorCode::Malformed, "NGRF: truncated pool");
    f.pool.resize(n_pool);
    for (auto &j : f.pool) {
        j = r.scalar<std::uint32_t>();
    }
    const auto n_trees = r.scalar<std::uint32_t>();
    require(n_trees == f.hyper.n_trees, ErrorCode::Malformed, "NGRF: tree count differs from header");
    f.trees.resize(n_trees);
    for (auto &t : f.trees) {
        const auto n_nodes = r.scalar<std::uint32_t>();
        require(n_nodes <= r.remaining() / 24, ErrorCode::Malformed, "NGRF: truncated tree");
        t.nodes.resize(n_nodes);
        for (auto &n : t.nodes) {
            n.feature = r.scalar<std::int32_t>();
            n.threshold = r.scalar<float>();
            n.left = r.scalar<std::int32_t>();
            n.right = r.scalar<std::int32_t>();
            n.count0 = r.scalar<float>();
            n.count1 = r.scalar<float>();
        }
    }
    require(r.remaining() == 0, ErrorCode::Malformed, "NGRF: trailing bytes");
    validate_forest(f);
    return f;
}

inline void save_forest(const Forest &f, const std::filesystem::path &path)
{
    detail::write_file(path, serialize_forest(f));
}

inline Forest load_forest(const std::filesystem::path &path) { return parse_forest(detail::read_file(path)); }

} // namespace nextguard

#endif
