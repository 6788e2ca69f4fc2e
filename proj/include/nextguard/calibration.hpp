#ifndef NEXTGUARD_CALIBRATION_HPP
#define NEXTGUARD_CALIBRATION_HPP

// Offline calibration: max-pool each labeled trajectory's SAE codes into one
// sample-level vector, score every feature's association with the unsafe
// label, and keep the top K as a SafetyFeatureSet.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <boost/math/special_functions/digamma.hpp>
#include <nlohmann/json.hpp>

#include <nextguard/activations.hpp>
#include <nextguard/detail/numeric.hpp>
#include <nextguard/detail/random.hpp>
#include <nextguard/error.hpp>
#include <nextguard/sae.hpp>

namespace nextguard {

enum class Metric : std::uint8_t { Smd, ThresholdF1, Pearson, MutualInfo };

inline std::string_view to_string(Metric m) noexcept
{
    switch (m) {
    case Metric::Smd: return "smd";
    case Metric::ThresholdF1: return "threshold_f1";
    case Metric::Pearson: return "pearson";
    case Metric::MutualInfo: return "mutual_info";
    }
    return "smd";
}

inline Metric parse_metric(std::string_view s)
{
    for (auto m : {Metric::Smd, Metric::ThresholdF1, Metric::Pearson, Metric::MutualInfo}) {
        if (to_string(m) == s) {
            return m;
        }
    }
    fail(ErrorCode::InvalidArgument, "unknown metric '" + std::string(s) + "'");
}

/// Signed metrics only select features that rise on unsafe content.
constexpr bool requires_positive_score(Metric m) noexcept
{
    return m == Metric::Smd || m == Metric::Pearson;
}

inline constexpr double kDefaultEpsilon = 1e-8;

// ---------------------------------------------------------------------------
// Sample-level aggregation

struct SampleFeatureSummary {
    std::string sample_id;
    Label label = Label::Safe;
    std::optional<std::string> category;
    FeatureVector pooled;
};

/// Coordinate-wise max of the SAE codes of every token selected by `mask`.
inline SampleFeatureSummary aggregate_sample(const CalibrationSample &sample, const SaeParams &params,
                                             MaskPolicy mask = MaskPolicy::ScoreContentOnly)
{
    if (sample.hidden_states.d != params.width()) {
        fail(ErrorCode::DimensionMismatch, "sample " + sample.id + ": hidden states have d=" +
                                               std::to_string(sample.hidden_states.d) + ", SAE expects " +
                                               std::to_string(params.width()));
    }
    std::vector<float> pooled(params.dict_size(), 0.0f);
    std::vector<std::uint32_t> touched;
    std::size_t used = 0;
    for (std::size_t t = 0; t < sample.n_tokens(); ++t) {
        if (!is_scored(mask, sample.role(t))) {
            continue;
        }
        ++used;
        for (const auto &e : encode(params, sample.hidden_states.row(t))) {
            if (pooled[e.index] == 0.0f) {
                touched.push_back(e.index);
            }
            pooled[e.index] = std::max(pooled[e.index], e.value);
        }
    }
    if (used == 0) {
        fail(ErrorCode::InsufficientData, "sample " + sample.id + ": mask selects no tokens");
    }
    std::sort(touched.begin(), touched.end());
    SampleFeatureSummary s{sample.id, sample.label, sample.category, {}};
    s.pooled.dense_len = params.dict_size();
    s.pooled.entries.reserve(touched.size());
    for (auto j : touched) {
        s.pooled.entries.push_back({j, pooled[j]});
    }
    return s;
}

/// Aggregates every sample; samples are independent, so they are split
/// across `n_threads` workers without affecting the result.
inline std::vector<SampleFeatureSummary> aggregate_samples(std::span<const CalibrationSample> samples,
                                                           const SaeParams &params,
                                                           MaskPolicy mask = MaskPolicy::ScoreContentOnly,
                                                           unsigned n_threads = 1)
{
    std::vector<SampleFeatureSummary> out(samples.size());
    n_threads = std::max(1u, std::min<unsigned>(n_threads, static_cast<unsigned>(samples.size())));
    if (n_threads <= 1) {
        for (std::size_t i = 0; i < samples.size(); ++i) {
            out[i] = aggregate_sample(samples[i], params, mask);
        }
        return out;
    }
    std::vector<std::exception_ptr> errors(n_threads);
    {
        std::vector<std::jthread> workers;
        for (unsigned w = 0; w < n_threads; ++w) {
            workers.emplace_back([&, w] {
                try {
                    for (std::size_t i = w; i < samples.size(); i += n_threads) {
                        out[i] = aggregate_sample(samples[i], params, mask);
                    }
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
    }
    for (auto &e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Per-feature statistics

/// Column view of pooled vectors: for each feature, the samples where it is
/// active. Absent entries mean activation 0.
class PooledColumns {
public:
    PooledColumns(std::span<const SampleFeatureSummary> summaries, std::size_t M)
        : M_(M), cols_(M)
    {
        labels_.reserve(summaries.size());
        for (std::size_t i = 0; i < summaries.size(); ++i) {
            labels_.push_back(summaries[i].label);
            (summaries[i].label == Label::Unsafe ? n_unsafe_ : n_safe_) += 1;
            for (const auto &e : summaries[i].pooled) {
                if (e.index >= M) {
                    fail(ErrorCode::IndexOutOfRange, "pooled feature index " + std::to_string(e.index) +
                                                         " >= M=" + std::to_string(M));
                }
                cols_[e.index].push_back({static_cast<std::uint32_t>(i), e.value});
            }
        }
    }

    std::size_t dict_size() const noexcept { return M_; }
    std::size_t n_samples() const noexcept { return labels_.size(); }
    std::size_t n_safe() const noexcept { return n_safe_; }
    std::size_t n_unsafe() const noexcept { return n_unsafe_; }
    std::span<const Label> labels() const noexcept { return labels_; }
    std::span<const FeatureEntry> active(std::size_t j) const noexcept { return cols_[j]; }

    std::vector<double> dense(std::size_t j) const
    {
        std::vector<double> v(labels_.size(), 0.0);
        for (const auto &e : cols_[j]) {
            v[e.index] = e.value;
        }
        return v;
    }

private:
    std::size_t M_;
    std::vector<Label> labels_;
    std::size_t n_safe_ = 0;
    std::size_t n_unsafe_ = 0;
    // FeatureEntry reused with index = sample position.
    std::vector<std::vector<FeatureEntry>> cols_;
};

struct FeatureStats {
    Metric metric = Metric::Smd;
    double epsilon = kDefaultEpsilon;
    std::vector<double> mu_safe;
    std::vector<double> sigma_safe;
    std::vector<double> mu_unsafe;
    std::vector<double> sigma_unsafe;
    std::vector<double> score;

    std::size_t size() const noexcept { return score.size(); }
};

/// Standardized mean difference with a denominator stabilizer; equal class
/// means give exactly zero.
inline double smd_score(double mu_unsafe, double sigma_unsafe, double mu_safe, double sigma_safe,
                        double epsilon = kDefaultEpsilon) noexcept
{
    if (mu_unsafe == mu_safe) {
        return 0.0;
    }
    return (mu_unsafe - mu_safe) / (sigma_unsafe + sigma_safe + epsilon);
}

namespace detail {

inline void fill_class_moments(const PooledColumns &cols, FeatureStats &st)
{
    const std::size_t M = cols.dict_size();
    st.mu_safe.assign(M, 0.0);
    st.sigma_safe.assign(M, 0.0);
    st.mu_unsafe.assign(M, 0.0);
    st.sigma_unsafe.assign(M, 0.0);
    std::vector<double> safe_vals, unsafe_vals;
    for (std::size_t j = 0; j < M; ++j) {
        safe_vals.clear();
        unsafe_vals.clear();
        for (const auto &e : cols.active(j)) {
            (cols.labels()[e.index] == Label::Unsafe ? unsafe_vals : safe_vals).push_back(e.value);
        }
        const auto s = population_mean_std(safe_vals, cols.n_safe() - safe_vals.size());
        const auto u = population_mean_std(unsafe_vals, cols.n_unsafe() - unsafe_vals.size());
        st.mu_safe[j] = s.mean;
        st.sigma_safe[j] = s.std;
        st.mu_unsafe[j] = u.mean;
        st.sigma_unsafe[j] = u.std;
    }
}

inline void require_both_classes(std::size_t n_safe, std::size_t n_unsafe)
{
    if (n_safe < 1 || n_unsafe < 1) {
        fail(ErrorCode::InsufficientData, "need at least one safe and one unsafe sample (got " +
                                              std::to_string(n_safe) + " safe, " + std::to_string(n_unsafe) +
                                              " unsafe)");
    }
}

} // namespace detail

inline FeatureStats compute_smd(const PooledColumns &cols, double epsilon = kDefaultEpsilon)
{
    detail::require_both_classes(cols.n_safe(), cols.n_unsafe());
    FeatureStats st;
    st.metric = Metric::Smd;
    st.epsilon = epsilon;
    detail::fill_class_moments(cols, st);
    st.score.resize(cols.dict_size());
    for (std::size_t j = 0; j < st.score.size(); ++j) {
        st.score[j] = smd_score(st.mu_unsafe[j], st.sigma_unsafe[j], st.mu_safe[j], st.sigma_safe[j], epsilon);
    }
    return st;
}

inline FeatureStats compute_smd(std::span<const SampleFeatureSummary> summaries, std::size_t M,
                                double epsilon = kDefaultEpsilon)
{
    return compute_smd(PooledColumns(summaries, M), epsilon);
}

struct ThresholdF1 {
    double f1 = 0.0;
    /// Smallest threshold reaching `f1`; +inf when no threshold beats "never fire".
    double threshold = std::numeric_limits<double>::infinity();
};

/// Best unsafe-class F1 of the rule "unsafe iff value >= t", sweeping t over
/// the distinct observed values (and +inf).
inline ThresholdF1 compute_threshold_f1(std::span<const double> values, std::span<const Label> labels)
{
    require(values.size() == labels.size(), ErrorCode::DimensionMismatch, "values and labels differ in length");
    const auto n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), Label::Unsafe));
    if (n_pos == 0) {
        fail(ErrorCode::InsufficientData, "threshold F1 needs at least one unsafe sample");
    }
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
    ThresholdF1 best;
    std::size_t tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double v = values[order[i]];
        while (i < order.size() && values[order[i]] == v) {
            (labels[order[i]] == Label::Unsafe ? tp : fp) += 1;
            ++i;
        }
        const double f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(tp + fp + n_pos);
        if (f1 >= best.f1 && tp > 0) {
            best = {f1, v};
        }
    }
    return best;
}

/// Unsafe-class F1 of the fixed rule "unsafe iff value > 0".
inline double compute_indicator_f1(std::span<const double> values, std::span<const Label> labels)
{
    require(values.size() == labels.size(), ErrorCode::DimensionMismatch, "values and labels differ in length");
    std::size_t tp = 0, fp = 0, n_pos = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        const bool pos = labels[i] == Label::Unsafe;
        n_pos += pos;
        if (values[i] > 0.0) {
            (pos ? tp : fp) += 1;
        }
    }
    if (n_pos == 0) {
        fail(ErrorCode::InsufficientData, "indicator F1 needs at least one unsafe sample");
    }
    return 2.0 * static_cast<double>(tp) / static_cast<double>(tp + fp + n_pos);
}

struct Correlation {
    double rho = 0.0;
    /// Set when either input has zero variance; rho is then 0.
    bool degenerate = false;
};

inline Correlation pearson(std::span<const double> x, std::span<const double> y)
{
    require(x.size() == y.size(), ErrorCode::DimensionMismatch, "pearson: length mismatch");
    const std::size_t n = x.size();
    if (n == 0) {
        return {0.0, true};
    }
    const double mx = detail::pairwise_sum(x) / static_cast<double>(n);
    const double my = detail::pairwise_sum(y) / static_cast<double>(n);
    std::vector<double> sxy(n), sxx(n), syy(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxy[i] = dx * dy;
        sxx[i] = dx * dx;
        syy[i] = dy * dy;
    }
    const double vx = detail::pairwise_sum(sxx);
    const double vy = detail::pairwise_sum(syy);
    if (vx <= 0.0 || vy <= 0.0) {
        return {0.0, true};
    }
    const double r = detail::pairwise_sum(sxy) / (std::sqrt(vx) * std::sqrt(vy));
    return {std::clamp(r, -1.0, 1.0), false};
}

inline Correlation compute_pearson(std::span<const double> values, std::span<const Label> labels)
{
    std::vector<double> y(labels.size());
    std::transform(labels.begin(), labels.end(), y.begin(),
                   [](Label l) { return l == Label::Unsafe ? 1.0 : 0.0; });
    return pearson(values, y);
}

/// Average ranks (1-based), ties share their mean rank.
inline std::vector<double> average_ranks(std::span<const double> xs)
{
    std::vector<std::size_t> order(xs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(xs.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && xs[order[j]] == xs[order[i]]) {
            ++j;
        }
        const double r = 0.5 * static_cast<double>(i + j + 1);
        for (std::size_t k = i; k < j; ++k) {
            ranks[order[k]] = r;
        }
        i = j;
    }
    return ranks;
}

inline double spearman(std::span<const double> x, std::span<const double> y)
{
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    return pearson(rx, ry).rho;
}

struct MutualInfoOptions {
    std::size_t k_nn = 3;
    double jitter = 1e-10;
    std::uint64_t seed = 0x5eed;
};

/// kNN estimate (nats) of I(value; label) for a continuous value and a
/// discrete label. For each point, d is the distance to its k-th nearest
/// neighbour within its own class and m counts all points within d:
///     I = psi(N) + psi(k) - <psi(N_c)> - <psi(m)>
/// Ties are broken by adding uniform jitter of the given magnitude.
inline double compute_mutual_info(std::span<const double> values, std::span<const Label> labels,
                                  const MutualInfoOptions &opt = {})
{
    require(values.size() == labels.size(), ErrorCode::DimensionMismatch, "values and labels differ in length");
    require(opt.k_nn >= 1, ErrorCode::InvalidArgument, "k_nn must be positive");
    const std::size_t n = values.size();
    detail::Rng rng(opt.seed);
    std::vector<double> x(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = values[i] + opt.jitter * rng.uniform();
    }
    std::vector<double> by_class[2];
    for (std::size_t i = 0; i < n; ++i) {
        by_class[static_cast<int>(labels[i])].push_back(x[i]);
    }
    for (const auto &c : by_class) {
        if (c.size() < opt.k_nn + 1) {
            fail(ErrorCode::InsufficientData, "mutual information needs at least k_nn + 1 samples per class");
        }
    }
    for (auto &c : by_class) {
        std::sort(c.begin(), c.end());
    }
    std::vector<double> all = x;
    std::sort(all.begin(), all.end());

    using boost::math::digamma;
    std::vector<double> terms(n);
    const auto k = opt.k_nn;
    for (std::size_t i = 0; i < n; ++i) {
        const auto &cls = by_class[static_cast<int>(labels[i])];
        // Expand outwards from x[i] inside its class; k-th neighbour excludes the point itself.
        auto pos = static_cast<std::size_t>(std::lower_bound(cls.begin(), cls.end(), x[i]) - cls.begin());
        std::size_t lo = pos, hi = pos + 1; // [lo, hi) consumed, self at pos
        double dist = 0.0;
        for (std::size_t step = 0; step < k; ++step) {
            const double dl = lo > 0 ? x[i] - cls[lo - 1] : std::numeric_limits<double>::infinity();
            const double dh = hi < cls.size() ? cls[hi] - x[i] : std::numeric_limits<double>::infinity();
            if (dl <= dh) {
                dist = dl;
                --lo;
            } else {
                dist = dh;
                ++hi;
            }
        }
        const auto first = std::lower_bound(all.begin(), all.end(), x[i] - dist);
        const auto last = std::upper_bound(all.begin(), all.end(), x[i] + dist);
        const auto m = static_cast<double>(last - first) - 1.0;
        terms[i] = digamma(static_cast<double>(cls.size())) + digamma(std::max(m, 1.0));
    }
    const double mi = digamma(static_cast<double>(n)) + digamma(static_cast<double>(k)) -
                      detail::pairwise_sum(terms) / static_cast<double>(n);
    return std::max(0.0, mi);
}

struct MetricOptions {
    double epsilon = kDefaultEpsilon;
    MutualInfoOptions mutual_info;
};

/// Class moments for every feature plus the score of `metric`.
inline FeatureStats compute_feature_stats(const PooledColumns &cols, Metric metric, const MetricOptions &opt = {})
{
    FeatureStats st = compute_smd(cols, opt.epsilon);
    st.metric = metric;
    if (metric == Metric::Smd) {
        return st;
    }
    const auto labels = cols.labels();
    for (std::size_t j = 0; j < cols.dict_size(); ++j) {
        const auto v = cols.dense(j);
        switch (metric) {
        case Metric::ThresholdF1: st.score[j] = compute_threshold_f1(v, labels).f1; break;
        case Metric::Pearson: st.score[j] = compute_pearson(v, labels).rho; break;
        case Metric::MutualInfo: st.score[j] = compute_mutual_info(v, labels, opt.mutual_info); break;
        case Metric::Smd: break;
        }
    }
    return st;
}

inline FeatureStats compute_feature_stats(std::span<const SampleFeatureSummary> summaries, std::size_t M,
                                          Metric metric, const MetricOptions &opt = {})
{
    return compute_feature_stats(PooledColumns(summaries, M), metric, opt);
}

// ---------------------------------------------------------------------------
// Feature selection

struct WeightedFeature {
    std::uint32_t index = 0;
    double weight = 0.0;

    friend bool operator==(const WeightedFeature &, const WeightedFeature &) = default;
};

struct SafetyFeatureSet {
    Metric metric = Metric::Smd;
    /// Sorted by descending weight, ties by ascending index.
    std::vector<WeightedFeature> features;
    double epsilon = kDefaultEpsilon;
    std::string sae_fingerprint;

    std::size_t K() const noexcept { return features.size(); }

    friend bool operator==(const SafetyFeatureSet &, const SafetyFeatureSet &) = default;
};

/// Indices of all features ordered by descending score, ties by index.
inline std::vector<std::uint32_t> rank_features(std::span<const double> score)
{
    std::vector<std::uint32_t> order(score.size());
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) { return score[a] > score[b]; });
    return order;
}

/// Top-K features by score. Under signed metrics only positive scores are
/// eligible, so the set can hold fewer than K features.
inline SafetyFeatureSet select_features(const FeatureStats &stats, std::size_t K, std::string sae_fingerprint)
{
    require(K >= 1, ErrorCode::InvalidArgument, "K must be positive");
    if (K > stats.size()) {
        fail(ErrorCode::InvalidArgument,
             "K=" + std::to_string(K) + " exceeds dictionary size M=" + std::to_string(stats.size()));
    }
    SafetyFeatureSet fs;
    fs.metric = stats.metric;
    fs.epsilon = stats.epsilon;
    fs.sae_fingerprint = std::move(sae_fingerprint);
    for (auto j : rank_features(stats.score)) {
        if (fs.features.size() == K) {
            break;
        }
        const double s = stats.score[j];
        if (!std::isfinite(s) || (requires_positive_score(stats.metric) && !(s > 0.0))) {
            continue;
        }
        fs.features.push_back({j, s});
    }
    return fs;
}

/// Spearman correlation of two score vectors over features scored nonzero by
/// either one.
inline double rank_consistency(const FeatureStats &a, const FeatureStats &b)
{
    require(a.size() == b.size(), ErrorCode::DimensionMismatch, "rank_consistency: different feature universes");
    std::vector<double> xa, xb;
    for (std::size_t j = 0; j < a.size(); ++j) {
        if (a.score[j] != 0.0 || b.score[j] != 0.0) {
            xa.push_back(a.score[j]);
            xb.push_back(b.score[j]);
        }
    }
    if (xa.size() < 3) {
        fail(ErrorCode::InsufficientData, "rank_consistency needs at least 3 comparable features");
    }
    return spearman(xa, xb);
}

// ---------------------------------------------------------------------------
// SafetyFeatureSet file (JSON text)

inline nlohmann::json to_json(const SafetyFeatureSet &fs)
{
    nlohmann::json j;
    j["format"] = "nextguard.feature_set";
    j["version"] = 1;
    j["metric"] = to_string(fs.metric);
    j["K"] = fs.K();
    j["epsilon"] = fs.epsilon;
    j["sae_fingerprint"] = fs.sae_fingerprint;
    auto feats = nlohmann::json::array();
    for (const auto &f : fs.features) {
        feats.push_back({f.index, f.weight});
    }
    j["features"] = std::move(feats);
    return j;
}

inline SafetyFeatureSet feature_set_from_json(const nlohmann::json &j)
{
    try {
        require(j.value("format", std::string{}) == "nextguard.feature_set", ErrorCode::Malformed,
                "not a nextguard feature set");
        require(j.at("version").get<int>() == 1, ErrorCode::UnsupportedVersion, "unsupported feature set version");
        SafetyFeatureSet fs;
        fs.metric = parse_metric(j.at("metric").get<std::string>());
        fs.epsilon = j.at("epsilon").get<double>();
        fs.sae_fingerprint = j.at("sae_fingerprint").get<std::string>();
        for (const auto &f : j.at("features")) {
            fs.features.push_back({f.at(0).get<std::uint32_t>(), f.at(1).get<double>()});
        }
        require(j.at("K").get<std::size_t>() == fs.features.size(), ErrorCode::Malformed,
                "feature set K disagrees with its feature list");
        for (std::size_t i = 0; i < fs.features.size(); ++i) {
            require(std::isfinite(fs.features[i].weight), ErrorCode::NonFinite, "feature set weight not finite");
            for (std::size_t k = 0; k < i; ++k) {
                require(fs.features[k].index != fs.features[i].index, ErrorCode::Malformed,
                        "feature set repeats an index");
            }
        }
        return fs;
    } catch (const nlohmann::json::exception &ex) {
        fail(ErrorCode::Malformed, std::string("feature set: ") + ex.what());
    }
}

inline void save_feature_set(const SafetyFeatureSet &fs, const std::filesystem::path &path)
{
    detail::write_file(path, to_json(fs).dump(2) + "\n");
}

inline SafetyFeatureSet load_feature_set(const std::filesystem::path &path)
{
    try {
        return feature_set_from_json(nlohmann::json::parse(detail::read_file(path)));
    } catch (const nlohmann::json::exception &ex) {
        fail(ErrorCode::Malformed, path.string() + ": " + ex.what());
    }
}

// ---------------------------------------------------------------------------

/// Stage-1 calibration in one call: aggregate, score, select.
inline SafetyFeatureSet calibrate(std::span<const CalibrationSample> samples, const SaeParams &params, std::size_t K,
                                  Metric metric = Metric::Smd, MaskPolicy mask = MaskPolicy::ScoreContentOnly,
                                  const MetricOptions &opt = {})
{
    if (K > params.dict_size()) {
        fail(ErrorCode::InvalidArgument,
             "K=" + std::to_string(K) + " exceeds dictionary size M=" + std::to_string(params.dict_size()));
    }
    const auto summaries = aggregate_samples(samples, params, mask);
    const auto stats = compute_feature_stats(summaries, params.dict_size(), metric, opt);
    return select_features(stats, K, params.fingerprint());
}

} // namespace nextguard

#endif
