#ifndef NEXTGUARD_STARGUARD_HPP
#define NEXTGUARD_STARGUARD_HPP

// Classifier variant of the monitor: token pseudo-labels from a few
// high-F1 labeling features, then a random forest over a larger feature pool.

#include <algorithm>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nextguard/activations.hpp>
#include <nextguard/calibration.hpp>
#include <nextguard/error.hpp>
#include <nextguard/forest.hpp>
#include <nextguard/monitor.hpp>
#include <nextguard/sae.hpp>

namespace nextguard {

struct PseudoLabelConfig {
    std::size_t n_label = 3;
    std::size_t k_pool = 10000;
};

struct LabelingSelection {
    std::vector<std::uint32_t> labeling;
    /// Pool in rank order (best F1 first).
    std::vector<std::uint32_t> pool;
    /// Indicator F1 of every feature.
    std::vector<double> f1;
};

/// Ranks features by the F1 of "unsafe iff pooled activation > 0". `cols`
/// should come from response-masked summaries.
inline LabelingSelection select_labeling_and_pool(const PooledColumns &cols, const PseudoLabelConfig &cfg)
{
    const std::size_t M = cols.dict_size();
    if (cfg.k_pool > M) {
        fail(ErrorCode::InvalidArgument,
             "k_pool=" + std::to_string(cfg.k_pool) + " exceeds dictionary size M=" + std::to_string(M));
    }
    require(cfg.n_label >= 1 && cfg.n_label <= cfg.k_pool, ErrorCode::InvalidArgument,
            "n_label must lie in [1, k_pool]");
    require(cols.n_unsafe() > 0, ErrorCode::InsufficientData, "labeling features need unsafe samples");
    const auto labels = cols.labels();
    LabelingSelection out;
    out.f1.resize(M);
    for (std::size_t j = 0; j < M; ++j) {
        std::size_t tp = 0, fp = 0;
        for (const auto &e : cols.active(j)) {
            if (e.value > 0.0f) {
                (labels[e.index] == Label::Unsafe ? tp : fp) += 1;
            }
        }
        out.f1[j] = 2.0 * static_cast<double>(tp) / static_cast<double>(tp + fp + cols.n_unsafe());
    }
    const auto order = rank_features(out.f1);
    out.pool.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cfg.k_pool));
    out.labeling.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cfg.n_label));
    return out;
}

struct TokenPseudoLabel {
    std::string sample_id;
    std::size_t token_index = 0;
    std::uint8_t label = 0;

    friend bool operator==(const TokenPseudoLabel &, const TokenPseudoLabel &) = default;
};

namespace detail {

inline bool any_active(const FeatureVector &z, std::span<const std::uint32_t> sorted_features)
{
    for (const auto &e : z) {
        if (e.value > 0.0f && std::binary_search(sorted_features.begin(), sorted_features.end(), e.index)) {
            return true;
        }
    }
    return false;
}

inline std::vector<std::uint32_t> sorted_copy(std::span<const std::uint32_t> xs)
{
    std::vector<std::uint32_t> v(xs.begin(), xs.end());
    std::sort(v.begin(), v.end());
    return v;
}

} // namespace detail

/// Label 1 iff the sample is unsafe, the token is in the response span, and
/// some labeling feature is active on it. Every token of every sample gets a label.
inline std::vector<TokenPseudoLabel> generate_pseudo_labels(std::span<const CalibrationSample> samples,
                                                            const SaeParams &params,
                                                            std::span<const std::uint32_t> labeling)
{
    const auto lab = detail::sorted_copy(labeling);
    std::vector<TokenPseudoLabel> out;
    for (const auto &s : samples) {
        detail::check_width(params, s.hidden_states.d);
        for (std::size_t t = 0; t < s.n_tokens(); ++t) {
            std::uint8_t y = 0;
            if (s.label == Label::Unsafe && s.role(t) == TokenRole::Response) {
                y = detail::any_active(encode(params, s.hidden_states.row(t)), lab) ? 1 : 0;
            }
            out.push_back({s.id, t, y});
        }
    }
    return out;
}

/// Maps a code onto pool positions (the forest's column space).
class PoolIndex {
public:
    explicit PoolIndex(std::span<const std::uint32_t> pool)
    {
        for (std::uint32_t c = 0; c < pool.size(); ++c) {
            by_feature_.push_back({pool[c], c});
        }
        std::sort(by_feature_.begin(), by_feature_.end());
        for (std::size_t i = 1; i < by_feature_.size(); ++i) {
            require(by_feature_[i - 1].first != by_feature_[i].first, ErrorCode::InvalidArgument,
                    "feature pool contains duplicates");
        }
    }

    std::vector<FeatureEntry> project(const FeatureVector &z) const
    {
        std::vector<FeatureEntry> row;
        for (const auto &e : z) {
            const auto it = std::lower_bound(by_feature_.begin(), by_feature_.end(),
                                             std::pair<std::uint32_t, std::uint32_t>{e.index, 0});
            if (it != by_feature_.end() && it->first == e.index && e.value != 0.0f) {
                row.push_back({it->second, e.value});
            }
        }
        std::sort(row.begin(), row.end(), [](const FeatureEntry &a, const FeatureEntry &b) { return a.index < b.index; });
        return row;
    }

private:
    std::vector<std::pair<std::uint32_t, std::uint32_t>> by_feature_;
};

struct TrainingSet {
    SparseRows rows;
    std::vector<std::uint8_t> labels;
    /// Source of each row.
    std::vector<TokenPseudoLabel> provenance;
};

/// Training rows: one per response-span token, restricted to pool features.
inline TrainingSet build_training_set(std::span<const CalibrationSample> samples, const SaeParams &params,
                                      const LabelingSelection &sel)
{
    const auto lab = detail::sorted_copy(sel.labeling);
    const PoolIndex index(sel.pool);
    TrainingSet ts{SparseRows(sel.pool.size()), {}, {}};
    for (const auto &s : samples) {
        detail::check_width(params, s.hidden_states.d);
        for (std::size_t t = s.response_span.begin; t < s.response_span.end; ++t) {
            const auto z = encode(params, s.hidden_states.row(t));
            const std::uint8_t y = s.label == Label::Unsafe && detail::any_active(z, lab) ? 1 : 0;
            ts.rows.add_row(index.project(z));
            ts.labels.push_back(y);
            ts.provenance.push_back({s.id, t, y});
        }
    }
    return ts;
}

/// End-to-end training: response-masked pooling, labeling/pool selection,
/// pseudo-labels, forest.
inline Forest train_starguard(std::span<const CalibrationSample> samples, const SaeParams &params,
                              const PseudoLabelConfig &cfg, const ForestParams &hyper,
                              LabelingSelection *selection_out = nullptr)
{
    const auto summaries = aggregate_samples(samples, params, MaskPolicy::ScoreResponseOnly, hyper.n_threads);
    const PooledColumns cols(summaries, params.dict_size());
    auto sel = select_labeling_and_pool(cols, cfg);
    const auto ts = build_training_set(samples, params, sel);
    auto forest = train_forest(ts.rows, ts.labels, hyper, sel.pool, params.fingerprint());
    if (selection_out) {
        *selection_out = std::move(sel);
    }
    return forest;
}

/// Forest class-1 probability as a token risk score.
class ForestScorer final : public TokenScorer {
public:
    explicit ForestScorer(Forest forest) : forest_(std::move(forest)), index_(forest_.pool)
    {
        validate_forest(forest_);
    }

    const Forest &forest() const noexcept { return forest_; }
    const std::string &sae_fingerprint() const noexcept override { return forest_.sae_fingerprint; }

    TokenScore score(const SaeParams &params, std::span<const float> h) const override
    {
        for (auto j : forest_.pool) {
            require(j < params.dict_size(), ErrorCode::IndexOutOfRange, "forest pool feature beyond dictionary");
        }
        return {forest_.predict_proba(index_.project(encode(params, h))), {}};
    }

private:
    Forest forest_;
    PoolIndex index_;
};

/// Probability for one hidden state, with the fingerprint check.
inline double forest_score_token(const Forest &forest, const SaeParams &params, std::span<const float> h)
{
    if (forest.sae_fingerprint != params.fingerprint()) {
        fail(ErrorCode::FingerprintMismatch, "forest was trained against SAE " + forest.sae_fingerprint +
                                                 ", loaded SAE is " + params.fingerprint());
    }
    for (auto j : forest.pool) {
        require(j < params.dict_size(), ErrorCode::IndexOutOfRange, "forest pool feature beyond dictionary");
    }
    return forest.predict_proba(PoolIndex(forest.pool).project(encode(params, h)));
}

inline MonitorConfig forest_monitor(Forest forest, double threshold, MaskPolicy mask = MaskPolicy::ScoreAll,
                                    Decision decision = Decision::HaltOnTrigger)
{
    return {std::make_shared<const ForestScorer>(std::move(forest)), threshold, mask, decision};
}

} // namespace nextguard

#endif
