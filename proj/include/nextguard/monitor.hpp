#ifndef NEXTGUARD_MONITOR_HPP
#define NEXTGUARD_MONITOR_HPP

// Online stage: score each incoming token and decide whether to intervene.
//
// A token's risk is c_t = sum_{j in S} s_j * v_j(y_t), computed from that
// token's hidden state alone. A session triggers on the first scored token
// with c_t > threshold (strict).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nextguard/activations.hpp>
#include <nextguard/calibration.hpp>
#include <nextguard/error.hpp>
#include <nextguard/sae.hpp>

namespace nextguard {

struct FeatureContribution {
    std::uint32_t index = 0;
    double contribution = 0.0;
};

struct TokenScore {
    double score = 0.0;
    std::vector<FeatureContribution> contributions;
};

/// Maps one token's hidden state to a risk score. Implementations are
/// immutable and shared across sessions.
class TokenScorer {
public:
    virtual ~TokenScorer() = default;

    virtual const std::string &sae_fingerprint() const noexcept = 0;
    virtual TokenScore score(const SaeParams &params, std::span<const float> h) const = 0;
};

/// Weighted sum of the selected features' activations.
class WeightedSumScorer final : public TokenScorer {
public:
    explicit WeightedSumScorer(SafetyFeatureSet features) : features_(std::move(features))
    {
        require(!features_.features.empty(), ErrorCode::InvalidArgument, "feature set is empty");
    }

    const SafetyFeatureSet &feature_set() const noexcept { return features_; }
    const std::string &sae_fingerprint() const noexcept override { return features_.sae_fingerprint; }

    TokenScore score(const SaeParams &params, std::span<const float> h) const override
    {
        TokenScore out;
        out.contributions.reserve(features_.features.size());
        const auto add = [&](const WeightedFeature &f, float v) {
            if (v > 0.0f) {
                const double c = f.weight * static_cast<double>(v);
                out.contributions.push_back({f.index, c});
                out.score += c;
            }
        };
        for (const auto &f : features_.features) {
            if (f.index >= params.dict_size()) {
                fail(ErrorCode::IndexOutOfRange, "selected feature " + std::to_string(f.index) +
                                                     " >= M=" + std::to_string(params.dict_size()));
            }
        }
        if (params.sparsity().kind == SparsityKind::Relu) {
            // ReLU codes are coordinate-wise, so only the selected rows are needed.
            const auto c = detail::centered(params, h);
            for (const auto &f : features_.features) {
                add(f, static_cast<float>(detail::pre_activation(params, f.index, c)));
            }
        } else {
            // TopK membership depends on every pre-activation.
            const auto z = encode(params, h);
            for (const auto &f : features_.features) {
                add(f, z.value(f.index));
            }
        }
        return out;
    }

private:
    SafetyFeatureSet features_;
};

enum class Decision : std::uint8_t { HaltOnTrigger, FlagOnly };

struct MonitorConfig {
    std::shared_ptr<const TokenScorer> scorer;
    double threshold = 0.0;
    MaskPolicy mask_policy = MaskPolicy::ScoreAll;
    Decision decision = Decision::HaltOnTrigger;

    static MonitorConfig weighted(SafetyFeatureSet fs, double threshold, MaskPolicy mask = MaskPolicy::ScoreAll,
                                  Decision decision = Decision::HaltOnTrigger)
    {
        return {std::make_shared<const WeightedSumScorer>(std::move(fs)), threshold, mask, decision};
    }
};

inline void validate_config(const MonitorConfig &cfg, const SaeParams &params)
{
    require(cfg.scorer != nullptr, ErrorCode::InvalidArgument, "monitor has no scorer");
    require(!std::isnan(cfg.threshold), ErrorCode::InvalidArgument, "threshold is NaN");
    if (cfg.scorer->sae_fingerprint() != params.fingerprint()) {
        fail(ErrorCode::FingerprintMismatch, "scorer was calibrated against SAE " + cfg.scorer->sae_fingerprint() +
                                                 ", loaded SAE is " + params.fingerprint());
    }
}

struct RiskEvent {
    std::size_t token_index = 0;
    double score = 0.0;
    bool scored = false;
    bool triggered = false;
    std::vector<FeatureContribution> active_features;
};

/// Scores one token without session state.
inline RiskEvent score_token(const MonitorConfig &cfg, const SaeParams &params, std::span<const float> h,
                             std::size_t token_index = 0)
{
    validate_config(cfg, params);
    auto s = cfg.scorer->score(params, h);
    RiskEvent ev;
    ev.token_index = token_index;
    ev.score = s.score;
    ev.scored = true;
    ev.triggered = s.score > cfg.threshold;
    ev.active_features = std::move(s.contributions);
    return ev;
}

struct SessionState {
    std::string session_id;
    std::size_t tokens_seen = 0;
    std::size_t tokens_scored = 0;
    /// Running maximum over scored tokens; 0 before any token is scored.
    double max_score = 0.0;
    std::optional<std::size_t> triggered_at;
    std::optional<TokenRole> last_role;
    bool halted = false;
    bool closed = false;
};

/// Advances a session by one token. Tokens whose role is excluded by the mask
/// are counted but not scored. Under HaltOnTrigger the first trigger halts the
/// session and any further feed is an error.
inline RiskEvent feed(SessionState &session, const MonitorConfig &cfg, const SaeParams &params,
                      std::span<const float> h, TokenRole role)
{
    if (session.closed) {
        fail(ErrorCode::SessionClosed, "session " + session.session_id + " is closed");
    }
    if (session.halted) {
        fail(ErrorCode::SessionHalted, "session " + session.session_id + " halted at token " +
                                           std::to_string(session.triggered_at.value_or(0)));
    }
    if (role == TokenRole::Prompt && session.last_role == TokenRole::Response) {
        fail(ErrorCode::RoleOrder, "session " + session.session_id + ": prompt token after response tokens");
    }
    detail::check_width(params, h.size());
    RiskEvent ev;
    ev.token_index = session.tokens_seen;
    if (is_scored(cfg.mask_policy, role)) {
        ev = score_token(cfg, params, h, session.tokens_seen);
        session.max_score = session.tokens_scored == 0 ? ev.score : std::max(session.max_score, ev.score);
        ++session.tokens_scored;
        if (ev.triggered && !session.triggered_at) {
            session.triggered_at = ev.token_index;
            if (cfg.decision == Decision::HaltOnTrigger) {
                session.halted = true;
            }
        }
    }
    session.last_role = role;
    ++session.tokens_seen;
    return ev;
}

inline SessionState open_session(std::string session_id)
{
    SessionState s;
    s.session_id = std::move(session_id);
    return s;
}

inline void close_session(SessionState &session) { session.closed = true; }

inline Label session_verdict(const SessionState &session)
{
    if (!session.closed) {
        fail(ErrorCode::SessionOpen, "session " + session.session_id + " is still open");
    }
    return session.triggered_at ? Label::Unsafe : Label::Safe;
}

/// Threshold whose session-level false-trigger rate on safe validation
/// sessions is at most `target_fpr`: the lower nearest-rank (1 - fpr)
/// quantile of their per-session maximum scores.
inline double calibrate_threshold(std::span<const double> safe_session_max_scores, double target_fpr)
{
    if (safe_session_max_scores.size() < 20) {
        fail(ErrorCode::InsufficientData, "threshold calibration needs at least 20 safe sessions, got " +
                                              std::to_string(safe_session_max_scores.size()));
    }
    require(target_fpr > 0.0 && target_fpr <= 1.0, ErrorCode::InvalidArgument, "target_fpr must lie in (0, 1]");
    std::vector<double> s(safe_session_max_scores.begin(), safe_session_max_scores.end());
    std::sort(s.begin(), s.end());
    const double n = static_cast<double>(s.size());
    auto rank = static_cast<std::size_t>(std::ceil((1.0 - target_fpr) * n - 1e-9));
    rank = std::clamp<std::size_t>(rank, 1, s.size());
    return s[rank - 1];
}

} // namespace nextguard

#endif
