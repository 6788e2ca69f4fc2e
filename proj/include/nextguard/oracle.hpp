#ifndef NEXTGUARD_ORACLE_HPP
#define NEXTGUARD_ORACLE_HPP

// Synthetic ground truth: an SAE with planted safety features and datasets
// whose hidden states are decoded from known latent codes.
//
// Decoder layout: the planted columns are the first columns of a random
// orthonormal basis; every noise column lies in the span of the remaining
// basis vectors. With W_enc = W_dec^T the planted pre-activations are
// therefore exact, whatever the noise features do.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <nextguard/activations.hpp>
#include <nextguard/detail/random.hpp>
#include <nextguard/error.hpp>
#include <nextguard/sae.hpp>

namespace nextguard {

struct OracleSpec {
    std::size_t d = 64;
    std::size_t M = 1024;
    /// TopK k; 0 builds a ReLU SAE.
    std::size_t k = 32;
    std::size_t n_planted = 8;
    std::size_t n_safe = 200;
    std::size_t n_unsafe = 200;
    std::size_t min_tokens = 20;
    std::size_t max_tokens = 40;
    /// Template tokens: one before the prompt, one between prompt and response.
    bool template_tokens = true;
    double prompt_fraction = 0.1;
    /// Onset relative position, uniform over [onset_lo, onset_hi].
    double onset_lo = 0.2;
    double onset_hi = 0.8;
    /// Per-token firing probability of each noise feature.
    double noise_rate = 0.05;
    double noise_min = 0.2;
    double noise_max = 1.0;
    double signal_strength = 4.0;
    /// Planted activations are signal_strength * U(1 - jitter, 1 + jitter).
    double signal_jitter = 0.25;
    /// Home-category features fire on the onset token, then with this
    /// probability per token.
    double signal_density = 0.6;
    /// Planted features of other categories fire at cross_scale * signal: on
    /// the onset token, then with this probability per token.
    double cross_rate = 0.3;
    double cross_scale = 0.5;
    /// Per-token probability that safe content fires one planted feature at
    /// decoy_scale * signal.
    double decoy_rate = 0.05;
    double decoy_scale = 0.3;
    std::size_t n_categories = 4;
    double residual_sigma = 0.01;
    /// False yields unsafe samples that carry no planted signal at all.
    bool signal_enabled = true;
    std::uint32_t layer_index = 0;
    std::uint64_t seed = 7;

    friend bool operator==(const OracleSpec &, const OracleSpec &) = default;
};

inline void validate_spec(const OracleSpec &s)
{
    const auto prob = [](double p, const char *name) {
        require(p >= 0.0 && p <= 1.0, ErrorCode::InvalidArgument, std::string(name) + " must lie in [0, 1]");
    };
    require(s.d >= 2 && s.M >= 1, ErrorCode::InvalidArgument, "oracle needs d >= 2 and M >= 1");
    require(s.n_planted >= 1 && s.n_planted < s.M, ErrorCode::InvalidArgument, "n_planted must lie in [1, M)");
    require(s.n_planted < s.d, ErrorCode::InvalidArgument,
            "d=" + std::to_string(s.d) + " is too small for " + std::to_string(s.n_planted) +
                " orthogonal planted columns plus a noise subspace");
    require(s.k <= s.M, ErrorCode::InvalidArgument, "k must not exceed M");
    require(s.min_tokens >= 4 && s.min_tokens <= s.max_tokens, ErrorCode::InvalidArgument,
            "token range must satisfy 4 <= min_tokens <= max_tokens");
    require(s.n_categories >= 1, ErrorCode::InvalidArgument, "n_categories must be >= 1");
    prob(s.prompt_fraction, "prompt_fraction");
    prob(s.onset_lo, "onset_lo");
    prob(s.onset_hi, "onset_hi");
    require(s.onset_lo <= s.onset_hi, ErrorCode::InvalidArgument, "onset_lo must not exceed onset_hi");
    prob(s.noise_rate, "noise_rate");
    prob(s.signal_density, "signal_density");
    prob(s.cross_rate, "cross_rate");
    prob(s.decoy_rate, "decoy_rate");
    prob(s.signal_jitter, "signal_jitter");
    require(s.noise_min >= 0.0 && s.noise_min <= s.noise_max, ErrorCode::InvalidArgument,
            "noise amplitude range is empty");
    require(s.signal_strength > s.noise_max, ErrorCode::InvalidArgument,
            "signal_strength must exceed the largest noise activation");
    require(s.residual_sigma >= 0.0, ErrorCode::InvalidArgument, "residual_sigma must be >= 0");
}

inline nlohmann::json to_json(const OracleSpec &s)
{
    return {{"format", "nextguard.oracle_spec"},
            {"version", 1},
            {"d", s.d},
            {"M", s.M},
            {"k", s.k},
            {"n_planted", s.n_planted},
            {"n_safe", s.n_safe},
            {"n_unsafe", s.n_unsafe},
            {"min_tokens", s.min_tokens},
            {"max_tokens", s.max_tokens},
            {"template_tokens", s.template_tokens},
            {"prompt_fraction", s.prompt_fraction},
            {"onset_lo", s.onset_lo},
            {"onset_hi", s.onset_hi},
            {"noise_rate", s.noise_rate},
            {"noise_min", s.noise_min},
            {"noise_max", s.noise_max},
            {"signal_strength", s.signal_strength},
            {"signal_jitter", s.signal_jitter},
            {"signal_density", s.signal_density},
            {"cross_rate", s.cross_rate},
            {"cross_scale", s.cross_scale},
            {"decoy_rate", s.decoy_rate},
            {"decoy_scale", s.decoy_scale},
            {"n_categories", s.n_categories},
            {"residual_sigma", s.residual_sigma},
            {"signal_enabled", s.signal_enabled},
            {"layer_index", s.layer_index},
            {"seed", s.seed}};
}

/// Missing keys keep their defaults; unknown keys are ignored.
inline OracleSpec oracle_spec_from_json(const nlohmann::json &j)
{
    OracleSpec s;
    try {
        require(j.is_object(), ErrorCode::Malformed, "oracle spec must be an object");
        if (j.contains("version")) {
            require(j["version"].get<int>() == 1, ErrorCode::UnsupportedVersion, "oracle spec: unsupported version");
        }
        const auto get = [&](const char *key, auto &field) {
            if (j.contains(key)) {
                field = j[key].get<std::remove_reference_t<decltype(field)>>();
            }
        };
        get("d", s.d);
        get("M", s.M);
        get("k", s.k);
        get("n_planted", s.n_planted);
        get("n_safe", s.n_safe);
        get("n_unsafe", s.n_unsafe);
        get("min_tokens", s.min_tokens);
        get("max_tokens", s.max_tokens);
        get("template_tokens", s.template_tokens);
        get("prompt_fraction", s.prompt_fraction);
        get("onset_lo", s.onset_lo);
        get("onset_hi", s.onset_hi);
        get("noise_rate", s.noise_rate);
        get("noise_min", s.noise_min);
        get("noise_max", s.noise_max);
        get("signal_strength", s.signal_strength);
        get("signal_jitter", s.signal_jitter);
        get("signal_density", s.signal_density);
        get("cross_rate", s.cross_rate);
        get("cross_scale", s.cross_scale);
        get("decoy_rate", s.decoy_rate);
        get("decoy_scale", s.decoy_scale);
        get("n_categories", s.n_categories);
        get("residual_sigma", s.residual_sigma);
        get("signal_enabled", s.signal_enabled);
        get("layer_index", s.layer_index);
        get("seed", s.seed);
    } catch (const nlohmann::json::exception &ex) {
        fail(ErrorCode::Malformed, std::string("oracle spec: ") + ex.what());
    }
    validate_spec(s);
    return s;
}

struct OracleGroundTruth {
    /// Planted dictionary indices; planted feature i has home category i % n_categories.
    std::vector<std::uint32_t> planted;
    /// Every other dictionary index, ascending.
    std::vector<std::uint32_t> noise;
    std::vector<std::string> categories;
    /// Orthonormal directions spanning the noise subspace (d x (d - n_planted), column-major).
    std::vector<double> noise_basis;

    std::size_t home_category(std::size_t planted_pos) const noexcept { return planted_pos % categories.size(); }
};

struct Oracle {
    OracleSpec spec;
    SaeParams sae;
    OracleGroundTruth truth;
};

namespace detail {

enum OracleStream : std::uint64_t { kStreamSae = 0, kStreamCalibration = 1, kStreamSessions = 2, kStreamValidation = 3 };

inline std::string category_name(std::size_t c) { return "cat" + std::to_string(c); }

} // namespace detail

inline Oracle build_oracle(const OracleSpec &spec)
{
    validate_spec(spec);
    const std::size_t d = spec.d;
    const std::size_t M = spec.M;
    detail::Rng rng(detail::derive_seed(spec.seed, detail::kStreamSae));

    Eigen::MatrixXd g(d, d);
    for (Eigen::Index c = 0; c < g.cols(); ++c) {
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
            g(r, c) = rng.normal();
        }
    }
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ() * Eigen::MatrixXd::Identity(d, d);

    std::vector<std::uint32_t> order(M);
    std::iota(order.begin(), order.end(), 0u);
    rng.shuffle(order.begin(), order.end());

    OracleGroundTruth truth;
    truth.planted.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(spec.n_planted));
    truth.noise.assign(order.begin() + static_cast<std::ptrdiff_t>(spec.n_planted), order.end());
    std::sort(truth.noise.begin(), truth.noise.end());
    for (std::size_t c = 0; c < spec.n_categories; ++c) {
        truth.categories.push_back(detail::category_name(c));
    }
    const std::size_t n_free = d - spec.n_planted;
    truth.noise_basis.resize(d * n_free);
    for (std::size_t c = 0; c < n_free; ++c) {
        for (std::size_t r = 0; r < d; ++r) {
            truth.noise_basis[c * d + r] = q(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(spec.n_planted + c));
        }
    }

    Eigen::MatrixXd dec(d, M);
    for (std::size_t i = 0; i < spec.n_planted; ++i) {
        dec.col(truth.planted[i]) = q.col(static_cast<Eigen::Index>(i));
    }
    const auto free_basis = q.rightCols(static_cast<Eigen::Index>(n_free));
    for (auto j : truth.noise) {
        Eigen::VectorXd coef(static_cast<Eigen::Index>(n_free));
        for (Eigen::Index i = 0; i < coef.size(); ++i) {
            coef(i) = rng.normal();
        }
        const Eigen::VectorXd col = free_basis * coef;
        dec.col(j) = col / col.norm();
    }

    SaeParts p;
    p.d = d;
    p.M = M;
    p.sparsity = spec.k == 0 ? Sparsity::relu() : Sparsity::top_k(static_cast<std::uint32_t>(spec.k));
    p.layer_index = spec.layer_index;
    p.dec_weights.resize(d * M);
    p.enc_weights.resize(M * d);
    for (std::size_t r = 0; r < d; ++r) {
        for (std::size_t c = 0; c < M; ++c) {
            const auto v = static_cast<float>(dec(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
            p.dec_weights[r * M + c] = v;
            p.enc_weights[c * d + r] = v;
        }
    }
    // A tiny negative bias keeps float rounding in h from switching on
    // features whose intended code is zero.
    p.enc_bias.assign(M, -1e-6f);
    p.pre_bias.resize(d);
    for (auto &b : p.pre_bias) {
        b = static_cast<float>(rng.normal(0.0, 0.05));
    }
    return {spec, SaeParams::create(std::move(p)), std::move(truth)};
}

/// Largest |cos| between two planted decoder columns.
inline double max_planted_cosine(const Oracle &o)
{
    const auto &sae = o.sae;
    const auto col = [&](std::uint32_t j) {
        std::vector<double> v(sae.width());
        for (std::size_t r = 0; r < v.size(); ++r) {
            v[r] = sae.dec(r, j);
        }
        return v;
    };
    double worst = 0.0;
    for (std::size_t a = 0; a < o.truth.planted.size(); ++a) {
        const auto va = col(o.truth.planted[a]);
        for (std::size_t b = a + 1; b < o.truth.planted.size(); ++b) {
            const auto vb = col(o.truth.planted[b]);
            double dot = 0, na = 0, nb = 0;
            for (std::size_t r = 0; r < va.size(); ++r) {
                dot += va[r] * vb[r];
                na += va[r] * va[r];
                nb += vb[r] * vb[r];
            }
            worst = std::max(worst, std::abs(dot) / std::sqrt(na * nb));
        }
    }
    return worst;
}

/// Intended latent code of every generated token.
struct OracleTrace {
    std::vector<FeatureVector> codes;
};

namespace detail {

inline void fire(std::vector<float> &dense, std::uint32_t j, double v)
{
    dense[j] = std::max(dense[j], static_cast<float>(v));
}

inline FeatureVector sparse_from_dense(const std::vector<float> &dense)
{
    FeatureVector z;
    z.dense_len = dense.size();
    for (std::size_t j = 0; j < dense.size(); ++j) {
        if (dense[j] > 0.0f) {
            z.entries.push_back({static_cast<std::uint32_t>(j), dense[j]});
        }
    }
    return z;
}

} // namespace detail

/// One sample drawn from its own derived seed, so generation is order-free.
inline CalibrationSample generate_sample(const Oracle &o, Label label, std::size_t index, std::uint64_t stream,
                                         OracleTrace *trace = nullptr)
{
    const auto &s = o.spec;
    const auto &truth = o.truth;
    detail::Rng rng(detail::derive_seed(s.seed, stream, index * 2 + (label == Label::Unsafe ? 1 : 0)));

    const std::size_t n = s.min_tokens + rng.below(s.max_tokens - s.min_tokens + 1);
    const std::size_t tmpl = s.template_tokens ? 1 : 0;
    const std::size_t content = n - 2 * tmpl;
    const std::size_t n_prompt =
        std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(s.prompt_fraction * static_cast<double>(n))), 1,
                                content - 1);

    CalibrationSample out;
    out.id = std::string(label == Label::Unsafe ? "u" : "s") + std::to_string(stream) + "_" + std::to_string(index);
    out.label = label;
    out.prompt_span = {tmpl, tmpl + n_prompt};
    out.response_span = {tmpl + n_prompt + tmpl, n};
    out.hidden_states.d = s.d;
    out.hidden_states.n_tokens = n;
    out.hidden_states.data.resize(n * s.d);

    std::optional<std::size_t> category;
    if (label == Label::Unsafe) {
        category = rng.below(s.n_categories);
        out.category = truth.categories[*category];
        // Integer onset uniform over the relative window, never before the response.
        const auto lo = std::max<std::size_t>(
            static_cast<std::size_t>(std::ceil(s.onset_lo * static_cast<double>(n) - 1e-9)), out.response_span.begin);
        const auto hi = std::clamp<std::size_t>(
            static_cast<std::size_t>(std::floor(s.onset_hi * static_cast<double>(n) + 1e-9)), lo, n - 1);
        out.onset = lo + rng.below(hi - lo + 1);
        std::vector<std::uint8_t> token_labels(n, 0);
        for (std::size_t t = *out.onset; t < n; ++t) {
            token_labels[t] = 1;
        }
        out.token_labels = std::move(token_labels);
    }

    const std::size_t n_noise = truth.noise.size();
    const std::size_t n_free = s.d - s.n_planted;
    const double log_miss = s.noise_rate < 1.0 ? std::log1p(-s.noise_rate) : 0.0;
    std::vector<float> dense(s.M);
    std::vector<double> h(s.d);
    const auto signal = [&](double scale) {
        return scale * s.signal_strength * rng.uniform(1.0 - s.signal_jitter, 1.0 + s.signal_jitter);
    };

    for (std::size_t t = 0; t < n; ++t) {
        std::fill(dense.begin(), dense.end(), 0.0f);
        // Noise features, visited by geometric skips.
        if (s.noise_rate >= 1.0) {
            for (auto j : truth.noise) {
                detail::fire(dense, j, rng.uniform(s.noise_min, s.noise_max));
            }
        } else if (s.noise_rate > 0.0) {
            std::size_t pos = 0;
            while (true) {
                const double u = 1.0 - rng.uniform();
                pos += static_cast<std::size_t>(std::floor(std::log(u) / log_miss));
                if (pos >= n_noise) {
                    break;
                }
                detail::fire(dense, truth.noise[pos], rng.uniform(s.noise_min, s.noise_max));
                ++pos;
            }
        }
        const bool is_content = out.role(t) != TokenRole::Template;
        const bool unsafe_here = out.onset && t >= *out.onset && s.signal_enabled;
        if (unsafe_here) {
            for (std::size_t i = 0; i < truth.planted.size(); ++i) {
                if (truth.home_category(i) == *category) {
                    if (t == *out.onset || rng.bernoulli(s.signal_density)) {
                        detail::fire(dense, truth.planted[i], signal(1.0));
                    }
                } else if (t == *out.onset || rng.bernoulli(s.cross_rate)) {
                    detail::fire(dense, truth.planted[i], signal(s.cross_scale));
                }
            }
        } else if (is_content && rng.bernoulli(s.decoy_rate)) {
            detail::fire(dense, truth.planted[rng.below(truth.planted.size())], signal(s.decoy_scale));
        }

        // h = b_pre + W_dec z + residual (residual confined to the noise subspace).
        const auto b = o.sae.pre_bias();
        for (std::size_t r = 0; r < s.d; ++r) {
            h[r] = b[r];
        }
        for (std::size_t j = 0; j < s.M; ++j) {
            if (dense[j] > 0.0f) {
                const double v = dense[j];
                for (std::size_t r = 0; r < s.d; ++r) {
                    h[r] += v * static_cast<double>(o.sae.dec(r, j));
                }
            }
        }
        if (s.residual_sigma > 0.0) {
            for (std::size_t c = 0; c < n_free; ++c) {
                const double e = rng.normal(0.0, s.residual_sigma);
                for (std::size_t r = 0; r < s.d; ++r) {
                    h[r] += e * truth.noise_basis[c * s.d + r];
                }
            }
        }
        auto row = out.hidden_states.row(t);
        for (std::size_t r = 0; r < s.d; ++r) {
            row[r] = static_cast<float>(h[r]);
        }
        if (trace) {
            trace->codes.push_back(detail::sparse_from_dense(dense));
        }
    }
    return out;
}

/// `n_unsafe` unsafe samples followed by `n_safe` safe samples. Distinct
/// streams give independent sets from the same oracle.
inline ActivationDataset generate_split(const Oracle &o, std::size_t n_unsafe, std::size_t n_safe,
                                        std::uint64_t stream)
{
    ActivationDataset ds;
    ds.layer_index = o.spec.layer_index;
    ds.samples.reserve(n_safe + n_unsafe);
    for (std::size_t i = 0; i < n_unsafe; ++i) {
        ds.samples.push_back(generate_sample(o, Label::Unsafe, i, stream));
    }
    for (std::size_t i = 0; i < n_safe; ++i) {
        ds.samples.push_back(generate_sample(o, Label::Safe, i, stream));
    }
    return ds;
}

/// The spec's n_unsafe + n_safe samples (e.g. calibration vs held-out by stream).
inline ActivationDataset generate_calibration_set(const Oracle &o, std::uint64_t stream = detail::kStreamCalibration)
{
    return generate_split(o, o.spec.n_unsafe, o.spec.n_safe, stream);
}

/// One streaming session; `onset` is set for unsafe sessions.
inline CalibrationSample generate_stream_session(const Oracle &o, bool unsafe, std::size_t index,
                                                 std::uint64_t stream = detail::kStreamSessions)
{
    return generate_sample(o, unsafe ? Label::Unsafe : Label::Safe, index, stream);
}

/// Writes `<path>`: the spec, planted indices and SAE fingerprint.
inline void write_oracle_truth(const Oracle &o, const std::filesystem::path &path)
{
    nlohmann::json t;
    t["format"] = "nextguard.oracle_truth";
    t["version"] = 1;
    t["spec"] = to_json(o.spec);
    t["planted"] = o.truth.planted;
    t["categories"] = o.truth.categories;
    t["sae_fingerprint"] = o.sae.fingerprint();
    detail::write_file(path, t.dump(2) + "\n");
}

/// Writes `<dir>/sae.ngsae`, `<dir>/manifest.jsonl`, `<dir>/act/*`, and
/// `<dir>/truth.json`.
inline void write_oracle_dataset(const Oracle &o, const ActivationDataset &ds, const std::filesystem::path &dir)
{
    save_sae(o.sae, dir / "sae.ngsae");
    write_dataset(ds, dir);
    write_oracle_truth(o, dir / "truth.json");
}

} // namespace nextguard

#endif
