#ifndef NEXTGUARD_SAE_HPP
#define NEXTGUARD_SAE_HPP

// Frozen sparse autoencoder: parameter container, NGSAE file format,
// sparse encoding and decoding.
//
// Encoding computes pre-activations
//     a = W_enc (h - b_pre) + b_enc
// in double precision and applies either ReLU or TopK. TopK keeps the k
// largest pre-activations (ties go to the lower feature index) and then drops
// any survivor that is not strictly positive, so a code never holds zeros or
// negative values and may hold fewer than k entries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nextguard/detail/binary_io.hpp>
#include <nextguard/error.hpp>

namespace nextguard {

enum class SparsityKind : std::uint8_t { Relu = 0, TopK = 1 };

struct Sparsity {
    SparsityKind kind = SparsityKind::Relu;
    std::uint32_t k = 0;

    static constexpr Sparsity relu() noexcept { return {SparsityKind::Relu, 0}; }
    static constexpr Sparsity top_k(std::uint32_t k) noexcept { return {SparsityKind::TopK, k}; }

    friend bool operator==(const Sparsity &, const Sparsity &) = default;
};

enum class Strictness { Lenient, Strict };

/// Raw, unvalidated SAE arrays. Matrices are row-major: the encoder has M rows
/// of width d, the decoder has d rows of width M.
struct SaeParts {
    std::size_t d = 0;
    std::size_t M = 0;
    std::vector<float> enc_weights;
    std::vector<float> enc_bias;
    std::vector<float> dec_weights;
    std::vector<float> pre_bias;
    Sparsity sparsity;
    std::uint32_t layer_index = 0;
};

class SaeParams;
std::string sae_fingerprint_of(const SaeParts &parts);

/// Validated, immutable SAE parameters. Share across threads through
/// `std::shared_ptr<const SaeParams>`; nothing mutates after construction.
class SaeParams {
public:
    /// Validates `parts`. A dictionary that is not overcomplete (M <= d) is a
    /// warning in lenient mode and an error in strict mode.
    static SaeParams create(SaeParts parts, Strictness strictness = Strictness::Lenient,
                            std::vector<std::string> *warnings = nullptr)
    {
        validate(parts, strictness, warnings);
        SaeParams p;
        p.fingerprint_ = sae_fingerprint_of(parts);
        p.parts_ = std::move(parts);
        return p;
    }

    std::size_t width() const noexcept { return parts_.d; }
    std::size_t dict_size() const noexcept { return parts_.M; }
    Sparsity sparsity() const noexcept { return parts_.sparsity; }
    std::uint32_t layer_index() const noexcept { return parts_.layer_index; }
    const SaeParts &parts() const noexcept { return parts_; }

    /// FNV-1a 64 of the NGSAE serialization, as 16 hex digits.
    const std::string &fingerprint() const noexcept { return fingerprint_; }

    std::span<const float> enc_row(std::size_t j) const noexcept
    {
        return {parts_.enc_weights.data() + j * parts_.d, parts_.d};
    }
    float enc_bias(std::size_t j) const noexcept { return parts_.enc_bias[j]; }
    std::span<const float> pre_bias() const noexcept { return parts_.pre_bias; }
    float dec(std::size_t row, std::size_t col) const noexcept
    {
        return parts_.dec_weights[row * parts_.M + col];
    }

private:
    SaeParams() = default;

    static void check_finite(std::span<const float> xs, const char *name)
    {
        for (std::size_t i = 0; i < xs.size(); ++i) {
            if (!std::isfinite(xs[i])) {
                fail(ErrorCode::NonFinite,
                     std::string("non-finite value in ") + name + "[" + std::to_string(i) + "]");
            }
        }
    }

    static void validate(const SaeParts &p, Strictness strictness, std::vector<std::string> *warnings)
    {
        require(p.d > 0 && p.M > 0, ErrorCode::DimensionMismatch, "d and M must be positive");
        require(p.enc_weights.size() == p.M * p.d, ErrorCode::DimensionMismatch,
                "enc_weights must hold M*d values");
        require(p.enc_bias.size() == p.M, ErrorCode::DimensionMismatch, "enc_bias must hold M values");
        require(p.dec_weights.size() == p.d * p.M, ErrorCode::DimensionMismatch,
                "dec_weights must hold d*M values");
        require(p.pre_bias.size() == p.d, ErrorCode::DimensionMismatch, "pre_bias must hold d values");
        check_finite(p.enc_weights, "enc_weights");
        check_finite(p.enc_bias, "enc_bias");
        check_finite(p.dec_weights, "dec_weights");
        check_finite(p.pre_bias, "pre_bias");
        if (p.sparsity.kind == SparsityKind::TopK) {
            require(p.sparsity.k >= 1 && p.sparsity.k <= p.M, ErrorCode::InvalidArgument,
                    "TopK k must lie in [1, M]");
        }
        if (p.M <= p.d) {
            const std::string msg = "dictionary is not overcomplete: M=" + std::to_string(p.M) +
                                    " <= d=" + std::to_string(p.d);
            if (strictness == Strictness::Strict) {
                fail(ErrorCode::NotOvercomplete, msg);
            }
            if (warnings) {
                warnings->push_back(msg);
            }
        }
    }

    SaeParts parts_;
    std::string fingerprint_;
};

struct FeatureEntry {
    std::uint32_t index = 0;
    float value = 0.0f;

    friend bool operator==(const FeatureEntry &, const FeatureEntry &) = default;
};

/// Sparse activation code. Entries are sorted by index and strictly positive.
struct FeatureVector {
    std::vector<FeatureEntry> entries;
    std::size_t dense_len = 0;

    std::size_t size() const noexcept { return entries.size(); }
    bool empty() const noexcept { return entries.empty(); }
    auto begin() const noexcept { return entries.begin(); }
    auto end() const noexcept { return entries.end(); }

    /// Activation of feature j, zero when absent.
    float value(std::uint32_t j) const noexcept
    {
        auto it = std::lower_bound(entries.begin(), entries.end(), j,
                                   [](const FeatureEntry &e, std::uint32_t idx) { return e.index < idx; });
        return (it != entries.end() && it->index == j) ? it->value : 0.0f;
    }

    friend bool operator==(const FeatureVector &, const FeatureVector &) = default;
};

struct HiddenState {
    std::vector<float> values;
    std::size_t token_index = 0;
};

// ---------------------------------------------------------------------------
// NGSAE format

inline constexpr std::string_view kSaeMagic{"NGSAE\0", 6};
inline constexpr std::uint16_t kSaeVersion = 1;

namespace detail {

struct Fnv1a {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    void update(std::string_view data) noexcept
    {
        for (unsigned char c : data) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
    }
    void update(std::span<const float> xs) noexcept
    {
        update(std::string_view(reinterpret_cast<const char *>(xs.data()), xs.size_bytes()));
    }
};

inline std::string sae_header(const SaeParts &p)
{
    ByteWriter w;
    w.bytes(kSaeMagic);
    w.scalar<std::uint16_t>(kSaeVersion);
    w.scalar<std::uint8_t>(static_cast<std::uint8_t>(p.sparsity.kind));
    w.scalar<std::uint32_t>(p.sparsity.kind == SparsityKind::TopK ? p.sparsity.k : 0u);
    w.scalar<std::uint32_t>(p.layer_index);
    w.scalar<std::uint32_t>(static_cast<std::uint32_t>(p.d));
    w.scalar<std::uint32_t>(static_cast<std::uint32_t>(p.M));
    return w.take();
}

} // namespace detail

inline std::string sae_fingerprint_of(const SaeParts &parts)
{
    detail::Fnv1a f;
    f.update(detail::sae_header(parts));
    f.update(parts.enc_weights);
    f.update(parts.enc_bias);
    f.update(parts.dec_weights);
    f.update(parts.pre_bias);
    return detail::hex64(f.h);
}

inline std::string serialize_sae(const SaeParams &params)
{
    const auto &p = params.parts();
    detail::ByteWriter w;
    w.buffer().reserve(26 + 4 * (2 * p.M * p.d + p.M + p.d));
    w.bytes(detail::sae_header(p));
    w.floats(p.enc_weights);
    w.floats(p.enc_bias);
    w.floats(p.dec_weights);
    w.floats(p.pre_bias);
    return w.take();
}

inline SaeParams parse_sae(std::string_view data, Strictness strictness = Strictness::Lenient,
                           std::vector<std::string> *warnings = nullptr)
{
    detail::ByteReader r(data, "NGSAE");
    if (r.bytes(kSaeMagic.size()) != kSaeMagic) {
        fail(ErrorCode::Malformed, "NGSAE: bad magic");
    }
    const auto version = r.scalar<std::uint16_t>();
    const auto tag = r.scalar<std::uint8_t>();
    const auto k = r.scalar<std::uint32_t>();
    const auto layer = r.scalar<std::uint32_t>();
    const auto d = r.scalar<std::uint32_t>();
    const auto M = r.scalar<std::uint32_t>();
    if (version != kSaeVersion) {
        fail(ErrorCode::UnsupportedVersion, "NGSAE: unsupported version " + std::to_string(version));
    }
    if (tag > 1) {
        fail(ErrorCode::Malformed, "NGSAE: unknown sparsity tag " + std::to_string(tag));
    }
    const std::uint64_t expected = 4ULL * (2ULL * d * M + M + d);
    if (r.remaining() < expected) {
        fail(ErrorCode::Malformed, "NGSAE: truncated payload");
    }
    if (r.remaining() > expected) {
        fail(ErrorCode::DimensionMismatch, "NGSAE: payload larger than declared d, M");
    }
    SaeParts p;
    p.d = d;
    p.M = M;
    p.sparsity = tag == 0 ? Sparsity::relu() : Sparsity::top_k(k);
    p.layer_index = layer;
    p.enc_weights = r.floats(std::size_t{M} * d);
    p.enc_bias = r.floats(M);
    p.dec_weights = r.floats(std::size_t{d} * M);
    p.pre_bias = r.floats(d);
    return SaeParams::create(std::move(p), strictness, warnings);
}

inline void save_sae(const SaeParams &params, const std::filesystem::path &path)
{
    detail::write_file(path, serialize_sae(params));
}

inline SaeParams load_sae(const std::filesystem::path &path, Strictness strictness = Strictness::Lenient,
                          std::vector<std::string> *warnings = nullptr)
{
    return parse_sae(detail::read_file(path), strictness, warnings);
}

// ---------------------------------------------------------------------------
// Encoding / decoding

namespace detail {

inline void check_width(const SaeParams &params, std::size_t n)
{
    if (n != params.width()) {
        fail(ErrorCode::DimensionMismatch, "hidden state has " + std::to_string(n) +
                                               " values, SAE expects d=" + std::to_string(params.width()));
    }
}

inline std::vector<double> centered(const SaeParams &params, std::span<const float> h)
{
    check_width(params, h.size());
    const auto b = params.pre_bias();
    std::vector<double> c(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) {
        c[i] = static_cast<double>(h[i]) - static_cast<double>(b[i]);
    }
    return c;
}

inline double pre_activation(const SaeParams &params, std::size_t j, std::span<const double> centered_h) noexcept
{
    // Four fixed lanes: a deterministic summation order the compiler can vectorize.
    const auto row = params.enc_row(j);
    const std::size_t n = row.size();
    double lane[4] = {0.0, 0.0, 0.0, 0.0};
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        for (std::size_t l = 0; l < 4; ++l) {
            lane[l] += static_cast<double>(row[i + l]) * centered_h[i + l];
        }
    }
    for (; i < n; ++i) {
        lane[0] += static_cast<double>(row[i]) * centered_h[i];
    }
    return ((lane[0] + lane[1]) + (lane[2] + lane[3])) + static_cast<double>(params.enc_bias(j));
}

} // namespace detail

/// All M pre-activations W_enc (h - b_pre) + b_enc.
inline std::vector<double> pre_activations(const SaeParams &params, std::span<const float> h)
{
    const auto c = detail::centered(params, h);
    std::vector<double> a(params.dict_size());
    for (std::size_t j = 0; j < a.size(); ++j) {
        a[j] = detail::pre_activation(params, j, c);
    }
    return a;
}

inline FeatureVector encode(const SaeParams &params, std::span<const float> h)
{
    const auto a = pre_activations(params, h);
    FeatureVector z;
    z.dense_len = params.dict_size();
    const auto keep = [&](std::size_t j) {
        const float v = static_cast<float>(a[j]);
        if (v > 0.0f) {
            z.entries.push_back({static_cast<std::uint32_t>(j), v});
        }
    };
    if (params.sparsity().kind == SparsityKind::Relu) {
        for (std::size_t j = 0; j < a.size(); ++j) {
            keep(j);
        }
        return z;
    }
    const std::size_t k = params.sparsity().k;
    std::vector<std::uint32_t> order(a.size());
    std::iota(order.begin(), order.end(), 0u);
    const auto by_value = [&](std::uint32_t x, std::uint32_t y) {
        return a[x] != a[y] ? a[x] > a[y] : x < y;
    };
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k - 1), order.end(), by_value);
    order.resize(k);
    std::sort(order.begin(), order.end());
    for (auto j : order) {
        keep(j);
    }
    return z;
}

inline FeatureVector encode(const SaeParams &params, const HiddenState &h)
{
    return encode(params, std::span<const float>(h.values));
}

namespace detail {

inline std::vector<double> decode_wide(const SaeParams &params, const FeatureVector &z)
{
    const auto b = params.pre_bias();
    std::vector<double> out(b.begin(), b.end());
    for (const auto &e : z) {
        if (e.index >= params.dict_size()) {
            fail(ErrorCode::IndexOutOfRange, "feature index " + std::to_string(e.index) +
                                                 " >= M=" + std::to_string(params.dict_size()));
        }
        const double v = e.value;
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] += v * static_cast<double>(params.dec(i, e.index));
        }
    }
    return out;
}

} // namespace detail

/// b_pre plus the decoder columns of the active features, scaled.
inline std::vector<float> decode(const SaeParams &params, const FeatureVector &z)
{
    const auto wide = detail::decode_wide(params, z);
    return {wide.begin(), wide.end()};
}

/// Squared Euclidean distance between h and its reconstruction.
inline double reconstruction_error(const SaeParams &params, std::span<const float> h)
{
    detail::check_width(params, h.size());
    const auto hat = detail::decode_wide(params, encode(params, h));
    double err = 0.0;
    for (std::size_t i = 0; i < h.size(); ++i) {
        const double diff = static_cast<double>(h[i]) - hat[i];
        err += diff * diff;
    }
    return err;
}

} // namespace nextguard

#endif
