#ifndef NEXTGUARD_ACTIVATIONS_HPP
#define NEXTGUARD_ACTIVATIONS_HPP

// Per-token hidden-state storage (NGACT files), line-delimited manifests and
// the labeled samples built from them.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include <nextguard/detail/binary_io.hpp>
#include <nextguard/error.hpp>

namespace nextguard {

enum class Label : std::uint8_t { Safe = 0, Unsafe = 1 };

inline std::string_view to_string(Label l) noexcept { return l == Label::Safe ? "safe" : "unsafe"; }

inline Label parse_label(std::string_view s)
{
    if (s == "safe") {
        return Label::Safe;
    }
    if (s == "unsafe") {
        return Label::Unsafe;
    }
    fail(ErrorCode::Malformed, "unknown label '" + std::string(s) + "'");
}

enum class TokenRole : std::uint8_t { Prompt, Response, Template };

inline std::string_view to_string(TokenRole r) noexcept
{
    switch (r) {
    case TokenRole::Prompt: return "prompt";
    case TokenRole::Response: return "response";
    case TokenRole::Template: return "template";
    }
    return "template";
}

inline TokenRole parse_role(std::string_view s)
{
    if (s == "prompt") {
        return TokenRole::Prompt;
    }
    if (s == "response") {
        return TokenRole::Response;
    }
    if (s == "template") {
        return TokenRole::Template;
    }
    fail(ErrorCode::Malformed, "unknown token role '" + std::string(s) + "'");
}

/// Which tokens take part in pooling and scoring. Template tokens are the
/// chat scaffolding ("User: ", "\nAssistant: ") outside the prompt and
/// response spans.
enum class MaskPolicy : std::uint8_t { ScoreAll, ScoreContentOnly, ScoreResponseOnly };

inline std::string_view to_string(MaskPolicy m) noexcept
{
    switch (m) {
    case MaskPolicy::ScoreAll: return "score_all";
    case MaskPolicy::ScoreContentOnly: return "score_content_only";
    case MaskPolicy::ScoreResponseOnly: return "score_response_only";
    }
    return "score_all";
}

inline MaskPolicy parse_mask_policy(std::string_view s)
{
    if (s == "score_all") {
        return MaskPolicy::ScoreAll;
    }
    if (s == "score_content_only") {
        return MaskPolicy::ScoreContentOnly;
    }
    if (s == "score_response_only") {
        return MaskPolicy::ScoreResponseOnly;
    }
    fail(ErrorCode::Malformed, "unknown mask policy '" + std::string(s) + "'");
}

constexpr bool is_scored(MaskPolicy mask, TokenRole role) noexcept
{
    switch (mask) {
    case MaskPolicy::ScoreAll: return true;
    case MaskPolicy::ScoreContentOnly: return role != TokenRole::Template;
    case MaskPolicy::ScoreResponseOnly: return role == TokenRole::Response;
    }
    return true;
}

/// Half-open token range [begin, end).
struct TokenSpan {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const noexcept { return end > begin ? end - begin : 0; }
    bool contains(std::size_t t) const noexcept { return t >= begin && t < end; }
    friend bool operator==(const TokenSpan &, const TokenSpan &) = default;
};

/// Row-major n_tokens x d matrix of hidden states.
struct ActivationMatrix {
    std::size_t d = 0;
    std::size_t n_tokens = 0;
    std::vector<float> data;

    std::span<const float> row(std::size_t t) const noexcept { return {data.data() + t * d, d}; }
    std::span<float> row(std::size_t t) noexcept { return {data.data() + t * d, d}; }

    friend bool operator==(const ActivationMatrix &, const ActivationMatrix &) = default;
};

// ---------------------------------------------------------------------------
// NGACT format

inline constexpr std::string_view kActMagic{"NGACT\0", 6};
inline constexpr std::uint16_t kActVersion = 1;

inline std::string serialize_activations(const ActivationMatrix &m)
{
    detail::ByteWriter w;
    w.bytes(kActMagic);
    w.scalar<std::uint16_t>(kActVersion);
    w.scalar<std::uint32_t>(static_cast<std::uint32_t>(m.d));
    w.scalar<std::uint32_t>(static_cast<std::uint32_t>(m.n_tokens));
    w.floats(m.data);
    return w.take();
}

inline ActivationMatrix parse_activations(std::string_view bytes)
{
    detail::ByteReader r(bytes, "NGACT");
    if (r.bytes(kActMagic.size()) != kActMagic) {
        fail(ErrorCode::Malformed, "NGACT: bad magic");
    }
    const auto version = r.scalar<std::uint16_t>();
    if (version != kActVersion) {
        fail(ErrorCode::UnsupportedVersion, "NGACT: unsupported version " + std::to_string(version));
    }
    ActivationMatrix m;
    m.d = r.scalar<std::uint32_t>();
    m.n_tokens = r.scalar<std::uint32_t>();
    const std::uint64_t expected = 4ULL * m.d * m.n_tokens;
    if (r.remaining() < expected) {
        fail(ErrorCode::Malformed, "NGACT: truncated payload");
    }
    if (r.remaining() > expected) {
        fail(ErrorCode::DimensionMismatch, "NGACT: payload larger than declared d x n_tokens");
    }
    m.data = r.floats(m.d * m.n_tokens);
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        if (!std::isfinite(m.data[i])) {
            fail(ErrorCode::NonFinite, "NGACT: non-finite value at token " + std::to_string(i / m.d) +
                                           ", dim " + std::to_string(i % m.d));
        }
    }
    return m;
}

inline void save_activations(const ActivationMatrix &m, const std::filesystem::path &path)
{
    detail::write_file(path, serialize_activations(m));
}

inline ActivationMatrix load_activations(const std::filesystem::path &path)
{
    return parse_activations(detail::read_file(path));
}

// ---------------------------------------------------------------------------
// Samples and manifests

struct CalibrationSample {
    std::string id;
    Label label = Label::Safe;
    std::optional<std::string> category;
    TokenSpan prompt_span;
    TokenSpan response_span;
    ActivationMatrix hidden_states;
    /// First unsafe token, when known.
    std::optional<std::size_t> onset;
    /// Per-token ground-truth risk labels, when known.
    std::optional<std::vector<std::uint8_t>> token_labels;

    std::size_t n_tokens() const noexcept { return hidden_states.n_tokens; }

    TokenRole role(std::size_t t) const noexcept
    {
        if (response_span.contains(t)) {
            return TokenRole::Response;
        }
        if (prompt_span.contains(t)) {
            return TokenRole::Prompt;
        }
        return TokenRole::Template;
    }
};

inline void validate_sample(const CalibrationSample &s)
{
    const std::size_t n = s.n_tokens();
    const auto in_range = [n](const TokenSpan &sp) { return sp.begin <= sp.end && sp.end <= n; };
    require(in_range(s.prompt_span) && in_range(s.response_span), ErrorCode::InvalidArgument,
            "sample " + s.id + ": span outside [0, n_tokens)");
    const bool disjoint = s.prompt_span.end <= s.response_span.begin || s.response_span.end <= s.prompt_span.begin ||
                          s.prompt_span.size() == 0 || s.response_span.size() == 0;
    require(disjoint, ErrorCode::InvalidArgument, "sample " + s.id + ": prompt and response spans overlap");
    require(s.prompt_span.size() + s.response_span.size() >= 1, ErrorCode::InvalidArgument,
            "sample " + s.id + ": no prompt or response tokens");
    if (s.onset) {
        require(*s.onset < n, ErrorCode::InvalidArgument, "sample " + s.id + ": onset beyond sequence end");
    }
    if (s.token_labels) {
        require(s.token_labels->size() == n, ErrorCode::DimensionMismatch,
                "sample " + s.id + ": token_labels length differs from n_tokens");
    }
}

/// Run-length encoding of a 0/1 sequence as [[value, run], ...].
inline nlohmann::json encode_runs(std::span<const std::uint8_t> bits)
{
    auto out = nlohmann::json::array();
    std::size_t i = 0;
    while (i < bits.size()) {
        std::size_t j = i;
        while (j < bits.size() && bits[j] == bits[i]) {
            ++j;
        }
        out.push_back({static_cast<int>(bits[i]), j - i});
        i = j;
    }
    return out;
}

inline std::vector<std::uint8_t> decode_runs(const nlohmann::json &runs)
{
    std::vector<std::uint8_t> bits;
    for (const auto &r : runs) {
        if (!r.is_array() || r.size() != 2) {
            fail(ErrorCode::Malformed, "token_labels: each run must be [value, length]");
        }
        const int v = r[0].get<int>();
        require(v == 0 || v == 1, ErrorCode::Malformed, "token_labels: values must be 0 or 1");
        bits.insert(bits.end(), r[1].get<std::size_t>(), static_cast<std::uint8_t>(v));
    }
    return bits;
}

struct ManifestEntry {
    std::string id;
    Label label = Label::Safe;
    std::optional<std::string> category;
    TokenSpan prompt_span;
    TokenSpan response_span;
    std::string activation_path;
    std::optional<std::size_t> onset;
    std::optional<std::vector<std::uint8_t>> token_labels;
    /// LLM layer the hidden states were captured at.
    std::optional<std::uint32_t> layer;
};

inline nlohmann::json to_json(const ManifestEntry &e)
{
    nlohmann::json j;
    j["id"] = e.id;
    j["label"] = to_string(e.label);
    if (e.category) {
        j["category"] = *e.category;
    }
    j["prompt_span"] = {e.prompt_span.begin, e.prompt_span.end};
    j["response_span"] = {e.response_span.begin, e.response_span.end};
    j["activation_path"] = e.activation_path;
    if (e.onset) {
        j["onset"] = *e.onset;
    }
    if (e.token_labels) {
        j["token_labels"] = encode_runs(*e.token_labels);
    }
    if (e.layer) {
        j["layer"] = *e.layer;
    }
    return j;
}

inline ManifestEntry manifest_entry_from_json(const nlohmann::json &j)
{
    try {
        ManifestEntry e;
        e.id = j.at("id").get<std::string>();
        e.label = parse_label(j.at("label").get<std::string>());
        if (j.contains("category") && !j["category"].is_null()) {
            e.category = j["category"].get<std::string>();
        }
        const auto span = [](const nlohmann::json &a) {
            if (!a.is_array() || a.size() != 2) {
                fail(ErrorCode::Malformed, "spans must be [begin, end]");
            }
            return TokenSpan{a[0].get<std::size_t>(), a[1].get<std::size_t>()};
        };
        e.prompt_span = span(j.at("prompt_span"));
        e.response_span = span(j.at("response_span"));
        e.activation_path = j.at("activation_path").get<std::string>();
        if (j.contains("onset") && !j["onset"].is_null()) {
            e.onset = j["onset"].get<std::size_t>();
        }
        if (j.contains("token_labels") && !j["token_labels"].is_null()) {
            e.token_labels = decode_runs(j["token_labels"]);
        }
        if (j.contains("layer") && !j["layer"].is_null()) {
            e.layer = j["layer"].get<std::uint32_t>();
        }
        return e;
    } catch (const nlohmann::json::exception &ex) {
        fail(ErrorCode::Malformed, std::string("manifest entry: ") + ex.what());
    }
}

inline std::vector<ManifestEntry> load_manifest(const std::filesystem::path &path)
{
    std::ifstream in(path);
    if (!in) {
        fail(ErrorCode::Io, "cannot open manifest " + path.string());
    }
    std::vector<ManifestEntry> entries;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            entries.push_back(manifest_entry_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception &ex) {
            fail(ErrorCode::Malformed, path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
        } catch (const Error &ex) {
            fail(ex.code(), path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
        }
    }
    return entries;
}

/// A set of samples plus the layer their hidden states were captured at.
struct ActivationDataset {
    std::vector<CalibrationSample> samples;
    std::optional<std::uint32_t> layer_index;
};

/// Loads a manifest and every activation file it references (paths relative
/// to the manifest's directory). `expected_d`, when given, is checked per file.
inline ActivationDataset load_dataset(const std::filesystem::path &manifest_path,
                                      std::optional<std::size_t> expected_d = std::nullopt)
{
    ActivationDataset ds;
    const auto base = manifest_path.parent_path();
    for (auto &e : load_manifest(manifest_path)) {
        CalibrationSample s;
        s.hidden_states = load_activations(base / e.activation_path);
        if (expected_d && s.hidden_states.d != *expected_d) {
            fail(ErrorCode::DimensionMismatch, "sample " + e.id + ": activations have d=" +
                                                   std::to_string(s.hidden_states.d) + ", SAE expects " +
                                                   std::to_string(*expected_d));
        }
        s.id = std::move(e.id);
        s.label = e.label;
        s.category = std::move(e.category);
        s.prompt_span = e.prompt_span;
        s.response_span = e.response_span;
        s.onset = e.onset;
        s.token_labels = std::move(e.token_labels);
        validate_sample(s);
        if (e.layer) {
            if (ds.layer_index && *ds.layer_index != *e.layer) {
                fail(ErrorCode::InvalidArgument, "manifest mixes layer tags " + std::to_string(*ds.layer_index) +
                                                     " and " + std::to_string(*e.layer));
            }
            ds.layer_index = e.layer;
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

/// Writes `<dir>/manifest.jsonl` and one NGACT file per sample under `<dir>/act/`.
inline void write_dataset(const ActivationDataset &ds, const std::filesystem::path &dir)
{
    std::filesystem::create_directories(dir / "act");
    std::string manifest;
    for (const auto &s : ds.samples) {
        ManifestEntry e{s.id,          s.label,  s.category,     s.prompt_span,  s.response_span,
                        "act/" + s.id + ".ngact", s.onset, s.token_labels, ds.layer_index};
        save_activations(s.hidden_states, dir / e.activation_path);
        manifest += to_json(e).dump();
        manifest += '\n';
    }
    detail::write_file(dir / "manifest.jsonl", manifest);
}

} // namespace nextguard

#endif
