#ifndef NEXTGUARD_PROTOCOL_HPP
#define NEXTGUARD_PROTOCOL_HPP

// Sidecar wire protocol: one JSON object per newline-terminated line.
//
// Client to service:
//   {"type":"session_open","session_id":s,"sae_fingerprint":f[,"mask_policy":m]}
//   {"type":"token","session_id":s,"token_index":i,"role":r,"hidden_state":<base64 f32 LE>}
//   {"type":"token",...,"hidden_state_ref":{"path":p,"row":n}}
//   {"type":"session_close","session_id":s}
// Service to client:
//   session_opened, risk, intervention, session_closed, error
// Every frame may carry "v" (protocol version, 1). Unknown fields are ignored.

#include <bit>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <boost/beast/core/detail/base64.hpp>
#include <nlohmann/json.hpp>

#include <nextguard/activations.hpp>
#include <nextguard/error.hpp>

namespace nextguard::protocol {

inline constexpr int kVersion = 1;

enum class Code : std::uint8_t {
    BadFrame,
    UnsupportedVersion,
    UnknownSession,
    DuplicateSession,
    OutOfOrder,
    FingerprintMismatch,
    OversizedFrame,
    SessionCap,
    TokenCap,
    SessionHalted,
    DimensionMismatch,
    RoleOrder,
    BadReference,
    Internal,
};

constexpr std::string_view to_string(Code c) noexcept
{
    switch (c) {
    case Code::BadFrame: return "BAD_FRAME";
    case Code::UnsupportedVersion: return "UNSUPPORTED_VERSION";
    case Code::UnknownSession: return "UNKNOWN_SESSION";
    case Code::DuplicateSession: return "DUPLICATE_SESSION";
    case Code::OutOfOrder: return "OUT_OF_ORDER";
    case Code::FingerprintMismatch: return "FINGERPRINT_MISMATCH";
    case Code::OversizedFrame: return "OVERSIZED_FRAME";
    case Code::SessionCap: return "SESSION_CAP";
    case Code::TokenCap: return "TOKEN_CAP";
    case Code::SessionHalted: return "SESSION_HALTED";
    case Code::DimensionMismatch: return "DIMENSION_MISMATCH";
    case Code::RoleOrder: return "ROLE_ORDER";
    case Code::BadReference: return "BAD_REFERENCE";
    case Code::Internal: return "INTERNAL";
    }
    return "INTERNAL";
}

/// A request that cannot be served; becomes an error frame.
struct ProtocolError {
    Code code;
    std::string message;
    std::optional<std::string> session_id;
    std::optional<std::uint64_t> token_index;
};

// ---------------------------------------------------------------------------
// Hidden-state payloads

inline std::string encode_hidden_state(std::span<const float> h)
{
    static_assert(std::endian::native == std::endian::little);
    namespace b64 = boost::beast::detail::base64;
    std::string out(b64::encoded_size(h.size_bytes()), '\0');
    out.resize(b64::encode(out.data(), h.data(), h.size_bytes()));
    return out;
}

/// Strict decoding: canonical padding, no whitespace, length a multiple of 4 bytes of floats.
inline std::optional<std::vector<float>> decode_hidden_state(std::string_view text)
{
    namespace b64 = boost::beast::detail::base64;
    if (text.size() % 4 != 0) {
        return std::nullopt;
    }
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        const bool alnum = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9');
        const bool pad = c == '=' && i + 2 >= text.size() && (i + 1 == text.size() || text[i + 1] == '=');
        if (!alnum && c != '+' && c != '/' && !pad) {
            return std::nullopt;
        }
    }
    std::string raw(b64::decoded_size(text.size()), '\0');
    const auto [written, read] = b64::decode(raw.data(), text.data(), text.size());
    const auto pads = static_cast<std::size_t>(text.size() - text.find_last_not_of('=') - 1) % 4;
    if (read + pads != text.size() || written != text.size() / 4 * 3 - pads || written % sizeof(float) != 0) {
        return std::nullopt;
    }
    std::vector<float> h(written / sizeof(float));
    std::memcpy(h.data(), raw.data(), written);
    return h;
}

// ---------------------------------------------------------------------------
// Requests

struct OpenRequest {
    std::string session_id;
    std::string sae_fingerprint;
    std::optional<MaskPolicy> mask_policy;
};

struct FileRef {
    std::string path;
    std::size_t row = 0;
};

struct TokenRequest {
    std::string session_id;
    std::uint64_t token_index = 0;
    TokenRole role = TokenRole::Response;
    std::variant<std::vector<float>, FileRef> hidden_state;
};

struct CloseRequest {
    std::string session_id;
};

using Request = std::variant<OpenRequest, TokenRequest, CloseRequest>;

namespace detail {

inline const nlohmann::json &field(const nlohmann::json &j, const char *key, const std::optional<std::string> &sid)
{
    const auto it = j.find(key);
    if (it == j.end()) {
        throw ProtocolError{Code::BadFrame, std::string("missing field '") + key + "'", sid, std::nullopt};
    }
    return *it;
}

inline std::string string_field(const nlohmann::json &j, const char *key, const std::optional<std::string> &sid)
{
    const auto &v = field(j, key, sid);
    if (!v.is_string()) {
        throw ProtocolError{Code::BadFrame, std::string("field '") + key + "' must be a string", sid, std::nullopt};
    }
    return v.get<std::string>();
}

inline std::uint64_t index_field(const nlohmann::json &j, const char *key, const std::optional<std::string> &sid)
{
    const auto &v = field(j, key, sid);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
        throw ProtocolError{Code::BadFrame, std::string("field '") + key + "' must be a non-negative integer", sid,
                            std::nullopt};
    }
    return v.get<std::uint64_t>();
}

} // namespace detail

/// Parses one line. Throws ProtocolError.
inline Request parse_request(std::string_view line)
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error &) {
        throw ProtocolError{Code::BadFrame, "frame is not valid JSON", std::nullopt, std::nullopt};
    }
    if (!j.is_object()) {
        throw ProtocolError{Code::BadFrame, "frame must be a JSON object", std::nullopt, std::nullopt};
    }
    std::optional<std::string> sid;
    if (const auto it = j.find("session_id"); it != j.end() && it->is_string()) {
        sid = it->get<std::string>();
    }
    if (const auto it = j.find("v"); it != j.end() && !(it->is_number_integer() && it->get<int>() == kVersion)) {
        throw ProtocolError{Code::UnsupportedVersion, "unsupported protocol version", sid, std::nullopt};
    }
    const auto type = detail::string_field(j, "type", sid);
    if (type == "session_open") {
        OpenRequest r{detail::string_field(j, "session_id", sid), detail::string_field(j, "sae_fingerprint", sid),
                      std::nullopt};
        if (j.contains("mask_policy")) {
            try {
                r.mask_policy = parse_mask_policy(detail::string_field(j, "mask_policy", sid));
            } catch (const Error &e) {
                throw ProtocolError{Code::BadFrame, e.what(), sid, std::nullopt};
            }
        }
        return r;
    }
    if (type == "token") {
        TokenRequest r;
        r.session_id = detail::string_field(j, "session_id", sid);
        r.token_index = detail::index_field(j, "token_index", sid);
        try {
            r.role = parse_role(detail::string_field(j, "role", sid));
        } catch (const Error &e) {
            throw ProtocolError{Code::BadFrame, e.what(), sid, r.token_index};
        }
        if (j.contains("hidden_state")) {
            auto h = decode_hidden_state(detail::string_field(j, "hidden_state", sid));
            if (!h) {
                throw ProtocolError{Code::BadFrame, "hidden_state is not base64 little-endian f32", sid, r.token_index};
            }
            r.hidden_state = std::move(*h);
        } else if (j.contains("hidden_state_ref")) {
            const auto &ref = j["hidden_state_ref"];
            if (!ref.is_object()) {
                throw ProtocolError{Code::BadFrame, "hidden_state_ref must be an object", sid, r.token_index};
            }
            r.hidden_state = FileRef{detail::string_field(ref, "path", sid), detail::index_field(ref, "row", sid)};
        } else {
            throw ProtocolError{Code::BadFrame, "token frame needs hidden_state or hidden_state_ref", sid,
                                r.token_index};
        }
        return r;
    }
    if (type == "session_close") {
        return CloseRequest{detail::string_field(j, "session_id", sid)};
    }
    throw ProtocolError{Code::BadFrame, "unknown frame type '" + type + "'", sid, std::nullopt};
}

// ---------------------------------------------------------------------------
// Frame builders (client and service side)

inline std::string line(const nlohmann::json &j) { return j.dump() + "\n"; }

inline std::string open_frame(std::string_view session_id, std::string_view fingerprint,
                              std::optional<MaskPolicy> mask = std::nullopt)
{
    nlohmann::json j{{"type", "session_open"}, {"v", kVersion}, {"session_id", session_id},
                     {"sae_fingerprint", fingerprint}};
    if (mask) {
        j["mask_policy"] = std::string(to_string(*mask));
    }
    return line(j);
}

inline std::string token_frame(std::string_view session_id, std::uint64_t token_index, TokenRole role,
                               std::span<const float> h)
{
    return line({{"type", "token"},
                 {"v", kVersion},
                 {"session_id", session_id},
                 {"token_index", token_index},
                 {"role", std::string(to_string(role))},
                 {"hidden_state", encode_hidden_state(h)}});
}

inline std::string token_ref_frame(std::string_view session_id, std::uint64_t token_index, TokenRole role,
                                   std::string_view path, std::size_t row)
{
    return line({{"type", "token"},
                 {"v", kVersion},
                 {"session_id", session_id},
                 {"token_index", token_index},
                 {"role", std::string(to_string(role))},
                 {"hidden_state_ref", {{"path", path}, {"row", row}}}});
}

inline std::string close_frame(std::string_view session_id)
{
    return line({{"type", "session_close"}, {"v", kVersion}, {"session_id", session_id}});
}

inline std::string error_frame(const ProtocolError &e)
{
    nlohmann::json j{{"type", "error"}, {"v", kVersion}, {"code", std::string(to_string(e.code))}, {"message", e.message}};
    if (e.session_id) {
        j["session_id"] = *e.session_id;
    }
    if (e.token_index) {
        j["token_index"] = *e.token_index;
    }
    return line(j);
}

} // namespace nextguard::protocol

#endif
