#ifndef NEXTGUARD_ERROR_HPP
#define NEXTGUARD_ERROR_HPP

#include <stdexcept>
#include <string>
#include <string_view>

namespace nextguard {

enum class ErrorCode {
    InvalidArgument,
    DimensionMismatch,
    Malformed,
    UnsupportedVersion,
    NonFinite,
    NotOvercomplete,
    IndexOutOfRange,
    InsufficientData,
    FingerprintMismatch,
    SessionHalted,
    SessionClosed,
    SessionOpen,
    RoleOrder,
    Io,
};

constexpr std::string_view to_string(ErrorCode code) noexcept
{
    switch (code) {
    case ErrorCode::InvalidArgument: return "invalid_argument";
    case ErrorCode::DimensionMismatch: return "dimension_mismatch";
    case ErrorCode::Malformed: return "malformed";
    case ErrorCode::UnsupportedVersion: return "unsupported_version";
    case ErrorCode::NonFinite: return "non_finite";
    case ErrorCode::NotOvercomplete: return "not_overcomplete";
    case ErrorCode::IndexOutOfRange: return "index_out_of_range";
    case ErrorCode::InsufficientData: return "insufficient_data";
    case ErrorCode::FingerprintMismatch: return "fingerprint_mismatch";
    case ErrorCode::SessionHalted: return "session_halted";
    case ErrorCode::SessionClosed: return "session_closed";
    case ErrorCode::SessionOpen: return "session_open";
    case ErrorCode::RoleOrder: return "role_order";
    case ErrorCode::Io: return "io";
    }
    return "unknown";
}

/// Every failure raised by the library carries a machine-readable code.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string &message)
        : std::runtime_error(message), code_(code)
    {
    }

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string &message)
{
    throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string &message)
{
    if (!condition) {
        fail(code, message);
    }
}

} // namespace nextguard

#endif
