#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace gpreg {

enum class ErrorCode {
    invalid_argument,
    insufficient_data,
    rank_deficient,
    singular,
    ill_conditioned,
    not_converged,
    duplicate,
    not_found,
    out_of_range,
    unavailable,
    precondition,
    schema,
    size_mismatch,
    unsupported_version,
    io,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::invalid_argument: return "invalid_argument";
        case ErrorCode::insufficient_data: return "insufficient_data";
        case ErrorCode::rank_deficient: return "rank_deficient";
        case ErrorCode::singular: return "singular";
        case ErrorCode::ill_conditioned: return "ill_conditioned";
        case ErrorCode::not_converged: return "not_converged";
        case ErrorCode::duplicate: return "duplicate";
        case ErrorCode::not_found: return "not_found";
        case ErrorCode::out_of_range: return "out_of_range";
        case ErrorCode::unavailable: return "unavailable";
        case ErrorCode::precondition: return "precondition";
        case ErrorCode::schema: return "schema";
        case ErrorCode::size_mismatch: return "size_mismatch";
        case ErrorCode::unsupported_version: return "unsupported_version";
        case ErrorCode::io: return "io";
    }
    return "unknown";
}

// Numeric failures are the library's fault (or the data's conditioning); everything
// else is a problem with the request.
inline bool is_numeric_failure(ErrorCode code) {
    return code == ErrorCode::singular || code == ErrorCode::ill_conditioned ||
           code == ErrorCode::not_converged || code == ErrorCode::rank_deficient;
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message, std::string detail = {})
        : std::runtime_error(message), code_(code), detail_(std::move(detail)) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }
    [[nodiscard]] const std::string& detail() const noexcept { return detail_; }

private:
    ErrorCode code_;
    std::string detail_;
};

} // namespace gpreg
