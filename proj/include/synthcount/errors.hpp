#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace synthcount {

enum class ErrorCode {
    CanvasTooSmall,
    TooFewObjects,
    BandFull,
    BadFraction,
    BackendUnavailable,
    GenerationRejected,
    ZeroVector,
    BadLambda,
    ShapeMismatch,
    BadShape,
    ManifestEmpty,
    NonFiniteLoss,
    EmptyCategory,
    BadM,
    MissingDependency,
    MissingPrediction,
    ConfigError,
    IoError,
    InvalidArgument,
};

std::string_view to_string(ErrorCode code) noexcept;

// Every failure surfaced by the library carries one of the codes above so the
// CLI can emit a machine-readable error record.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), message_(message) {}

    ErrorCode code() const noexcept { return code_; }
    // what() without the code prefix.
    const std::string& message() const noexcept { return message_; }

private:
    ErrorCode code_;
    std::string message_;
};

}  // namespace synthcount
