#include "synthcount/errors.hpp"

namespace synthcount {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::CanvasTooSmall: return "CanvasTooSmall";
        case ErrorCode::TooFewObjects: return "TooFewObjects";
        case ErrorCode::BandFull: return "BandFull";
        case ErrorCode::BadFraction: return "BadFraction";
        case ErrorCode::BackendUnavailable: return "BackendUnavailable";
        case ErrorCode::GenerationRejected: return "GenerationRejected";
        case ErrorCode::ZeroVector: return "ZeroVector";
        case ErrorCode::BadLambda: return "BadLambda";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::BadShape: return "BadShape";
        case ErrorCode::ManifestEmpty: return "ManifestEmpty";
        case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorCode::EmptyCategory: return "EmptyCategory";
        case ErrorCode::BadM: return "BadM";
        case ErrorCode::MissingDependency: return "MissingDependency";
        case ErrorCode::MissingPrediction: return "MissingPrediction";
        case ErrorCode::ConfigError: return "ConfigError";
        case ErrorCode::IoError: return "IoError";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
    }
    return "Unknown";
}

}  // namespace synthcount
