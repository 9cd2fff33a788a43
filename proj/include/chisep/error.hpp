#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace chisep {

enum class ErrorCode {
    InvalidArgument,
    GridMismatch,
    DegenerateStats,
    AxisTooShort,
    DegenerateX,
    BadMagic,
    BadHeader,
    UnsupportedDatatype,
    TruncatedData,
    BadB0,
    TooLarge,
    BadThreshold,
    BadSpec,
    PrimitiveOutOfBounds,
    BadEchoTimes,
    NonUniformSpacing,
    TooFewEchoes,
    WrappedInput,
    TooFewOrientations,
    BadDr,
    ChannelMismatch,
    ShapeMismatch,
    PatchTooLarge,
    BadAngle,
    B0NotAxial,
    EmptyDataset,
    DivergedLoss,
    EmptyResult,
    ZeroPeak,
    ZeroReference,
    ZeroDynamicRange,
    NoLabels,
    IoError,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::GridMismatch: return "GridMismatch";
    case ErrorCode::DegenerateStats: return "DegenerateStats";
    case ErrorCode::AxisTooShort: return "AxisTooShort";
    case ErrorCode::DegenerateX: return "DegenerateX";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::BadHeader: return "BadHeader";
    case ErrorCode::UnsupportedDatatype: return "UnsupportedDatatype";
    case ErrorCode::TruncatedData: return "TruncatedData";
    case ErrorCode::BadB0: return "BadB0";
    case ErrorCode::TooLarge: return "TooLarge";
    case ErrorCode::BadThreshold: return "BadThreshold";
    case ErrorCode::BadSpec: return "BadSpec";
    case ErrorCode::PrimitiveOutOfBounds: return "PrimitiveOutOfBounds";
    case ErrorCode::BadEchoTimes: return "BadEchoTimes";
    case ErrorCode::NonUniformSpacing: return "NonUniformSpacing";
    case ErrorCode::TooFewEchoes: return "TooFewEchoes";
    case ErrorCode::WrappedInput: return "WrappedInput";
    case ErrorCode::TooFewOrientations: return "TooFewOrientations";
    case ErrorCode::BadDr: return "BadDr";
    case ErrorCode::ChannelMismatch: return "ChannelMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::PatchTooLarge: return "PatchTooLarge";
    case ErrorCode::BadAngle: return "BadAngle";
    case ErrorCode::B0NotAxial: return "B0NotAxial";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::EmptyResult: return "EmptyResult";
    case ErrorCode::ZeroPeak: return "ZeroPeak";
    case ErrorCode::ZeroReference: return "ZeroReference";
    case ErrorCode::ZeroDynamicRange: return "ZeroDynamicRange";
    case ErrorCode::NoLabels: return "NoLabels";
    case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

/// Errors that stem from the data being numerically unusable rather than
/// from malformed input. The CLI maps these to exit code 3.
inline bool is_numerical(ErrorCode code) {
    switch (code) {
    case ErrorCode::DegenerateStats:
    case ErrorCode::DegenerateX:
    case ErrorCode::DivergedLoss:
    case ErrorCode::ZeroPeak:
    case ErrorCode::ZeroReference:
    case ErrorCode::ZeroDynamicRange:
        return true;
    default:
        return false;
    }
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
    throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
    if (!cond) fail(code, what);
}

} // namespace chisep
