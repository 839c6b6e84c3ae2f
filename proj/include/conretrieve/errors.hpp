#pragma once

#include <stdexcept>
#include <string>

namespace conretrieve {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// corpus
struct ParseError : Error { using Error::Error; };
struct SchemaError : Error { using Error::Error; };
struct MissingAnnotation : Error { using Error::Error; };

// summarizer / backends
struct BackendUnavailable : Error { using Error::Error; };
struct EmptyCompletion : Error { using Error::Error; };

// encoder
struct EmptyCorpus : Error { using Error::Error; };
struct LatestUtteranceTooLong : Error { using Error::Error; };
struct ShapeError : Error { using Error::Error; };
struct NoLatestTokens : Error { using Error::Error; };

// trainer
struct DimensionMismatch : Error { using Error::Error; };
struct NonFiniteLoss : Error { using Error::Error; };

// index
struct MissingSummary : Error { using Error::Error; };
struct EmptyIndex : Error { using Error::Error; };
struct FingerprintMismatch : Error { using Error::Error; };
struct VersionMismatch : Error { using Error::Error; };
struct ChecksumError : Error { using Error::Error; };

// harness
struct InsufficientExamples : Error { using Error::Error; };
struct LengthMismatch : Error { using Error::Error; };

// filesystem / sinks
struct IoError : Error { using Error::Error; };

}  // namespace conretrieve
