#pragma once

#include <stdexcept>
#include <string>

namespace nanmerge {

// Base for everything this library throws. Subcategories map onto the
// CLI exit codes: validation (1), io (2), numeric (3).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ValidationError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};

// tensor-core
struct ShapeMismatch : ValidationError {
    using ValidationError::ValidationError;
};
struct EmptyInput : ValidationError {
    using ValidationError::ValidationError;
};
struct NonFiniteInput : NumericError {
    using NumericError::NumericError;
};
struct OverflowOnCast : IoError {
    using IoError::IoError;
};

// lsq-core
struct DimensionMismatch : ValidationError {
    using ValidationError::ValidationError;
};
struct SingularGram : NumericError {
    using NumericError::NumericError;
};

// merge-core
struct KeyMismatch : ValidationError {
    using ValidationError::ValidationError;
};
struct BaseMismatch : ValidationError {
    using ValidationError::ValidationError;
};
struct BadWeights : ValidationError {
    using ValidationError::ValidationError;
};
struct BadTrim : ValidationError {
    using ValidationError::ValidationError;
};
struct ZeroNormModel : NumericError {
    using NumericError::NumericError;
};
struct GramShapeMismatch : ValidationError {
    using ValidationError::ValidationError;
};
struct RecipeInvalid : ValidationError {
    using ValidationError::ValidationError;
};

// checkpoint-io
struct CorruptHeader : IoError {
    using IoError::IoError;
};
struct UnsupportedDType : IoError {
    using IoError::IoError;
};
struct IoFailure : IoError {
    using IoError::IoError;
};
struct RecipeParseError : ValidationError {
    using ValidationError::ValidationError;
};

}  // namespace nanmerge
