#pragma once

#include <stdexcept>
#include <string>

namespace metashift {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad inputs, bad parameters, malformed files. The CLI maps these to exit code 2.
struct ValidationError : Error {
    using Error::Error;
};

struct InvalidInputError : ValidationError {
    using ValidationError::ValidationError;
};

// Too few samples for the requested fit.
struct InsufficientDataError : ValidationError {
    using ValidationError::ValidationError;
};

// Target distribution puts mass where the source has none.
struct SupportViolationError : ValidationError {
    using ValidationError::ValidationError;
};

// Structurally valid input that degenerates under the requested operation
// (all-zero reweighted row, zero class marginal, empty groups everywhere).
struct DegenerateInputError : ValidationError {
    using ValidationError::ValidationError;
};

// Generative spec fails validation (asymmetric or non-PD covariance).
struct SpecValidationError : ValidationError {
    using ValidationError::ValidationError;
};

// Metric undefined for the given inputs (e.g. single-class AUC).
struct UndefinedMetricError : ValidationError {
    using ValidationError::ValidationError;
};

// Non-finite intermediate inside an iterative routine. CLI exit code 3.
struct NumericalError : Error {
    explicit NumericalError(const std::string& what, int iteration = -1)
        : Error(what), iteration(iteration) {}
    int iteration;
};

}  // namespace metashift
