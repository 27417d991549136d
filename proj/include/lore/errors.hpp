#pragma once

#include <stdexcept>
#include <string>

namespace lore {

/// Base class for all errors raised by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Bad input from the caller: invalid config, incompatible models,
/// violated preconditions. Maps to CLI exit code 1.
struct ValidationError : Error {
    using Error::Error;
};

/// Filesystem / container-format problems. Maps to CLI exit code 1.
struct IoError : Error {
    using Error::Error;
};

/// Numerical failure inside an algorithm (SVD non-convergence,
/// non-finite intermediates). Maps to CLI exit code 2.
struct NumericalError : Error {
    using Error::Error;
};

}  // namespace lore
