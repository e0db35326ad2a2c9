#pragma once

#include <stdexcept>
#include <string>

namespace f2pad {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller violated a documented precondition (bad argument, bad config key, ...).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Tensor extents do not agree. The message names the offending dimension.
class ShapeError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// A numerical routine failed (non-finite values, failed factorization).
class NumericError : public Error {
public:
    using Error::Error;
};

/// I/O or file-format failure.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace f2pad
