#pragma once

#include <stdexcept>
#include <string>

namespace pulseforge {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Inconsistent or invalid configuration (shapes, rates, unknown names).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed input file. The message names the file and line.
class ParseError : public Error {
public:
    using Error::Error;
};

/// Input has no usable variation (constant signal, zero power).
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

} // namespace pulseforge
