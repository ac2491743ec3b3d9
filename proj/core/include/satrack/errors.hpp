#pragma once

#include <stdexcept>
#include <string>

namespace satrack {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or dimension mismatch between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A configuration the library deliberately does not support
/// (even depthwise kernels, non-power-of-two butterfly widths, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Invalid runtime input values: non-finite costs, out-of-order frame
/// indices, zero baselines.
class InputError : public Error {
public:
    using Error::Error;
};

/// Malformed text input; carries the 1-based line number.
class ParseError : public Error {
public:
    ParseError(const std::string& msg, long line)
        : Error(msg + " (line " + std::to_string(line) + ")"), line_(line) {}
    long line() const { return line_; }

private:
    long line_;
};

/// Inconsistent profiler layer graph.
class GraphError : public Error {
public:
    using Error::Error;
};

/// Misuse of the gradient tape (backward called twice, no recorded ops).
class TapeError : public Error {
public:
    using Error::Error;
};

/// A metric that is undefined for the given inputs (e.g. MOTA with zero
/// ground-truth boxes).
class MetricError : public Error {
public:
    using Error::Error;
};

} // namespace satrack
