#pragma once

#include <stdexcept>
#include <string>

namespace synthid {

/// Model or file configuration does not match what an operation expects.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A caller-supplied argument violates a precondition.
class ArgumentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Non-finite values appeared during a numeric computation.
class NumericFault : public std::runtime_error {
public:
    NumericFault(const std::string& what, int layer = -1)
        : std::runtime_error(what), layer_(layer) {}
    int layer() const noexcept { return layer_; }

private:
    int layer_;
};

/// Filesystem failure while reading or writing artifacts.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace synthid
