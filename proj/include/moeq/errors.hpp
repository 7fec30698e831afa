#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace moeq {

// Bad argument shapes, out-of-range ids, malformed values supplied by a caller.
class InvalidInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Configuration that violates a documented invariant (k > n, tau <= 0, ...).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Unreadable or inconsistent files: bad magic, version, truncated payloads.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operation refused for the given tensor shape (e.g. non power-of-two Hadamard).
class UnsupportedShape : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class FactorizationError : public std::runtime_error {
public:
    explicit FactorizationError(std::size_t pivot)
        : std::runtime_error("cholesky: matrix is not positive definite at pivot " + std::to_string(pivot)),
          pivot_(pivot) {}

    std::size_t pivot() const noexcept { return pivot_; }

private:
    std::size_t pivot_;
};

} // namespace moeq
