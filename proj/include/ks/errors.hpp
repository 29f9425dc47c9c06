#pragma once

#include <stdexcept>
#include <string>

namespace ks {

// Shape disagreement between tensors (bad matmul dims, mismatched adds).
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// A caller broke an operation's contract (non-scalar loss, zero steps, ...).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration values or relations.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad input data (out-of-range labels, overlapping class sets, parse failures).
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// File-level failures (missing, truncated, wrong magic/version).
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ks
