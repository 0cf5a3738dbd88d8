#pragma once

#include <stdexcept>
#include <string>

namespace memguard {

// Bad shapes, out-of-range indices, degenerate inputs.
struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Invalid policies, site selections, config files.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TokenizationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite loss or a missed loss target.
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// An interceptor broke its contract (e.g. returned the wrong shape).
struct ContractViolation : std::logic_error {
    using std::logic_error::logic_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace memguard
