#pragma once

#include <stdexcept>
#include <string>

namespace uplm {

/// Bad user input: invalid configuration values, missing required options.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Unreadable, malformed or empty data files and checkpoints.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Non-finite values or divergence during computation.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace uplm
