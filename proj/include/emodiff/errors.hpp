#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace emodiff {

// Error taxonomy shared by all modules. CLI exit codes map onto these:
// usage/config -> 1, data -> 2, training divergence -> 3.
struct ArgumentError : std::invalid_argument {
    explicit ArgumentError(const std::string& msg) : std::invalid_argument(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainingError : std::runtime_error {
    std::size_t step;
    TrainingError(const std::string& msg, std::size_t step_index)
        : std::runtime_error(msg + " (step " + std::to_string(step_index) + ")"), step(step_index) {}
};

}  // namespace emodiff
