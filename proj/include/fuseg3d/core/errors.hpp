#pragma once

#include <stdexcept>
#include <string>

namespace fuseg3d::core {

// Error taxonomy mirrored by the CLI exit codes: config -> 2, data -> 3,
// numerical -> 4.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& m) : std::runtime_error(m) {}
};

struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace fuseg3d::core
