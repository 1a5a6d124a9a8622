#pragma once

#include <stdexcept>
#include <string>

namespace mapd {

// Error taxonomy shared across the library. The CLI maps these onto
// process exit codes (config -> 2, dependency -> 3, anything else -> 4).
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

struct NonFiniteError : Error {
    explicit NonFiniteError(const std::string& msg) : Error(msg) {}
};

struct IndexError : Error {
    explicit IndexError(const std::string& msg) : Error(msg) {}
};

struct UsageError : Error {
    explicit UsageError(const std::string& msg) : Error(msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct CapacityError : Error {
    explicit CapacityError(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

struct DependencyError : Error {
    explicit DependencyError(const std::string& msg) : Error(msg) {}
};

}  // namespace mapd
