#pragma once

#include <stdexcept>
#include <string>

namespace loda {

// Error taxonomy used across the library. Everything derives from
// std::runtime_error so callers can catch broadly at the CLI boundary.

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FileError : std::runtime_error {
    explicit FileError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when a correlation is requested on a constant vector. Training
// guards batch composition instead of silently returning zeros.
struct DegenerateBatchError : std::runtime_error {
    explicit DegenerateBatchError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace loda
