#pragma once

#include <stdexcept>
#include <string>

namespace mvft {

// Errors caused by a bad configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Errors caused by missing or malformed input data (CLI exit code 3).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Schema violations when reading structured documents (reports, specs).
struct SchemaError : DataError {
    explicit SchemaError(const std::string& msg) : DataError(msg) {}
};

}  // namespace mvft
