#pragma once

#include <stdexcept>
#include <string>

namespace mdsep {

// Error taxonomy mirrored by CLI exit codes:
//   ConfigError -> 2, DataError -> 3, NumericError -> 4.
// ShapeError and StateError are programming/contract errors and map to 2.

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

struct DataError : Error {
    explicit DataError(const std::string& msg) : Error("data error: " + msg) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error("numeric error: " + msg) {}
};

struct StateError : Error {
    explicit StateError(const std::string& msg) : Error("state error: " + msg) {}
};

}  // namespace mdsep
