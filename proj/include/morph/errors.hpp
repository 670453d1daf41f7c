#pragma once

#include <stdexcept>
#include <string>

namespace morph {

// Error taxonomy, mapped to CLI exit codes in tools/facemorph.cpp:
//   ConfigError -> 2, data-side errors -> 3, NumericError -> 4.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& m) : std::runtime_error(m) {}
};

struct ShapeError : DataError {
  explicit ShapeError(const std::string& m) : DataError(m) {}
};

struct ValidationError : DataError {
  explicit ValidationError(const std::string& m) : DataError(m) {}
};

struct DomainError : DataError {
  explicit DomainError(const std::string& m) : DataError(m) {}
};

struct ProtocolError : DataError {
  explicit ProtocolError(const std::string& m) : DataError(m) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace morph
