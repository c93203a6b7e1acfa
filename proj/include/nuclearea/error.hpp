#pragma once

#include <stdexcept>
#include <string>

namespace nuclearea {

// Base class for everything the library throws on bad input. The category
// maps onto the CLI exit codes (config 2, data 3, numeric 4).
class Error : public std::runtime_error {
 public:
  enum class Kind { config, data, numeric };

  Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

  int exit_code() const noexcept {
    switch (kind_) {
      case Kind::config: return 2;
      case Kind::data: return 3;
      case Kind::numeric: return 4;
    }
    return 1;
  }

 private:
  Kind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(Kind::config, what) {}
};

struct DataError : Error {
  explicit DataError(const std::string& what) : Error(Kind::data, what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(Kind::numeric, what) {}
};

// Tensor shape disagreement; the message names the offending dimension.
struct ShapeError : DataError {
  explicit ShapeError(const std::string& what) : DataError("shape mismatch: " + what) {}
};

}  // namespace nuclearea
