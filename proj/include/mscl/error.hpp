#pragma once

#include <stdexcept>
#include <string>

namespace mscl {

/// Error categories map one-to-one onto CLI exit codes.
enum class ErrorKind { config = 2, data = 3, numeric = 4, integrity = 5, dependency = 6 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

  static const char* category(ErrorKind k) {
    switch (k) {
      case ErrorKind::config: return "configuration error";
      case ErrorKind::data: return "data error";
      case ErrorKind::numeric: return "numeric error";
      case ErrorKind::integrity: return "integrity error";
      case ErrorKind::dependency: return "missing dependency";
    }
    return "error";
  }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::config, w) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error(ErrorKind::data, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorKind::numeric, w) {}
};
struct IntegrityError : Error {
  explicit IntegrityError(const std::string& w) : Error(ErrorKind::integrity, w) {}
};
struct DependencyError : Error {
  explicit DependencyError(const std::string& w) : Error(ErrorKind::dependency, w) {}
};

}  // namespace mscl
