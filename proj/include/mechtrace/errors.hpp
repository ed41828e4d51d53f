#pragma once

#include <stdexcept>
#include <string>

namespace mechtrace {

// Error categories map 1:1 onto CLI exit codes.
enum class ErrorCategory : int { Input = 2, Schema = 3, Numeric = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory cat, const std::string& msg)
      : std::runtime_error(msg), cat_(cat) {}
  ErrorCategory category() const { return cat_; }

 private:
  ErrorCategory cat_;
};

// missing files, unreadable paths, bad flag combinations
struct InputError : Error {
  explicit InputError(const std::string& m) : Error(ErrorCategory::Input, m) {}
};

// malformed containers, unexpected shapes, schema violations
struct SchemaError : Error {
  explicit SchemaError(const std::string& m) : Error(ErrorCategory::Schema, m) {}
};

// dimension mismatches in kernel calls
struct ShapeError : SchemaError {
  explicit ShapeError(const std::string& m) : SchemaError(m) {}
};

// NaN/Inf propagation, tolerance violations, out-of-range numeric arguments
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error(ErrorCategory::Numeric, m) {}
};

}  // namespace mechtrace
