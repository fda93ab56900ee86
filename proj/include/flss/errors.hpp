#ifndef FLSS_ERRORS_HPP
#define FLSS_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace flss {

/// Operand shapes do not conform.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A precondition on a value (not a shape) was violated.
class ValueError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite loss or parameters encountered.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed on-disk document (checkpoint, log, dataset, IDX).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad or unknown configuration key/value.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace flss

#endif  // FLSS_ERRORS_HPP
