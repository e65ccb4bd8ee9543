#pragma once

#include <stdexcept>
#include <string>

namespace rbsn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed on-disk data (bad magic, truncated file, wrong record size).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Tensor or layer dimensions that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration value or violated precondition on a user-supplied parameter.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite activations, losses or gradients.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

#define RBSN_CHECK(cond, ExcType, msg)  \
  do {                                  \
    if (!(cond)) throw ExcType((msg));  \
  } while (false)

}  // namespace rbsn
