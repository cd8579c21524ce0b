#pragma once

#include <stdexcept>
#include <string>

namespace tdsr {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or raster shapes that do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid parameter values or a violated precondition.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Input data for which the requested quantity is undefined
/// (constant fields, empty masks, single-class label sets, ...).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// File-system and format errors. Messages carry the offending path.
class IoError : public Error {
 public:
  IoError(const std::string& path, const std::string& reason)
      : Error(path + ": " + reason), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Bad configuration keys or values. Messages carry the key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values in losses or gradients.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace tdsr
