#pragma once

#include <stdexcept>
#include <string>

namespace roivit {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

// API misuse: non-scalar backward root, empty confusion matrix, bad index.
struct UsageError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct GeneratorError : Error {
  using Error::Error;
};

struct FormatError : Error {
  using Error::Error;
};

struct DatasetError : Error {
  using Error::Error;
};

struct NumericalError : Error {
  using Error::Error;
};

}  // namespace roivit
