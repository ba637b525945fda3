#pragma once

#include <stdexcept>
#include <string>

namespace looplynx {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid model/hardware/run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// KV cache overflow.
class CapacityError : public Error {
 public:
  using Error::Error;
};

class WeightFileError : public Error {
 public:
  using Error::Error;
};

}  // namespace looplynx
