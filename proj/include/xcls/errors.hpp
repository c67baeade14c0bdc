#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace xcls {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeMismatch : Error {
  using Error::Error;
};

struct ZeroNormRow : Error {
  std::size_t row;
  explicit ZeroNormRow(std::size_t r)
      : Error("row " + std::to_string(r) + " has (near-)zero norm"), row(r) {}
};

struct LabelOutOfRange : Error {
  using Error::Error;
};

struct KTooLarge : Error {
  using Error::Error;
};

struct EmptyShard : Error {
  using Error::Error;
};

struct MTooSmall : Error {
  using Error::Error;
};

struct LabelNotActive : Error {
  using Error::Error;
};

struct InvalidArgument : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

}  // namespace xcls
