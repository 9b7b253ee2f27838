// common.hpp - shared error types and small helpers
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fairwell {

inline constexpr std::string_view kVersion = "0.1.0";

// Base class for everything this library throws.
class Error : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or dimension contracts.
class ShapeError : public Error {
  using Error::Error;
};

// NaN/Inf produced or supplied where finite values are required.
class NumericError : public Error {
  using Error::Error;
};

// Operation called out of order (e.g. backward before forward).
class StateError : public Error {
  using Error::Error;
};

// Invalid configuration (bad JSON, illegal field combination, ...).
class ConfigError : public Error {
  using Error::Error;
};

// Input data violates a precondition (schema, missing modality/group, ...).
class DataError : public Error {
  using Error::Error;
};

inline bool is_finite(double v) { return std::isfinite(v); }

}  // namespace fairwell
