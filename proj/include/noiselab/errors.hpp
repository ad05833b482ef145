#pragma once

#include <stdexcept>
#include <string>

namespace noiselab {

// Invalid or inconsistent configuration (shapes, dims, missing fields).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical precondition violated (non-finite input, vanishing denominator, infeasible construction).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace noiselab
