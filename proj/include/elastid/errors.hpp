#pragma once

#include <stdexcept>
#include <string>

namespace elastid {

// Error taxonomy shared across the library. The CLI maps these onto exit
// codes: usage errors are handled by the argument parser, DataError -> 3,
// NumericError -> 4.

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad values passed to an operation (out-of-range nu, non-positive E, ...).
class InvalidParameterError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input data (files, bundles, correspondences).
class DataError : public Error {
 public:
  using Error::Error;
};

// Bundle payload does not match its manifest hash.
class CorruptionError : public DataError {
 public:
  using DataError::DataError;
};

// Container/manifest structure problems (missing tensor, unknown dtype).
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

// Attempt to read the sealed ground-truth section in estimation mode.
class SealedAccessError : public DataError {
 public:
  using DataError::DataError;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// det F <= 0 for some particle.
class InvertedElementError : public NumericError {
 public:
  InvertedElementError(const std::string& msg, long particle, long substep = -1)
      : NumericError(msg), particle_index(particle), substep_index(substep) {}
  long particle_index;
  long substep_index;
};

// NaN/Inf detected on the grid or in particle state.
class NumericBlowupError : public NumericError {
 public:
  NumericBlowupError(const std::string& msg, double max_vel)
      : NumericError(msg), max_velocity(max_vel) {}
  double max_velocity;
};

// Polar/singular value decomposition failed on a degenerate matrix.
class SingularDecompositionError : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace elastid
