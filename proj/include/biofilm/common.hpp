#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <stdexcept>
#include <string>

namespace biofilm {

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Vector = VectorX<double>;
using Matrix = MatrixX<double>;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An argument violates a documented precondition (bad dimensions, bad ranges).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// An internal variable left the open interval (0, 1) where the penalty is finite.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Raised by the Newton solver. `step` is the 1-based step being solved, or -1
/// when the failure happened outside a time loop.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, double residual_norm, int step = -1)
      : Error(what), residual_norm_(residual_norm), step_(step) {}

  double residual_norm() const noexcept { return residual_norm_; }
  int step() const noexcept { return step_; }

 private:
  double residual_norm_;
  int step_;
};

class NonConvergence : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class DomainEscape : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class DegenerateVariance : public Error {
 public:
  using Error::Error;
};

class SingularCovariance : public Error {
 public:
  using Error::Error;
};

}  // namespace biofilm
