#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ssa {

// Base of every error thrown by the library. Callers that only need a
// message can catch this; the CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes or lengths that do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Iterations that fail to converge, non-finite values, out-of-range spectra.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Input outside the mathematical domain of a function (e.g. variance <= 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Statistic that is undefined for the given data (zero variance, constant truth).
class UndefinedStatisticError : public Error {
 public:
  using Error::Error;
};

class BatchTooSmallError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Requested subspace larger than the numeric rank of the source covariance.
class RankError : public Error {
 public:
  RankError(std::size_t requested, std::size_t available)
      : Error("requested " + std::to_string(requested) +
              " subspace dimensions but the source covariance has numeric rank " +
              std::to_string(available)),
        requested_(requested),
        available_(available) {}

  std::size_t requested() const { return requested_; }
  std::size_t available() const { return available_; }

 private:
  std::size_t requested_;
  std::size_t available_;
};

// Optimization produced a non-finite loss or parameter.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// A source feature dimension with zero variance entered a variance ratio.
class DegenerateDimensionError : public Error {
 public:
  DegenerateDimensionError(std::size_t dim, const std::string& what)
      : Error(what), dim_(dim) {}

  std::size_t dimension() const { return dim_; }

 private:
  std::size_t dim_;
};

}  // namespace ssa
