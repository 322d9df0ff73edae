#ifndef GSC_ERROR_HPP
#define GSC_ERROR_HPP

#include <stdexcept>
#include <string>
#include <vector>

namespace gsc {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Enumeration guard exceeded (e.g. 2^H states for H > h_exact_max).
class CapacityError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

/// A positive-definite solve failed even after jitter escalation.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, std::vector<int> state = {},
                 double condition_estimate = 0.0)
      : Error(what),
        state_(std::move(state)),
        condition_estimate_(condition_estimate) {}

  /// Active latent indices of the offending binary state (empty if n/a).
  const std::vector<int>& state() const { return state_; }
  /// Reciprocal condition estimate of the failing matrix.
  double condition_estimate() const { return condition_estimate_; }

 private:
  std::vector<int> state_;
  double condition_estimate_;
};

}  // namespace gsc

#endif  // GSC_ERROR_HPP
