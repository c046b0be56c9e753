#pragma once

#include <stdexcept>
#include <string>

namespace rl4rec {

// Broken precondition or internal invariant (shape mismatch, stepping a
// terminated env, all-masked action request, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A computation produced NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file or text.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Well-formed but unusable data (empty split, no history rows, ...).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inconsistent configuration: invalid hyperparameters, paradigm/policy
// mismatch, checkpoint incompatible with the config.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define RL4REC_EXPECT(cond, msg)                                        \
  do {                                                                  \
    if (!(cond)) throw ::rl4rec::ContractViolation(std::string(msg));   \
  } while (0)

}  // namespace rl4rec
