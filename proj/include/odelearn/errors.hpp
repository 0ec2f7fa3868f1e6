#pragma once

#include <stdexcept>
#include <string>

namespace odelearn {

/// Caller broke a documented precondition (dimension mismatch, bad config
/// field, non-finite input, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Input outside the mathematical domain of an operation (e.g. Hamiltonian
/// at a non-positive state).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Experiment configuration file / preset problem.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SolveStatus {
  Ok,
  MaxStepsExceeded,  // step budget exhausted before reaching the end time
  StepUnderflow,     // controller pushed the step below min_step
  NonFiniteState,    // state or derivative left the finite range
};

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Ok: return "ok";
    case SolveStatus::MaxStepsExceeded: return "max_steps_exceeded";
    case SolveStatus::StepUnderflow: return "step_underflow";
    case SolveStatus::NonFiniteState: return "non_finite_state";
  }
  return "unknown";
}

/// Integration failed; carries the failure kind and the last time reached.
class SolverFailure : public std::runtime_error {
 public:
  SolverFailure(SolveStatus status, double t_reached)
      : std::runtime_error(std::string("solver failure: ") + to_string(status) +
                           " at t=" + std::to_string(t_reached)),
        status_(status),
        t_reached_(t_reached) {}

  SolveStatus status() const { return status_; }
  double t_reached() const { return t_reached_; }

 private:
  SolveStatus status_;
  double t_reached_;
};

/// Every initial condition of an epoch diverged; training cannot continue.
class TrainingCollapse : public std::runtime_error {
 public:
  explicit TrainingCollapse(int epoch)
      : std::runtime_error("training collapse: every IC diverged in epoch " +
                           std::to_string(epoch)),
        epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

/// A gradient tape was asked to run its backward pass twice.
class TapeExhausted : public std::logic_error {
 public:
  TapeExhausted() : std::logic_error("gradient tape already consumed") {}
};

}  // namespace odelearn
