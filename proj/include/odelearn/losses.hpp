#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "odelearn/errors.hpp"
#include "odelearn/net.hpp"
#include "odelearn/solver.hpp"
#include "odelearn/systems.hpp"

namespace odelearn {

/// Multipliers of the composite training objective. Zeros select the
/// ablation variants (data-only, physics-only, continuity-only).
struct LossWeights {
  double lambda_phys = 10.0;
  double lambda_cont = 1.0;
  double lambda_reg = 1e-5;

  void validate() const {
    if (lambda_phys < 0.0 || lambda_cont < 0.0 || lambda_reg < 0.0)
      throw ContractViolation("loss weights must be non-negative");
  }
};

struct LossBreakdown {
  double data = 0.0;
  double phys = 0.0;
  double cont = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

/// Mean over time points of the squared Euclidean distance between states.
inline double data_loss_states(std::span<const State> pred, std::span<const State> truth) {
  if (pred.size() != truth.size() || pred.empty())
    throw ContractViolation("data loss: state sequences must be non-empty and aligned");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += squared_distance(pred[i], truth[i]);
  return s / static_cast<double>(pred.size());
}

/// Trajectory MSE on identical time grids.
inline double data_loss(const Trajectory& pred, const Trajectory& truth) {
  if (pred.times.size() != truth.times.size())
    throw ContractViolation("data loss: time grids differ in length");
  for (std::size_t i = 0; i < pred.times.size(); ++i)
    if (pred.times[i] != truth.times[i])
      throw ContractViolation("data loss: time grids differ");
  return data_loss_states(pred.states, truth.states);
}

/// Mean squared field residual ||f(z) - f_ref(z)||^2 over the collocation
/// set. The set is a multiset: duplicated states count twice.
template <class Field>
double physics_loss(const Field& field, std::span<const State> collocation,
                    const SystemParams& reference) {
  if (collocation.empty()) throw ContractViolation("physics loss: empty collocation set");
  double s = 0.0;
  double fz[State::kMaxDim];
  for (const State& z : collocation) {
    field(z.data(), fz);
    const State fr = rhs(reference, z);
    for (int i = 0; i < fr.dim(); ++i) {
      const double d = fz[i] - fr[i];
      s += d * d;
    }
  }
  return s / static_cast<double>(collocation.size());
}

/// Mean squared junction gap between a segment's predicted endpoint and the
/// true state starting the next segment. No junctions (K = 1) gives 0.
inline double continuity_loss(std::span<const State> segment_end_preds,
                              std::span<const State> segment_start_truths) {
  if (segment_end_preds.size() != segment_start_truths.size())
    throw ContractViolation("continuity loss: junction lists must be aligned");
  if (segment_end_preds.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < segment_end_preds.size(); ++i)
    s += squared_distance(segment_end_preds[i], segment_start_truths[i]);
  return s / static_cast<double>(segment_end_preds.size());
}

/// Assemble the weighted objective from its parts.
inline LossBreakdown total_loss(double data, double phys, double cont,
                                const LossWeights& w, const ParamVec& params) {
  w.validate();
  LossBreakdown b;
  b.data = data;
  b.phys = phys;
  b.cont = cont;
  b.reg = param_l1(params);
  b.total = b.data + w.lambda_phys * b.phys + w.lambda_cont * b.cont + w.lambda_reg * b.reg;
  return b;
}

}  // namespace odelearn
