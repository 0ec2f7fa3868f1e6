#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "odelearn/errors.hpp"
#include "odelearn/losses.hpp"
#include "odelearn/net.hpp"
#include "odelearn/rng.hpp"
#include "odelearn/solver.hpp"
#include "odelearn/systems.hpp"
#include "odelearn/tape.hpp"

namespace odelearn {

enum class Method { NN, PINN, MIC, MPI, Structured };
enum class Sampling { FullWindow, Expanding, Sliding };
enum class SamplerMode { TypicalUniform, MixedEdge };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::NN: return "nn";
    case Method::PINN: return "pinn";
    case Method::MIC: return "mic";
    case Method::MPI: return "mpi";
    case Method::Structured: return "structured";
  }
  return "unknown";
}

inline Method method_from_string(std::string_view s) {
  if (s == "nn") return Method::NN;
  if (s == "pinn") return Method::PINN;
  if (s == "mic") return Method::MIC;
  if (s == "mpi") return Method::MPI;
  if (s == "structured") return Method::Structured;
  throw ConfigError("unknown method '" + std::string(s) + "'");
}

inline const char* to_string(Sampling s) {
  switch (s) {
    case Sampling::FullWindow: return "full";
    case Sampling::Expanding: return "expanding";
    case Sampling::Sliding: return "sliding";
  }
  return "unknown";
}

inline Sampling sampling_from_string(std::string_view s) {
  if (s == "full") return Sampling::FullWindow;
  if (s == "expanding") return Sampling::Expanding;
  if (s == "sliding") return Sampling::Sliding;
  throw ConfigError("unknown sampling strategy '" + std::string(s) + "'");
}

/// Initial-condition distribution: a typical-regime uniform box, optionally
/// mixed half-and-half with a log-uniform edge regime reaching down to the
/// extinction axes.
struct ICSamplerSpec {
  SamplerMode mode = SamplerMode::MixedEdge;
  double uniform_lo = 0.1;
  double uniform_hi = 10.0;
  double loguniform_lo = 1e-3;
  double loguniform_hi = 10.0;

  void validate() const {
    if (!(uniform_lo > 0.0 && uniform_lo < uniform_hi))
      throw ContractViolation("IC sampler: need 0 < uniform_lo < uniform_hi");
    if (!(loguniform_lo > 0.0 && loguniform_lo < loguniform_hi))
      throw ContractViolation("IC sampler: need 0 < loguniform_lo < loguniform_hi");
  }
};

/// MixedEdge: first ceil(n/2) states uniform on the typical box, the rest
/// with each coordinate 10^u, u uniform in log10 of the edge range.
inline std::vector<State> sample_ics(const ICSamplerSpec& spec, int n, Rng& rng) {
  spec.validate();
  if (n < 1) throw ContractViolation("sample_ics: n must be >= 1");
  std::vector<State> out;
  out.reserve(static_cast<std::size_t>(n));
  const int n_uniform = spec.mode == SamplerMode::MixedEdge ? (n + 1) / 2 : n;
  for (int i = 0; i < n; ++i) {
    State s(2);
    if (i < n_uniform) {
      s[0] = rng.uniform(spec.uniform_lo, spec.uniform_hi);
      s[1] = rng.uniform(spec.uniform_lo, spec.uniform_hi);
    } else {
      const double lo = std::log10(spec.loguniform_lo), hi = std::log10(spec.loguniform_hi);
      s[0] = std::pow(10.0, rng.uniform(lo, hi));
      s[1] = std::pow(10.0, rng.uniform(lo, hi));
    }
    out.push_back(s);
  }
  return out;
}

inline constexpr double kSlidingWindowLength = 6.0;
inline constexpr double kExpandingStartFraction = 0.1;
inline constexpr double kExpandingRampFraction = 0.75;

/// Active fitting window for one epoch under the chosen temporal strategy.
inline std::pair<double, double> window_schedule(Sampling strategy, int epoch,
                                                 int total_epochs, double t_train,
                                                 Rng& rng) {
  if (epoch < 0 || epoch >= total_epochs)
    throw ContractViolation("window_schedule: epoch out of range");
  switch (strategy) {
    case Sampling::FullWindow:
      return {0.0, t_train};
    case Sampling::Expanding: {
      const double w0 = kExpandingStartFraction * t_train;
      const double ramp = kExpandingRampFraction * total_epochs;
      const double f = std::min(1.0, static_cast<double>(epoch) / ramp);
      return {0.0, w0 + (t_train - w0) * f};
    }
    case Sampling::Sliding: {
      if (t_train < kSlidingWindowLength)
        throw ConfigError("sliding windows need t_train >= 6.0");
      const double o = rng.uniform(0.0, t_train - kSlidingWindowLength);
      return {o, o + kSlidingWindowLength};
    }
  }
  throw ContractViolation("window_schedule: bad strategy");
}

/// Partition a grid into K contiguous sub-ranges sharing boundary points,
/// with boundaries at the grid indices nearest to equal time splits.
/// Returns inclusive index pairs [first, last] into the grid.
inline std::vector<std::pair<std::size_t, std::size_t>> split_segments(
    std::span<const double> grid, int K) {
  if (K < 1) throw ConfigError("split_segments: K must be >= 1");
  const std::size_t n = grid.size();
  if (n < static_cast<std::size_t>(K) + 1)
    throw ConfigError("split_segments: K exceeds usable grid length");
  std::vector<std::pair<std::size_t, std::size_t>> segs;
  segs.reserve(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    const auto lo = static_cast<std::size_t>(
        std::llround(static_cast<double>(k) * (n - 1) / K));
    const auto hi = static_cast<std::size_t>(
        std::llround(static_cast<double>(k + 1) * (n - 1) / K));
    segs.push_back({lo, hi});
  }
  return segs;
}

inline double cosine_lr(int epoch, int total_epochs, double lr_max, double lr_min) {
  if (epoch < 0 || epoch > total_epochs)
    throw ContractViolation("cosine_lr: epoch out of range");
  constexpr double pi = 3.14159265358979323846;
  const double c = std::cos(pi * static_cast<double>(epoch) / total_epochs);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + c);
}

inline void clip_gradient_inplace(std::span<double> g, double max_norm) {
  if (!(max_norm > 0.0)) throw ContractViolation("clip_gradient: max_norm must be > 0");
  double sq = 0.0;
  for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (double& v : g) v *= s;
  }
}

inline std::vector<double> clip_gradient(std::vector<double> g, double max_norm) {
  clip_gradient_inplace(g, max_norm);
  return g;
}

struct OptimizerState {
  std::vector<double> first_moment, second_moment;
  long step_count = 0;
  double beta1 = 0.9, beta2 = 0.999, eps_adam = 1e-8;

  explicit OptimizerState(std::size_t n = 0)
      : first_moment(n, 0.0), second_moment(n, 0.0) {}
};

/// One Adam update with bias correction.
inline void adam_step(OptimizerState& opt, std::span<double> params,
                      std::span<const double> grad, double lr) {
  if (params.size() != grad.size() || params.size() != opt.first_moment.size())
    throw ContractViolation("adam_step: buffer sizes misaligned");
  opt.step_count += 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step_count));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    double& m = opt.first_moment[i];
    double& v = opt.second_moment[i];
    m = opt.beta1 * m + (1.0 - opt.beta1) * grad[i];
    v = opt.beta2 * v + (1.0 - opt.beta2) * grad[i] * grad[i];
    const double mhat = m / bc1;
    const double vhat = v / bc2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + opt.eps_adam);
  }
}

struct SolverPair {
  SolverConfig train{1e-5, 1e-6, 1e-2, 100000, 1e-12};
  SolverConfig eval{1e-8, 1e-8, 1e-2, 100000, 1e-12};
};

struct TrainConfig {
  Method method = Method::MPI;
  int epochs = 3000;
  int ics_per_epoch = 128;
  int segments = 4;  // K
  LossWeights weights{10.0, 1.0, 1e-5};
  double lr_max = 3e-3;
  double lr_min = 3e-4;
  double grad_clip = 10.0;
  double t_train = 30.0;
  double grid_dt = 0.1;
  Sampling sampling = Sampling::FullWindow;
  std::uint64_t seed = 0;
  SolverConfig solver_train{1e-5, 1e-6, 1e-2, 100000, 1e-12};
  SolverConfig solver_eval{1e-8, 1e-8, 1e-2, 100000, 1e-12};
  NetSpec net;
  ICSamplerSpec sampler;
  int n_validation = 16;

  void validate() const {
    if (epochs < 1 || ics_per_epoch < 1 || segments < 1)
      throw ConfigError("train config: epochs, ics_per_epoch and segments must be >= 1");
    if (!(lr_min <= lr_max)) throw ConfigError("train config: need lr_min <= lr_max");
    if (!(grad_clip > 0.0)) throw ConfigError("train config: grad_clip must be > 0");
    if (!(t_train > 0.0) || !(grid_dt > 0.0))
      throw ConfigError("train config: t_train and grid_dt must be > 0");
    weights.validate();
    sampler.validate();
    net.validate();
    solver_train.validate();
    solver_eval.validate();
  }
};

enum class RunScale { Full, Desk };

/// Per-method defaults: the data-only and physics-only variants train
/// single-shot on typical-regime ICs; the multiple-shooting variants train
/// on the mixed sampler with K = 4. Desk scale shrinks epochs and batches
/// for CI-speed reproductions.
inline void apply_method_preset(TrainConfig& cfg, RunScale scale = RunScale::Full) {
  const bool desk = scale == RunScale::Desk;
  cfg.epochs = desk ? 600 : 3000;
  switch (cfg.method) {
    case Method::NN:
      cfg.weights = {0.0, 0.0, 1e-5};
      cfg.segments = 1;
      cfg.ics_per_epoch = 32;
      cfg.sampler.mode = SamplerMode::TypicalUniform;
      break;
    case Method::PINN:
      cfg.weights = {10.0, 0.0, 1e-5};
      cfg.segments = 1;
      cfg.ics_per_epoch = 32;
      cfg.sampler.mode = SamplerMode::TypicalUniform;
      break;
    case Method::MIC:
      cfg.weights = {0.0, 1.0, 1e-5};
      cfg.segments = 4;
      cfg.ics_per_epoch = desk ? 64 : 128;
      cfg.sampler.mode = SamplerMode::MixedEdge;
      break;
    case Method::MPI:
      cfg.weights = {10.0, 1.0, 1e-5};
      cfg.segments = 4;
      cfg.ics_per_epoch = desk ? 64 : 128;
      cfg.sampler.mode = SamplerMode::MixedEdge;
      break;
    case Method::Structured:
      break;
  }
}

// ---------------------------------------------------------------------------
// Epoch machinery

/// Everything about one epoch that is fixed before the parameter-dependent
/// work starts: the active window grid, its segmentation, and ground-truth
/// trajectories for the freshly sampled batch ICs.
struct EpochPlan {
  double t_start = 0.0, t_end = 0.0;
  std::vector<double> window_grid;
  std::vector<std::pair<std::size_t, std::size_t>> segments;
  std::vector<State> ics;            // surviving batch ICs (at t = 0)
  std::vector<Trajectory> truths;    // truth on window_grid, aligned with ics
  int dropped_truth = 0;
};

inline EpochPlan build_epoch_plan(const TrainConfig& cfg, const SystemParams& system,
                                  int epoch, Rng& ic_rng, Rng& window_rng) {
  EpochPlan plan;
  auto [t0, t1] = window_schedule(cfg.sampling, epoch, cfg.epochs, cfg.t_train, window_rng);
  plan.t_start = t0;
  const auto n_pts =
      static_cast<int>(std::llround((t1 - t0) / cfg.grid_dt)) + 1;
  plan.t_end = (n_pts >= 2) ? t1 : t0 + cfg.grid_dt;
  const int n = std::max(2, n_pts);
  // snap the window end onto the dt lattice when the schedule produced an
  // off-lattice width (expanding windows mid-ramp)
  const double span = plan.t_end - plan.t_start;
  const double snapped = cfg.grid_dt * (n - 1);
  if (std::abs(snapped - span) > 1e-9 * std::max(1.0, span))
    plan.t_end = plan.t_start + snapped;
  plan.window_grid = uniform_grid(plan.t_start, plan.t_end, n);
  plan.segments = split_segments(plan.window_grid, cfg.segments);

  const std::vector<State> batch = sample_ics(cfg.sampler, cfg.ics_per_epoch, ic_rng);
  AnalyticField truth_field(system);
  for (const State& ic : batch) {
    IntegrationResult res;
    if (plan.t_start == 0.0) {
      res = try_integrate(truth_field, ic, plan.window_grid, cfg.solver_train);
      if (res.ok()) {
        plan.ics.push_back(ic);
        plan.truths.push_back(std::move(res.trajectory));
      } else {
        plan.dropped_truth++;
      }
    } else {
      std::vector<double> grid2;
      grid2.reserve(plan.window_grid.size() + 1);
      grid2.push_back(0.0);
      grid2.insert(grid2.end(), plan.window_grid.begin(), plan.window_grid.end());
      res = try_integrate(truth_field, ic, grid2, cfg.solver_train);
      if (res.ok()) {
        Trajectory tr;
        tr.times = plan.window_grid;
        tr.states.assign(res.trajectory.states.begin() + 1, res.trajectory.states.end());
        tr.stats = res.trajectory.stats;
        plan.ics.push_back(ic);
        plan.truths.push_back(std::move(tr));
      } else {
        plan.dropped_truth++;
      }
    }
  }
  return plan;
}

/// Per-epoch forward+backward state captured at the base parameters, enough
/// to re-evaluate the epoch objective as a pure function of theta with all
/// detached quantities frozen (segment ICs, collocation states, accepted
/// step sequences). Used by the finite-difference gradient oracle.
struct FrozenEpoch {
  std::vector<std::vector<State>> seg_ics;                  // [ic][segment]
  std::vector<std::vector<std::vector<double>>> h_seqs;     // [ic][segment][step]
  std::vector<std::vector<State>> collocation;              // [ic]
};

struct EpochWorkResult {
  LossBreakdown losses;
  std::vector<double> grad;
  int survivors = 0;
  int dropped = 0;
};

namespace detail {

/// Physics residual value plus its parameter gradient; collocation states
/// are treated as constants.
template <class Model>
double physics_value_and_grad(const Model& model, std::span<const State> collocation,
                              const SystemParams& reference, double weight,
                              std::vector<double>& rec_buf, std::span<double> grad) {
  if (collocation.empty()) throw ContractViolation("physics loss: empty collocation set");
  rec_buf.resize(model.record_size());
  const double inv_n = 1.0 / static_cast<double>(collocation.size());
  double value = 0.0;
  double fz[State::kMaxDim];
  double res[State::kMaxDim];
  for (const State& z : collocation) {
    model.eval(z.data(), fz, rec_buf.data());
    const State fr = rhs(reference, z);
    for (int i = 0; i < fr.dim(); ++i) {
      res[i] = fz[i] - fr[i];
      value += res[i] * res[i];
    }
    if (weight > 0.0 && !grad.empty()) {
      double adj[State::kMaxDim];
      for (int i = 0; i < fr.dim(); ++i) adj[i] = 2.0 * weight * inv_n * res[i];
      model.vjp_deferred(rec_buf.data(), adj, grad.data(), nullptr);
    }
  }
  if (weight > 0.0 && !grad.empty()) model.flush_grad(grad.data());
  return value * inv_n;
}

/// Batched path for the learnable field: one forward/backward over the
/// whole collocation set as matrix columns.
inline double physics_value_and_grad_batched(const MlpModel& model,
                                             std::span<const State> collocation,
                                             const SystemParams& reference, double weight,
                                             std::span<double> grad) {
  if (collocation.empty()) throw ContractViolation("physics loss: empty collocation set");
  const auto n = static_cast<Eigen::Index>(collocation.size());
  const int dim = model.dim();
  Eigen::MatrixXd X(dim, n);
  for (Eigen::Index c = 0; c < n; ++c)
    for (int i = 0; i < dim; ++i) X(i, c) = collocation[static_cast<std::size_t>(c)][i];
  MlpBatch& batch = model.batch();
  Eigen::MatrixXd Y;
  batch.forward(model.params(), X, Y, model.saturation_counter());
  Eigen::MatrixXd R(dim, n);
  for (Eigen::Index c = 0; c < n; ++c) {
    const State fr = rhs(reference, collocation[static_cast<std::size_t>(c)]);
    for (int i = 0; i < dim; ++i) R(i, c) = Y(i, c) - fr[i];
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  const double value = R.squaredNorm() * inv_n;
  if (weight > 0.0 && !grad.empty()) {
    R *= 2.0 * weight * inv_n;
    batch.vjp(model.params(), R, grad.data());
  }
  return value;
}

}  // namespace detail

/// One full pass of the training step over the epoch plan: per IC and per
/// segment, integrate with the segment IC being the batch IC for k = 0 and
/// the detached predicted endpoint of segment k-1 otherwise; accumulate the
/// weighted objective and its parameter gradient (mean over surviving ICs,
/// L1 term included). Optionally captures the frozen-epoch data.
template <class Model>
EpochWorkResult epoch_forward_backward(Model& model, std::span<const double> params,
                                       const EpochPlan& plan, const TrainConfig& cfg,
                                       const SystemParams& system,
                                       FrozenEpoch* frozen = nullptr) {
  const int K = cfg.segments;
  const int dim = model.dim();
  const bool want_phys = cfg.weights.lambda_phys > 0.0 || frozen != nullptr;

  EpochWorkResult out;
  out.grad.assign(model.param_count(), 0.0);
  out.dropped = plan.dropped_truth;

  std::vector<double> grad_i(model.param_count());
  std::vector<Tape<Model>> tapes(static_cast<std::size_t>(K));
  std::vector<Trajectory> seg_pred(static_cast<std::size_t>(K));
  std::vector<State> collocation;
  std::vector<State> adj;
  std::vector<double> rec_buf;
  double sum_data = 0.0, sum_phys = 0.0, sum_cont = 0.0;

  for (std::size_t ic_idx = 0; ic_idx < plan.ics.size(); ++ic_idx) {
    const Trajectory& truth = plan.truths[ic_idx];
    bool failed = false;
    std::vector<State> seg_ics_used;
    State seg_ic = truth.states.front();
    for (int k = 0; k < K; ++k) {
      const auto [lo, hi] = plan.segments[static_cast<std::size_t>(k)];
      std::span<const double> subgrid(plan.window_grid.data() + lo, hi - lo + 1);
      seg_ics_used.push_back(seg_ic);
      IntegrationResult res = try_solve_model(model, seg_ic, subgrid, cfg.solver_train,
                                              &tapes[static_cast<std::size_t>(k)]);
      if (!res.ok()) {
        failed = true;
        break;
      }
      seg_pred[static_cast<std::size_t>(k)] = std::move(res.trajectory);
      // detached: the next segment starts from this value, not its graph
      seg_ic = seg_pred[static_cast<std::size_t>(k)].states.back();
    }
    if (failed) {
      out.dropped++;
      continue;
    }

    std::fill(grad_i.begin(), grad_i.end(), 0.0);

    double data_i = 0.0, cont_i = 0.0, phys_i = 0.0;
    for (int k = 0; k < K; ++k) {
      const auto [lo, hi] = plan.segments[static_cast<std::size_t>(k)];
      const std::size_t nk = hi - lo + 1;
      const Trajectory& pred = seg_pred[static_cast<std::size_t>(k)];
      adj.assign(pred.size(), State(dim));
      double seg_sq = 0.0;
      for (std::size_t j = 0; j < nk; ++j) {
        const State& p = pred.states[j];
        const State& t = truth.states[lo + j];
        for (int d = 0; d < dim; ++d) {
          const double diff = p[d] - t[d];
          seg_sq += diff * diff;
          adj[j][d] = 2.0 / (static_cast<double>(K) * static_cast<double>(nk)) * diff;
        }
      }
      data_i += seg_sq / static_cast<double>(nk);
      if (K >= 2 && k < K - 1) {
        const State& end_pred = pred.states.back();
        const auto next_lo = plan.segments[static_cast<std::size_t>(k + 1)].first;
        const State& start_truth = truth.states[next_lo];
        const double cw = 2.0 * cfg.weights.lambda_cont / static_cast<double>(K - 1);
        for (int d = 0; d < dim; ++d) {
          const double diff = end_pred[d] - start_truth[d];
          cont_i += diff * diff;
          adj.back()[d] += cw * diff;
        }
      }
      tapes[static_cast<std::size_t>(k)].backward(model, adj, grad_i);
    }
    data_i /= static_cast<double>(K);
    if (K >= 2) cont_i /= static_cast<double>(K - 1);

    if (want_phys) {
      collocation.clear();
      for (int k = 0; k < K; ++k)
        for (const State& s : seg_pred[static_cast<std::size_t>(k)].states)
          collocation.push_back(s);
      for (int k = 0; k < K; ++k) {
        const auto [lo, hi] = plan.segments[static_cast<std::size_t>(k)];
        for (std::size_t j = lo; j <= hi; ++j) collocation.push_back(truth.states[j]);
      }
      if constexpr (std::is_same_v<Model, MlpModel>) {
        phys_i = detail::physics_value_and_grad_batched(model, collocation, system,
                                                        cfg.weights.lambda_phys,
                                                        std::span<double>(grad_i));
      } else {
        phys_i = detail::physics_value_and_grad(model, collocation, system,
                                                cfg.weights.lambda_phys, rec_buf,
                                                std::span<double>(grad_i));
      }
    }

    if (frozen) {
      frozen->seg_ics.push_back(std::move(seg_ics_used));
      std::vector<std::vector<double>> hs;
      for (int k = 0; k < K; ++k) hs.push_back(tapes[static_cast<std::size_t>(k)].step_sizes());
      frozen->h_seqs.push_back(std::move(hs));
      frozen->collocation.push_back(collocation);
    }

    sum_data += data_i;
    sum_phys += phys_i;
    sum_cont += cont_i;
    for (std::size_t c = 0; c < out.grad.size(); ++c) out.grad[c] += grad_i[c];
    out.survivors++;
  }

  if (out.survivors > 0) {
    const double inv_m = 1.0 / static_cast<double>(out.survivors);
    for (double& g : out.grad) g *= inv_m;
    sum_data *= inv_m;
    sum_phys *= inv_m;
    sum_cont *= inv_m;
  }
  // L1 subgradient (0 at 0)
  if (cfg.weights.lambda_reg > 0.0) {
    for (std::size_t c = 0; c < out.grad.size(); ++c) {
      const double p = params[c];
      if (p > 0.0)
        out.grad[c] += cfg.weights.lambda_reg;
      else if (p < 0.0)
        out.grad[c] -= cfg.weights.lambda_reg;
    }
  }
  ParamVec pv(params.begin(), params.end());
  out.losses = total_loss(sum_data, sum_phys, sum_cont, cfg.weights, pv);
  return out;
}

/// The epoch objective as a pure function of theta with every detached
/// quantity held at its frozen value; integrations replay the frozen
/// accepted-step sequences. This is the function whose exact gradient the
/// backward pass computes.
template <class Model>
double epoch_loss_frozen(Model& model, std::span<const double> params,
                         const EpochPlan& plan, const FrozenEpoch& frozen,
                         const TrainConfig& cfg, const SystemParams& system) {
  const int K = cfg.segments;
  double sum_data = 0.0, sum_phys = 0.0, sum_cont = 0.0;
  const std::size_t m = frozen.seg_ics.size();
  for (std::size_t i = 0; i < m; ++i) {
    const Trajectory& truth = plan.truths[i];
    double data_i = 0.0, cont_i = 0.0;
    Tape<Model>* no_tape = nullptr;
    for (int k = 0; k < K; ++k) {
      const auto [lo, hi] = plan.segments[static_cast<std::size_t>(k)];
      std::span<const double> subgrid(plan.window_grid.data() + lo, hi - lo + 1);
      Trajectory pred = solve_model(model, frozen.seg_ics[i][static_cast<std::size_t>(k)],
                                    subgrid, cfg.solver_train, no_tape,
                                    frozen.h_seqs[i][static_cast<std::size_t>(k)]);
      double seg_sq = 0.0;
      for (std::size_t j = 0; j < pred.size(); ++j)
        seg_sq += squared_distance(pred.states[j], truth.states[lo + j]);
      data_i += seg_sq / static_cast<double>(pred.size());
      if (K >= 2 && k < K - 1) {
        const auto next_lo = plan.segments[static_cast<std::size_t>(k + 1)].first;
        cont_i += squared_distance(pred.states.back(), truth.states[next_lo]);
      }
    }
    data_i /= static_cast<double>(K);
    if (K >= 2) cont_i /= static_cast<double>(K - 1);
    sum_data += data_i;
    sum_cont += cont_i;
    if (!frozen.collocation[i].empty())
      sum_phys += physics_loss(model, frozen.collocation[i], system);
  }
  if (m > 0) {
    sum_data /= static_cast<double>(m);
    sum_phys /= static_cast<double>(m);
    sum_cont /= static_cast<double>(m);
  }
  double l1 = 0.0;
  for (double p : params) l1 += std::abs(p);
  return sum_data + cfg.weights.lambda_phys * sum_phys + cfg.weights.lambda_cont * sum_cont +
         cfg.weights.lambda_reg * l1;
}

/// Trajectory MSE of a model rollout against a truth trajectory, with the
/// documented divergence penalty: grid points beyond the last reached time
/// contribute the squared norm of the truth state (the zero-model error).
template <class Model>
double model_mse_with_penalty(const Model& model, const Trajectory& truth,
                              const SolverConfig& cfg, bool* failed = nullptr) {
  IntegrationResult res = try_solve_model(model, truth.states.front(), truth.times, cfg);
  if (failed) *failed = !res.ok();
  double s = 0.0;
  const std::size_t reached = res.trajectory.states.size();
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (i < reached)
      s += squared_distance(res.trajectory.states[i], truth.states[i]);
    else
      s += squared_norm(truth.states[i]);
  }
  return s / static_cast<double>(truth.size());
}

// ---------------------------------------------------------------------------
// Full training loop

struct HistoryRow {
  int epoch = 0;
  double lr = 0.0;
  LossBreakdown losses;
  double val_mse = 0.0;
  int dropped_ics = 0;
};

struct TrainResult {
  Checkpoint best;
  std::vector<HistoryRow> history;
  long saturation_count = 0;
  long total_dropped = 0;
};

/// Drives the per-epoch training step for the learnable field: fresh ICs per
/// epoch, multiple-shooting segmentation with detached junction ICs, Adam
/// with cosine annealing, gradient clipping, best-validation checkpointing.
class Trainer {
 public:
  Trainer(TrainConfig cfg, SystemParams system)
      : cfg_(std::move(cfg)),
        system_(std::move(system)),
        params_(init_xavier(cfg_.net, cfg_.seed)),
        opt_(params_.size()),
        ic_rng_(Rng::stream(cfg_.seed, StreamPurpose::TrainIcs)),
        window_rng_(Rng::stream(cfg_.seed, StreamPurpose::Windows)) {
    cfg_.validate();
    if (system_.dim() != cfg_.net.input_dim)
      throw ConfigError("trainer: network dimension does not match system");
    init_validation();
  }

  const TrainConfig& config() const { return cfg_; }
  const ParamVec& params() const { return params_; }
  long saturation_count() const { return saturation_; }

  TrainResult run() {
    TrainResult result;
    result.history.reserve(static_cast<std::size_t>(cfg_.epochs));
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      result.history.push_back(train_epoch(epoch));
      result.total_dropped += result.history.back().dropped_ics;
    }
    result.best = best_ ? *best_ : make_checkpoint(cfg_.epochs - 1, history_last_val_);
    result.saturation_count = saturation_;
    return result;
  }

  HistoryRow train_epoch(int epoch) {
    EpochPlan plan = build_epoch_plan(cfg_, system_, epoch, ic_rng_, window_rng_);
    MlpModel model(cfg_.net, params_, &saturation_);
    EpochWorkResult work =
        epoch_forward_backward(model, params_, plan, cfg_, system_, nullptr);
    if (work.survivors == 0) throw TrainingCollapse(epoch);

    clip_gradient_inplace(work.grad, cfg_.grad_clip);
    const double lr = cosine_lr(epoch, cfg_.epochs, cfg_.lr_max, cfg_.lr_min);
    adam_step(opt_, params_, work.grad, lr);

    const double val = validation_mse();
    history_last_val_ = val;
    if (!best_ || val < best_->val_mse) best_ = make_checkpoint(epoch, val);

    HistoryRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.losses = work.losses;
    row.val_mse = val;
    row.dropped_ics = work.dropped;
    return row;
  }

  /// Mean trajectory MSE over the held-out validation ICs at the current
  /// parameters (training solver tolerance).
  double validation_mse() {
    MlpModel model(cfg_.net, params_, &saturation_);
    double s = 0.0;
    for (const Trajectory& truth : val_truths_)
      s += model_mse_with_penalty(model, truth, cfg_.solver_train);
    return s / static_cast<double>(val_truths_.size());
  }

 private:
  void init_validation() {
    Rng rng = Rng::stream(cfg_.seed, StreamPurpose::Validation);
    const std::vector<State> ics = sample_ics(cfg_.sampler, cfg_.n_validation, rng);
    const auto n =
        static_cast<int>(std::llround(cfg_.t_train / cfg_.grid_dt)) + 1;
    const std::vector<double> grid = uniform_grid(0.0, cfg_.t_train, std::max(2, n));
    AnalyticField truth_field(system_);
    for (const State& ic : ics) {
      IntegrationResult res = try_integrate(truth_field, ic, grid, cfg_.solver_train);
      if (res.ok()) val_truths_.push_back(std::move(res.trajectory));
    }
    if (val_truths_.empty())
      throw ConfigError("trainer: no validation trajectory could be generated");
  }

  Checkpoint make_checkpoint(int epoch, double val) const {
    Checkpoint ck;
    ck.spec = cfg_.net;
    ck.params = params_;
    ck.seed = cfg_.seed;
    ck.epoch = epoch;
    ck.val_mse = val;
    return ck;
  }

  TrainConfig cfg_;
  SystemParams system_;
  ParamVec params_;
  OptimizerState opt_;
  Rng ic_rng_;
  Rng window_rng_;
  std::vector<Trajectory> val_truths_;
  std::optional<Checkpoint> best_;
  double history_last_val_ = 0.0;
  long saturation_ = 0;
};

/// Full training entry point per the module contract: runs all epochs and
/// returns the best-validation checkpoint plus the per-epoch history.
inline TrainResult train(const TrainConfig& cfg, const SystemParams& system) {
  Trainer trainer(cfg, system);
  return trainer.run();
}

// ---------------------------------------------------------------------------
// Structured four-parameter fit (the mechanistic oracle)

struct StructuredFitResult {
  SystemParams fitted = SystemParams::lotka_volterra();
  std::array<double, 4> raw{};
  std::vector<double> loss_history;
};

/// Collocation fit of the four LV rate constants against the reference field
/// on a set of ground-truth states. Adam at the given learning rate with a
/// cosine ramp to zero over the fit.
inline StructuredFitResult fit_structured(const SystemParams& truth,
                                          std::span<const State> states,
                                          std::array<double, 4> init, double lr,
                                          int epochs, bool cosine_to_zero = true) {
  if (truth.id() != SystemId::LotkaVolterra)
    throw ContractViolation("fit_structured: reference system must be Lotka-Volterra");
  if (states.empty()) throw ContractViolation("fit_structured: empty state set");

  std::array<double, 4> p = init;
  OptimizerState opt(4);
  StructuredFitResult out;
  out.loss_history.reserve(static_cast<std::size_t>(epochs));
  const double inv_n = 1.0 / static_cast<double>(states.size());
  const double ta = truth.coeff(0), tb = truth.coeff(1), tg = truth.coeff(2),
               td = truth.coeff(3);

  for (int e = 0; e < epochs; ++e) {
    double loss = 0.0;
    std::array<double, 4> g{0.0, 0.0, 0.0, 0.0};
    for (const State& z : states) {
      const double x = z[0], y = z[1], xy = z[0] * z[1];
      const double r0 = (p[0] * x - p[1] * xy) - (ta * x - tb * xy);
      const double r1 = (p[3] * xy - p[2] * y) - (td * xy - tg * y);
      loss += r0 * r0 + r1 * r1;
      g[0] += 2.0 * r0 * x;
      g[1] += -2.0 * r0 * xy;
      g[2] += -2.0 * r1 * y;
      g[3] += 2.0 * r1 * xy;
    }
    loss *= inv_n;
    for (double& v : g) v *= inv_n;
    out.loss_history.push_back(loss);
    const double lr_e = cosine_to_zero ? cosine_lr(e, epochs, lr, 0.0) : lr;
    adam_step(opt, std::span<double>(p.data(), 4), std::span<const double>(g.data(), 4),
              lr_e);
  }
  out.raw = p;
  out.fitted = SystemParams::lotka_volterra(p[0], p[1], p[2], p[3]);
  return out;
}

}  // namespace odelearn
