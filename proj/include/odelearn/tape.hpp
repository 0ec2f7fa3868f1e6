#pragma once

#include <cstdint>
#include <cstring>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "odelearn/errors.hpp"
#include "odelearn/net.hpp"
#include "odelearn/rng.hpp"
#include "odelearn/solver.hpp"
#include "odelearn/systems.hpp"

namespace odelearn {

// A differentiable field model provides, beyond plain evaluation, a record
// slot per evaluation and a vector-Jacobian product replaying that slot:
//   int dim() const;
//   std::size_t param_count() const;
//   std::size_t record_size() const;
//   void eval(const double* y, double* dy, double* rec) const;
//   void vjp(const double* rec, const double* out_adj,
//            double* param_grad, double* y_adj) const;   // accumulates
// Model instances also work as plain fields for the generic integrator.

/// The learnable MLP vector field over a flat parameter vector.
class MlpModel {
 public:
  MlpModel(const NetSpec& spec, std::span<const double> params,
           long* saturation_count = nullptr)
      : mlp_(spec), params_(params), sat_(saturation_count) {}

  int dim() const { return mlp_.spec().input_dim; }
  std::size_t param_count() const { return mlp_.spec().param_count(); }
  std::size_t record_size() const { return mlp_.spec().record_size(); }
  const NetSpec& spec() const { return mlp_.spec(); }
  std::span<const double> params() const { return params_; }

  void set_params(std::span<const double> params) { params_ = params; }

  void eval(const double* y, double* dy, double* rec) const {
    mlp_.forward_record(params_, y, dy, rec, sat_);
  }

  void operator()(const double* y, double* dy) const {
    mlp_.forward(params_, y, dy, sat_);
  }

  void vjp(const double* rec, const double* out_adj, double* param_grad,
           double* y_adj) const {
    mlp_.vjp(params_, rec, out_adj, param_grad, y_adj);
  }

  /// Queue-backed variant; call flush_grad once the batch is complete.
  void vjp_deferred(const double* rec, const double* out_adj, double* param_grad,
                    double* y_adj) const {
    if (!queue_.configured_for(mlp_.spec())) queue_.configure(mlp_.spec());
    mlp_.vjp(params_, rec, out_adj, param_grad, y_adj, &queue_);
  }

  void flush_grad(double* param_grad) const { queue_.flush(param_grad); }

  long* saturation_counter() const { return sat_; }

  /// Lazily constructed column-batch engine shared across calls.
  MlpBatch& batch() const {
    if (!batch_) batch_ = std::make_unique<MlpBatch>(mlp_.spec());
    return *batch_;
  }

 private:
  Mlp mlp_;
  std::span<const double> params_;
  long* sat_;
  mutable MlpGradQueue queue_;
  mutable std::unique_ptr<MlpBatch> batch_;
};

/// Analytic system as a zero-parameter differentiable model. Used wherever a
/// known-truth field must stand in for the network (oracle training doubles,
/// deliberately damped fields in diagnostics tests).
class AnalyticModel {
 public:
  explicit AnalyticModel(SystemParams params) : params_(std::move(params)) {}

  int dim() const { return params_.dim(); }
  std::size_t param_count() const { return 0; }
  std::size_t record_size() const { return static_cast<std::size_t>(dim()); }

  void eval(const double* y, double* dy, double* rec) const {
    for (int i = 0; i < dim(); ++i) rec[i] = y[i];
    (*this)(y, dy);
  }

  void operator()(const double* y, double* dy) const {
    State s = State::from_span({y, static_cast<std::size_t>(dim())});
    State d = rhs(params_, s);
    for (int i = 0; i < d.dim(); ++i) dy[i] = d[i];
  }

  void vjp_deferred(const double* rec, const double* out_adj, double* param_grad,
                    double* y_adj) const {
    vjp(rec, out_adj, param_grad, y_adj);
  }
  void flush_grad(double* /*param_grad*/) const {}

  void vjp(const double* rec, const double* out_adj, double* /*param_grad*/,
           double* y_adj) const {
    if (!y_adj) return;
    // Jacobian-transpose products of the analytic right-hand sides.
    switch (params_.id()) {
      case SystemId::LotkaVolterra: {
        const double alpha = params_.coeff(0), beta = params_.coeff(1);
        const double gamma = params_.coeff(2), delta = params_.coeff(3);
        const double x = rec[0], y = rec[1];
        y_adj[0] += (alpha - beta * y) * out_adj[0] + delta * y * out_adj[1];
        y_adj[1] += -beta * x * out_adj[0] + (delta * x - gamma) * out_adj[1];
        break;
      }
      case SystemId::Lorenz63: {
        const double sigma = params_.coeff(0), rho = params_.coeff(1), b = params_.coeff(2);
        const double x = rec[0], y = rec[1], z = rec[2];
        y_adj[0] += -sigma * out_adj[0] + (rho - z) * out_adj[1] + y * out_adj[2];
        y_adj[1] += sigma * out_adj[0] - out_adj[1] + x * out_adj[2];
        y_adj[2] += -x * out_adj[1] - b * out_adj[2];
        break;
      }
      case SystemId::FitzHughNagumo: {
        const double a = params_.coeff(1), tau = params_.coeff(2);
        const double v = rec[0];
        y_adj[0] += (1.0 - v * v) * out_adj[0] + out_adj[1] / tau;
        y_adj[1] += -out_adj[0] - (a / tau) * out_adj[1];
        break;
      }
    }
  }

  const SystemParams& params() const { return params_; }

 private:
  SystemParams params_;
};

/// Record of one integration sufficient to backpropagate any scalar function
/// of the emitted states to the model parameters (and the initial state).
/// Step-size decisions are replayed as constants.
template <class Model>
class Tape {
 public:
  struct StepMeta {
    double t0, h;
    std::uint32_t emit_begin, emit_end;
  };

  void reset(const Model& model) {
    dim_ = model.dim();
    rec_size_ = model.record_size();
    steps_.clear();
    y0s_.clear();
    ks_.clear();
    recs_.clear();
    emissions_.clear();
    consumed_ = false;
  }

  bool empty() const { return steps_.empty(); }
  std::size_t n_steps() const { return steps_.size(); }

  std::vector<double> step_sizes() const {
    std::vector<double> hs;
    hs.reserve(steps_.size());
    for (const StepMeta& s : steps_) hs.push_back(s.h);
    return hs;
  }

  void push_step(double t0, double h, const double* y0, const double* ks,
                 const double* pending_recs) {
    steps_.push_back({t0, h, static_cast<std::uint32_t>(emissions_.size()),
                      static_cast<std::uint32_t>(emissions_.size())});
    y0s_.insert(y0s_.end(), y0, y0 + dim_);
    ks_.insert(ks_.end(), ks, ks + 7 * State::kMaxDim);
    recs_.insert(recs_.end(), pending_recs, pending_recs + 7 * rec_size_);
  }

  void push_emission(std::size_t out_index, double sigma) {
    emissions_.push_back({out_index, sigma});
    steps_.back().emit_end = static_cast<std::uint32_t>(emissions_.size());
  }

  /// Reverse pass. `out_adj` holds dL/d(state) for every emitted grid index
  /// (index 0 is the IC). Parameter adjoints are accumulated into
  /// `param_grad`; the returned State is dL/d(ic). Single use per recording.
  State backward(const Model& model, std::span<const State> out_adj,
                 std::span<double> param_grad) const {
    if (consumed_) throw TapeExhausted();
    consumed_ = true;
    if (param_grad.size() != model.param_count())
      throw ContractViolation("tape backward: gradient buffer size mismatch");

    using T = detail::Dopri5Tableau;
    const int dim = dim_;
    double adj_y[State::kMaxDim] = {0, 0, 0};
    double adj_k[7][State::kMaxDim];
    double z_adj[State::kMaxDim];

    // stage-input coefficient rows: z_j = y0 + h * sum_{l<j} A[j][l] k_l
    static constexpr const double* A_rows[7] = {nullptr,       T::a2, T::a3, T::a4,
                                                T::a5,         T::a6, T::b};

    for (std::size_t si = steps_.size(); si-- > 0;) {
      const StepMeta& st = steps_[si];
      const double h = st.h;
      const double* y0 = y0s_.data() + si * dim;
      const double* ks = ks_.data() + si * 7 * State::kMaxDim;
      const double* recs = recs_.data() + si * 7 * rec_size_;

      double adj_y0[State::kMaxDim] = {0, 0, 0};
      double adj_y1[State::kMaxDim] = {0, 0, 0};
      for (int j = 0; j < 7; ++j)
        for (int i = 0; i < dim; ++i) adj_k[j][i] = 0.0;
      for (int i = 0; i < dim; ++i) adj_y1[i] = adj_y[i];

      for (std::uint32_t e = st.emit_begin; e < st.emit_end; ++e) {
        const auto& [out_index, sigma] = emissions_[e];
        const State& a = out_adj[out_index];
        if (sigma == 1.0) {
          for (int i = 0; i < dim; ++i) adj_y1[i] += a[i];
          continue;
        }
        // out = y0 + g*(y1-y0) + h*(b3-b4)*k1 - h*b4*k7 + b5*h*sum(d_j k_j),
        // g = b2 - b3 + 2*b4 with b2=s, b3=s(1-s), b4=s^2(1-s), b5=s^2(1-s)^2
        const double s = sigma;
        const double b2 = s, b3 = s * (1.0 - s), b4 = s * s * (1.0 - s);
        const double b5 = b4 * (1.0 - s);
        const double g = b2 - b3 + 2.0 * b4;
        for (int i = 0; i < dim; ++i) {
          const double ai = a[i];
          adj_y0[i] += (1.0 - g) * ai;
          adj_y1[i] += g * ai;
          adj_k[0][i] += h * (b3 - b4 + b5 * T::d[0]) * ai;
          adj_k[6][i] += h * (b5 * T::d[6] - b4) * ai;
          for (int j = 2; j <= 5; ++j) adj_k[j][i] += h * b5 * T::d[j] * ai;
        }
      }

      // y1 = y0 + h * sum_j b_j k_j
      for (int i = 0; i < dim; ++i) {
        adj_y0[i] += adj_y1[i];
        for (int j = 0; j < 6; ++j) adj_k[j][i] += h * T::b[j] * adj_y1[i];
      }

      for (int j = 6; j >= 0; --j) {
        for (int i = 0; i < dim; ++i) z_adj[i] = 0.0;
        model.vjp_deferred(recs + static_cast<std::size_t>(j) * rec_size_, adj_k[j],
                           param_grad.data(), z_adj);
        for (int i = 0; i < dim; ++i) adj_y0[i] += z_adj[i];
        if (j > 0) {
          const double* row = A_rows[j];
          for (int l = 0; l < j && l < 6; ++l)
            for (int i = 0; i < dim; ++i) adj_k[l][i] += h * row[l] * z_adj[i];
        }
      }

      for (int i = 0; i < dim; ++i) adj_y[i] = adj_y0[i];
    }
    model.flush_grad(param_grad.data());

    State ic_adj(dim);
    for (int i = 0; i < dim; ++i) ic_adj[i] = adj_y[i] + out_adj[0][i];
    return ic_adj;
  }

 private:
  int dim_ = 0;
  std::size_t rec_size_ = 0;
  std::vector<StepMeta> steps_;
  std::vector<double> y0s_;
  std::vector<double> ks_;
  std::vector<double> recs_;
  std::vector<std::pair<std::size_t, double>> emissions_;
  mutable bool consumed_ = false;
};

namespace detail {

template <class Model>
struct NeuralRecorder {
  const Model* model;
  Tape<Model>* tape;  // may be null: plain integration, same arithmetic path
  std::vector<double> pending;

  NeuralRecorder(const Model& m, Tape<Model>* t) : model(&m), tape(t) {
    pending.resize(7 * m.record_size());
  }

  void eval_stage(const Model& m, const double* y, double* dy, int stage) {
    m.eval(y, dy, pending.data() + static_cast<std::size_t>(stage) * m.record_size());
  }
  void accept_step(double t0, double h, const double* y0, const double* ks,
                   int /*dim*/) {
    if (tape) tape->push_step(t0, h, y0, ks, pending.data());
  }
  void emit(std::size_t out_index, double sigma) {
    if (tape) tape->push_emission(out_index, sigma);
  }
};

}  // namespace detail

/// Integrate a differentiable model, optionally recording a gradient tape.
/// With `forced_h` non-empty the recorded step sizes are replayed verbatim
/// (no step-size control), reproducing a fixed accepted-step sequence.
template <class Model>
IntegrationResult try_solve_model(const Model& model, const State& ic,
                                  std::span<const double> grid, const SolverConfig& cfg,
                                  Tape<Model>* tape = nullptr,
                                  std::span<const double> forced_h = {}) {
  if (tape) tape->reset(model);
  detail::NeuralRecorder<Model> rec(model, tape);
  return detail::dopri5_core(model, ic, grid, cfg, rec, forced_h);
}

template <class Model>
Trajectory solve_model(const Model& model, const State& ic, std::span<const double> grid,
                       const SolverConfig& cfg, Tape<Model>* tape = nullptr,
                       std::span<const double> forced_h = {}) {
  IntegrationResult r = try_solve_model(model, ic, grid, cfg, tape, forced_h);
  if (!r.ok()) throw SolverFailure(r.status, r.t_reached);
  return std::move(r.trajectory);
}

/// integrate_recording for the learnable field: identical trajectory to the
/// plain path under the same config, plus the tape for gradient evaluation.
inline std::pair<Trajectory, Tape<MlpModel>> integrate_recording(
    const NetSpec& spec, const ParamVec& params, const State& ic,
    std::span<const double> grid, const SolverConfig& cfg) {
  MlpModel model(spec, params);
  auto tape = std::make_unique<Tape<MlpModel>>();
  Trajectory tr = solve_model(model, ic, grid, cfg, tape.get());
  return {std::move(tr), std::move(*tape)};
}

/// Central finite-difference validation of backpropagated gradients for a
/// scalar trajectory loss. The FD evaluations replay the accepted-step
/// sequence of the base run, matching the constant-steps gradient contract.
///
/// `loss(trajectory, adj_or_null)` returns the scalar and, when the second
/// argument is non-null, fills per-state partials. The model's parameter
/// binding is left on an internal buffer; rebind with set_params before
/// reusing the model.
template <class Model, class LossFn>
double finite_difference_check_model(Model& model, std::vector<double> params,
                                     const State& ic, std::span<const double> grid,
                                     const SolverConfig& cfg, LossFn&& loss, double eps,
                                     int n_coords, std::uint64_t seed) {
  if (!(eps > 0.0)) throw ContractViolation("finite_difference_check: eps must be > 0");
  if (static_cast<std::size_t>(n_coords) > params.size())
    throw ContractViolation("finite_difference_check: n_coords exceeds parameter count");

  model.set_params(params);
  Tape<Model> tape;
  Trajectory base = solve_model(model, ic, grid, cfg, &tape);
  std::vector<State> adj(base.size(), State(model.dim()));
  loss(base, &adj);
  std::vector<double> grad(params.size(), 0.0);
  tape.backward(model, adj, grad);
  const std::vector<double> hs = tape.step_sizes();

  // sample distinct coordinates
  Rng rng = Rng::stream(seed, StreamPurpose::CoordPick);
  std::vector<std::size_t> coords;
  coords.reserve(static_cast<std::size_t>(n_coords));
  while (coords.size() < static_cast<std::size_t>(n_coords)) {
    std::size_t c = rng.below(params.size());
    bool dup = false;
    for (std::size_t x : coords) dup = dup || (x == c);
    if (!dup) coords.push_back(c);
  }

  double max_rel = 0.0;
  Tape<Model>* no_tape = nullptr;
  for (std::size_t c : coords) {
    const double saved = params[c];
    params[c] = saved + eps;
    model.set_params(params);
    const double lp = loss(solve_model(model, ic, grid, cfg, no_tape, hs), nullptr);
    params[c] = saved - eps;
    model.set_params(params);
    const double lm = loss(solve_model(model, ic, grid, cfg, no_tape, hs), nullptr);
    params[c] = saved;
    const double g_fd = (lp - lm) / (2.0 * eps);
    const double rel = std::abs(grad[c] - g_fd) / std::max(std::abs(g_fd), 1e-12);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

template <class LossFn>
double finite_difference_check(const NetSpec& spec, const ParamVec& params,
                               const State& ic, std::span<const double> grid,
                               const SolverConfig& cfg, LossFn&& loss, double eps,
                               int n_coords, std::uint64_t seed) {
  MlpModel model(spec, params);
  return finite_difference_check_model(model, params, ic, grid, cfg,
                                       std::forward<LossFn>(loss), eps, n_coords, seed);
}

}  // namespace odelearn
