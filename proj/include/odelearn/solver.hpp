#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "odelearn/errors.hpp"
#include "odelearn/systems.hpp"

namespace odelearn {

struct SolverConfig {
  double rtol = 1e-8;
  double atol = 1e-8;
  double initial_step = 1e-2;
  long max_steps = 100000;
  double min_step = 1e-12;

  void validate() const {
    if (!(rtol > 0.0) || !(atol > 0.0))
      throw ContractViolation("solver config: rtol and atol must be > 0");
    if (max_steps < 1) throw ContractViolation("solver config: max_steps must be >= 1");
    if (!(min_step > 0.0) || !(min_step < initial_step))
      throw ContractViolation("solver config: need 0 < min_step < initial_step");
  }
};

struct SolverStats {
  long accepted = 0;
  long rejected = 0;
};

/// Time grid plus one state per grid point.
struct Trajectory {
  std::vector<double> times;
  std::vector<State> states;
  SolverStats stats;

  std::size_t size() const { return times.size(); }
};

struct IntegrationResult {
  Trajectory trajectory;  // states for the grid points reached (prefix of the grid)
  SolveStatus status = SolveStatus::Ok;
  double t_reached = 0.0;

  bool ok() const { return status == SolveStatus::Ok; }
};

/// Uniform grid with exact endpoints: t_i = t0 + (t1 - t0) * i/(n-1).
inline std::vector<double> uniform_grid(double t0, double t1, int n_points) {
  if (n_points < 2 || !(t1 > t0)) throw ContractViolation("uniform_grid: need n >= 2 and t1 > t0");
  std::vector<double> g(static_cast<std::size_t>(n_points));
  const double span = t1 - t0;
  const double denom = static_cast<double>(n_points - 1);
  for (int i = 0; i < n_points; ++i)
    g[static_cast<std::size_t>(i)] = t0 + span * (static_cast<double>(i) / denom);
  g.front() = t0;
  g.back() = t1;
  return g;
}

namespace detail {

// Dormand-Prince 5(4) tableau with the standard 4th-order dense-output
// interpolant (Hairer/Norsett/Wanner coefficients).
struct Dopri5Tableau {
  static constexpr int stages = 7;
  static constexpr double c[7] = {0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
  static constexpr double a2[1] = {1.0 / 5};
  static constexpr double a3[2] = {3.0 / 40, 9.0 / 40};
  static constexpr double a4[3] = {44.0 / 45, -56.0 / 15, 32.0 / 9};
  static constexpr double a5[4] = {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561,
                                   -212.0 / 729};
  static constexpr double a6[5] = {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247,
                                   49.0 / 176, -5103.0 / 18656};
  // 5th-order solution weights (also row 7 of A; stage 7 sits at y1).
  static constexpr double b[6] = {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192,
                                  -2187.0 / 6784, 11.0 / 84};
  // b - bhat: weights of the embedded 4th-order error estimate.
  static constexpr double e[7] = {71.0 / 57600, 0.0, -71.0 / 16695, 71.0 / 1920,
                                  -17253.0 / 339200, 22.0 / 525, -1.0 / 40};
  // dense-output weights for the rcont5 term
  static constexpr double d[7] = {-12715105075.0 / 11282082432.0,
                                  0.0,
                                  87487479700.0 / 32700410799.0,
                                  -10690763975.0 / 1880347072.0,
                                  701980252875.0 / 199316789632.0,
                                  -1453857185.0 / 822651844.0,
                                  69997945.0 / 29380423.0};
};

/// Recorder doing nothing; used for plain integration of analytic fields.
struct NullRecorder {
  template <class Field>
  void eval_stage(const Field& f, const double* y, double* dy, int /*stage*/) {
    f(y, dy);
  }
  void accept_step(double /*t0*/, double /*h*/, const double* /*y0*/,
                   const double* /*ks*/, int /*dim*/) {}
  void emit(std::size_t /*out_index*/, double /*sigma*/) {}
};

/// Shared stepping loop. `forced_h` non-empty switches to replay mode: the
/// given step sizes are applied verbatim with no error control, which
/// reproduces a previously recorded accepted-step sequence bit for bit.
template <class Field, class Recorder>
IntegrationResult dopri5_core(const Field& field, const State& ic,
                              std::span<const double> grid, const SolverConfig& cfg,
                              Recorder& rec, std::span<const double> forced_h = {}) {
  using T = Dopri5Tableau;
  cfg.validate();
  if (grid.empty()) throw ContractViolation("integrate: empty time grid");
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (!(grid[i] > grid[i - 1]))
      throw ContractViolation("integrate: grid must be strictly increasing");
  const int dim = field.dim();
  if (ic.dim() != dim) throw ContractViolation("integrate: IC dimension mismatch");
  if (!ic.finite()) throw ContractViolation("integrate: IC must be finite");

  IntegrationResult res;
  res.trajectory.times.assign(grid.begin(), grid.end());
  res.trajectory.states.reserve(grid.size());
  res.trajectory.states.push_back(ic);

  const double t_end = grid.back();
  double t = grid.front();
  res.t_reached = t;
  std::size_t gi = 1;
  if (gi >= grid.size()) return res;

  const bool replay = !forced_h.empty();
  std::size_t replay_i = 0;

  State y = ic;
  double k[T::stages][State::kMaxDim];
  double ytmp[State::kMaxDim];
  double y1[State::kMaxDim];

  double h = std::min(cfg.initial_step, t_end - t);
  long attempts = 0;

  auto fail = [&](SolveStatus st) {
    res.status = st;
    res.t_reached = t;
    res.trajectory.times.resize(res.trajectory.states.size());
    return res;
  };

  while (gi < grid.size()) {
    if (replay) {
      if (replay_i >= forced_h.size())
        throw ContractViolation("replay: forced step sequence exhausted before grid end");
      h = forced_h[replay_i++];
    } else {
      if (++attempts > cfg.max_steps) return fail(SolveStatus::MaxStepsExceeded);
      if (h < cfg.min_step) return fail(SolveStatus::StepUnderflow);
      h = std::min(h, t_end - t);
    }
    const bool lands_on_end = (t + h >= t_end) || (h == t_end - t);

    // stages
    rec.eval_stage(field, y.data(), k[0], 0);
    for (int i = 0; i < dim; ++i) ytmp[i] = y[i] + h * T::a2[0] * k[0][i];
    rec.eval_stage(field, ytmp, k[1], 1);
    for (int i = 0; i < dim; ++i)
      ytmp[i] = y[i] + h * (T::a3[0] * k[0][i] + T::a3[1] * k[1][i]);
    rec.eval_stage(field, ytmp, k[2], 2);
    for (int i = 0; i < dim; ++i)
      ytmp[i] = y[i] + h * (T::a4[0] * k[0][i] + T::a4[1] * k[1][i] + T::a4[2] * k[2][i]);
    rec.eval_stage(field, ytmp, k[3], 3);
    for (int i = 0; i < dim; ++i)
      ytmp[i] = y[i] + h * (T::a5[0] * k[0][i] + T::a5[1] * k[1][i] +
                            T::a5[2] * k[2][i] + T::a5[3] * k[3][i]);
    rec.eval_stage(field, ytmp, k[4], 4);
    for (int i = 0; i < dim; ++i)
      ytmp[i] = y[i] + h * (T::a6[0] * k[0][i] + T::a6[1] * k[1][i] + T::a6[2] * k[2][i] +
                            T::a6[3] * k[3][i] + T::a6[4] * k[4][i]);
    rec.eval_stage(field, ytmp, k[5], 5);
    for (int i = 0; i < dim; ++i)
      y1[i] = y[i] + h * (T::b[0] * k[0][i] + T::b[1] * k[1][i] + T::b[2] * k[2][i] +
                          T::b[3] * k[3][i] + T::b[4] * k[4][i] + T::b[5] * k[5][i]);
    rec.eval_stage(field, y1, k[6], 6);

    bool finite = true;
    for (int i = 0; i < dim; ++i)
      if (!std::isfinite(y1[i]) || !std::isfinite(k[6][i])) finite = false;
    if (!finite) return fail(SolveStatus::NonFiniteState);

    bool accept = true;
    double factor = 5.0;
    if (!replay) {
      double err_sq = 0.0;
      for (int i = 0; i < dim; ++i) {
        double ei = 0.0;
        for (int s = 0; s < T::stages; ++s) ei += T::e[s] * k[s][i];
        ei *= h;
        const double scale =
            cfg.atol + cfg.rtol * std::max(std::abs(y[i]), std::abs(y1[i]));
        const double q = ei / scale;
        err_sq += q * q;
      }
      const double err_norm = std::sqrt(err_sq / dim);
      accept = err_norm <= 1.0;
      factor = err_norm > 0.0 ? 0.9 * std::pow(err_norm, -0.2) : 5.0;
      factor = std::clamp(factor, 0.2, 5.0);
    }

    if (accept) {
      res.trajectory.stats.accepted++;
      rec.accept_step(t, h, y.data(), &k[0][0], dim);
      const double t_new = lands_on_end ? t_end : t + h;

      // dense output for every requested time inside (t, t_new]
      while (gi < grid.size() && grid[gi] <= t_new) {
        const double sigma = std::clamp((grid[gi] - t) / h, 0.0, 1.0);
        State out(dim);
        if (sigma == 1.0) {
          for (int i = 0; i < dim; ++i) out[i] = y1[i];
        } else {
          for (int i = 0; i < dim; ++i) {
            const double ydiff = y1[i] - y[i];
            const double rc3 = h * k[0][i] - ydiff;
            const double rc4 = ydiff - h * k[6][i] - rc3;
            double rc5 = 0.0;
            for (int s = 0; s < T::stages; ++s) rc5 += T::d[s] * k[s][i];
            rc5 *= h;
            out[i] = y[i] + sigma * (ydiff + (1.0 - sigma) *
                                                 (rc3 + sigma * (rc4 + (1.0 - sigma) * rc5)));
          }
        }
        res.trajectory.states.push_back(out);
        rec.emit(gi, sigma);
        ++gi;
      }

      for (int i = 0; i < dim; ++i) y[i] = y1[i];
      t = t_new;
      res.t_reached = t;
    } else {
      res.trajectory.stats.rejected++;
    }
    if (!replay) h *= factor;
  }
  return res;
}

}  // namespace detail

/// Adaptive Dormand-Prince integration of a generic vector field, producing
/// states exactly at the requested grid times. `grid.front()` is the IC time.
/// Returns a partial trajectory plus status instead of throwing.
template <class Field>
IntegrationResult try_integrate(const Field& field, const State& ic,
                                std::span<const double> grid, const SolverConfig& cfg) {
  detail::NullRecorder rec;
  return detail::dopri5_core(field, ic, grid, cfg, rec);
}

/// As try_integrate, but failures become SolverFailure exceptions.
template <class Field>
Trajectory integrate(const Field& field, const State& ic, std::span<const double> grid,
                     const SolverConfig& cfg) {
  IntegrationResult r = try_integrate(field, ic, grid, cfg);
  if (!r.ok()) throw SolverFailure(r.status, r.t_reached);
  return std::move(r.trajectory);
}

}  // namespace odelearn
