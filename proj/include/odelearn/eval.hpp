#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "odelearn/errors.hpp"
#include "odelearn/io.hpp"
#include "odelearn/losses.hpp"
#include "odelearn/rng.hpp"
#include "odelearn/solver.hpp"
#include "odelearn/systems.hpp"
#include "odelearn/tape.hpp"
#include "odelearn/trainer.hpp"

namespace odelearn {

inline constexpr double kDatasetHorizon = 30.0;
inline constexpr double kDatasetDt = 0.1;

inline std::vector<double> dataset_grid(double horizon = kDatasetHorizon,
                                        double dt = kDatasetDt) {
  const int n = static_cast<int>(std::llround(horizon / dt)) + 1;
  return uniform_grid(0.0, horizon, n);
}

struct DatasetEntry {
  State ic;
  std::string regime;  // "typical" or "edge"
  Trajectory trajectory;
};

/// Ground-truth trajectories integrated at evaluation tolerance on the
/// shared grid.
struct Dataset {
  SystemParams system = SystemParams::lotka_volterra();
  std::vector<DatasetEntry> entries;
  std::uint64_t seed = 0;
  double rtol = 1e-8, atol = 1e-8;
  int regenerated = 0;  // ICs redrawn after a ground-truth solver failure
};

/// Draw ICs from the sampler and integrate each with the true field. A
/// solver failure redraws that IC from the stream (same regime) so the
/// dataset always holds n_traj members.
inline Dataset generate_dataset(const SystemParams& system, const ICSamplerSpec& sampler,
                                int n_traj, std::uint64_t seed,
                                const SolverConfig& solver_cfg = {},
                                double horizon = kDatasetHorizon, double dt = kDatasetDt) {
  if (n_traj < 1) throw ContractViolation("generate_dataset: n_traj must be >= 1");
  sampler.validate();
  Dataset ds;
  ds.system = system;
  ds.seed = seed;
  ds.rtol = solver_cfg.rtol;
  ds.atol = solver_cfg.atol;
  const std::vector<double> grid = dataset_grid(horizon, dt);
  AnalyticField field(system);
  Rng rng = Rng::stream(seed, StreamPurpose::DatasetIcs);

  const int n_uniform = sampler.mode == SamplerMode::MixedEdge ? (n_traj + 1) / 2 : n_traj;
  auto draw = [&](bool typical) {
    State s(2);
    if (typical) {
      s[0] = rng.uniform(sampler.uniform_lo, sampler.uniform_hi);
      s[1] = rng.uniform(sampler.uniform_lo, sampler.uniform_hi);
    } else {
      const double lo = std::log10(sampler.loguniform_lo);
      const double hi = std::log10(sampler.loguniform_hi);
      s[0] = std::pow(10.0, rng.uniform(lo, hi));
      s[1] = std::pow(10.0, rng.uniform(lo, hi));
    }
    return s;
  };

  long attempts = 0;
  for (int j = 0; j < n_traj; ++j) {
    const bool typical = j < n_uniform;
    for (;;) {
      if (++attempts > 100L * n_traj)
        throw SolverFailure(SolveStatus::MaxStepsExceeded, 0.0);
      const State ic = draw(typical);
      IntegrationResult res = try_integrate(field, ic, grid, solver_cfg);
      if (res.ok()) {
        ds.entries.push_back({ic, typical ? "typical" : "edge", std::move(res.trajectory)});
        break;
      }
      ds.regenerated++;
    }
  }
  return ds;
}

// Dataset file: header block then one CSV block per trajectory.
inline std::string dataset_to_string(const Dataset& ds) {
  std::ostringstream out;
  out << "system " << to_string(ds.system.id()) << "\n";
  const auto names = ds.system.coefficient_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    out << names[i] << ' ' << fmt_double(ds.system.coeff(static_cast<int>(i))) << "\n";
  out << "seed " << ds.seed << "\n";
  out << "rtol " << fmt_double(ds.rtol) << "\n";
  out << "atol " << fmt_double(ds.atol) << "\n";
  out << "n_traj " << ds.entries.size() << "\n";
  for (std::size_t k = 0; k < ds.entries.size(); ++k) {
    const DatasetEntry& e = ds.entries[k];
    out << "trajectory " << k << " regime " << e.regime << "\n";
    out << "t,x,y\n";
    for (std::size_t i = 0; i < e.trajectory.size(); ++i) {
      out << fmt_double(e.trajectory.times[i]);
      for (int d = 0; d < e.trajectory.states[i].dim(); ++d)
        out << ',' << fmt_double(e.trajectory.states[i][d]);
      out << "\n";
    }
  }
  return out.str();
}

inline Dataset dataset_from_string(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::string system_name;
  std::vector<std::pair<std::string, double>> coeffs;
  Dataset ds;
  std::size_t n_traj = 0;

  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "system") {
      ls >> system_name;
    } else if (key == "seed") {
      ls >> ds.seed;
    } else if (key == "rtol") {
      std::string v;
      ls >> v;
      ds.rtol = parse_double(v);
    } else if (key == "atol") {
      std::string v;
      ls >> v;
      ds.atol = parse_double(v);
    } else if (key == "n_traj") {
      ls >> n_traj;
      break;
    } else {
      std::string v;
      ls >> v;
      coeffs.push_back({key, parse_double(v)});
    }
  }
  if (system_name == "lotka_volterra") {
    double c[4] = {1.5, 1.0, 3.0, 1.0};
    const char* names[4] = {"alpha", "beta", "gamma", "delta"};
    for (const auto& [k, v] : coeffs)
      for (int i = 0; i < 4; ++i)
        if (k == names[i]) c[i] = v;
    ds.system = SystemParams::lotka_volterra(c[0], c[1], c[2], c[3]);
  } else {
    throw std::runtime_error("dataset: unsupported system '" + system_name + "'");
  }

  for (std::size_t k = 0; k < n_traj; ++k) {
    if (!std::getline(in, line) || line.rfind("trajectory", 0) != 0)
      throw std::runtime_error("dataset: missing trajectory header");
    DatasetEntry e;
    {
      std::istringstream ls(line);
      std::string word;
      std::size_t idx;
      ls >> word >> idx >> word >> e.regime;
    }
    if (!std::getline(in, line) || line != "t,x,y")
      throw std::runtime_error("dataset: missing column header");
    while (in.peek() != 't' && in.peek() != EOF && std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string cell;
      std::vector<double> row;
      while (std::getline(ls, cell, ',')) row.push_back(parse_double(cell));
      if (row.size() < 3) throw std::runtime_error("dataset: short row");
      e.trajectory.times.push_back(row[0]);
      State s(static_cast<int>(row.size()) - 1);
      for (std::size_t d = 1; d < row.size(); ++d) s[static_cast<int>(d - 1)] = row[d];
      e.trajectory.states.push_back(s);
    }
    e.ic = e.trajectory.states.front();
    ds.entries.push_back(std::move(e));
  }
  return ds;
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  write_text_file(path, dataset_to_string(ds));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  return dataset_from_string(read_text_file(path));
}

// ---------------------------------------------------------------------------
// Metrics

struct PerIcStats {
  std::vector<double> mse;
  std::vector<bool> failed;
};

/// Mean over dataset ICs of the rollout MSE against truth over [0, t_h],
/// integrated at evaluation tolerance on the dataset grid restricted to the
/// horizon. Failed rollouts contribute the documented zero-model penalty.
template <class Model>
double trajectory_mse(const Model& model, const Dataset& ds, double t_h,
                      const SolverConfig& solver_cfg = {}, PerIcStats* per_ic = nullptr) {
  if (!(t_h > 0.0)) throw ContractViolation("trajectory_mse: horizon must be > 0");
  if (ds.entries.empty()) throw ContractViolation("trajectory_mse: empty dataset");
  double total = 0.0;
  for (const DatasetEntry& e : ds.entries) {
    std::size_t n = 0;
    while (n < e.trajectory.size() && e.trajectory.times[n] <= t_h + 1e-12) ++n;
    Trajectory truth;
    truth.times.assign(e.trajectory.times.begin(), e.trajectory.times.begin() + n);
    truth.states.assign(e.trajectory.states.begin(), e.trajectory.states.begin() + n);
    bool failed = false;
    const double mse = model_mse_with_penalty(model, truth, solver_cfg, &failed);
    total += mse;
    if (per_ic) {
      per_ic->mse.push_back(mse);
      per_ic->failed.push_back(failed);
    }
  }
  return total / static_cast<double>(ds.entries.size());
}

struct DriftStats {
  std::vector<double> drift;       // per IC, NaN when undefined
  long excluded_states = 0;        // non-positive states skipped
  int undefined_ics = 0;
  int failed_rollouts = 0;
};

/// Relative conserved-quantity drift |H(z(t)) - H(z(0))| / |H(z(0))| of
/// model rollouts, time-averaged over valid (strictly positive) grid states
/// and then averaged over ICs.
template <class Model>
double hamiltonian_drift(const Model& model, const SystemParams& system,
                         std::span<const State> ics, double horizon,
                         const SolverConfig& solver_cfg = {}, DriftStats* stats = nullptr) {
  if (system.id() != SystemId::LotkaVolterra)
    throw ContractViolation("hamiltonian_drift: LV only");
  const std::vector<double> grid = dataset_grid(horizon, kDatasetDt);
  double total = 0.0;
  int counted = 0;
  for (const State& ic : ics) {
    if (!(ic[0] > 0.0 && ic[1] > 0.0))
      throw ContractViolation("hamiltonian_drift: ICs must be strictly positive");
    IntegrationResult res = try_solve_model(model, ic, grid, solver_cfg);
    if (stats && !res.ok()) stats->failed_rollouts++;
    const double h0 = hamiltonian(system, ic);
    double sum = 0.0;
    long valid = 0;
    for (const State& s : res.trajectory.states) {
      if (s[0] > 0.0 && s[1] > 0.0) {
        sum += std::abs(hamiltonian(system, s) - h0) / std::abs(h0);
        ++valid;
      } else if (stats) {
        stats->excluded_states++;
      }
    }
    if (valid == 0) {
      if (stats) {
        stats->undefined_ics++;
        stats->drift.push_back(std::numeric_limits<double>::quiet_NaN());
      }
      continue;
    }
    const double d = sum / static_cast<double>(valid);
    if (stats) stats->drift.push_back(d);
    total += d;
    ++counted;
  }
  if (counted == 0) throw DomainError("hamiltonian_drift: drift undefined for every IC");
  return total / counted;
}

/// Geometric mean of the three error axes (the log-space mean).
inline double composite_metric(double mse_in, double mse_oos, double mse_long) {
  if (!(mse_in > 0.0 && mse_oos > 0.0 && mse_long > 0.0))
    throw ContractViolation("composite_metric: inputs must be strictly positive");
  return std::exp((std::log(mse_in) + std::log(mse_oos) + std::log(mse_long)) / 3.0);
}

struct MetricsReport {
  double mse_in = 0.0;
  double mse_oos = 0.0;
  double mse_long = 0.0;
  double h_drift_rel = 0.0;
  double composite = 0.0;
  PerIcStats in_per_ic, oos_per_ic;
  DriftStats drift_stats;
};

/// The three-axis evaluation: in-sample on the typical-regime dataset, OOS
/// and long-horizon on the mixed dataset over the full horizon (identical by
/// construction there), plus conserved-quantity drift on the mixed ICs.
template <class Model>
MetricsReport three_axis_report(const Model& model, const Dataset& typical,
                                const Dataset& mixed, double horizon = kDatasetHorizon,
                                const SolverConfig& solver_cfg = {}) {
  MetricsReport r;
  r.mse_in = trajectory_mse(model, typical, horizon, solver_cfg, &r.in_per_ic);
  r.mse_oos = trajectory_mse(model, mixed, horizon, solver_cfg, &r.oos_per_ic);
  r.mse_long = r.mse_oos;  // full-horizon cumulative MSE on the same rollouts
  std::vector<State> ics;
  for (const DatasetEntry& e : mixed.entries) ics.push_back(e.ic);
  r.h_drift_rel =
      hamiltonian_drift(model, mixed.system, ics, horizon, solver_cfg, &r.drift_stats);
  r.composite = composite_metric(r.mse_in, r.mse_oos, r.mse_long);
  return r;
}

// ---------------------------------------------------------------------------
// Plot-ready data series

inline std::string nan_or(double v) {
  return std::isfinite(v) ? fmt_double(v) : std::string("nan");
}

/// Per-IC phase-portrait series (t, prediction, truth) for the dataset.
template <class Model>
void write_phase_series(const Model& model, const Dataset& ds,
                        const std::filesystem::path& dir,
                        const SolverConfig& solver_cfg = {}) {
  for (std::size_t k = 0; k < ds.entries.size(); ++k) {
    const Trajectory& truth = ds.entries[k].trajectory;
    IntegrationResult res = try_solve_model(model, ds.entries[k].ic, truth.times, solver_cfg);
    std::ostringstream out;
    out << "t,x_pred,y_pred,x_true,y_true\n";
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const bool have = i < res.trajectory.states.size();
      out << fmt_double(truth.times[i]) << ','
          << (have ? fmt_double(res.trajectory.states[i][0]) : "nan") << ','
          << (have ? fmt_double(res.trajectory.states[i][1]) : "nan") << ','
          << fmt_double(truth.states[i][0]) << ',' << fmt_double(truth.states[i][1])
          << "\n";
    }
    write_text_file(dir / ("phase_ic" + std::to_string(k) + ".csv"), out.str());
  }
}

/// Per-IC conserved-quantity series: H along prediction and truth plus the
/// relative drift of the prediction.
template <class Model>
void write_hamiltonian_series(const Model& model, const Dataset& ds,
                              const std::filesystem::path& dir,
                              const SolverConfig& solver_cfg = {}) {
  for (std::size_t k = 0; k < ds.entries.size(); ++k) {
    const Trajectory& truth = ds.entries[k].trajectory;
    IntegrationResult res = try_solve_model(model, ds.entries[k].ic, truth.times, solver_cfg);
    const double h0 = hamiltonian(ds.system, ds.entries[k].ic);
    std::ostringstream out;
    out << "t,H_pred,H_true,drift_rel\n";
    for (std::size_t i = 0; i < truth.size(); ++i) {
      double hp = std::numeric_limits<double>::quiet_NaN();
      if (i < res.trajectory.states.size()) {
        const State& s = res.trajectory.states[i];
        if (s[0] > 0.0 && s[1] > 0.0) hp = hamiltonian(ds.system, s);
      }
      const State& st = truth.states[i];
      const double ht = (st[0] > 0.0 && st[1] > 0.0)
                            ? hamiltonian(ds.system, st)
                            : std::numeric_limits<double>::quiet_NaN();
      const double drift = std::abs(hp - h0) / std::abs(h0);
      out << fmt_double(truth.times[i]) << ',' << nan_or(hp) << ',' << nan_or(ht) << ','
          << nan_or(drift) << "\n";
    }
    write_text_file(dir / ("hamiltonian_ic" + std::to_string(k) + ".csv"), out.str());
  }
}

/// Cumulative squared-error-vs-horizon curve averaged over the dataset ICs
/// (non-decreasing in t), plus the running MSE.
template <class Model>
void write_horizon_curve(const Model& model, const Dataset& ds,
                         const std::filesystem::path& dir,
                         const SolverConfig& solver_cfg = {}) {
  if (ds.entries.empty()) return;
  const std::size_t n = ds.entries.front().trajectory.size();
  std::vector<double> cum(n, 0.0);
  for (const DatasetEntry& e : ds.entries) {
    IntegrationResult res = try_solve_model(model, e.ic, e.trajectory.times, solver_cfg);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (i < res.trajectory.states.size())
        acc += squared_distance(res.trajectory.states[i], e.trajectory.states[i]);
      else
        acc += squared_norm(e.trajectory.states[i]);
      cum[i] += acc;
    }
  }
  std::ostringstream out;
  out << "t,cum_sq_err,mse_to_t\n";
  const double inv_m = 1.0 / static_cast<double>(ds.entries.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double c = cum[i] * inv_m;
    out << fmt_double(ds.entries.front().trajectory.times[i]) << ',' << fmt_double(c)
        << ',' << fmt_double(c / static_cast<double>(i + 1)) << "\n";
  }
  write_text_file(dir / "horizon_curve.csv", out.str());
}

}  // namespace odelearn
