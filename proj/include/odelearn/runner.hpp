#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "odelearn/config.hpp"
#include "odelearn/errors.hpp"
#include "odelearn/eval.hpp"
#include "odelearn/io.hpp"
#include "odelearn/trainer.hpp"

namespace odelearn {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

/// Relative output directories live under ODELEARN_OUT_ROOT when it is set.
inline fs::path resolve_out_dir(const std::string& out_dir) {
  fs::path p(out_dir);
  if (const char* root = std::getenv("ODELEARN_OUT_ROOT"); root && *root && p.is_relative())
    p = fs::path(root) / p;
  return p;
}

struct RunResult {
  MetricsReport metrics;
  fs::path dir;
  long saturation_count = 0;
  long total_dropped = 0;
  int best_epoch = 0;
  double best_val_mse = 0.0;
  bool structured = false;
  std::array<double, 4> fitted{};
  double fit_final_loss = 0.0;
};

namespace detail {

inline std::string history_csv(const std::vector<HistoryRow>& history) {
  std::ostringstream out;
  out << "epoch,lr,loss_total,loss_data,loss_phys,loss_cont,loss_reg,val_mse,dropped_ics\n";
  for (const HistoryRow& r : history) {
    out << r.epoch << ',' << fmt_double(r.lr) << ',' << fmt_double(r.losses.total) << ','
        << fmt_double(r.losses.data) << ',' << fmt_double(r.losses.phys) << ','
        << fmt_double(r.losses.cont) << ',' << fmt_double(r.losses.reg) << ','
        << fmt_double(r.val_mse) << ',' << r.dropped_ics << "\n";
  }
  return out.str();
}

inline ordered_json metrics_to_json(const MetricsReport& m) {
  ordered_json j;
  j["mse_in"] = m.mse_in;
  j["mse_oos"] = m.mse_oos;
  j["mse_long"] = m.mse_long;
  j["h_drift_rel"] = m.h_drift_rel;
  j["composite"] = m.composite;
  ordered_json per;
  per["mse_in"] = m.in_per_ic.mse;
  per["in_failed"] = m.in_per_ic.failed;
  per["mse_oos"] = m.oos_per_ic.mse;
  per["oos_failed"] = m.oos_per_ic.failed;
  std::vector<double> drifts = m.drift_stats.drift;
  ordered_json jd = ordered_json::array();
  for (double d : drifts)
    jd.push_back(std::isfinite(d) ? ordered_json(d) : ordered_json(nullptr));
  per["drift"] = jd;
  j["per_ic"] = per;
  ordered_json diag;
  diag["excluded_states"] = m.drift_stats.excluded_states;
  diag["undefined_ics"] = m.drift_stats.undefined_ics;
  diag["failed_rollouts"] = m.drift_stats.failed_rollouts;
  j["drift_diagnostics"] = diag;
  return j;
}

template <class Model>
void write_all_series(const Model& model, const Dataset& mixed, const fs::path& dir,
                      const SolverConfig& solver_cfg) {
  fs::create_directories(dir);
  write_phase_series(model, mixed, dir, solver_cfg);
  write_hamiltonian_series(model, mixed, dir, solver_cfg);
  write_horizon_curve(model, mixed, dir, solver_cfg);
}

}  // namespace detail

inline Dataset make_eval_dataset(const ExperimentConfig& cfg, SamplerMode mode) {
  ICSamplerSpec sampler = cfg.train.sampler;
  sampler.mode = mode;
  const bool typical = mode == SamplerMode::TypicalUniform;
  return generate_dataset(cfg.system, sampler, typical ? cfg.eval.n_typical : cfg.eval.n_mixed,
                          typical ? cfg.eval.seed_typical : cfg.eval.seed_mixed,
                          cfg.train.solver_eval, cfg.eval.horizon, cfg.train.grid_dt);
}

/// Train (or fit), evaluate on held-out datasets, and write every artifact:
/// resolved config, checkpoint, history CSV, report JSON, plot series.
inline RunResult run_experiment(const ExperimentConfig& cfg) {
  RunResult result;
  result.dir = resolve_out_dir(cfg.out_dir);
  fs::create_directories(result.dir);
  write_text_file(result.dir / "config_resolved.txt", experiment_config_to_string(cfg));

  const Dataset ds_typical = make_eval_dataset(cfg, SamplerMode::TypicalUniform);
  const Dataset ds_mixed = make_eval_dataset(cfg, SamplerMode::MixedEdge);

  ordered_json j;
  j["method"] = to_string(cfg.train.method);
  j["seed"] = cfg.train.seed;

  if (cfg.train.method == Method::Structured) {
    result.structured = true;
    ICSamplerSpec sampler = cfg.train.sampler;
    sampler.mode = SamplerMode::MixedEdge;
    const Dataset fit_ds =
        generate_dataset(cfg.system, sampler, cfg.structured.n_trajectories, cfg.train.seed,
                         cfg.train.solver_eval, cfg.eval.horizon, cfg.train.grid_dt);
    std::vector<State> states;
    for (const DatasetEntry& e : fit_ds.entries)
      for (const State& s : e.trajectory.states) states.push_back(s);
    StructuredFitResult fit = fit_structured(cfg.system, states, cfg.structured.init,
                                             cfg.structured.lr, cfg.structured.epochs);
    result.fitted = fit.raw;
    result.fit_final_loss = fit.loss_history.empty() ? 0.0 : fit.loss_history.back();

    std::ostringstream hist;
    hist << "epoch,loss\n";
    for (std::size_t e = 0; e < fit.loss_history.size(); ++e)
      hist << e << ',' << fmt_double(fit.loss_history[e]) << "\n";
    write_text_file(result.dir / "fit_history.csv", hist.str());

    AnalyticModel model(fit.fitted);
    result.metrics = three_axis_report(model, ds_typical, ds_mixed, cfg.eval.horizon,
                                       cfg.train.solver_eval);
    detail::write_all_series(model, ds_mixed, result.dir / "series", cfg.train.solver_eval);

    ordered_json sf;
    const auto names = cfg.system.coefficient_names();
    for (std::size_t i = 0; i < names.size(); ++i) {
      const double truth = cfg.system.coeff(static_cast<int>(i));
      sf[names[i]] = fit.raw[i];
      sf["rel_err_" + names[i]] = std::abs(fit.raw[i] - truth) / std::abs(truth);
    }
    sf["final_loss"] = result.fit_final_loss;
    sf["epochs"] = cfg.structured.epochs;
    j["structured_fit"] = sf;
  } else {
    TrainResult tr = train(cfg.train, cfg.system);
    result.total_dropped = tr.total_dropped;
    result.best_epoch = static_cast<int>(tr.best.epoch);
    result.best_val_mse = tr.best.val_mse;
    save_checkpoint(result.dir / "checkpoint.txt", tr.best);
    write_text_file(result.dir / "history.csv", detail::history_csv(tr.history));

    long eval_saturation = 0;
    MlpModel model(tr.best.spec, tr.best.params, &eval_saturation);
    result.metrics = three_axis_report(model, ds_typical, ds_mixed, cfg.eval.horizon,
                                       cfg.train.solver_eval);
    detail::write_all_series(model, ds_mixed, result.dir / "series", cfg.train.solver_eval);
    result.saturation_count = tr.saturation_count + eval_saturation;

    ordered_json t;
    t["best_epoch"] = tr.best.epoch;
    t["best_val_mse"] = tr.best.val_mse;
    t["total_dropped"] = tr.total_dropped;
    t["saturation_count"] = result.saturation_count;
    j["train"] = t;
  }

  j.update(detail::metrics_to_json(result.metrics));
  write_text_file(result.dir / "report.json", j.dump(2) + "\n");
  return result;
}

// ---------------------------------------------------------------------------
// Phase-1 ablation sweeps

enum class AblationKind { Architecture, Temporal, Positivity };

inline AblationKind ablation_kind_from_string(std::string_view s) {
  if (s == "architecture") return AblationKind::Architecture;
  if (s == "temporal") return AblationKind::Temporal;
  if (s == "positivity") return AblationKind::Positivity;
  throw ConfigError("unknown ablation kind '" + std::string(s) + "'");
}

struct SweepCell {
  std::vector<std::pair<std::string, std::string>> knobs;  // ordered knob -> value
  std::string name;
  bool ok = false;
  std::string error;
  MetricsReport metrics;
  long saturation_count = 0;
  int rank = 0;
};

struct SweepResult {
  std::vector<SweepCell> cells;  // ranked by composite, ties in declaration order
  fs::path csv_path;
};

namespace detail {

inline void run_cells(std::vector<ExperimentConfig>& configs, std::vector<SweepCell>& cells,
                      int jobs) {
  const std::size_t n = configs.size();
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        RunResult r = run_experiment(configs[i]);
        cells[i].metrics = r.metrics;
        cells[i].saturation_count = r.saturation_count;
        cells[i].ok = true;
      } catch (const std::exception& e) {
        cells[i].ok = false;
        cells[i].error = e.what();
      }
    }
  };
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
}

inline std::string sweep_csv(const std::vector<SweepCell>& ranked,
                             const std::vector<std::string>& knob_names) {
  std::ostringstream out;
  out << "rank";
  for (const std::string& k : knob_names) out << ',' << k;
  out << ",mse_in,mse_oos,mse_long,h_drift_rel,composite,status\n";
  for (const SweepCell& c : ranked) {
    out << c.rank;
    for (const auto& [k, v] : c.knobs) out << ',' << v;
    if (c.ok) {
      out << ',' << fmt_double(c.metrics.mse_in) << ',' << fmt_double(c.metrics.mse_oos)
          << ',' << fmt_double(c.metrics.mse_long) << ','
          << fmt_double(c.metrics.h_drift_rel) << ',' << fmt_double(c.metrics.composite)
          << ",ok\n";
    } else {
      out << ",,,,,failed: " << c.error << "\n";
    }
  }
  return out.str();
}

inline void rank_cells(std::vector<SweepCell>& cells) {
  std::vector<std::size_t> order(cells.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const bool oa = cells[a].ok, ob = cells[b].ok;
    if (oa != ob) return oa;  // failures sink to the bottom
    if (!oa) return false;
    return cells[a].metrics.composite < cells[b].metrics.composite;
  });
  std::vector<SweepCell> ranked;
  ranked.reserve(cells.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    ranked.push_back(cells[order[i]]);
    ranked.back().rank = static_cast<int>(i + 1);
  }
  cells = std::move(ranked);
}

}  // namespace detail

/// Train one baseline-method variant per grid cell (shared seed) and rank by
/// the composite metric. The architecture grid is widths {32,64,128,256} x
/// depths {2..6}; temporal compares the three window strategies; positivity
/// the four output wrappers.
inline SweepResult ablation_sweep(AblationKind kind, const ExperimentConfig& base,
                                  int jobs = 1) {
  if (base.train.method != Method::NN)
    throw ConfigError("ablation sweeps run the baseline method only (method = nn)");

  std::vector<ExperimentConfig> configs;
  std::vector<SweepCell> cells;
  std::vector<std::string> knob_names;
  const fs::path root = resolve_out_dir(base.out_dir);
  const char* csv_name = "";

  switch (kind) {
    case AblationKind::Architecture: {
      knob_names = {"width", "depth"};
      csv_name = "sweep_architecture.csv";
      for (int width : {32, 64, 128, 256}) {
        for (int depth = 2; depth <= 6; ++depth) {
          ExperimentConfig c = base;
          c.train.net.hidden_widths.assign(static_cast<std::size_t>(depth), width);
          SweepCell cell;
          cell.name = "arch_w" + std::to_string(width) + "_d" + std::to_string(depth);
          cell.knobs = {{"width", std::to_string(width)}, {"depth", std::to_string(depth)}};
          c.out_dir = (fs::path(base.out_dir) / cell.name).string();
          configs.push_back(std::move(c));
          cells.push_back(std::move(cell));
        }
      }
      break;
    }
    case AblationKind::Temporal: {
      knob_names = {"sampling"};
      csv_name = "sweep_temporal.csv";
      for (Sampling s : {Sampling::FullWindow, Sampling::Expanding, Sampling::Sliding}) {
        ExperimentConfig c = base;
        c.train.sampling = s;
        SweepCell cell;
        cell.name = std::string("temporal_") + to_string(s);
        cell.knobs = {{"sampling", to_string(s)}};
        c.out_dir = (fs::path(base.out_dir) / cell.name).string();
        configs.push_back(std::move(c));
        cells.push_back(std::move(cell));
      }
      break;
    }
    case AblationKind::Positivity: {
      knob_names = {"wrapper"};
      csv_name = "sweep_positivity.csv";
      for (Wrapper w : {Wrapper::None, Wrapper::TanhBound, Wrapper::Squared, Wrapper::Clamp}) {
        ExperimentConfig c = base;
        c.train.net.wrapper = w;
        c.train.net.wrapper_bound = default_wrapper_bound(w);
        SweepCell cell;
        cell.name = std::string("wrapper_") + to_string(w);
        cell.knobs = {{"wrapper", to_string(w)}};
        c.out_dir = (fs::path(base.out_dir) / cell.name).string();
        configs.push_back(std::move(c));
        cells.push_back(std::move(cell));
      }
      break;
    }
  }

  detail::run_cells(configs, cells, jobs);
  detail::rank_cells(cells);

  SweepResult result;
  result.cells = std::move(cells);
  result.csv_path = root / csv_name;
  write_text_file(result.csv_path, detail::sweep_csv(result.cells, knob_names));
  return result;
}

// ---------------------------------------------------------------------------
// Hyperparameter sensitivity sweeps

struct SensitivityRow {
  double value = 0.0;
  double mean_val_mse = 0.0;
  double std_val_mse = 0.0;
  int n_seeds = 0;
};

struct SensitivityResult {
  std::vector<SensitivityRow> rows;
  fs::path csv_path;
};

namespace detail {

inline void check_sensitivity_range(const std::string& knob, double lo, double hi) {
  struct Bound { const char* name; double lo, hi; };
  static constexpr Bound kBounds[] = {{"lambda_phys", 0.1, 100.0},
                                      {"lr", 1e-4, 1e-2},
                                      {"depth", 2, 6},
                                      {"width", 32, 256},
                                      {"batch", 64, 256}};
  for (const Bound& b : kBounds) {
    if (knob == b.name) {
      if (lo < b.lo || hi > b.hi)
        throw ConfigError("sensitivity sweep: " + knob + " values must lie within [" +
                          fmt_double(b.lo) + ", " + fmt_double(b.hi) + "]");
      return;
    }
  }
  throw ConfigError("unknown sensitivity knob '" + knob + "'");
}

inline void apply_sensitivity_knob(TrainConfig& cfg, const std::string& knob, double value) {
  if (knob == "lambda_phys") {
    cfg.weights.lambda_phys = value;
  } else if (knob == "lr") {
    cfg.lr_max = value;
    cfg.lr_min = value / 10.0;  // keep the schedule's 10x decay shape
  } else if (knob == "depth") {
    const int width = cfg.net.hidden_widths.empty() ? 128 : cfg.net.hidden_widths.front();
    cfg.net.hidden_widths.assign(static_cast<std::size_t>(value), width);
  } else if (knob == "width") {
    for (int& w : cfg.net.hidden_widths) w = static_cast<int>(value);
  } else if (knob == "batch") {
    cfg.ics_per_epoch = static_cast<int>(value);
  }
}

}  // namespace detail

/// Train per (value, seed) and report mean +- std of the best validation MSE
/// across seeds for each value.
inline SensitivityResult sensitivity_sweep(const std::string& knob,
                                           std::span<const double> values,
                                           std::span<const std::uint64_t> seeds,
                                           const ExperimentConfig& base) {
  if (values.empty() || seeds.empty())
    throw ConfigError("sensitivity sweep: need at least one value and one seed");
  double lo = values[0], hi = values[0];
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  detail::check_sensitivity_range(knob, lo, hi);

  SensitivityResult result;
  for (double value : values) {
    std::vector<double> vals;
    for (std::uint64_t seed : seeds) {
      ExperimentConfig c = base;
      detail::apply_sensitivity_knob(c.train, knob, value);
      c.train.seed = seed;
      TrainResult tr = train(c.train, c.system);
      vals.push_back(tr.best.val_mse);
    }
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    double var = 0.0;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= static_cast<double>(vals.size());
    result.rows.push_back({value, mean, std::sqrt(var), static_cast<int>(vals.size())});
  }

  const fs::path root = resolve_out_dir(base.out_dir);
  fs::create_directories(root);
  std::ostringstream out;
  out << "value,mean_val_mse,std_val_mse,n_seeds\n";
  for (const SensitivityRow& r : result.rows)
    out << fmt_double(r.value) << ',' << fmt_double(r.mean_val_mse) << ','
        << fmt_double(r.std_val_mse) << ',' << r.n_seeds << "\n";
  result.csv_path = root / ("sensitivity_" + knob + ".csv");
  write_text_file(result.csv_path, out.str());
  return result;
}

// ---------------------------------------------------------------------------
// Cross-method comparison

struct ComparisonRow {
  std::string method;
  std::uint64_t seed = 0;
  double mse_in = 0, mse_oos = 0, mse_long = 0, h_drift_rel = 0, composite = 0;
};

/// Collect per-method report files into one machine-readable table plus an
/// aligned human-readable rendering. Values are copied, never recomputed.
inline std::vector<ComparisonRow> emit_report(const std::vector<fs::path>& report_files,
                                              const fs::path& out_dir) {
  if (report_files.empty()) throw ConfigError("emit_report: need at least one report");
  std::vector<ComparisonRow> rows;
  for (const fs::path& p : report_files) {
    const fs::path file = fs::is_directory(p) ? p / "report.json" : p;
    ordered_json j = ordered_json::parse(read_text_file(file));
    ComparisonRow r;
    r.method = j.at("method").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.mse_in = j.at("mse_in").get<double>();
    r.mse_oos = j.at("mse_oos").get<double>();
    r.mse_long = j.at("mse_long").get<double>();
    r.h_drift_rel = j.at("h_drift_rel").get<double>();
    r.composite = j.at("composite").get<double>();
    rows.push_back(std::move(r));
  }

  fs::create_directories(out_dir);
  std::ostringstream csv;
  csv << "method,seed,mse_in,mse_oos,mse_long,h_drift_rel,composite\n";
  for (const ComparisonRow& r : rows)
    csv << r.method << ',' << r.seed << ',' << fmt_double(r.mse_in) << ','
        << fmt_double(r.mse_oos) << ',' << fmt_double(r.mse_long) << ','
        << fmt_double(r.h_drift_rel) << ',' << fmt_double(r.composite) << "\n";
  write_text_file(out_dir / "comparison.csv", csv.str());

  std::ostringstream txt;
  txt << std::left << std::setw(12) << "method" << std::right << std::setw(6) << "seed"
      << std::setw(14) << "in MSE" << std::setw(14) << "OOS MSE" << std::setw(14)
      << "long MSE" << std::setw(14) << "rel H drift" << std::setw(14) << "composite"
      << "\n";
  for (const ComparisonRow& r : rows) {
    txt << std::left << std::setw(12) << r.method << std::right << std::setw(6) << r.seed;
    for (double v : {r.mse_in, r.mse_oos, r.mse_long, r.h_drift_rel, r.composite})
      txt << std::setw(14) << std::setprecision(6) << std::defaultfloat << v;
    txt << "\n";
  }
  write_text_file(out_dir / "comparison.txt", txt.str());
  return rows;
}

}  // namespace odelearn
