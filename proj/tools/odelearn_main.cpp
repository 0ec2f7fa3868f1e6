#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "odelearn/runner.hpp"

namespace {

using namespace odelearn;

struct CommonOpts {
  std::string config_path;
  std::string out_override;
  std::string scale = "full";
  std::uint64_t seed = 0;
  bool seed_set = false;
  int jobs = 1;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool config_required = true) {
  auto* copt = cmd->add_option("--config", o.config_path, "experiment config file");
  if (config_required) copt->required();
  cmd->add_option("--seed", o.seed, "override the training seed")
      ->each([&o](const std::string&) { o.seed_set = true; });
  cmd->add_option("--out", o.out_override, "override the output directory");
  cmd->add_option("--scale", o.scale, "preset scale: full (default) or desk")
      ->check(CLI::IsMember({"full", "desk"}));
  cmd->add_option("--jobs", o.jobs, "parallel jobs for sweep cells");
}

ExperimentConfig load_config(const CommonOpts& o) {
  std::string text;
  try {
    text = read_text_file(o.config_path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  ExperimentConfig cfg = parse_experiment_config(
      text, o.scale == "desk" ? RunScale::Desk : RunScale::Full);
  if (o.seed_set) cfg.train.seed = o.seed;
  if (!o.out_override.empty()) cfg.out_dir = o.out_override;
  return cfg;
}

int dispatch(CLI::App& app, const std::string& sub, CommonOpts& o,
             const std::string& kind, const std::string& knob,
             const std::vector<std::string>& inputs, const std::string& checkpoint) {
  (void)app;
  if (sub == "generate") {
    ExperimentConfig cfg = load_config(o);
    const fs::path dir = resolve_out_dir(cfg.out_dir);
    save_dataset(dir / "dataset_typical.txt",
                 make_eval_dataset(cfg, SamplerMode::TypicalUniform));
    save_dataset(dir / "dataset_mixed.txt", make_eval_dataset(cfg, SamplerMode::MixedEdge));
    std::printf("wrote datasets under %s\n", dir.string().c_str());
  } else if (sub == "train") {
    ExperimentConfig cfg = load_config(o);
    RunResult r = run_experiment(cfg);
    std::printf("run complete: %s\n", r.dir.string().c_str());
    std::printf("mse_in=%g mse_oos=%g mse_long=%g h_drift=%g composite=%g\n",
                r.metrics.mse_in, r.metrics.mse_oos, r.metrics.mse_long,
                r.metrics.h_drift_rel, r.metrics.composite);
  } else if (sub == "evaluate") {
    ExperimentConfig cfg = load_config(o);
    const fs::path dir = resolve_out_dir(cfg.out_dir);
    const fs::path ck_path = checkpoint.empty() ? dir / "checkpoint.txt" : fs::path(checkpoint);
    Checkpoint ck;
    try {
      ck = load_checkpoint(ck_path);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    const Dataset ds_typical = make_eval_dataset(cfg, SamplerMode::TypicalUniform);
    const Dataset ds_mixed = make_eval_dataset(cfg, SamplerMode::MixedEdge);
    long sat = 0;
    MlpModel model(ck.spec, ck.params, &sat);
    MetricsReport m =
        three_axis_report(model, ds_typical, ds_mixed, cfg.eval.horizon, cfg.train.solver_eval);
    ordered_json j;
    j["method"] = to_string(cfg.train.method);
    j["seed"] = ck.seed;
    j["checkpoint"] = ck_path.string();
    j.update(detail::metrics_to_json(m));
    j["saturation_count"] = sat;
    write_text_file(dir / "report.json", j.dump(2) + "\n");
    detail::write_all_series(model, ds_mixed, dir / "series", cfg.train.solver_eval);
    std::printf("mse_in=%g mse_oos=%g mse_long=%g h_drift=%g composite=%g\n", m.mse_in,
                m.mse_oos, m.mse_long, m.h_drift_rel, m.composite);
  } else if (sub == "ablate") {
    ExperimentConfig cfg = load_config(o);
    SweepResult r = ablation_sweep(ablation_kind_from_string(kind), cfg, o.jobs);
    std::printf("sweep complete: %zu cells -> %s\n", r.cells.size(),
                r.csv_path.string().c_str());
  } else if (sub == "sweep") {
    ExperimentConfig cfg = load_config(o);
    std::string the_knob = knob.empty() ? cfg.sweep.knob : knob;
    if (the_knob.empty()) throw ConfigError("sweep: no knob given (flag --knob or [sweep] section)");
    std::vector<double> values = cfg.sweep.values;
    std::vector<std::uint64_t> seeds = cfg.sweep.seeds;
    if (seeds.empty()) seeds = {cfg.train.seed};
    if (values.empty()) throw ConfigError("sweep: no values given ([sweep] section)");
    SensitivityResult r = sensitivity_sweep(the_knob, values, seeds, cfg);
    std::printf("sensitivity sweep complete: %zu rows -> %s\n", r.rows.size(),
                r.csv_path.string().c_str());
  } else if (sub == "report") {
    if (inputs.empty()) throw ConfigError("report: need --inputs run directories");
    std::vector<fs::path> paths(inputs.begin(), inputs.end());
    const fs::path out = o.out_override.empty() ? fs::path(".") : resolve_out_dir(o.out_override);
    emit_report(paths, out);
    std::printf("wrote comparison under %s\n", out.string().c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural vector-field learning for small dynamical systems"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string kind = "architecture", knob, checkpoint;
  std::vector<std::string> inputs;

  auto* c_generate = app.add_subcommand("generate", "write ground-truth datasets");
  add_common(c_generate, opts);
  auto* c_train = app.add_subcommand("train", "train a method and evaluate it");
  add_common(c_train, opts);
  auto* c_eval = app.add_subcommand("evaluate", "evaluate an existing checkpoint");
  add_common(c_eval, opts);
  c_eval->add_option("--checkpoint", checkpoint, "checkpoint file (default <out>/checkpoint.txt)");
  auto* c_ablate = app.add_subcommand("ablate", "run a Phase-1 ablation sweep");
  add_common(c_ablate, opts);
  c_ablate->add_option("--kind", kind, "architecture | temporal | positivity")
      ->check(CLI::IsMember({"architecture", "temporal", "positivity"}));
  auto* c_sweep = app.add_subcommand("sweep", "hyperparameter sensitivity sweep");
  add_common(c_sweep, opts);
  c_sweep->add_option("--knob", knob, "lambda_phys | lr | depth | width | batch");
  auto* c_report = app.add_subcommand("report", "collect run reports into a comparison table");
  add_common(c_report, opts, /*config_required=*/false);
  c_report->add_option("--inputs", inputs, "run directories or report.json files")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    const std::string sub = app.get_subcommands().front()->get_name();
    return dispatch(app, sub, opts, kind, knob, inputs, checkpoint);
  } catch (const odelearn::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const odelearn::TrainingCollapse& e) {
    std::fprintf(stderr, "training collapse: %s\n", e.what());
    return 3;
  } catch (const odelearn::SolverFailure& e) {
    std::fprintf(stderr, "solver failure during evaluation: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
