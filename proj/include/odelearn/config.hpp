#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "odelearn/errors.hpp"
#include "odelearn/eval.hpp"
#include "odelearn/io.hpp"
#include "odelearn/systems.hpp"
#include "odelearn/trainer.hpp"

namespace odelearn {

struct EvalConfig {
  int n_typical = 16;
  int n_mixed = 16;
  std::uint64_t seed_typical = 101;
  std::uint64_t seed_mixed = 202;
  double horizon = kDatasetHorizon;
};

struct StructuredConfig {
  double lr = 5e-3;
  int epochs = 3000;
  int n_trajectories = 8;
  std::array<double, 4> init{1.0, 1.0, 1.0, 1.0};
};

struct SweepConfig {
  std::string knob;
  std::vector<double> values;
  std::vector<std::uint64_t> seeds;
};

struct ExperimentConfig {
  SystemParams system = SystemParams::lotka_volterra();
  TrainConfig train;
  EvalConfig eval;
  StructuredConfig structured;
  SweepConfig sweep;
  std::string out_dir = "run";
};

namespace detail {

struct ConfigLine {
  std::string section, key, value;
  int line_no = 0;
};

inline std::vector<ConfigLine> tokenize_config(const std::string& text) {
  std::vector<ConfigLine> out;
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto l = line.find_first_not_of(" \t\r");
    if (l == std::string::npos) continue;
    auto r = line.find_last_not_of(" \t\r");
    line = line.substr(l, r - l + 1);
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("config line " + std::to_string(line_no) + ": unterminated section header");
      section = line.substr(1, line.size() - 2);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    auto trim = [](std::string s) {
      auto a = s.find_first_not_of(" \t");
      auto b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    ConfigLine cl;
    cl.section = section;
    cl.key = trim(line.substr(0, eq));
    cl.value = trim(line.substr(eq + 1));
    cl.line_no = line_no;
    if (cl.key.empty())
      throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    out.push_back(std::move(cl));
  }
  return out;
}

inline std::vector<double> parse_double_list(const std::string& v, int line_no) {
  std::istringstream ss(v);
  std::vector<double> out;
  std::string tok;
  while (ss >> tok) {
    try {
      out.push_back(parse_double(tok));
    } catch (const std::exception&) {
      throw ConfigError("config line " + std::to_string(line_no) + ": bad number '" + tok + "'");
    }
  }
  return out;
}

inline std::vector<int> parse_int_list(const std::string& v, int line_no) {
  std::vector<int> out;
  for (double d : parse_double_list(v, line_no)) out.push_back(static_cast<int>(d));
  return out;
}

}  // namespace detail

/// Parse the line-oriented experiment configuration. The method preset is
/// applied first (at the requested scale), then every explicit key in the
/// file overrides it.
inline ExperimentConfig parse_experiment_config(const std::string& text,
                                                RunScale scale = RunScale::Full) {
  using detail::ConfigLine;
  const std::vector<ConfigLine> lines = detail::tokenize_config(text);

  ExperimentConfig cfg;

  // method first so its preset can be overridden by explicit keys
  for (const ConfigLine& cl : lines)
    if (cl.section == "train" && cl.key == "method")
      cfg.train.method = method_from_string(cl.value);
  apply_method_preset(cfg.train, scale);
  if (scale == RunScale::Desk) {
    cfg.eval.n_typical = 8;
    cfg.eval.n_mixed = 8;
  }

  double lv[4] = {1.5, 1.0, 3.0, 1.0};
  std::string system_id = "lotka_volterra";

  auto bad = [](const ConfigLine& cl) {
    return ConfigError("config line " + std::to_string(cl.line_no) + ": unknown key '" +
                       cl.key + "' in section [" + cl.section + "]");
  };
  auto num = [](const ConfigLine& cl) {
    try {
      return parse_double(cl.value);
    } catch (const std::exception&) {
      throw ConfigError("config line " + std::to_string(cl.line_no) + ": bad number '" +
                        cl.value + "'");
    }
  };

  for (const ConfigLine& cl : lines) {
    const std::string& s = cl.section;
    const std::string& k = cl.key;
    if (s == "system") {
      if (k == "id") system_id = cl.value;
      else if (k == "alpha") lv[0] = num(cl);
      else if (k == "beta") lv[1] = num(cl);
      else if (k == "gamma") lv[2] = num(cl);
      else if (k == "delta") lv[3] = num(cl);
      else throw bad(cl);
    } else if (s == "net") {
      if (k == "hidden") {
        cfg.train.net.hidden_widths = detail::parse_int_list(cl.value, cl.line_no);
      } else if (k == "wrapper") {
        cfg.train.net.wrapper = wrapper_from_string(cl.value);
        cfg.train.net.wrapper_bound = default_wrapper_bound(cfg.train.net.wrapper);
      } else if (k == "wrapper_bound") {
        cfg.train.net.wrapper_bound = num(cl);
      } else {
        throw bad(cl);
      }
    } else if (s == "train") {
      if (k == "method") continue;  // handled above
      else if (k == "epochs") cfg.train.epochs = static_cast<int>(num(cl));
      else if (k == "ics_per_epoch") cfg.train.ics_per_epoch = static_cast<int>(num(cl));
      else if (k == "segments") cfg.train.segments = static_cast<int>(num(cl));
      else if (k == "lambda_phys") cfg.train.weights.lambda_phys = num(cl);
      else if (k == "lambda_cont") cfg.train.weights.lambda_cont = num(cl);
      else if (k == "lambda_reg") cfg.train.weights.lambda_reg = num(cl);
      else if (k == "lr_max") cfg.train.lr_max = num(cl);
      else if (k == "lr_min") cfg.train.lr_min = num(cl);
      else if (k == "grad_clip") cfg.train.grad_clip = num(cl);
      else if (k == "t_train") cfg.train.t_train = num(cl);
      else if (k == "grid_dt") cfg.train.grid_dt = num(cl);
      else if (k == "sampling") cfg.train.sampling = sampling_from_string(cl.value);
      else if (k == "seed") cfg.train.seed = static_cast<std::uint64_t>(num(cl));
      else if (k == "n_validation") cfg.train.n_validation = static_cast<int>(num(cl));
      else throw bad(cl);
    } else if (s == "sampler") {
      if (k == "mode") {
        if (cl.value == "typical") cfg.train.sampler.mode = SamplerMode::TypicalUniform;
        else if (cl.value == "mixed") cfg.train.sampler.mode = SamplerMode::MixedEdge;
        else throw ConfigError("config line " + std::to_string(cl.line_no) +
                               ": sampler mode must be 'typical' or 'mixed'");
      }
      else if (k == "uniform_lo") cfg.train.sampler.uniform_lo = num(cl);
      else if (k == "uniform_hi") cfg.train.sampler.uniform_hi = num(cl);
      else if (k == "loguniform_lo") cfg.train.sampler.loguniform_lo = num(cl);
      else if (k == "loguniform_hi") cfg.train.sampler.loguniform_hi = num(cl);
      else throw bad(cl);
    } else if (s == "solver_train" || s == "solver_eval") {
      SolverConfig& sc = s == "solver_train" ? cfg.train.solver_train : cfg.train.solver_eval;
      if (k == "rtol") sc.rtol = num(cl);
      else if (k == "atol") sc.atol = num(cl);
      else if (k == "initial_step") sc.initial_step = num(cl);
      else if (k == "max_steps") sc.max_steps = static_cast<long>(num(cl));
      else if (k == "min_step") sc.min_step = num(cl);
      else throw bad(cl);
    } else if (s == "eval") {
      if (k == "n_typical") cfg.eval.n_typical = static_cast<int>(num(cl));
      else if (k == "n_mixed") cfg.eval.n_mixed = static_cast<int>(num(cl));
      else if (k == "seed_typical") cfg.eval.seed_typical = static_cast<std::uint64_t>(num(cl));
      else if (k == "seed_mixed") cfg.eval.seed_mixed = static_cast<std::uint64_t>(num(cl));
      else if (k == "horizon") cfg.eval.horizon = num(cl);
      else throw bad(cl);
    } else if (s == "structured") {
      if (k == "lr") cfg.structured.lr = num(cl);
      else if (k == "epochs") cfg.structured.epochs = static_cast<int>(num(cl));
      else if (k == "n_trajectories") cfg.structured.n_trajectories = static_cast<int>(num(cl));
      else if (k == "init") {
        const auto v = detail::parse_double_list(cl.value, cl.line_no);
        if (v.size() != 4)
          throw ConfigError("config line " + std::to_string(cl.line_no) +
                            ": structured init needs 4 values");
        for (int i = 0; i < 4; ++i) cfg.structured.init[static_cast<std::size_t>(i)] = v[static_cast<std::size_t>(i)];
      } else {
        throw bad(cl);
      }
    } else if (s == "sweep") {
      if (k == "knob") cfg.sweep.knob = cl.value;
      else if (k == "values") cfg.sweep.values = detail::parse_double_list(cl.value, cl.line_no);
      else if (k == "seeds") {
        cfg.sweep.seeds.clear();
        for (double d : detail::parse_double_list(cl.value, cl.line_no))
          cfg.sweep.seeds.push_back(static_cast<std::uint64_t>(d));
      }
      else throw bad(cl);
    } else if (s == "output") {
      if (k == "dir") cfg.out_dir = cl.value;
      else throw bad(cl);
    } else {
      throw ConfigError("config line " + std::to_string(cl.line_no) + ": unknown section [" +
                        s + "]");
    }
  }

  if (system_id == "lotka_volterra") {
    cfg.system = SystemParams::lotka_volterra(lv[0], lv[1], lv[2], lv[3]);
  } else {
    throw ConfigError("the experiment pipeline supports system id 'lotka_volterra' only");
  }
  return cfg;
}

/// Serialize the resolved configuration back to the file format (one
/// `key = value` line per field, the system as its own named section).
inline std::string experiment_config_to_string(const ExperimentConfig& cfg) {
  std::ostringstream out;
  out << "[system]\n";
  out << "id = " << to_string(cfg.system.id()) << "\n";
  const auto names = cfg.system.coefficient_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    out << names[i] << " = " << fmt_double(cfg.system.coeff(static_cast<int>(i))) << "\n";
  out << "\n[net]\n";
  out << "hidden =";
  for (int w : cfg.train.net.hidden_widths) out << ' ' << w;
  out << "\nwrapper = " << to_string(cfg.train.net.wrapper) << "\n";
  out << "wrapper_bound = " << fmt_double(cfg.train.net.wrapper_bound) << "\n";
  out << "\n[train]\n";
  out << "method = " << to_string(cfg.train.method) << "\n";
  out << "epochs = " << cfg.train.epochs << "\n";
  out << "ics_per_epoch = " << cfg.train.ics_per_epoch << "\n";
  out << "segments = " << cfg.train.segments << "\n";
  out << "lambda_phys = " << fmt_double(cfg.train.weights.lambda_phys) << "\n";
  out << "lambda_cont = " << fmt_double(cfg.train.weights.lambda_cont) << "\n";
  out << "lambda_reg = " << fmt_double(cfg.train.weights.lambda_reg) << "\n";
  out << "lr_max = " << fmt_double(cfg.train.lr_max) << "\n";
  out << "lr_min = " << fmt_double(cfg.train.lr_min) << "\n";
  out << "grad_clip = " << fmt_double(cfg.train.grad_clip) << "\n";
  out << "t_train = " << fmt_double(cfg.train.t_train) << "\n";
  out << "grid_dt = " << fmt_double(cfg.train.grid_dt) << "\n";
  out << "sampling = " << to_string(cfg.train.sampling) << "\n";
  out << "seed = " << cfg.train.seed << "\n";
  out << "n_validation = " << cfg.train.n_validation << "\n";
  out << "\n[sampler]\n";
  out << "mode = "
      << (cfg.train.sampler.mode == SamplerMode::TypicalUniform ? "typical" : "mixed")
      << "\n";
  out << "uniform_lo = " << fmt_double(cfg.train.sampler.uniform_lo) << "\n";
  out << "uniform_hi = " << fmt_double(cfg.train.sampler.uniform_hi) << "\n";
  out << "loguniform_lo = " << fmt_double(cfg.train.sampler.loguniform_lo) << "\n";
  out << "loguniform_hi = " << fmt_double(cfg.train.sampler.loguniform_hi) << "\n";
  auto solver_section = [&](const char* name, const SolverConfig& sc) {
    out << "\n[" << name << "]\n";
    out << "rtol = " << fmt_double(sc.rtol) << "\n";
    out << "atol = " << fmt_double(sc.atol) << "\n";
    out << "initial_step = " << fmt_double(sc.initial_step) << "\n";
    out << "max_steps = " << sc.max_steps << "\n";
    out << "min_step = " << fmt_double(sc.min_step) << "\n";
  };
  solver_section("solver_train", cfg.train.solver_train);
  solver_section("solver_eval", cfg.train.solver_eval);
  out << "\n[eval]\n";
  out << "n_typical = " << cfg.eval.n_typical << "\n";
  out << "n_mixed = " << cfg.eval.n_mixed << "\n";
  out << "seed_typical = " << cfg.eval.seed_typical << "\n";
  out << "seed_mixed = " << cfg.eval.seed_mixed << "\n";
  out << "horizon = " << fmt_double(cfg.eval.horizon) << "\n";
  out << "\n[structured]\n";
  out << "lr = " << fmt_double(cfg.structured.lr) << "\n";
  out << "epochs = " << cfg.structured.epochs << "\n";
  out << "n_trajectories = " << cfg.structured.n_trajectories << "\n";
  out << "init =";
  for (double v : cfg.structured.init) out << ' ' << fmt_double(v);
  out << "\n";
  if (!cfg.sweep.knob.empty()) {
    out << "\n[sweep]\n";
    out << "knob = " << cfg.sweep.knob << "\n";
    out << "values =";
    for (double v : cfg.sweep.values) out << ' ' << fmt_double(v);
    out << "\nseeds =";
    for (std::uint64_t s : cfg.sweep.seeds) out << ' ' << s;
    out << "\n";
  }
  out << "\n[output]\n";
  out << "dir = " << cfg.out_dir << "\n";
  return out.str();
}

}  // namespace odelearn
