#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "odelearn/solver.hpp"
#include "odelearn/systems.hpp"

using namespace odelearn;

namespace {

struct ExpDecay {
  int dim() const { return 1; }
  void operator()(const double* y, double* dy) const { dy[0] = -y[0]; }
};

struct ZeroField {
  int dim() const { return 2; }
  void operator()(const double*, double* dy) const { dy[0] = dy[1] = 0.0; }
};

SolverConfig tight() {
  SolverConfig cfg;
  cfg.rtol = cfg.atol = 1e-8;
  return cfg;
}

}  // namespace

TEST_CASE("exponential decay reaches e^-1 within 1e-7 at tol 1e-8") {
  const auto tr = integrate(ExpDecay{}, State{1.0}, uniform_grid(0.0, 1.0, 2), tight());
  CHECK(std::abs(tr.states.back()[0] - std::exp(-1.0)) < 1e-7);
}

TEST_CASE("zero field keeps the state constant on every grid point") {
  const auto grid = uniform_grid(0.0, 5.0, 17);
  const auto tr = integrate(ZeroField{}, State{2.5, -1.25}, grid, tight());
  for (const State& s : tr.states) {
    CHECK(s[0] == 2.5);
    CHECK(s[1] == -1.25);
  }
}

TEST_CASE("LV orbit through (1,1) closes to within 1e-5") {
  const auto lv = SystemParams::lotka_volterra();
  AnalyticField field(lv);
  const State ic{1.0, 1.0};

  // Poincare-style return: x crosses 1 moving right (y < alpha/beta) once per
  // period. Bracket the crossing on a coarse scan, then bisect on the
  // integrate-to-t endpoint.
  auto x_at = [&](double t) {
    const auto tr = integrate(field, ic, std::vector<double>{0.0, t}, tight());
    return tr.states.back();
  };
  double t_lo = 0, t_hi = 0;
  {
    const int n = 1200;
    const auto grid = uniform_grid(0.0, 6.0, n + 1);
    const auto tr = integrate(field, ic, grid, tight());
    for (int i = n / 2; i < n; ++i) {
      const State &a = tr.states[static_cast<std::size_t>(i)],
                  &b = tr.states[static_cast<std::size_t>(i + 1)];
      if (a[0] < 1.0 && b[0] >= 1.0 && b[1] < 1.5) {
        t_lo = grid[static_cast<std::size_t>(i)];
        t_hi = grid[static_cast<std::size_t>(i + 1)];
        break;
      }
    }
  }
  REQUIRE(t_hi > 0.0);
  for (int it = 0; it < 60 && t_hi - t_lo > 1e-13; ++it) {
    const double mid = 0.5 * (t_lo + t_hi);
    (x_at(mid)[0] < 1.0 ? t_lo : t_hi) = mid;
  }
  const State back = x_at(0.5 * (t_lo + t_hi));
  CHECK(std::abs(back[0] - 1.0) < 1e-5);
  CHECK(std::abs(back[1] - 1.0) < 1e-5);
}

TEST_CASE("determinism: identical inputs give bit-identical trajectories") {
  const auto lv = SystemParams::lotka_volterra();
  AnalyticField field(lv);
  const auto grid = uniform_grid(0.0, 10.0, 101);
  const auto a = integrate(field, State{0.7, 2.2}, grid, tight());
  const auto b = integrate(field, State{0.7, 2.2}, grid, tight());
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.states[i] == b.states[i]);
  CHECK(a.stats.accepted == b.stats.accepted);
  CHECK(a.stats.rejected == b.stats.rejected);
}

TEST_CASE("halving tolerances does not increase error vs a 1e-12 reference") {
  const auto lv = SystemParams::lotka_volterra();
  AnalyticField field(lv);
  const auto grid = uniform_grid(0.0, 10.0, 101);
  const State ic{1.0, 1.0};

  SolverConfig ref_cfg;
  ref_cfg.rtol = ref_cfg.atol = 1e-12;
  const auto ref = integrate(field, ic, grid, ref_cfg);

  auto max_err = [&](double tol) {
    SolverConfig cfg;
    cfg.rtol = cfg.atol = tol;
    const auto tr = integrate(field, ic, grid, cfg);
    double m = 0.0;
    for (std::size_t i = 0; i < tr.size(); ++i)
      m = std::max(m, std::sqrt(squared_distance(tr.states[i], ref.states[i])));
    return m;
  };

  double tol = 1e-4;
  double prev = max_err(tol);
  for (int i = 0; i < 8; ++i) {
    tol *= 0.5;
    const double cur = max_err(tol);
    CHECK(cur <= prev);
    prev = cur;
  }
}

TEST_CASE("ground-truth Hamiltonian drift below 1e-6 over [0,30] at 1e-8") {
  const auto lv = SystemParams::lotka_volterra();
  AnalyticField field(lv);
  const auto grid = uniform_grid(0.0, 30.0, 301);
  const auto tr = integrate(field, State{1.0, 1.0}, grid, tight());
  const double h0 = hamiltonian(lv, tr.states.front());
  for (const State& s : tr.states)
    CHECK(std::abs(hamiltonian(lv, s) - h0) / std::abs(h0) < 1e-6);
}

TEST_CASE("step budget exhaustion reports divergence with last reached time") {
  const auto lv = SystemParams::lotka_volterra();
  AnalyticField field(lv);
  SolverConfig cfg = tight();
  cfg.max_steps = 5;
  const auto grid = uniform_grid(0.0, 30.0, 301);
  const auto res = try_integrate(field, State{1.0, 1.0}, grid, cfg);
  CHECK(res.status == SolveStatus::MaxStepsExceeded);
  CHECK(res.t_reached < 30.0);
  CHECK(res.trajectory.states.size() < grid.size());
  CHECK_THROWS_AS(integrate(field, State{1.0, 1.0}, grid, cfg), SolverFailure);
}

TEST_CASE("step underflow reports a stiffness error") {
  // derivative grows so fast the controller collapses the step below min_step
  struct Blowup {
    int dim() const { return 1; }
    void operator()(const double* y, double* dy) const {
      dy[0] = y[0] * y[0] * 1e6;
    }
  };
  SolverConfig cfg = tight();
  cfg.min_step = 1e-6;
  const auto res = try_integrate(Blowup{}, State{1.0}, uniform_grid(0.0, 1.0, 3), cfg);
  CHECK(res.status == SolveStatus::StepUnderflow);
}

TEST_CASE("non-finite states report a blow-up error") {
  struct Huge {
    int dim() const { return 1; }
    void operator()(const double*, double* dy) const { dy[0] = 1e308; }
  };
  SolverConfig cfg;
  cfg.rtol = cfg.atol = 1e308;  // accept anything so overflow is reached
  const auto res = try_integrate(Huge{}, State{1.0}, uniform_grid(0.0, 10.0, 3), cfg);
  CHECK(res.status == SolveStatus::NonFiniteState);
}

TEST_CASE("grid must be strictly increasing") {
  std::vector<double> bad = {0.0, 1.0, 1.0};
  CHECK_THROWS_AS(integrate(ExpDecay{}, State{1.0}, bad, tight()), ContractViolation);
}

TEST_CASE("solver config invariants are enforced") {
  SolverConfig cfg;
  cfg.rtol = -1.0;
  CHECK_THROWS_AS(integrate(ExpDecay{}, State{1.0}, uniform_grid(0, 1, 2), cfg),
                  ContractViolation);
  SolverConfig cfg2;
  cfg2.min_step = 1.0;
  cfg2.initial_step = 0.5;
  CHECK_THROWS_AS(integrate(ExpDecay{}, State{1.0}, uniform_grid(0, 1, 2), cfg2),
                  ContractViolation);
}
