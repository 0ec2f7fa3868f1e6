#include <catch2/catch_amalgamated.hpp>

#include "odelearn/rng.hpp"
#include "odelearn/systems.hpp"

using namespace odelearn;

TEST_CASE("LV right-hand side matches hand evaluation") {
  const auto lv = SystemParams::lotka_volterra(1.5, 1.0, 3.0, 1.0);
  const State d = rhs(lv, State{1.0, 1.0});
  CHECK(d[0] == Catch::Approx(0.5).epsilon(1e-14));
  CHECK(d[1] == Catch::Approx(-2.0).epsilon(1e-14));
}

TEST_CASE("LV right-hand side vanishes at the interior equilibrium") {
  const auto lv = SystemParams::lotka_volterra();
  const State d = rhs(lv, State{3.0, 1.5});
  CHECK(d[0] == 0.0);
  CHECK(d[1] == 0.0);
}

TEST_CASE("Lorenz-63 right-hand side at (1,1,1)") {
  const auto lorenz = SystemParams::lorenz63(10.0, 28.0, 8.0 / 3.0);
  const State d = rhs(lorenz, State{1.0, 1.0, 1.0});
  CHECK(d[0] == Catch::Approx(0.0).margin(1e-15));
  CHECK(d[1] == Catch::Approx(26.0).epsilon(1e-14));
  CHECK(d[2] == Catch::Approx(-5.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("FitzHugh-Nagumo right-hand side is the canonical form") {
  const auto fhn = SystemParams::fitzhugh_nagumo(0.7, 0.8, 12.5, 0.5);
  const State d = rhs(fhn, State{0.0, 0.0});
  CHECK(d[0] == Catch::Approx(0.5).epsilon(1e-14));           // I only
  CHECK(d[1] == Catch::Approx(0.7 / 12.5).epsilon(1e-14));    // a / tau
}

TEST_CASE("rhs rejects dimension mismatch") {
  const auto lv = SystemParams::lotka_volterra();
  CHECK_THROWS_AS(rhs(lv, State{1.0, 1.0, 1.0}), ContractViolation);
}

TEST_CASE("LV coefficients must be strictly positive") {
  CHECK_THROWS_AS(SystemParams::lotka_volterra(0.0, 1.0, 3.0, 1.0), ContractViolation);
  CHECK_THROWS_AS(SystemParams::lotka_volterra(1.5, -1.0, 3.0, 1.0), ContractViolation);
}

TEST_CASE("Hamiltonian values") {
  const auto lv = SystemParams::lotka_volterra();
  CHECK(hamiltonian(lv, State{1.0, 1.0}) == Catch::Approx(2.0).epsilon(1e-14));
  CHECK(hamiltonian(lv, State{3.0, 1.5}) == Catch::Approx(0.595965).epsilon(1e-6));
}

TEST_CASE("Hamiltonian rejects non-positive states") {
  const auto lv = SystemParams::lotka_volterra();
  CHECK_THROWS_AS(hamiltonian(lv, State{0.0, 1.0}), DomainError);
  CHECK_THROWS_AS(hamiltonian(lv, State{1.0, -0.5}), DomainError);
}

TEST_CASE("equilibrium formula and symmetric case") {
  const auto lv = SystemParams::lotka_volterra();
  const State eq = equilibrium(lv);
  CHECK(eq[0] == Catch::Approx(3.0).epsilon(1e-15));
  CHECK(eq[1] == Catch::Approx(1.5).epsilon(1e-15));
  const State eq2 = equilibrium(SystemParams::lotka_volterra(2, 2, 2, 2));
  CHECK(eq2[0] == 1.0);
  CHECK(eq2[1] == 1.0);
}

TEST_CASE("rhs at the equilibrium is zero for random positive parameters") {
  Rng rng(2024);
  for (int i = 0; i < 10; ++i) {
    const auto p = SystemParams::lotka_volterra(rng.uniform(0.2, 5), rng.uniform(0.2, 5),
                                                rng.uniform(0.2, 5), rng.uniform(0.2, 5));
    const State d = rhs(p, equilibrium(p));
    CHECK(std::abs(d[0]) < 1e-12);
    CHECK(std::abs(d[1]) < 1e-12);
  }
}

TEST_CASE("gradient of H is orthogonal to the flow at positive states") {
  const auto lv = SystemParams::lotka_volterra();
  Rng rng(7);
  for (int i = 0; i < 25; ++i) {
    const State z{rng.uniform(0.2, 8.0), rng.uniform(0.2, 8.0)};
    const double eps = 1e-6;
    double grad[2];
    for (int d = 0; d < 2; ++d) {
      State zp = z, zm = z;
      zp[d] += eps;
      zm[d] -= eps;
      grad[d] = (hamiltonian(lv, zp) - hamiltonian(lv, zm)) / (2 * eps);
    }
    const State f = rhs(lv, z);
    const double dot = grad[0] * f[0] + grad[1] * f[1];
    const double scale = std::sqrt((grad[0] * grad[0] + grad[1] * grad[1]) *
                                   (f[0] * f[0] + f[1] * f[1]));
    CHECK(std::abs(dot) <= 1e-10 * std::max(scale, 1.0) + 1e-9);
  }
}
