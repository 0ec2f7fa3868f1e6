#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "odelearn/errors.hpp"

namespace odelearn {

/// Fixed-capacity state vector; dimensions here are 2 (predator-prey,
/// FitzHugh-Nagumo) or 3 (Lorenz). Value semantics, no heap.
class State {
 public:
  State() : n_(0) { v_.fill(0.0); }
  explicit State(int dim) : n_(dim) {
    if (dim < 1 || dim > kMaxDim) throw ContractViolation("state dimension out of range");
    v_.fill(0.0);
  }
  State(std::initializer_list<double> xs) : n_(static_cast<int>(xs.size())) {
    if (n_ < 1 || n_ > kMaxDim) throw ContractViolation("state dimension out of range");
    std::copy(xs.begin(), xs.end(), v_.begin());
  }
  static State from_span(std::span<const double> xs) {
    State s(static_cast<int>(xs.size()));
    std::copy(xs.begin(), xs.end(), s.v_.begin());
    return s;
  }

  int dim() const { return n_; }
  double operator[](int i) const { return v_[static_cast<std::size_t>(i)]; }
  double& operator[](int i) { return v_[static_cast<std::size_t>(i)]; }
  const double* data() const { return v_.data(); }
  double* data() { return v_.data(); }
  std::span<const double> span() const { return {v_.data(), static_cast<std::size_t>(n_)}; }

  bool finite() const {
    for (int i = 0; i < n_; ++i)
      if (!std::isfinite(v_[static_cast<std::size_t>(i)])) return false;
    return true;
  }

  friend bool operator==(const State& a, const State& b) {
    if (a.n_ != b.n_) return false;
    for (int i = 0; i < a.n_; ++i)
      if (a[i] != b[i]) return false;
    return true;
  }

  static constexpr int kMaxDim = 3;

 private:
  std::array<double, kMaxDim> v_;
  int n_;
};

inline double squared_distance(const State& a, const State& b) {
  double s = 0.0;
  for (int i = 0; i < a.dim(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double squared_norm(const State& a) {
  double s = 0.0;
  for (int i = 0; i < a.dim(); ++i) s += a[i] * a[i];
  return s;
}

enum class SystemId { LotkaVolterra, Lorenz63, FitzHughNagumo };

inline const char* to_string(SystemId id) {
  switch (id) {
    case SystemId::LotkaVolterra: return "lotka_volterra";
    case SystemId::Lorenz63: return "lorenz63";
    case SystemId::FitzHughNagumo: return "fitzhugh_nagumo";
  }
  return "unknown";
}

/// Coefficients of one of the built-in analytic systems.
///
/// Lotka-Volterra: prey x, predator y,
///   dx/dt = alpha*x - beta*x*y,  dy/dt = delta*x*y - gamma*y.
/// The default (1.5, 1.0, 3.0, 1.0) gives the coexistence equilibrium
/// (3.0, 1.5); typical orbits through the unit box have period ~5.13
/// (documented reference value, not computed here).
class SystemParams {
 public:
  static SystemParams lotka_volterra(double alpha = 1.5, double beta = 1.0,
                                     double gamma = 3.0, double delta = 1.0) {
    if (!(alpha > 0 && beta > 0 && gamma > 0 && delta > 0))
      throw ContractViolation("Lotka-Volterra coefficients must be strictly positive");
    return SystemParams(SystemId::LotkaVolterra, {alpha, beta, gamma, delta});
  }

  static SystemParams lorenz63(double sigma = 10.0, double rho = 28.0,
                               double beta = 8.0 / 3.0) {
    return SystemParams(SystemId::Lorenz63, {sigma, rho, beta});
  }

  static SystemParams fitzhugh_nagumo(double a = 0.7, double b = 0.8,
                                      double tau = 12.5, double current = 0.5) {
    return SystemParams(SystemId::FitzHughNagumo, {a, b, tau, current});
  }

  SystemId id() const { return id_; }

  int dim() const { return id_ == SystemId::Lorenz63 ? 3 : 2; }

  std::span<const double> coefficients() const { return coeffs_; }

  double coeff(int i) const { return coeffs_[static_cast<std::size_t>(i)]; }

  std::vector<std::string> coefficient_names() const {
    switch (id_) {
      case SystemId::LotkaVolterra: return {"alpha", "beta", "gamma", "delta"};
      case SystemId::Lorenz63: return {"sigma", "rho", "beta"};
      case SystemId::FitzHughNagumo: return {"a", "b", "tau", "current"};
    }
    return {};
  }

 private:
  SystemParams(SystemId id, std::vector<double> coeffs)
      : id_(id), coeffs_(std::move(coeffs)) {}

  SystemId id_;
  std::vector<double> coeffs_;
};

/// Instantaneous derivative of the analytic system at `state`. Pure.
inline State rhs(const SystemParams& params, const State& state) {
  if (state.dim() != params.dim())
    throw ContractViolation("rhs: state dimension does not match system");
  State out(state.dim());
  switch (params.id()) {
    case SystemId::LotkaVolterra: {
      const double alpha = params.coeff(0), beta = params.coeff(1);
      const double gamma = params.coeff(2), delta = params.coeff(3);
      const double x = state[0], y = state[1];
      out[0] = alpha * x - beta * x * y;
      out[1] = delta * x * y - gamma * y;
      break;
    }
    case SystemId::Lorenz63: {
      const double sigma = params.coeff(0), rho = params.coeff(1), beta = params.coeff(2);
      const double x = state[0], y = state[1], z = state[2];
      out[0] = sigma * (y - x);
      out[1] = x * (rho - z) - y;
      out[2] = x * y - beta * z;
      break;
    }
    case SystemId::FitzHughNagumo: {
      const double a = params.coeff(0), b = params.coeff(1);
      const double tau = params.coeff(2), current = params.coeff(3);
      const double v = state[0], w = state[1];
      out[0] = v - v * v * v / 3.0 - w + current;
      out[1] = (v + a - b * w) / tau;
      break;
    }
  }
  return out;
}

/// Conserved quantity of the Lotka-Volterra flow:
///   H(x, y) = delta*x - gamma*ln(x) + beta*y - alpha*ln(y).
/// Defined only for strictly positive states.
inline double hamiltonian(const SystemParams& params, const State& state) {
  if (params.id() != SystemId::LotkaVolterra)
    throw ContractViolation("hamiltonian: only defined for Lotka-Volterra");
  const double x = state[0], y = state[1];
  if (!(x > 0.0 && y > 0.0))
    throw DomainError("hamiltonian: state components must be strictly positive");
  const double alpha = params.coeff(0), beta = params.coeff(1);
  const double gamma = params.coeff(2), delta = params.coeff(3);
  return delta * x - gamma * std::log(x) + beta * y - alpha * std::log(y);
}

/// Interior coexistence equilibrium (gamma/delta, alpha/beta) of LV.
inline State equilibrium(const SystemParams& params) {
  if (params.id() != SystemId::LotkaVolterra)
    throw ContractViolation("equilibrium: only defined for Lotka-Volterra");
  return State{params.coeff(2) / params.coeff(3), params.coeff(0) / params.coeff(1)};
}

/// Adapter exposing an analytic system as a raw-pointer vector field for the
/// integrator: f(y, dy).
class AnalyticField {
 public:
  explicit AnalyticField(SystemParams params) : params_(std::move(params)) {}

  int dim() const { return params_.dim(); }

  void operator()(const double* y, double* dy) const {
    State s = State::from_span({y, static_cast<std::size_t>(dim())});
    State d = rhs(params_, s);
    for (int i = 0; i < d.dim(); ++i) dy[i] = d[i];
  }

  const SystemParams& params() const { return params_; }

 private:
  SystemParams params_;
};

}  // namespace odelearn
