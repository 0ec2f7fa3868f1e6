#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>
#include <limits>

#include "odelearn/net.hpp"
#include "odelearn/rng.hpp"

using namespace odelearn;

TEST_CASE("xavier init is deterministic under the seed") {
  NetSpec spec;
  const ParamVec a = init_xavier(spec, 42);
  const ParamVec b = init_xavier(spec, 42);
  CHECK(a == b);
  const ParamVec c = init_xavier(spec, 43);
  CHECK(a != c);
}

TEST_CASE("parameter count for 2 -> 128x3 -> 2 is 33666") {
  NetSpec spec;
  CHECK(spec.param_count() == 33666);
  const ParamVec p = init_xavier(spec, 0);
  CHECK(p.size() == 33666);
}

TEST_CASE("hidden-block sample std is within 5% of sqrt(2/256)") {
  NetSpec spec;
  const ParamVec p = init_xavier(spec, 11);
  // second layer: 128x128 weights
  const double* w = p.data() + spec.layer_offset(1);
  const int n = 128 * 128;
  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += w[i];
  mean /= n;
  double var = 0.0;
  for (int i = 0; i < n; ++i) var += (w[i] - mean) * (w[i] - mean);
  var /= n;
  const double target = std::sqrt(2.0 / 256.0);
  CHECK(std::sqrt(var) == Catch::Approx(target).epsilon(0.05));
}

TEST_CASE("biases start at zero") {
  NetSpec spec;
  spec.hidden_widths = {8};
  const ParamVec p = init_xavier(spec, 3);
  const double* b0 = p.data() + spec.layer_offset(0) + 2 * 8;
  for (int i = 0; i < 8; ++i) CHECK(b0[i] == 0.0);
}

TEST_CASE("zero parameters map every state to zero under clamp") {
  NetSpec spec;
  spec.hidden_widths = {16, 16};
  ParamVec p(spec.param_count(), 0.0);
  Mlp mlp(spec);
  double out[2];
  const double x[2] = {3.7, -1.9};
  mlp.forward(p, x, out);
  CHECK(out[0] == 0.0);
  CHECK(out[1] == 0.0);
}

TEST_CASE("forward output dimension equals input dimension") {
  NetSpec spec;
  spec.hidden_widths = {16};
  const ParamVec p = init_xavier(spec, 5);
  Mlp mlp(spec);
  double out[2] = {99, 99};
  const double x[2] = {0.5, 0.25};
  mlp.forward(p, x, out);
  CHECK(std::isfinite(out[0]));
  CHECK(std::isfinite(out[1]));
}

TEST_CASE("hand-set net saturates the clamp exactly as clip(r,-20,20)") {
  // one hidden unit, all weights zero: raw output = output bias
  NetSpec spec;
  spec.hidden_widths = {1};
  spec.wrapper = Wrapper::Clamp;
  spec.wrapper_bound = 20.0;
  ParamVec p(spec.param_count(), 0.0);
  double* out_bias = p.data() + spec.layer_offset(1) + 2 * 1;
  out_bias[0] = 25.0;
  out_bias[1] = -3.7;
  Mlp mlp(spec);
  double out[2];
  const double x[2] = {1.0, 1.0};
  long sat = 0;
  mlp.forward(p, x, out, &sat);
  CHECK(out[0] == 20.0);
  CHECK(out[1] == -3.7);
  CHECK(sat == 1);
}

TEST_CASE("wrapper definitions") {
  CHECK(apply_wrapper_scalar(25.0, Wrapper::Clamp, 20.0) == 20.0);
  CHECK(apply_wrapper_scalar(-3.7, Wrapper::Clamp, 20.0) == -3.7);
  CHECK(apply_wrapper_scalar(0.0, Wrapper::TanhBound, 18.0) == 0.0);
  CHECK(apply_wrapper_scalar(0.0, Wrapper::Squared, 20.0) == 0.0);
  CHECK(apply_wrapper_scalar(1.23, Wrapper::None, 20.0) == 1.23);
  CHECK(apply_wrapper_scalar(-2.0, Wrapper::Squared, 20.0) == -4.0);
}

TEST_CASE("tanh-bound output stays inside the bound") {
  NetSpec spec;
  spec.hidden_widths = {8};
  spec.wrapper = Wrapper::TanhBound;
  spec.wrapper_bound = 18.0;
  Rng rng(9);
  ParamVec p = init_xavier(spec, 9);
  for (double& v : p) v *= 50.0;  // exaggerate weights
  Mlp mlp(spec);
  for (int i = 0; i < 50; ++i) {
    const double x[2] = {rng.uniform(-100, 100), rng.uniform(-100, 100)};
    double out[2];
    mlp.forward(p, x, out);
    CHECK(std::abs(out[0]) <= 18.0);
    CHECK(std::abs(out[1]) <= 18.0);
  }
}

TEST_CASE("param_l1 basics") {
  CHECK(param_l1(ParamVec{}) == 0.0);
  CHECK(param_l1(ParamVec{0.0, 0.0}) == 0.0);
  CHECK(param_l1(ParamVec{1.0, -2.0, 3.0}) == 6.0);
  ParamVec p{0.5, -1.5, 2.0};
  const double base = param_l1(p);
  for (double& v : p) v *= 3.0;
  CHECK(param_l1(p) == Catch::Approx(3.0 * base).epsilon(1e-15));
}

TEST_CASE("clamp and none agree on outputs and gradients inside the bound") {
  NetSpec clamp_spec;
  clamp_spec.hidden_widths = {16, 16};
  clamp_spec.wrapper = Wrapper::Clamp;
  NetSpec none_spec = clamp_spec;
  none_spec.wrapper = Wrapper::None;

  const ParamVec p = init_xavier(clamp_spec, 21);  // small outputs, far from +-20
  Mlp mc(clamp_spec), mn(none_spec);
  std::vector<double> rec_c(clamp_spec.record_size()), rec_n(none_spec.record_size());
  Rng rng(13);
  for (int i = 0; i < 20; ++i) {
    const double x[2] = {rng.uniform(-5, 5), rng.uniform(-5, 5)};
    double oc[2], on[2];
    long sat = 0;
    mc.forward_record(p, x, oc, rec_c.data(), &sat);
    mn.forward_record(p, x, on, rec_n.data());
    REQUIRE(sat == 0);
    CHECK(oc[0] == on[0]);
    CHECK(oc[1] == on[1]);

    const double adj[2] = {1.0, -2.0};
    std::vector<double> gc(p.size(), 0.0), gn(p.size(), 0.0);
    double xc[2] = {0, 0}, xn[2] = {0, 0};
    mc.vjp(p, rec_c.data(), adj, gc.data(), xc);
    mn.vjp(p, rec_n.data(), adj, gn.data(), xn);
    CHECK(gc == gn);
    CHECK(xc[0] == xn[0]);
    CHECK(xc[1] == xn[1]);
  }
}

TEST_CASE("non-finite input is a contract violation") {
  NetSpec spec;
  spec.hidden_widths = {4};
  const ParamVec p = init_xavier(spec, 1);
  Mlp mlp(spec);
  double out[2];
  const double x[2] = {std::numeric_limits<double>::quiet_NaN(), 0.0};
  CHECK_THROWS_AS(mlp.forward(p, x, out), ContractViolation);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  NetSpec spec;
  spec.hidden_widths = {8, 4};
  Checkpoint ck;
  ck.spec = spec;
  ck.params = init_xavier(spec, 77);
  ck.params[3] = 1.0 / 3.0;
  ck.params[5] = -1e-300;
  ck.seed = 77;
  ck.epoch = 123;
  ck.val_mse = 0.062345918273645917;
  const auto text = checkpoint_to_string(ck);
  const Checkpoint back = checkpoint_from_string(text);
  CHECK(back.spec == ck.spec);
  CHECK(back.params == ck.params);
  CHECK(back.seed == ck.seed);
  CHECK(back.epoch == ck.epoch);
  CHECK(back.val_mse == ck.val_mse);
  // and the re-serialization is byte-identical
  CHECK(checkpoint_to_string(back) == text);
}

TEST_CASE("batched forward matches per-state forward") {
  NetSpec spec;
  spec.hidden_widths = {16, 16};
  const ParamVec p = init_xavier(spec, 31);
  Mlp mlp(spec);
  MlpBatch batch(spec);
  Rng rng(5);
  const int n = 37;
  Eigen::MatrixXd X(2, n), Y;
  for (int c = 0; c < n; ++c) {
    X(0, c) = rng.uniform(-3, 3);
    X(1, c) = rng.uniform(-3, 3);
  }
  batch.forward(p, X, Y);
  for (int c = 0; c < n; ++c) {
    const double x[2] = {X(0, c), X(1, c)};
    double out[2];
    mlp.forward(p, x, out);
    CHECK(Y(0, c) == Catch::Approx(out[0]).epsilon(1e-13).margin(1e-13));
    CHECK(Y(1, c) == Catch::Approx(out[1]).epsilon(1e-13).margin(1e-13));
  }
}
