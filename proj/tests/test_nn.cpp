#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "bvme/errors.hpp"
#include "bvme/nn.hpp"
#include "support.hpp"

using namespace bvme;
using bvme::testing::gradient_error;
using bvme::testing::random_tensor;
using bvme::testing::weighted_sum;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

MlpParams single_layer(Tensor w, Tensor b, Activation act) {
  MlpParams p;
  p.layers.push_back(Linear{std::move(w), std::move(b)});
  p.activations.push_back(act);
  return p;
}

GruParams zero_gru(std::size_t in, std::size_t h) {
  GruParams p;
  p.input = Linear{Tensor::zeros({in, 3 * h}, true), Tensor::zeros({3 * h}, true)};
  p.hidden = Linear{Tensor::zeros({h, 3 * h}, true), Tensor::zeros({3 * h}, true)};
  p.hidden_size = h;
  return p;
}

ParamSet scalar_param(double value) {
  ParamSet ps;
  ps.add("w", Tensor({1}, {value}, true));
  return ps;
}

}  // namespace

TEST_CASE("mlp_forward: zero, identity and single-layer examples") {
  const Tensor x({2, 3}, {1, -2, 3, 0.5, 4, -6});
  const auto zero = single_layer(Tensor::zeros({3, 4}), Tensor::zeros({4}), Activation::kRelu);
  CHECK(vals(mlp_forward(zero, x)) == std::vector<double>(8, 0.0));

  const auto ident =
      single_layer(Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), Tensor::zeros({3}), Activation::kNone);
  CHECK(vals(mlp_forward(ident, x)) == vals(x));

  const auto one = single_layer(Tensor({2, 1}, {1, 1}), Tensor({1}, {0.5}), Activation::kRelu);
  CHECK(vals(mlp_forward(one, Tensor({1, 2}, {1, -3}))) == std::vector<double>{0.0});
}

TEST_CASE("mlp_forward rejects a mismatched input width") {
  std::mt19937_64 rng(1);
  const std::vector<LayerSpec> spec{{4, 8, Activation::kRelu}, {8, 2, Activation::kNone}};
  const auto p = init_mlp(spec, rng);
  CHECK_THROWS_AS(mlp_forward(p, Tensor::zeros({3, 5})), DimensionError);
  const std::vector<LayerSpec> broken{{4, 8, Activation::kRelu}, {7, 2, Activation::kNone}};
  CHECK_THROWS_AS(init_mlp(broken, rng), ConfigError);
}

TEST_CASE("mlp gradients match finite differences") {
  std::mt19937_64 rng(2);
  const std::vector<LayerSpec> spec{{5, 7, Activation::kTanh}, {7, 3, Activation::kSigmoid}};
  const auto p = init_mlp(spec, rng);
  const Tensor x = random_tensor({4, 5}, rng);
  CHECK(gradient_error(p.params().tensors(), [&] { return weighted_sum(mlp_forward(p, x)); }) < 1e-4);
}

TEST_CASE("gru_step with zero weights halves the previous state") {
  const auto p = zero_gru(3, 4);
  const Tensor x({2, 3}, {1, 2, 3, -1, -2, -3});
  const Tensor h({2, 4}, {0.2, -0.4, 0.6, -0.8, 1, 0, -1, 0.5});
  const auto out = vals(gru_step(p, x, h));
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(0.5 * h.values()[i]).epsilon(1e-15));
  CHECK(vals(gru_step(p, x, Tensor::zeros({2, 4}))) == std::vector<double>(8, 0.0));
}

TEST_CASE("gru_step rejects mismatched shapes") {
  std::mt19937_64 rng(3);
  const auto p = init_gru(3, 4, rng);
  CHECK_THROWS_AS(gru_step(p, Tensor::zeros({2, 5}), Tensor::zeros({2, 4})), DimensionError);
  CHECK_THROWS_AS(gru_step(p, Tensor::zeros({2, 3}), Tensor::zeros({2, 6})), DimensionError);
  CHECK_THROWS_AS(gru_step(p, Tensor::zeros({2, 3}), Tensor::zeros({3, 4})), DimensionError);
}

TEST_CASE("gru_step gradients match finite differences") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = init_gru(3, 5, rng);
    for (auto t : p.params().tensors())
      for (double& v : t.mutable_values()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
    const Tensor x = random_tensor({2, 3}, rng);
    const Tensor h = random_tensor({2, 5}, rng, -0.9, 0.9);
    std::vector<Tensor> params = p.params().tensors();
    params.push_back(h);
    CHECK(gradient_error(params, [&] { return sum(gru_step(p, x, h)); }) < 1e-4);
  }
}

// Pre-activations stay small enough that tanh and sigmoid do not round to +-1 or 0/1.
TEST_CASE("gru output stays inside (-1, 1) when the previous state does") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = init_gru(4, 6, rng);
    for (auto t : p.params().tensors())
      for (double& v : t.mutable_values()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
    const Tensor x = random_tensor({3, 4}, rng, -2, 2, false);
    const Tensor h = random_tensor({3, 6}, rng, -0.999, 0.999, false);
    for (double v : gru_step(p, x, h).values()) {
      CHECK(v > -1.0);
      CHECK(v < 1.0);
    }
  }
}

TEST_CASE("initialization is reproducible, scaled by fan-in and has zero biases") {
  const std::vector<LayerSpec> spec{{6, 8, Activation::kRelu}, {8, 3, Activation::kNone}};
  const auto a = init_mlp(spec, 17);
  const auto b = init_mlp(spec, 17);
  const auto c = init_mlp(spec, 18);
  CHECK(bvme::testing::flat_values(a.params().tensors()) == bvme::testing::flat_values(b.params().tensors()));
  CHECK(bvme::testing::flat_values(a.params().tensors()) != bvme::testing::flat_values(c.params().tensors()));
  for (const auto& l : a.layers)
    for (double v : l.bias.values()) CHECK(v == 0.0);

  std::mt19937_64 rng(6);
  const Linear big = init_linear(10000, 20, rng);
  double s = 0, s2 = 0;
  for (double v : big.weight.values()) {
    s += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(big.weight.numel());
  const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
  CHECK(std::fabs(sd - 0.01) < 0.001);
}

TEST_CASE("gradient clipping rescales a norm-20 gradient to exactly 10") {
  ParamSet ps;
  ps.add("a", Tensor({2}, {0, 0}, true));
  ps.add("b", Tensor({1}, {0}, true));
  zero_grads(ps.tensors());
  ps.tensors()[0].mutable_grad()[0] = 12.0;
  ps.tensors()[0].mutable_grad()[1] = 0.0;
  ps.tensors()[1].mutable_grad()[0] = 16.0;
  const auto report = clip_grad_norm(ps, 10.0);
  CHECK(report.norm_before == doctest::Approx(20.0).epsilon(1e-15));
  CHECK(std::fabs(global_grad_norm(ps) - 10.0) < 1e-12);
  CHECK(report.norm_after == doctest::Approx(10.0).epsilon(1e-15));
}

TEST_CASE("rmsprop first step follows the update rule") {
  const ParamSet ps = scalar_param(0.0);
  auto state = make_optimizer(ps, RmsPropConfig{});
  zero_grads(ps.tensors());
  ps.tensors()[0].mutable_grad()[0] = 1.0;
  rmsprop_update(state, ps);
  CHECK(state.square_avg[0][0] == doctest::Approx(0.01).epsilon(1e-14));
  const double expected = -5e-4 * 1.0 / (std::sqrt(0.01) + 1e-5);
  CHECK(ps.tensors()[0].values()[0] == doctest::Approx(expected).epsilon(1e-14));
  CHECK(std::fabs(ps.tensors()[0].values()[0] + 5e-3) < 1e-6);
  CHECK(state.steps == 1);
}

TEST_CASE("rmsprop leaves parameters unchanged for zero gradients") {
  std::mt19937_64 rng(7);
  const auto p = init_mlp(std::vector<LayerSpec>{{3, 4, Activation::kRelu}}, rng);
  const ParamSet ps = p.params();
  const auto before = bvme::testing::flat_values(ps.tensors());
  auto state = make_optimizer(ps, RmsPropConfig{});
  zero_grads(ps.tensors());
  rmsprop_update(state, ps);
  CHECK(bvme::testing::flat_values(ps.tensors()) == before);
}

TEST_CASE("rmsprop rejects missing gradients and mismatched state") {
  ParamSet ps;
  ps.add("w", Tensor({2}, {1, 2}, false));  // never receives a gradient buffer
  auto state = make_optimizer(ps, RmsPropConfig{});
  CHECK_THROWS_AS(rmsprop_update(state, ps), ContractError);

  ParamSet other;
  other.add("v", Tensor({2}, {1, 2}, true));
  zero_grads(other.tensors());
  CHECK_THROWS_AS(rmsprop_update(state, other), ContractError);
  CHECK_THROWS_AS(ps.add("w", Tensor({1}, {0}, true)), ContractError);
}

TEST_CASE("clipped norm and running averages stay in range over random steps") {
  std::mt19937_64 rng(8);
  const auto p = init_mlp(std::vector<LayerSpec>{{4, 6, Activation::kTanh}, {6, 2, Activation::kNone}}, rng);
  const ParamSet ps = p.params();
  auto state = make_optimizer(ps, RmsPropConfig{});
  std::uniform_real_distribution<double> magnitude(0.01, 1000.0);
  for (int step = 0; step < 200; ++step) {
    const Tensor x = random_tensor({5, 4}, rng, -1, 1, false);
    zero_grads(ps.tensors());
    backward(scale(weighted_sum(mlp_forward(p, x), step), magnitude(rng)));
    const auto report = rmsprop_update(state, ps);
    CHECK(report.norm_after <= 10.0 + 1e-12);
    CHECK(global_grad_norm(ps) <= 10.0 + 1e-12);
    for (const auto& v : state.square_avg)
      for (double x2 : v) CHECK(x2 >= 0.0);
  }
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  std::mt19937_64 rng(9);
  const std::vector<LayerSpec> spec{{3, 5, Activation::kRelu}, {5, 2, Activation::kNone}};
  const auto a = init_mlp(spec, rng);
  for (auto t : a.params().tensors())
    for (double& v : t.mutable_values()) v = std::uniform_real_distribution<double>(-1, 1)(rng) / 3.0;
  const auto b = init_mlp(spec, rng);
  const auto path = std::filesystem::temp_directory_path() / "bvme_test_nn_ckpt.json";
  save_checkpoint(a.params(), path);
  load_checkpoint(b.params(), path);
  std::filesystem::remove(path);
  CHECK(bvme::testing::flat_values(a.params().tensors()) == bvme::testing::flat_values(b.params().tensors()));
  CHECK(checkpoint_to_string(a.params()) == checkpoint_to_string(b.params()));

  const auto wrong = init_mlp(std::vector<LayerSpec>{{3, 4, Activation::kRelu}, {4, 2, Activation::kNone}}, rng);
  CHECK_THROWS_AS(checkpoint_from_string(wrong.params(), checkpoint_to_string(a.params())), DimensionError);
  CHECK_THROWS_AS(checkpoint_from_string(a.params(), "{\"format\":\"other\"}"), ConfigError);
}
