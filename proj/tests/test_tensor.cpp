#include <doctest.h>

#include <cmath>

#include "bvme/errors.hpp"
#include "bvme/nn.hpp"
#include "bvme/tensor.hpp"
#include "support.hpp"

using namespace bvme;
using bvme::testing::gradient_error;
using bvme::testing::random_tensor;
using bvme::testing::weighted_sum;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

// Entries at least `gap` away from every point in `kinks`.
Tensor away_from(Shape shape, std::mt19937_64& rng, std::vector<double> kinks, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel_of(shape));
  for (double& x : v) {
    bool near = true;
    while (near) {
      x = u(rng);
      near = false;
      for (double k : kinks) near = near || std::fabs(x - k) < 1e-2;
    }
  }
  return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace

TEST_CASE("matmul, relu and clamp forward values") {
  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor b({2, 1}, {1, 1});
  CHECK(vals(matmul(a, b)) == std::vector<double>{3, 7});
  CHECK(vals(relu(Tensor({3}, {-1, 0, 2}))) == std::vector<double>{0, 0, 2});
  CHECK(vals(clamp(Tensor({3}, {-9, 0, 9}), -5, 3)) == std::vector<double>{-5, 0, 3});
}

TEST_CASE("apply dispatches by operation kind") {
  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor b({2, 1}, {1, 1});
  const std::vector<Tensor> ab{a, b};
  CHECK(vals(bvme::apply(OpKind::kMatMul, ab)) == std::vector<double>{3, 7});
  const std::vector<Tensor> one{Tensor({3}, {-9, 0, 9})};
  CHECK(vals(bvme::apply(OpKind::kClamp, one, {.lo = -5, .hi = 3})) == std::vector<double>{-5, 0, 3});
  CHECK(vals(bvme::apply(OpKind::kSlice, std::vector<Tensor>{a}, {.start = 1, .length = 1})) == std::vector<double>{2, 4});
  CHECK(bvme::apply(OpKind::kSum, std::vector<Tensor>{a}).item() == 10.0);
  CHECK(bvme::apply(OpKind::kMean, std::vector<Tensor>{a}).item() == 2.5);
  CHECK_THROWS_AS(bvme::apply(OpKind::kAdd, one), ContractError);
}

TEST_CASE("shape and domain errors") {
  const Tensor a({2, 3}, std::vector<double>(6, 1.0));
  CHECK_THROWS_AS(matmul(a, a), DimensionError);
  CHECK_THROWS_AS(add(a, Tensor({2}, {1, 2})), DimensionError);
  CHECK_THROWS_AS(log(Tensor({2}, {1.0, 0.0})), DomainError);
  CHECK_THROWS_AS(log(Tensor({1}, {-1.0})), DomainError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), DimensionError);
  try {
    matmul(a, a);
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
}

TEST_CASE("backward of simple expressions") {
  Tensor x({3}, {1, 2, 3}, true);
  backward(sum(mul(x, x)));
  CHECK(vals(Tensor({3}, std::vector<double>(x.grad().begin(), x.grad().end()))) == std::vector<double>{2, 4, 6});

  Tensor s({1}, {0.0}, true);
  backward(sum(sigmoid(s)));
  CHECK(s.grad()[0] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("backward on a non-scalar loss is a contract error") {
  Tensor x({3}, {1, 2, 3}, true);
  CHECK_THROWS_AS(backward(mul(x, x)), ContractError);
  CHECK_THROWS_AS(backward(Tensor::scalar(1.0)), ContractError);
}

TEST_CASE("clamp gradient is one inside the bounds and zero outside") {
  Tensor x({4}, {-9, -5, 0, 9}, true);
  backward(sum(clamp(x, -5, 3)));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{0, 1, 1, 0});
}

TEST_CASE("zero_grads resets accumulated gradients") {
  Tensor x({2}, {1, 2}, true);
  Tensor w({2}, {3, 4}, true);
  backward(sum(mul(x, w)));
  const std::vector<Tensor> params{x, w};
  zero_grads(params);
  for (const auto& p : params)
    for (double g : p.grad()) CHECK(g == 0.0);
  zero_grads(std::span<const Tensor>{});
}

TEST_CASE("two backward passes without zeroing double a linear gradient") {
  Tensor x({3}, {0.5, -1.0, 2.0}, true);
  const Tensor c({3}, {1.5, 2.5, -3.0});
  const Tensor loss = sum(mul(x, c));
  backward(loss);
  const std::vector<double> once(x.grad().begin(), x.grad().end());
  backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(x.grad()[i] == 2.0 * once[i]);
}

TEST_CASE("a value used on two paths receives both path gradients") {
  Tensor x1({3}, {0.3, -0.7, 1.1}, true);
  Tensor x2({3}, {0.3, -0.7, 1.1}, true);
  backward(weighted_sum(tanh(add(x1, x1))));
  backward(weighted_sum(tanh(scale(x2, 2.0))));
  for (std::size_t i = 0; i < 3; ++i) CHECK(x1.grad()[i] == doctest::Approx(x2.grad()[i]).epsilon(1e-14));
}

TEST_CASE("identical inputs give bit-identical outputs and gradients") {
  auto run = [] {
    std::mt19937_64 rng(5);
    Tensor w = random_tensor({4, 3}, rng);
    Tensor x = random_tensor({5, 4}, rng);
    const Tensor y = sum(tanh(matmul(x, w)));
    backward(y);
    auto out = vals(y);
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("no-grad mode builds no graph") {
  Tensor x({2}, {1, 2}, true);
  NoGradGuard guard;
  const Tensor y = sum(mul(x, x));
  CHECK_FALSE(y.requires_grad());
  CHECK_FALSE(grad_mode_enabled());
}

TEST_CASE("random 3-layer MLP loss matches finite differences") {
  std::mt19937_64 rng(11);
  const std::vector<LayerSpec> layers{{5, 8, Activation::kTanh}, {8, 6, Activation::kRelu}, {6, 3, Activation::kNone}};
  const MlpParams mlp = init_mlp(layers, rng);
  const Tensor x = random_tensor({4, 5}, rng, -1, 1, false);
  const double err = gradient_error(mlp.params().tensors(), [&] { return weighted_sum(mlp_forward(mlp, x)); });
  CHECK(err < 1e-4);
}

TEST_CASE("every differentiable primitive agrees with central differences at 100 random points") {
  struct Case {
    const char* name;
    std::function<std::vector<Tensor>(std::mt19937_64&)> inputs;
    std::function<Tensor(const std::vector<Tensor>&)> f;
  };
  const std::vector<std::size_t> gather_idx{2, 0, 1};
  const std::vector<double> softmax_mask{1, 1, 0, 1, 1, 1, 1, 0, 1};
  auto r = [](Shape s) { return [s](std::mt19937_64& g) { return std::vector<Tensor>{random_tensor(s, g, -2, 2)}; }; };
  auto r2 = [](Shape s1, Shape s2) {
    return [s1, s2](std::mt19937_64& g) { return std::vector<Tensor>{random_tensor(s1, g, -2, 2), random_tensor(s2, g, -2, 2)}; };
  };
  const std::vector<Case> cases{
      {"matmul", r2({3, 4}, {4, 2}), [](auto& in) { return matmul(in[0], in[1]); }},
      {"bmm", r2({2, 3, 4}, {2, 4, 2}), [](auto& in) { return bmm(in[0], in[1]); }},
      {"transpose", r({2, 3, 4}), [](auto& in) { return transpose(in[0]); }},
      {"add", r2({3, 4}, {3, 4}), [](auto& in) { return add(in[0], in[1]); }},
      {"add_bias", r2({3, 4}, {4}), [](auto& in) { return add(in[0], in[1]); }},
      {"sub", r2({3, 4}, {3, 4}), [](auto& in) { return sub(in[0], in[1]); }},
      {"mul", r2({3, 4}, {3, 4}), [](auto& in) { return mul(in[0], in[1]); }},
      {"mul_scalar", r2({3, 4}, {1}), [](auto& in) { return mul_scalar(in[0], in[1]); }},
      {"scale", r({3, 4}), [](auto& in) { return scale(in[0], -1.7); }},
      {"add_scalar", r({3, 4}), [](auto& in) { return add_scalar(in[0], 0.3); }},
      {"relu", [](auto& g) { return std::vector<Tensor>{away_from({3, 4}, g, {0.0})}; },
       [](auto& in) { return relu(in[0]); }},
      {"tanh", r({3, 4}), [](auto& in) { return tanh(in[0]); }},
      {"sigmoid", r({3, 4}), [](auto& in) { return sigmoid(in[0]); }},
      {"exp", r({3, 4}), [](auto& in) { return exp(in[0]); }},
      {"log", [](auto& g) { return std::vector<Tensor>{random_tensor({3, 4}, g, 0.2, 3.0)}; },
       [](auto& in) { return log(in[0]); }},
      {"clamp", [](auto& g) { return std::vector<Tensor>{away_from({3, 4}, g, {-1.0, 0.5})}; },
       [](auto& in) { return clamp(in[0], -1.0, 0.5); }},
      {"square", r({3, 4}), [](auto& in) { return square(in[0]); }},
      {"abs", [](auto& g) { return std::vector<Tensor>{away_from({3, 4}, g, {0.0})}; },
       [](auto& in) { return abs(in[0]); }},
      {"elu", [](auto& g) { return std::vector<Tensor>{away_from({3, 4}, g, {0.0})}; },
       [](auto& in) { return elu(in[0]); }},
      {"sum", r({3, 4}), [](auto& in) { return scale(sum(in[0]), 1.0); }},
      {"mean", r({3, 4}), [](auto& in) { return scale(mean(in[0]), 1.0); }},
      {"sum_last", r({3, 4}), [](auto& in) { return sum_last(in[0]); }},
      {"max_last", r({3, 4}), [](auto& in) { return max_last(in[0]); }},
      {"concat_last", r2({3, 2}, {3, 4}), [](auto& in) { return concat_last({in[0], in[1]}); }},
      {"concat_rows", r2({2, 3}, {4, 3}), [](auto& in) { return concat_rows({in[0], in[1]}); }},
      {"slice_last", r({3, 5}), [](auto& in) { return slice_last(in[0], 1, 3); }},
      {"slice_rows", r({5, 3}), [](auto& in) { return slice_rows(in[0], 1, 3); }},
      {"reshape", r({3, 4}), [](auto& in) { return reshape(in[0], {2, 6}); }},
      {"gather_last", r({3, 4}), [&](auto& in) { return gather_last(in[0], gather_idx); }},
      {"masked_softmax", r({3, 3}), [&](auto& in) { return masked_softmax(in[0], softmax_mask); }},
      {"row_normalize", [](auto& g) { return std::vector<Tensor>{random_tensor({3, 4}, g, 0.2, 2.0)}; },
       [](auto& in) { return row_normalize(in[0]); }},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    std::mt19937_64 rng(1234);
    double worst = 0.0;
    for (int point = 0; point < 100; ++point) {
      const auto in = c.inputs(rng);
      worst = std::max(worst, gradient_error(in, [&] { return weighted_sum(c.f(in), 7 + point); }));
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("max_last sends the gradient to the first maximum") {
  Tensor x({1, 3}, {2.0, 5.0, 5.0}, true);
  backward(sum(max_last(x)));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{0, 1, 0});
}

TEST_CASE("masked softmax rows sum to one and ignore masked entries") {
  const Tensor s({2, 3}, {0.1, 2.0, -1.0, 3.0, 3.0, 3.0});
  const std::vector<double> mask{1, 0, 1, 1, 1, 1};
  const Tensor out = masked_softmax(s, mask);
  const auto p = out.values();
  CHECK(p[1] == 0.0);
  CHECK(p[0] + p[2] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(p[3] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("row_normalize rejects a non-positive row") {
  CHECK_THROWS_AS(row_normalize(Tensor({2, 2}, {1, 1, 0, 0})), DomainError);
}
