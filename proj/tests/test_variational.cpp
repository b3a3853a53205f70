#include <doctest.h>

#include <cmath>
#include <random>

#include "bvme/errors.hpp"
#include "bvme/oracles.hpp"
#include "bvme/variational.hpp"
#include "support.hpp"

using namespace bvme;
using bvme::testing::gradient_error;
using bvme::testing::random_tensor;
using bvme::testing::weighted_sum;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

VariationalHeads constant_heads(std::size_t d, double mu_bias, double logvar_bias) {
  VariationalHeads h;
  h.mu.layers.push_back(Linear{Tensor::zeros({d, d}, true), Tensor::full({d}, mu_bias)});
  h.mu.activations.push_back(Activation::kNone);
  h.log_var.layers.push_back(Linear{Tensor::zeros({d, d}, true), Tensor::full({d}, logvar_bias)});
  h.log_var.activations.push_back(Activation::kNone);
  return h;
}

GaussianPosterior posterior(std::vector<double> mu, std::vector<double> log_var, bool grad = false) {
  const std::size_t d = mu.size();
  return {Tensor({1, d}, std::move(mu), grad), Tensor({1, d}, std::move(log_var), grad), d};
}

}  // namespace

TEST_CASE("message dimension rounding") {
  CHECK(message_dim(0.05, 100) == 5);
  CHECK(message_dim(0.3, 10) == 3);
  CHECK(message_dim(0.05, 10) == 1);   // 0.5 rounds away from zero
  CHECK(message_dim(0.01, 10) == 1);   // floor at one
  CHECK(message_dim(0.25, 10) == 3);   // 2.5 -> 3
  CHECK(message_dim(1.0, 37) == 37);
  CHECK_THROWS_AS(message_dim(0.0, 10), ConfigError);
}

TEST_CASE("encode_posterior: zero heads and clamping") {
  const Tensor m({2, 3}, {1, -2, 3, 4, 5, -6});
  const auto zero = encode_posterior(m, constant_heads(3, 0.0, 0.0));
  CHECK(vals(zero.mu) == std::vector<double>(6, 0.0));
  CHECK(vals(zero.log_var) == std::vector<double>(6, 0.0));
  CHECK(zero.d_msg == 3);

  CHECK(vals(encode_posterior(m, constant_heads(3, 0.0, 7.2)).log_var) == std::vector<double>(6, 3.0));
  CHECK(vals(encode_posterior(m, constant_heads(3, 0.0, -12.0)).log_var) == std::vector<double>(6, -5.0));
  CHECK_THROWS_AS(encode_posterior(Tensor::zeros({2, 4}), constant_heads(3, 0.0, 0.0)), DimensionError);
}

TEST_CASE("encode_posterior clamps every entry for arbitrary heads") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    auto heads = init_heads(4, rng);
    for (auto t : heads.params().tensors())
      for (double& v : t.mutable_values()) v = std::uniform_real_distribution<double>(-10, 10)(rng);
    const auto p = encode_posterior(random_tensor({6, 4}, rng, -5, 5), heads);
    for (double v : p.log_var.values()) {
      CHECK(v >= -5.0);
      CHECK(v <= 3.0);
    }
  }
}

TEST_CASE("encode_posterior gradients reach both heads") {
  std::mt19937_64 rng(2);
  const auto heads = init_heads(3, rng);
  const Tensor m = random_tensor({4, 3}, rng, -1, 1);
  auto params = heads.params().tensors();
  params.push_back(m);
  const std::vector<double> eps{0.1, -0.3, 0.7, 1.2, -0.4, 0.2, 0.5, -1.1, 0.3, 0.9, -0.6, 0.05};
  CHECK(gradient_error(params, [&] { return weighted_sum(sample_message(encode_posterior(m, heads), eps)); }) < 1e-4);
}

TEST_CASE("sample_message: mean mode, fixed noise and Monte-Carlo mean") {
  std::mt19937_64 rng(3);
  const auto p = posterior({0.5, -1.5}, {0.0, 0.0});
  const Tensor mean = sample_message(p, SampleMode::kMean, rng);
  CHECK(vals(mean) == vals(p.mu));
  CHECK(vals(sample_message(p, std::vector<double>{1.0, 1.0})) == std::vector<double>{1.5, -0.5});

  const auto q = posterior({0.7}, {std::log(0.25)});
  const std::size_t draws = 100000;
  double s = 0.0;
  for (std::size_t k = 0; k < draws; ++k) s += sample_message(q, SampleMode::kStochastic, rng).values()[0];
  CHECK(std::fabs(s / draws - 0.7) < 4 * 0.5 / std::sqrt(static_cast<double>(draws)));
}

TEST_CASE("kl_to_prior examples") {
  const BvmePrior p1{1.0};
  CHECK(kl_to_prior(posterior({0.0, 0.0}, {0.0, 0.0}), p1).item() == doctest::Approx(0.0).epsilon(1e-15));
  const BvmePrior p2{0.3};
  CHECK(std::fabs(kl_to_prior(posterior({0.0}, {2 * std::log(0.3)}), p2).item()) < 1e-12);
  CHECK(kl_to_prior(posterior({1.0}, {0.0}), p1).item() == doctest::Approx(0.5).epsilon(1e-15));

  const double worked = kl_to_prior(posterior({5.0}, {0.0}), BvmePrior{0.1}).item();
  CHECK(worked == doctest::Approx(0.5 * (2600.0 - 1.0 + std::log(0.01))).epsilon(1e-14));
  CHECK(std::fabs(worked - 1297.20) < 0.01);
  // the dominant bracket term alone, (1 + 25) / 0.01 - 1
  CHECK(2.0 * worked - std::log(0.01) == doctest::Approx(2599.0).epsilon(1e-14));
}

TEST_CASE("kl_to_prior agrees with the Monte-Carlo oracle") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u_mu(-2, 2), u_sd(0.2, 2), u_s0(0.2, 2);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t d = 1 + trial % 3;
    std::vector<double> mu(d), sd(d), lv(d);
    for (std::size_t k = 0; k < d; ++k) {
      mu[k] = u_mu(rng);
      sd[k] = u_sd(rng);
      lv[k] = 2 * std::log(sd[k]);
    }
    const double s0 = u_s0(rng);
    const double closed = kl_to_prior(posterior(mu, lv), BvmePrior{s0}).item();
    const double mc = oracle::mc_kl_estimate(mu, sd, s0, 200000, rng);
    CHECK(std::fabs(closed - mc) / std::max(closed, 0.1) < 0.02);
  }
}

TEST_CASE("kl_to_prior is non-negative and has gradient mu / sigma0^2") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = GaussianPosterior{random_tensor({3, 2}, rng, -3, 3), random_tensor({3, 2}, rng, -5, 3), 2};
    const double s0 = std::uniform_real_distribution<double>(0.01, 3)(rng);
    for (double v : kl_to_prior(p, BvmePrior{s0}).values()) CHECK(v >= -1e-12);
  }

  for (double s0 : {0.01, 0.3, 1.7}) {
    const auto p = GaussianPosterior{random_tensor({2, 3}, rng, -2, 2), random_tensor({2, 3}, rng, -2, 2), 3};
    zero_grads(std::vector<Tensor>{p.mu});
    backward(sum(kl_to_prior(p, BvmePrior{s0})));
    std::vector<double> analytic;
    for (double m : p.mu.values()) analytic.push_back(m / (s0 * s0));
    const std::vector<double> autodiff(p.mu.grad().begin(), p.mu.grad().end());
    CHECK(oracle::max_relative_error(autodiff, analytic) < 1e-6);
    const Tensor mu = p.mu;
    const double err = gradient_error({mu}, [&] { return sum(kl_to_prior(p, BvmePrior{s0})); });
    CHECK(err < 1e-6);
  }
}

TEST_CASE("kl gradients through log-variance match finite differences") {
  std::mt19937_64 rng(6);
  const auto p = GaussianPosterior{random_tensor({3, 2}, rng, -1, 1), random_tensor({3, 2}, rng, -2, 2), 2};
  CHECK(gradient_error({p.mu, p.log_var}, [&] { return weighted_sum(kl_to_prior(p, BvmePrior{0.5})); }) < 1e-4);
}

TEST_CASE("bvme_penalty normalization and masking") {
  BvmeConfig cfg;
  cfg.lambda_kl = 0.0;
  const Tensor kl = Tensor::full({6}, 2.5);  // 3 slots of 2 agents
  const std::vector<double> full{1, 1, 1};
  CHECK(bvme_penalty(kl, full, 2, 4, cfg).item() == 0.0);

  cfg.lambda_kl = 0.3;
  CHECK(bvme_penalty(kl, full, 2, 4, cfg).item() == doctest::Approx(0.3 * 2.5 / 4).epsilon(1e-15));
  cfg.normalize_by_dim = false;
  CHECK(bvme_penalty(kl, full, 2, 4, cfg).item() == doctest::Approx(0.3 * 2.5).epsilon(1e-15));
  cfg.normalize_by_dim = true;

  std::mt19937_64 rng(7);
  const Tensor many = random_tensor({8}, rng, 0, 5);  // 4 slots of 2 agents
  const Tensor half = slice_rows(many, 0, 4);
  const std::vector<double> mask{1, 1, 0, 0}, half_mask{1, 1};
  CHECK(bvme_penalty(many, mask, 2, 3, cfg).item() ==
        doctest::Approx(bvme_penalty(half, half_mask, 2, 3, cfg).item()).epsilon(1e-14));

  const std::vector<double> none{0, 0, 0};
  CHECK_THROWS_AS(bvme_penalty(kl, none, 2, 4, cfg), ContractError);
}

TEST_CASE("mean mode is deterministic") {
  std::mt19937_64 rng(8), a(1), b(2);
  const auto heads = init_heads(4, rng);
  const Tensor m = random_tensor({5, 4}, rng);
  const Tensor z1 = sample_message(encode_posterior(m, heads), SampleMode::kMean, a);
  const Tensor z2 = sample_message(encode_posterior(m, heads), SampleMode::kMean, b);
  CHECK(vals(z1) == vals(z2));
}
