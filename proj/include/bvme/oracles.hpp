#pragma once

// Brute-force and Monte-Carlo reference computations for tests. These use their
// own arithmetic on plain vectors and never call into the tensor engine.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

namespace bvme::oracle {

struct OracleReport {
  double estimate = 0.0;
  double reference = 0.0;
  double abs_error = 0.0;
  double rel_error = 0.0;
  double samples_or_step = 0.0;
};

OracleReport make_report(double estimate, double reference, double samples_or_step);

// KL(N(mu, diag sigma^2) || N(0, sigma0^2 I)) estimated as the sample mean of
// log p(z) - log q(z), z ~ p. Draws come in antithetic pairs (eps, -eps); an odd
// sample count adds one unpaired draw.
double mc_kl_estimate(std::span<const double> mu, std::span<const double> sigma, double sigma0,
                      std::size_t samples, std::mt19937_64& rng);

// Central differences, one coordinate at a time.
std::vector<double> finite_difference_gradients(const std::function<double(std::span<const double>)>& f,
                                                std::span<const double> x, double h = 1e-4);

// Largest |a - b| / (max(|a|, |b|) + floor) over paired entries.
double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-8);

struct GatherGame {
  std::size_t n_agents = 2;
  std::size_t n_actions = 3;
  std::size_t horizon = 3;
  std::size_t target_arm = 0;
  double success_reward = 1.0;
  double gamma = 0.99;
};

struct PolicyValue {
  double optimal_return = 0.0;
  std::vector<std::vector<std::size_t>> joint_actions;  // [horizon][n], open-loop argmax
  std::size_t sequences = 0;
};

// Enumerates every open-loop joint action sequence; ties keep the
// lexicographically smallest sequence.
PolicyValue exhaustive_policy_value(const GatherGame& game);

}  // namespace bvme::oracle
