#include "bvme/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "bvme/errors.hpp"

namespace bvme::oracle {

OracleReport make_report(double estimate, double reference, double samples_or_step) {
  OracleReport r;
  r.estimate = estimate;
  r.reference = reference;
  r.abs_error = std::fabs(estimate - reference);
  r.rel_error = reference != 0.0 ? r.abs_error / std::fabs(reference) : r.abs_error;
  r.samples_or_step = samples_or_step;
  return r;
}

namespace {

double log_normal_density(double z, double mean, double sd) {
  const double u = (z - mean) / sd;
  return -0.5 * std::log(2.0 * std::numbers::pi) - std::log(sd) - 0.5 * u * u;
}

}  // namespace

double mc_kl_estimate(std::span<const double> mu, std::span<const double> sigma, double sigma0,
                      std::size_t samples, std::mt19937_64& rng) {
  if (mu.size() != sigma.size()) throw ContractError("mc_kl_estimate: mu and sigma differ in length");
  if (samples == 0) throw ContractError("mc_kl_estimate: need at least one sample");
  if (!(sigma0 > 0.0)) throw ContractError("mc_kl_estimate: sigma0 must be positive");
  for (double s : sigma)
    if (!(s > 0.0)) throw ContractError("mc_kl_estimate: sigma must be positive");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> eps(mu.size());
  auto log_ratio = [&](double sign) {
    double acc = 0.0;
    for (std::size_t k = 0; k < mu.size(); ++k) {
      const double z = mu[k] + sigma[k] * sign * eps[k];
      acc += log_normal_density(z, mu[k], sigma[k]) - log_normal_density(z, 0.0, sigma0);
    }
    return acc;
  };
  double total = 0.0;
  std::size_t drawn = 0;
  while (drawn < samples) {
    for (double& e : eps) e = normal(rng);
    total += log_ratio(1.0);
    ++drawn;
    if (drawn < samples) {
      total += log_ratio(-1.0);
      ++drawn;
    }
  }
  return total / static_cast<double>(samples);
}

std::vector<double> finite_difference_gradients(const std::function<double(std::span<const double>)>& f,
                                                std::span<const double> x, double h) {
  if (!(h > 0.0)) throw ContractError("finite differences: step must be positive");
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    probe[k] = x[k] + h;
    const double up = f(probe);
    probe[k] = x[k] - h;
    const double down = f(probe);
    probe[k] = x[k];
    if (!std::isfinite(up) || !std::isfinite(down))
      throw ContractError("finite differences: non-finite value at coordinate " + std::to_string(k));
    grad[k] = (up - down) / (2.0 * h);
  }
  return grad;
}

double max_relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw ContractError("max_relative_error: length mismatch");
  double worst = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double denom = std::max(std::fabs(a[k]), std::fabs(b[k])) + floor;
    worst = std::max(worst, std::fabs(a[k] - b[k]) / denom);
  }
  return worst;
}

PolicyValue exhaustive_policy_value(const GatherGame& game) {
  if (game.n_agents == 0 || game.n_actions == 0 || game.horizon == 0)
    throw ContractError("exhaustive_policy_value: empty game");
  const std::size_t digits = game.n_agents * game.horizon;
  double space = 1.0;
  for (std::size_t k = 0; k < digits; ++k) space *= static_cast<double>(game.n_actions);
  if (space > 1e6)
    throw ContractError("exhaustive_policy_value: " + std::to_string(space) + " sequences exceed 1e6");
  const auto total = static_cast<std::size_t>(space);

  // Digit 0 is the most significant, so counting up visits sequences in lexicographic order.
  std::vector<std::size_t> seq(digits, 0), best_seq(digits, 0);
  double best = -INFINITY;
  for (std::size_t count = 0; count < total; ++count) {
    double ret = 0.0, discount = 1.0;
    for (std::size_t t = 0; t < game.horizon; ++t) {
      bool all = true;
      for (std::size_t i = 0; i < game.n_agents; ++i) all = all && seq[t * game.n_agents + i] == game.target_arm;
      if (all) {
        ret += discount * game.success_reward;
        break;
      }
      discount *= game.gamma;
    }
    if (ret > best) {
      best = ret;
      best_seq = seq;
    }
    for (std::size_t d = digits; d-- > 0;) {
      if (++seq[d] < game.n_actions) break;
      seq[d] = 0;
    }
  }
  PolicyValue pv;
  pv.optimal_return = best;
  pv.sequences = total;
  for (std::size_t t = 0; t < game.horizon; ++t)
    pv.joint_actions.emplace_back(best_seq.begin() + static_cast<std::ptrdiff_t>(t * game.n_agents),
                                  best_seq.begin() + static_cast<std::ptrdiff_t>((t + 1) * game.n_agents));
  return pv;
}

}  // namespace bvme::oracle
