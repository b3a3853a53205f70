#include "bvme/variational.hpp"

#include <cmath>

#include "bvme/errors.hpp"

namespace bvme {

std::size_t message_dim(double ratio, std::size_t obs_dim) {
  if (!(ratio > 0.0)) throw ConfigError("message_dim: compression ratio must be positive");
  const long rounded = std::lround(ratio * static_cast<double>(obs_dim));
  return rounded < 1 ? 1 : static_cast<std::size_t>(rounded);
}

ParamSet VariationalHeads::params() const {
  ParamSet p;
  p.append("mu.", mu.params());
  p.append("log_var.", log_var.params());
  return p;
}

VariationalHeads init_heads(std::size_t d_msg, std::mt19937_64& rng) {
  const LayerSpec layer{d_msg, d_msg, Activation::kNone};
  VariationalHeads h;
  h.mu = init_mlp(std::span(&layer, 1), rng);
  h.log_var = init_mlp(std::span(&layer, 1), rng);
  return h;
}

GaussianPosterior encode_posterior(const Tensor& messages, const VariationalHeads& heads,
                                   double logvar_min, double logvar_max) {
  const std::size_t d = heads.dim();
  if (messages.rank() != 2 || messages.dim(1) != d)
    throw DimensionError("encode_posterior: messages " + shape_str(messages.shape()) +
                         " for message dim " + std::to_string(d));
  GaussianPosterior p;
  p.mu = mlp_forward(heads.mu, messages);
  p.log_var = clamp(mlp_forward(heads.log_var, messages), logvar_min, logvar_max);
  p.d_msg = d;
  return p;
}

Tensor sample_message(const GaussianPosterior& p, std::span<const double> noise) {
  if (noise.size() != p.mu.numel())
    throw DimensionError("sample_message: noise of " + std::to_string(noise.size()) + " for " +
                         shape_str(p.mu.shape()));
  const Tensor eps(p.mu.shape(), std::vector<double>(noise.begin(), noise.end()));
  return add(p.mu, mul(exp(scale(p.log_var, 0.5)), eps));
}

Tensor sample_message(const GaussianPosterior& p, SampleMode mode, std::mt19937_64& rng) {
  if (mode == SampleMode::kMean) return p.mu;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> noise(p.mu.numel());
  for (double& e : noise) e = normal(rng);
  return sample_message(p, noise);
}

Tensor kl_to_prior(const GaussianPosterior& p, const BvmePrior& prior) {
  if (!(prior.sigma0 > 0.0)) throw ConfigError("kl_to_prior: sigma0 must be positive");
  const double s0sq = prior.sigma0 * prior.sigma0;
  // (sigma^2 + mu^2) / sigma0^2 - 1 + log sigma0^2 - log sigma^2
  const Tensor ratio = scale(add(exp(p.log_var), square(p.mu)), 1.0 / s0sq);
  const Tensor terms = sub(add_scalar(ratio, std::log(s0sq) - 1.0), p.log_var);
  return scale(sum_last(terms), 0.5);
}

Tensor bvme_penalty(const Tensor& kl, std::span<const double> step_mask, std::size_t n_agents,
                    std::size_t d_msg, const BvmeConfig& cfg) {
  if (n_agents == 0 || kl.rank() != 1 || kl.dim(0) != step_mask.size() * n_agents)
    throw DimensionError("bvme_penalty: " + std::to_string(kl.numel()) + " KL rows for " +
                         std::to_string(step_mask.size()) + " steps of " + std::to_string(n_agents) +
                         " agents");
  double valid = 0.0;
  for (double m : step_mask) valid += m;
  if (!(valid > 0.0)) throw ContractError("bvme_penalty: no valid timesteps (T_B = 0)");

  std::vector<double> row_mask(kl.numel());
  for (std::size_t r = 0; r < row_mask.size(); ++r) row_mask[r] = step_mask[r / n_agents];
  double denom = static_cast<double>(n_agents) * valid;
  if (cfg.normalize_by_dim) denom *= static_cast<double>(d_msg);
  return scale(sum(mul(kl, Tensor(kl.shape(), std::move(row_mask)))), cfg.lambda_kl / denom);
}

}  // namespace bvme
