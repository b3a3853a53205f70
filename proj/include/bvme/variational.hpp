#pragma once

// Variational message encoding: Gaussian posterior heads over final-layer
// graph messages, reparameterized sampling, closed-form KL to a zero-mean
// isotropic prior, and the masked, normalized bandwidth penalty.

#include <cstddef>
#include <random>
#include <span>

#include "bvme/nn.hpp"
#include "bvme/tensor.hpp"

namespace bvme {

enum class Coupling { kOnPath, kOffPath };
enum class SampleMode { kStochastic, kMean };

struct BvmePrior {
  double sigma0 = 0.01;
};

struct BvmeConfig {
  double lambda_kl = 1.0;
  double sigma0 = 0.01;
  Coupling coupling = Coupling::kOnPath;
  SampleMode sample_mode = SampleMode::kStochastic;
  bool normalize_by_dim = true;
  double logvar_min = -5.0;
  double logvar_max = 3.0;

  BvmePrior prior() const { return {sigma0}; }
};

// d_msg = max(1, round(r * d_obs)), halves rounded away from zero.
std::size_t message_dim(double ratio, std::size_t obs_dim);

struct VariationalHeads {
  MlpParams mu;       // single layer d_msg -> d_msg
  MlpParams log_var;  // single layer d_msg -> d_msg

  std::size_t dim() const { return mu.layers.at(0).out_dim(); }
  ParamSet params() const;
};

VariationalHeads init_heads(std::size_t d_msg, std::mt19937_64& rng);

struct GaussianPosterior {
  Tensor mu;       // [rows, d_msg]
  Tensor log_var;  // [rows, d_msg], clamped
  std::size_t d_msg = 0;
};

GaussianPosterior encode_posterior(const Tensor& messages, const VariationalHeads& heads,
                                   double logvar_min = -5.0, double logvar_max = 3.0);

// Stochastic: z = mu + exp(log_var / 2) * eps; mean: z = mu.
Tensor sample_message(const GaussianPosterior& p, SampleMode mode, std::mt19937_64& rng);
Tensor sample_message(const GaussianPosterior& p, std::span<const double> noise);

// Per-row KL(N(mu, diag sigma^2) || N(0, sigma0^2 I)), summed over message dims. Shape [rows].
Tensor kl_to_prior(const GaussianPosterior& p, const BvmePrior& prior);

// lambda / (n * T_B [* d_msg]) * sum_t m_t sum_i KL_{t,i}.
// kl rows are grouped per valid-step slot: row r belongs to slot r / n_agents.
Tensor bvme_penalty(const Tensor& kl, std::span<const double> step_mask, std::size_t n_agents,
                    std::size_t d_msg, const BvmeConfig& cfg);

}  // namespace bvme
