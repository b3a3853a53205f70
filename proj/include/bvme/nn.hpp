#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bvme/tensor.hpp"

namespace bvme {

enum class Activation { kNone, kRelu, kTanh, kSigmoid };

Tensor activate(const Tensor& x, Activation act);

// Ordered name -> tensor registry. Insertion order is the canonical parameter
// order used by the optimizer and the checkpoint format.
struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class ParamSet {
 public:
  void add(std::string name, Tensor tensor);
  void append(const std::string& prefix, const ParamSet& other);

  std::span<const NamedTensor> entries() const { return entries_; }
  std::vector<Tensor> tensors() const;
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  const Tensor* find(const std::string& name) const;

 private:
  std::vector<NamedTensor> entries_;
};

// y = x W + b, W stored [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }
  Tensor forward(const Tensor& x) const;
  ParamSet params() const;
};

struct LayerSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation activation = Activation::kNone;
};

struct MlpParams {
  std::vector<Linear> layers;
  std::vector<Activation> activations;

  ParamSet params() const;
};

Tensor mlp_forward(const MlpParams& p, const Tensor& x);

// Gate columns are laid out [update | reset | candidate].
struct GruParams {
  Linear input;   // in -> 3H
  Linear hidden;  // H -> 3H
  std::size_t hidden_size = 64;

  ParamSet params() const;
};

// h' = (1 - z) * h + z * tanh(Wn x + bn + r * (Un h + cn)),
// z = sigmoid(Wz x + Uz h + ...), r = sigmoid(Wr x + Ur h + ...).
Tensor gru_step(const GruParams& p, const Tensor& x, const Tensor& h_prev);

// Weights ~ U(-a, a) with a = sqrt(3 / fan_in) (so std = 1/sqrt(fan_in)); biases zero.
Linear init_linear(std::size_t in, std::size_t out, std::mt19937_64& rng);
MlpParams init_mlp(std::span<const LayerSpec> layers, std::mt19937_64& rng);
MlpParams init_mlp(std::span<const LayerSpec> layers, std::uint64_t seed);
GruParams init_gru(std::size_t in, std::size_t hidden, std::mt19937_64& rng);

// ---- optimizer --------------------------------------------------------------------

struct RmsPropConfig {
  double lr = 5e-4;
  double alpha = 0.99;
  double eps = 1e-5;
  double clip_norm = 10.0;
};

struct OptimizerState {
  RmsPropConfig config;
  std::vector<std::string> keys;
  std::vector<std::vector<double>> square_avg;
  std::uint64_t steps = 0;
};

struct ClipReport {
  double norm_before = 0.0;
  double norm_after = 0.0;
};

OptimizerState make_optimizer(const ParamSet& params, const RmsPropConfig& config);
double global_grad_norm(const ParamSet& params);
ClipReport clip_grad_norm(const ParamSet& params, double max_norm);

// Global-norm clipping followed by one RMSprop step, in place.
ClipReport rmsprop_update(OptimizerState& state, const ParamSet& params);

// ---- checkpoints ----------------------------------------------------------------
//
// JSON document:
//   {"format": "bvme-checkpoint", "version": 1,
//    "params": [{"name": str, "shape": [int...], "values": [double...]}, ...]}
// Values are written with round-trip precision, so save/load is bit-exact.

std::string checkpoint_to_string(const ParamSet& params);
void checkpoint_from_string(const ParamSet& params, const std::string& text);
void save_checkpoint(const ParamSet& params, const std::filesystem::path& path);
void load_checkpoint(const ParamSet& params, const std::filesystem::path& path);

// Copies values (not gradients) between two structurally identical sets.
void copy_values(const ParamSet& from, const ParamSet& to);

}  // namespace bvme
