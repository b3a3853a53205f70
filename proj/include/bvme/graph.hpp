#pragma once

// Coordination graphs over agents and graph message passing.
//
// All graph tensors carry a leading group dimension so that many independent
// n-agent graphs (one per batch element and timestep) are processed in one
// call; a single graph is simply groups == 1.

#include <optional>
#include <random>
#include <span>
#include <vector>

#include "bvme/nn.hpp"
#include "bvme/tensor.hpp"

namespace bvme {

enum class GraphMode { kDense, kLearned };
enum class ExecutionMode { kDynamic, kStaticSampled, kMean };

struct AttentionParams {
  Linear query;
  Linear key;

  std::size_t attn_dim() const { return query.out_dim(); }
  ParamSet params() const;
};

AttentionParams init_attention(std::size_t in_dim, std::size_t attn_dim, std::mt19937_64& rng);

struct CoordinationGraph {
  std::size_t n = 0;
  std::size_t groups = 1;
  GraphMode mode = GraphMode::kDense;
  Tensor mu;                    // [groups, n, n], rows sum to 1 over unmasked entries
  std::optional<Tensor> sigma;  // [groups, n, n] per-edge std, zero where masked
  std::vector<double> mask;     // groups * n * n, diagonal always 1
};

// mu[i][j] = masked row-softmax of <q_i, k_j> / sqrt(attn_dim), q/k projected from features.
// features: [groups * n, d].
CoordinationGraph attention_mean_adjacency(const Tensor& features, std::size_t n,
                                           const AttentionParams& params,
                                           GraphMode mode = GraphMode::kDense);

// Attaches per-edge noise sigma = exp(log_std) on every unmasked entry.
CoordinationGraph with_edge_noise(CoordinationGraph g, const Tensor& log_std);

// Reparameterized draw: relu(mu + sigma * eps) * mask.
Tensor sample_adjacency(const CoordinationGraph& g, std::mt19937_64& rng);
Tensor sample_adjacency(const CoordinationGraph& g, std::span<const double> noise);

// Keeps the self-loop plus the k largest off-diagonal entries of each row
// (ties to the lower agent index) and renormalizes the kept entries.
CoordinationGraph sparsify_topk(const CoordinationGraph& g, std::size_t k);

Tensor execution_adjacency(const CoordinationGraph& g, ExecutionMode mode,
                           const std::optional<Tensor>& cached, std::mt19937_64* rng = nullptr);

struct GnnParams {
  std::vector<Tensor> weights;  // W_l, [d_l, d_{l+1}]
  std::vector<Activation> activations;

  std::size_t layers() const { return weights.size(); }
  ParamSet params() const;
};

// widths = {d_0, d_1, ..., d_L}; relu on every layer.
GnnParams init_gnn(std::span<const std::size_t> widths, std::mt19937_64& rng);

// H_{l+1} = act(A H_l W_l) per group. adjacency: [groups, n, n] or [n, n]; x: [groups * n, d_0].
Tensor gnn_forward(const Tensor& adjacency, const Tensor& x, const GnnParams& params);

}  // namespace bvme
