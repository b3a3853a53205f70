#include "bvme/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bvme/errors.hpp"

namespace bvme {

ParamSet AttentionParams::params() const {
  ParamSet p;
  p.append("query.", query.params());
  p.append("key.", key.params());
  return p;
}

AttentionParams init_attention(std::size_t in_dim, std::size_t attn_dim, std::mt19937_64& rng) {
  AttentionParams p;
  p.query = init_linear(in_dim, attn_dim, rng);
  p.key = init_linear(in_dim, attn_dim, rng);
  return p;
}

CoordinationGraph attention_mean_adjacency(const Tensor& features, std::size_t n,
                                           const AttentionParams& params, GraphMode mode) {
  if (n < 2) throw ContractError("attention adjacency: need at least 2 agents, got " + std::to_string(n));
  if (features.rank() != 2 || features.dim(0) % n != 0)
    throw DimensionError("attention adjacency: features " + shape_str(features.shape()) +
                         " not a multiple of " + std::to_string(n) + " agents");
  const std::size_t groups = features.dim(0) / n;
  const std::size_t da = params.attn_dim();
  const Tensor q = reshape(params.query.forward(features), {groups, n, da});
  const Tensor k = reshape(params.key.forward(features), {groups, n, da});
  const Tensor scores = scale(bmm(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(da)));

  CoordinationGraph g;
  g.n = n;
  g.groups = groups;
  g.mode = mode;
  g.mask.assign(groups * n * n, 1.0);
  g.mu = masked_softmax(scores, g.mask);
  return g;
}

CoordinationGraph with_edge_noise(CoordinationGraph g, const Tensor& log_std) {
  if (log_std.numel() != 1) throw DimensionError("edge noise: log_std must have one element");
  const Tensor mask({g.groups, g.n, g.n}, g.mask);
  g.sigma = mul_scalar(mask, exp(log_std));
  return g;
}

Tensor sample_adjacency(const CoordinationGraph& g, std::span<const double> noise) {
  if (!g.sigma) throw ContractError("sample_adjacency: graph has no edge variance");
  if (noise.size() != g.mask.size())
    throw DimensionError("sample_adjacency: noise of " + std::to_string(noise.size()) + " for " +
                         std::to_string(g.mask.size()) + " edges");
  const Shape s{g.groups, g.n, g.n};
  const Tensor eps(s, std::vector<double>(noise.begin(), noise.end()));
  const Tensor mask(s, g.mask);
  return mul(relu(add(g.mu, mul(*g.sigma, eps))), mask);
}

Tensor sample_adjacency(const CoordinationGraph& g, std::mt19937_64& rng) {
  if (!g.sigma) throw ContractError("sample_adjacency: graph has no edge variance");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> noise(g.mask.size());
  for (double& e : noise) e = normal(rng);
  return sample_adjacency(g, noise);
}

CoordinationGraph sparsify_topk(const CoordinationGraph& g, std::size_t k) {
  const std::size_t n = g.n;
  if (k < 1 || k + 1 > n)
    throw ContractError("sparsify_topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(n - 1) + "]");
  CoordinationGraph out = g;
  const auto mu = g.mu.values();
  std::vector<std::size_t> order(n);
  for (std::size_t gi = 0; gi < g.groups; ++gi) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t row = (gi * n + i) * n;
      order.clear();
      for (std::size_t j = 0; j < n; ++j)
        if (j != i && g.mask[row + j] != 0.0) order.push_back(j);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return mu[row + a] > mu[row + b]; });
      for (std::size_t j = 0; j < n; ++j) out.mask[row + j] = 0.0;
      out.mask[row + i] = 1.0;
      for (std::size_t c = 0; c < std::min(k, order.size()); ++c) out.mask[row + order[c]] = 1.0;
    }
  }
  const Tensor mask({g.groups, n, n}, out.mask);
  out.mu = row_normalize(mul(g.mu, mask));
  if (g.sigma) out.sigma = mul(*g.sigma, mask);
  return out;
}

Tensor execution_adjacency(const CoordinationGraph& g, ExecutionMode mode,
                           const std::optional<Tensor>& cached, std::mt19937_64* rng) {
  switch (mode) {
    case ExecutionMode::kStaticSampled:
      if (!cached) throw ContractError("execution_adjacency: static_sampled requires a cached graph");
      return *cached;
    case ExecutionMode::kMean:
      return g.mu;
    case ExecutionMode::kDynamic:
      if (g.sigma && rng) return sample_adjacency(g, *rng);
      return g.mu;
  }
  throw ContractError("execution_adjacency: unknown mode");
}

ParamSet GnnParams::params() const {
  ParamSet p;
  for (std::size_t i = 0; i < weights.size(); ++i) p.add(std::to_string(i) + ".weight", weights[i]);
  return p;
}

GnnParams init_gnn(std::span<const std::size_t> widths, std::mt19937_64& rng) {
  if (widths.size() < 2) throw ConfigError("gnn: need at least one layer");
  GnnParams p;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    p.weights.push_back(init_linear(widths[l], widths[l + 1], rng).weight);
    p.activations.push_back(Activation::kRelu);
  }
  return p;
}

Tensor gnn_forward(const Tensor& adjacency, const Tensor& x, const GnnParams& params) {
  Tensor adj = adjacency;
  if (adj.rank() == 2) adj = reshape(adj, {1, adj.dim(0), adj.dim(1)});
  if (adj.rank() != 3 || adj.dim(1) != adj.dim(2))
    throw DimensionError("gnn: adjacency " + shape_str(adjacency.shape()) + " is not square");
  const std::size_t groups = adj.dim(0), n = adj.dim(1);
  if (x.rank() != 2 || x.dim(0) != groups * n)
    throw DimensionError("gnn: features " + shape_str(x.shape()) + " for adjacency " +
                         shape_str(adjacency.shape()));
  Tensor h = x;
  for (std::size_t l = 0; l < params.layers(); ++l) {
    const Tensor& w = params.weights[l];
    if (h.dim(1) != w.dim(0))
      throw DimensionError("gnn: layer " + std::to_string(l) + " input " + shape_str(h.shape()) +
                           " for weight " + shape_str(w.shape()));
    const std::size_t out = w.dim(1);
    const Tensor xw = reshape(matmul(h, w), {groups, n, out});
    h = activate(reshape(bmm(adj, xw), {groups * n, out}), params.activations[l]);
  }
  return h;
}

}  // namespace bvme
