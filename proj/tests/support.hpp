#pragma once

#include <functional>
#include <random>
#include <vector>

#include "bvme/oracles.hpp"
#include "bvme/tensor.hpp"

namespace bvme::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel_of(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> flat_values(const std::vector<Tensor>& ts) {
  std::vector<double> out;
  for (const auto& t : ts) out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

inline void write_values(const std::vector<Tensor>& ts, std::span<const double> v) {
  std::size_t k = 0;
  for (auto t : ts)
    for (double& x : t.mutable_values()) x = v[k++];
}

// Max relative error between autodiff and central differences (h = 1e-4) of
// loss() with respect to every entry of params. Values are restored afterwards.
inline double gradient_error(const std::vector<Tensor>& params, const std::function<Tensor()>& loss,
                             double h = 1e-4) {
  zero_grads(params);
  backward(loss());
  std::vector<double> analytic;
  for (const auto& p : params) analytic.insert(analytic.end(), p.grad().begin(), p.grad().end());
  const std::vector<double> x = flat_values(params);
  auto f = [&](std::span<const double> v) {
    write_values(params, v);
    NoGradGuard no_grad;
    return loss().item();
  };
  const auto fd = oracle::finite_difference_gradients(f, x, h);
  write_values(params, x);
  return oracle::max_relative_error(analytic, fd, 1e-6);
}

// Weighted sum so every output entry gets a distinct upstream gradient.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng, -1.0, 1.0, false)));
}

}  // namespace bvme::testing
