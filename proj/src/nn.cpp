#include "bvme/nn.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "bvme/errors.hpp"

namespace bvme {

Tensor activate(const Tensor& x, Activation act) {
  switch (act) {
    case Activation::kNone: return x;
    case Activation::kRelu: return relu(x);
    case Activation::kTanh: return tanh(x);
    case Activation::kSigmoid: return sigmoid(x);
  }
  return x;
}

void ParamSet::add(std::string name, Tensor tensor) {
  if (find(name)) throw ContractError("param set: duplicate name '" + name + "'");
  entries_.push_back({std::move(name), std::move(tensor)});
}

void ParamSet::append(const std::string& prefix, const ParamSet& other) {
  for (const auto& e : other.entries()) add(prefix + e.name, e.tensor);
}

std::vector<Tensor> ParamSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.tensor);
  return out;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

const Tensor* ParamSet::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e.tensor;
  return nullptr;
}

Tensor Linear::forward(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != in_dim())
    throw DimensionError("linear: input " + shape_str(x.shape()) + " for weight " +
                         shape_str(weight.shape()));
  return add(matmul(x, weight), bias);
}

ParamSet Linear::params() const {
  ParamSet p;
  p.add("weight", weight);
  p.add("bias", bias);
  return p;
}

ParamSet MlpParams::params() const {
  ParamSet p;
  for (std::size_t i = 0; i < layers.size(); ++i) p.append(std::to_string(i) + ".", layers[i].params());
  return p;
}

Tensor mlp_forward(const MlpParams& p, const Tensor& x) {
  if (p.layers.size() != p.activations.size())
    throw ContractError("mlp: layer and activation counts differ");
  Tensor h = x;
  for (std::size_t i = 0; i < p.layers.size(); ++i) h = activate(p.layers[i].forward(h), p.activations[i]);
  return h;
}

ParamSet GruParams::params() const {
  ParamSet p;
  p.append("input.", input.params());
  p.append("hidden.", hidden.params());
  return p;
}

Tensor gru_step(const GruParams& p, const Tensor& x, const Tensor& h_prev) {
  const std::size_t hs = p.hidden_size;
  if (h_prev.rank() != 2 || h_prev.dim(1) != hs || x.rank() != 2 || x.dim(0) != h_prev.dim(0))
    throw DimensionError("gru: input " + shape_str(x.shape()) + " with hidden " +
                         shape_str(h_prev.shape()) + " (hidden size " + std::to_string(hs) + ")");
  const Tensor gi = p.input.forward(x);
  const Tensor gh = p.hidden.forward(h_prev);
  const Tensor z = sigmoid(add(slice_last(gi, 0, hs), slice_last(gh, 0, hs)));
  const Tensor r = sigmoid(add(slice_last(gi, hs, hs), slice_last(gh, hs, hs)));
  const Tensor cand = tanh(add(slice_last(gi, 2 * hs, hs), mul(r, slice_last(gh, 2 * hs, hs))));
  return add(h_prev, mul(z, sub(cand, h_prev)));
}

Linear init_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  if (in == 0 || out == 0) throw ConfigError("linear: zero dimension");
  const double bound = std::sqrt(3.0 / static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> w(in * out);
  for (double& v : w) v = u(rng);
  return Linear{Tensor({in, out}, std::move(w), true), Tensor::zeros({out}, true)};
}

MlpParams init_mlp(std::span<const LayerSpec> layers, std::mt19937_64& rng) {
  MlpParams p;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i > 0 && layers[i].in != layers[i - 1].out)
      throw ConfigError("mlp: layer " + std::to_string(i) + " input does not chain");
    p.layers.push_back(init_linear(layers[i].in, layers[i].out, rng));
    p.activations.push_back(layers[i].activation);
  }
  return p;
}

MlpParams init_mlp(std::span<const LayerSpec> layers, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return init_mlp(layers, rng);
}

GruParams init_gru(std::size_t in, std::size_t hidden, std::mt19937_64& rng) {
  GruParams p;
  p.input = init_linear(in, 3 * hidden, rng);
  p.hidden = init_linear(hidden, 3 * hidden, rng);
  p.hidden_size = hidden;
  return p;
}

// ---- optimizer ----------------------------------------------------------------------

OptimizerState make_optimizer(const ParamSet& params, const RmsPropConfig& config) {
  OptimizerState s;
  s.config = config;
  for (const auto& e : params.entries()) {
    s.keys.push_back(e.name);
    s.square_avg.emplace_back(e.tensor.numel(), 0.0);
  }
  return s;
}

double global_grad_norm(const ParamSet& params) {
  double sq = 0.0;
  for (const auto& e : params.entries())
    for (double g : e.tensor.grad()) sq += g * g;
  return std::sqrt(sq);
}

ClipReport clip_grad_norm(const ParamSet& params, double max_norm) {
  ClipReport r;
  r.norm_before = global_grad_norm(params);
  r.norm_after = r.norm_before;
  if (r.norm_before > max_norm) {
    const double factor = max_norm / r.norm_before;
    for (const auto& e : params.entries()) {
      Tensor t = e.tensor;
      for (double& g : t.mutable_grad()) g *= factor;
    }
    r.norm_after = global_grad_norm(params);
  }
  return r;
}

ClipReport rmsprop_update(OptimizerState& state, const ParamSet& params) {
  const auto entries = params.entries();
  if (entries.size() != state.keys.size())
    throw ContractError("rmsprop: optimizer tracks " + std::to_string(state.keys.size()) +
                        " parameters, got " + std::to_string(entries.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].name != state.keys[i])
      throw ContractError("rmsprop: parameter '" + entries[i].name + "' does not match state key '" +
                          state.keys[i] + "'");
    if (entries[i].tensor.grad().size() != entries[i].tensor.numel())
      throw ContractError("rmsprop: missing gradient for '" + entries[i].name + "'");
  }
  const auto& c = state.config;
  const ClipReport report = clip_grad_norm(params, c.clip_norm);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor t = entries[i].tensor;
    auto theta = t.mutable_values();
    auto g = t.grad();
    auto& v = state.square_avg[i];
    for (std::size_t k = 0; k < theta.size(); ++k) {
      v[k] = c.alpha * v[k] + (1.0 - c.alpha) * g[k] * g[k];
      theta[k] -= c.lr * g[k] / (std::sqrt(v[k]) + c.eps);
    }
  }
  ++state.steps;
  return report;
}

// ---- checkpoints --------------------------------------------------------------------

std::string checkpoint_to_string(const ParamSet& params) {
  nlohmann::json doc;
  doc["format"] = "bvme-checkpoint";
  doc["version"] = 1;
  auto& list = doc["params"] = nlohmann::json::array();
  for (const auto& e : params.entries()) {
    list.push_back({{"name", e.name},
                    {"shape", e.tensor.shape()},
                    {"values", std::vector<double>(e.tensor.values().begin(), e.tensor.values().end())}});
  }
  return doc.dump();
}

void checkpoint_from_string(const ParamSet& params, const std::string& text) {
  const auto doc = nlohmann::json::parse(text);
  if (doc.value("format", "") != "bvme-checkpoint") throw ConfigError("checkpoint: unknown format");
  for (const auto& e : params.entries()) {
    const nlohmann::json* found = nullptr;
    for (const auto& item : doc.at("params"))
      if (item.at("name") == e.name) found = &item;
    if (!found) throw ContractError("checkpoint: missing parameter '" + e.name + "'");
    const auto shape = found->at("shape").get<Shape>();
    const auto values = found->at("values").get<std::vector<double>>();
    if (shape != e.tensor.shape() || values.size() != e.tensor.numel())
      throw DimensionError("checkpoint: parameter '" + e.name + "' has shape " + shape_str(shape) +
                           ", expected " + shape_str(e.tensor.shape()));
    Tensor t = e.tensor;
    std::copy(values.begin(), values.end(), t.mutable_values().begin());
  }
}

void save_checkpoint(const ParamSet& params, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("checkpoint: cannot write " + path.string());
  out << checkpoint_to_string(params) << '\n';
}

void load_checkpoint(const ParamSet& params, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("checkpoint: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  checkpoint_from_string(params, ss.str());
}

void copy_values(const ParamSet& from, const ParamSet& to) {
  const auto a = from.entries();
  const auto b = to.entries();
  if (a.size() != b.size()) throw ContractError("copy_values: parameter sets differ in size");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].tensor.shape() != b[i].tensor.shape())
      throw ContractError("copy_values: parameter '" + a[i].name + "' does not match '" + b[i].name + "'");
    Tensor dst = b[i].tensor;
    std::copy(a[i].tensor.values().begin(), a[i].tensor.values().end(), dst.mutable_values().begin());
  }
}

}  // namespace bvme
