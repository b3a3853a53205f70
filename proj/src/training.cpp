#include "bvme/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bvme/errors.hpp"

namespace bvme {

std::string to_string(Method m) {
  switch (m) {
    case Method::kBvme: return "bvme";
    case Method::kGacgPlain: return "gacg_plain";
    case Method::kDicgDense: return "dicg_dense";
    case Method::kQmixNoGraph: return "qmix_nograph";
  }
  return "unknown";
}

Method method_from_string(const std::string& s) {
  if (s == "bvme") return Method::kBvme;
  if (s == "gacg_plain") return Method::kGacgPlain;
  if (s == "dicg_dense") return Method::kDicgDense;
  if (s == "qmix_nograph") return Method::kQmixNoGraph;
  throw ConfigError("unknown method '" + s + "'");
}

double epsilon(std::uint64_t step, const TrainConfig& cfg) {
  if (cfg.eps_anneal_steps == 0) return cfg.eps_end;
  const double frac = static_cast<double>(step) / static_cast<double>(cfg.eps_anneal_steps);
  return std::max(cfg.eps_end, cfg.eps_start - (cfg.eps_start - cfg.eps_end) * frac);
}

// ---- model ----------------------------------------------------------------------------

GraphMode Model::effective_graph_mode() const {
  switch (config.method) {
    case Method::kGacgPlain: return GraphMode::kLearned;
    case Method::kDicgDense: return GraphMode::kDense;
    default: return config.graph_mode;
  }
}

ParamSet Model::params() const {
  ParamSet p;
  if (uses_graph()) {
    p.append("encoder.", obs_encoder.params());
    p.append("attention.", attention.params());
    if (uses_edge_noise()) p.add("graph.edge_log_std", edge_log_std);
    p.append("gnn.", gnn.params());
  }
  if (uses_heads()) p.append("bvme.", heads.params());
  p.append("agent.", agent.params());
  p.append("mixer.", mixer.params());
  return p;
}

Model build_model(const DecPomdpSpec& spec, const TrainConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Model m;
  m.spec = spec;
  m.config = cfg;
  m.msg_dim = message_dim(cfg.ratio, spec.obs_dim);
  if (m.uses_graph()) {
    if (spec.n_agents < 2) throw ConfigError("graph methods need at least 2 agents");
    if (cfg.gnn_layers < 1) throw ConfigError("gnn_layers must be >= 1");
    const LayerSpec enc{spec.obs_dim, m.msg_dim, Activation::kRelu};
    m.obs_encoder = init_mlp(std::span(&enc, 1), rng);
    m.attention = init_attention(spec.obs_dim, cfg.attn_dim, rng);
    if (m.uses_edge_noise()) {
      if (!(cfg.edge_noise_init > 0.0)) throw ConfigError("edge_noise_init must be positive");
      m.edge_log_std = Tensor({1}, {std::log(cfg.edge_noise_init)}, true);
    }
    std::vector<std::size_t> widths{m.msg_dim};
    for (std::size_t l = 1; l < cfg.gnn_layers; ++l) widths.push_back(cfg.gnn_hidden);
    widths.push_back(m.msg_dim);
    m.gnn = init_gnn(widths, rng);
  }
  if (m.uses_heads()) m.heads = init_heads(m.msg_dim, rng);
  m.agent = init_agent_q(spec.obs_dim, m.msg_dim, cfg.agent_hidden, spec.n_actions, rng);
  m.mixer = init_mixer(spec.n_agents, spec.state_dim, cfg.mixer_embed, rng);
  return m;
}

Model clone_model(const Model& m) {
  Model c = build_model(m.spec, m.config, 0);
  copy_values(m.params(), c.params());
  return c;
}

MessageOutput compute_messages(const Model& m, const Tensor& obs, const MessageOptions& opt) {
  const std::size_t n = m.spec.n_agents;
  if (obs.rank() != 2 || obs.dim(1) != m.spec.obs_dim || obs.dim(0) % n != 0)
    throw DimensionError("messages: observations " + shape_str(obs.shape()) + " for " +
                         std::to_string(n) + " agents of width " + std::to_string(m.spec.obs_dim));
  MessageOutput out;
  if (!m.uses_graph()) {
    out.z = Tensor::zeros({obs.dim(0), m.msg_dim});
    return out;
  }
  const GraphMode mode = m.effective_graph_mode();
  CoordinationGraph g = attention_mean_adjacency(obs, n, m.attention, mode);
  if (mode == GraphMode::kLearned) {
    if (m.config.topk > 0 && m.config.topk < n - 1) g = sparsify_topk(g, m.config.topk);
    g = with_edge_noise(std::move(g), m.edge_log_std);
  }
  if (opt.sample_adjacency && g.sigma) {
    if (!opt.rng) throw ContractError("messages: sampled adjacency needs an RNG");
    out.adjacency = sample_adjacency(g, *opt.rng);
  } else {
    std::optional<Tensor> cached;
    if (opt.cached_adjacency) cached = *opt.cached_adjacency;
    out.adjacency = execution_adjacency(g, opt.execution, cached, opt.rng);
  }
  const Tensor h0 = mlp_forward(m.obs_encoder, obs);
  const Tensor msgs = gnn_forward(out.adjacency, h0, m.gnn);
  if (!m.uses_heads()) {
    out.z = msgs;
    return out;
  }
  const auto& b = m.config.bvme;
  GaussianPosterior post = encode_posterior(msgs, m.heads, b.logvar_min, b.logvar_max);
  out.kl = kl_to_prior(post, b.prior());
  if (b.coupling == Coupling::kOnPath && opt.messages == SampleMode::kStochastic &&
      b.sample_mode == SampleMode::kStochastic) {
    if (!opt.rng) throw ContractError("messages: stochastic sampling needs an RNG");
    out.z = sample_message(post, SampleMode::kStochastic, *opt.rng);
  } else {
    out.z = post.mu;
  }
  out.posterior = std::move(post);
  return out;
}

namespace {

// Q-values for a time-major sequence: rows are [T][rows_per_step].
Tensor sequence_q(const AgentQParams& agent, const Tensor& obs, const Tensor& z, std::size_t steps,
                  std::size_t rows_per_step) {
  const Tensor x = agent_input(agent, obs, z);
  Tensor h = Tensor::zeros({rows_per_step, agent.hidden_size()});
  std::vector<Tensor> hs;
  hs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    h = gru_step(agent.gru, slice_rows(x, t * rows_per_step, rows_per_step), h);
    hs.push_back(h);
  }
  return agent_q_head(agent, concat_rows(hs));
}

Tensor obs_tensor(const std::vector<std::vector<double>>& observations) {
  std::vector<double> flat;
  for (const auto& o : observations) flat.insert(flat.end(), o.begin(), o.end());
  return Tensor({observations.size(), observations.empty() ? 0 : observations[0].size()}, std::move(flat));
}

}  // namespace

// ---- episodes and replay ------------------------------------------------------------

double EpisodeBatch::valid_steps() const { return std::accumulate(mask.begin(), mask.end(), 0.0); }

EpisodeBatch make_batch(std::span<const Episode* const> episodes, const DecPomdpSpec& spec,
                        std::size_t pad_to) {
  if (episodes.empty()) throw ContractError("make_batch: no episodes");
  EpisodeBatch b;
  b.batch = episodes.size();
  b.n_agents = spec.n_agents;
  b.obs_dim = spec.obs_dim;
  b.state_dim = spec.state_dim;
  b.steps = pad_to;
  for (const Episode* e : episodes) b.steps = std::max(b.steps, e->length);
  const std::size_t T = b.steps, B = b.batch, n = b.n_agents, d = b.obs_dim, ds = b.state_dim;
  b.obs.assign(T * B * n * d, 0.0);
  b.actions.assign(T * B * n, 0);
  b.rewards.assign(T * B, 0.0);
  b.terminated.assign(T * B, 0.0);
  b.mask.assign(T * B, 0.0);
  b.states.assign(T * B * ds, 0.0);
  for (std::size_t bi = 0; bi < B; ++bi) {
    const Episode& e = *episodes[bi];
    for (std::size_t t = 0; t < e.length; ++t) {
      const std::size_t slot = t * B + bi;
      std::copy_n(e.obs.begin() + static_cast<std::ptrdiff_t>(t * n * d), n * d,
                  b.obs.begin() + static_cast<std::ptrdiff_t>(slot * n * d));
      std::copy_n(e.actions.begin() + static_cast<std::ptrdiff_t>(t * n), n,
                  b.actions.begin() + static_cast<std::ptrdiff_t>(slot * n));
      std::copy_n(e.states.begin() + static_cast<std::ptrdiff_t>(t * ds), ds,
                  b.states.begin() + static_cast<std::ptrdiff_t>(slot * ds));
      b.rewards[slot] = e.rewards[t];
      b.terminated[slot] = e.terminated[t];
      b.mask[slot] = 1.0;
    }
  }
  return b;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("replay buffer capacity must be positive");
}

void ReplayBuffer::push(Episode e) {
  if (episodes_.size() == capacity_) episodes_.pop_front();
  episodes_.push_back(std::move(e));
}

std::vector<const Episode*> ReplayBuffer::sample(std::size_t count, std::mt19937_64& rng) const {
  if (count > episodes_.size())
    throw ContractError("replay: sample of " + std::to_string(count) + " from " +
                        std::to_string(episodes_.size()) + " episodes");
  std::vector<std::size_t> idx(episodes_.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<const Episode*> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
    out.push_back(&episodes_[idx[i]]);
  }
  return out;
}

// ---- run state ------------------------------------------------------------------------

RunState make_run_state(const DecPomdpSpec& spec, const TrainConfig& cfg, std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  std::array<std::uint32_t, 10> s{};
  seq.generate(s.begin(), s.end());
  auto pair = [&](std::size_t i) { return (std::uint64_t{s[2 * i]} << 32) | s[2 * i + 1]; };
  RunState run{.online = build_model(spec, cfg, pair(0)),
               .target = {},
               .optimizer = {},
               .env_rng = std::mt19937_64(pair(1)),
               .explore_rng = std::mt19937_64(pair(2)),
               .noise_rng = std::mt19937_64(pair(3)),
               .batch_rng = std::mt19937_64(pair(4))};
  run.target = clone_model(run.online);
  run.optimizer = make_optimizer(run.online.params(), cfg.optimizer);
  return run;
}

std::vector<std::size_t> select_actions(std::span<const double> q, std::size_t n_agents,
                                        std::size_t n_actions, double eps, std::mt19937_64& rng) {
  if (q.size() != n_agents * n_actions) throw DimensionError("select_actions: q size mismatch");
  std::vector<std::size_t> actions(n_agents);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> any(0, n_actions - 1);
  for (std::size_t i = 0; i < n_agents; ++i) {
    if (eps > 0.0 && coin(rng) < eps) {
      actions[i] = any(rng);
    } else {
      const double* row = q.data() + i * n_actions;
      actions[i] = static_cast<std::size_t>(std::max_element(row, row + n_actions) - row);
    }
  }
  return actions;
}

Episode collect_episode(RunState& run, Env& env, const CollectOptions& opt) {
  const Model& m = run.online;
  const auto& spec = m.spec;
  NoGradGuard no_grad;
  Episode ep;
  StepResult res = env.reset(run.env_rng());
  Tensor h = Tensor::zeros({spec.n_agents, m.agent.hidden_size()});
  std::uint64_t steps = run.env_steps;
  while (!res.terminated) {
    const Tensor obs = obs_tensor(res.observations);
    ep.obs.insert(ep.obs.end(), obs.values().begin(), obs.values().end());
    ep.states.insert(ep.states.end(), res.state.begin(), res.state.end());
    MessageOptions mo{.messages = SampleMode::kStochastic,
                      .sample_adjacency = m.config.sample_train_adjacency,
                      .rng = &run.noise_rng};
    const MessageOutput msgs = compute_messages(m, obs, mo);
    const AgentQOutput out = agent_q_forward(m.agent, obs, msgs.z, h);
    h = out.h_next;
    const double eps = opt.epsilon.value_or(epsilon(steps, m.config));
    const auto actions = select_actions(out.q.values(), spec.n_agents, spec.n_actions, eps, run.explore_rng);
    res = env.step(actions);
    ep.actions.insert(ep.actions.end(), actions.begin(), actions.end());
    ep.rewards.push_back(res.reward);
    ep.terminated.push_back(res.terminated ? 1.0 : 0.0);
    ep.episode_return += res.reward;
    ++ep.length;
    ++steps;
  }
  ep.success = res.info.at("success") > 0.5;
  if (opt.count_steps) {
    run.env_steps = steps;
    ++run.episodes;
  }
  return ep;
}

LossComponents compute_loss(RunState& run, const EpisodeBatch& batch, const GroupRegularizer& group_hook) {
  const Model& online = run.online;
  const TrainConfig& cfg = online.config;
  const std::size_t T = batch.steps, B = batch.batch, n = batch.n_agents;
  const std::size_t rows = T * B * n;
  const Tensor obs({rows, batch.obs_dim}, batch.obs);
  const Tensor states({T * B, batch.state_dim}, batch.states);

  MessageOptions train_opt{.messages = SampleMode::kStochastic,
                           .sample_adjacency = cfg.sample_train_adjacency,
                           .rng = &run.noise_rng};
  const MessageOutput msgs = compute_messages(online, obs, train_opt);
  const Tensor q = sequence_q(online.agent, obs, msgs.z, T, B * n);
  const Tensor chosen = reshape(gather_last(q, batch.actions), {T * B, n});
  const Tensor q_tot = qmix_forward(online.mixer, chosen, states);

  std::vector<double> next(T * B, 0.0);
  {
    NoGradGuard no_grad;
    MessageOptions target_opt{.messages = cfg.target_messages, .rng = &run.noise_rng};
    const MessageOutput tm = compute_messages(run.target, obs, target_opt);
    const Tensor tq = sequence_q(run.target.agent, obs, tm.z, T, B * n);
    const Tensor best = reshape(max_last(tq), {T * B, n});
    const auto target_tot = qmix_forward(run.target.mixer, best, states).values();
    for (std::size_t t = 0; t + 1 < T; ++t)
      for (std::size_t b = 0; b < B; ++b) next[t * B + b] = target_tot[(t + 1) * B + b];
  }
  const auto y = td_targets(batch.rewards, batch.terminated, next, cfg.gamma);
  const Tensor td = masked_td_loss(q_tot, y, batch.mask);

  LossComponents out;
  Tensor penalty = Tensor::scalar(0.0);
  if (online.uses_heads()) {
    if (cfg.include_bvme_penalty) penalty = bvme_penalty(msgs.kl, batch.mask, n, online.msg_dim, cfg.bvme);
    const auto kl = msgs.kl.values();
    double acc = 0.0;
    for (std::size_t r = 0; r < rows; ++r) acc += batch.mask[r / n] * kl[r];
    out.mean_kl = acc / (static_cast<double>(n) * batch.valid_steps());
  }
  out.terms = total_loss(td, penalty, group_hook, cfg.lambda_g);
  return out;
}

std::optional<TrainReport> train_iteration(RunState& run, const ReplayBuffer& buffer,
                                           const GroupRegularizer& group_hook) {
  const TrainConfig& cfg = run.online.config;
  if (buffer.size() < cfg.batch_size) return std::nullopt;
  const auto picked = buffer.sample(cfg.batch_size, run.batch_rng);
  const EpisodeBatch batch = make_batch(picked, run.online.spec);
  const ParamSet params = run.online.params();
  const auto tensors = params.tensors();
  zero_grads(tensors);
  const LossComponents lc = compute_loss(run, batch, group_hook);
  backward(lc.terms.total);
  const ClipReport clip = rmsprop_update(run.optimizer, params);
  return TrainReport{.td = lc.terms.td.item(),
                     .bvme = lc.terms.bvme.item(),
                     .group = lc.terms.group.item(),
                     .total = lc.terms.total.item(),
                     .mean_kl = lc.mean_kl,
                     .grad_norm_before = clip.norm_before,
                     .grad_norm_after = clip.norm_after};
}

bool maybe_update_target(RunState& run) {
  const std::uint64_t cadence = run.online.config.target_update_episodes;
  if (cadence == 0 || run.episodes == 0 || run.episodes % cadence != 0) return false;
  const std::uint64_t mark = run.episodes / cadence;
  if (mark <= run.target_updates) return false;
  copy_values(run.online.params(), run.target.params());
  run.target_updates = mark;
  return true;
}

EvalMetrics evaluate(const Model& model, Env& env, std::size_t episodes, std::uint64_t seed) {
  if (episodes == 0) throw ContractError("evaluate: need at least one episode");
  NoGradGuard no_grad;
  const auto& spec = model.spec;
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  double successes = 0.0, returns = 0.0;
  for (std::size_t k = 0; k < episodes; ++k) {
    StepResult res = env.reset(seed + k);
    Tensor h = Tensor::zeros({spec.n_agents, model.agent.hidden_size()});
    std::optional<Tensor> cached;
    while (!res.terminated) {
      const Tensor obs = obs_tensor(res.observations);
      MessageOptions mo{.messages = SampleMode::kMean,
                        .execution = model.config.eval_adjacency,
                        .rng = &rng};
      if (mo.execution == ExecutionMode::kStaticSampled && model.uses_graph()) {
        if (cached) mo.cached_adjacency = &*cached;
        else mo.execution = ExecutionMode::kDynamic;
      }
      const MessageOutput msgs = compute_messages(model, obs, mo);
      if (!cached && msgs.adjacency.defined()) cached = msgs.adjacency.detach();
      const AgentQOutput out = agent_q_forward(model.agent, obs, msgs.z, h);
      h = out.h_next;
      const auto actions = select_actions(out.q.values(), spec.n_agents, spec.n_actions, 0.0, rng);
      res = env.step(actions);
      returns += res.reward;
    }
    successes += res.info.at("success");
  }
  const double e = static_cast<double>(episodes);
  return {successes / e, returns / e};
}

}  // namespace bvme
