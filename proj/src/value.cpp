#include "bvme/value.hpp"

#include "bvme/errors.hpp"

namespace bvme {

ParamSet AgentQParams::params() const {
  ParamSet p;
  p.append("input.", input.params());
  p.append("gru.", gru.params());
  p.append("output.", output.params());
  return p;
}

AgentQParams init_agent_q(std::size_t obs_dim, std::size_t msg_dim, std::size_t hidden,
                          std::size_t n_actions, std::mt19937_64& rng) {
  if (n_actions < 2) throw ConfigError("agent network: need at least 2 actions");
  AgentQParams p;
  p.input = init_linear(obs_dim + msg_dim, hidden, rng);
  p.gru = init_gru(hidden, hidden, rng);
  p.output = init_linear(hidden, n_actions, rng);
  return p;
}

Tensor agent_input(const AgentQParams& p, const Tensor& obs, const Tensor& z) {
  if (obs.rank() != 2 || z.rank() != 2 || obs.dim(0) != z.dim(0) ||
      obs.dim(1) + z.dim(1) != p.input.in_dim())
    throw DimensionError("agent network: observation " + shape_str(obs.shape()) + " and message " +
                         shape_str(z.shape()) + " for input width " + std::to_string(p.input.in_dim()));
  return relu(p.input.forward(concat_last({obs, z})));
}

Tensor agent_q_head(const AgentQParams& p, const Tensor& h) { return p.output.forward(h); }

AgentQOutput agent_q_forward(const AgentQParams& p, const Tensor& obs, const Tensor& z,
                             const Tensor& h_prev) {
  Tensor h = gru_step(p.gru, agent_input(p, obs, z), h_prev);
  return {agent_q_head(p, h), h};
}

ParamSet MixerParams::params() const {
  ParamSet p;
  p.append("hyper_w1.", hyper_w1.params());
  p.append("hyper_b1.", hyper_b1.params());
  p.append("hyper_w2.", hyper_w2.params());
  p.append("hyper_v1.", hyper_v1.params());
  p.append("hyper_v2.", hyper_v2.params());
  return p;
}

MixerParams init_mixer(std::size_t n_agents, std::size_t state_dim, std::size_t embed,
                       std::mt19937_64& rng) {
  if (n_agents == 0) throw ConfigError("mixer: need at least one agent");
  MixerParams m;
  m.hyper_w1 = init_linear(state_dim, n_agents * embed, rng);
  m.hyper_b1 = init_linear(state_dim, embed, rng);
  m.hyper_w2 = init_linear(state_dim, embed, rng);
  m.hyper_v1 = init_linear(state_dim, embed, rng);
  m.hyper_v2 = init_linear(embed, 1, rng);
  m.n_agents = n_agents;
  m.embed = embed;
  return m;
}

Tensor qmix_forward(const MixerParams& m, const Tensor& agent_qs, const Tensor& states) {
  if (agent_qs.rank() != 2 || agent_qs.dim(1) != m.n_agents || states.rank() != 2 ||
      states.dim(0) != agent_qs.dim(0) || states.dim(1) != m.hyper_w1.in_dim())
    throw DimensionError("mixer: agent values " + shape_str(agent_qs.shape()) + " and states " +
                         shape_str(states.shape()) + " for " + std::to_string(m.n_agents) + " agents");
  const std::size_t g = agent_qs.dim(0), n = m.n_agents, e = m.embed;
  const Tensor w1 = reshape(abs(m.hyper_w1.forward(states)), {g, n, e});
  const Tensor b1 = reshape(m.hyper_b1.forward(states), {g, 1, e});
  const Tensor hidden = elu(add(bmm(reshape(agent_qs, {g, 1, n}), w1), b1));
  const Tensor w2 = reshape(abs(m.hyper_w2.forward(states)), {g, e, 1});
  const Tensor v = m.hyper_v2.forward(relu(m.hyper_v1.forward(states)));
  return add(reshape(bmm(hidden, w2), {g}), reshape(v, {g}));
}

std::vector<double> td_targets(std::span<const double> rewards, std::span<const double> terminals,
                               std::span<const double> next_target, double gamma) {
  if (rewards.size() != terminals.size() || rewards.size() != next_target.size())
    throw ContractError("td_targets: length mismatch (" + std::to_string(rewards.size()) + ", " +
                        std::to_string(terminals.size()) + ", " + std::to_string(next_target.size()) + ")");
  std::vector<double> y(rewards.size());
  for (std::size_t t = 0; t < y.size(); ++t)
    y[t] = rewards[t] + gamma * (1.0 - terminals[t]) * next_target[t];
  return y;
}

Tensor masked_td_loss(const Tensor& q_tot, std::span<const double> targets,
                      std::span<const double> mask) {
  if (q_tot.rank() != 1 || q_tot.numel() != targets.size() || targets.size() != mask.size())
    throw DimensionError("td loss: values " + shape_str(q_tot.shape()) + ", " +
                         std::to_string(targets.size()) + " targets, " + std::to_string(mask.size()) +
                         " mask entries");
  double valid = 0.0;
  for (double m : mask) valid += m;
  if (!(valid > 0.0)) throw ContractError("td loss: no valid timesteps");
  const Shape s{targets.size()};
  const Tensor err = sub(q_tot, Tensor(s, std::vector<double>(targets.begin(), targets.end())));
  const Tensor m(s, std::vector<double>(mask.begin(), mask.end()));
  return scale(sum(mul(square(err), m)), 1.0 / valid);
}

LossTerms total_loss(const Tensor& td, const Tensor& bvme_penalty, const GroupRegularizer& group_hook,
                     double lambda_g) {
  LossTerms t;
  t.td = td;
  t.bvme = bvme_penalty.defined() ? bvme_penalty : Tensor::scalar(0.0);
  t.group = group_hook ? group_hook() : Tensor::scalar(0.0);
  t.total = add(add(td, scale(t.group, lambda_g)), t.bvme);
  return t;
}

}  // namespace bvme
