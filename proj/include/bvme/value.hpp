#pragma once

// Per-agent recurrent Q-network, monotonic QMIX mixer, TD targets, and the
// composite training objective.

#include <functional>
#include <random>
#include <span>
#include <vector>

#include "bvme/nn.hpp"
#include "bvme/tensor.hpp"

namespace bvme {

struct AgentQParams {
  Linear input;   // (d_obs + d_msg) -> hidden, relu
  GruParams gru;  // hidden -> hidden
  Linear output;  // hidden -> |U|

  std::size_t hidden_size() const { return gru.hidden_size; }
  std::size_t n_actions() const { return output.out_dim(); }
  ParamSet params() const;
};

AgentQParams init_agent_q(std::size_t obs_dim, std::size_t msg_dim, std::size_t hidden,
                          std::size_t n_actions, std::mt19937_64& rng);

struct AgentQOutput {
  Tensor q;       // [rows, |U|]
  Tensor h_next;  // [rows, hidden]
};

AgentQOutput agent_q_forward(const AgentQParams& p, const Tensor& obs, const Tensor& z,
                             const Tensor& h_prev);

// The non-recurrent pieces of agent_q_forward, for running whole sequences at once.
Tensor agent_input(const AgentQParams& p, const Tensor& obs, const Tensor& z);
Tensor agent_q_head(const AgentQParams& p, const Tensor& h);

// Hypernetworks map the global state to the two mixing layers. Mixing weights
// pass through abs(), so Q_tot is non-decreasing in every agent utility.
struct MixerParams {
  Linear hyper_w1;  // state -> n * embed
  Linear hyper_b1;  // state -> embed
  Linear hyper_w2;  // state -> embed
  Linear hyper_v1;  // state -> embed, relu
  Linear hyper_v2;  // embed -> 1
  std::size_t n_agents = 0;
  std::size_t embed = 32;

  ParamSet params() const;
};

MixerParams init_mixer(std::size_t n_agents, std::size_t state_dim, std::size_t embed,
                       std::mt19937_64& rng);

// agent_qs: [groups, n], states: [groups, d_state] -> [groups].
Tensor qmix_forward(const MixerParams& m, const Tensor& agent_qs, const Tensor& states);

// y_t = r_t + gamma * (1 - terminal_t) * next_t. Plain values; targets carry no gradient.
std::vector<double> td_targets(std::span<const double> rewards, std::span<const double> terminals,
                               std::span<const double> next_target, double gamma = 0.99);

// sum_t m_t (q_t - y_t)^2 / sum_t m_t
Tensor masked_td_loss(const Tensor& q_tot, std::span<const double> targets,
                      std::span<const double> mask);

using GroupRegularizer = std::function<Tensor()>;

struct LossTerms {
  Tensor td;
  Tensor bvme;
  Tensor group;
  Tensor total;
};

// total = td + lambda_g * group + bvme. A missing hook contributes exactly zero.
LossTerms total_loss(const Tensor& td, const Tensor& bvme_penalty, const GroupRegularizer& group_hook,
                     double lambda_g);

}  // namespace bvme
