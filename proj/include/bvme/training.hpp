#pragma once

// Episode replay, exploration, target-network management and the training
// iteration: sample a batch of padded episodes, run the message pipeline and
// recurrent agents over it, mix, regress onto frozen-target TD targets plus
// the bandwidth penalty, and take one clipped RMSprop step.

#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bvme/env.hpp"
#include "bvme/graph.hpp"
#include "bvme/nn.hpp"
#include "bvme/value.hpp"
#include "bvme/variational.hpp"

namespace bvme {

enum class Method { kBvme, kGacgPlain, kDicgDense, kQmixNoGraph };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct TrainConfig {
  Method method = Method::kBvme;
  GraphMode graph_mode = GraphMode::kLearned;
  std::size_t topk = 0;  // 0 keeps every edge
  bool sample_train_adjacency = true;
  ExecutionMode eval_adjacency = ExecutionMode::kMean;
  SampleMode target_messages = SampleMode::kMean;
  double edge_noise_init = 0.1;

  double ratio = 0.05;  // d_msg = max(1, round(ratio * d_obs))
  BvmeConfig bvme;
  bool include_bvme_penalty = true;
  double lambda_g = 0.0;

  std::size_t agent_hidden = 64;
  std::size_t gnn_hidden = 128;
  std::size_t gnn_layers = 2;
  std::size_t attn_dim = 16;
  std::size_t mixer_embed = 32;

  RmsPropConfig optimizer;
  std::size_t batch_size = 32;
  std::size_t buffer_capacity = 5000;
  double gamma = 0.99;
  double eps_start = 1.0;
  double eps_end = 0.05;
  std::uint64_t eps_anneal_steps = 50000;  // environment steps
  std::size_t target_update_episodes = 200;
  std::size_t train_per_episode = 1;
};

// Linear anneal: max(end, start - (start - end) * step / anneal_steps).
double epsilon(std::uint64_t step, const TrainConfig& cfg = {});

// ---- model --------------------------------------------------------------------------

struct Model {
  DecPomdpSpec spec;
  TrainConfig config;
  std::size_t msg_dim = 0;

  MlpParams obs_encoder;  // d_obs -> d_msg, relu
  AttentionParams attention;
  Tensor edge_log_std;  // learned graphs only
  GnnParams gnn;        // d_msg -> gnn_hidden -> ... -> d_msg
  VariationalHeads heads;
  AgentQParams agent;
  MixerParams mixer;

  bool uses_graph() const { return config.method != Method::kQmixNoGraph; }
  bool uses_heads() const { return config.method == Method::kBvme; }
  bool uses_edge_noise() const { return uses_graph() && effective_graph_mode() == GraphMode::kLearned; }
  GraphMode effective_graph_mode() const;

  ParamSet params() const;
};

Model build_model(const DecPomdpSpec& spec, const TrainConfig& cfg, std::uint64_t seed);
Model clone_model(const Model& m);

struct MessageOptions {
  SampleMode messages = SampleMode::kMean;
  bool sample_adjacency = false;  // reparameterized draw of a learned graph
  ExecutionMode execution = ExecutionMode::kMean;
  const Tensor* cached_adjacency = nullptr;
  std::mt19937_64* rng = nullptr;
};

struct MessageOutput {
  Tensor z;                                  // [G * n, d_msg], fed to the agent network
  std::optional<GaussianPosterior> posterior;
  Tensor kl;                                 // [G * n] (bvme only)
  Tensor adjacency;                          // [G, n, n] (graph methods only)
};

// obs: [G * n, d_obs] for G independent agent groups.
MessageOutput compute_messages(const Model& m, const Tensor& obs, const MessageOptions& opt);

// ---- episodes and replay --------------------------------------------------------------

struct Episode {
  std::size_t length = 0;
  std::vector<double> obs;             // [T][n][d_obs]
  std::vector<std::size_t> actions;    // [T][n]
  std::vector<double> rewards;         // [T]
  std::vector<double> terminated;      // [T]
  std::vector<double> states;          // [T][d_state]
  double episode_return = 0.0;
  bool success = false;
};

// Time-major padded batch; mask[t][b] = 1 for t < length_b.
struct EpisodeBatch {
  std::size_t batch = 0;
  std::size_t steps = 0;
  std::size_t n_agents = 0;
  std::size_t obs_dim = 0;
  std::size_t state_dim = 0;
  std::vector<double> obs;           // [T][B][n][d_obs]
  std::vector<std::size_t> actions;  // [T][B][n]
  std::vector<double> rewards;       // [T][B]
  std::vector<double> terminated;    // [T][B]
  std::vector<double> mask;          // [T][B]
  std::vector<double> states;        // [T][B][d_state]

  double valid_steps() const;
};

EpisodeBatch make_batch(std::span<const Episode* const> episodes, const DecPomdpSpec& spec,
                        std::size_t pad_to = 0);

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);
  void push(Episode e);
  std::size_t size() const { return episodes_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Episode& at(std::size_t i) const { return episodes_.at(i); }
  // Uniform sample without replacement.
  std::vector<const Episode*> sample(std::size_t count, std::mt19937_64& rng) const;

 private:
  std::size_t capacity_;
  std::deque<Episode> episodes_;
};

// ---- run state ------------------------------------------------------------------------

struct RunState {
  Model online;
  Model target;
  OptimizerState optimizer;
  std::uint64_t env_steps = 0;
  std::uint64_t episodes = 0;
  std::uint64_t target_updates = 0;
  std::mt19937_64 env_rng;
  std::mt19937_64 explore_rng;
  std::mt19937_64 noise_rng;
  std::mt19937_64 batch_rng;
};

RunState make_run_state(const DecPomdpSpec& spec, const TrainConfig& cfg, std::uint64_t seed);

struct CollectOptions {
  std::optional<double> epsilon;  // overrides the schedule
  bool count_steps = true;        // advance env_steps / episodes
};

// Rolls out one epsilon-greedy episode with training-mode messages.
Episode collect_episode(RunState& run, Env& env, const CollectOptions& opt = {});

struct LossComponents {
  LossTerms terms;
  double mean_kl = 0.0;  // per agent-step, unweighted
};

// Builds the differentiable objective on a batch (no parameter update).
LossComponents compute_loss(RunState& run, const EpisodeBatch& batch,
                            const GroupRegularizer& group_hook = {});

struct TrainReport {
  double td = 0.0;
  double bvme = 0.0;
  double group = 0.0;
  double total = 0.0;
  double mean_kl = 0.0;
  double grad_norm_before = 0.0;
  double grad_norm_after = 0.0;
};

// nullopt while the buffer holds fewer than batch_size episodes.
std::optional<TrainReport> train_iteration(RunState& run, const ReplayBuffer& buffer,
                                           const GroupRegularizer& group_hook = {});

// Copies online -> target when the episode counter sits on a new multiple of the cadence.
bool maybe_update_target(RunState& run);

struct EvalMetrics {
  double success_rate = 0.0;
  double mean_return = 0.0;
};

// Greedy actions, mean-mode messages, cfg.eval_adjacency graphs. Episode k uses env seed seed + k.
EvalMetrics evaluate(const Model& model, Env& env, std::size_t episodes, std::uint64_t seed);

// Per-step greedy/epsilon-greedy action selection; ties go to the lowest index.
std::vector<std::size_t> select_actions(std::span<const double> q, std::size_t n_agents,
                                        std::size_t n_actions, double eps, std::mt19937_64& rng);

}  // namespace bvme
