#pragma once

// Desk-scale Dec-POMDP environments with a shared team reward.
//
// gather:   n agents each pick one of |U| arms. The team earns success_reward
//           (default +1) on a step where every agent picks the target arm and
//           the episode ends there; any other joint action pays 0. Episodes
//           also end at the horizon. Observation per agent:
//             [one-hot(target arm) (|U|), t / horizon, one-hot(agent id) (n)]
//           so d_obs = |U| + 1 + n. State: [one-hot(target arm), t / horizon].
//
// tag_grid: P predators chase one scripted prey on a W x W grid. Predator
//           actions: 0 stay, 1 up, 2 down, 3 left, 4 right (moves into walls
//           are no-ops; predators may share cells). Each step the predators
//           move simultaneously; the prey is captured when a predator stands
//           on its cell and at least `capture_support` other predators are on
//           or 4-adjacent to that cell. Capture pays capture_reward (+10) and
//           ends the episode. Otherwise the prey makes `prey_moves` greedy
//           sub-moves, each to the free cell (stay/up/down/left/right, in that
//           tie-break order) maximizing its Manhattan distance to the nearest
//           predator. Observation per predator i:
//             [x_i / (W-1), y_i / (W-1)]                            2
//             [dx, dy, visible] to the prey                         3
//             [dx, dy, visible] to every other predator (in order)  3 (P-1)
//           with dx, dy divided by the sensing radius; an entity farther than
//           the radius (Chebyshev distance) is written as [0, 0, 0].
//           d_obs = 3P + 2. State: all positions normalized, then t / horizon
//           (2P + 3 values).

#include <cstdint>
#include <map>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace bvme {

struct DecPomdpSpec {
  std::size_t n_agents = 0;
  std::size_t obs_dim = 0;
  std::size_t n_actions = 0;
  std::size_t horizon = 0;
  std::size_t state_dim = 0;
  double reward_bound = 0.0;  // |r_t| never exceeds this
};

struct StepResult {
  std::vector<std::vector<double>> observations;  // [n][d_obs]
  std::vector<double> state;
  double reward = 0.0;
  bool terminated = false;
  std::map<std::string, double> info;  // "success" is always present
};

class Env {
 public:
  virtual ~Env() = default;
  virtual std::string name() const = 0;
  virtual const DecPomdpSpec& spec() const = 0;
  virtual StepResult reset(std::uint64_t seed) = 0;
  virtual StepResult step(std::span<const std::size_t> joint_action) = 0;
};

struct GatherParams {
  std::size_t n_agents = 2;
  std::size_t n_actions = 3;
  std::size_t horizon = 3;
  std::size_t target_arm = 0;
  double success_reward = 1.0;
};

class GatherEnv final : public Env {
 public:
  explicit GatherEnv(GatherParams params);
  std::string name() const override { return "gather"; }
  const DecPomdpSpec& spec() const override { return spec_; }
  const GatherParams& params() const { return params_; }
  StepResult reset(std::uint64_t seed) override;
  StepResult step(std::span<const std::size_t> joint_action) override;

 private:
  StepResult observe(double reward, bool terminated, bool success) const;

  GatherParams params_;
  DecPomdpSpec spec_;
  std::size_t t_ = 0;
  bool done_ = true;
};

struct TagGridParams {
  std::size_t grid = 8;
  std::size_t predators = 4;
  std::size_t horizon = 50;
  std::size_t sense_radius = 3;
  std::size_t prey_moves = 2;
  std::size_t capture_support = 1;
  double capture_reward = 10.0;
};

struct Cell {
  int x = 0;
  int y = 0;
  bool operator==(const Cell&) const = default;
};

class TagGridEnv final : public Env {
 public:
  explicit TagGridEnv(TagGridParams params);
  std::string name() const override { return "tag_grid"; }
  const DecPomdpSpec& spec() const override { return spec_; }
  const TagGridParams& params() const { return params_; }
  StepResult reset(std::uint64_t seed) override;
  StepResult step(std::span<const std::size_t> joint_action) override;

  // Direct placement, for scripted scenarios.
  void set_positions(std::vector<Cell> predators, Cell prey);
  const std::vector<Cell>& predator_cells() const { return predators_; }
  Cell prey_cell() const { return prey_; }

 private:
  StepResult observe(double reward, bool terminated, bool captured) const;
  bool captured() const;
  void move_prey();

  TagGridParams params_;
  DecPomdpSpec spec_;
  std::vector<Cell> predators_;
  Cell prey_;
  std::size_t t_ = 0;
  bool done_ = true;
};

// name in {gather, tag_grid}; params is an object of overrides for the
// corresponding *Params fields. Unknown names or fields raise ConfigError.
std::unique_ptr<Env> make_env(const std::string& name, const nlohmann::json& params = nlohmann::json::object());

// One line-delimited JSON record per step.
void write_trace_record(std::ostream& out, std::size_t t, std::span<const std::size_t> joint_action,
                        const StepResult& result);

}  // namespace bvme
