#include "bvme/env.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <random>

#include "bvme/errors.hpp"

namespace bvme {

namespace {

void check_actions(std::span<const std::size_t> joint_action, const DecPomdpSpec& spec, bool done) {
  if (done) throw ContractError("step: episode is over; call reset first");
  if (joint_action.size() != spec.n_agents)
    throw ContractError("step: expected " + std::to_string(spec.n_agents) + " actions, got " +
                        std::to_string(joint_action.size()));
  for (std::size_t a : joint_action)
    if (a >= spec.n_actions)
      throw ContractError("step: action " + std::to_string(a) + " outside [0, " +
                          std::to_string(spec.n_actions) + ")");
}

int manhattan(Cell a, Cell b) { return std::abs(a.x - b.x) + std::abs(a.y - b.y); }
int chebyshev(Cell a, Cell b) { return std::max(std::abs(a.x - b.x), std::abs(a.y - b.y)); }

constexpr int kDx[5] = {0, 0, 0, -1, 1};
constexpr int kDy[5] = {0, -1, 1, 0, 0};

}  // namespace

// ---- gather -------------------------------------------------------------------------

GatherEnv::GatherEnv(GatherParams params) : params_(params) {
  if (params_.n_agents < 1 || params_.n_actions < 2 || params_.horizon < 1 ||
      params_.target_arm >= params_.n_actions)
    throw ConfigError("gather: invalid parameters");
  spec_.n_agents = params_.n_agents;
  spec_.n_actions = params_.n_actions;
  spec_.horizon = params_.horizon;
  spec_.obs_dim = params_.n_actions + 1 + params_.n_agents;
  spec_.state_dim = params_.n_actions + 1;
  spec_.reward_bound = std::fabs(params_.success_reward);
}

StepResult GatherEnv::observe(double reward, bool terminated, bool success) const {
  StepResult r;
  const double phase = static_cast<double>(t_) / static_cast<double>(params_.horizon);
  for (std::size_t i = 0; i < params_.n_agents; ++i) {
    std::vector<double> o(spec_.obs_dim, 0.0);
    o[params_.target_arm] = 1.0;
    o[params_.n_actions] = phase;
    o[params_.n_actions + 1 + i] = 1.0;
    r.observations.push_back(std::move(o));
  }
  r.state.assign(spec_.state_dim, 0.0);
  r.state[params_.target_arm] = 1.0;
  r.state[params_.n_actions] = phase;
  r.reward = reward;
  r.terminated = terminated;
  r.info["success"] = success ? 1.0 : 0.0;
  return r;
}

StepResult GatherEnv::reset(std::uint64_t /*seed*/) {
  t_ = 0;
  done_ = false;
  return observe(0.0, false, false);
}

StepResult GatherEnv::step(std::span<const std::size_t> joint_action) {
  check_actions(joint_action, spec_, done_);
  const bool all_on_target = std::all_of(joint_action.begin(), joint_action.end(),
                                         [&](std::size_t a) { return a == params_.target_arm; });
  ++t_;
  done_ = all_on_target || t_ >= params_.horizon;
  return observe(all_on_target ? params_.success_reward : 0.0, done_, all_on_target);
}

// ---- tag grid -----------------------------------------------------------------------

TagGridEnv::TagGridEnv(TagGridParams params) : params_(params) {
  if (params_.grid < 3 || params_.predators < 2 || params_.horizon < 1 || params_.sense_radius < 1 ||
      params_.predators + 1 > params_.grid * params_.grid || params_.capture_support >= params_.predators)
    throw ConfigError("tag_grid: invalid parameters");
  spec_.n_agents = params_.predators;
  spec_.n_actions = 5;
  spec_.horizon = params_.horizon;
  spec_.obs_dim = 3 * params_.predators + 2;
  spec_.state_dim = 2 * params_.predators + 3;
  spec_.reward_bound = std::fabs(params_.capture_reward);
}

StepResult TagGridEnv::observe(double reward, bool terminated, bool captured) const {
  StepResult r;
  const double span = static_cast<double>(params_.grid - 1);
  const double radius = static_cast<double>(params_.sense_radius);
  const int sense = static_cast<int>(params_.sense_radius);
  auto relative = [&](std::vector<double>& o, Cell self, Cell other) {
    if (chebyshev(self, other) <= sense) {
      o.push_back((other.x - self.x) / radius);
      o.push_back((other.y - self.y) / radius);
      o.push_back(1.0);
    } else {
      o.insert(o.end(), {0.0, 0.0, 0.0});
    }
  };
  for (std::size_t i = 0; i < predators_.size(); ++i) {
    std::vector<double> o;
    o.reserve(spec_.obs_dim);
    o.push_back(predators_[i].x / span);
    o.push_back(predators_[i].y / span);
    relative(o, predators_[i], prey_);
    for (std::size_t j = 0; j < predators_.size(); ++j)
      if (j != i) relative(o, predators_[i], predators_[j]);
    r.observations.push_back(std::move(o));
  }
  for (const Cell& c : predators_) {
    r.state.push_back(c.x / span);
    r.state.push_back(c.y / span);
  }
  r.state.push_back(prey_.x / span);
  r.state.push_back(prey_.y / span);
  r.state.push_back(static_cast<double>(t_) / static_cast<double>(params_.horizon));
  r.reward = reward;
  r.terminated = terminated;
  r.info["success"] = captured ? 1.0 : 0.0;
  r.info["captured"] = captured ? 1.0 : 0.0;
  return r;
}

StepResult TagGridEnv::reset(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int w = static_cast<int>(params_.grid);
  std::vector<Cell> cells;
  for (int y = 0; y < w; ++y)
    for (int x = 0; x < w; ++x) cells.push_back({x, y});
  std::shuffle(cells.begin(), cells.end(), rng);
  predators_.assign(cells.begin(), cells.begin() + static_cast<std::ptrdiff_t>(params_.predators));
  // Prey starts on the first remaining cell not adjacent to any predator.
  auto rest = cells.begin() + static_cast<std::ptrdiff_t>(params_.predators);
  auto it = std::find_if(rest, cells.end(), [&](Cell c) {
    return std::all_of(predators_.begin(), predators_.end(), [&](Cell p) { return manhattan(c, p) >= 2; });
  });
  prey_ = it != cells.end() ? *it : *rest;
  t_ = 0;
  done_ = false;
  return observe(0.0, false, false);
}

void TagGridEnv::set_positions(std::vector<Cell> predators, Cell prey) {
  if (predators.size() != params_.predators) throw ContractError("tag_grid: wrong predator count");
  predators_ = std::move(predators);
  prey_ = prey;
  done_ = false;
}

bool TagGridEnv::captured() const {
  bool on_cell = false;
  std::size_t near = 0;
  for (const Cell& p : predators_) {
    const int d = manhattan(p, prey_);
    on_cell = on_cell || d == 0;
    if (d <= 1) ++near;
  }
  return on_cell && near >= params_.capture_support + 1;
}

void TagGridEnv::move_prey() {
  const int w = static_cast<int>(params_.grid);
  auto nearest = [&](Cell c) {
    int best = 1 << 30;
    for (const Cell& p : predators_) best = std::min(best, manhattan(c, p));
    return best;
  };
  for (std::size_t s = 0; s < params_.prey_moves; ++s) {
    Cell best = prey_;
    int best_score = nearest(prey_);
    for (int a = 1; a < 5; ++a) {
      const Cell c{prey_.x + kDx[a], prey_.y + kDy[a]};
      if (c.x < 0 || c.y < 0 || c.x >= w || c.y >= w) continue;
      const int score = nearest(c);
      if (score == 0) continue;
      if (score > best_score) {
        best = c;
        best_score = score;
      }
    }
    prey_ = best;
  }
}

StepResult TagGridEnv::step(std::span<const std::size_t> joint_action) {
  check_actions(joint_action, spec_, done_);
  const int w = static_cast<int>(params_.grid);
  for (std::size_t i = 0; i < predators_.size(); ++i) {
    const Cell c{predators_[i].x + kDx[joint_action[i]], predators_[i].y + kDy[joint_action[i]]};
    if (c.x >= 0 && c.y >= 0 && c.x < w && c.y < w) predators_[i] = c;
  }
  ++t_;
  const bool caught = captured();
  if (!caught) move_prey();
  done_ = caught || t_ >= params_.horizon;
  return observe(caught ? params_.capture_reward : 0.0, done_, caught);
}

// ---- factory ------------------------------------------------------------------------

namespace {

template <typename T>
void read_field(const nlohmann::json& params, const char* key, T& field, std::size_t& used) {
  if (params.contains(key)) {
    field = params.at(key).get<T>();
    ++used;
  }
}

}  // namespace

std::unique_ptr<Env> make_env(const std::string& name, const nlohmann::json& params) {
  if (!params.is_object() && !params.is_null()) throw ConfigError("env params must be an object");
  const nlohmann::json p = params.is_null() ? nlohmann::json::object() : params;
  std::size_t used = 0;
  std::unique_ptr<Env> env;
  try {
    if (name == "gather") {
      GatherParams g;
      read_field(p, "n_agents", g.n_agents, used);
      read_field(p, "n_actions", g.n_actions, used);
      read_field(p, "horizon", g.horizon, used);
      read_field(p, "target_arm", g.target_arm, used);
      read_field(p, "success_reward", g.success_reward, used);
      if (g.n_agents < 2 || g.n_agents > 4 || g.horizon > 5)
        throw ConfigError("gather: expects 2-4 agents and horizon <= 5");
      env = std::make_unique<GatherEnv>(g);
    } else if (name == "tag_grid") {
      TagGridParams t;
      read_field(p, "grid", t.grid, used);
      read_field(p, "predators", t.predators, used);
      read_field(p, "horizon", t.horizon, used);
      read_field(p, "sense_radius", t.sense_radius, used);
      read_field(p, "prey_moves", t.prey_moves, used);
      read_field(p, "capture_support", t.capture_support, used);
      read_field(p, "capture_reward", t.capture_reward, used);
      env = std::make_unique<TagGridEnv>(t);
    } else {
      throw ConfigError("unknown environment '" + name + "' (expected gather or tag_grid)");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("env params for '" + name + "': " + e.what());
  }
  if (used != p.size()) throw ConfigError("env params for '" + name + "' contain unknown fields");
  return env;
}

void write_trace_record(std::ostream& out, std::size_t t, std::span<const std::size_t> joint_action,
                        const StepResult& result) {
  nlohmann::json rec{{"t", t},
                     {"actions", std::vector<std::size_t>(joint_action.begin(), joint_action.end())},
                     {"reward", result.reward},
                     {"terminated", result.terminated},
                     {"state", result.state},
                     {"success", result.info.at("success")}};
  out << rec.dump() << '\n';
}

}  // namespace bvme
