#pragma once

// Experiment configs, seeded training runs, learning-curve metrics and sweeps.
//
// Config file (JSON). Every section is optional; unknown keys are errors.
//   name:     string used in run ids
//   env:      {name: gather | tag_grid, params: {...environment overrides}}
//   method:   {name, r, graph_mode: learned | dense, topk, edge_noise_init,
//              sample_train_adjacency, eval_adjacency: dynamic | static_sampled | mean,
//              target_messages: mean | stochastic}
//   bvme:     {lambda_kl, sigma0, coupling: on_path | off_path, sample_mode,
//              normalize_by_dim, logvar_min, logvar_max, include_penalty}
//   network:  {agent_hidden, gnn_hidden, gnn_layers, attn_dim, mixer_embed}
//   training: {seeds, total_env_steps, eval_every, eval_episodes, eval_seed,
//              checkpoint_every, stop_at_success, lr, rms_alpha, rms_eps,
//              clip_norm, batch_size, buffer_capacity, gamma, eps_start,
//              eps_end, eps_anneal_steps, target_update_episodes,
//              train_per_episode, lambda_g}
//   sweep:    {axis: r | lambda_sigma | coupling | backbone, values, baseline_method, workers}
//   output:   {dir}

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bvme/training.hpp"

namespace bvme {

struct SweepSpec {
  std::string axis;
  nlohmann::json values = nlohmann::json::array();  // empty: axis defaults
  Method baseline_method = Method::kGacgPlain;
  std::size_t workers = 1;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string env_name = "gather";
  nlohmann::json env_params = nlohmann::json::object();
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0};
  std::uint64_t total_env_steps = 20000;
  std::uint64_t eval_every = 2000;
  std::size_t eval_episodes = 32;
  std::uint64_t eval_seed = 1000003;
  std::uint64_t checkpoint_every = 0;     // env steps; 0 writes the final checkpoint only
  std::optional<double> stop_at_success;  // end a seed once evaluation reaches this rate
  SweepSpec sweep;
  std::string output_dir;
  std::vector<std::string> warnings;
};

// Parses and validates; throws ConfigError on anything malformed.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json config_to_json(const ExperimentConfig& cfg);
void validate(const ExperimentConfig& cfg);

// ---- curves and metrics ----------------------------------------------------------------

struct LearningCurve {
  std::vector<double> steps;   // strictly increasing
  std::vector<double> values;  // in [0, 1]
  std::vector<double> stderrs;
};

// Trapezoid rule with steps rescaled to [0, 1].
double compute_auc(const LearningCurve& curve);
// AUC(a) - AUC(b) after both are interpolated onto the union of their steps
// inside the overlapping range.
double compute_delta_auc(const LearningCurve& a, const LearningCurve& b);
// Signed normalized integral of (high - low) on the same common grid.
double compute_drop_area(const LearningCurve& high, const LearningCurve& low);

// (0.30 - r) / 0.30
double message_reduction(double r);

// ---- runs ------------------------------------------------------------------------------

struct EvalPoint {
  std::uint64_t env_steps = 0;
  double success_rate = 0.0;
  double mean_return = 0.0;
  double td = 0.0;
  double bvme = 0.0;
  double mean_kl = 0.0;
};

struct RunResult {
  std::uint64_t seed = 0;
  std::string run_id;
  std::vector<EvalPoint> points;
  std::uint64_t env_steps = 0;  // steps actually collected
  bool stopped_early = false;
  double final_success = 0.0;
  double auc = 0.0;
  std::string checkpoint;  // final online parameters
};

// One seed; appends metric records to `metrics` when given.
RunResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed, std::ostream* metrics = nullptr);

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<RunResult> runs;
  LearningCurve curve;  // mean over seeds with standard errors
  std::size_t msg_dim = 0;
  double auc = 0.0;
  double auc_stderr = 0.0;
  double final_success = 0.0;
  double final_stderr = 0.0;
};

// Runs every seed. With an output directory it writes metrics.jsonl,
// summary.json and checkpoints/ there.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

nlohmann::json summary_to_json(const ExperimentResult& r);
// Curves carried by per-seed runs; the mean curve rebuilt from them.
ExperimentResult summary_from_json(const nlohmann::json& j);

// Seed-averaged curve on the shared evaluation grid. A seed that stopped early
// keeps its last value for the remaining grid points.
LearningCurve aggregate_curves(const std::vector<RunResult>& runs);

// Sample standard deviation / sqrt(count); 0 for fewer than two values.
double standard_error(const std::vector<double>& xs);

// ---- sweeps ----------------------------------------------------------------------------

struct SweepCell {
  std::string axis_value;
  ExperimentConfig config;
};

std::vector<SweepCell> sweep_cells(const ExperimentConfig& base, const std::string& axis);

struct SweepRow {
  std::string axis_value;
  std::size_t seed_count = 0;
  double auc = 0.0;
  double auc_stderr = 0.0;
  double final_success = 0.0;
  double delta_auc_vs_baseline = 0.0;
  std::string error;  // non-empty when the cell failed
};

struct SweepResult {
  std::string axis;
  std::vector<SweepRow> rows;
};

// Runs each cell and a baseline-method twin per cell (deduplicated), possibly on
// several worker threads. A failing cell is recorded and the sweep continues.
SweepResult run_sweep(const ExperimentConfig& base, const std::string& axis);

std::string sweep_csv(const SweepResult& r);

// Table of every summary.json under dir (recursively).
std::string report(const std::filesystem::path& dir);

}  // namespace bvme
