#include "bvme/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <type_traits>

#include "bvme/errors.hpp"

namespace bvme {

using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

// Reads keys from one config section and rejects any it did not consume.
class Section {
 public:
  Section(const json& root, const std::string& name) : name_(name) {
    if (root.contains(name)) {
      j_ = root.at(name);
      if (!j_.is_object()) throw ConfigError("config section '" + name + "' must be an object");
    } else {
      j_ = json::object();
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  template <typename T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    const json& v = j_.at(key);
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0) throw ConfigError(where(key) + " must be a non-negative integer");
    }
    try {
      out = v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  const json& raw(const char* key) {
    used_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!used_.count(item.key())) throw ConfigError("unknown config key '" + where(item.key().c_str()) + "'");
  }

 private:
  std::string where(const char* key) const { return name_ + "." + key; }

  std::string name_;
  json j_;
  std::set<std::string> used_;
};

GraphMode parse_graph_mode(const std::string& s) {
  if (s == "learned") return GraphMode::kLearned;
  if (s == "dense") return GraphMode::kDense;
  throw ConfigError("graph_mode must be learned or dense, got '" + s + "'");
}

std::string graph_mode_name(GraphMode m) { return m == GraphMode::kLearned ? "learned" : "dense"; }

ExecutionMode parse_execution(const std::string& s) {
  if (s == "dynamic") return ExecutionMode::kDynamic;
  if (s == "static_sampled") return ExecutionMode::kStaticSampled;
  if (s == "mean") return ExecutionMode::kMean;
  throw ConfigError("execution mode must be dynamic, static_sampled or mean, got '" + s + "'");
}

std::string execution_name(ExecutionMode m) {
  switch (m) {
    case ExecutionMode::kDynamic: return "dynamic";
    case ExecutionMode::kStaticSampled: return "static_sampled";
    case ExecutionMode::kMean: return "mean";
  }
  return "mean";
}

SampleMode parse_sample_mode(const std::string& s) {
  if (s == "stochastic") return SampleMode::kStochastic;
  if (s == "mean") return SampleMode::kMean;
  throw ConfigError("sample mode must be stochastic or mean, got '" + s + "'");
}

std::string sample_mode_name(SampleMode m) { return m == SampleMode::kStochastic ? "stochastic" : "mean"; }

Coupling parse_coupling(const std::string& s) {
  if (s == "on_path") return Coupling::kOnPath;
  if (s == "off_path") return Coupling::kOffPath;
  throw ConfigError("coupling must be on_path or off_path, got '" + s + "'");
}

std::string coupling_name(Coupling c) { return c == Coupling::kOnPath ? "on_path" : "off_path"; }

const std::set<std::string> kAxes{"r", "lambda_sigma", "coupling", "backbone"};

}  // namespace

// ---- config ---------------------------------------------------------------------------

ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> sections{"name", "env", "method", "bvme", "network", "training", "sweep", "output"};
  for (const auto& item : j.items())
    if (!sections.count(item.key())) throw ConfigError("unknown config section '" + item.key() + "'");

  ExperimentConfig c;
  TrainConfig& t = c.train;
  if (j.contains("name")) {
    if (!j.at("name").is_string()) throw ConfigError("name must be a string");
    c.name = j.at("name").get<std::string>();
  }

  Section env(j, "env");
  env.get("name", c.env_name);
  if (env.has("params")) c.env_params = env.raw("params");
  env.finish();

  Section method(j, "method");
  std::string s;
  if (method.has("name")) {
    method.get("name", s);
    t.method = method_from_string(s);
  }
  method.get("r", t.ratio);
  if (method.has("graph_mode")) {
    method.get("graph_mode", s);
    t.graph_mode = parse_graph_mode(s);
  }
  method.get("topk", t.topk);
  method.get("edge_noise_init", t.edge_noise_init);
  method.get("sample_train_adjacency", t.sample_train_adjacency);
  if (method.has("eval_adjacency")) {
    method.get("eval_adjacency", s);
    t.eval_adjacency = parse_execution(s);
  }
  if (method.has("target_messages")) {
    method.get("target_messages", s);
    t.target_messages = parse_sample_mode(s);
  }
  method.finish();

  Section bvme(j, "bvme");
  const bool bvme_given = j.contains("bvme") && !j.at("bvme").empty();
  bvme.get("lambda_kl", t.bvme.lambda_kl);
  bvme.get("sigma0", t.bvme.sigma0);
  if (bvme.has("coupling")) {
    bvme.get("coupling", s);
    t.bvme.coupling = parse_coupling(s);
  }
  if (bvme.has("sample_mode")) {
    bvme.get("sample_mode", s);
    t.bvme.sample_mode = parse_sample_mode(s);
  }
  bvme.get("normalize_by_dim", t.bvme.normalize_by_dim);
  bvme.get("logvar_min", t.bvme.logvar_min);
  bvme.get("logvar_max", t.bvme.logvar_max);
  bvme.get("include_penalty", t.include_bvme_penalty);
  bvme.finish();
  if (bvme_given && t.method != Method::kBvme)
    c.warnings.push_back("bvme settings are ignored for method " + to_string(t.method));

  Section net(j, "network");
  net.get("agent_hidden", t.agent_hidden);
  net.get("gnn_hidden", t.gnn_hidden);
  net.get("gnn_layers", t.gnn_layers);
  net.get("attn_dim", t.attn_dim);
  net.get("mixer_embed", t.mixer_embed);
  net.finish();

  Section tr(j, "training");
  tr.get("seeds", c.seeds);
  tr.get("total_env_steps", c.total_env_steps);
  tr.get("eval_every", c.eval_every);
  tr.get("eval_episodes", c.eval_episodes);
  tr.get("eval_seed", c.eval_seed);
  tr.get("checkpoint_every", c.checkpoint_every);
  if (tr.has("stop_at_success")) {
    double v = 0.0;
    tr.get("stop_at_success", v);
    c.stop_at_success = v;
  }
  tr.get("lr", t.optimizer.lr);
  tr.get("rms_alpha", t.optimizer.alpha);
  tr.get("rms_eps", t.optimizer.eps);
  tr.get("clip_norm", t.optimizer.clip_norm);
  tr.get("batch_size", t.batch_size);
  tr.get("buffer_capacity", t.buffer_capacity);
  tr.get("gamma", t.gamma);
  tr.get("eps_start", t.eps_start);
  tr.get("eps_end", t.eps_end);
  tr.get("eps_anneal_steps", t.eps_anneal_steps);
  tr.get("target_update_episodes", t.target_update_episodes);
  tr.get("train_per_episode", t.train_per_episode);
  tr.get("lambda_g", t.lambda_g);
  tr.finish();

  Section sw(j, "sweep");
  sw.get("axis", c.sweep.axis);
  if (sw.has("values")) c.sweep.values = sw.raw("values");
  if (sw.has("baseline_method")) {
    sw.get("baseline_method", s);
    c.sweep.baseline_method = method_from_string(s);
  }
  sw.get("workers", c.sweep.workers);
  sw.finish();

  Section out(j, "output");
  out.get("dir", c.output_dir);
  out.finish();

  validate(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

void validate(const ExperimentConfig& c) {
  const TrainConfig& t = c.train;
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(t.ratio > 0.0 && t.ratio <= 1.0, "method.r must lie in (0, 1]");
  require(!c.seeds.empty(), "training.seeds must not be empty");
  require(c.eval_every > 0, "training.eval_every must be positive");
  require(c.eval_episodes > 0, "training.eval_episodes must be positive");
  require(!c.stop_at_success || (*c.stop_at_success > 0.0 && *c.stop_at_success <= 1.0),
          "training.stop_at_success must lie in (0, 1]");
  require(t.batch_size > 0, "training.batch_size must be positive");
  require(t.buffer_capacity >= t.batch_size, "training.buffer_capacity must be at least batch_size");
  require(t.gamma >= 0.0 && t.gamma <= 1.0, "training.gamma must lie in [0, 1]");
  require(t.optimizer.lr > 0.0, "training.lr must be positive");
  require(t.optimizer.alpha >= 0.0 && t.optimizer.alpha < 1.0, "training.rms_alpha must lie in [0, 1)");
  require(t.optimizer.eps > 0.0, "training.rms_eps must be positive");
  require(t.optimizer.clip_norm > 0.0, "training.clip_norm must be positive");
  require(t.eps_start >= 0.0 && t.eps_start <= 1.0 && t.eps_end >= 0.0 && t.eps_end <= 1.0,
          "training.eps_start and eps_end must lie in [0, 1]");
  require(t.agent_hidden > 0 && t.gnn_hidden > 0 && t.gnn_layers > 0 && t.attn_dim > 0 && t.mixer_embed > 0,
          "network sizes must be positive");
  require(t.bvme.sigma0 > 0.0, "bvme.sigma0 must be positive");
  require(t.bvme.lambda_kl >= 0.0, "bvme.lambda_kl must be non-negative");
  require(t.bvme.logvar_min < t.bvme.logvar_max, "bvme.logvar_min must be below logvar_max");
  require(t.edge_noise_init > 0.0, "method.edge_noise_init must be positive");
  require(c.sweep.axis.empty() || kAxes.count(c.sweep.axis), "sweep.axis must be one of r, lambda_sigma, coupling, backbone");
  require(c.sweep.workers > 0, "sweep.workers must be positive");

  const auto env = make_env(c.env_name, c.env_params);
  const std::size_t n = env->spec().n_agents;
  if (t.method != Method::kQmixNoGraph) {
    require(n >= 2, "graph methods need at least two agents");
    require(t.topk == 0 || t.topk <= n - 1, "method.topk must be at most n_agents - 1");
  }
}

json config_to_json(const ExperimentConfig& c) {
  const TrainConfig& t = c.train;
  json j;
  j["name"] = c.name;
  j["env"] = {{"name", c.env_name}, {"params", c.env_params}};
  j["method"] = {{"name", to_string(t.method)},
                 {"r", t.ratio},
                 {"graph_mode", graph_mode_name(t.graph_mode)},
                 {"topk", t.topk},
                 {"edge_noise_init", t.edge_noise_init},
                 {"sample_train_adjacency", t.sample_train_adjacency},
                 {"eval_adjacency", execution_name(t.eval_adjacency)},
                 {"target_messages", sample_mode_name(t.target_messages)}};
  j["bvme"] = {{"lambda_kl", t.bvme.lambda_kl},
               {"sigma0", t.bvme.sigma0},
               {"coupling", coupling_name(t.bvme.coupling)},
               {"sample_mode", sample_mode_name(t.bvme.sample_mode)},
               {"normalize_by_dim", t.bvme.normalize_by_dim},
               {"logvar_min", t.bvme.logvar_min},
               {"logvar_max", t.bvme.logvar_max},
               {"include_penalty", t.include_bvme_penalty}};
  j["network"] = {{"agent_hidden", t.agent_hidden},
                  {"gnn_hidden", t.gnn_hidden},
                  {"gnn_layers", t.gnn_layers},
                  {"attn_dim", t.attn_dim},
                  {"mixer_embed", t.mixer_embed}};
  json tr = {{"seeds", c.seeds},
             {"total_env_steps", c.total_env_steps},
             {"eval_every", c.eval_every},
             {"eval_episodes", c.eval_episodes},
             {"eval_seed", c.eval_seed},
             {"checkpoint_every", c.checkpoint_every},
             {"lr", t.optimizer.lr},
             {"rms_alpha", t.optimizer.alpha},
             {"rms_eps", t.optimizer.eps},
             {"clip_norm", t.optimizer.clip_norm},
             {"batch_size", t.batch_size},
             {"buffer_capacity", t.buffer_capacity},
             {"gamma", t.gamma},
             {"eps_start", t.eps_start},
             {"eps_end", t.eps_end},
             {"eps_anneal_steps", t.eps_anneal_steps},
             {"target_update_episodes", t.target_update_episodes},
             {"train_per_episode", t.train_per_episode},
             {"lambda_g", t.lambda_g}};
  if (c.stop_at_success) tr["stop_at_success"] = *c.stop_at_success;
  j["training"] = tr;
  json sw = {{"baseline_method", to_string(c.sweep.baseline_method)}, {"workers", c.sweep.workers}};
  if (!c.sweep.axis.empty()) sw["axis"] = c.sweep.axis;
  if (!c.sweep.values.empty()) sw["values"] = c.sweep.values;
  j["sweep"] = sw;
  j["output"] = json::object();
  if (!c.output_dir.empty()) j["output"]["dir"] = c.output_dir;
  return j;
}

// ---- metrics --------------------------------------------------------------------------

namespace {

void check_curve(const LearningCurve& c, const char* what) {
  if (c.steps.size() != c.values.size()) throw ContractError(std::string(what) + ": steps and values differ in length");
  if (c.steps.size() < 2) throw ContractError(std::string(what) + ": need at least two points");
  for (std::size_t i = 1; i < c.steps.size(); ++i)
    if (!(c.steps[i] > c.steps[i - 1])) throw ContractError(std::string(what) + ": steps must be strictly increasing");
}

double trapezoid(std::span<const double> x, std::span<const double> y) {
  const double x0 = x.front(), span = x.back() - x.front();
  double area = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    const double w = (x[i] - x0) / span - (x[i - 1] - x0) / span;
    area += 0.5 * w * (y[i] + y[i - 1]);
  }
  return area;
}

double interpolate(const LearningCurve& c, double x) {
  const auto it = std::lower_bound(c.steps.begin(), c.steps.end(), x);
  const auto i = static_cast<std::size_t>(it - c.steps.begin());
  if (i < c.steps.size() && c.steps[i] == x) return c.values[i];
  const double x0 = c.steps[i - 1], x1 = c.steps[i];
  const double w = (x - x0) / (x1 - x0);
  return c.values[i - 1] + w * (c.values[i] - c.values[i - 1]);
}

struct Aligned {
  std::vector<double> grid, a, b;
};

Aligned align(const LearningCurve& a, const LearningCurve& b) {
  check_curve(a, "curve alignment");
  check_curve(b, "curve alignment");
  const double lo = std::max(a.steps.front(), b.steps.front());
  const double hi = std::min(a.steps.back(), b.steps.back());
  if (!(hi > lo)) throw ContractError("curve alignment: step ranges do not overlap");
  std::set<double> grid{lo, hi};
  for (double x : a.steps)
    if (x > lo && x < hi) grid.insert(x);
  for (double x : b.steps)
    if (x > lo && x < hi) grid.insert(x);
  Aligned out;
  out.grid.assign(grid.begin(), grid.end());
  for (double x : out.grid) {
    out.a.push_back(interpolate(a, x));
    out.b.push_back(interpolate(b, x));
  }
  return out;
}

}  // namespace

double compute_auc(const LearningCurve& curve) {
  check_curve(curve, "compute_auc");
  return trapezoid(curve.steps, curve.values);
}

double compute_delta_auc(const LearningCurve& a, const LearningCurve& b) {
  const Aligned al = align(a, b);
  return trapezoid(al.grid, al.a) - trapezoid(al.grid, al.b);
}

double compute_drop_area(const LearningCurve& high, const LearningCurve& low) {
  const Aligned al = align(high, low);
  std::vector<double> diff(al.grid.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = al.a[i] - al.b[i];
  return trapezoid(al.grid, diff);
}

double message_reduction(double r) { return (0.30 - r) / 0.30; }

double standard_error(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  return sd / std::sqrt(static_cast<double>(xs.size()));
}

// ---- runs -----------------------------------------------------------------------------

namespace {

json point_record(const std::string& run_id, const EvalPoint& p) {
  return {{"run_id", run_id},         {"env_steps", p.env_steps}, {"success_rate", p.success_rate},
          {"mean_return", p.mean_return}, {"td", p.td},           {"bvme", p.bvme},
          {"mean_kl", p.mean_kl}};
}

std::string sanitize(const std::string& s) {
  std::string out;
  for (char ch : s) out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '-') ? ch : '_';
  return out;
}

RunResult run_seed_impl(const ExperimentConfig& cfg, std::uint64_t seed, std::ostream* metrics,
                        const std::filesystem::path* checkpoint_dir) {
  auto env = make_env(cfg.env_name, cfg.env_params);
  auto eval_env = make_env(cfg.env_name, cfg.env_params);
  RunState run = make_run_state(env->spec(), cfg.train, seed);
  ReplayBuffer buffer(cfg.train.buffer_capacity);

  RunResult res;
  res.seed = seed;
  res.run_id = cfg.name + "_s" + std::to_string(seed);
  TrainReport last{};
  std::uint64_t next_eval = 0;

  auto save = [&](const std::string& tag) {
    if (!checkpoint_dir) return;
    std::filesystem::create_directories(*checkpoint_dir);
    save_checkpoint(run.online.params(), *checkpoint_dir / (res.run_id + "_" + tag + ".json"));
  };
  auto record = [&](std::uint64_t nominal, const EvalMetrics& m) {
    EvalPoint p{nominal, m.success_rate, m.mean_return, last.td, last.bvme, last.mean_kl};
    res.points.push_back(p);
    if (metrics) *metrics << point_record(res.run_id, p).dump() << '\n';
    if (cfg.checkpoint_every > 0 && nominal > 0 && nominal % cfg.checkpoint_every == 0)
      save("step" + std::to_string(nominal));
  };
  // Records every grid point up to `upto` with one shared evaluation.
  auto evaluate_through = [&](std::uint64_t upto) -> std::optional<EvalMetrics> {
    std::optional<EvalMetrics> m;
    while (next_eval <= upto && next_eval <= cfg.total_env_steps) {
      if (!m) m = evaluate(run.online, *eval_env, cfg.eval_episodes, cfg.eval_seed);
      record(next_eval, *m);
      next_eval += cfg.eval_every;
    }
    return m;
  };
  auto reached = [&](const std::optional<EvalMetrics>& m) {
    return cfg.stop_at_success && m && m->success_rate >= *cfg.stop_at_success;
  };

  bool stop = reached(evaluate_through(0));
  while (!stop && run.env_steps < cfg.total_env_steps) {
    buffer.push(collect_episode(run, *env));
    for (std::size_t k = 0; k < cfg.train.train_per_episode; ++k)
      if (auto rep = train_iteration(run, buffer)) last = *rep;
    maybe_update_target(run);
    stop = reached(evaluate_through(run.env_steps));
  }
  if (!stop && res.points.back().env_steps < cfg.total_env_steps)
    record(cfg.total_env_steps, evaluate(run.online, *eval_env, cfg.eval_episodes, cfg.eval_seed));

  res.stopped_early = stop && run.env_steps < cfg.total_env_steps;
  res.env_steps = run.env_steps;
  res.final_success = res.points.back().success_rate;
  res.checkpoint = checkpoint_to_string(run.online.params());
  save("final");
  return res;
}

// A run's values on the shared grid, holding its last value after an early stop.
LearningCurve padded_curve(const RunResult& r, const std::vector<double>& grid) {
  LearningCurve c;
  c.steps = grid;
  for (std::size_t i = 0; i < grid.size(); ++i)
    c.values.push_back(r.points[std::min(i, r.points.size() - 1)].success_rate);
  return c;
}

double curve_auc(const LearningCurve& c) { return c.steps.size() < 2 ? c.values.front() : compute_auc(c); }

}  // namespace

RunResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed, std::ostream* metrics) {
  return run_seed_impl(cfg, seed, metrics, nullptr);
}

LearningCurve aggregate_curves(const std::vector<RunResult>& runs) {
  if (runs.empty()) throw ContractError("aggregate_curves: no runs");
  const RunResult* longest = &runs.front();
  for (const auto& r : runs)
    if (r.points.size() > longest->points.size()) longest = &r;
  std::vector<double> grid;
  for (const auto& p : longest->points) grid.push_back(static_cast<double>(p.env_steps));
  for (const auto& r : runs)
    for (std::size_t i = 0; i < r.points.size(); ++i)
      if (static_cast<double>(r.points[i].env_steps) != grid[i])
        throw ContractError("aggregate_curves: runs disagree on the evaluation grid");
  LearningCurve out;
  out.steps = grid;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    std::vector<double> vals;
    for (const auto& r : runs) vals.push_back(r.points[std::min(i, r.points.size() - 1)].success_rate);
    double mean = 0.0;
    for (double v : vals) mean += v;
    out.values.push_back(mean / static_cast<double>(vals.size()));
    out.stderrs.push_back(standard_error(vals));
  }
  return out;
}

namespace {

void fill_summary_stats(ExperimentResult& out) {
  out.curve = aggregate_curves(out.runs);
  std::vector<double> aucs, finals;
  for (auto& r : out.runs) {
    r.auc = curve_auc(padded_curve(r, out.curve.steps));
    aucs.push_back(r.auc);
    finals.push_back(r.final_success);
  }
  out.auc = curve_auc(out.curve);
  out.auc_stderr = standard_error(aucs);
  double mean = 0.0;
  for (double f : finals) mean += f;
  out.final_success = mean / static_cast<double>(finals.size());
  out.final_stderr = standard_error(finals);
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  validate(cfg);
  for (const auto& w : cfg.warnings) std::cerr << "warning: " << w << '\n';
  ExperimentResult out;
  out.config = cfg;
  {
    const auto env = make_env(cfg.env_name, cfg.env_params);
    out.msg_dim = message_dim(cfg.train.ratio, env->spec().obs_dim);
  }
  std::ofstream metrics;
  std::filesystem::path ckpt_dir;
  const bool write = !cfg.output_dir.empty();
  if (write) {
    std::filesystem::create_directories(cfg.output_dir);
    metrics.open(std::filesystem::path(cfg.output_dir) / "metrics.jsonl");
    ckpt_dir = std::filesystem::path(cfg.output_dir) / "checkpoints";
  }
  for (std::uint64_t seed : cfg.seeds)
    out.runs.push_back(run_seed_impl(cfg, seed, write ? &metrics : nullptr, write ? &ckpt_dir : nullptr));
  fill_summary_stats(out);
  if (write) {
    std::ofstream summary(std::filesystem::path(cfg.output_dir) / "summary.json");
    summary << summary_to_json(out).dump(2) << '\n';
  }
  return out;
}

json summary_to_json(const ExperimentResult& r) {
  json runs = json::array();
  for (const auto& run : r.runs) {
    json pts = json::array();
    for (const auto& p : run.points) pts.push_back(point_record(run.run_id, p));
    runs.push_back({{"seed", run.seed},
                    {"run_id", run.run_id},
                    {"env_steps", run.env_steps},
                    {"stopped_early", run.stopped_early},
                    {"final_success", run.final_success},
                    {"auc", run.auc},
                    {"points", pts}});
  }
  return {{"format", "bvme-summary"},
          {"config", config_to_json(r.config)},
          {"msg_dim", r.msg_dim},
          {"msg_reduction", message_reduction(r.config.train.ratio)},
          {"seed_count", r.runs.size()},
          {"curve", {{"steps", r.curve.steps}, {"values", r.curve.values}, {"stderrs", r.curve.stderrs}}},
          {"auc", r.auc},
          {"auc_stderr", r.auc_stderr},
          {"final_success", r.final_success},
          {"final_stderr", r.final_stderr},
          {"runs", runs}};
}

ExperimentResult summary_from_json(const json& j) {
  if (j.value("format", "") != "bvme-summary") throw ConfigError("not a summary document");
  ExperimentResult r;
  r.config = config_from_json(j.at("config"));
  r.msg_dim = j.at("msg_dim").get<std::size_t>();
  for (const auto& jr : j.at("runs")) {
    RunResult run;
    run.seed = jr.at("seed").get<std::uint64_t>();
    run.run_id = jr.at("run_id").get<std::string>();
    run.env_steps = jr.at("env_steps").get<std::uint64_t>();
    run.stopped_early = jr.at("stopped_early").get<bool>();
    run.final_success = jr.at("final_success").get<double>();
    for (const auto& p : jr.at("points"))
      run.points.push_back({p.at("env_steps").get<std::uint64_t>(), p.at("success_rate").get<double>(),
                            p.at("mean_return").get<double>(), p.at("td").get<double>(),
                            p.at("bvme").get<double>(), p.at("mean_kl").get<double>()});
    r.runs.push_back(std::move(run));
  }
  fill_summary_stats(r);
  return r;
}

// ---- sweeps ---------------------------------------------------------------------------

std::vector<SweepCell> sweep_cells(const ExperimentConfig& base, const std::string& axis) {
  if (!kAxes.count(axis)) throw ConfigError("unknown sweep axis '" + axis + "'");
  json values = base.sweep.axis == axis ? base.sweep.values : json::array();
  if (values.empty()) {
    if (axis == "r") values = {0.02, 0.05, 0.1, 0.2, 0.3};
    if (axis == "lambda_sigma")
      for (double l : {0.5, 1.0, 2.0})
        for (double s : {0.005, 0.01, 0.02}) values.push_back({l, s});
    if (axis == "coupling") values = {"on_path", "off_path"};
    if (axis == "backbone") values = {"dense", "learned"};
  }
  if (!values.is_array()) throw ConfigError("sweep.values must be an array");

  std::vector<SweepCell> cells;
  for (const auto& v : values) {
    SweepCell cell{"", base};
    TrainConfig& t = cell.config.train;
    try {
      if (axis == "r") {
        t.ratio = v.get<double>();
        cell.axis_value = fmt(t.ratio);
      } else if (axis == "lambda_sigma") {
        if (!v.is_array() || v.size() != 2) throw ConfigError("lambda_sigma values are [lambda_kl, sigma0] pairs");
        t.bvme.lambda_kl = v[0].get<double>();
        t.bvme.sigma0 = v[1].get<double>();
        cell.axis_value = fmt(t.bvme.lambda_kl) + "/" + fmt(t.bvme.sigma0);
      } else if (axis == "coupling") {
        cell.axis_value = v.get<std::string>();
        t.bvme.coupling = parse_coupling(cell.axis_value);
      } else {
        cell.axis_value = v.get<std::string>();
        if (cell.axis_value == "dense") {
          t.graph_mode = GraphMode::kDense;
        } else if (cell.axis_value == "learned") {
          t.graph_mode = GraphMode::kLearned;
        } else if (cell.axis_value.rfind("topk=", 0) == 0) {
          t.graph_mode = GraphMode::kLearned;
          t.topk = std::stoul(cell.axis_value.substr(5));
        } else {
          throw ConfigError("backbone values are dense, learned or topk=<k>");
        }
      }
    } catch (const json::exception& e) {
      throw ConfigError("sweep value " + v.dump() + " for axis " + axis + ": " + e.what());
    } catch (const std::invalid_argument&) {
      throw ConfigError("sweep value " + v.dump() + " for axis " + axis + " is malformed");
    }
    cell.config.name = base.name + "_" + axis + "_" + sanitize(cell.axis_value);
    if (!base.output_dir.empty())
      cell.config.output_dir = (std::filesystem::path(base.output_dir) / axis / sanitize(cell.axis_value)).string();
    validate(cell.config);
    cells.push_back(std::move(cell));
  }
  return cells;
}

SweepResult run_sweep(const ExperimentConfig& base, const std::string& axis) {
  const auto cells = sweep_cells(base, axis);

  struct Job {
    ExperimentConfig cfg;
    std::optional<ExperimentResult> result;
    std::string error;
  };
  std::vector<Job> jobs;
  std::vector<std::size_t> cell_job, baseline_job;
  std::map<std::string, std::size_t> baseline_index;
  const std::size_t none = static_cast<std::size_t>(-1);
  for (const auto& cell : cells) {
    cell_job.push_back(jobs.size());
    jobs.push_back({cell.config, std::nullopt, ""});
    if (cell.config.train.method == base.sweep.baseline_method) {
      baseline_job.push_back(none);
      continue;
    }
    ExperimentConfig twin = cell.config;
    twin.train.method = base.sweep.baseline_method;
    twin.warnings.clear();
    json key = config_to_json(twin);
    key.erase("name");
    key.erase("output");
    const auto [it, fresh] = baseline_index.try_emplace(key.dump(), jobs.size());
    if (fresh) {
      twin.name = base.name + "_" + axis + "_baseline_" + sanitize(cell.axis_value);
      if (!base.output_dir.empty())
        twin.output_dir =
            (std::filesystem::path(base.output_dir) / axis / ("baseline_" + sanitize(cell.axis_value))).string();
      jobs.push_back({twin, std::nullopt, ""});
    }
    baseline_job.push_back(it->second);
  }

  std::mutex log_mutex;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        jobs[i].result = run_experiment(jobs[i].cfg);
      } catch (const std::exception& e) {
        jobs[i].error = e.what();
      }
      std::lock_guard lock(log_mutex);
      std::cerr << "[sweep] " << jobs[i].cfg.name << (jobs[i].error.empty() ? " done" : " failed: " + jobs[i].error)
                << '\n';
    }
  };
  const std::size_t n_workers = std::min(base.sweep.workers, jobs.size());
  std::vector<std::thread> threads;
  for (std::size_t w = 1; w < n_workers; ++w) threads.emplace_back(worker);
  worker();
  for (auto& th : threads) th.join();

  SweepResult out;
  out.axis = axis;
  const double nan = std::nan("");
  for (std::size_t c = 0; c < cells.size(); ++c) {
    SweepRow row;
    row.axis_value = cells[c].axis_value;
    row.seed_count = cells[c].config.seeds.size();
    const Job& job = jobs[cell_job[c]];
    if (!job.result) {
      row.error = job.error;
      row.auc = row.auc_stderr = row.final_success = row.delta_auc_vs_baseline = nan;
      out.rows.push_back(row);
      continue;
    }
    row.auc = job.result->auc;
    row.auc_stderr = job.result->auc_stderr;
    row.final_success = job.result->final_success;
    if (baseline_job[c] == none) {
      row.delta_auc_vs_baseline = 0.0;
    } else if (const Job& b = jobs[baseline_job[c]]; !b.result) {
      row.delta_auc_vs_baseline = nan;
      row.error = "baseline failed: " + b.error;
    } else {
      try {
        row.delta_auc_vs_baseline = compute_delta_auc(job.result->curve, b.result->curve);
      } catch (const std::exception& e) {
        row.delta_auc_vs_baseline = nan;
        row.error = e.what();
      }
    }
    out.rows.push_back(row);
  }

  if (!base.output_dir.empty()) {
    std::filesystem::create_directories(base.output_dir);
    const auto dir = std::filesystem::path(base.output_dir);
    std::ofstream(dir / ("sweep_" + axis + ".csv")) << sweep_csv(out);
    json rows = json::array();
    for (std::size_t c = 0; c < out.rows.size(); ++c) {
      const auto& r = out.rows[c];
      json jr = {{"axis_value", r.axis_value}, {"seed_count", r.seed_count}, {"error", r.error}};
      for (auto [k, v] : {std::pair{"auc", r.auc}, {"auc_stderr", r.auc_stderr}, {"final_success", r.final_success},
                          {"delta_auc_vs_baseline", r.delta_auc_vs_baseline}})
        jr[k] = std::isfinite(v) ? json(v) : json(nullptr);
      if (axis == "r") jr["msg_reduction"] = message_reduction(cells[c].config.train.ratio);
      rows.push_back(jr);
    }
    std::ofstream(dir / ("sweep_" + axis + ".json"))
        << json{{"axis", axis}, {"baseline_method", to_string(base.sweep.baseline_method)}, {"rows", rows}}.dump(2)
        << '\n';
  }
  return out;
}

std::string sweep_csv(const SweepResult& r) {
  std::ostringstream os;
  os << "axis_value,seed_count,auc,auc_stderr,final_success,delta_auc_vs_baseline\n";
  for (const auto& row : r.rows)
    os << row.axis_value << ',' << row.seed_count << ',' << fmt(row.auc) << ',' << fmt(row.auc_stderr) << ','
       << fmt(row.final_success) << ',' << fmt(row.delta_auc_vs_baseline) << '\n';
  return os.str();
}

std::string report(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ConfigError("report: " + dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() == "summary.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::ostringstream os;
  os << "experiment,method,r,msg_dim,msg_reduction,seed_count,auc,auc_stderr,final_success,final_stderr\n";
  for (const auto& f : files) {
    std::ifstream in(f);
    const ExperimentResult r = summary_from_json(json::parse(in));
    os << r.config.name << ',' << to_string(r.config.train.method) << ',' << fmt(r.config.train.ratio) << ','
       << r.msg_dim << ',' << fmt(message_reduction(r.config.train.ratio)) << ',' << r.runs.size() << ','
       << fmt(r.auc) << ',' << fmt(r.auc_stderr) << ',' << fmt(r.final_success) << ',' << fmt(r.final_stderr)
       << '\n';
  }
  return os.str();
}

}  // namespace bvme
