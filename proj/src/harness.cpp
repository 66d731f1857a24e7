#include "pqnlab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <sstream>
#include <thread>

#include "CLI11.hpp"

#include "pqnlab/agents.hpp"
#include "pqnlab/envs.hpp"
#include "pqnlab/metrics.hpp"
#include "pqnlab/net.hpp"
#include "pqnlab/plot.hpp"
#include "pqnlab/rng.hpp"
#include "pqnlab/stability.hpp"

namespace pqnlab {

namespace {

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

bool valid_key(const std::string& k) {
  if (k.empty()) return false;
  for (char c : k)
    if (!(std::islower(static_cast<unsigned char>(c)) ||
          std::isdigit(static_cast<unsigned char>(c)) || c == '_'))
      return false;
  return true;
}

}  // namespace

ConfigReader ConfigReader::from_string(const std::string& text,
                                       const std::string& origin) {
  ConfigReader c;
  c.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  int ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(ln) +
                        ": expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!valid_key(key))
      throw ConfigError(origin + ":" + std::to_string(ln) +
                        ": invalid key '" + key +
                        "' (lower-case letters, digits, underscores)");
    if (c.raw_.count(key))
      throw ConfigError(origin + ":" + std::to_string(ln) +
                        ": duplicate key '" + key + "'");
    c.raw_[key] = Raw{value, ln};
  }
  return c;
}

ConfigReader ConfigReader::from_file(const std::string& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return from_string(text, path);
}

const ConfigReader::Raw* ConfigReader::fetch(const std::string& key) {
  auto it = raw_.find(key);
  if (it == raw_.end()) return nullptr;
  used_.insert(key);
  return &it->second;
}

void ConfigReader::fail(const std::string& key, const Raw& raw,
                        const std::string& want) const {
  throw ConfigError(origin_ + ":" + std::to_string(raw.line) + ": key '" +
                    key + "' needs " + want + ", got '" + raw.value + "'");
}

long ConfigReader::get_int(const std::string& key, long def) {
  const Raw* raw = fetch(key);
  long v = def;
  if (raw) {
    const std::string& s = raw->value;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
      fail(key, *raw, "an integer");
  }
  effective_[key] = std::to_string(v);
  return v;
}

double ConfigReader::get_double(const std::string& key, double def) {
  const Raw* raw = fetch(key);
  double v = def;
  if (raw) {
    const std::string& s = raw->value;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
      fail(key, *raw, "a number");
  }
  effective_[key] = format_number(v);
  return v;
}

bool ConfigReader::get_bool(const std::string& key, bool def) {
  const Raw* raw = fetch(key);
  bool v = def;
  if (raw) {
    if (raw->value == "true" || raw->value == "1")
      v = true;
    else if (raw->value == "false" || raw->value == "0")
      v = false;
    else
      fail(key, *raw, "true or false");
  }
  effective_[key] = v ? "true" : "false";
  return v;
}

std::string ConfigReader::get_string(const std::string& key,
                                     const std::string& def) {
  const Raw* raw = fetch(key);
  const std::string v = raw ? raw->value : def;
  effective_[key] = v;
  return v;
}

std::vector<long> ConfigReader::get_int_list(const std::string& key,
                                             const std::vector<long>& def) {
  const Raw* raw = fetch(key);
  std::vector<long> v = def;
  if (raw) {
    v.clear();
    std::stringstream ss(raw->value);
    std::string part;
    while (std::getline(ss, part, ',')) {
      part = trim(part);
      long x = 0;
      const auto res = std::from_chars(part.data(), part.data() + part.size(), x);
      if (part.empty() || res.ec != std::errc() ||
          res.ptr != part.data() + part.size())
        fail(key, *raw, "a comma-separated integer list");
      v.push_back(x);
    }
    if (v.empty()) fail(key, *raw, "a non-empty integer list");
  }
  std::string canon;
  for (size_t i = 0; i < v.size(); ++i)
    canon += (i ? "," : "") + std::to_string(v[i]);
  effective_[key] = canon;
  return v;
}

void ConfigReader::finish() const {
  std::vector<std::string> unknown;
  for (const auto& kv : raw_)
    if (!used_.count(kv.first)) unknown.push_back(kv.first);
  if (!unknown.empty()) {
    std::string list;
    for (size_t i = 0; i < unknown.size(); ++i)
      list += (i ? ", " : "") + unknown[i];
    throw ConfigError(origin_ + ": unknown key(s): " + list);
  }
}

std::string ConfigReader::echo() const {
  std::string out;
  for (const auto& kv : effective_)
    out += kv.first + " = " + kv.second + "\n";
  return out;
}

namespace {

std::uint64_t derive(std::uint64_t seed, std::uint64_t tag) {
  return Rng::stream(seed, tag).next_u64();
}

// ---------------------------------------------------------------- verdict

struct Verdict {
  std::vector<std::string> lines;
  bool all_pass = true;

  void check(const std::string& name, bool pass, const std::string& detail) {
    lines.push_back(std::string(pass ? "PASS" : "FAIL") + " " + name + ": " +
                    detail);
    if (!pass) all_pass = false;
  }
  std::string text() const {
    std::string out;
    for (const auto& l : lines) out += l + "\n";
    out += std::string("VERDICT: ") + (all_pass ? "PASS" : "FAIL") + "\n";
    return out;
  }
};

struct PresetIO {
  std::string dir;
  std::string variant;
  std::vector<std::uint64_t> seeds;
  ConfigReader cfg;
  Verdict verdict;
};

std::vector<std::uint64_t> default_seeds(int n) {
  std::vector<std::uint64_t> s;
  for (int i = 1; i <= n; ++i) s.push_back(std::uint64_t(i));
  return s;
}

void finish_config(PresetIO& io, const std::string& sub) {
  io.cfg.finish();
  std::ostringstream os;
  os << "# subcommand = " << sub << "\n";
  os << "# variant = " << io.variant << "\n";
  os << "# seeds =";
  for (auto s : io.seeds) os << " " << s;
  os << "\n";
  os << io.cfg.echo();
  write_text_file(io.dir + "/config_effective.txt", os.str());
}

int thread_cap() {
  const char* v = std::getenv("PQNLAB_THREADS");
  if (!v) return 1;
  const long n = std::strtol(v, nullptr, 10);
  return int(std::clamp(n, 1L, 64L));
}

// Runs f(0..n-1), fanning out over at most PQNLAB_THREADS workers. Each index
// only touches its own slot/files, so the schedule cannot change results.
template <typename F>
void run_indexed(int n, F&& f) {
  const int workers = std::min(thread_cap(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&]() {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) f(i);
    });
  for (auto& t : pool) t.join();
}

// ------------------------------------------------------------- artifacts

// One named-stat list per seed (same names, same order, for every seed).
using SeedStats = std::vector<std::pair<std::string, double>>;

void write_aggregate_csv(const std::string& path,
                         const std::vector<std::string>& seed_labels,
                         const std::vector<SeedStats>& stats) {
  std::vector<std::vector<std::string>> rows;
  if (!stats.empty()) {
    for (size_t m = 0; m < stats[0].size(); ++m) {
      const std::string& metric = stats[0][m].first;
      std::vector<double> vals;
      for (size_t s = 0; s < stats.size(); ++s) {
        rows.push_back({metric, seed_labels[s],
                        format_number(stats[s][m].second)});
        vals.push_back(stats[s][m].second);
      }
      rows.push_back({metric, "mean", format_number(finite_mean(vals))});
      rows.push_back({metric, "iqm", format_number(interquartile_mean(vals))});
    }
  }
  write_csv(path, {"metric", "seed", "value"}, rows);
}

void write_train_artifacts(const std::string& dir, const std::string& stem,
                           const TrainResult& r) {
  JsonlWriter w(dir + "/metrics_" + stem + ".jsonl");
  for (const auto& m : r.metrics) {
    OrderedJson rec;
    rec["kind"] = "train";
    rec["step"] = m.step;
    rec["episodic_return_mean"] = m.episodic_return_mean;
    rec["episodic_return_count"] = m.episodic_return_count;
    rec["loss"] = m.loss;
    rec["epsilon"] = m.epsilon;
    rec["lr"] = m.lr;
    w.write(rec);
  }
  for (const auto& e : r.evals) {
    OrderedJson rec;
    rec["kind"] = "eval";
    rec["step"] = e.step;
    rec["return_mean"] = e.return_mean;
    rec["episodes"] = e.episodes;
    w.write(rec);
  }
  // Wall-clock lives outside the metrics stream so reruns stay bit-identical.
  std::vector<std::vector<std::string>> rows;
  for (const auto& m : r.metrics)
    rows.push_back({format_number(double(m.step)),
                    format_number(m.wall_clock_s)});
  rows.push_back({"total", format_number(r.wall_clock_s)});
  write_csv(dir + "/timing_" + stem + ".csv", {"step", "wall_clock_s"}, rows);
}

void write_ensemble_artifacts(const std::string& dir, const std::string& stem,
                              const EnsembleResult& r) {
  JsonlWriter w(dir + "/metrics_" + stem + ".jsonl");
  for (const auto& m : r.metrics) {
    OrderedJson rec;
    rec["kind"] = "train";
    rec["step"] = m.step;
    rec["episodic_return_mean"] = m.episodic_return_mean;
    rec["episodic_return_count"] = m.episodic_return_count;
    rec["loss"] = m.loss;
    rec["epsilon"] = m.epsilon;
    rec["lr"] = m.lr;
    w.write(rec);
  }
  OrderedJson rec;
  rec["kind"] = "result";
  rec["step"] = r.env_steps;
  rec["solved"] = r.solved;
  rec["episodes"] = r.episodes;
  rec["window_mean"] = r.window_mean;
  w.write(rec);
  std::vector<std::vector<std::string>> rows;
  for (const auto& m : r.metrics)
    rows.push_back({format_number(double(m.step)),
                    format_number(m.wall_clock_s)});
  rows.push_back({"total", format_number(r.wall_clock_s)});
  write_csv(dir + "/timing_" + stem + ".csv", {"step", "wall_clock_s"}, rows);
}

PlotSeries train_series(const TrainResult& r, const std::string& label) {
  PlotSeries s;
  s.label = label;
  for (const auto& m : r.metrics) {
    s.x.push_back(double(m.step));
    s.y.push_back(m.episodic_return_mean);
  }
  return s;
}

PlotSeries eval_series(const TrainResult& r, const std::string& label) {
  PlotSeries s;
  s.label = label;
  for (const auto& e : r.evals) {
    s.x.push_back(double(e.step));
    s.y.push_back(e.return_mean);
  }
  return s;
}

void write_series_plot(const std::string& path, const std::string& title,
                       const std::string& x_label, const std::string& y_label,
                       std::vector<PlotSeries> series, bool with_mean) {
  if (with_mean && series.size() > 1)
    series.push_back(aggregate_mean_series(series, "mean"));
  PlotSpec spec;
  spec.title = title;
  spec.x_label = x_label;
  spec.y_label = y_label;
  write_text_file(path, render_line_plot(spec, series));
}

void write_probe_rows(const std::string& path, const ProbeResult& pr) {
  std::vector<std::vector<std::string>> rows;
  for (size_t i = 0; i < pr.sweep_values.size(); ++i) {
    const auto& trials =
        i < pr.trial_values.size() ? pr.trial_values[i] : std::vector<double>();
    for (size_t t = 0; t < trials.size(); ++t)
      rows.push_back({format_number(pr.sweep_values[i]),
                      std::to_string(t + 1), format_number(trials[t])});
  }
  write_csv(path, {"variable", "trial", "statistic"}, rows);
}

// ------------------------------------------------------------ env helpers

NormType parse_norm(const std::string& s) {
  if (s == "layer") return NormType::Layer;
  if (s == "batch") return NormType::Batch;
  if (s == "none") return NormType::None;
  throw ConfigError("norm_type must be layer, batch, or none (got '" + s +
                    "')");
}

std::unique_ptr<VecEnv> make_control_env(const std::string& name, int B,
                                         int instance_base) {
  if (name == "cartpole")
    return std::make_unique<CartPoleVecEnv>(B, instance_base);
  if (name == "acrobot")
    return std::make_unique<AcrobotVecEnv>(B, instance_base);
  throw ConfigError("unknown control environment '" + name + "'");
}

// --------------------------------------------------------- control presets

struct EvalSettings {
  long every = 25000;
  int envs = 8;
  double solve_return = 450.0;
  bool stop_on_solve = true;
};

EvalSettings read_eval_keys(ConfigReader& cfg, double def_solve_return) {
  EvalSettings e;
  e.every = cfg.get_int("eval_every", 25000);
  e.envs = int(cfg.get_int("eval_envs", 8));
  e.solve_return = cfg.get_double("solve_return", def_solve_return);
  e.stop_on_solve = cfg.get_bool("stop_on_solve", true);
  if (e.every <= 0 || e.envs <= 0)
    throw ConfigError("eval_every and eval_envs must be positive");
  return e;
}

PqnConfig read_pqn_keys(ConfigReader& cfg) {
  PqnConfig p;
  p.num_envs = int(cfg.get_int("num_envs", p.num_envs));
  p.num_steps = int(cfg.get_int("num_steps", p.num_steps));
  p.total_timesteps = cfg.get_int("total_timesteps", p.total_timesteps);
  p.eps_start = cfg.get_double("eps_start", p.eps_start);
  p.eps_finish = cfg.get_double("eps_finish", p.eps_finish);
  p.eps_decay = cfg.get_double("eps_decay", p.eps_decay);
  p.num_epochs = int(cfg.get_int("num_epochs", p.num_epochs));
  p.num_minibatches = int(cfg.get_int("num_minibatches", p.num_minibatches));
  p.gamma = cfg.get_double("gamma", p.gamma);
  p.lambda = cfg.get_double("lambda", p.lambda);
  p.lr = cfg.get_double("lr", p.lr);
  p.max_grad_norm = cfg.get_double("max_grad_norm", p.max_grad_norm);
  p.lr_linear_decay = cfg.get_bool("lr_linear_decay", p.lr_linear_decay);
  p.norm_type = parse_norm(cfg.get_string("norm_type", "layer"));
  p.hidden_size = int(cfg.get_int("hidden_size", p.hidden_size));
  p.num_layers = int(cfg.get_int("num_layers", p.num_layers));
  p.l2_eta = cfg.get_double("l2_eta", p.l2_eta);
  return p;
}

long steps_to_solve(const TrainResult& r, double threshold, long budget) {
  for (const auto& e : r.evals)
    if (e.return_mean >= threshold) return e.step;
  return budget;
}

double final_eval_return(const TrainResult& r) {
  return r.evals.empty() ? std::numeric_limits<double>::quiet_NaN()
                         : r.evals.back().return_mean;
}

// Trains one PQN configuration over all seeds, writing per-seed artifacts
// with the given stem prefix ("" or "<arm>_").
std::vector<TrainResult> run_pqn_arm(const std::string& env_name,
                                     const PqnConfig& pqn,
                                     const EvalSettings& ev,
                                     const std::vector<std::uint64_t>& seeds,
                                     const std::string& dir,
                                     const std::string& prefix) {
  std::vector<TrainResult> results(seeds.size());
  run_indexed(int(seeds.size()), [&](int i) {
    const std::uint64_t seed = seeds[size_t(i)];
    auto env = make_control_env(env_name, pqn.num_envs, 0);
    auto eval_env = make_control_env(env_name, ev.envs, 100000);
    EvalHook hook;
    hook.env = eval_env.get();
    hook.every = ev.every;
    hook.seed = derive(seed, 9000);
    if (ev.stop_on_solve) hook.stop_return = ev.solve_return;
    results[size_t(i)] = pqn_train(pqn, *env, seed, hook);
    write_train_artifacts(dir, prefix + "seed" + std::to_string(seed),
                          results[size_t(i)]);
  });
  return results;
}

void run_control(PresetIO& io, const std::string& env_name) {
  if (io.variant.empty()) io.variant = "pqn";
  if (io.variant != "pqn" && io.variant != "dqn")
    throw ConfigError("variant must be pqn or dqn (got '" + io.variant + "')");
  if (io.seeds.empty()) io.seeds = default_seeds(10);
  const bool is_dqn = io.variant == "dqn";
  const double def_solve = env_name == "cartpole" ? 450.0 : -100.0;

  std::vector<TrainResult> results(io.seeds.size());
  EvalSettings ev;
  long budget = 0;
  if (!is_dqn) {
    PqnConfig pqn = read_pqn_keys(io.cfg);
    ev = read_eval_keys(io.cfg, def_solve);
    const double frac = io.cfg.get_double("solve_fraction", 0.8);
    finish_config(io, env_name);
    pqn.validate();
    budget = pqn.total_timesteps;
    results = run_pqn_arm(env_name, pqn, ev, io.seeds, io.dir, "");
    int solved = 0;
    for (const auto& r : results)
      if (steps_to_solve(r, ev.solve_return, budget + 1) <= budget) ++solved;
    const double f = double(solved) / double(io.seeds.size());
    io.verdict.check("solved_fraction", f >= frac,
                     format_number(f) + " of seeds reached eval return " +
                         format_number(ev.solve_return) + " within " +
                         std::to_string(budget) + " env steps (need >= " +
                         format_number(frac) + ")");
  } else {
    DqnConfig dqn;
    dqn.base.num_envs = 1;  // classic single-stream baseline
    ConfigReader& cfg = io.cfg;
    dqn.base.num_envs = int(cfg.get_int("num_envs", dqn.base.num_envs));
    dqn.base.total_timesteps =
        cfg.get_int("total_timesteps", dqn.base.total_timesteps);
    dqn.base.eps_start = cfg.get_double("eps_start", dqn.base.eps_start);
    dqn.base.eps_finish = cfg.get_double("eps_finish", dqn.base.eps_finish);
    dqn.base.eps_decay = cfg.get_double("eps_decay", dqn.base.eps_decay);
    dqn.base.gamma = cfg.get_double("gamma", dqn.base.gamma);
    dqn.base.lr = cfg.get_double("lr", dqn.base.lr);
    dqn.base.max_grad_norm =
        cfg.get_double("max_grad_norm", dqn.base.max_grad_norm);
    dqn.base.norm_type = parse_norm(cfg.get_string("norm_type", "layer"));
    dqn.base.hidden_size = int(cfg.get_int("hidden_size", dqn.base.hidden_size));
    dqn.base.num_layers = int(cfg.get_int("num_layers", dqn.base.num_layers));
    dqn.buffer_size = int(cfg.get_int("buffer_size", dqn.buffer_size));
    dqn.batch_size = int(cfg.get_int("batch_size", dqn.batch_size));
    dqn.target_update_every =
        cfg.get_int("target_update_every", dqn.target_update_every);
    dqn.train_every = int(cfg.get_int("train_every", dqn.train_every));
    dqn.learning_starts = cfg.get_int("learning_starts", dqn.learning_starts);
    dqn.metrics_every = cfg.get_int("metrics_every", dqn.metrics_every);
    ev = read_eval_keys(io.cfg, def_solve);
    const double frac = io.cfg.get_double("solve_fraction", 0.8);
    finish_config(io, env_name);
    dqn.validate();
    budget = dqn.base.total_timesteps;
    run_indexed(int(io.seeds.size()), [&](int i) {
      const std::uint64_t seed = io.seeds[size_t(i)];
      auto env = make_control_env(env_name, dqn.base.num_envs, 0);
      auto eval_env = make_control_env(env_name, ev.envs, 100000);
      EvalHook hook;
      hook.env = eval_env.get();
      hook.every = ev.every;
      hook.seed = derive(seed, 9000);
      if (ev.stop_on_solve) hook.stop_return = ev.solve_return;
      results[size_t(i)] = dqn_train(dqn, *env, seed, hook);
      write_train_artifacts(io.dir, "seed" + std::to_string(seed),
                            results[size_t(i)]);
    });
    int solved = 0;
    for (const auto& r : results)
      if (steps_to_solve(r, ev.solve_return, budget + 1) <= budget) ++solved;
    const double f = double(solved) / double(io.seeds.size());
    io.verdict.check("solved_fraction", f >= frac,
                     format_number(f) + " of seeds reached eval return " +
                         format_number(ev.solve_return) + " within " +
                         std::to_string(budget) + " env steps (need >= " +
                         format_number(frac) + ")");
  }

  std::vector<std::string> labels;
  std::vector<SeedStats> stats;
  std::vector<PlotSeries> tr_series, ev_series;
  for (size_t i = 0; i < io.seeds.size(); ++i) {
    const std::string label = "seed" + std::to_string(io.seeds[i]);
    labels.push_back(label);
    const TrainResult& r = results[i];
    const long sts = steps_to_solve(r, ev.solve_return, budget);
    SeedStats st;
    st.push_back({"solved",
                  steps_to_solve(r, ev.solve_return, budget + 1) <= budget
                      ? 1.0
                      : 0.0});
    st.push_back({"steps_to_solve", double(sts)});
    st.push_back({"final_eval_return", final_eval_return(r)});
    st.push_back({"env_steps", double(r.env_steps)});
    st.push_back({"grad_steps", double(r.grad_steps)});
    stats.push_back(std::move(st));
    tr_series.push_back(train_series(r, label));
    ev_series.push_back(eval_series(r, label));
  }
  write_aggregate_csv(io.dir + "/aggregate.csv", labels, stats);
  write_series_plot(io.dir + "/plot_train_return.svg",
                    env_name + " training return", "env steps",
                    "episodic return", tr_series, true);
  write_series_plot(io.dir + "/plot_eval_return.svg",
                    env_name + " greedy eval return", "env steps",
                    "eval return", ev_series, true);
}

// ----------------------------------------------------------- ablate presets

void run_ablate(PresetIO& io, bool lambda_ablation) {
  if (io.seeds.empty()) io.seeds = default_seeds(10);
  const std::string env_name = io.cfg.get_string("env", "cartpole");
  PqnConfig base = read_pqn_keys(io.cfg);
  EvalSettings ev = read_eval_keys(io.cfg, 450.0);

  std::vector<std::pair<std::string, PqnConfig>> arms;
  if (lambda_ablation) {
    const double la = io.cfg.get_double("lambda_a", 0.65);
    const double lb = io.cfg.get_double("lambda_b", 0.0);
    PqnConfig a = base, b = base;
    a.lambda = la;
    b.lambda = lb;
    arms.push_back({"lam" + format_number(la), a});
    arms.push_back({"lam" + format_number(lb), b});
  } else {
    const std::string na = io.cfg.get_string("norm_a", "layer");
    const std::string nb = io.cfg.get_string("norm_b", "none");
    PqnConfig a = base, b = base;
    a.norm_type = parse_norm(na);
    b.norm_type = parse_norm(nb);
    arms.push_back({"norm_" + na, a});
    arms.push_back({"norm_" + nb, b});
  }
  const double frac = io.cfg.get_double("solve_fraction", 0.8);
  finish_config(io, lambda_ablation ? "ablate-lambda" : "ablate-norm");
  for (auto& arm : arms) arm.second.validate();
  const long budget = base.total_timesteps;

  std::vector<std::string> labels;
  std::vector<SeedStats> stats;
  std::vector<double> medians, fractions;
  for (const auto& arm : arms) {
    const std::vector<TrainResult> results = run_pqn_arm(
        env_name, arm.second, ev, io.seeds, io.dir, arm.first + "_");
    std::vector<double> sts;
    std::vector<PlotSeries> curves;
    int solved = 0;
    for (size_t i = 0; i < io.seeds.size(); ++i) {
      const std::string label =
          arm.first + "_seed" + std::to_string(io.seeds[i]);
      const TrainResult& r = results[i];
      const long s = steps_to_solve(r, ev.solve_return, budget);
      if (steps_to_solve(r, ev.solve_return, budget + 1) <= budget) ++solved;
      sts.push_back(double(s));
      labels.push_back(label);
      SeedStats st;
      st.push_back({"steps_to_solve_" + arm.first, double(s)});
      st.push_back({"final_eval_return_" + arm.first, final_eval_return(r)});
      stats.push_back(std::move(st));
      curves.push_back(eval_series(r, label));
    }
    medians.push_back(finite_median(sts));
    fractions.push_back(double(solved) / double(io.seeds.size()));
    write_series_plot(io.dir + "/plot_eval_" + arm.first + ".svg",
                      env_name + " eval return, " + arm.first, "env steps",
                      "eval return", curves, true);
  }

  // aggregate.csv: the per-arm metric names differ, so emit each arm block
  // separately with its own seeds.
  {
    std::vector<std::vector<std::string>> rows;
    const size_t n = io.seeds.size();
    for (size_t a = 0; a < arms.size(); ++a) {
      for (size_t m = 0; m < stats[a * n].size(); ++m) {
        std::vector<double> vals;
        for (size_t i = 0; i < n; ++i) {
          rows.push_back({stats[a * n + i][m].first,
                          "seed" + std::to_string(io.seeds[i]),
                          format_number(stats[a * n + i][m].second)});
          vals.push_back(stats[a * n + i][m].second);
        }
        rows.push_back({stats[a * n][m].first, "mean",
                        format_number(finite_mean(vals))});
        rows.push_back({stats[a * n][m].first, "iqm",
                        format_number(interquartile_mean(vals))});
      }
    }
    write_csv(io.dir + "/aggregate.csv", {"metric", "seed", "value"}, rows);
  }

  if (lambda_ablation) {
    io.verdict.check(
        "median_steps_to_solve", medians[0] < medians[1],
        arms[0].first + " median " + format_number(medians[0]) + " vs " +
            arms[1].first + " median " + format_number(medians[1]) +
            " (budget " + std::to_string(budget) + " when unsolved)");
  } else {
    io.verdict.check("solved_fraction_" + arms[0].first,
                     fractions[0] >= frac,
                     format_number(fractions[0]) + " (need >= " +
                         format_number(frac) + ")");
    io.verdict.check(
        "norm_not_worse", fractions[0] >= fractions[1],
        arms[0].first + " " + format_number(fractions[0]) + " vs " +
            arms[1].first + " " + format_number(fractions[1]));
  }
}

// ----------------------------------------------------------------- deepsea

void run_deepsea(PresetIO& io) {
  if (io.variant.empty()) io.variant = "layernorm";
  if (io.variant != "layernorm" && io.variant != "batchnorm")
    throw ConfigError("variant must be layernorm or batchnorm (got '" +
                      io.variant + "')");
  if (io.seeds.empty()) io.seeds = default_seeds(10);
  const bool bn = io.variant == "batchnorm";

  EnsembleConfig ec;
  ec.ensemble_size = 10;
  ec.norm_type = bn ? NormType::Batch : NormType::Layer;
  // BatchNorm bootstrap targets deliberately see minibatch statistics; that
  // is the failure mode this preset studies.
  ec.target_mode = bn ? NetMode::Train : NetMode::Eval;

  const int depth = int(io.cfg.get_int("depth", bn ? 40 : 20));
  const int B = int(io.cfg.get_int("num_envs", 32));
  ec.ensemble_size = int(io.cfg.get_int("ensemble_size", ec.ensemble_size));
  ec.prior_scale = io.cfg.get_double("prior_scale", ec.prior_scale);
  ec.mask_prob = io.cfg.get_double("mask_prob", ec.mask_prob);
  ec.buffer_size = int(io.cfg.get_int("buffer_size", ec.buffer_size));
  ec.batch_size = int(io.cfg.get_int("batch_size", ec.batch_size));
  ec.train_every = int(io.cfg.get_int("train_every", ec.train_every));
  ec.lr = io.cfg.get_double("lr", ec.lr);
  ec.gamma = io.cfg.get_double("gamma", ec.gamma);
  ec.hidden_size = int(io.cfg.get_int("hidden_size", ec.hidden_size));
  ec.prior_weight_std =
      io.cfg.get_double("prior_weight_std", ec.prior_weight_std);
  ec.max_episodes = io.cfg.get_int("max_episodes", ec.max_episodes);
  ec.solve_threshold = io.cfg.get_double("solve_threshold", ec.solve_threshold);
  ec.solve_window = int(io.cfg.get_int("solve_window", ec.solve_window));
  const bool randomize = io.cfg.get_bool("randomize_actions", true);
  const std::string expect =
      io.cfg.get_string("expect", bn ? "fail" : "solve");
  if (expect != "solve" && expect != "fail")
    throw ConfigError("expect must be solve or fail (got '" + expect + "')");
  const double frac =
      io.cfg.get_double("fraction", expect == "solve" ? 0.8 : 0.6);
  finish_config(io, "deepsea");
  ec.validate();
  if (depth < 2) throw ConfigError("depth must be >= 2");

  std::vector<EnsembleResult> results(io.seeds.size());
  run_indexed(int(io.seeds.size()), [&](int i) {
    const std::uint64_t seed = io.seeds[size_t(i)];
    DeepSeaVecEnv env(depth, B, 0, randomize);
    results[size_t(i)] = ensemble_train(ec, env, seed);
    write_ensemble_artifacts(io.dir, "seed" + std::to_string(seed),
                             results[size_t(i)]);
  });

  std::vector<std::string> labels;
  std::vector<SeedStats> stats;
  std::vector<PlotSeries> curves;
  int solved = 0;
  for (size_t i = 0; i < io.seeds.size(); ++i) {
    const std::string label = "seed" + std::to_string(io.seeds[i]);
    const EnsembleResult& r = results[i];
    if (r.solved) ++solved;
    labels.push_back(label);
    SeedStats st;
    st.push_back({"solved", r.solved ? 1.0 : 0.0});
    st.push_back({"episodes", double(r.episodes)});
    st.push_back({"env_steps", double(r.env_steps)});
    st.push_back({"window_mean", r.window_mean});
    stats.push_back(std::move(st));
    PlotSeries s;
    s.label = label;
    for (const auto& m : r.metrics) {
      s.x.push_back(double(m.step));
      s.y.push_back(m.episodic_return_mean);
    }
    curves.push_back(std::move(s));
  }
  write_aggregate_csv(io.dir + "/aggregate.csv", labels, stats);
  write_series_plot(io.dir + "/plot_train_return.svg",
                    "deepsea depth " + std::to_string(depth) + " (" +
                        io.variant + ")",
                    "env steps", "episodic return", curves, true);

  const double f = double(solved) / double(io.seeds.size());
  if (expect == "solve") {
    io.verdict.check("solved_fraction", f >= frac,
                     format_number(f) + " solved (need >= " +
                         format_number(frac) + ")");
  } else {
    const double failed = 1.0 - f;
    io.verdict.check("failed_fraction", failed >= frac,
                     format_number(failed) + " failed to solve (need >= " +
                         format_number(frac) + ")");
  }
}

// ------------------------------------------------------------------- baird

void run_baird(PresetIO& io) {
  if (io.variant.empty()) io.variant = "linear";
  if (io.variant != "linear" && io.variant != "layernorm_l2")
    throw ConfigError("variant must be linear or layernorm_l2 (got '" +
                      io.variant + "')");
  const bool linear = io.variant == "linear";
  if (io.seeds.empty()) io.seeds = linear ? default_seeds(1) : default_seeds(10);

  const long sweeps = io.cfg.get_int("sweeps", linear ? 10000 : 2000);
  const double step = io.cfg.get_double("step_size", linear ? 0.01 : 0.05);
  const long record_every = io.cfg.get_int("record_every", 50);
  const double gamma = io.cfg.get_double("gamma", 0.99);
  const double growth = io.cfg.get_double("growth_factor", 100.0);
  const int width = int(io.cfg.get_int("width", 16));
  const double l2_eta = io.cfg.get_double("l2_eta", linear ? 0.0 : 1.0);
  finish_config(io, "baird");
  if (sweeps < 1 || record_every < 1)
    throw ConfigError("sweeps and record_every must be >= 1");

  const BairdProblem baird = baird_build();

  struct SeedOut {
    double initial_param_norm = 0, final_param_norm = 0;
    double initial_td_norm = 0, final_td_norm = 0, max_td_norm = 0;
    bool finite = true;
    std::vector<double> rec_steps, rec_param, rec_td;
  };
  std::vector<SeedOut> outs(io.seeds.size());

  run_indexed(int(io.seeds.size()), [&](int i) {
    const std::uint64_t seed = io.seeds[size_t(i)];
    NetworkParams net;
    if (linear) {
      net = init_params({LayerSpec::dense(8, 1, false)}, derive(seed, 0));
      set_params_vector(net, baird_init_weights());
    } else {
      net = init_params({LayerSpec::dense(8, width, false),
                         LayerSpec::layer_norm(width),
                         LayerSpec::relu(width),
                         LayerSpec::dense(width, 1, false)},
                        derive(seed, 0));
    }
    SeedOut& o = outs[size_t(i)];
    Vector theta = params_vector(net);
    o.initial_param_norm = theta.norm();
    JsonlWriter w(io.dir + "/metrics_seed" + std::to_string(seed) + ".jsonl");
    for (long t = 0; t < sweeps; ++t) {
      const Vector delta =
          expected_td_error(baird.mdp, baird.sampling, net, gamma, l2_eta);
      const double td_norm = delta.norm();
      if (t == 0) o.initial_td_norm = td_norm;
      o.max_td_norm = std::max(o.max_td_norm, td_norm);
      if (!std::isfinite(td_norm) || !theta.allFinite()) {
        o.finite = false;
        break;
      }
      if (t % record_every == 0) {
        OrderedJson rec;
        rec["kind"] = "train";
        rec["step"] = t;
        rec["param_norm"] = theta.norm();
        rec["td_error_norm"] = td_norm;
        w.write(rec);
        o.rec_steps.push_back(double(t));
        o.rec_param.push_back(theta.norm());
        o.rec_td.push_back(td_norm);
      }
      theta += step * delta;
      set_params_vector(net, theta);
      o.final_td_norm = td_norm;
    }
    o.final_param_norm = theta.allFinite()
                             ? theta.norm()
                             : std::numeric_limits<double>::infinity();
    OrderedJson rec;
    rec["kind"] = "result";
    rec["step"] = sweeps;
    rec["param_norm"] = o.final_param_norm;
    rec["td_error_norm"] = o.final_td_norm;
    w.write(rec);
  });

  std::vector<std::string> labels;
  std::vector<SeedStats> stats;
  std::vector<PlotSeries> td_curves, pn_curves;
  bool all_grew = true, all_contracted = true;
  for (size_t i = 0; i < io.seeds.size(); ++i) {
    const SeedOut& o = outs[i];
    const std::string label = "seed" + std::to_string(io.seeds[i]);
    labels.push_back(label);
    const double ratio = o.final_param_norm / o.initial_param_norm;
    if (!(ratio >= growth)) all_grew = false;
    if (!(o.finite && o.final_td_norm < o.initial_td_norm))
      all_contracted = false;
    SeedStats st;
    st.push_back({"initial_param_norm", o.initial_param_norm});
    st.push_back({"final_param_norm", o.final_param_norm});
    st.push_back({"param_growth", ratio});
    st.push_back({"initial_td_norm", o.initial_td_norm});
    st.push_back({"final_td_norm", o.final_td_norm});
    st.push_back({"max_td_norm", o.max_td_norm});
    stats.push_back(std::move(st));
    PlotSeries ts{label, o.rec_steps, o.rec_td, false};
    PlotSeries ps{label, o.rec_steps, o.rec_param, false};
    td_curves.push_back(std::move(ts));
    pn_curves.push_back(std::move(ps));
  }
  write_aggregate_csv(io.dir + "/aggregate.csv", labels, stats);
  write_series_plot(io.dir + "/plot_td_norm.svg",
                    "expected TD update norm (" + io.variant + ")", "sweep",
                    "||delta||", td_curves, false);
  write_series_plot(io.dir + "/plot_param_norm.svg",
                    "value parameter norm (" + io.variant + ")", "sweep",
                    "||theta||", pn_curves, false);

  if (linear) {
    io.verdict.check(
        "param_norm_growth", all_grew,
        "every seed grew ||theta|| by >= " + format_number(growth) +
            "x within " + std::to_string(sweeps) + " sweeps");
  } else {
    io.verdict.check("td_norm_bounded_and_contracting", all_contracted,
                     "every seed kept ||delta|| finite and ended below its "
                     "initial value");
  }
}

// ---------------------------------------------------------------- jacobian

void run_jacobian(PresetIO& io) {
  if (io.variant.empty()) io.variant = "linear";
  if (io.variant != "linear" && io.variant != "layernorm_l2")
    throw ConfigError("variant must be linear or layernorm_l2 (got '" +
                      io.variant + "')");
  const bool linear = io.variant == "linear";
  if (io.seeds.empty()) io.seeds = default_seeds(1);

  const double gamma = io.cfg.get_double("gamma", 0.99);
  const int width = int(io.cfg.get_int("width", 256));
  const double l2_eta = io.cfg.get_double("l2_eta", linear ? 0.0 : 1.0);
  const int points = int(io.cfg.get_int("points", linear ? 1 : 20));
  finish_config(io, "jacobian");
  if (points < 1) throw ConfigError("points must be >= 1");

  const BairdProblem baird = baird_build();
  const std::vector<LayerSpec> specs =
      linear ? std::vector<LayerSpec>{LayerSpec::dense(8, 1, false)}
             : std::vector<LayerSpec>{LayerSpec::dense(8, width, false),
                                      LayerSpec::layer_norm(width),
                                      LayerSpec::relu(width),
                                      LayerSpec::dense(width, 1, false)};

  std::vector<std::string> labels;
  std::vector<SeedStats> stats;
  std::vector<PlotSeries> curves;
  bool all_positive = true, all_negative = true;
  for (std::uint64_t seed : io.seeds) {
    JsonlWriter w(io.dir + "/metrics_seed" + std::to_string(seed) + ".jsonl");
    std::vector<double> max_reals;
    PlotSeries s;
    s.label = "seed" + std::to_string(seed);
    for (int p = 0; p < points; ++p) {
      NetworkParams net = init_params(specs, derive(seed, 0));
      if (linear) {
        set_params_vector(net, baird_init_weights());
      } else {
        // i.i.d. standard normal parameter points, the regime the width
        // sweeps study.
        Rng rng(Rng::stream(seed, 500 + std::uint64_t(p)).next_u64());
        Vector theta(net.param_count());
        for (int j = 0; j < theta.size(); ++j) theta(j) = rng.normal();
        set_params_vector(net, theta);
      }
      const JacobianReport rep =
          td_jacobian(baird.mdp, baird.sampling, net, gamma, l2_eta);
      max_reals.push_back(rep.max_real);
      OrderedJson rec;
      rec["kind"] = "probe";
      rec["step"] = p;
      rec["max_real_eig"] = rep.max_real;
      w.write(rec);
      s.x.push_back(double(p));
      s.y.push_back(rep.max_real);
      if (!(rep.max_real > 0.0)) all_positive = false;
      if (!(rep.max_real < 0.0)) all_negative = false;
    }
    labels.push_back("seed" + std::to_string(seed));
    SeedStats st;
    st.push_back({"max_real_eig_max",
                  *std::max_element(max_reals.begin(), max_reals.end())});
    st.push_back({"max_real_eig_min",
                  *std::min_element(max_reals.begin(), max_reals.end())});
    stats.push_back(std::move(st));
    curves.push_back(std::move(s));
  }
  write_aggregate_csv(io.dir + "/aggregate.csv", labels, stats);
  write_series_plot(io.dir + "/plot_max_real_eig.svg",
                    "TD Jacobian max real eigenvalue (" + io.variant + ")",
                    "parameter point", "max real eigenvalue", curves, false);

  if (linear) {
    io.verdict.check("max_real_eig_positive", all_positive,
                     "linear star problem Jacobian has a positive real "
                     "eigenvalue at every point");
  } else {
    double worst = -std::numeric_limits<double>::infinity();
    for (const auto& st : stats) worst = std::max(worst, st[0].second);
    io.verdict.check(
        "max_real_eig_negative", all_negative,
        "needs max real eigenvalue < 0 at all " + std::to_string(points) +
            " standard normal parameter points; worst observed " +
            format_number(worst));
  }
}

// ------------------------------------------------------------ probe presets

TabularMDP random_probe_mdp(int S, int A, int feat_dim, double gamma,
                            std::uint64_t seed) {
  Rng rng(Rng::stream(seed, 901).next_u64());
  TabularMDP mdp;
  mdp.S = S;
  mdp.A = A;
  mdp.gamma = gamma;
  mdp.P.resize(size_t(A));
  for (int a = 0; a < A; ++a) {
    Matrix m(S, S);
    for (int s = 0; s < S; ++s) {
      double total = 0.0;
      for (int t = 0; t < S; ++t) {
        m(s, t) = std::abs(rng.normal()) + 0.1;
        total += m(s, t);
      }
      m.row(s) /= total;
    }
    mdp.P[size_t(a)] = m;
  }
  mdp.R.resize(S, A);
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a) mdp.R(s, a) = rng.uniform();
  mdp.P0 = Vector::Constant(S, 1.0 / double(S));
  mdp.r_max = 1.0;
  mdp.features.resize(S, feat_dim);
  for (int s = 0; s < S; ++s)
    for (int f = 0; f < feat_dim; ++f) mdp.features(s, f) = rng.normal();
  mdp.validate();
  return mdp;
}

void write_probe_jsonl(const std::string& path, const ProbeResult& pr,
                       bool with_estimates) {
  JsonlWriter w(path);
  for (size_t i = 0; i < pr.sweep_values.size(); ++i) {
    OrderedJson rec;
    rec["kind"] = "probe";
    rec["step"] = long(pr.sweep_values[i]);
    rec["statistic"] = pr.statistic[i];
    rec["reference"] = pr.reference[i];
    rec["excess"] = pr.statistic[i] - pr.reference[i];
    rec["samples"] = pr.samples[i];
    if (with_estimates) {
      rec["estimate_mean"] = pr.estimate_mean[i];
      rec["estimate_se"] = pr.estimate_se[i];
    }
    w.write(rec);
  }
}

PlotSeries probe_series(const ProbeResult& pr, const std::string& label,
                        bool excess) {
  PlotSeries s;
  s.label = label;
  for (size_t i = 0; i < pr.sweep_values.size(); ++i) {
    s.x.push_back(pr.sweep_values[i]);
    s.y.push_back(excess ? pr.statistic[i] - pr.reference[i]
                         : pr.statistic[i]);
  }
  return s;
}

void run_probe_myopia(PresetIO& io) {
  if (!io.variant.empty())
    throw ConfigError("probe-thm1 has no variants (got '" + io.variant +
                      "')");
  io.variant = "default";
  if (io.seeds.empty()) io.seeds = default_seeds(1);
  const int S = int(io.cfg.get_int("states", 5));
  const int A = int(io.cfg.get_int("actions", 2));
  const int feat_dim = int(io.cfg.get_int("feat_dim", 4));
  const double gamma = io.cfg.get_double("gamma", 0.99);
  const int trials = int(io.cfg.get_int("trials", 100));
  const std::vector<long> batch_sizes = io.cfg.get_int_list(
      "batch_sizes", {8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096});
  finish_config(io, "probe-thm1");

  OrderedJson summary;
  summary["probe"] = "batch-statistics bootstrap";
  summary["seeds"] = OrderedJson::array();
  std::vector<std::string> labels;
  std::vector<SeedStats> stats;
  std::vector<PlotSeries> curves;
  for (std::uint64_t seed : io.seeds) {
    const TabularMDP mdp = random_probe_mdp(S, A, feat_dim, gamma, seed);
    std::vector<int> Ns(batch_sizes.begin(), batch_sizes.end());
    const ProbeResult pr =
        batchnorm_myopia_probe(mdp, mdp.features, Ns, trials, gamma, seed);
    const std::string tag = std::to_string(seed);
    write_probe_rows(io.dir + "/probe_rows_seed" + tag + ".csv", pr);
    write_probe_jsonl(io.dir + "/metrics_seed" + tag + ".jsonl", pr, true);

    const double first = pr.statistic.front();
    const double last = pr.statistic.back();
    const double gap = std::abs(pr.estimate_mean.back() - pr.expected_reward);
    const double two_se = 2.0 * pr.estimate_se.back();
    const bool shrank = last < first;
    const bool contained = gap <= two_se;
    io.verdict.check(
        "bootstrap_shrinks_seed" + tag, shrank,
        "median |bootstrap| " + format_number(last) + " at N=" +
            format_number(pr.sweep_values.back()) + " vs " +
            format_number(first) + " at N=" +
            format_number(pr.sweep_values.front()));
    io.verdict.check("estimate_matches_expected_reward_seed" + tag, contained,
                     "|" + format_number(pr.estimate_mean.back()) + " - " +
                         format_number(pr.expected_reward) + "| = " +
                         format_number(gap) + " <= 2 SE = " +
                         format_number(two_se));

    OrderedJson entry;
    entry["seed"] = seed;
    entry["batch_sizes"] = pr.sweep_values;
    entry["median_bootstrap"] = pr.statistic;
    entry["estimate_mean"] = pr.estimate_mean;
    entry["estimate_se"] = pr.estimate_se;
    entry["expected_reward"] = pr.expected_reward;
    entry["fitted_exponent"] = pr.fitted_exponent;
    entry["monotone_decreasing"] = pr.monotone_decreasing;
    summary["seeds"].push_back(sanitize_numbers(entry));

    labels.push_back("seed" + tag);
    SeedStats st;
    st.push_back({"bootstrap_first", first});
    st.push_back({"bootstrap_last", last});
    st.push_back({"estimate_gap", gap});
    st.push_back({"fitted_exponent", pr.fitted_exponent});
    stats.push_back(std::move(st));
    curves.push_back(probe_series(pr, "seed" + tag, false));
  }
  write_text_file(io.dir + "/probe_summary.json", summary.dump(2) + "\n");
  write_aggregate_csv(io.dir + "/aggregate.csv", labels, stats);
  write_series_plot(io.dir + "/plot_probe.svg",
                    "bootstrap magnitude vs batch size", "batch size N",
                    "median |bootstrap|", curves, false);
}

void run_probe_width_sweep(PresetIO& io, bool curvature) {
  const std::string sub = curvature ? "probe-thm3" : "probe-thm2";
  if (!io.variant.empty())
    throw ConfigError(sub + " has no variants (got '" + io.variant + "')");
  io.variant = "default";
  if (io.seeds.empty()) io.seeds = default_seeds(1);
  const std::vector<long> widths =
      io.cfg.get_int_list("widths", {16, 64, 256, 1024});
  const int trials = int(io.cfg.get_int("trials", 1000));
  const double gamma = io.cfg.get_double("gamma", 0.99);
  const int input_dim = int(io.cfg.get_int("input_dim", 8));
  const double exp_lo = io.cfg.get_double("exponent_lo", -1.0);
  const double exp_hi = io.cfg.get_double("exponent_hi", -0.25);
  const double linear_tol =
      curvature ? io.cfg.get_double("linear_tol", 1e-6) : 0.0;
  finish_config(io, sub);

  OrderedJson summary;
  summary["probe"] =
      curvature ? "curvature width sweep" : "off-policy width sweep";
  summary["seeds"] = OrderedJson::array();
  std::vector<std::string> labels;
  std::vector<SeedStats> stats;
  std::vector<PlotSeries> curves;
  for (std::uint64_t seed : io.seeds) {
    std::vector<int> ks(widths.begin(), widths.end());
    const ProbeResult pr =
        curvature ? curvature_width_sweep(ks, trials, gamma, seed, input_dim)
                  : off_policy_width_sweep(ks, trials, gamma, seed, input_dim);
    const std::string tag = std::to_string(seed);
    write_probe_rows(io.dir + "/probe_rows_seed" + tag + ".csv", pr);
    write_probe_jsonl(io.dir + "/metrics_seed" + tag + ".jsonl", pr, false);

    io.verdict.check("excess_strictly_decreasing_seed" + tag,
                     pr.monotone_decreasing,
                     "statistic minus reference decreases at every width");
    const bool exp_ok =
        std::isfinite(pr.fitted_exponent) && pr.fitted_exponent >= exp_lo &&
        pr.fitted_exponent <= exp_hi;
    io.verdict.check("decay_exponent_seed" + tag, exp_ok,
                     format_number(pr.fitted_exponent) + " in [" +
                         format_number(exp_lo) + ", " +
                         format_number(exp_hi) + "]");
    if (!curvature) {
      bool guard_ok = true;
      for (size_t i = 0; i < pr.sweep_values.size(); ++i)
        if (pr.statistic[i] > pr.reference[i] +
                                  kOffPolicyProbeGuard /
                                      std::sqrt(pr.sweep_values[i]))
          guard_ok = false;
      io.verdict.check(
          "calibrated_envelope_seed" + tag, guard_ok,
          "statistic <= reference + " + format_number(kOffPolicyProbeGuard) +
              "/sqrt(k) at every width");
    } else {
      // Control: a purely linear value function has zero curvature, so the
      // quadratic form must vanish to finite-difference noise.
      NetworkParams lin =
          init_params({LayerSpec::dense(input_dim, 1, false)}, 7);
      Rng rng(Rng::stream(seed, 600).next_u64());
      Vector theta(lin.param_count());
      for (int j = 0; j < theta.size(); ++j) theta(j) = rng.normal();
      set_params_vector(lin, theta);
      double worst = 0.0;
      for (int t = 0; t < 20; ++t) {
        RowVector x(input_dim);
        Vector v(lin.param_count());
        for (int j = 0; j < input_dim; ++j) x(j) = rng.normal();
        for (int j = 0; j < v.size(); ++j) v(j) = rng.normal();
        worst = std::max(worst, curvature_quadform(lin, x, v));
      }
      io.verdict.check("linear_control_seed" + tag, worst < linear_tol,
                       "max |v'Hv|/|v|^2 = " + format_number(worst) +
                           " < " + format_number(linear_tol));
    }

    OrderedJson entry;
    entry["seed"] = seed;
    entry["widths"] = pr.sweep_values;
    entry["statistic"] = pr.statistic;
    entry["reference"] = pr.reference;
    entry["fitted_exponent"] = pr.fitted_exponent;
    entry["monotone_decreasing"] = pr.monotone_decreasing;
    summary["seeds"].push_back(sanitize_numbers(entry));

    labels.push_back("seed" + tag);
    SeedStats st;
    st.push_back({"excess_first",
                  pr.statistic.front() - pr.reference.front()});
    st.push_back({"excess_last", pr.statistic.back() - pr.reference.back()});
    st.push_back({"fitted_exponent", pr.fitted_exponent});
    stats.push_back(std::move(st));
    curves.push_back(probe_series(pr, "seed" + tag, true));
  }
  write_text_file(io.dir + "/probe_summary.json", summary.dump(2) + "\n");
  write_aggregate_csv(io.dir + "/aggregate.csv", labels, stats);
  write_series_plot(io.dir + "/plot_probe.svg",
                    curvature ? "curvature statistic vs width"
                              : "off-policy excess vs width",
                    "hidden width k",
                    curvature ? "max statistic" : "excess over (gamma/2)^2",
                    curves, false);
}

}  // namespace

int run_experiment(const RunOptions& opt) {
  if (opt.out_dir.empty()) throw ConfigError("an output directory is required");
  std::filesystem::create_directories(opt.out_dir);
  PresetIO io;
  io.dir = opt.out_dir;
  io.variant = opt.variant;
  io.seeds = opt.seeds;
  io.cfg = opt.config_path.empty() ? ConfigReader()
                                   : ConfigReader::from_file(opt.config_path);

  const std::string& sub = opt.subcommand;
  if (sub == "cartpole" || sub == "acrobot") {
    run_control(io, sub);
  } else if (sub == "deepsea") {
    run_deepsea(io);
  } else if (sub == "baird") {
    run_baird(io);
  } else if (sub == "jacobian") {
    run_jacobian(io);
  } else if (sub == "probe-thm1") {
    run_probe_myopia(io);
  } else if (sub == "probe-thm2") {
    run_probe_width_sweep(io, false);
  } else if (sub == "probe-thm3") {
    run_probe_width_sweep(io, true);
  } else if (sub == "ablate-lambda") {
    run_ablate(io, true);
  } else if (sub == "ablate-norm") {
    run_ablate(io, false);
  } else {
    throw ConfigError(
        "unknown subcommand '" + sub +
        "' (expected baird, deepsea, cartpole, acrobot, probe-thm1, "
        "probe-thm2, probe-thm3, jacobian, ablate-lambda, or ablate-norm)");
  }
  write_text_file(io.dir + "/verdict.txt", io.verdict.text());
  return io.verdict.all_pass ? 0 : 1;
}

namespace {

std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(csv);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    std::uint64_t x = 0;
    const auto res = std::from_chars(part.data(), part.data() + part.size(), x);
    if (part.empty() || res.ec != std::errc() ||
        res.ptr != part.data() + part.size())
      throw ConfigError("--seeds needs a comma-separated list of unsigned "
                        "integers, got '" +
                        csv + "'");
    seeds.push_back(x);
  }
  if (seeds.empty()) throw ConfigError("--seeds list is empty");
  return seeds;
}

}  // namespace

int harness_main(int argc, char** argv) {
  CLI::App app{
      "pqnlab: vectorised Q-learning experiments and stability probes"};
  RunOptions opt;
  std::string seeds_csv;
  app.add_option("subcommand", opt.subcommand,
                 "baird | deepsea | cartpole | acrobot | probe-thm1 | "
                 "probe-thm2 | probe-thm3 | jacobian | ablate-lambda | "
                 "ablate-norm")
      ->required();
  app.add_option("--config", opt.config_path,
                 "key = value config file (preset defaults when omitted)");
  app.add_option("--seeds", seeds_csv,
                 "comma-separated seed list (preset default when omitted)");
  app.add_option("--variant", opt.variant, "preset variant, e.g. pqn or dqn");
  app.add_option("--out", opt.out_dir, "output directory")->required();
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    if (!seeds_csv.empty()) opt.seeds = parse_seed_list(seeds_csv);
    return run_experiment(opt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  }
}

}  // namespace pqnlab
