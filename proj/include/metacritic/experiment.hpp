#ifndef METACRITIC_EXPERIMENT_HPP
#define METACRITIC_EXPERIMENT_HPP

// Experiment harness: JSON config (unknown keys are errors), deterministic
// seed derivation, concurrent runs with fixed-order aggregation, CSV/
// checkpoint emission and a run manifest with the config hash.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "metacritic/baselines.hpp"
#include "metacritic/checkpoint.hpp"
#include "metacritic/dynamics.hpp"
#include "metacritic/landscape.hpp"
#include "metacritic/metacritic.hpp"
#include "metacritic/nets.hpp"
#include "metacritic/policies.hpp"
#include "metacritic/rng.hpp"

namespace metacritic {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class EnvironmentKind : std::uint8_t { Toy, PointMass, Reacher2 };
enum class SweepKind : std::uint8_t { Goals, Mass, Length };

struct TestPhaseConfig {
  double alpha = 0.01;
  int iterations = 1000;
  double mass_scale = 1.0;    // arm only
  double length_scale = 1.0;  // arm only
  double dt_scale = 1.0;      // any integrator env
  double solved_threshold = 0.1;
};

struct SweepSpec {
  SweepKind kind = SweepKind::Goals;
  std::vector<double> values;  // goal-noise stds / mass multipliers / link lengths
  int goals_per_cell = 10;
  int policies_per_cell = 5;
  double goal_noise_std = 0.1;  // used by mass/length sweeps

  void validate() const {
    if (values.empty()) throw ConfigError("sweep: empty value list");
    if (goals_per_cell < 1 || policies_per_cell < 1)
      throw ConfigError("sweep: per-cell counts must be >= 1");
  }
};

struct ExperimentConfig {
  EnvironmentKind environment = EnvironmentKind::PointMass;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::vector<std::vector<double>> goals;
  std::vector<std::vector<double>> init_states;
  int horizon = 10;
  double dt = 0.1;
  ArmParams arm;

  std::vector<int> critic_hidden = {32};
  Activation critic_activation = Activation::Elu;
  CriticInputMode critic_mode = CriticInputMode::RelativeGoal;

  std::string policy_kind = "constant";  // constant | mlp
  std::vector<int> policy_hidden = {32};
  Activation policy_activation = Activation::Tanh;
  double policy_init_lo = -2.0;
  double policy_init_hi = 2.0;

  InnerLoopConfig inner;
  double outer_learning_rate = 1e-3;
  int outer_iterations = 100;
  double outer_weight_decay = 0.0;
  OuterOptimizer optimizer = OuterOptimizer::AdaptiveMoment;
  PolicyInitRule reinit = PolicyInitRule::FreshPerIteration;
  double divergence_threshold = 1e6;
  int checkpoint_every = 0;
  int snapshot_every = 1;  // θ-trace row every N iterations

  TestPhaseConfig test;
  QLearningConfig baseline;
  int baseline_iterations = 0;  // when > 0, meta-train also fits the Q baseline

  double grid_lo = -2.0;
  double grid_hi = 2.0;
  int grid_resolution = 41;
  std::vector<std::string> grid_kinds = {"true-return", "meta", "supervised"};

  SweepSpec sweep;
  std::string critic_checkpoint;
  std::string q_checkpoint;
  std::string out_dir = "out";

  DynamicsModel model() const {
    DynamicsModel m;
    m.dt = dt;
    m.arm = arm;
    switch (environment) {
      case EnvironmentKind::Toy: m.kind = ModelKind::ScalarIntegrator; break;
      case EnvironmentKind::PointMass: m.kind = ModelKind::PointMass2d; break;
      case EnvironmentKind::Reacher2: m.kind = ModelKind::TwoLinkArm; break;
    }
    return m;
  }

  // Environment as seen at test time, with the configured perturbations.
  DynamicsModel test_model() const {
    DynamicsModel m = model();
    m.dt *= test.dt_scale;
    m.arm.m1 *= test.mass_scale;
    m.arm.m2 *= test.mass_scale;
    m.arm.l1 *= test.length_scale;
    m.arm.l2 *= test.length_scale;
    return m;
  }

  void validate() const {
    if (goals.empty()) throw ConfigError("config: goal list is empty");
    if (init_states.empty()) throw ConfigError("config: init_states is empty");
    if (seeds.empty()) throw ConfigError("config: seed list is empty");
    DynamicsModel m = model();
    for (const auto& g : goals)
      if (static_cast<int>(g.size()) != m.goal_dim())
        throw ConfigError("config: goal width does not match environment");
    for (const auto& s : init_states)
      if (static_cast<int>(s.size()) != m.state_dim())
        throw ConfigError("config: init state width does not match environment");
    if (horizon < 1) throw ConfigError("config: horizon must be >= 1");
    if (policy_kind != "constant" && policy_kind != "mlp")
      throw ConfigError("config: policy.kind must be constant or mlp");
  }
};

// ---------------------------------------------------------------------------
// JSON parsing. Every object rejects keys it does not know.

namespace detail {

using nlohmann::json;

inline void require_keys(const json& j, const std::string& path,
                         std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config: " + path + " must be an object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError("config: unknown key '" + item.key() + "' in " + path);
  }
}

template <class T>
void read_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline Activation parse_activation(const std::string& s, const std::string& path) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "elu") return Activation::Elu;
  if (s == "relu") return Activation::Relu;
  throw ConfigError("config: bad activation '" + s + "' in " + path);
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  using detail::read_if;
  using detail::require_keys;
  ExperimentConfig cfg;
  require_keys(j, "top level",
               {"environment", "seeds", "goals", "init_states", "horizon", "dt", "arm",
                "critic", "policy", "inner", "outer", "test", "baseline", "landscape",
                "sweep", "critic_checkpoint", "q_checkpoint", "out_dir"});

  if (j.contains("environment")) {
    std::string env = j.at("environment").get<std::string>();
    if (env == "toy")
      cfg.environment = EnvironmentKind::Toy;
    else if (env == "point-mass")
      cfg.environment = EnvironmentKind::PointMass;
    else if (env == "reacher2")
      cfg.environment = EnvironmentKind::Reacher2;
    else
      throw ConfigError("config: unknown environment '" + env + "'");
  }
  read_if(j, "seeds", cfg.seeds);
  read_if(j, "goals", cfg.goals);
  read_if(j, "init_states", cfg.init_states);
  read_if(j, "horizon", cfg.horizon);
  read_if(j, "dt", cfg.dt);

  if (j.contains("arm")) {
    const auto& a = j.at("arm");
    require_keys(a, "arm", {"m1", "m2", "l1", "l2", "friction", "torque_limit", "gravity"});
    read_if(a, "m1", cfg.arm.m1);
    read_if(a, "m2", cfg.arm.m2);
    read_if(a, "l1", cfg.arm.l1);
    read_if(a, "l2", cfg.arm.l2);
    read_if(a, "friction", cfg.arm.friction);
    read_if(a, "torque_limit", cfg.arm.torque_limit);
    read_if(a, "gravity", cfg.arm.gravity);
  }
  if (j.contains("critic")) {
    const auto& c = j.at("critic");
    require_keys(c, "critic", {"hidden", "activation", "input"});
    read_if(c, "hidden", cfg.critic_hidden);
    if (c.contains("activation"))
      cfg.critic_activation =
          detail::parse_activation(c.at("activation").get<std::string>(), "critic");
    if (c.contains("input")) {
      std::string mode = c.at("input").get<std::string>();
      if (mode == "concat")
        cfg.critic_mode = CriticInputMode::Concat;
      else if (mode == "relative-goal")
        cfg.critic_mode = CriticInputMode::RelativeGoal;
      else
        throw ConfigError("config: critic.input must be concat or relative-goal");
    }
  }
  if (j.contains("policy")) {
    const auto& p = j.at("policy");
    require_keys(p, "policy", {"kind", "hidden", "activation", "init_lo", "init_hi"});
    read_if(p, "kind", cfg.policy_kind);
    read_if(p, "hidden", cfg.policy_hidden);
    if (p.contains("activation"))
      cfg.policy_activation =
          detail::parse_activation(p.at("activation").get<std::string>(), "policy");
    read_if(p, "init_lo", cfg.policy_init_lo);
    read_if(p, "init_hi", cfg.policy_init_hi);
  }
  if (j.contains("inner")) {
    const auto& i = j.at("inner");
    require_keys(i, "inner", {"alpha", "steps"});
    read_if(i, "alpha", cfg.inner.alpha);
    read_if(i, "steps", cfg.inner.steps);
  }
  if (j.contains("outer")) {
    const auto& o = j.at("outer");
    require_keys(o, "outer",
                 {"learning_rate", "iterations", "weight_decay", "optimizer", "reinit",
                  "divergence_threshold", "checkpoint_every", "snapshot_every"});
    read_if(o, "learning_rate", cfg.outer_learning_rate);
    read_if(o, "iterations", cfg.outer_iterations);
    read_if(o, "weight_decay", cfg.outer_weight_decay);
    if (o.contains("optimizer")) {
      std::string opt = o.at("optimizer").get<std::string>();
      if (opt == "adam")
        cfg.optimizer = OuterOptimizer::AdaptiveMoment;
      else if (opt == "gradient")
        cfg.optimizer = OuterOptimizer::PlainGradient;
      else
        throw ConfigError("config: outer.optimizer must be adam or gradient");
    }
    if (o.contains("reinit")) {
      std::string r = o.at("reinit").get<std::string>();
      if (r == "fresh")
        cfg.reinit = PolicyInitRule::FreshPerIteration;
      else if (r == "persistent")
        cfg.reinit = PolicyInitRule::Persistent;
      else
        throw ConfigError("config: outer.reinit must be fresh or persistent");
    }
    read_if(o, "divergence_threshold", cfg.divergence_threshold);
    read_if(o, "checkpoint_every", cfg.checkpoint_every);
    read_if(o, "snapshot_every", cfg.snapshot_every);
  }
  if (j.contains("test")) {
    const auto& t = j.at("test");
    require_keys(t, "test",
                 {"alpha", "iterations", "mass_scale", "length_scale", "dt_scale",
                  "solved_threshold"});
    read_if(t, "alpha", cfg.test.alpha);
    read_if(t, "iterations", cfg.test.iterations);
    read_if(t, "mass_scale", cfg.test.mass_scale);
    read_if(t, "length_scale", cfg.test.length_scale);
    read_if(t, "dt_scale", cfg.test.dt_scale);
    read_if(t, "solved_threshold", cfg.test.solved_threshold);
  }
  if (j.contains("baseline")) {
    const auto& b = j.at("baseline");
    require_keys(b, "baseline",
                 {"discount", "q_learning_rate", "policy_learning_rate", "q_epochs",
                  "policy_steps", "q_grad_tol", "divergence_threshold", "iterations"});
    read_if(b, "discount", cfg.baseline.discount);
    read_if(b, "q_learning_rate", cfg.baseline.q_learning_rate);
    read_if(b, "policy_learning_rate", cfg.baseline.policy_learning_rate);
    read_if(b, "q_epochs", cfg.baseline.q_epochs);
    read_if(b, "policy_steps", cfg.baseline.policy_steps);
    read_if(b, "q_grad_tol", cfg.baseline.q_grad_tol);
    read_if(b, "divergence_threshold", cfg.baseline.divergence_threshold);
    read_if(b, "iterations", cfg.baseline_iterations);
  }
  if (j.contains("landscape")) {
    const auto& l = j.at("landscape");
    require_keys(l, "landscape", {"lo", "hi", "resolution", "kinds"});
    read_if(l, "lo", cfg.grid_lo);
    read_if(l, "hi", cfg.grid_hi);
    read_if(l, "resolution", cfg.grid_resolution);
    read_if(l, "kinds", cfg.grid_kinds);
    for (const std::string& k : cfg.grid_kinds)
      if (k != "true-return" && k != "meta" && k != "supervised")
        throw ConfigError("config: unknown landscape kind '" + k + "'");
  }
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    require_keys(s, "sweep",
                 {"kind", "values", "goals_per_cell", "policies_per_cell", "goal_noise_std"});
    if (s.contains("kind")) {
      std::string k = s.at("kind").get<std::string>();
      if (k == "goals")
        cfg.sweep.kind = SweepKind::Goals;
      else if (k == "mass")
        cfg.sweep.kind = SweepKind::Mass;
      else if (k == "length")
        cfg.sweep.kind = SweepKind::Length;
      else
        throw ConfigError("config: sweep.kind must be goals, mass or length");
    }
    read_if(s, "values", cfg.sweep.values);
    read_if(s, "goals_per_cell", cfg.sweep.goals_per_cell);
    read_if(s, "policies_per_cell", cfg.sweep.policies_per_cell);
    read_if(s, "goal_noise_std", cfg.sweep.goal_noise_std);
  }
  read_if(j, "critic_checkpoint", cfg.critic_checkpoint);
  read_if(j, "q_checkpoint", cfg.q_checkpoint);
  read_if(j, "out_dir", cfg.out_dir);
  return cfg;
}

inline nlohmann::json load_config_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: parse error: ") + e.what());
  }
  return j;
}

// FNV-1a over the canonical (sorted-key) dump; hex string.
inline std::string config_hash(const nlohmann::json& j) {
  std::string dump = j.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Output plumbing.

namespace detail {

inline std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  os << text;
  if (!os) throw std::runtime_error("write failed: " + path);
}

// Runs f(0..n-1) on up to `threads` workers; each index owns its output
// slot, so aggregation order never depends on scheduling.
inline void parallel_for(int n, int threads, const std::function<void(int)>& f) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::atomic<bool> failed{false};
  std::string first_error;
  std::mutex err_mu;
  int workers = std::min(threads, n);
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
        if (failed.load()) return;
        try {
          f(i);
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!failed.exchange(true)) first_error = e.what();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failed.load()) throw std::runtime_error(first_error);
}

}  // namespace detail

struct RunManifest {
  std::string command;
  std::string hash;
  nlohmann::json config;
  std::vector<std::string> outputs;
  bool completed = false;
};

inline void write_manifest(const std::string& out_dir, const RunManifest& m) {
  nlohmann::json j;
  j["command"] = m.command;
  j["config_hash"] = m.hash;
  j["config"] = m.config;
  j["outputs"] = m.outputs;
  j["completed"] = m.completed;
  j["format_version"] = 1;
  detail::write_text_file(out_dir + "/manifest.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Environment dispatch: builds (model, policy, critic, q) for the configured
// environment and hands them to a generic callable.

template <class Fn>
auto with_environment(const ExperimentConfig& cfg, Fn&& fn) {
  cfg.validate();
  DynamicsModel model = cfg.model();
  if (cfg.environment == EnvironmentKind::Toy) {
    ConstantActionPolicy policy;
    policy.action_dim = 1;
    policy.init_lo = cfg.policy_init_lo;
    policy.init_hi = cfg.policy_init_hi;
    return fn(model, policy, ToyCritic{}, ToyQ{});
  }
  MlpCritic critic = MlpCritic::make(model.state_dim(), model.action_dim(), model.goal_dim(),
                                     cfg.critic_hidden, cfg.critic_mode, cfg.critic_activation);
  MlpQ q = MlpQ::make(model.state_dim(), model.action_dim(), cfg.critic_hidden,
                      cfg.critic_activation);
  if (cfg.policy_kind == "mlp") {
    MlpPolicy policy;
    policy.cfg.input_width = model.state_dim();
    policy.cfg.hidden_widths = cfg.policy_hidden;
    policy.cfg.output_width = model.action_dim();
    policy.cfg.activation = cfg.policy_activation;
    return fn(model, policy, critic, q);
  }
  ConstantActionPolicy policy;
  policy.action_dim = model.action_dim();
  policy.init_lo = cfg.policy_init_lo;
  policy.init_hi = cfg.policy_init_hi;
  return fn(model, policy, critic, q);
}

inline Checkpoint make_critic_checkpoint(const ExperimentConfig& cfg, std::uint64_t seed,
                                         std::vector<double> params) {
  DynamicsModel m = cfg.model();
  Checkpoint ck;
  ck.kind = CheckpointKind::Critic;
  ck.activation = cfg.critic_activation;
  ck.input_mode = cfg.critic_mode == CriticInputMode::RelativeGoal ? 1 : 0;
  ck.state_dim = m.state_dim();
  ck.action_dim = m.action_dim();
  ck.goal_dim = m.goal_dim();
  if (cfg.environment != EnvironmentKind::Toy)
    ck.hidden.assign(cfg.critic_hidden.begin(), cfg.critic_hidden.end());
  ck.seed = seed;
  ck.params = std::move(params);
  return ck;
}

inline Checkpoint make_q_checkpoint(const ExperimentConfig& cfg, std::uint64_t seed,
                                    std::vector<double> params) {
  DynamicsModel m = cfg.model();
  Checkpoint ck;
  ck.kind = CheckpointKind::QFunction;
  ck.activation = cfg.critic_activation;
  ck.input_mode = 0;
  ck.state_dim = m.state_dim();
  ck.action_dim = m.action_dim();
  ck.goal_dim = m.goal_dim();
  if (cfg.environment != EnvironmentKind::Toy)
    ck.hidden.assign(cfg.critic_hidden.begin(), cfg.critic_hidden.end());
  ck.seed = seed;
  ck.params = std::move(params);
  return ck;
}

// ---------------------------------------------------------------------------
// meta-train: one checkpoint + curve CSV + θ-trace CSV per seed; with
// baseline.iterations > 0, also a Q checkpoint + baseline curve per seed.

inline bool run_meta_train(const ExperimentConfig& cfg, const std::string& out_dir,
                           int threads, std::vector<std::string>* outputs = nullptr) {
  std::filesystem::create_directories(out_dir);
  const int n = static_cast<int>(cfg.seeds.size());
  std::vector<bool> diverged(n, false);
  std::vector<std::string> paths(5 * n);

  detail::parallel_for(n, threads, [&](int si) {
    std::uint64_t seed = cfg.seeds[si];
    with_environment(cfg, [&](const DynamicsModel& model, const auto& policy,
                              const auto& critic, const auto& q) {
      OuterLoopConfig outer;
      outer.learning_rate = cfg.outer_learning_rate;
      outer.iterations = cfg.outer_iterations;
      outer.weight_decay = cfg.outer_weight_decay;
      for (const auto& g : cfg.goals) {
        TaskSpec t;
        t.goal = g;
        t.horizon = cfg.horizon;
        outer.tasks.push_back(t);
      }
      outer.init_states = cfg.init_states;
      outer.reinit = cfg.reinit;
      outer.optimizer = cfg.optimizer;
      outer.seed = seed;
      outer.divergence_threshold = cfg.divergence_threshold;

      std::vector<double> phi0 = critic.init(derive_seed(seed, 2));
      auto [phi, record] =
          meta_train(outer, cfg.inner, policy, critic, model, phi0, cfg.checkpoint_every);
      diverged[si] = record.diverged;

      std::string tag = "_seed" + std::to_string(seed);
      std::string ck_path = out_dir + "/critic" + tag + ".ckpt";
      save_checkpoint_file(ck_path, make_critic_checkpoint(cfg, seed, phi));

      std::ostringstream curve;
      curve << "iteration,goal_id,task_loss\n";
      for (const MetaTrainEntry& e : record.entries)
        curve << e.iteration << ',' << e.goal_id << ',' << detail::fmt_g(e.task_loss) << '\n';
      std::string curve_path = out_dir + "/train_curve" + tag + ".csv";
      detail::write_text_file(curve_path, curve.str());

      std::ostringstream trace;
      trace << "iteration,goal_id";
      std::size_t tn = record.entries.empty() ? 0 : record.entries.front().theta_new.size();
      for (std::size_t i = 0; i < tn; ++i) trace << ",theta" << i;
      trace << '\n';
      int every = std::max(1, cfg.snapshot_every);
      for (const MetaTrainEntry& e : record.entries) {
        if (e.iteration % every != 0) continue;
        trace << e.iteration << ',' << e.goal_id;
        for (double v : e.theta_new) trace << ',' << detail::fmt_g(v);
        trace << '\n';
      }
      std::string trace_path = out_dir + "/theta_trace" + tag + ".csv";
      detail::write_text_file(trace_path, trace.str());
      paths[5 * si] = ck_path;
      paths[5 * si + 1] = curve_path;
      paths[5 * si + 2] = trace_path;

      if (cfg.baseline_iterations > 0) {
        DdpgResult dres = ddpg_train(model, std::span<const TaskSpec>(outer.tasks),
                                     std::span<const std::vector<double>>(cfg.init_states), q,
                                     policy, cfg.baseline, cfg.baseline_iterations, seed);
        std::string q_path = out_dir + "/q" + tag + ".ckpt";
        save_checkpoint_file(q_path, make_q_checkpoint(cfg, seed, dres.q_params));
        std::ostringstream bcurve;
        bcurve << "iteration,run,terminal_cost\n";
        for (std::size_t it = 0; it < dres.curve.size(); ++it)
          for (std::size_t r = 0; r < dres.curve[it].size(); ++r)
            bcurve << it << ',' << r << ',' << detail::fmt_g(dres.curve[it][r]) << '\n';
        std::string bcurve_path = out_dir + "/baseline_curve" + tag + ".csv";
        detail::write_text_file(bcurve_path, bcurve.str());
        paths[5 * si + 3] = q_path;
        paths[5 * si + 4] = bcurve_path;
      }
      return 0;
    });
  });
  if (outputs)
    for (const std::string& p : paths)
      if (!p.empty()) outputs->push_back(p);
  // divergence is recorded per seed; the run itself still completed
  return true;
}

// ---------------------------------------------------------------------------
// meta-test: fresh policies per (goal, seed, init) against the (possibly
// perturbed) test model, critic or baseline Q frozen.

namespace detail {

// Baseline analogue of meta_test: per iteration, a value rollout with
// goal-shifted states feeds frozen-Q policy-gradient steps on those states.
template <class Q, class Policy>
double q_test_policy(const Q& q, std::span<const double> qphi, const Policy& policy,
                     const DynamicsModel& env, std::span<const double> s0,
                     const TaskSpec& task, double lr, int iterations, int steps_per_iter,
                     std::vector<double> theta) {
  auto pol = [&](std::span<const double> s, std::span<double> a) {
    std::vector<double> sh = shift_state(s, std::span<const double>(task.goal));
    policy.act(std::span<const double>(theta), std::span<const double>(sh), a);
  };
  for (int it = 0; it < iterations; ++it) {
    Trajectory traj = rollout(pol, env, s0, task);
    std::vector<std::vector<double>> shifted;
    shifted.reserve(traj.states.size());
    for (const auto& s : traj.states)
      shifted.push_back(shift_state(s, std::span<const double>(task.goal)));
    theta = policy_from_q(q, qphi, policy, theta,
                          std::span<const std::vector<double>>(shifted), lr, steps_per_iter);
  }
  Trajectory fin = rollout(pol, env, s0, task);
  return terminal_task_cost(fin, std::span<const double>(task.goal));
}

}  // namespace detail

struct TestRunRow {
  int goal_id;
  std::uint64_t seed;
  int init_id;
  double final_error;
  bool completed;
};

// One row per (goal, seed, init). Checkpoint kind selects the method.
inline std::vector<TestRunRow> run_meta_test_rows(const ExperimentConfig& cfg,
                                                  const Checkpoint& ck, int threads) {
  cfg.validate();
  DynamicsModel env = cfg.test_model();
  const int ng = static_cast<int>(cfg.goals.size());
  const int ns = static_cast<int>(cfg.seeds.size());
  const int ni = static_cast<int>(cfg.init_states.size());
  std::vector<TestRunRow> rows(ng * ns * ni);

  detail::parallel_for(ng * ns * ni, threads, [&](int idx) {
    int gi = idx / (ns * ni);
    int si = (idx / ni) % ns;
    int ii = idx % ni;
    TaskSpec task;
    task.goal = cfg.goals[gi];
    task.horizon = cfg.horizon;
    TestRunRow& row = rows[idx];
    row.goal_id = gi;
    row.seed = cfg.seeds[si];
    row.init_id = ii;
    row.completed = false;
    row.final_error = std::numeric_limits<double>::quiet_NaN();

    with_environment(cfg, [&](const DynamicsModel&, const auto& policy, const auto& critic,
                              const auto& q) {
      std::vector<double> theta0 = policy.init(derive_seed(cfg.seeds[si], 3, idx));
      try {
        if (ck.kind == CheckpointKind::QFunction) {
          row.final_error = detail::q_test_policy(
              q, std::span<const double>(ck.params), policy, env,
              std::span<const double>(cfg.init_states[ii]), task,
              cfg.baseline.policy_learning_rate, cfg.test.iterations, 1, theta0);
        } else {
          MetaTestResult res =
              meta_test(std::span<const double>(ck.params), policy, critic, env,
                        std::span<const double>(cfg.init_states[ii]), task,
                        InnerLoopConfig{cfg.test.alpha, 1}, cfg.test.iterations, theta0);
          row.final_error = res.final_cost;
        }
        row.completed = true;
      } catch (const RolloutError&) {
      } catch (const GraphError&) {
      }
      return 0;
    });
  });
  return rows;
}

inline bool run_meta_test(const ExperimentConfig& cfg, const std::string& ckpt_path,
                          const std::string& out_dir, int threads,
                          std::vector<std::string>* outputs = nullptr) {
  std::filesystem::create_directories(out_dir);
  Checkpoint ck = load_checkpoint_file(ckpt_path);
  std::vector<TestRunRow> rows = run_meta_test_rows(cfg, ck, threads);
  std::ostringstream os;
  os << "goal_id,seed,init_id,final_error,completed\n";
  bool all_completed = true;
  for (const TestRunRow& r : rows) {
    os << r.goal_id << ',' << r.seed << ',' << r.init_id << ','
       << detail::fmt_g(r.final_error) << ',' << (r.completed ? 1 : 0) << '\n';
    all_completed = all_completed && r.completed;
  }
  std::string path = out_dir + "/test_results.csv";
  detail::write_text_file(path, os.str());
  if (outputs) outputs->push_back(path);
  return all_completed;
}

// ---------------------------------------------------------------------------
// landscape: one CSV per (kind, goal). Critic/Q params come from checkpoints
// when the kind needs them.

inline bool run_landscape(const ExperimentConfig& cfg, const std::string& out_dir,
                          int threads, std::vector<std::string>* outputs = nullptr) {
  cfg.validate();
  if (cfg.environment != EnvironmentKind::PointMass)
    throw ConfigError("landscape: only the point-mass environment has a 2-d policy grid");
  std::filesystem::create_directories(out_dir);
  DynamicsModel model = cfg.model();

  struct Job {
    std::string kind;
    int goal_idx;
  };
  std::vector<Job> jobs;
  for (const std::string& k : cfg.grid_kinds)
    for (std::size_t gi = 0; gi < cfg.goals.size(); ++gi)
      jobs.push_back({k, static_cast<int>(gi)});

  Checkpoint critic_ck, q_ck;
  for (const std::string& k : cfg.grid_kinds) {
    if (k == "meta") {
      if (cfg.critic_checkpoint.empty())
        throw ConfigError("landscape: meta grids need critic_checkpoint");
      critic_ck = load_checkpoint_file(cfg.critic_checkpoint);
    } else if (k == "supervised") {
      if (cfg.q_checkpoint.empty())
        throw ConfigError("landscape: supervised grids need q_checkpoint");
      q_ck = load_checkpoint_file(cfg.q_checkpoint);
    }
  }

  std::vector<std::string> paths(jobs.size());
  detail::parallel_for(static_cast<int>(jobs.size()), threads, [&](int ji) {
    const Job& job = jobs[ji];
    GridSpec spec;
    spec.theta1_lo = spec.theta2_lo = cfg.grid_lo;
    spec.theta1_hi = spec.theta2_hi = cfg.grid_hi;
    spec.resolution = cfg.grid_resolution;
    spec.goal = cfg.goals[job.goal_idx];
    spec.s0 = cfg.init_states.front();
    spec.horizon = cfg.horizon;

    LandscapeGrid grid;
    if (job.kind == "true-return") {
      grid = true_return_landscape(model, spec);
    } else if (job.kind == "meta") {
      MlpCritic critic = MlpCritic::make(
          model.state_dim(), model.action_dim(), model.goal_dim(), cfg.critic_hidden,
          critic_ck.input_mode ? CriticInputMode::RelativeGoal : CriticInputMode::Concat,
          critic_ck.activation);
      grid = meta_landscape(critic, std::span<const double>(critic_ck.params), model, spec);
    } else {
      MlpQ q = MlpQ::make(model.state_dim(), model.action_dim(), cfg.critic_hidden,
                          q_ck.activation);
      grid = supervised_landscape(q, std::span<const double>(q_ck.params), model, spec);
    }
    std::string path =
        out_dir + "/landscape_" + job.kind + "_goal" + std::to_string(job.goal_idx) + ".csv";
    std::ostringstream os;
    write_landscape_csv(os, grid);
    detail::write_text_file(path, os.str());
    paths[ji] = path;
  });
  if (outputs) outputs->insert(outputs->end(), paths.begin(), paths.end());
  return true;
}

// ---------------------------------------------------------------------------
// sweep: method × sweep-value tables of mean(std) final error.

struct SweepCellStats {
  double mean = 0.0;
  double stdev = 0.0;
  int count = 0;
};

inline SweepCellStats cell_stats(const std::vector<double>& xs) {
  SweepCellStats s;
  s.count = static_cast<int>(xs.size());
  if (xs.empty()) return s;
  for (double v : xs) s.mean += v;
  s.mean /= xs.size();
  for (double v : xs) s.stdev += (v - s.mean) * (v - s.mean);
  s.stdev = std::sqrt(s.stdev / xs.size());
  return s;
}

struct SweepResult {
  std::vector<double> values;  // column labels
  // per method, per column, raw final errors in fixed run order
  std::vector<std::vector<std::vector<double>>> errors;  // [method][col][run]
  std::vector<std::string> methods;
};

inline SweepResult run_sweep_core(const ExperimentConfig& cfg, const Checkpoint& critic_ck,
                                  const Checkpoint& q_ck, int threads) {
  cfg.validate();
  cfg.sweep.validate();
  if (cfg.goals.size() < 2)
    throw ConfigError("sweep: need at least two training goals to sample around");

  const int ncols = static_cast<int>(cfg.sweep.values.size());
  const int runs_per_cell = cfg.sweep.goals_per_cell * cfg.sweep.policies_per_cell;
  SweepResult result;
  result.values = cfg.sweep.values;
  result.methods = {"meta-critic(ours)", "supervised-Q"};
  result.errors.assign(2, std::vector<std::vector<double>>(
                              ncols, std::vector<double>(runs_per_cell, 0.0)));

  const std::uint64_t base_seed = cfg.seeds.front();
  const int total = 2 * ncols * runs_per_cell;

  detail::parallel_for(total, threads, [&](int idx) {
    const int mi = idx / (ncols * runs_per_cell);
    const int col = (idx / runs_per_cell) % ncols;
    const int run = idx % runs_per_cell;
    const int gi = run / cfg.sweep.policies_per_cell;
    const int pi = run % cfg.sweep.policies_per_cell;
    const double value = cfg.sweep.values[col];

    // goal: per-component gaussian noise around alternating training goals
    double noise_std =
        cfg.sweep.kind == SweepKind::Goals ? value : cfg.sweep.goal_noise_std;
    Rng goal_rng(derive_seed(base_seed, 30 + col, gi));
    const std::vector<double>& anchor = cfg.goals[gi % 2];
    TaskSpec task;
    task.horizon = cfg.horizon;
    for (double a : anchor) task.goal.push_back(a + noise_std * goal_rng.normal());

    DynamicsModel env = cfg.test_model();
    if (cfg.sweep.kind == SweepKind::Mass) {
      env.arm.m1 *= value;
      env.arm.m2 *= value;
    } else if (cfg.sweep.kind == SweepKind::Length) {
      env.arm.l1 = value;
      env.arm.l2 = value;
    }

    with_environment(cfg, [&](const DynamicsModel&, const auto& policy, const auto& critic,
                              const auto& q) {
      std::vector<double> theta0 = policy.init(derive_seed(base_seed, 40 + col, run));
      const std::vector<double>& s0 = cfg.init_states[pi % cfg.init_states.size()];
      double err = std::numeric_limits<double>::quiet_NaN();
      try {
        if (mi == 0) {
          MetaTestResult res = meta_test(
              std::span<const double>(critic_ck.params), policy, critic, env,
              std::span<const double>(s0), task, InnerLoopConfig{cfg.test.alpha, 1},
              cfg.test.iterations, theta0);
          err = res.final_cost;
        } else {
          err = detail::q_test_policy(q, std::span<const double>(q_ck.params), policy, env,
                                      std::span<const double>(s0), task,
                                      cfg.baseline.policy_learning_rate, cfg.test.iterations,
                                      1, theta0);
        }
      } catch (const RolloutError&) {
      } catch (const GraphError&) {
      }
      result.errors[mi][col][run] = err;
      return 0;
    });
  });
  return result;
}

inline std::string sweep_table_csv(const SweepResult& r, bool solved_only,
                                   double solved_threshold) {
  std::ostringstream os;
  os << "method";
  for (double v : r.values) os << ',' << detail::fmt_g(v);
  os << '\n';
  for (std::size_t mi = 0; mi < r.methods.size(); ++mi) {
    os << r.methods[mi];
    for (std::size_t col = 0; col < r.values.size(); ++col) {
      std::vector<double> xs;
      for (double e : r.errors[mi][col]) {
        if (std::isnan(e)) continue;
        if (solved_only && e > solved_threshold) continue;
        xs.push_back(e);
      }
      SweepCellStats s = cell_stats(xs);
      char cell[80];
      if (s.count == 0)
        std::snprintf(cell, sizeof cell, "n/a");
      else
        std::snprintf(cell, sizeof cell, "%.3f(%.3f)", s.mean, s.stdev);
      os << ',' << cell;
    }
    os << '\n';
  }
  return os.str();
}

inline bool run_sweep(const ExperimentConfig& cfg, const std::string& out_dir, int threads,
                      std::vector<std::string>* outputs = nullptr) {
  if (cfg.critic_checkpoint.empty() || cfg.q_checkpoint.empty())
    throw ConfigError("sweep: needs critic_checkpoint and q_checkpoint");
  Checkpoint critic_ck = load_checkpoint_file(cfg.critic_checkpoint);
  Checkpoint q_ck = load_checkpoint_file(cfg.q_checkpoint);
  if (critic_ck.kind != CheckpointKind::Critic)
    throw ConfigError("sweep: critic_checkpoint is not a critic checkpoint");
  if (q_ck.kind != CheckpointKind::QFunction)
    throw ConfigError("sweep: q_checkpoint is not a Q checkpoint");
  std::filesystem::create_directories(out_dir);

  SweepResult r = run_sweep_core(cfg, critic_ck, q_ck, threads);

  std::ostringstream raw;
  raw << "method,value,run,final_error\n";
  for (std::size_t mi = 0; mi < r.methods.size(); ++mi)
    for (std::size_t col = 0; col < r.values.size(); ++col)
      for (std::size_t run = 0; run < r.errors[mi][col].size(); ++run)
        raw << r.methods[mi] << ',' << detail::fmt_g(r.values[col]) << ',' << run << ','
            << detail::fmt_g(r.errors[mi][col][run]) << '\n';

  std::string raw_path = out_dir + "/sweep_runs.csv";
  std::string all_path = out_dir + "/sweep_table_all.csv";
  std::string solved_path = out_dir + "/sweep_table_solved.csv";
  detail::write_text_file(raw_path, raw.str());
  // convention flag: _all aggregates every run; _solved keeps runs whose
  // final error is below test.solved_threshold
  detail::write_text_file(all_path, sweep_table_csv(r, false, 0.0));
  detail::write_text_file(solved_path, sweep_table_csv(r, true, cfg.test.solved_threshold));
  if (outputs) {
    outputs->push_back(raw_path);
    outputs->push_back(all_path);
    outputs->push_back(solved_path);
  }
  bool all_completed = true;
  for (const auto& m : r.errors)
    for (const auto& col : m)
      for (double e : col) all_completed = all_completed && !std::isnan(e);
  return all_completed;
}

}  // namespace metacritic

#endif  // METACRITIC_EXPERIMENT_HPP
