// mcx: experiment driver. Subcommands: toy-verify, meta-train, meta-test,
// landscape, sweep. Exit code 0 iff every requested run completed.

#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "metacritic/baselines.hpp"
#include "metacritic/experiment.hpp"
#include "metacritic/toyoracle.hpp"

namespace {

using namespace metacritic;

struct CheckReport {
  bool all_pass = true;

  void line(const char* name, double got, double want, double tol) {
    double err = std::abs(got - want);
    bool ok = err <= tol;
    all_pass = all_pass && ok;
    std::printf("%-38s got=%-12.8g want=%-12.8g err=%.3g  %s\n", name, got, want, err,
                ok ? "pass" : "FAIL");
  }
};

// Scalar-task verification against the closed-form analyses. `mutate`
// deliberately offsets every analytic target so a healthy harness reports
// failures (self-test of the checker).
int cmd_toy_verify(bool mutate) {
  const double s0 = -6.0, goal = 0.0;
  const double delta = mutate ? 1e-3 : 0.0;
  CheckReport rep;

  DynamicsModel model;
  model.kind = ModelKind::ScalarIntegrator;
  TaskSpec task;
  task.goal = {goal};
  task.horizon = 2;

  // 1. bilevel φ-gradient vs the hand-derived chain at a probe point
  {
    ConstantActionPolicy policy;
    ToyCritic critic;
    InnerLoopConfig inner;
    inner.alpha = 0.5;
    BilevelProgram<ConstantActionPolicy, ToyCritic> prog(policy, critic, model, 2, 1, inner);
    const double theta = 0.8, phi1 = 0.25;
    std::vector<std::vector<double>> inits = {{s0}};
    auto roll = [&](std::span<const double> s) {
      auto pol = [&](std::span<const double>, std::span<double> a) { a[0] = theta; };
      return rollout(pol, model, s, task);
    };
    std::vector<double> th = {theta}, ph = {phi1}, gv = {goal};
    prog.bind(th, ph, gv, std::span<const std::vector<double>>(inits), roll);
    double s1 = s0 + theta;
    double theta_new = theta - phi1 * (s0 + s1 + 2.0 * theta);
    double s2 = s0 + 2.0 * theta_new;
    double chain = 2.0 * (s2 - goal) * 2.0 * (-(s0 + s1 + 2.0 * theta));
    rep.line("bilevel grad_phi vs chain rule", prog.phi_gradient()[0], chain + delta, 1e-10);
  }

  // 2. meta-train from θ0 = 0 → φ1 = 0.25, then meta-test → θ = 3
  {
    ConstantActionPolicy policy;
    policy.init_lo = policy.init_hi = 0.0;
    ToyCritic critic;
    InnerLoopConfig inner;
    inner.alpha = 0.5;
    OuterLoopConfig outer;
    outer.learning_rate = 1e-3;
    outer.iterations = 4000;
    outer.tasks = {task};
    outer.init_states = {{s0}};
    outer.reinit = PolicyInitRule::Persistent;
    auto [phi, record] = meta_train(outer, inner, policy, critic, model, {0.0});
    double phi_star = toy::meta_optimal_phi(s0, s0 + 0.0, 0.0, goal);
    rep.line("meta-train phi vs closed form", phi[0], phi_star + delta, 1e-6);

    InnerLoopConfig test_cfg;
    test_cfg.alpha = 0.02;
    std::vector<double> init = {s0};
    MetaTestResult res = meta_test(std::span<const double>(phi), policy, critic, model,
                                   std::span<const double>(init), task, test_cfg, 2000, {0.0});
    rep.line("meta-test theta vs optimal policy", res.theta[0],
             toy::optimal_policy(s0, goal) + delta, 1e-4);
  }

  // 3. supervised Q: fit on the a=4 dataset, improve the policy, land on
  //    the non-optimal fixed point −(s0+s1)/2 = 4
  {
    const double a = 4.0, s1 = s0 + a, s2 = s1 + a;
    const double r2 = (s2 - goal) * (s2 - goal);
    ReplayDataset data;
    Transition t0, t1;
    t0.s = {s0};
    t0.a = {a};
    t0.s_next = {s1};
    t0.a_next = {a};
    data.add(t0);
    t1.s = {s1};
    t1.a = {a};
    t1.s_next = {s2};
    t1.a_next = {a};
    t1.next_terminal = true;
    t1.r_terminal = r2;
    data.add(t1);

    ToyQ q;
    QLearningConfig qcfg;
    qcfg.q_learning_rate = 1e-3;
    qcfg.q_epochs = 200000;
    qcfg.q_grad_tol = 1e-10;
    std::vector<double> qphi = fit_q(data, qcfg, q, {0.0});
    rep.line("fit_q phi vs closed form", qphi[0],
             toy::supq_optimal_phi(s0, s1, a, r2) + delta, 1e-6);

    ConstantActionPolicy policy;
    std::vector<std::vector<double>> states = {{s0}, {s1}};
    std::vector<double> theta =
        policy_from_q(q, std::span<const double>(qphi), policy, {0.0},
                      std::span<const std::vector<double>>(states), 1e-3, 200000, 1e-12);
    rep.line("supervised theta vs fixed point", theta[0],
             toy::supq_policy_fixed_point(s0, s1) + delta, 1e-6);
    rep.line("supervised vs optimal gap", std::abs(theta[0] - toy::optimal_policy(s0, goal)),
             1.0 + delta, 1e-4);
  }

  // 4. scalar two-critic analysis fixed point
  {
    double got = metacritic_scalar_fixed_point(s0, -2.0, 4.0);
    rep.line("scalar metacritic fixed point", got, 0.5 + delta, 1e-12);
  }

  std::printf("toy-verify: %s\n", rep.all_pass ? "all checks passed" : "FAILURES");
  return rep.all_pass ? 0 : 1;
}

struct CommonOpts {
  std::string config_path;
  std::int64_t seed = -1;
  std::string out_dir;
  int threads = 1;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required = true) {
  cmd->add_option("--config", opts.config_path, "JSON config path")
      ->required(config_required);
  cmd->add_option("--seed", opts.seed, "override: use this single seed");
  cmd->add_option("--out", opts.out_dir, "override: output directory");
  cmd->add_option("--threads", opts.threads, "worker threads")->check(CLI::PositiveNumber);
}

struct LoadedConfig {
  ExperimentConfig cfg;
  nlohmann::json raw;
  std::string out_dir;
};

LoadedConfig load(const CommonOpts& opts) {
  LoadedConfig lc;
  lc.raw = load_config_json(opts.config_path);
  lc.cfg = parse_config(lc.raw);
  if (opts.seed >= 0) lc.cfg.seeds = {static_cast<std::uint64_t>(opts.seed)};
  lc.out_dir = opts.out_dir.empty() ? lc.cfg.out_dir : opts.out_dir;
  return lc;
}

int finish(const LoadedConfig& lc, const std::string& command, bool completed,
           std::vector<std::string> outputs) {
  RunManifest m;
  m.command = command;
  m.hash = config_hash(lc.raw);
  m.config = lc.raw;
  m.outputs = std::move(outputs);
  m.completed = completed;
  write_manifest(lc.out_dir, m);
  if (!completed) std::fprintf(stderr, "mcx %s: some runs did not complete\n", command.c_str());
  return completed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"meta-learned critic experiment driver"};
  app.require_subcommand(1);

  bool mutate = false;
  CLI::App* toy = app.add_subcommand("toy-verify", "check scalar-task closed forms");
  toy->add_flag("--mutate", mutate, "offset analytic targets (checker self-test)");

  CommonOpts train_o, test_o, land_o, sweep_o;
  std::string ckpt_path;
  CLI::App* train = app.add_subcommand("meta-train", "train critics per seed");
  add_common(train, train_o);
  CLI::App* test = app.add_subcommand("meta-test", "learn fresh policies, frozen critic");
  add_common(test, test_o);
  test->add_option("--checkpoint", ckpt_path, "critic or Q checkpoint")->required();
  CLI::App* land = app.add_subcommand("landscape", "emit policy-parameter grids");
  add_common(land, land_o);
  CLI::App* sweep = app.add_subcommand("sweep", "generalization tables");
  add_common(sweep, sweep_o);

  CLI11_PARSE(app, argc, argv);

  try {
    if (toy->parsed()) return cmd_toy_verify(mutate);
    if (train->parsed()) {
      LoadedConfig lc = load(train_o);
      std::vector<std::string> outputs;
      bool ok = run_meta_train(lc.cfg, lc.out_dir, train_o.threads, &outputs);
      return finish(lc, "meta-train", ok, std::move(outputs));
    }
    if (test->parsed()) {
      LoadedConfig lc = load(test_o);
      std::vector<std::string> outputs;
      bool ok = run_meta_test(lc.cfg, ckpt_path, lc.out_dir, test_o.threads, &outputs);
      return finish(lc, "meta-test", ok, std::move(outputs));
    }
    if (land->parsed()) {
      LoadedConfig lc = load(land_o);
      std::vector<std::string> outputs;
      bool ok = run_landscape(lc.cfg, lc.out_dir, land_o.threads, &outputs);
      return finish(lc, "landscape", ok, std::move(outputs));
    }
    if (sweep->parsed()) {
      LoadedConfig lc = load(sweep_o);
      std::vector<std::string> outputs;
      bool ok = run_sweep(lc.cfg, lc.out_dir, sweep_o.threads, &outputs);
      return finish(lc, "sweep", ok, std::move(outputs));
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "mcx: %s\n", e.what());
    return 2;
  }
  return 2;
}
