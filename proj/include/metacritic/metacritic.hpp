#ifndef METACRITIC_METACRITIC_HPP
#define METACRITIC_METACRITIC_HPP

// Bi-level meta-training of the critic and model-free meta-test policy
// learning with a frozen critic.
//
// Meta-train inner loop: one (or k) policy-gradient steps on the critic
// summed over the executed (state, action) pairs of a value-only rollout;
// states are data, actions are re-expressed through the policy so the
// update is differentiable in both θ and φ.
//
// Outer loop: the updated policy is unrolled through the differentiable
// dynamics model and the terminal task cost is differentiated w.r.t. φ
// through the inner update (second order).
//
// Meta-test: the frozen critic is summed over every visited state of a
// value-only environment rollout, terminal state included, with actions
// recomputed from the policy; only first-order gradients w.r.t. θ are used
// and the dynamics are never differentiated through.

#include <atomic>
#include <cstdint>
#include <span>
#include <vector>

#include "metacritic/diffcore.hpp"
#include "metacritic/dynamics.hpp"
#include "metacritic/policies.hpp"
#include "metacritic/rng.hpp"

namespace metacritic {

namespace detail {
// Counts differentiable-rollout constructions; tests assert it stays flat
// across meta_test (model-freeness by construction).
inline std::atomic<std::uint64_t> g_model_rollout_count{0};
}  // namespace detail

struct InnerLoopConfig {
  double alpha = 1e-2;  // inner learning rate
  int steps = 1;        // inner gradient steps per outer iteration

  void validate() const {
    if (alpha <= 0.0) throw std::invalid_argument("InnerLoopConfig: alpha must be > 0");
    if (steps < 1) throw std::invalid_argument("InnerLoopConfig: steps must be >= 1");
  }
};

enum class PolicyInitRule : std::uint8_t { FreshPerIteration, Persistent };
enum class OuterOptimizer : std::uint8_t { PlainGradient, AdaptiveMoment };

struct OuterLoopConfig {
  double learning_rate = 1e-3;
  int iterations = 100;
  std::vector<TaskSpec> tasks;                   // goal set G
  std::vector<std::vector<double>> init_states;  // task losses summed over these
  PolicyInitRule reinit = PolicyInitRule::FreshPerIteration;
  OuterOptimizer optimizer = OuterOptimizer::PlainGradient;
  std::uint64_t seed = 0;
  double divergence_threshold = 1e6;
  // decoupled weight decay on φ; keeps directions the task loss never
  // constrains from drifting instead of shrinking toward zero
  double weight_decay = 0.0;

  void validate() const {
    if (learning_rate <= 0.0)
      throw std::invalid_argument("OuterLoopConfig: learning rate must be > 0");
    if (weight_decay < 0.0)
      throw std::invalid_argument("OuterLoopConfig: weight decay must be >= 0");
    if (tasks.empty()) throw std::invalid_argument("OuterLoopConfig: goal set is empty");
    if (init_states.empty())
      throw std::invalid_argument("OuterLoopConfig: no initial states");
  }
};

struct MetaTrainEntry {
  int iteration;
  int goal_id;
  double task_loss;                // summed over initial states
  std::vector<double> theta_new;   // post-inner-update policy snapshot
};

struct MetaTrainRecord {
  std::vector<MetaTrainEntry> entries;  // one per (iteration, goal)
  std::vector<std::vector<double>> phi_checkpoints;
  bool diverged = false;
};

class AdamState {
 public:
  AdamState(std::size_t n, double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(b1), b2_(b2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<double> params, std::span<const double> grad) {
    ++t_;
    double c1 = 1.0 - std::pow(b1_, t_);
    double c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
      params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

// Σ_t critic(φ, s_t, a_t, g) with states as fixed data and actions
// re-expressed through the policy. Sums over executed pairs t = 0..T-1;
// with include_terminal, adds the terminal state with a_T = π(s_T).
template <class Policy, class Critic>
Expr critic_sum(Graph& g, const Policy& policy, std::span<const Expr> theta,
                const Critic& critic, std::span<const Expr> phi,
                std::span<const std::vector<Expr>> states, std::span<const Expr> goal,
                bool include_terminal) {
  std::vector<Expr> terms;
  std::size_t upto = include_terminal ? states.size() : states.size() - 1;
  terms.reserve(upto);
  for (std::size_t t = 0; t < upto; ++t) {
    std::vector<Expr> a = policy.act(theta, std::span<const Expr>(states[t]));
    terms.push_back(critic.value(phi, std::span<const Expr>(states[t]),
                                 std::span<const Expr>(a), goal));
  }
  return g.sum(terms);
}

template <class Policy, class Critic>
Expr critic_sum(Graph& g, const Policy& policy, std::span<const Expr> theta,
                const Critic& critic, std::span<const Expr> phi, const Trajectory& traj,
                std::span<const double> goal, bool include_terminal = false) {
  std::vector<std::vector<Expr>> states;
  states.reserve(traj.states.size());
  for (const auto& s : traj.states) states.push_back(as_constants(g, s));
  std::vector<Expr> gexpr = as_constants(g, goal);
  return critic_sum(g, policy, theta, critic, phi,
                    std::span<const std::vector<Expr>>(states),
                    std::span<const Expr>(gexpr), include_terminal);
}

// θ_new(φ): cfg.steps critic-gradient steps; differentiable in φ (and θ).
template <class Policy, class Critic>
std::vector<Expr> inner_update(Graph& g, const Policy& policy, std::span<const Expr> theta,
                               const Critic& critic, std::span<const Expr> phi,
                               std::span<const std::vector<Expr>> states,
                               std::span<const Expr> goal, const InnerLoopConfig& cfg) {
  cfg.validate();
  std::vector<Expr> cur(theta.begin(), theta.end());
  for (int k = 0; k < cfg.steps; ++k) {
    Expr loss = critic_sum(g, policy, std::span<const Expr>(cur), critic, phi, states, goal,
                           /*include_terminal=*/false);
    std::vector<Expr> grad = g.adjoints(loss, std::span<const Expr>(cur));
    for (std::size_t i = 0; i < cur.size(); ++i) cur[i] = cur[i] - cfg.alpha * grad[i];
  }
  return cur;
}

template <class Policy, class Critic>
std::vector<Expr> inner_update(Graph& g, const Policy& policy, std::span<const Expr> theta,
                               const Critic& critic, std::span<const Expr> phi,
                               const Trajectory& traj, const InnerLoopConfig& cfg,
                               std::span<const double> goal) {
  std::vector<std::vector<Expr>> states;
  states.reserve(traj.states.size());
  for (const auto& s : traj.states) states.push_back(as_constants(g, s));
  std::vector<Expr> gexpr = as_constants(g, goal);
  return inner_update(g, policy, theta, critic, phi,
                      std::span<const std::vector<Expr>>(states),
                      std::span<const Expr>(gexpr), cfg);
}

// Unrolls π_{θ_new} through the model and returns the terminal task cost
// (squared goal distance over the position sub-state), differentiable in
// everything upstream of θ_new.
template <class Policy>
Expr outer_task_loss(Graph& g, const Policy& policy, std::span<const Expr> theta_new,
                     const DynamicsModel& model, std::span<const Expr> s0,
                     std::span<const Expr> goal, int horizon) {
  detail::g_model_rollout_count.fetch_add(1, std::memory_order_relaxed);
  std::vector<std::vector<Expr>> states, actions;
  auto pol = [&](std::span<const Expr> s) { return policy.act(theta_new, s); };
  unroll_graph(pol, model, s0, horizon, states, actions);
  const std::vector<Expr>& last = states.back();
  std::vector<Expr> terms;
  for (std::size_t i = 0; i < goal.size(); ++i) terms.push_back(square(last[i] - goal[i]));
  return g.sum(terms);
}

template <class Policy>
Expr outer_task_loss(Graph& g, const Policy& policy, std::span<const Expr> theta_new,
                     const DynamicsModel& model, std::span<const double> s0,
                     const TaskSpec& task) {
  std::vector<Expr> s0e = as_constants(g, s0);
  std::vector<Expr> ge = as_constants(g, task.goal);
  return outer_task_loss(g, policy, theta_new, model, std::span<const Expr>(s0e),
                         std::span<const Expr>(ge), task.horizon);
}

// One outer-iteration bilevel computation, built once and rebound per
// iteration: inputs are (θ_init, φ, rollout states per initial state, s0s,
// goal); outputs are the task loss and its φ-gradient.
template <class Policy, class Critic>
class BilevelProgram {
 public:
  BilevelProgram(const Policy& policy, const Critic& critic, const DynamicsModel& model,
                 int horizon, int n_init_states, const InnerLoopConfig& inner,
                 std::size_t node_cap = 10'000'000)
      : graph_(node_cap), policy_(policy), critic_(critic), model_(model), horizon_(horizon) {
    inner.validate();
    const int sd = model.state_dim();
    const int gd = model.goal_dim();
    theta_in_ = make_inputs(policy.param_count());
    phi_in_ = make_inputs(critic.param_count());
    goal_in_ = make_inputs(gd);

    std::vector<Expr> loss_terms;
    for (int k = 0; k < n_init_states; ++k) {
      PerInit pi;
      pi.s0 = make_inputs(sd);
      pi.states.resize(horizon + 1);
      for (int t = 0; t <= horizon; ++t) pi.states[t] = make_inputs(sd);
      std::vector<Expr> theta_new = inner_update(
          graph_, policy_, std::span<const Expr>(theta_in_), critic_,
          std::span<const Expr>(phi_in_), std::span<const std::vector<Expr>>(pi.states),
          std::span<const Expr>(goal_in_), inner);
      pi.loss = outer_task_loss(graph_, policy_, std::span<const Expr>(theta_new), model_,
                                std::span<const Expr>(pi.s0), std::span<const Expr>(goal_in_),
                                horizon);
      pi.theta_new = std::move(theta_new);
      loss_terms.push_back(pi.loss);
      inits_.push_back(std::move(pi));
    }
    total_loss_ = graph_.sum(loss_terms);
    phi_grad_ = graph_.adjoints(total_loss_, std::span<const Expr>(phi_in_));
  }

  // Binds one (θ, φ, goal) instance; trajectories are value rollouts of the
  // bound θ from each initial state.
  template <class RolloutFn>
  void bind(std::span<const double> theta, std::span<const double> phi,
            std::span<const double> goal, std::span<const std::vector<double>> init_states,
            RolloutFn&& rollout_values) {
    for (std::size_t i = 0; i < theta_in_.size(); ++i) graph_.set_input(theta_in_[i], theta[i]);
    for (std::size_t i = 0; i < phi_in_.size(); ++i) graph_.set_input(phi_in_[i], phi[i]);
    for (std::size_t i = 0; i < goal_in_.size(); ++i) graph_.set_input(goal_in_[i], goal[i]);
    for (std::size_t k = 0; k < inits_.size(); ++k) {
      Trajectory traj = rollout_values(init_states[k]);
      for (std::size_t i = 0; i < inits_[k].s0.size(); ++i)
        graph_.set_input(inits_[k].s0[i], init_states[k][i]);
      for (int t = 0; t <= horizon_; ++t)
        for (int i = 0; i < model_.state_dim(); ++i)
          graph_.set_input(inits_[k].states[t][i], traj.states[t][i]);
    }
    graph_.refresh();
  }

  double task_loss() const { return graph_.val(total_loss_); }
  double task_loss(int init_index) const { return graph_.val(inits_[init_index].loss); }

  std::vector<double> phi_gradient() const {
    std::vector<double> g(phi_grad_.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = graph_.val(phi_grad_[i]);
    return g;
  }

  std::vector<double> theta_new(int init_index = 0) const {
    const auto& tn = inits_[init_index].theta_new;
    std::vector<double> v(tn.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = graph_.val(tn[i]);
    return v;
  }

  std::size_t node_count() const { return graph_.size(); }

 private:
  struct PerInit {
    std::vector<Expr> s0;
    std::vector<std::vector<Expr>> states;  // rollout data, bound per iteration
    std::vector<Expr> theta_new;
    Expr loss;
  };

  std::vector<Expr> make_inputs(std::size_t n) {
    std::vector<Expr> v;
    v.reserve(n);
    for (std::size_t i = 0; i < n; ++i) v.push_back(graph_.input(0.0));
    return v;
  }

  Graph graph_;
  Policy policy_;
  Critic critic_;
  DynamicsModel model_;
  int horizon_;
  std::vector<Expr> theta_in_, phi_in_, goal_in_;
  std::vector<PerInit> inits_;
  Expr total_loss_{};
  std::vector<Expr> phi_grad_;
};

// Algorithm: loop over outer iterations and goals; (re)initialize θ,
// rollout, inner update, task loss through the model, φ step.
template <class Policy, class Critic>
std::pair<std::vector<double>, MetaTrainRecord> meta_train(
    const OuterLoopConfig& outer, const InnerLoopConfig& inner, const Policy& policy,
    const Critic& critic, const DynamicsModel& model, std::vector<double> phi0,
    int checkpoint_every = 0) {
  outer.validate();
  inner.validate();
  const int horizon = outer.tasks.front().horizon;
  for (const TaskSpec& t : outer.tasks) {
    t.validate(model.goal_dim());
    if (t.horizon != horizon)
      throw std::invalid_argument("meta_train: all tasks must share one horizon");
  }

  BilevelProgram<Policy, Critic> prog(policy, critic, model, horizon,
                                      static_cast<int>(outer.init_states.size()), inner);

  std::vector<double> phi = std::move(phi0);
  MetaTrainRecord record;
  AdamState adam(phi.size(), outer.learning_rate);

  std::vector<double> theta_persistent;
  if (outer.reinit == PolicyInitRule::Persistent)
    theta_persistent = policy.init(derive_seed(outer.seed, /*tag=*/1));

  for (int iter = 0; iter < outer.iterations; ++iter) {
    for (std::size_t gi = 0; gi < outer.tasks.size(); ++gi) {
      const TaskSpec& task = outer.tasks[gi];
      std::vector<double> theta =
          outer.reinit == PolicyInitRule::Persistent
              ? theta_persistent
              : policy.init(derive_seed(outer.seed, 1,
                                        static_cast<std::uint64_t>(iter) * outer.tasks.size() + gi));

      auto roll = [&](std::span<const double> s0) {
        auto pol = [&](std::span<const double> s, std::span<double> a) {
          policy.act(std::span<const double>(theta), s, a);
        };
        return rollout(pol, model, s0, task);
      };
      try {
        prog.bind(std::span<const double>(theta), std::span<const double>(phi),
                  std::span<const double>(task.goal),
                  std::span<const std::vector<double>>(outer.init_states), roll);
      } catch (const GraphError&) {
        record.diverged = true;
        record.phi_checkpoints.push_back(phi);
        return {phi, record};
      } catch (const RolloutError&) {
        record.diverged = true;
        record.phi_checkpoints.push_back(phi);
        return {phi, record};
      }

      MetaTrainEntry entry;
      entry.iteration = iter;
      entry.goal_id = static_cast<int>(gi);
      entry.task_loss = prog.task_loss();
      entry.theta_new = prog.theta_new(0);
      record.entries.push_back(std::move(entry));

      if (!(prog.task_loss() <= outer.divergence_threshold)) {
        record.diverged = true;
        record.phi_checkpoints.push_back(phi);
        return {phi, record};
      }

      std::vector<double> grad = prog.phi_gradient();
      if (outer.optimizer == OuterOptimizer::PlainGradient) {
        for (std::size_t i = 0; i < phi.size(); ++i) phi[i] -= outer.learning_rate * grad[i];
      } else {
        adam.step(std::span<double>(phi), std::span<const double>(grad));
      }
      if (outer.weight_decay > 0.0) {
        const double shrink = 1.0 - outer.learning_rate * outer.weight_decay;
        for (double& p : phi) p *= shrink;
      }
    }
    if (checkpoint_every > 0 && (iter + 1) % checkpoint_every == 0)
      record.phi_checkpoints.push_back(phi);
  }
  record.phi_checkpoints.push_back(phi);
  return {phi, record};
}

struct MetaTestResult {
  std::vector<double> theta;
  std::vector<double> curve;  // terminal task cost per iteration (pre-update)
  double final_cost = 0.0;
};

// Model-free policy learning with a frozen critic: value-only environment
// rollouts; the policy steps along ∇_θ of the critic summed over all
// visited states (terminal included) with actions recomputed from π_θ.
template <class Policy, class Critic>
MetaTestResult meta_test(std::span<const double> phi, const Policy& policy,
                         const Critic& critic, const DynamicsModel& env,
                         std::span<const double> s0, const TaskSpec& task,
                         const InnerLoopConfig& cfg, int iterations,
                         std::vector<double> theta0) {
  cfg.validate();
  task.validate(env.goal_dim());

  const int sd = env.state_dim();
  Graph g;
  std::vector<Expr> theta_in;
  for (std::size_t i = 0; i < policy.param_count(); ++i) theta_in.push_back(g.input(0.0));
  std::vector<Expr> phi_const = as_constants(g, phi);
  std::vector<Expr> goal_const = as_constants(g, task.goal);
  std::vector<std::vector<Expr>> state_in(task.horizon + 1);
  for (auto& se : state_in) {
    se.reserve(sd);
    for (int i = 0; i < sd; ++i) se.push_back(g.input(0.0));
  }
  Expr loss = critic_sum(g, policy, std::span<const Expr>(theta_in), critic,
                         std::span<const Expr>(phi_const),
                         std::span<const std::vector<Expr>>(state_in),
                         std::span<const Expr>(goal_const), /*include_terminal=*/true);
  std::vector<Expr> grad = g.adjoints(loss, std::span<const Expr>(theta_in));

  MetaTestResult res;
  res.theta = std::move(theta0);
  res.curve.reserve(iterations);
  auto pol = [&](std::span<const double> s, std::span<double> a) {
    policy.act(std::span<const double>(res.theta), s, a);
  };
  for (int it = 0; it < iterations; ++it) {
    Trajectory traj = rollout(pol, env, s0, task);
    res.curve.push_back(terminal_task_cost(traj, std::span<const double>(task.goal)));
    for (std::size_t i = 0; i < theta_in.size(); ++i) g.set_input(theta_in[i], res.theta[i]);
    for (int t = 0; t <= task.horizon; ++t)
      for (int i = 0; i < sd; ++i) g.set_input(state_in[t][i], traj.states[t][i]);
    g.refresh();
    for (int k = 0; k < cfg.steps; ++k) {
      // For k > 1, re-linearize on the same rollout data.
      if (k > 0) {
        for (std::size_t i = 0; i < theta_in.size(); ++i)
          g.set_input(theta_in[i], res.theta[i]);
        g.refresh();
      }
      for (std::size_t i = 0; i < res.theta.size(); ++i)
        res.theta[i] -= cfg.alpha * g.val(grad[i]);
    }
  }
  Trajectory final_traj = rollout(pol, env, s0, task);
  res.final_cost = terminal_task_cost(final_traj, std::span<const double>(task.goal));
  return res;
}

}  // namespace metacritic

#endif  // METACRITIC_METACRITIC_HPP
