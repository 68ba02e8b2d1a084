#ifndef METACRITIC_BASELINES_HPP
#define METACRITIC_BASELINES_HPP

// Supervised Q learning (TD fitting) with deterministic policy gradient on
// the fitted Q, goal-conditioned by shifting states to s − g.

#include <span>
#include <stdexcept>
#include <vector>

#include "metacritic/diffcore.hpp"
#include "metacritic/dynamics.hpp"
#include "metacritic/metacritic.hpp"
#include "metacritic/policies.hpp"

namespace metacritic {

struct Transition {
  std::vector<double> s, a, s_next, a_next;  // a_next: action actually taken at s_next
  double r = 0.0;
  bool next_terminal = false;
  double r_terminal = 0.0;
  int goal_id = 0;
};

class ReplayDataset {
 public:
  explicit ReplayDataset(std::size_t capacity = 100000) : capacity_(capacity) {}

  void add(Transition t) {
    if (data_.size() < capacity_) {
      data_.push_back(std::move(t));
    } else {
      data_[head_] = std::move(t);
      head_ = (head_ + 1) % capacity_;
    }
  }

  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::span<const Transition> all() const { return data_; }
  const Transition& operator[](std::size_t i) const { return data_[i]; }

 private:
  std::size_t capacity_;
  std::size_t head_ = 0;
  std::vector<Transition> data_;
};

struct QLearningConfig {
  double discount = 1.0;
  double q_learning_rate = 1e-3;
  double policy_learning_rate = 1e-3;
  int q_epochs = 200;             // gradient steps per fit call
  int policy_steps = 200;         // policy-gradient steps per iteration
  double q_grad_tol = 0.0;        // stop early when the gradient inf-norm drops below
  double divergence_threshold = 1e8;

  void validate() const {
    if (discount < 0.0 || discount > 1.0)
      throw std::invalid_argument("QLearningConfig: discount must be in [0,1]");
  }
};

// TD error δ = Σ (Q(s,a) − (r + γ·target))², target = Q(s',a') or, for
// terminal transitions, the terminal reward alone.
template <class Q>
Expr q_td_loss(Graph& g, const Q& q, std::span<const Expr> phi,
               std::span<const Transition> batch, double gamma) {
  if (batch.empty()) throw std::invalid_argument("q_td_loss: empty batch");
  std::vector<Expr> terms;
  terms.reserve(batch.size());
  for (const Transition& tr : batch) {
    std::vector<Expr> s = as_constants(g, tr.s);
    std::vector<Expr> a = as_constants(g, tr.a);
    Expr pred = q.value(phi, std::span<const Expr>(s), std::span<const Expr>(a));
    Expr target = g.constant(tr.r);
    if (tr.next_terminal) {
      target = target + gamma * g.constant(tr.r_terminal);
    } else {
      std::vector<Expr> sn = as_constants(g, tr.s_next);
      std::vector<Expr> an = as_constants(g, tr.a_next);
      target = target + gamma * q.value(phi, std::span<const Expr>(sn), std::span<const Expr>(an));
    }
    terms.push_back(square(pred - target));
  }
  return g.sum(terms);
}

template <class Q>
double q_td_loss_value(const Q& q, std::span<const double> phi,
                       std::span<const Transition> batch, double gamma) {
  Graph g;
  std::vector<Expr> pe = param_inputs(g, phi);
  return g.val(q_td_loss(g, q, std::span<const Expr>(pe), batch, gamma));
}

// Full-batch gradient descent on the TD error.
template <class Q>
std::vector<double> fit_q(const ReplayDataset& dataset, const QLearningConfig& cfg,
                          const Q& q, std::vector<double> phi) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("fit_q: empty dataset");
  Graph g;
  std::vector<Expr> phi_in = param_inputs(g, phi);
  Expr loss = q_td_loss(g, q, std::span<const Expr>(phi_in), dataset.all(), cfg.discount);
  std::vector<Expr> grad = g.adjoints(loss, std::span<const Expr>(phi_in));
  for (int e = 0; e < cfg.q_epochs; ++e) {
    for (std::size_t i = 0; i < phi.size(); ++i) g.set_input(phi_in[i], phi[i]);
    g.refresh();
    if (!(g.val(loss) <= cfg.divergence_threshold))
      throw NumericError("fit_q: TD loss diverged", loss.id);
    double ginf = 0.0;
    for (const Expr& ge : grad) ginf = std::max(ginf, std::abs(g.val(ge)));
    if (cfg.q_grad_tol > 0.0 && ginf < cfg.q_grad_tol) break;
    for (std::size_t i = 0; i < phi.size(); ++i)
      phi[i] -= cfg.q_learning_rate * g.val(grad[i]);
  }
  return phi;
}

// Deterministic policy gradient descent on Σ_t Q(s_t, π_θ(s_t)) over a
// fixed set of states; Q stays frozen.
template <class Q, class Policy>
std::vector<double> policy_from_q(const Q& q, std::span<const double> qphi,
                                  const Policy& policy, std::vector<double> theta,
                                  std::span<const std::vector<double>> states,
                                  double learning_rate, int steps, double grad_tol = 0.0) {
  Graph g;
  std::vector<Expr> theta_in = param_inputs(g, theta);
  std::vector<Expr> phi_const = as_constants(g, qphi);
  std::vector<Expr> terms;
  for (const std::vector<double>& s : states) {
    std::vector<Expr> se = as_constants(g, s);
    std::vector<Expr> ae = policy.act(std::span<const Expr>(theta_in), std::span<const Expr>(se));
    terms.push_back(q.value(std::span<const Expr>(phi_const), std::span<const Expr>(se),
                            std::span<const Expr>(ae)));
  }
  Expr obj = g.sum(terms);
  std::vector<Expr> grad = g.adjoints(obj, std::span<const Expr>(theta_in));
  for (int k = 0; k < steps; ++k) {
    for (std::size_t i = 0; i < theta.size(); ++i) g.set_input(theta_in[i], theta[i]);
    g.refresh();
    double ginf = 0.0;
    for (const Expr& ge : grad) ginf = std::max(ginf, std::abs(g.val(ge)));
    if (grad_tol > 0.0 && ginf < grad_tol) break;
    for (std::size_t i = 0; i < theta.size(); ++i)
      theta[i] -= learning_rate * g.val(grad[i]);
  }
  return theta;
}

// Shift the position sub-state by the goal; velocities pass through.
inline std::vector<double> shift_state(std::span<const double> s, std::span<const double> goal) {
  std::vector<double> out(s.begin(), s.end());
  for (std::size_t i = 0; i < goal.size(); ++i) out[i] -= goal[i];
  return out;
}

struct DdpgResult {
  std::vector<double> q_params;
  std::vector<double> theta;
  // terminal task cost per (iteration, goal), iteration-major
  std::vector<std::vector<double>> curve;
  bool diverged = false;
};

// Interleaved supervised-Q / policy-gradient loop. The goal is absorbed by
// presenting states to Q and π as s − g.
template <class Q, class Policy>
DdpgResult ddpg_train(const DynamicsModel& env, std::span<const TaskSpec> tasks,
                      std::span<const std::vector<double>> init_states, const Q& q,
                      const Policy& policy, const QLearningConfig& cfg, int iterations,
                      std::uint64_t seed, std::size_t replay_capacity = 100000) {
  cfg.validate();
  if (tasks.empty()) throw std::invalid_argument("ddpg_train: empty goal set");
  if (init_states.empty()) throw std::invalid_argument("ddpg_train: no initial states");

  DdpgResult res;
  res.q_params = q.init(derive_seed(seed, 11));
  res.theta = policy.init(derive_seed(seed, 12));
  ReplayDataset dataset(replay_capacity);

  for (int iter = 0; iter < iterations; ++iter) {
    std::vector<std::vector<double>> recent_states;
    std::vector<double> costs_this_iter;
    try {
      for (std::size_t gi = 0; gi < tasks.size(); ++gi) {
        const TaskSpec& task = tasks[gi];
        for (const std::vector<double>& s0 : init_states) {
          auto pol = [&](std::span<const double> s, std::span<double> a) {
            std::vector<double> sh = shift_state(s, std::span<const double>(task.goal));
            policy.act(std::span<const double>(res.theta), std::span<const double>(sh), a);
          };
          Trajectory traj = rollout(pol, env, std::span<const double>(s0), task);
          costs_this_iter.push_back(traj.costs.back());
          const int T = traj.horizon();
          for (int t = 0; t < T; ++t) {
            Transition tr;
            tr.s = shift_state(std::span<const double>(traj.states[t]),
                               std::span<const double>(task.goal));
            tr.a = traj.actions[t];
            tr.r = traj.costs[t];
            tr.s_next = shift_state(std::span<const double>(traj.states[t + 1]),
                                    std::span<const double>(task.goal));
            tr.goal_id = static_cast<int>(gi);
            if (t + 1 < T) {
              tr.a_next = traj.actions[t + 1];
            } else {
              tr.next_terminal = true;
              tr.r_terminal = traj.costs[T];
              tr.a_next = traj.actions[t];
            }
            recent_states.push_back(tr.s);
            dataset.add(std::move(tr));
          }
        }
      }
      // don't move: a throw below must leave the last good params in res
      std::vector<double> qp = fit_q(dataset, cfg, q, res.q_params);
      std::vector<double> th = policy_from_q(q, std::span<const double>(qp), policy,
                                             res.theta,
                                             std::span<const std::vector<double>>(recent_states),
                                             cfg.policy_learning_rate, cfg.policy_steps);
      res.q_params = std::move(qp);
      res.theta = std::move(th);
    } catch (const GraphError&) {
      res.diverged = true;
      break;
    } catch (const RolloutError&) {
      res.diverged = true;
      break;
    }
    res.curve.push_back(std::move(costs_this_iter));
  }
  return res;
}

// Closed-form convergence point of the scalar two-critic analysis:
// θ = −(s0+s1) / (2[(s0+a)² + (s1+a)²]).
inline double metacritic_scalar_fixed_point(double s0, double s1, double a) {
  double denom = 2.0 * ((s0 + a) * (s0 + a) + (s1 + a) * (s1 + a));
  if (denom == 0.0)
    throw std::domain_error("metacritic_scalar_fixed_point: zero denominator");
  return -(s0 + s1) / denom;
}

}  // namespace metacritic

#endif  // METACRITIC_BASELINES_HPP
