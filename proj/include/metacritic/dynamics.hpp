#ifndef METACRITIC_DYNAMICS_HPP
#define METACRITIC_DYNAMICS_HPP

// Differentiable transition models and task/cost definitions. All
// objectives are costs to be minimized.

#include <cmath>
#include <cstdio>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "metacritic/diffcore.hpp"
#include "metacritic/nets.hpp"

namespace metacritic {

inline double sin(double x) { return std::sin(x); }
inline double cos(double x) { return std::cos(x); }

enum class ModelKind : std::uint8_t { ScalarIntegrator, PointMass2d, TwoLinkArm };

struct ArmParams {
  double m1 = 1.0;          // kg
  double m2 = 1.0;          // kg
  double l1 = 0.5;          // m
  double l2 = 0.5;          // m
  double friction = 0.1;    // N·m·s/rad
  double torque_limit = 5.0;  // N·m
  double gravity = 0.0;     // m/s²; planar arm by default

  void validate() const {
    if (m1 <= 0.0 || m2 <= 0.0) throw std::invalid_argument("ArmParams: masses must be > 0");
    if (l1 <= 0.0 || l2 <= 0.0) throw std::invalid_argument("ArmParams: lengths must be > 0");
    if (torque_limit <= 0.0) throw std::invalid_argument("ArmParams: torque limit must be > 0");
  }
};

struct TaskSpec {
  std::vector<double> goal;  // joint-space, rad
  int horizon = 2;

  void validate(int goal_dim) const {
    if (horizon < 1) throw std::invalid_argument("TaskSpec: horizon must be >= 1");
    if (static_cast<int>(goal.size()) != goal_dim)
      throw std::invalid_argument("TaskSpec: goal dimension mismatch");
  }
};

template <class T>
inline T clamp_sym(T x, double limit) {
  return x - relu(x - limit) + relu(-x - limit);
}

// f(s, a) = s + a
inline double scalar_step(double s, double a) { return s + a; }
inline Expr scalar_step(Expr s, Expr a) { return s + a; }

template <class T>
inline void point_mass_step(std::span<const T> s, std::span<const T> a, double dt,
                            std::span<T> next) {
  for (std::size_t i = 0; i < s.size(); ++i) next[i] = s[i] + a[i] * dt;
}

inline void check_conditioning(double det) {
  if (!(std::abs(det) > 1e-12))
    throw NumericError("two_link_step: near-singular mass matrix", -1);
}
inline void check_conditioning(Expr det) { check_conditioning(det.value()); }

// Planar 2-link manipulator (uniform rods), semi-implicit Euler:
// M(q)q̈ + C(q,q̇)q̇ + G(q) + b·q̇ = τ, then q̇ += dt·q̈, q += dt·q̇.
// Torques are clamped to ±torque_limit before integration.
template <class T>
void two_link_step(std::span<const T> s, std::span<const T> tau_in, const ArmParams& p,
                   double dt, std::span<T> next) {
  const T q2 = s[1], qd1 = s[2], qd2 = s[3];
  T tau1 = clamp_sym(tau_in[0], p.torque_limit);
  T tau2 = clamp_sym(tau_in[1], p.torque_limit);

  const double lc1 = 0.5 * p.l1, lc2 = 0.5 * p.l2;
  const double i1 = p.m1 * p.l1 * p.l1 / 12.0, i2 = p.m2 * p.l2 * p.l2 / 12.0;

  T c2 = cos(q2);
  T s2 = sin(q2);

  T m11 = c2 * (2.0 * p.m2 * p.l1 * lc2) +
          (p.m1 * lc1 * lc1 + i1 + p.m2 * (p.l1 * p.l1 + lc2 * lc2) + i2);
  T m12 = c2 * (p.m2 * p.l1 * lc2) + (p.m2 * lc2 * lc2 + i2);
  const double m22v = p.m2 * lc2 * lc2 + i2;

  T h = s2 * (p.m2 * p.l1 * lc2);
  T cvec1 = -h * (2.0 * qd1 * qd2 + qd2 * qd2);
  T cvec2 = h * (qd1 * qd1);

  T rhs1 = tau1 - cvec1 - p.friction * qd1;
  T rhs2 = tau2 - cvec2 - p.friction * qd2;
  if (p.gravity != 0.0) {
    T c1 = cos(s[0]);
    T c12 = cos(s[0] + q2);
    rhs1 = rhs1 - ((p.m1 * lc1 + p.m2 * p.l1) * p.gravity * c1 +
                   p.m2 * lc2 * p.gravity * c12);
    rhs2 = rhs2 - p.m2 * lc2 * p.gravity * c12;
  }

  T det = m11 * m22v - m12 * m12;
  check_conditioning(det);
  T qdd1 = (m22v * rhs1 - m12 * rhs2) / det;
  T qdd2 = (m11 * rhs2 - m12 * rhs1) / det;

  T qd1n = qd1 + qdd1 * dt;
  T qd2n = qd2 + qdd2 * dt;
  next[0] = s[0] + qd1n * dt;
  next[1] = q2 + qd2n * dt;
  next[2] = qd1n;
  next[3] = qd2n;
}

struct DynamicsModel {
  ModelKind kind = ModelKind::ScalarIntegrator;
  ArmParams arm;
  double dt = 0.01;

  int state_dim() const {
    switch (kind) {
      case ModelKind::ScalarIntegrator: return 1;
      case ModelKind::PointMass2d: return 2;
      case ModelKind::TwoLinkArm: return 4;
    }
    return 0;
  }
  int action_dim() const {
    switch (kind) {
      case ModelKind::ScalarIntegrator: return 1;
      case ModelKind::PointMass2d: return 2;
      case ModelKind::TwoLinkArm: return 2;
    }
    return 0;
  }
  // Position sub-state width (goal space).
  int goal_dim() const { return kind == ModelKind::TwoLinkArm ? 2 : state_dim(); }

  template <class T>
  void step(std::span<const T> s, std::span<const T> a, std::span<T> next) const {
    switch (kind) {
      case ModelKind::ScalarIntegrator:
        next[0] = scalar_step(s[0], a[0]);
        return;
      case ModelKind::PointMass2d:
        point_mass_step(s, a, dt, next);
        return;
      case ModelKind::TwoLinkArm:
        two_link_step(s, a, arm, dt, next);
        return;
    }
  }

  template <class T>
  void clamp_action(std::span<const T> a, std::span<T> out) const {
    if (kind == ModelKind::TwoLinkArm) {
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = clamp_sym(a[i], arm.torque_limit);
    } else {
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i];
    }
  }
};

// Sparse task cost: 0 before the horizon, squared goal distance at t = T.
inline double toy_sparse_cost(int t, int horizon, double s, double g) {
  if (t < 0 || t > horizon) throw std::invalid_argument("toy_sparse_cost: t out of range");
  return t == horizon ? (s - g) * (s - g) : 0.0;
}

struct Trajectory {
  std::vector<std::vector<double>> states;   // s_0..s_T
  std::vector<std::vector<double>> actions;  // a_0..a_{T-1}, post-clamp
  std::vector<double> costs;                 // r_0..r_T

  int horizon() const { return static_cast<int>(actions.size()); }
};

// Squared distance of final joint positions to the goal; velocities excluded.
inline double terminal_task_cost(const Trajectory& traj, std::span<const double> goal) {
  const std::vector<double>& last = traj.states.back();
  if (goal.size() > last.size())
    throw std::invalid_argument("terminal_task_cost: goal wider than state");
  double c = 0.0;
  for (std::size_t i = 0; i < goal.size(); ++i) c += square(last[i] - goal[i]);
  return c;
}

inline double total_cost(const Trajectory& traj) {
  double c = 0.0;
  for (double r : traj.costs) c += r;
  return c;
}

class RolloutError : public std::runtime_error {
 public:
  RolloutError(const std::string& msg, int step) : std::runtime_error(msg), step_index(step) {}
  int step_index;
};

// Value-only rollout of a deterministic policy through the model. Costs use
// the sparse terminal convention over the position sub-state.
template <class PolicyFn>
Trajectory rollout(PolicyFn&& policy, const DynamicsModel& model, std::span<const double> s0,
                   const TaskSpec& task) {
  task.validate(model.goal_dim());
  if (static_cast<int>(s0.size()) != model.state_dim())
    throw std::invalid_argument("rollout: initial state width mismatch");

  Trajectory traj;
  traj.states.reserve(task.horizon + 1);
  traj.actions.reserve(task.horizon);
  traj.states.emplace_back(s0.begin(), s0.end());
  std::vector<double> a(model.action_dim()), ac(model.action_dim());
  std::vector<double> next(model.state_dim());
  for (int t = 0; t < task.horizon; ++t) {
    const std::vector<double>& s = traj.states.back();
    policy(std::span<const double>(s), std::span<double>(a));
    model.clamp_action(std::span<const double>(a), std::span<double>(ac));
    model.step(std::span<const double>(s), std::span<const double>(ac),
               std::span<double>(next));
    for (double v : next)
      if (!std::isfinite(v)) throw RolloutError("non-finite state at step " + std::to_string(t + 1), t + 1);
    traj.actions.push_back(ac);
    traj.states.push_back(next);
    traj.costs.push_back(0.0);
  }
  double terminal = 0.0;
  for (std::size_t i = 0; i < task.goal.size(); ++i)
    terminal += square(traj.states.back()[i] - task.goal[i]);
  traj.costs.push_back(terminal);
  return traj;
}

// Differentiable rollout: states and actions are expressions in the graph.
// The numeric state sequence is bit-identical to the value-only rollout
// because both paths execute the same arithmetic in the same order.
template <class PolicyFn>
void unroll_graph(PolicyFn&& policy, const DynamicsModel& model, std::span<const Expr> s0,
                  int horizon, std::vector<std::vector<Expr>>& states,
                  std::vector<std::vector<Expr>>& actions) {
  states.clear();
  actions.clear();
  states.emplace_back(s0.begin(), s0.end());
  for (int t = 0; t < horizon; ++t) {
    const std::vector<Expr> s = states.back();
    std::vector<Expr> a = policy(std::span<const Expr>(s));
    std::vector<Expr> ac(a.size());
    model.clamp_action(std::span<const Expr>(a), std::span<Expr>(ac));
    std::vector<Expr> next(model.state_dim());
    model.step(std::span<const Expr>(s), std::span<const Expr>(ac), std::span<Expr>(next));
    actions.push_back(std::move(ac));
    states.push_back(std::move(next));
  }
}

inline void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
  int sd = static_cast<int>(traj.states.front().size());
  int ad = traj.actions.empty() ? 0 : static_cast<int>(traj.actions.front().size());
  os << "t";
  for (int i = 0; i < sd; ++i) os << ",s" << i;
  for (int i = 0; i < ad; ++i) os << ",a" << i;
  os << ",r\n";
  char buf[32];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << ',' << buf;
  };
  for (std::size_t t = 0; t < traj.states.size(); ++t) {
    os << t;
    for (double v : traj.states[t]) put(v);
    for (int i = 0; i < ad; ++i) {
      if (t < traj.actions.size()) put(traj.actions[t][i]);
      else os << ',';
    }
    put(traj.costs[t]);
    os << '\n';
  }
}

}  // namespace metacritic

#endif  // METACRITIC_DYNAMICS_HPP
