#ifndef METACRITIC_TOYORACLE_HPP
#define METACRITIC_TOYORACLE_HPP

// Closed-form optima and fixed points of the horizon-2 scalar example,
// used as independent ground truth for the learning loops.

#include <cmath>
#include <stdexcept>

#include "metacritic/dynamics.hpp"

namespace metacritic::toy {

struct ToyInstance {
  double s0 = -6.0;
  double goal = 0.0;
  static constexpr int horizon = 2;  // the closed forms below are horizon-2 specific
  double phi1 = 0.0;
  double theta = 0.0;
};

// θ* = (g − s0)/2.
inline double optimal_policy(double s0, double g) { return 0.5 * (g - s0); }

// Optimum of the task loss over φ1 at fixed (θ, rollout s1):
// φ1* = (s0 + 2θ − g) / (2(s0 + s1 + 2θ)).
inline double meta_optimal_phi(double s0, double s1, double theta, double g) {
  double denom = s0 + s1 + 2.0 * theta;
  if (denom == 0.0)
    throw std::domain_error("meta_optimal_phi: degenerate trajectory (s0+s1+2θ = 0)");
  return (s0 + 2.0 * theta - g) / (2.0 * denom);
}

// Optimum of the TD error over φ1 for a fixed rollout with constant action a:
// φ1* = (s1+a)²·r2 / [((s0+a)² − (s1+a)²)² + (s1+a)⁴].
inline double supq_optimal_phi(double s0, double s1, double a, double r2) {
  double u = (s0 + a) * (s0 + a);
  double v = (s1 + a) * (s1 + a);
  double denom = (u - v) * (u - v) + v * v;
  if (denom == 0.0) throw std::domain_error("supq_optimal_phi: zero denominator");
  return v * r2 / denom;
}

// Fixed point of deterministic policy-gradient descent on the fitted Q over
// the dataset states: θ = −(s0 + s1)/2. Differs from optimal_policy unless
// g = −s1.
inline double supq_policy_fixed_point(double s0, double s1) { return -0.5 * (s0 + s1); }

// On-policy return: value-only rollout, sum of per-step costs (sparse
// terminal convention).
template <class PolicyFn>
double true_q_return(PolicyFn&& policy, const DynamicsModel& model,
                     std::span<const double> s0, const TaskSpec& task) {
  Trajectory traj = rollout(policy, model, s0, task);
  return total_cost(traj);
}

inline double true_q_return_const_theta(double theta, double s0, double g, int horizon = 2) {
  DynamicsModel model;
  model.kind = ModelKind::ScalarIntegrator;
  TaskSpec task;
  task.goal = {g};
  task.horizon = horizon;
  std::vector<double> s{s0};
  auto pol = [&](std::span<const double>, std::span<double> a) { a[0] = theta; };
  return true_q_return(pol, model, std::span<const double>(s), task);
}

}  // namespace metacritic::toy

#endif  // METACRITIC_TOYORACLE_HPP
