#include "doctest.h"

#include <vector>

#include "metacritic/baselines.hpp"
#include "metacritic/metacritic.hpp"
#include "metacritic/policies.hpp"
#include "metacritic/rng.hpp"
#include "metacritic/toyoracle.hpp"

using namespace metacritic;

namespace {

// δ(φ1) for the fixed toy rollout (γ=1): two TD terms as in the scalar
// supervised-Q analysis.
double toy_td_delta(double phi1, double s0, double s1, double a, double r2) {
  double q0 = (s0 + a) * (s0 + a) * phi1;
  double q1 = (s1 + a) * (s1 + a) * phi1;
  return square(q0 - q1) + square(q1 - r2);
}

// Engine-side dL_task/dφ1 for the scalar toy at fixed θ (α = 1/2).
double toy_phi_grad(double phi1, double s0, double theta, double goal) {
  ConstantActionPolicy policy;
  ToyCritic critic;
  DynamicsModel model;
  model.kind = ModelKind::ScalarIntegrator;
  InnerLoopConfig inner;
  inner.alpha = 0.5;
  BilevelProgram<ConstantActionPolicy, ToyCritic> prog(policy, critic, model, 2, 1, inner);
  std::vector<double> th = {theta}, ph = {phi1}, g = {goal};
  std::vector<std::vector<double>> inits = {{s0}};
  TaskSpec task;
  task.goal = g;
  task.horizon = 2;
  auto roll = [&](std::span<const double> s) {
    auto pol = [&](std::span<const double>, std::span<double> a) { a[0] = theta; };
    return rollout(pol, model, s, task);
  };
  prog.bind(th, ph, g, std::span<const std::vector<double>>(inits), roll);
  return prog.phi_gradient()[0];
}

}  // namespace

TEST_CASE("optimal_policy closed form") {
  CHECK(toy::optimal_policy(-6.0, 0.0) == 3.0);
  CHECK(toy::optimal_policy(0.0, 0.0) == 0.0);
  for (double g : {-3.0, 0.5, 7.0}) CHECK(toy::optimal_policy(g, g) == 0.0);
}

TEST_CASE("meta_optimal_phi closed form and degeneracy") {
  CHECK(toy::meta_optimal_phi(-6.0, -6.0, 0.0, 0.0) == doctest::Approx(0.25).epsilon(1e-15));
  // numerator zero at the optimal policy
  double th = toy::optimal_policy(-6.0, 0.0);
  CHECK(toy::meta_optimal_phi(-6.0, -6.0 + th, th, 0.0) == 0.0);
  CHECK_THROWS_AS(toy::meta_optimal_phi(-1.0, -1.0, 1.0, 0.0), std::domain_error);
}

TEST_CASE("meta_optimal_phi is the root of the engine's phi-gradient (bisection)") {
  const double s0 = -6.0, th = 0.0, goal = 0.0;
  const double s1 = s0 + th;
  double want = toy::meta_optimal_phi(s0, s1, th, goal);

  double lo = want - 1.0, hi = want + 1.0;
  double glo = toy_phi_grad(lo, s0, th, goal);
  double ghi = toy_phi_grad(hi, s0, th, goal);
  REQUIRE(glo * ghi < 0.0);
  for (int it = 0; it < 200 && hi - lo > 1e-12; ++it) {
    double mid = 0.5 * (lo + hi);
    double gm = toy_phi_grad(mid, s0, th, goal);
    if (gm == 0.0) {
      lo = hi = mid;
      break;
    }
    if (glo * gm < 0.0) {
      hi = mid;
    } else {
      lo = mid;
      glo = gm;
    }
  }
  CHECK(std::abs(0.5 * (lo + hi) - want) <= 1e-10);
}

TEST_CASE("supq_optimal_phi closed form") {
  CHECK(toy::supq_optimal_phi(-6.0, -2.0, 4.0, 0.0) == 0.0);
  CHECK(toy::supq_optimal_phi(-6.0, -2.0, 4.0, 36.0) == doctest::Approx(9.0).epsilon(1e-15));
  CHECK_THROWS_AS(toy::supq_optimal_phi(0.0, 0.0, 0.0, 1.0), std::domain_error);
}

TEST_CASE("supq_optimal_phi matches a grid scan of the TD error") {
  const double s0 = -6.0, s1 = -2.0, a = 4.0, r2 = 36.0;
  double best_phi = 0.0, best = std::numeric_limits<double>::infinity();
  for (double phi = -20.0; phi <= 20.0; phi += 1e-4) {
    double d = toy_td_delta(phi, s0, s1, a, r2);
    if (d < best) {
      best = d;
      best_phi = phi;
    }
  }
  CHECK(std::abs(best_phi - toy::supq_optimal_phi(s0, s1, a, r2)) <= 1e-4);
}

TEST_CASE("supq_policy_fixed_point and its separation from the optimum") {
  CHECK(toy::supq_policy_fixed_point(-6.0, -2.0) == 4.0);
  CHECK(toy::supq_policy_fixed_point(0.0, 0.0) == 0.0);
  Rng rng(17);
  for (int rep = 0; rep < 50; ++rep) {
    double s0 = rng.uniform(-8.0, 8.0);
    double s1 = rng.uniform(-8.0, 8.0);
    double g = rng.uniform(-8.0, 8.0);
    double fp = toy::supq_policy_fixed_point(s0, s1);
    double opt = toy::optimal_policy(s0, g);
    if (std::abs(g + s1) > 1e-9)
      CHECK(std::abs(fp - opt) > 1e-12);
    else
      CHECK(fp == doctest::Approx(opt).epsilon(1e-12));
  }
}

TEST_CASE("true_q_return on the toy instance") {
  CHECK(toy::true_q_return_const_theta(3.0, -6.0, 0.0) == 0.0);
  CHECK(toy::true_q_return_const_theta(0.0, -6.0, 0.0) == 36.0);

  // equals the sparse-cost sum along the rollout for any θ
  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    double th = rng.uniform(-5.0, 5.0);
    double s0 = rng.uniform(-8.0, 8.0), g = rng.uniform(-4.0, 4.0);
    double s = s0;
    double acc = 0.0;
    for (int t = 0; t <= 2; ++t) {
      acc += toy_sparse_cost(t, 2, s, g);
      if (t < 2) s = scalar_step(s, th);
    }
    CHECK(toy::true_q_return_const_theta(th, s0, g) == doctest::Approx(acc).epsilon(1e-14));
  }
}

TEST_CASE("true_q_return grid scan is minimized at the optimal policy") {
  const double s0 = -6.0, g = 0.0;
  double best_th = 0.0, best = std::numeric_limits<double>::infinity();
  for (double th = -10.0; th <= 10.0; th += 1e-3) {
    double v = toy::true_q_return_const_theta(th, s0, g);
    if (v < best) {
      best = v;
      best_th = th;
    }
  }
  CHECK(std::abs(best_th - toy::optimal_policy(s0, g)) <= 1e-3);
}

TEST_CASE("metacritic_scalar_fixed_point examples") {
  CHECK(metacritic_scalar_fixed_point(0.0, 0.0, 1.0) == 0.0);
  CHECK(metacritic_scalar_fixed_point(-6.0, -2.0, 4.0) == doctest::Approx(0.5).epsilon(1e-15));
  // differs from the optimal policy on the standard instance
  CHECK(metacritic_scalar_fixed_point(-6.0, -2.0, 4.0) != toy::optimal_policy(-6.0, 0.0));
  CHECK_THROWS_AS(metacritic_scalar_fixed_point(1.0, 1.0, -1.0), std::domain_error);
}
