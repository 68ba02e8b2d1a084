#ifndef METACRITIC_LANDSCAPE_HPP
#define METACRITIC_LANDSCAPE_HPP

// Constant-action policy landscapes: evaluate a critic (or the true
// on-policy return) over a grid of [θ1, θ2], with the gradient field
// w.r.t. the policy parameters at every cell.

#include <cstdio>
#include <ostream>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "metacritic/baselines.hpp"
#include "metacritic/dynamics.hpp"
#include "metacritic/metacritic.hpp"
#include "metacritic/policies.hpp"

namespace metacritic {

struct GridSpec {
  double theta1_lo = -2.0, theta1_hi = 2.0;
  double theta2_lo = -2.0, theta2_hi = 2.0;
  int resolution = 41;  // per axis
  std::vector<double> goal;
  std::vector<double> s0;
  int horizon = 10;

  void validate() const {
    if (resolution < 2) throw std::invalid_argument("GridSpec: resolution must be >= 2");
    if (!(theta1_lo < theta1_hi) || !(theta2_lo < theta2_hi))
      throw std::invalid_argument("GridSpec: lo must be < hi on both axes");
    if (horizon < 1) throw std::invalid_argument("GridSpec: horizon must be >= 1");
    if (goal.size() != 2 || s0.size() != 2)
      throw std::invalid_argument("GridSpec: goal and s0 must be 2-vectors");
  }

  double theta1(int i) const {
    return theta1_lo + (theta1_hi - theta1_lo) * i / (resolution - 1);
  }
  double theta2(int j) const {
    return theta2_lo + (theta2_hi - theta2_lo) * j / (resolution - 1);
  }
};

enum class LandscapeKind : std::uint8_t { Meta, Supervised, TrueReturn };

struct LandscapeCell {
  double value = 0.0;
  double d1 = 0.0;  // ∂value/∂θ1
  double d2 = 0.0;  // ∂value/∂θ2
  bool valid = false;
};

struct LandscapeGrid {
  GridSpec spec;
  std::vector<LandscapeCell> cells;  // row-major, index i*resolution + j

  const LandscapeCell& at(int i, int j) const { return cells[i * spec.resolution + j]; }
  LandscapeCell& at(int i, int j) { return cells[i * spec.resolution + j]; }
};

// Evaluate eval(θ1, θ2) -> LandscapeCell at every grid point; per-cell
// failures are recorded as invalid cells, not propagated.
template <class F>
LandscapeGrid landscape_grid(const GridSpec& spec, F&& eval) {
  spec.validate();
  LandscapeGrid grid;
  grid.spec = spec;
  grid.cells.resize(static_cast<std::size_t>(spec.resolution) * spec.resolution);
  for (int i = 0; i < spec.resolution; ++i)
    for (int j = 0; j < spec.resolution; ++j) {
      try {
        grid.at(i, j) = eval(spec.theta1(i), spec.theta2(j));
        grid.at(i, j).valid = true;
      } catch (const GraphError&) {
        grid.at(i, j).valid = false;
      } catch (const RolloutError&) {
        grid.at(i, j).valid = false;
      }
    }
  return grid;
}

namespace detail {

// Shared machinery: a graph with θ inputs and per-timestep state inputs,
// rebound per cell from a value rollout of the constant-action policy.
class CellProgram {
 public:
  CellProgram(const DynamicsModel& model, const GridSpec& spec) : model_(model), spec_(spec) {
    const int sd = model.state_dim();
    theta_ = {graph_.input(0.0), graph_.input(0.0)};
    states_.resize(spec.horizon + 1);
    for (auto& se : states_)
      for (int i = 0; i < sd; ++i) se.push_back(graph_.input(0.0));
  }

  Graph& graph() { return graph_; }
  std::span<const Expr> theta() const { return theta_; }
  std::span<const std::vector<Expr>> states() const { return states_; }

  void finalize(Expr value) {
    value_ = value;
    grad_ = graph_.adjoints(value, std::span<const Expr>(theta_));
  }

  LandscapeCell eval(double t1, double t2) {
    auto act = [&](std::span<const double>, std::span<double> a) {
      a[0] = t1;
      a[1] = t2;
    };
    TaskSpec task;
    task.goal = spec_.goal;
    task.horizon = spec_.horizon;
    Trajectory traj = rollout(act, model_, std::span<const double>(spec_.s0), task);
    graph_.set_input(theta_[0], t1);
    graph_.set_input(theta_[1], t2);
    for (int t = 0; t <= spec_.horizon; ++t)
      for (std::size_t i = 0; i < states_[t].size(); ++i)
        graph_.set_input(states_[t][i], traj.states[t][i]);
    graph_.refresh();
    LandscapeCell c;
    c.value = graph_.val(value_);
    c.d1 = graph_.val(grad_[0]);
    c.d2 = graph_.val(grad_[1]);
    return c;
  }

 private:
  Graph graph_;
  DynamicsModel model_;
  GridSpec spec_;
  std::vector<Expr> theta_;
  std::vector<std::vector<Expr>> states_;
  Expr value_{};
  std::vector<Expr> grad_;
};

}  // namespace detail

// Σ_{t=0}^{T} critic(φ, s_t, a=θ, g) over the executed trajectory, as at
// meta-test time.
template <class Critic>
LandscapeGrid meta_landscape(const Critic& critic, std::span<const double> phi,
                             const DynamicsModel& model, const GridSpec& spec) {
  spec.validate();
  detail::CellProgram prog(model, spec);
  Graph& g = prog.graph();
  ConstantActionPolicy policy;
  policy.action_dim = 2;
  std::vector<Expr> phi_c = as_constants(g, phi);
  std::vector<Expr> goal_c = as_constants(g, std::span<const double>(spec.goal));
  Expr value = critic_sum(g, policy, prog.theta(), critic, std::span<const Expr>(phi_c),
                          prog.states(), std::span<const Expr>(goal_c),
                          /*include_terminal=*/true);
  prog.finalize(value);
  return landscape_grid(spec, [&](double t1, double t2) { return prog.eval(t1, t2); });
}

// Σ_{t=0}^{T} Q(s_t − g, a=θ): the supervised baseline's view of the same
// trajectory (goal conditioning by state shift).
template <class Q>
LandscapeGrid supervised_landscape(const Q& q, std::span<const double> qphi,
                                   const DynamicsModel& model, const GridSpec& spec) {
  spec.validate();
  detail::CellProgram prog(model, spec);
  Graph& g = prog.graph();
  std::vector<Expr> phi_c = as_constants(g, qphi);
  std::vector<Expr> goal_c = as_constants(g, std::span<const double>(spec.goal));
  std::vector<Expr> terms;
  for (const std::vector<Expr>& s : prog.states()) {
    std::vector<Expr> shifted(s.begin(), s.end());
    for (std::size_t i = 0; i < goal_c.size(); ++i) shifted[i] = s[i] - goal_c[i];
    terms.push_back(q.value(std::span<const Expr>(phi_c), std::span<const Expr>(shifted),
                            prog.theta()));
  }
  prog.finalize(g.sum(terms));
  return landscape_grid(spec, [&](double t1, double t2) { return prog.eval(t1, t2); });
}

// On-policy return of the constant-action policy (sparse terminal cost);
// the gradient comes from a differentiable unroll of the same arithmetic.
inline LandscapeGrid true_return_landscape(const DynamicsModel& model, const GridSpec& spec) {
  spec.validate();
  Graph g;
  std::vector<Expr> theta = {g.input(0.0), g.input(0.0)};
  std::vector<Expr> s0 = as_constants(g, std::span<const double>(spec.s0));
  std::vector<std::vector<Expr>> states, actions;
  auto pol = [&](std::span<const Expr>) { return theta; };
  unroll_graph(pol, model, std::span<const Expr>(s0), spec.horizon, states, actions);
  std::vector<Expr> terms;
  for (std::size_t i = 0; i < spec.goal.size(); ++i)
    terms.push_back(square(states.back()[i] - spec.goal[i]));
  Expr value = g.sum(terms);
  std::vector<Expr> grad = g.adjoints(value, std::span<const Expr>(theta));

  return landscape_grid(spec, [&](double t1, double t2) {
    g.set_input(theta[0], t1);
    g.set_input(theta[1], t2);
    g.refresh();
    LandscapeCell c;
    c.value = g.val(value);
    c.d1 = g.val(grad[0]);
    c.d2 = g.val(grad[1]);
    return c;
  });
}

// Minimum-value cell; ties broken by lowest i, then lowest j. All cells
// must be valid.
inline std::pair<int, int> argmin_cell(const LandscapeGrid& grid) {
  if (grid.cells.empty()) throw std::invalid_argument("argmin_cell: empty grid");
  int bi = -1, bj = -1;
  double best = 0.0;
  for (int i = 0; i < grid.spec.resolution; ++i)
    for (int j = 0; j < grid.spec.resolution; ++j) {
      const LandscapeCell& c = grid.at(i, j);
      if (!c.valid) throw std::invalid_argument("argmin_cell: invalid cell in grid");
      if (bi < 0 || c.value < best) {
        best = c.value;
        bi = i;
        bj = j;
      }
    }
  return {bi, bj};
}

inline void write_landscape_csv(std::ostream& os, const LandscapeGrid& grid) {
  os << "theta1,theta2,value,g1,g2\n";
  char buf[32];
  auto put = [&](double v, char sep) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << buf << sep;
  };
  for (int i = 0; i < grid.spec.resolution; ++i)
    for (int j = 0; j < grid.spec.resolution; ++j) {
      const LandscapeCell& c = grid.at(i, j);
      put(grid.spec.theta1(i), ',');
      put(grid.spec.theta2(j), ',');
      if (c.valid)
        put(c.value, ',');
      else
        os << "nan,";
      put(grid.spec.goal[0], ',');
      put(grid.spec.goal[1], '\n');
    }
}

}  // namespace metacritic

#endif  // METACRITIC_LANDSCAPE_HPP
