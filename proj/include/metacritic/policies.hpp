#ifndef METACRITIC_POLICIES_HPP
#define METACRITIC_POLICIES_HPP

// Policy and critic parametrizations used by the learning loops. All types
// expose the same duck-typed surface: param_count / init / act (policies)
// or value (critics), in both double and Expr flavors.

#include <span>
#include <vector>

#include "metacritic/diffcore.hpp"
#include "metacritic/dynamics.hpp"
#include "metacritic/nets.hpp"
#include "metacritic/rng.hpp"

namespace metacritic {

// State-independent policy a = θ (the landscape experiments' [θ1, θ2]).
struct ConstantActionPolicy {
  int action_dim = 1;
  double init_lo = -2.0;
  double init_hi = 2.0;

  std::size_t param_count() const { return static_cast<std::size_t>(action_dim); }

  std::vector<double> init(std::uint64_t seed) const {
    Rng rng(seed);
    std::vector<double> p(param_count());
    for (double& v : p) v = rng.uniform(init_lo, init_hi);
    return p;
  }

  void act(std::span<const double> theta, std::span<const double> /*s*/,
           std::span<double> a) const {
    for (int i = 0; i < action_dim; ++i) a[i] = theta[i];
  }

  std::vector<Expr> act(std::span<const Expr> theta, std::span<const Expr> /*s*/) const {
    return std::vector<Expr>(theta.begin(), theta.end());
  }
};

struct MlpPolicy {
  MlpConfig cfg;

  std::size_t param_count() const { return cfg.param_count(); }

  std::vector<double> init(std::uint64_t seed) const { return init_params(cfg, seed); }

  void act(std::span<const double> theta, std::span<const double> s,
           std::span<double> a) const {
    std::vector<double> y = mlp_forward<double>(cfg, theta, s);
    for (std::size_t i = 0; i < y.size(); ++i) a[i] = y[i];
  }

  std::vector<Expr> act(std::span<const Expr> theta, std::span<const Expr> s) const {
    return mlp_forward<Expr>(cfg, theta, s);
  }
};

// Scalar critic (s+a)²·φ1; ignores the goal input.
struct ToyCritic {
  std::size_t param_count() const { return 1; }

  std::vector<double> init(std::uint64_t seed) const {
    Rng rng(seed);
    return {rng.uniform(-1.0, 1.0)};
  }

  template <class T>
  T value(std::span<const T> phi, std::span<const T> s, std::span<const T> a,
          std::span<const T> /*g*/) const {
    T u = s[0] + a[0];
    return u * u * phi[0];
  }
};

enum class CriticInputMode : std::uint8_t {
  Concat,       // input (s, a, g)
  RelativeGoal  // input (s - g on the position sub-state, a)
};

struct MlpCritic {
  MlpConfig cfg;
  CriticInputMode mode = CriticInputMode::Concat;
  int state_dim = 1;
  int action_dim = 1;
  int goal_dim = 1;

  static MlpCritic make(int state_dim, int action_dim, int goal_dim,
                        std::vector<int> hidden, CriticInputMode mode,
                        Activation act = Activation::Elu) {
    MlpCritic c;
    c.mode = mode;
    c.state_dim = state_dim;
    c.action_dim = action_dim;
    c.goal_dim = goal_dim;
    c.cfg.input_width = mode == CriticInputMode::Concat ? state_dim + action_dim + goal_dim
                                                        : state_dim + action_dim;
    c.cfg.hidden_widths = std::move(hidden);
    c.cfg.output_width = 1;
    c.cfg.activation = act;
    return c;
  }

  std::size_t param_count() const { return cfg.param_count(); }

  std::vector<double> init(std::uint64_t seed) const { return init_params(cfg, seed); }

  template <class T>
  T value(std::span<const T> phi, std::span<const T> s, std::span<const T> a,
          std::span<const T> g) const {
    std::vector<T> in;
    in.reserve(cfg.input_width);
    if (mode == CriticInputMode::Concat) {
      in.insert(in.end(), s.begin(), s.end());
      in.insert(in.end(), a.begin(), a.end());
      in.insert(in.end(), g.begin(), g.end());
    } else {
      for (int i = 0; i < state_dim; ++i)
        in.push_back(i < goal_dim ? s[i] - g[i] : s[i]);
      in.insert(in.end(), a.begin(), a.end());
    }
    return mlp_forward<T>(cfg, phi, std::span<const T>(in))[0];
  }
};

// Q function on (state, action); goal conditioning happens by shifting the
// state before the call.
struct ToyQ {
  std::size_t param_count() const { return 1; }
  std::vector<double> init(std::uint64_t seed) const {
    Rng rng(seed);
    return {rng.uniform(-1.0, 1.0)};
  }
  template <class T>
  T value(std::span<const T> phi, std::span<const T> s, std::span<const T> a) const {
    T u = s[0] + a[0];
    return u * u * phi[0];
  }
};

struct MlpQ {
  MlpConfig cfg;
  int state_dim = 1;
  int action_dim = 1;

  static MlpQ make(int state_dim, int action_dim, std::vector<int> hidden,
                   Activation act = Activation::Elu) {
    MlpQ q;
    q.state_dim = state_dim;
    q.action_dim = action_dim;
    q.cfg.input_width = state_dim + action_dim;
    q.cfg.hidden_widths = std::move(hidden);
    q.cfg.output_width = 1;
    q.cfg.activation = act;
    return q;
  }

  std::size_t param_count() const { return cfg.param_count(); }
  std::vector<double> init(std::uint64_t seed) const { return init_params(cfg, seed); }

  template <class T>
  T value(std::span<const T> phi, std::span<const T> s, std::span<const T> a) const {
    std::vector<T> in;
    in.reserve(cfg.input_width);
    in.insert(in.end(), s.begin(), s.end());
    in.insert(in.end(), a.begin(), a.end());
    return mlp_forward<T>(cfg, phi, std::span<const T>(in))[0];
  }
};

}  // namespace metacritic

#endif  // METACRITIC_POLICIES_HPP
