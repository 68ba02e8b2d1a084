#ifndef METACRITIC_NETS_HPP
#define METACRITIC_NETS_HPP

// Small multilayer perceptrons for the policy and the goal-conditioned
// critic. Forward passes are templated on the scalar type: double for
// value-only evaluation, Expr for differentiable evaluation.

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "metacritic/diffcore.hpp"
#include "metacritic/rng.hpp"

namespace metacritic {

// Double overloads so templated code can call activations unqualified.
inline double tanh(double x) { return std::tanh(x); }
inline double elu(double x) { return x >= 0.0 ? x : std::expm1(x); }
inline double relu(double x) { return x > 0.0 ? x : 0.0; }

enum class Activation : std::uint8_t { Tanh, Elu, Relu };

struct MlpConfig {
  int input_width = 1;
  std::vector<int> hidden_widths;
  int output_width = 1;
  Activation activation = Activation::Tanh;

  void validate() const {
    if (input_width < 1 || output_width < 1)
      throw std::invalid_argument("MlpConfig: widths must be >= 1");
    for (int w : hidden_widths)
      if (w < 1) throw std::invalid_argument("MlpConfig: hidden widths must be >= 1");
  }

  // Sum of (in+1)*out over layers.
  std::size_t param_count() const {
    std::size_t n = 0;
    int in = input_width;
    for (int w : hidden_widths) {
      n += static_cast<std::size_t>(in + 1) * w;
      in = w;
    }
    n += static_cast<std::size_t>(in + 1) * output_width;
    return n;
  }
};

// Weights uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero.
// Deterministic in the seed.
inline std::vector<double> init_params(const MlpConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::vector<double> p;
  p.reserve(cfg.param_count());
  Rng rng(seed);
  int in = cfg.input_width;
  auto layer = [&](int out) {
    double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (int i = 0; i < in * out; ++i) p.push_back(rng.uniform(-bound, bound));
    for (int i = 0; i < out; ++i) p.push_back(0.0);
    in = out;
  };
  for (int w : cfg.hidden_widths) layer(w);
  layer(cfg.output_width);
  return p;
}

template <class T>
inline T apply_activation(Activation act, T x) {
  switch (act) {
    case Activation::Tanh: return tanh(x);
    case Activation::Elu: return elu(x);
    case Activation::Relu: return relu(x);
  }
  throw std::logic_error("unknown activation");
}

inline double dot_row(std::span<const double> a, std::span<const double> b) {
  double v = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) v += a[i] * b[i];
  return v;
}

inline Expr dot_row(std::span<const Expr> a, std::span<const Expr> b) {
  return a[0].graph->dot(a, b);
}

// Layer layout per layer: row-major weights [out][in], then biases [out].
// Hidden layers use cfg.activation, the output layer is identity.
template <class T>
std::vector<T> mlp_forward(const MlpConfig& cfg, std::span<const T> params,
                           std::span<const T> input) {
  if (static_cast<int>(input.size()) != cfg.input_width)
    throw std::invalid_argument("mlp_forward: input width mismatch");
  if (params.size() != cfg.param_count())
    throw std::invalid_argument("mlp_forward: parameter count mismatch");

  std::vector<T> x(input.begin(), input.end());
  std::size_t off = 0;
  int in = cfg.input_width;
  std::size_t n_layers = cfg.hidden_widths.size() + 1;
  for (std::size_t li = 0; li < n_layers; ++li) {
    bool is_output = li == n_layers - 1;
    int out = is_output ? cfg.output_width : cfg.hidden_widths[li];
    std::vector<T> y;
    y.reserve(out);
    for (int o = 0; o < out; ++o) {
      std::span<const T> row = params.subspan(off + static_cast<std::size_t>(o) * in, in);
      T z = dot_row(row, std::span<const T>(x));
      z = z + params[off + static_cast<std::size_t>(in) * out + o];
      y.push_back(is_output ? z : apply_activation(cfg.activation, z));
    }
    off += static_cast<std::size_t>(in + 1) * out;
    x = std::move(y);
    in = out;
  }
  return x;
}

// Materialize a flat parameter vector as graph inputs.
inline std::vector<Expr> param_inputs(Graph& g, std::span<const double> params) {
  std::vector<Expr> out;
  out.reserve(params.size());
  for (double v : params) out.push_back(g.input(v));
  return out;
}

inline std::vector<Expr> as_constants(Graph& g, std::span<const double> values) {
  std::vector<Expr> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(g.constant(v));
  return out;
}

}  // namespace metacritic

#endif  // METACRITIC_NETS_HPP
