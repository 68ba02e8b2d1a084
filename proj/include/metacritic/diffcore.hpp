#ifndef METACRITIC_DIFFCORE_HPP
#define METACRITIC_DIFFCORE_HPP

// Reverse-mode automatic differentiation over a fixed primitive set.
// The backward pass emits ordinary graph nodes, so gradients are
// expressions that can be differentiated again (second order).

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace metacritic {

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BindingError : public GraphError {
 public:
  using GraphError::GraphError;
};

class NumericError : public GraphError {
 public:
  NumericError(const std::string& msg, std::int32_t node) : GraphError(msg), node_id(node) {}
  std::int32_t node_id;
};

class CapacityError : public GraphError {
 public:
  using GraphError::GraphError;
};

enum class OpKind : std::uint8_t {
  Input,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  PowInt,
  Exp,
  Log,
  Tanh,
  Elu,
  Relu,
  EluGrad,   // d/dx elu: 1 for x>=0, exp(x) for x<0
  ReluGrad,  // d/dx relu: 1 for x>0, 0 for x<=0
  Sin,
  Cos,
  Sum,  // n-ary add, operands in the argument pool
  Dot,  // sum_i a_i*b_i, 2n operands in the argument pool
};

class Graph;

// Lightweight handle into a Graph. Valid as long as the graph lives and is
// not cleared.
struct Expr {
  Graph* graph = nullptr;
  std::int32_t id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  inline double value() const;
};

// Parameter identifiers with their partial derivatives. Entries for
// parameters the output does not depend on are exactly 0.
struct GradVector {
  std::vector<std::int32_t> params;  // input node ids
  std::vector<double> partials;

  std::size_t size() const { return params.size(); }
  double operator[](std::size_t i) const { return partials[i]; }
};

class Graph {
 public:
  explicit Graph(std::size_t node_cap = 10'000'000) : cap_(node_cap) {}

  std::size_t size() const { return nodes_.size(); }
  std::size_t node_cap() const { return cap_; }
  void set_node_cap(std::size_t cap) { cap_ = cap; }

  void clear() {
    nodes_.clear();
    args_.clear();
  }

  // Bound input (parameter/leaf).
  Expr input(double v) {
    Expr e = push(OpKind::Input, -1, -1, 1, v);
    return e;
  }

  // Unbound input; evaluating through it without a binding is an error.
  Expr input() {
    Expr e = push(OpKind::Input, -1, -1, 0, 0.0);
    return e;
  }

  Expr constant(double v) { return push(OpKind::Constant, -1, -1, 0, v); }

  Expr add(Expr a, Expr b) { return push(OpKind::Add, a.id, b.id, 0, val(a) + val(b)); }
  Expr sub(Expr a, Expr b) { return push(OpKind::Sub, a.id, b.id, 0, val(a) - val(b)); }
  Expr mul(Expr a, Expr b) { return push(OpKind::Mul, a.id, b.id, 0, val(a) * val(b)); }
  Expr div(Expr a, Expr b) { return push(OpKind::Div, a.id, b.id, 0, val(a) / val(b)); }
  Expr neg(Expr a) { return push(OpKind::Neg, a.id, -1, 0, -val(a)); }

  Expr powi(Expr a, int n) { return push(OpKind::PowInt, a.id, -1, n, powi_val(val(a), n)); }
  Expr exp(Expr a) { return push(OpKind::Exp, a.id, -1, 0, std::exp(val(a))); }
  Expr log(Expr a) { return push(OpKind::Log, a.id, -1, 0, std::log(val(a))); }
  Expr tanh(Expr a) { return push(OpKind::Tanh, a.id, -1, 0, std::tanh(val(a))); }
  Expr sin(Expr a) { return push(OpKind::Sin, a.id, -1, 0, std::sin(val(a))); }
  Expr cos(Expr a) { return push(OpKind::Cos, a.id, -1, 0, std::cos(val(a))); }

  // elu(x) = x for x>=0, exp(x)-1 for x<0; subgradient at 0 is the right
  // limit, elu'(0) = 1.
  Expr elu(Expr a) { return push(OpKind::Elu, a.id, -1, 0, elu_val(val(a))); }
  // relu'(0) = 0 (right limit of the derivative is 1; the convention here
  // follows the step value at 0).
  Expr relu(Expr a) { return push(OpKind::Relu, a.id, -1, 0, relu_val(val(a))); }
  Expr elu_grad(Expr a) { return push(OpKind::EluGrad, a.id, -1, 0, elu_grad_val(val(a))); }
  Expr relu_grad(Expr a) { return push(OpKind::ReluGrad, a.id, -1, 0, relu_grad_val(val(a))); }

  Expr sum(std::span<const Expr> xs) {
    if (xs.empty()) return constant(0.0);
    double v = 0.0;
    std::int32_t off = static_cast<std::int32_t>(args_.size());
    for (const Expr& x : xs) {
      v += val(x);
      args_.push_back(x.id);
    }
    return push(OpKind::Sum, static_cast<std::int32_t>(xs.size()), -1, off, v);
  }

  Expr dot(std::span<const Expr> a, std::span<const Expr> b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
    if (a.empty()) return constant(0.0);
    double v = 0.0;
    std::int32_t off = static_cast<std::int32_t>(args_.size());
    for (std::size_t i = 0; i < a.size(); ++i) args_.push_back(a[i].id);
    for (std::size_t i = 0; i < b.size(); ++i) args_.push_back(b[i].id);
    for (std::size_t i = 0; i < a.size(); ++i) v += val(a[i]) * val(b[i]);
    return push(OpKind::Dot, static_cast<std::int32_t>(a.size()), -1, off, v);
  }

  double val(Expr e) const { return nodes_[e.id].val; }
  OpKind kind(Expr e) const { return nodes_[e.id].kind; }

  void set_input(Expr e, double v) {
    Node& n = nodes_[e.id];
    if (n.kind != OpKind::Input) throw BindingError("set_input: node is not an input");
    n.val = v;
    n.aux = 1;
  }

  // Recompute every node value in creation (= topological) order.
  // Throws on unbound inputs and non-finite intermediates.
  void refresh() { refresh_range(0, static_cast<std::int32_t>(nodes_.size())); }

  // Recompute nodes [lo, hi).
  void refresh_range(std::int32_t lo, std::int32_t hi) {
    for (std::int32_t i = lo; i < hi; ++i) {
      Node& n = nodes_[i];
      switch (n.kind) {
        case OpKind::Input:
          if (n.aux == 0)
            throw BindingError("unbound input node " + std::to_string(i));
          break;
        case OpKind::Constant:
          break;
        case OpKind::Add: n.val = nodes_[n.a].val + nodes_[n.b].val; break;
        case OpKind::Sub: n.val = nodes_[n.a].val - nodes_[n.b].val; break;
        case OpKind::Mul: n.val = nodes_[n.a].val * nodes_[n.b].val; break;
        case OpKind::Div: n.val = nodes_[n.a].val / nodes_[n.b].val; break;
        case OpKind::Neg: n.val = -nodes_[n.a].val; break;
        case OpKind::PowInt: n.val = powi_val(nodes_[n.a].val, n.aux); break;
        case OpKind::Exp: n.val = std::exp(nodes_[n.a].val); break;
        case OpKind::Log: n.val = std::log(nodes_[n.a].val); break;
        case OpKind::Tanh: n.val = std::tanh(nodes_[n.a].val); break;
        case OpKind::Elu: n.val = elu_val(nodes_[n.a].val); break;
        case OpKind::Relu: n.val = relu_val(nodes_[n.a].val); break;
        case OpKind::EluGrad: n.val = elu_grad_val(nodes_[n.a].val); break;
        case OpKind::ReluGrad: n.val = relu_grad_val(nodes_[n.a].val); break;
        case OpKind::Sin: n.val = std::sin(nodes_[n.a].val); break;
        case OpKind::Cos: n.val = std::cos(nodes_[n.a].val); break;
        case OpKind::Sum: {
          double v = 0.0;
          for (std::int32_t k = 0; k < n.a; ++k) v += nodes_[args_[n.aux + k]].val;
          n.val = v;
          break;
        }
        case OpKind::Dot: {
          double v = 0.0;
          for (std::int32_t k = 0; k < n.a; ++k)
            v += nodes_[args_[n.aux + k]].val * nodes_[args_[n.aux + n.a + k]].val;
          n.val = v;
          break;
        }
      }
      if (!std::isfinite(n.val) && n.kind != OpKind::Constant && n.kind != OpKind::Input)
        throw NumericError("non-finite value at node " + std::to_string(i) + " (op " +
                               std::to_string(static_cast<int>(n.kind)) + ")",
                           i);
    }
  }

  // Symbolic reverse pass: returns d(y)/d(wrt[i]) as expressions in this
  // graph. Parameters y does not depend on map to a shared constant 0.
  std::vector<Expr> adjoints(Expr y, std::span<const Expr> wrt) {
    if (y.graph != this) throw std::invalid_argument("adjoints: expr from a different graph");
    const std::int32_t yid = y.id;
    std::vector<std::int32_t> adj(static_cast<std::size_t>(yid) + 1, -1);
    adj[yid] = constant(1.0).id;
    for (std::int32_t i = yid; i >= 0; --i) {
      if (adj[i] < 0) continue;
      const Node n = nodes_[i];  // copy: appends below may reallocate
      Expr a{this, adj[i]};
      switch (n.kind) {
        case OpKind::Input:
        case OpKind::Constant:
          break;
        case OpKind::Add:
          acc(adj, n.a, a);
          acc(adj, n.b, a);
          break;
        case OpKind::Sub:
          acc(adj, n.a, a);
          acc(adj, n.b, neg(a));
          break;
        case OpKind::Mul:
          acc(adj, n.a, mul(a, at(n.b)));
          acc(adj, n.b, mul(a, at(n.a)));
          break;
        case OpKind::Div: {
          Expr inv_b = div(a, at(n.b));
          acc(adj, n.a, inv_b);
          acc(adj, n.b, neg(div(mul(inv_b, at(n.a)), at(n.b))));
          break;
        }
        case OpKind::Neg:
          acc(adj, n.a, neg(a));
          break;
        case OpKind::PowInt:
          if (n.aux != 0)
            acc(adj, n.a, mul(a, mul(constant(static_cast<double>(n.aux)), powi(at(n.a), n.aux - 1))));
          break;
        case OpKind::Exp:
          acc(adj, n.a, mul(a, at(i)));
          break;
        case OpKind::Log:
          acc(adj, n.a, div(a, at(n.a)));
          break;
        case OpKind::Tanh: {
          Expr t = at(i);
          acc(adj, n.a, mul(a, sub(constant(1.0), mul(t, t))));
          break;
        }
        case OpKind::Elu:
          acc(adj, n.a, mul(a, elu_grad(at(n.a))));
          break;
        case OpKind::Relu:
          acc(adj, n.a, mul(a, relu_grad(at(n.a))));
          break;
        case OpKind::EluGrad:
          // second derivative of elu: exp(x) on x<0, 0 on x>0
          acc(adj, n.a, mul(a, sub(elu_grad(at(n.a)), relu_grad(at(n.a)))));
          break;
        case OpKind::ReluGrad:
          break;  // zero a.e.
        case OpKind::Sin:
          acc(adj, n.a, mul(a, cos(at(n.a))));
          break;
        case OpKind::Cos:
          acc(adj, n.a, neg(mul(a, sin(at(n.a)))));
          break;
        case OpKind::Sum:
          for (std::int32_t k = 0; k < n.a; ++k) acc(adj, args_[n.aux + k], a);
          break;
        case OpKind::Dot:
          for (std::int32_t k = 0; k < n.a; ++k) {
            acc(adj, args_[n.aux + k], mul(a, at(args_[n.aux + n.a + k])));
            acc(adj, args_[n.aux + n.a + k], mul(a, at(args_[n.aux + k])));
          }
          break;
      }
    }
    Expr zero = constant(0.0);
    std::vector<Expr> out;
    out.reserve(wrt.size());
    for (const Expr& p : wrt) {
      if (p.id <= yid && adj[p.id] >= 0)
        out.push_back(at(adj[p.id]));
      else
        out.push_back(zero);
    }
    return out;
  }

 private:
  struct Node {
    OpKind kind;
    std::int32_t a;
    std::int32_t b;
    std::int32_t aux;  // PowInt exponent, Sum/Dot pool offset, Input bound flag
    double val;
  };

  Expr push(OpKind k, std::int32_t a, std::int32_t b, std::int32_t aux, double v) {
    if (nodes_.size() >= cap_)
      throw CapacityError("graph node cap exceeded (" + std::to_string(cap_) + " nodes)");
    nodes_.push_back(Node{k, a, b, aux, v});
    return Expr{this, static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  Expr at(std::int32_t id) { return Expr{this, id}; }

  void acc(std::vector<std::int32_t>& adj, std::int32_t target, Expr c) {
    if (target < 0) return;
    if (adj[target] < 0)
      adj[target] = c.id;
    else
      adj[target] = add(Expr{this, adj[target]}, c).id;
  }

  static double powi_val(double x, int n) {
    bool inv = n < 0;
    unsigned m = inv ? static_cast<unsigned>(-(long long)n) : static_cast<unsigned>(n);
    double r = 1.0, base = x;
    while (m) {
      if (m & 1u) r *= base;
      base *= base;
      m >>= 1;
    }
    return inv ? 1.0 / r : r;
  }
  static double elu_val(double x) { return x >= 0.0 ? x : std::expm1(x); }
  static double relu_val(double x) { return x > 0.0 ? x : 0.0; }
  static double elu_grad_val(double x) { return x >= 0.0 ? 1.0 : std::exp(x); }
  static double relu_grad_val(double x) { return x > 0.0 ? 1.0 : 0.0; }

  std::vector<Node> nodes_;
  std::vector<std::int32_t> args_;
  std::size_t cap_;
};

inline double Expr::value() const { return graph->val(*this); }

// Operator sugar. Mixed double operands become constants.
inline Expr operator+(Expr a, Expr b) { return a.graph->add(a, b); }
inline Expr operator-(Expr a, Expr b) { return a.graph->sub(a, b); }
inline Expr operator*(Expr a, Expr b) { return a.graph->mul(a, b); }
inline Expr operator/(Expr a, Expr b) { return a.graph->div(a, b); }
inline Expr operator-(Expr a) { return a.graph->neg(a); }
inline Expr operator+(Expr a, double b) { return a + a.graph->constant(b); }
inline Expr operator+(double a, Expr b) { return b.graph->constant(a) + b; }
inline Expr operator-(Expr a, double b) { return a - a.graph->constant(b); }
inline Expr operator-(double a, Expr b) { return b.graph->constant(a) - b; }
inline Expr operator*(Expr a, double b) { return a * a.graph->constant(b); }
inline Expr operator*(double a, Expr b) { return b.graph->constant(a) * b; }
inline Expr operator/(Expr a, double b) { return a / a.graph->constant(b); }
inline Expr operator/(double a, Expr b) { return b.graph->constant(a) / b; }

inline Expr powi(Expr a, int n) { return a.graph->powi(a, n); }
inline Expr exp(Expr a) { return a.graph->exp(a); }
inline Expr log(Expr a) { return a.graph->log(a); }
inline Expr tanh(Expr a) { return a.graph->tanh(a); }
inline Expr sin(Expr a) { return a.graph->sin(a); }
inline Expr cos(Expr a) { return a.graph->cos(a); }
inline Expr elu(Expr a) { return a.graph->elu(a); }
inline Expr relu(Expr a) { return a.graph->relu(a); }
inline Expr square(Expr a) { return a.graph->mul(a, a); }
inline double square(double a) { return a * a; }

using Bindings = std::vector<std::pair<Expr, double>>;

inline void bind_all(Graph& g, const Bindings& bindings) {
  for (const auto& [e, v] : bindings) g.set_input(e, v);
}

// Bind inputs, re-sweep the graph, return the expression's value.
inline double evaluate(Expr e, const Bindings& bindings) {
  Graph& g = *e.graph;
  bind_all(g, bindings);
  g.refresh();
  return g.val(e);
}

inline GradVector grad_values(Graph& g, const std::vector<Expr>& adj,
                              std::span<const Expr> wrt) {
  GradVector out;
  out.params.reserve(wrt.size());
  out.partials.reserve(wrt.size());
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    out.params.push_back(wrt[i].id);
    out.partials.push_back(g.val(adj[i]));
  }
  return out;
}

// Exact reverse-mode partials of a scalar expression.
inline GradVector gradient(Expr e, std::span<const Expr> wrt, const Bindings& bindings) {
  Graph& g = *e.graph;
  bind_all(g, bindings);
  g.refresh();
  std::vector<Expr> adj = g.adjoints(e, wrt);
  return grad_values(g, adj, wrt);
}

inline GradVector gradient(Expr e, std::span<const Expr> wrt) {
  Graph& g = *e.graph;
  std::vector<Expr> adj = g.adjoints(e, wrt);
  return grad_values(g, adj, wrt);
}

// Second-order partials: the inner partials are summed into a scalar
// contraction which is then differentiated with respect to the outer set.
inline GradVector second_gradient(Expr e, std::span<const Expr> outer,
                                  std::span<const Expr> inner, const Bindings& bindings) {
  Graph& g = *e.graph;
  bind_all(g, bindings);
  g.refresh();
  std::vector<Expr> inner_adj = g.adjoints(e, inner);
  Expr contracted = g.sum(inner_adj);
  std::vector<Expr> outer_adj = g.adjoints(contracted, outer);
  return grad_values(g, outer_adj, outer);
}

}  // namespace metacritic

#endif  // METACRITIC_DIFFCORE_HPP
