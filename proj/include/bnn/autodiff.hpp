#pragma once

// Dense tensors and a reverse-mode gradient tape.
//
// A Tape records primitive operations as they are built; calling backward()
// on a scalar node replays the record in reverse and accumulates gradients
// into every node that depends on a differentiable leaf. Tapes are cheap and
// meant to be rebuilt for every evaluation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "bnn/error.hpp"

namespace bnn {

using Vector = std::vector<double>;
using Shape = std::vector<std::size_t>;

struct Tensor {
  Shape shape;
  Vector values;

  Tensor() = default;
  Tensor(Shape s, Vector v) : shape(std::move(s)), values(std::move(v)) {
    detail::require(extent_product(shape) == values.size(),
                    "Tensor: product of extents does not match value count");
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vector(Vector v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, Vector v) {
    return Tensor({rows, cols}, std::move(v));
  }
  static Tensor zeros(Shape s) {
    const std::size_t n = extent_product(s);
    return Tensor(std::move(s), Vector(n, 0.0));
  }

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return rank() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 1); }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
  double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }
  double item() const {
    detail::require(size() == 1, "Tensor::item on non-scalar tensor");
    return values[0];
  }

  static std::size_t extent_product(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }
};

enum class Op {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  Matmul,
  Transpose,
  Sum,
  SumRows,
  LogSoftmaxRows,
  Slice,
  Concat,
  // elementwise unary
  Neg,
  Log,
  Exp,
  Square,
  Sqrt,
  Tanh,
  Relu,
  LeakyRelu,
  Softplus,
  Sigmoid,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Matmul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Sum: return "reduce-sum";
    case Op::SumRows: return "reduce-sum-rows";
    case Op::LogSoftmaxRows: return "log-softmax";
    case Op::Slice: return "slice";
    case Op::Concat: return "concat";
    case Op::Neg: return "neg";
    case Op::Log: return "log";
    case Op::Exp: return "exp";
    case Op::Square: return "square";
    case Op::Sqrt: return "sqrt";
    case Op::Tanh: return "tanh";
    case Op::Relu: return "relu";
    case Op::LeakyRelu: return "leaky-relu";
    case Op::Softplus: return "softplus";
    case Op::Sigmoid: return "sigmoid";
  }
  return "?";
}

inline bool is_elementwise_unary(Op op) {
  switch (op) {
    case Op::Neg: case Op::Log: case Op::Exp: case Op::Square: case Op::Sqrt:
    case Op::Tanh: case Op::Relu: case Op::LeakyRelu: case Op::Softplus: case Op::Sigmoid:
      return true;
    default:
      return false;
  }
}

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
// Inverse of softplus for y > 0.
inline double softplus_inverse(double y) { return y > 30 ? y + std::log1p(-std::exp(-y)) : std::log(std::expm1(y)); }

class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while its tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  double item() const { return value().item(); }
};

class Tape {
 public:
  Tape() { nodes_.reserve(64); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool differentiable = true) {
    check_finite(value, Op::Leaf);
    return push(Node{std::move(value), {}, differentiable ? Op::Leaf : Op::Constant, npos, npos, 0.0,
                     0, differentiable});
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var constant(double v) { return constant(Tensor::scalar(v)); }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  // Gradient of the last backward() output with respect to v (zeros if v is
  // not connected to a differentiable leaf).
  Tensor grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.size() == n.value.size()) return Tensor(n.value.shape, n.grad);
    return Tensor::zeros(n.value.shape);
  }
  std::size_t size() const { return nodes_.size(); }

  void backward(Var out) {
    detail::require(out.tape == this, "backward: variable belongs to another tape");
    detail::require(nodes_[out.id].value.size() == 1, "backward: output must be scalar");
    for (auto& n : nodes_) n.grad.clear();
    if (!nodes_[out.id].needs_grad) return;
    nodes_[out.id].grad.assign(1, 1.0);
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      propagate(i);
    }
  }

  // ---- primitive construction ----

  Var binary(Op op, Var a, Var b) {
    detail::require(op == Op::Add || op == Op::Sub || op == Op::Mul || op == Op::Div,
                    std::string("unsupported binary primitive: ") + op_name(op));
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    const Broadcast bc = broadcast(x, y);
    Tensor out = Tensor::zeros(bc.shape);
    for (std::size_t k = 0; k < out.size(); ++k) {
      const double u = x[bc.index_a(k)], w = y[bc.index_b(k)];
      switch (op) {
        case Op::Add: out[k] = u + w; break;
        case Op::Sub: out[k] = u - w; break;
        case Op::Mul: out[k] = u * w; break;
        default: out[k] = u / w; break;
      }
    }
    return emit(std::move(out), op, a, b);
  }

  Var unary(Op op, Var a, double param = 0.0) {
    detail::require(is_elementwise_unary(op),
                    std::string("unsupported elementwise primitive: ") + op_name(op));
    Tensor out = value(a);
    for (double& v : out.values) v = apply_unary(op, v, param);
    return emit(std::move(out), op, a, {}, param);
  }

  Var matmul(Var a, Var b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    detail::require(x.rank() == 2 && y.rank() == 2 && x.shape[1] == y.shape[0],
                    "matmul: incompatible shapes");
    const std::size_t m = x.shape[0], k = x.shape[1], n = y.shape[1];
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double xv = x.values[i * k + p];
        if (xv == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) out.values[i * n + j] += xv * y.values[p * n + j];
      }
    return emit(std::move(out), Op::Matmul, a, b);
  }

  Var transpose(Var a) {
    const Tensor& x = value(a);
    detail::require(x.rank() == 2, "transpose: rank-2 tensor required");
    const std::size_t r = x.shape[0], c = x.shape[1];
    Tensor out = Tensor::zeros({c, r});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out.values[j * r + i] = x.values[i * c + j];
    return emit(std::move(out), Op::Transpose, a);
  }

  Var sum(Var a) {
    const Tensor& x = value(a);
    double s = 0.0;
    for (double v : x.values) s += v;
    return emit(Tensor::scalar(s), Op::Sum, a);
  }

  Var sum_rows(Var a) {
    const Tensor& x = value(a);
    detail::require(x.rank() == 2, "sum_rows: rank-2 tensor required");
    Tensor out = Tensor::zeros({x.shape[0]});
    for (std::size_t i = 0; i < x.shape[0]; ++i)
      for (std::size_t j = 0; j < x.shape[1]; ++j) out.values[i] += x.at(i, j);
    return emit(std::move(out), Op::SumRows, a);
  }

  // Row-wise log-softmax with max subtraction.
  Var log_softmax_rows(Var a) {
    const Tensor& x = value(a);
    detail::require(x.rank() == 2, "log_softmax_rows: rank-2 tensor required");
    Tensor out = x;
    const std::size_t c = x.shape[1];
    for (std::size_t i = 0; i < x.shape[0]; ++i) {
      double* row = out.values.data() + i * c;
      const double mx = *std::max_element(row, row + c);
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
      const double lse = mx + std::log(s);
      for (std::size_t j = 0; j < c; ++j) row[j] -= lse;
    }
    return emit(std::move(out), Op::LogSoftmaxRows, a);
  }

  // Contiguous block of a tensor reinterpreted with a new shape.
  Var slice(Var a, std::size_t offset, Shape shape) {
    const Tensor& x = value(a);
    const std::size_t n = Tensor::extent_product(shape);
    detail::require(offset + n <= x.size(), "slice: out of range");
    Tensor out(std::move(shape), Vector(x.values.begin() + static_cast<std::ptrdiff_t>(offset),
                                        x.values.begin() + static_cast<std::ptrdiff_t>(offset + n)));
    return emit(std::move(out), Op::Slice, a, {}, 0.0, offset);
  }

  // Flattened values of a followed by those of b, as a rank-1 tensor.
  Var concat(Var a, Var b) {
    detail::require(b.tape == this, "concat: variables belong to different tapes");
    Vector v = value(a).values;
    const Vector& w = value(b).values;
    v.insert(v.end(), w.begin(), w.end());
    const std::size_t n = v.size();
    return emit(Tensor({n}, std::move(v)), Op::Concat, a, b);
  }

 private:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  struct Node {
    Tensor value;
    Vector grad;
    Op op;
    std::size_t a;
    std::size_t b;
    double param;
    std::size_t offset;
    bool needs_grad;
  };

  enum class Mode { Same, Scalar, Row };
  struct Broadcast {
    Shape shape;
    Mode ma, mb;
    std::size_t cols;
    std::size_t map(Mode m, std::size_t k) const {
      switch (m) {
        case Mode::Same: return k;
        case Mode::Scalar: return 0;
        default: return k % cols;
      }
    }
    std::size_t index_a(std::size_t k) const { return map(ma, k); }
    std::size_t index_b(std::size_t k) const { return map(mb, k); }
  };

  static Broadcast broadcast(const Tensor& x, const Tensor& y) {
    if (x.shape == y.shape) return {x.shape, Mode::Same, Mode::Same, 1};
    if (y.size() == 1) return {x.shape, Mode::Same, Mode::Scalar, 1};
    if (x.size() == 1) return {y.shape, Mode::Scalar, Mode::Same, 1};
    if (x.rank() == 2 && y.rank() == 1 && y.shape[0] == x.shape[1])
      return {x.shape, Mode::Same, Mode::Row, x.shape[1]};
    if (y.rank() == 2 && x.rank() == 1 && x.shape[0] == y.shape[1])
      return {y.shape, Mode::Row, Mode::Same, y.shape[1]};
    throw ContractViolation("elementwise op: shapes cannot be broadcast");
  }

  static double apply_unary(Op op, double v, double param) {
    switch (op) {
      case Op::Neg: return -v;
      case Op::Log: return std::log(v);
      case Op::Exp: return std::exp(v);
      case Op::Square: return v * v;
      case Op::Sqrt: return std::sqrt(v);
      case Op::Tanh: return std::tanh(v);
      case Op::Relu: return v > 0 ? v : 0.0;
      case Op::LeakyRelu: return v > 0 ? v : param * v;
      case Op::Softplus: return softplus(v);
      case Op::Sigmoid: return sigmoid(v);
      default: return v;
    }
  }

  // d out / d in for elementwise unary ops, given input v and output y.
  static double unary_derivative(Op op, double v, double y, double param) {
    switch (op) {
      case Op::Neg: return -1.0;
      case Op::Log: return 1.0 / v;
      case Op::Exp: return y;
      case Op::Square: return 2.0 * v;
      case Op::Sqrt: return 0.5 / y;
      case Op::Tanh: return 1.0 - y * y;
      case Op::Relu: return v > 0 ? 1.0 : 0.0;
      case Op::LeakyRelu: return v > 0 ? 1.0 : param;
      case Op::Softplus: return sigmoid(v);
      case Op::Sigmoid: return y * (1.0 - y);
      default: return 1.0;
    }
  }

  static void check_finite(const Tensor& t, Op op) {
    for (double v : t.values)
      if (!std::isfinite(v))
        throw NumericFailure(std::string("non-finite value produced by primitive '") + op_name(op) + "'");
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Var emit(Tensor out, Op op, Var a, Var b = {}, double param = 0.0, std::size_t offset = 0) {
    check_finite(out, op);
    const bool has_b = b.tape != nullptr;
    const bool needs = nodes_[a.id].needs_grad || (has_b && nodes_[b.id].needs_grad);
    return push(Node{std::move(out), {}, op, a.id, has_b ? b.id : npos, param, offset, needs});
  }

  Vector& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  void propagate(std::size_t i) {
    // Copy what we need: grad_buffer may reallocate nothing, but keep indices stable.
    const Op op = nodes_[i].op;
    const std::size_t ia = nodes_[i].a, ib = nodes_[i].b;
    if (op == Op::Leaf || op == Op::Constant) return;
    const Vector& g = nodes_[i].grad;
    const Tensor& out = nodes_[i].value;
    const bool ga = nodes_[ia].needs_grad;
    const bool gb = ib != npos && nodes_[ib].needs_grad;

    switch (op) {
      case Op::Add: case Op::Sub: case Op::Mul: case Op::Div: {
        const Tensor& x = nodes_[ia].value;
        const Tensor& y = nodes_[ib].value;
        const Broadcast bc = broadcast(x, y);
        Vector* da = ga ? &grad_buffer(ia) : nullptr;
        Vector* db = gb ? &grad_buffer(ib) : nullptr;
        for (std::size_t k = 0; k < g.size(); ++k) {
          const std::size_t ka = bc.index_a(k), kb = bc.index_b(k);
          const double u = x.values[ka], w = y.values[kb];
          double pa = 1.0, pb = 1.0;
          switch (op) {
            case Op::Add: break;
            case Op::Sub: pb = -1.0; break;
            case Op::Mul: pa = w; pb = u; break;
            default: pa = 1.0 / w; pb = -u / (w * w); break;
          }
          if (da) (*da)[ka] += g[k] * pa;
          if (db) (*db)[kb] += g[k] * pb;
        }
        break;
      }
      case Op::Matmul: {
        const Tensor& x = nodes_[ia].value;
        const Tensor& y = nodes_[ib].value;
        const std::size_t m = x.shape[0], k = x.shape[1], n = y.shape[1];
        if (ga) {
          Vector& da = grad_buffer(ia);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < n; ++j) s += g[r * n + j] * y.values[p * n + j];
              da[r * k + p] += s;
            }
        }
        if (gb) {
          Vector& db = grad_buffer(ib);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t p = 0; p < k; ++p) {
              const double xv = x.values[r * k + p];
              if (xv == 0.0) continue;
              for (std::size_t j = 0; j < n; ++j) db[p * n + j] += xv * g[r * n + j];
            }
        }
        break;
      }
      case Op::Transpose: {
        if (!ga) break;
        const std::size_t r = nodes_[ia].value.shape[0], c = nodes_[ia].value.shape[1];
        Vector& da = grad_buffer(ia);
        for (std::size_t p = 0; p < r; ++p)
          for (std::size_t q = 0; q < c; ++q) da[p * c + q] += g[q * r + p];
        break;
      }
      case Op::Sum: {
        if (!ga) break;
        Vector& da = grad_buffer(ia);
        for (double& v : da) v += g[0];
        break;
      }
      case Op::SumRows: {
        if (!ga) break;
        const std::size_t c = nodes_[ia].value.shape[1];
        Vector& da = grad_buffer(ia);
        for (std::size_t k = 0; k < da.size(); ++k) da[k] += g[k / c];
        break;
      }
      case Op::LogSoftmaxRows: {
        if (!ga) break;
        const std::size_t r = out.shape[0], c = out.shape[1];
        Vector& da = grad_buffer(ia);
        for (std::size_t p = 0; p < r; ++p) {
          double gs = 0.0;
          for (std::size_t q = 0; q < c; ++q) gs += g[p * c + q];
          for (std::size_t q = 0; q < c; ++q)
            da[p * c + q] += g[p * c + q] - std::exp(out.values[p * c + q]) * gs;
        }
        break;
      }
      case Op::Slice: {
        if (!ga) break;
        Vector& da = grad_buffer(ia);
        const std::size_t off = nodes_[i].offset;
        for (std::size_t k = 0; k < g.size(); ++k) da[off + k] += g[k];
        break;
      }
      case Op::Concat: {
        const std::size_t na = nodes_[ia].value.size();
        if (ga) {
          Vector& da = grad_buffer(ia);
          for (std::size_t k = 0; k < na; ++k) da[k] += g[k];
        }
        if (gb) {
          Vector& db = grad_buffer(ib);
          for (std::size_t k = 0; k < db.size(); ++k) db[k] += g[na + k];
        }
        break;
      }
      default: {
        if (!ga) break;
        const Tensor& x = nodes_[ia].value;
        const double param = nodes_[i].param;
        Vector& da = grad_buffer(ia);
        for (std::size_t k = 0; k < g.size(); ++k)
          da[k] += g[k] * unary_derivative(op, x.values[k], out.values[k], param);
        break;
      }
    }
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

inline Var operator+(Var a, Var b) { return a.tape->binary(Op::Add, a, b); }
inline Var operator-(Var a, Var b) { return a.tape->binary(Op::Sub, a, b); }
inline Var operator*(Var a, Var b) { return a.tape->binary(Op::Mul, a, b); }
inline Var operator/(Var a, Var b) { return a.tape->binary(Op::Div, a, b); }
inline Var operator+(Var a, double c) { return a + a.tape->constant(c); }
inline Var operator+(double c, Var a) { return a.tape->constant(c) + a; }
inline Var operator-(Var a, double c) { return a - a.tape->constant(c); }
inline Var operator-(double c, Var a) { return a.tape->constant(c) - a; }
inline Var operator*(Var a, double c) { return a * a.tape->constant(c); }
inline Var operator*(double c, Var a) { return a.tape->constant(c) * a; }
inline Var operator/(Var a, double c) { return a / a.tape->constant(c); }
inline Var operator-(Var a) { return a.tape->unary(Op::Neg, a); }

inline Var log(Var a) { return a.tape->unary(Op::Log, a); }
inline Var exp(Var a) { return a.tape->unary(Op::Exp, a); }
inline Var square(Var a) { return a.tape->unary(Op::Square, a); }
inline Var sqrt(Var a) { return a.tape->unary(Op::Sqrt, a); }
inline Var tanh(Var a) { return a.tape->unary(Op::Tanh, a); }
inline Var relu(Var a) { return a.tape->unary(Op::Relu, a); }
inline Var leaky_relu(Var a, double slope) { return a.tape->unary(Op::LeakyRelu, a, slope); }
inline Var softplus(Var a) { return a.tape->unary(Op::Softplus, a); }
inline Var sigmoid(Var a) { return a.tape->unary(Op::Sigmoid, a); }
inline Var sum(Var a) { return a.tape->sum(a); }
inline Var sum_rows(Var a) { return a.tape->sum_rows(a); }
inline Var matmul(Var a, Var b) { return a.tape->matmul(a, b); }
inline Var transpose(Var a) { return a.tape->transpose(a); }
inline Var log_softmax_rows(Var a) { return a.tape->log_softmax_rows(a); }
inline Var concat(Var a, Var b) { return a.tape->concat(a, b); }

struct ValueAndGradient {
  double value = 0.0;
  std::vector<Tensor> gradients;
};

// Builds f on a fresh tape over the given leaves and differentiates it.
using TapeFunction = std::function<Var(Tape&, std::span<const Var>)>;

inline ValueAndGradient evaluate_with_gradient(const TapeFunction& f, std::span<const Tensor> leaves) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(leaves.size());
  for (const Tensor& t : leaves) vars.push_back(tape.leaf(t));
  const Var out = f(tape, vars);
  detail::require(out.tape == &tape, "evaluate_with_gradient: output not built on the supplied tape");
  detail::require(out.value().size() == 1, "evaluate_with_gradient: expression output must be scalar");
  tape.backward(out);
  ValueAndGradient r;
  r.value = out.item();
  for (const Var& v : vars) r.gradients.push_back(tape.grad(v));
  return r;
}

// Central differences (f(θ+h·e_i) - f(θ-h·e_i)) / 2h for every coordinate.
inline Vector finite_difference_gradient(const std::function<double(std::span<const double>)>& f,
                                         std::span<const double> theta, double h) {
  detail::require(h > 0, "finite_difference_gradient: step must be positive");
  Vector probe(theta.begin(), theta.end());
  Vector g(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericFailure("finite_difference_gradient: non-finite value probing coordinate " +
                           std::to_string(i));
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace bnn
