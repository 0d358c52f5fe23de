#pragma once

// Minimal reverse-mode automatic differentiation over dense matrices.
//
// A Tape records every operation applied to Vars; backward() walks the record
// in reverse and accumulates gradients. Nodes that do not depend on any
// gradient-requiring leaf carry no backward closure, so running a forward pass
// on a tape built only from constants costs little more than plain evaluation.

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <type_traits>
#include <vector>

#include "sprc/tensor.hpp"

namespace sprc {

/// A learnable (or frozen) tensor together with its accumulated gradient.
template <class T>
struct Parameter {
  Matrix<T> value;
  Matrix<T> grad;
  bool frozen = false;

  void zero_grad() { grad = Matrix<T>(value.rows(), value.cols()); }
};

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Matrix<T>& value() const { return tape->value(*this); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  T scalar() const { return value()[0]; }
};

template <class T>
class Tape {
 public:
  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Matrix<T> v) { return push(std::move(v), false, {}); }

  /// Leaf whose gradient is read back with grad().
  Var<T> variable(Matrix<T> v) { return push(std::move(v), true, {}); }

  /// Frozen parameters enter as constants; live ones as leaves whose gradient
  /// is added into Parameter::grad when backward() finishes.
  Var<T> parameter(Parameter<T>& p) {
    if (p.frozen) return constant(p.value);
    Var<T> v = push(p.value, true, {});
    nodes_[v.id].sink = &p;
    return v;
  }

  const Matrix<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }

  /// Gradient accumulated on `v` by the last backward(); zeros when none.
  Matrix<T> grad(Var<T> v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.empty() && !n.value.empty()) return Matrix<T>(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void backward(Var<T> root) {
    if (value(root).size() != 1) throw StructuralError("backward() needs a scalar root");
    if (!requires_grad(root)) return;
    grad_ref(root.id)[0] += T(1);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward();
      if (n.sink != nullptr) {
        Parameter<T>& p = *n.sink;
        if (p.grad.empty()) p.zero_grad();
        for (std::size_t k = 0; k < n.grad.size(); ++k) p.grad[k] += n.grad[k];
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  // -- op-implementation interface --

  Var<T> push(Matrix<T> v, bool req, std::function<void()> bw) {
    nodes_.push_back(Node{std::move(v), {}, req, req ? std::move(bw) : std::function<void()>{}, nullptr});
    return Var<T>{this, nodes_.size() - 1};
  }

  Matrix<T>& grad_ref(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Matrix<T>(n.value.rows(), n.value.cols());
    return n.grad;
  }
  const Matrix<T>& out_grad(std::size_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad = false;
    std::function<void()> backward;
    Parameter<T>* sink = nullptr;
  };
  std::vector<Node> nodes_;
};

namespace ad {

namespace detail {

template <class T>
bool any_req(std::initializer_list<Var<T>> vs) {
  for (auto v : vs)
    if (v.tape->requires_grad(v)) return true;
  return false;
}

template <class T>
void check_same(const Matrix<T>& a, const Matrix<T>& b, const char* op) {
  if (!a.same_shape(b)) throw StructuralError(std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  Matrix<T> out = sprc::matmul(a.value(), b.value());
  return t.push(std::move(out), detail::any_req({a, b}), [&t, a, b, o = t.size()] {
    const Matrix<T>& g = t.out_grad(o);
    if (t.requires_grad(a)) gemm_nt_acc(g, t.value(b), t.grad_ref(a.id));
    if (t.requires_grad(b)) gemm_tn_acc(t.value(a), g, t.grad_ref(b.id));
  });
}

/// a * b^T
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  const Matrix<T>& av = a.value();
  const Matrix<T>& bv = b.value();
  if (av.cols() != bv.cols()) throw StructuralError("matmul_nt " + shape_str(av) + " x " + shape_str(bv) + "^T");
  Matrix<T> out(av.rows(), bv.rows());
  gemm_nt_acc(av, bv, out);
  return t.push(std::move(out), detail::any_req({a, b}), [&t, a, b, o = t.size()] {
    const Matrix<T>& g = t.out_grad(o);
    if (t.requires_grad(a)) gemm_nn_acc(g, t.value(b), t.grad_ref(a.id));
    if (t.requires_grad(b)) gemm_tn_acc(g, t.value(a), t.grad_ref(b.id));
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  detail::check_same(a.value(), b.value(), "add");
  Matrix<T> out = a.value();
  const Matrix<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return t.push(std::move(out), detail::any_req({a, b}), [&t, a, b, o = t.size()] {
    const Matrix<T>& g = t.out_grad(o);
    for (Var<T> x : {a, b}) {
      if (!t.requires_grad(x)) continue;
      Matrix<T>& gx = t.grad_ref(x.id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  detail::check_same(a.value(), b.value(), "sub");
  Matrix<T> out = a.value();
  const Matrix<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return t.push(std::move(out), detail::any_req({a, b}), [&t, a, b, o = t.size()] {
    const Matrix<T>& g = t.out_grad(o);
    if (t.requires_grad(a)) {
      Matrix<T>& ga = t.grad_ref(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      Matrix<T>& gb = t.grad_ref(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// a + broadcast(row), row is 1×cols.
template <class T>
Var<T> add_row(Var<T> a, Var<T> row) {
  Tape<T>& t = *a.tape;
  const Matrix<T>& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != a.cols()) throw StructuralError("add_row: bad bias shape " + shape_str(rv));
  Matrix<T> out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += rv[c];
  return t.push(std::move(out), detail::any_req({a, row}), [&t, a, row, o = t.size()] {
    const Matrix<T>& g = t.out_grad(o);
    if (t.requires_grad(a)) {
      Matrix<T>& ga = t.grad_ref(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(row)) {
      Matrix<T>& gr = t.grad_ref(row.id);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gr[c] += g(r, c);
    }
  });
}

/// a * broadcast(row), column-wise gain.
template <class T>
Var<T> mul_row(Var<T> a, Var<T> row) {
  Tape<T>& t = *a.tape;
  const Matrix<T>& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != a.cols()) throw StructuralError("mul_row: bad gain shape " + shape_str(rv));
  Matrix<T> out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= rv[c];
  return t.push(std::move(out), detail::any_req({a, row}), [&t, a, row, o = t.size()] {
    const Matrix<T>& g = t.out_grad(o);
    const Matrix<T>& av = t.value(a);
    const Matrix<T>& rv = t.value(row);
    if (t.requires_grad(a)) {
      Matrix<T>& ga = t.grad_ref(a.id);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += g(r, c) * rv[c];
    }
    if (t.requires_grad(row)) {
      Matrix<T>& gr = t.grad_ref(row.id);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gr[c] += g(r, c) * av(r, c);
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tape<T>& t = *a.tape;
  Matrix<T> out = a.value();
  for (auto& v : out.flat()) v *= s;
  return t.push(std::move(out), detail::any_req({a}), [&t, a, s, o = t.size()] {
    const Matrix<T>& g = t.out_grad(o);
    Matrix<T>& ga = t.grad_ref(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

/// s * a where s is a 1×1 Var.
template <class T>
Var<T> scale_by(Var<T> a, Var<T> s) {
  Tape<T>& t = *a.tape;
  if (s.value().size() != 1) throw StructuralError("scale_by: scale must be 1x1");
  const T sv = s.scalar();
  Matrix<T> out = a.value();
  for (auto& v : out.flat()) v *= sv;
  return t.push(std::move(out), detail::any_req({a, s}), [&t, a, s, o = t.size()] {
    const Matrix<T>& g = t.out_grad(o);
    const Matrix<T>& av = t.value(a);
    const T sv = t.value(s)[0];
    if (t.requires_grad(a)) {
      Matrix<T>& ga = t.grad_ref(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += sv * g[i];
    }
    if (t.requires_grad(s)) {
      T acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      t.grad_ref(s.id)[0] += acc;
    }
  });
}

/// GELU, tanh approximation.
template <class T>
Var<T> gelu(Var<T> a) {
  Tape<T>& t = *a.tape;
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = T(0.044715);
  Matrix<T> out = a.value();
  for (auto& x : out.flat()) x = T(0.5) * x * (T(1) + std::tanh(k * (x + c * x * x * x)));
  return t.push(std::move(out), detail::any_req({a}), [&t, a, o = t.size()] {
    const Matrix<T>& g = t.out_grad(o);
    const Matrix<T>& av = t.value(a);
    Matrix<T>& ga = t.grad_ref(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = av[i];
      const T th = std::tanh(k * (x + c * x * x * x));
      const T d = T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * k * (T(1) + T(3) * c * x * x);
      ga[i] += g[i] * d;
    }
  });
}

template <class T>
Var<T> softmax_rows(Var<T> a) {
  Tape<T>& t = *a.tape;
  Matrix<T> out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const T m = *std::max_element(row.begin(), row.end());
    T z = 0;
    for (auto& v : row) z += (v = std::exp(v - m));
    for (auto& v : row) v /= z;
  }
  return t.push(std::move(out), detail::any_req({a}), [&t, a, o = t.size()] {
    const Matrix<T>& g = t.out_grad(o);
    const Matrix<T>& y = t.value(Var<T>{&t, o});
    Matrix<T>& ga = t.grad_ref(a.id);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      T s = 0;
      for (std::size_t c = 0; c < g.cols(); ++c) s += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += y(r, c) * (g(r, c) - s);
    }
  });
}

/// Row-wise layer normalization with gain and bias (both 1×cols).
template <class T>
Var<T> layer_norm(Var<T> a, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  Tape<T>& t = *a.tape;
  const Matrix<T>& x = a.value();
  const std::size_t n = x.rows(), d = x.cols();
  if (gain.cols() != d || bias.cols() != d) throw StructuralError("layer_norm: parameter width mismatch");
  Matrix<T> xhat(n, d);
  std::vector<T> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    T mu = 0;
    for (std::size_t c = 0; c < d; ++c) mu += x(r, c);
    mu /= T(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (x(r, c) - mu) * (x(r, c) - mu);
    var /= T(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) xhat(r, c) = (x(r, c) - mu) * inv_std[r];
  }
  const Matrix<T>& gv = gain.value();
  const Matrix<T>& bv = bias.value();
  Matrix<T> out(n, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out(r, c) = xhat(r, c) * gv[c] + bv[c];
  return t.push(std::move(out), detail::any_req({a, gain, bias}),
                [&t, a, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), o = t.size()] {
                  const Matrix<T>& g = t.out_grad(o);
                  const Matrix<T>& gv = t.value(gain);
                  const std::size_t n = g.rows(), d = g.cols();
                  if (t.requires_grad(gain)) {
                    Matrix<T>& gg = t.grad_ref(gain.id);
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t c = 0; c < d; ++c) gg[c] += g(r, c) * xhat(r, c);
                  }
                  if (t.requires_grad(bias)) {
                    Matrix<T>& gb = t.grad_ref(bias.id);
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t c = 0; c < d; ++c) gb[c] += g(r, c);
                  }
                  if (t.requires_grad(a)) {
                    Matrix<T>& ga = t.grad_ref(a.id);
                    for (std::size_t r = 0; r < n; ++r) {
                      T mean_g = 0, mean_gx = 0;
                      for (std::size_t c = 0; c < d; ++c) {
                        const T gh = g(r, c) * gv[c];
                        mean_g += gh;
                        mean_gx += gh * xhat(r, c);
                      }
                      mean_g /= T(d);
                      mean_gx /= T(d);
                      for (std::size_t c = 0; c < d; ++c)
                        ga(r, c) += inv_std[r] * (g(r, c) * gv[c] - mean_g - xhat(r, c) * mean_gx);
                    }
                  }
                });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw StructuralError("concat_rows: no inputs");
  Tape<T>& t = *parts.front().tape;
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  bool req = false;
  for (auto p : parts) {
    if (p.cols() != cols) throw StructuralError("concat_rows: column mismatch");
    rows += p.rows();
    req = req || t.requires_grad(p);
  }
  Matrix<T> out(rows, cols);
  std::size_t off = 0;
  for (auto p : parts) {
    const Matrix<T>& v = p.value();
    std::copy(v.data(), v.data() + v.size(), out.data() + off);
    off += v.size();
  }
  return t.push(std::move(out), req, [&t, parts, o = t.size()] {
    const Matrix<T>& g = t.out_grad(o);
    std::size_t off = 0;
    for (auto p : parts) {
      const std::size_t n = t.value(p).size();
      if (t.requires_grad(p)) {
        Matrix<T>& gp = t.grad_ref(p.id);
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
      }
      off += n;
    }
  });
}

template <class T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t count) {
  Tape<T>& t = *a.tape;
  const Matrix<T>& v = a.value();
  if (begin + count > v.rows()) throw StructuralError("slice_rows out of range");
  const std::size_t cols = v.cols();
  Matrix<T> out(count, cols);
  std::copy(v.data() + begin * cols, v.data() + (begin + count) * cols, out.data());
  return t.push(std::move(out), detail::any_req({a}), [&t, a, begin, o = t.size()] {
    const Matrix<T>& g = t.out_grad(o);
    Matrix<T>& ga = t.grad_ref(a.id);
    const std::size_t off = begin * g.cols();
    for (std::size_t i = 0; i < g.size(); ++i) ga[off + i] += g[i];
  });
}

template <class T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t count) {
  Tape<T>& t = *a.tape;
  const Matrix<T>& v = a.value();
  if (begin + count > v.cols()) throw StructuralError("slice_cols out of range");
  Matrix<T> out(v.rows(), count);
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = v(r, begin + c);
  return t.push(std::move(out), detail::any_req({a}), [&t, a, begin, o = t.size()] {
    const Matrix<T>& g = t.out_grad(o);
    Matrix<T>& ga = t.grad_ref(a.id);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, begin + c) += g(r, c);
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw StructuralError("concat_cols: no inputs");
  Tape<T>& t = *parts.front().tape;
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  bool req = false;
  for (auto p : parts) {
    if (p.rows() != rows) throw StructuralError("concat_cols: row mismatch");
    cols += p.cols();
    req = req || t.requires_grad(p);
  }
  Matrix<T> out(rows, cols);
  std::size_t off = 0;
  for (auto p : parts) {
    const Matrix<T>& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) out(r, off + c) = v(r, c);
    off += v.cols();
  }
  return t.push(std::move(out), req, [&t, parts, o = t.size()] {
    const Matrix<T>& g = t.out_grad(o);
    std::size_t off = 0;
    for (auto p : parts) {
      const std::size_t w = t.value(p).cols();
      if (t.requires_grad(p)) {
        Matrix<T>& gp = t.grad_ref(p.id);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) gp(r, c) += g(r, off + c);
      }
      off += w;
    }
  });
}

/// Embedding lookup: out row k = table row ids[k].
template <class T>
Var<T> gather_rows(Var<T> table, std::vector<std::size_t> ids) {
  Tape<T>& t = *table.tape;
  const Matrix<T>& tv = table.value();
  Matrix<T> out(ids.size(), tv.cols());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] >= tv.rows()) throw StructuralError("gather_rows: index out of range");
    std::copy(tv.row(ids[k]).begin(), tv.row(ids[k]).end(), out.row(k).begin());
  }
  return t.push(std::move(out), detail::any_req({table}), [&t, table, ids = std::move(ids), o = t.size()] {
    const Matrix<T>& g = t.out_grad(o);
    Matrix<T>& gt = t.grad_ref(table.id);
    for (std::size_t k = 0; k < ids.size(); ++k)
      for (std::size_t c = 0; c < g.cols(); ++c) gt(ids[k], c) += g(k, c);
  });
}

/// Column means, 1×cols.
template <class T>
Var<T> mean_rows(Var<T> a) {
  Tape<T>& t = *a.tape;
  const Matrix<T>& v = a.value();
  if (v.rows() == 0) throw StructuralError("mean_rows of empty matrix");
  Matrix<T> out(1, v.cols());
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (std::size_t c = 0; c < v.cols(); ++c) out[c] += v(r, c);
  const T inv = T(1) / T(v.rows());
  for (auto& x : out.flat()) x *= inv;
  return t.push(std::move(out), detail::any_req({a}), [&t, a, inv, o = t.size()] {
    const Matrix<T>& g = t.out_grad(o);
    Matrix<T>& ga = t.grad_ref(a.id);
    for (std::size_t r = 0; r < ga.rows(); ++r)
      for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += g[c] * inv;
  });
}

/// Row-wise L2 normalization; a zero row is a numeric error.
template <class T>
Var<T> l2_normalize_rows(Var<T> a) {
  Tape<T>& t = *a.tape;
  Matrix<T> out = a.value();
  std::vector<T> norms(out.rows());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    norms[r] = l2_norm<T>(out.row(r));
    if (!(norms[r] > T(0)) || !std::isfinite(norms[r])) throw NumericError("cannot normalize a zero or non-finite vector");
    for (auto& x : out.row(r)) x /= norms[r];
  }
  return t.push(std::move(out), detail::any_req({a}), [&t, a, norms = std::move(norms), o = t.size()] {
    const Matrix<T>& g = t.out_grad(o);
    const Matrix<T>& y = t.value(Var<T>{&t, o});
    Matrix<T>& ga = t.grad_ref(a.id);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      const T yg = dot<T>(y.row(r), g.row(r));
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += (g(r, c) - y(r, c) * yg) / norms[r];
    }
  });
}

/// Mean over rows of -log softmax(logits[r])[targets[r]], stabilized by
/// subtracting the row maximum.
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, std::vector<std::size_t> targets) {
  Tape<T>& t = *logits.tape;
  const Matrix<T>& z = logits.value();
  if (z.rows() == 0) throw DomainError("cross entropy over an empty batch");
  if (targets.size() != z.rows()) throw StructuralError("softmax_cross_entropy: one target per row required");
  Matrix<T> probs(z.rows(), z.cols());
  T loss = 0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    if (targets[r] >= z.cols()) throw StructuralError("softmax_cross_entropy: target out of range");
    auto row = z.row(r);
    const T m = *std::max_element(row.begin(), row.end());
    if (!std::isfinite(m)) throw NumericError("non-finite similarity");
    T s = 0;
    for (std::size_t c = 0; c < z.cols(); ++c) s += (probs(r, c) = std::exp(row[c] - m));
    for (std::size_t c = 0; c < z.cols(); ++c) probs(r, c) /= s;
    loss += (m + std::log(s)) - row[targets[r]];
  }
  const T inv = T(1) / T(z.rows());
  Matrix<T> out(1, 1, loss * inv);
  return t.push(std::move(out), detail::any_req({logits}),
                [&t, logits, targets = std::move(targets), probs = std::move(probs), inv, o = t.size()] {
                  const T g = t.out_grad(o)[0] * inv;
                  Matrix<T>& gz = t.grad_ref(logits.id);
                  for (std::size_t r = 0; r < probs.rows(); ++r)
                    for (std::size_t c = 0; c < probs.cols(); ++c)
                      gz(r, c) += g * (probs(r, c) - (c == targets[r] ? T(1) : T(0)));
                });
}

/// ||a - target||_F with `target` held constant. The (undefined) gradient at
/// zero distance is taken as zero.
template <class T>
Var<T> frobenius_distance(Var<T> a, const Matrix<T>& target) {
  Tape<T>& t = *a.tape;
  detail::check_same(a.value(), target, "frobenius_distance");
  Matrix<T> diff = a.value();
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] -= target[i];
  const T d = l2_norm<T>(diff.flat());
  return t.push(Matrix<T>(1, 1, d), detail::any_req({a}), [&t, a, d, diff = std::move(diff), o = t.size()] {
    if (d == T(0)) return;
    const T g = t.out_grad(o)[0] / d;
    Matrix<T>& ga = t.grad_ref(a.id);
    for (std::size_t i = 0; i < diff.size(); ++i) ga[i] += g * diff[i];
  });
}

/// Mean over rows of ||a_r - target_r||_2, target constant.
template <class T>
Var<T> row_distance_mean(Var<T> a, const Matrix<T>& target) {
  Tape<T>& t = *a.tape;
  detail::check_same(a.value(), target, "row_distance_mean");
  const std::size_t n = target.rows();
  if (n == 0) return t.constant(Matrix<T>(1, 1));
  Matrix<T> diff = a.value();
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] -= target[i];
  std::vector<T> norms(n);
  T total = 0;
  for (std::size_t r = 0; r < n; ++r) total += (norms[r] = l2_norm<T>(diff.row(r)));
  const T inv = T(1) / T(n);
  return t.push(Matrix<T>(1, 1, total * inv), detail::any_req({a}),
                [&t, a, inv, norms = std::move(norms), diff = std::move(diff), o = t.size()] {
                  const T g = t.out_grad(o)[0] * inv;
                  Matrix<T>& ga = t.grad_ref(a.id);
                  for (std::size_t r = 0; r < diff.rows(); ++r) {
                    if (norms[r] == T(0)) continue;
                    for (std::size_t c = 0; c < diff.cols(); ++c) ga(r, c) += g * diff(r, c) / norms[r];
                  }
                });
}

/// Identity on values; no gradient flows back through it.
template <class T>
Var<T> stop_gradient(Var<T> a) {
  return a.tape->push(a.value(), false, {});
}

/// Sum of 1×1 (or equally shaped) Vars.
template <class T>
Var<T> add_n(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw StructuralError("add_n: no inputs");
  Var<T> acc = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

}  // namespace ad
}  // namespace sprc
