// SPDX-License-Identifier: Apache-2.0
//
// Matrix-granular reverse-mode differentiation. Every op records its value
// and a closure that pushes the output gradient back to its inputs. Leaves
// are constants, differentiable inputs, or parameters whose gradient is
// accumulated into an external sink after the reverse sweep.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "flexcare/tensor.hpp"

namespace flexcare::ad {

struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const noexcept { return id != npos; }
};

template <typename T>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, std::size_t)>;

  Var constant(Matrix<T> v) { return push(std::move(v), false, {}); }

  Var input(Matrix<T> v) { return push(std::move(v), true, {}); }

  /// A parameter leaf. `value` must outlive the tape; gradients are added to
  /// `sink` during backward() when it is non-null.
  Var param(const Matrix<T>& value, Matrix<T>* sink) {
    Node n;
    n.ref = &value;
    n.needs_grad = sink != nullptr;
    n.sink = sink;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  const Matrix<T>& value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.ref ? *n.ref : n.value;
  }
  T scalar(Var v) const { return value(v)[0]; }

  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Gradient of a node after backward(); empty when nothing flowed into it.
  const Matrix<T>& grad(Var v) const { return nodes_[v.id].grad; }

  Matrix<T>& grad_mut(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) {
      const Matrix<T>& val = n.ref ? *n.ref : n.value;
      n.grad = Matrix<T>(val.rows(), val.cols());
    }
    return n.grad;
  }

  void seed(Var v, const Matrix<T>& g) {
    Matrix<T>& dst = grad_mut(v);
    if (!dst.same_shape(g)) throw ShapeError("seed: gradient shape mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }
  void seed(Var v, T g) {
    Matrix<T>& dst = grad_mut(v);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g;
  }

  /// Reverse sweep over every recorded node; call after seeding.
  void backward() {
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.back) {
        n.back(*this, i);
      } else if (n.sink) {
        Matrix<T>& s = *n.sink;
        for (std::size_t k = 0; k < s.size(); ++k) s[k] += n.grad[k];
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  Var push(Matrix<T> v, bool needs_grad, BackFn fn) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs_grad;
    if (needs_grad) n.back = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  const Matrix<T>& grad_of(std::size_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Matrix<T> value;
    const Matrix<T>* ref = nullptr;
    Matrix<T> grad;
    Matrix<T>* sink = nullptr;
    bool needs_grad = false;
    BackFn back;
  };
  std::vector<Node> nodes_;
};

namespace detail {
template <typename T>
bool any_grad(const Tape<T>& t, std::initializer_list<Var> vs) {
  for (Var v : vs)
    if (t.needs_grad(v)) return true;
  return false;
}
}  // namespace detail

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
  Matrix<T> out = flexcare::matmul(t.value(a), t.value(b));
  return t.push(std::move(out), detail::any_grad(t, {a, b}),
                [a, b](Tape<T>& tp, std::size_t self) {
                  const Matrix<T>& g = tp.grad_of(self);
                  if (tp.needs_grad(a)) gemm_nt_acc(g, tp.value(b), tp.grad_mut(a));
                  if (tp.needs_grad(b)) gemm_tn_acc(tp.value(a), g, tp.grad_mut(b));
                });
}

/// a * b^T
template <typename T>
Var matmul_nt(Tape<T>& t, Var a, Var b) {
  const Matrix<T>& av = t.value(a);
  const Matrix<T>& bv = t.value(b);
  if (av.cols() != bv.cols()) throw ShapeError("matmul_nt: inner dimension mismatch");
  Matrix<T> out(av.rows(), bv.rows());
  gemm_nt_acc(av, bv, out);
  return t.push(std::move(out), detail::any_grad(t, {a, b}),
                [a, b](Tape<T>& tp, std::size_t self) {
                  const Matrix<T>& g = tp.grad_of(self);
                  if (tp.needs_grad(a)) gemm_acc(g, tp.value(b), tp.grad_mut(a));
                  if (tp.needs_grad(b)) gemm_tn_acc(g, tp.value(a), tp.grad_mut(b));
                });
}

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  const Matrix<T>& av = t.value(a);
  const Matrix<T>& bv = t.value(b);
  if (!av.same_shape(bv)) throw ShapeError("add: shape mismatch");
  Matrix<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return t.push(std::move(out), detail::any_grad(t, {a, b}),
                [a, b](Tape<T>& tp, std::size_t self) {
                  const Matrix<T>& g = tp.grad_of(self);
                  for (Var v : {a, b}) {
                    if (!tp.needs_grad(v)) continue;
                    Matrix<T>& d = tp.grad_mut(v);
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                  }
                });
}

/// Elementwise sum of equally shaped operands.
template <typename T>
Var add_n(Tape<T>& t, std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("add_n: no operands");
  Matrix<T> out = t.value(xs[0]);
  bool ng = t.needs_grad(xs[0]);
  for (std::size_t k = 1; k < xs.size(); ++k) {
    const Matrix<T>& v = t.value(xs[k]);
    if (!v.same_shape(out)) throw ShapeError("add_n: shape mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
    ng = ng || t.needs_grad(xs[k]);
  }
  std::vector<Var> ids(xs.begin(), xs.end());
  return t.push(std::move(out), ng, [ids](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad_of(self);
    for (Var v : ids) {
      if (!tp.needs_grad(v)) continue;
      Matrix<T>& d = tp.grad_mut(v);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

/// a + broadcast(row) where row is 1 x cols(a).
template <typename T>
Var add_row(Tape<T>& t, Var a, Var row) {
  const Matrix<T>& av = t.value(a);
  const Matrix<T>& rv = t.value(row);
  if (rv.rows() != 1 || rv.cols() != av.cols()) throw ShapeError("add_row: shape mismatch");
  Matrix<T> out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += rv[c];
  return t.push(std::move(out), detail::any_grad(t, {a, row}),
                [a, row](Tape<T>& tp, std::size_t self) {
                  const Matrix<T>& g = tp.grad_of(self);
                  if (tp.needs_grad(a)) {
                    Matrix<T>& d = tp.grad_mut(a);
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                  }
                  if (tp.needs_grad(row)) {
                    Matrix<T>& d = tp.grad_mut(row);
                    for (std::size_t r = 0; r < g.rows(); ++r)
                      for (std::size_t c = 0; c < g.cols(); ++c) d[c] += g(r, c);
                  }
                });
}

template <typename T>
Var scale(Tape<T>& t, Var a, T s) {
  Matrix<T> out = t.value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  return t.push(std::move(out), t.needs_grad(a), [a, s](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad_of(self);
    Matrix<T>& d = tp.grad_mut(a);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += s * g[i];
  });
}

/// a * s where s is a 1x1 node.
template <typename T>
Var mul_scalar(Tape<T>& t, Var a, Var s) {
  if (t.value(s).size() != 1) throw ShapeError("mul_scalar: scalar operand must be 1x1");
  const T sv = t.scalar(s);
  Matrix<T> out = t.value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= sv;
  return t.push(std::move(out), detail::any_grad(t, {a, s}),
                [a, s](Tape<T>& tp, std::size_t self) {
                  const Matrix<T>& g = tp.grad_of(self);
                  if (tp.needs_grad(a)) {
                    const T sv = tp.scalar(s);
                    Matrix<T>& d = tp.grad_mut(a);
                    for (std::size_t i = 0; i < g.size(); ++i) d[i] += sv * g[i];
                  }
                  if (tp.needs_grad(s)) {
                    const Matrix<T>& av = tp.value(a);
                    T acc{};
                    for (std::size_t i = 0; i < g.size(); ++i) acc += av[i] * g[i];
                    tp.grad_mut(s)[0] += acc;
                  }
                });
}

namespace detail {
template <typename T, typename F, typename DF>
Var unary(Tape<T>& t, Var a, F f, DF df) {
  const Matrix<T>& av = t.value(a);
  Matrix<T> out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return t.push(std::move(out), t.needs_grad(a), [a, df](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad_of(self);
    const Matrix<T>& x = tp.value(a);
    const Matrix<T>& y = tp.value(Var{self});
    Matrix<T>& d = tp.grad_mut(a);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * df(x[i], y[i]);
  });
}
}  // namespace detail

/// Exact (erf-based) GELU.
template <typename T>
Var gelu(Tape<T>& t, Var a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return detail::unary(
      t, a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x, T) {
        return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-T(0.5) * x * x);
      });
}

template <typename T>
Var tanh(Tape<T>& t, Var a) {
  return detail::unary(
      t, a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var sigmoid(Tape<T>& t, Var a) {
  return detail::unary(
      t, a,
      [](T x) {
        if (x >= 0) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

/// Row-wise softmax of (a + mask). `mask` is either empty or shaped like a;
/// it is a constant and receives no gradient.
template <typename T>
Var softmax_rows(Tape<T>& t, Var a, const Matrix<T>* mask = nullptr) {
  const Matrix<T>& av = t.value(a);
  if (mask && !mask->same_shape(av)) throw ShapeError("softmax_rows: mask shape mismatch");
  Matrix<T> out(av.rows(), av.cols());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < av.cols(); ++c) {
      const T v = av(r, c) + (mask ? (*mask)(r, c) : T{});
      out(r, c) = v;
      mx = std::max(mx, v);
    }
    T sum{};
    for (std::size_t c = 0; c < av.cols(); ++c) {
      out(r, c) = std::exp(out(r, c) - mx);
      sum += out(r, c);
    }
    for (std::size_t c = 0; c < av.cols(); ++c) out(r, c) /= sum;
  }
  return t.push(std::move(out), t.needs_grad(a), [a](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad_of(self);
    const Matrix<T>& y = tp.value(Var{self});
    Matrix<T>& d = tp.grad_mut(a);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      T dot{};
      for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) d(r, c) += y(r, c) * (g(r, c) - dot);
    }
  });
}

/// Row-wise layer normalization with learned gain and bias (both 1 x cols).
template <typename T>
Var layer_norm(Tape<T>& t, Var a, Var gain, Var bias, T eps = T(1e-5)) {
  const Matrix<T>& x = t.value(a);
  const Matrix<T>& gv = t.value(gain);
  const Matrix<T>& bv = t.value(bias);
  const std::size_t n = x.cols();
  if (gv.size() != n || bv.size() != n) throw ShapeError("layer_norm: parameter width mismatch");
  Matrix<T> xhat(x.rows(), n);
  std::vector<T> inv(x.rows());
  Matrix<T> out(x.rows(), n);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    T mu{};
    for (std::size_t c = 0; c < n; ++c) mu += x(r, c);
    mu /= T(n);
    T var{};
    for (std::size_t c = 0; c < n; ++c) var += (x(r, c) - mu) * (x(r, c) - mu);
    var /= T(n);
    inv[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat(r, c) = (x(r, c) - mu) * inv[r];
      out(r, c) = xhat(r, c) * gv[c] + bv[c];
    }
  }
  return t.push(
      std::move(out), detail::any_grad(t, {a, gain, bias}),
      [a, gain, bias, xhat = std::move(xhat), inv = std::move(inv)](Tape<T>& tp, std::size_t self) {
        const Matrix<T>& g = tp.grad_of(self);
        const Matrix<T>& gv = tp.value(gain);
        const std::size_t n = g.cols();
        if (tp.needs_grad(gain)) {
          Matrix<T>& d = tp.grad_mut(gain);
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < n; ++c) d[c] += g(r, c) * xhat(r, c);
        }
        if (tp.needs_grad(bias)) {
          Matrix<T>& d = tp.grad_mut(bias);
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < n; ++c) d[c] += g(r, c);
        }
        if (tp.needs_grad(a)) {
          Matrix<T>& d = tp.grad_mut(a);
          for (std::size_t r = 0; r < g.rows(); ++r) {
            T s1{}, s2{};
            for (std::size_t c = 0; c < n; ++c) {
              const T dxh = g(r, c) * gv[c];
              s1 += dxh;
              s2 += dxh * xhat(r, c);
            }
            for (std::size_t c = 0; c < n; ++c) {
              const T dxh = g(r, c) * gv[c];
              d(r, c) += inv[r] / T(n) * (T(n) * dxh - s1 - xhat(r, c) * s2);
            }
          }
        }
      });
}

template <typename T>
Var slice_rows(Tape<T>& t, Var a, std::size_t start, std::size_t count) {
  const Matrix<T>& av = t.value(a);
  if (start + count > av.rows()) throw ShapeError("slice_rows: out of range");
  Matrix<T> out(count, av.cols());
  std::copy(av.data() + start * av.cols(), av.data() + (start + count) * av.cols(), out.data());
  return t.push(std::move(out), t.needs_grad(a), [a, start](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad_of(self);
    Matrix<T>& d = tp.grad_mut(a);
    T* dst = d.data() + start * d.cols();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

template <typename T>
Var slice_cols(Tape<T>& t, Var a, std::size_t start, std::size_t count) {
  const Matrix<T>& av = t.value(a);
  if (start + count > av.cols()) throw ShapeError("slice_cols: out of range");
  Matrix<T> out(av.rows(), count);
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = av(r, start + c);
  return t.push(std::move(out), t.needs_grad(a), [a, start](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad_of(self);
    Matrix<T>& d = tp.grad_mut(a);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) d(r, start + c) += g(r, c);
  });
}

/// Stack operands vertically (all share a column count).
template <typename T>
Var vstack(Tape<T>& t, std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("vstack: no operands");
  const std::size_t cols = t.value(xs[0]).cols();
  std::size_t rows = 0;
  bool ng = false;
  for (Var v : xs) {
    if (t.value(v).cols() != cols) throw ShapeError("vstack: column mismatch");
    rows += t.value(v).rows();
    ng = ng || t.needs_grad(v);
  }
  Matrix<T> out(rows, cols);
  std::size_t off = 0;
  for (Var v : xs) {
    const Matrix<T>& m = t.value(v);
    std::copy(m.data(), m.data() + m.size(), out.data() + off);
    off += m.size();
  }
  std::vector<Var> ids(xs.begin(), xs.end());
  return t.push(std::move(out), ng, [ids](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad_of(self);
    std::size_t off = 0;
    for (Var v : ids) {
      const std::size_t n = tp.value(v).size();
      if (tp.needs_grad(v)) {
        Matrix<T>& d = tp.grad_mut(v);
        for (std::size_t i = 0; i < n; ++i) d[i] += g[off + i];
      }
      off += n;
    }
  });
}

/// Concatenate operands horizontally (all share a row count).
template <typename T>
Var hstack(Tape<T>& t, std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("hstack: no operands");
  const std::size_t rows = t.value(xs[0]).rows();
  std::size_t cols = 0;
  bool ng = false;
  for (Var v : xs) {
    if (t.value(v).rows() != rows) throw ShapeError("hstack: row mismatch");
    cols += t.value(v).cols();
    ng = ng || t.needs_grad(v);
  }
  Matrix<T> out(rows, cols);
  std::size_t off = 0;
  for (Var v : xs) {
    const Matrix<T>& m = t.value(v);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < m.cols(); ++c) out(r, off + c) = m(r, c);
    off += m.cols();
  }
  std::vector<Var> ids(xs.begin(), xs.end());
  return t.push(std::move(out), ng, [ids](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad_of(self);
    std::size_t off = 0;
    for (Var v : ids) {
      const std::size_t w = tp.value(v).cols();
      if (tp.needs_grad(v)) {
        Matrix<T>& d = tp.grad_mut(v);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) d(r, c) += g(r, off + c);
      }
      off += w;
    }
  });
}

/// Subtract `factor` times each row's mean from that row.
template <typename T>
Var center_rows(Tape<T>& t, Var a, T factor = T(1)) {
  Matrix<T> out = t.value(a);
  const std::size_t n = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    T mu{};
    for (std::size_t c = 0; c < n; ++c) mu += out(r, c);
    mu = factor * mu / T(n);
    for (std::size_t c = 0; c < n; ++c) out(r, c) -= mu;
  }
  return t.push(std::move(out), t.needs_grad(a), [a, factor](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad_of(self);
    Matrix<T>& d = tp.grad_mut(a);
    const std::size_t n = g.cols();
    for (std::size_t r = 0; r < g.rows(); ++r) {
      T mu{};
      for (std::size_t c = 0; c < n; ++c) mu += g(r, c);
      mu = factor * mu / T(n);
      for (std::size_t c = 0; c < n; ++c) d(r, c) += g(r, c) - mu;
    }
  });
}

/// Sum of squared off-diagonal entries of a square matrix, as a 1x1 node.
template <typename T>
Var offdiag_sq_sum(Tape<T>& t, Var a) {
  const Matrix<T>& av = t.value(a);
  if (av.rows() != av.cols()) throw ShapeError("offdiag_sq_sum: matrix must be square");
  T s{};
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j)
      if (i != j) s += av(i, j) * av(i, j);
  return t.push(Matrix<T>(1, 1, s), t.needs_grad(a), [a](Tape<T>& tp, std::size_t self) {
    const T g = tp.grad_of(self)[0];
    const Matrix<T>& x = tp.value(a);
    Matrix<T>& d = tp.grad_mut(a);
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j)
        if (i != j) d(i, j) += T(2) * x(i, j) * g;
  });
}

template <typename T>
Var sum(Tape<T>& t, Var a) {
  const Matrix<T>& av = t.value(a);
  T s{};
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i];
  return t.push(Matrix<T>(1, 1, s), t.needs_grad(a), [a](Tape<T>& tp, std::size_t self) {
    const T g = tp.grad_of(self)[0];
    Matrix<T>& d = tp.grad_mut(a);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g;
  });
}

/// Column means: 1 x cols.
template <typename T>
Var mean_rows(Tape<T>& t, Var a) {
  const Matrix<T>& av = t.value(a);
  if (av.rows() == 0) throw ShapeError("mean_rows: empty input");
  Matrix<T> out(1, av.cols());
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < av.cols(); ++c) out[c] += av(r, c);
  const T inv = T(1) / T(av.rows());
  for (std::size_t c = 0; c < av.cols(); ++c) out[c] *= inv;
  return t.push(std::move(out), t.needs_grad(a), [a](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad_of(self);
    Matrix<T>& d = tp.grad_mut(a);
    const T inv = T(1) / T(d.rows());
    for (std::size_t r = 0; r < d.rows(); ++r)
      for (std::size_t c = 0; c < d.cols(); ++c) d(r, c) += g[c] * inv;
  });
}

template <typename T>
Var element(Tape<T>& t, Var a, std::size_t r, std::size_t c) {
  const Matrix<T>& av = t.value(a);
  if (r >= av.rows() || c >= av.cols()) throw ShapeError("element: out of range");
  return t.push(Matrix<T>(1, 1, av(r, c)), t.needs_grad(a), [a, r, c](Tape<T>& tp, std::size_t self) {
    tp.grad_mut(a)(r, c) += tp.grad_of(self)[0];
  });
}

/// Mean binary cross-entropy of probabilities `p` (1 x D) against constant
/// 0/1 targets, with probabilities clamped to [clamp, 1 - clamp].
template <typename T>
Var bce_mean(Tape<T>& t, Var p, std::vector<T> target, T clamp) {
  const Matrix<T>& pv = t.value(p);
  if (pv.size() != target.size()) throw ShapeError("bce_mean: target width mismatch");
  const T lo = clamp, hi = T(1) - clamp;
  T loss{};
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const T q = std::clamp(pv[i], lo, hi);
    loss -= target[i] * std::log(q) + (T(1) - target[i]) * std::log(T(1) - q);
  }
  loss /= T(pv.size());
  return t.push(Matrix<T>(1, 1, loss), t.needs_grad(p),
                [p, target = std::move(target), lo, hi](Tape<T>& tp, std::size_t self) {
                  const T g = tp.grad_of(self)[0];
                  const Matrix<T>& pv = tp.value(p);
                  Matrix<T>& d = tp.grad_mut(p);
                  const T n = T(pv.size());
                  for (std::size_t i = 0; i < pv.size(); ++i) {
                    if (pv[i] < lo || pv[i] > hi) continue;
                    const T q = pv[i];
                    d[i] += -g / n * (target[i] / q - (T(1) - target[i]) / (T(1) - q));
                  }
                });
}

/// Cross-entropy -log p[cls] with the probability clamped to [clamp, 1 - clamp].
template <typename T>
Var cross_entropy(Tape<T>& t, Var p, std::size_t cls, T clamp) {
  const Matrix<T>& pv = t.value(p);
  if (cls >= pv.size()) throw ShapeError("cross_entropy: class out of range");
  const T lo = clamp, hi = T(1) - clamp;
  const T q = std::clamp(pv[cls], lo, hi);
  return t.push(Matrix<T>(1, 1, -std::log(q)), t.needs_grad(p),
                [p, cls, lo, hi](Tape<T>& tp, std::size_t self) {
                  const T g = tp.grad_of(self)[0];
                  const T q = tp.value(p)[cls];
                  if (q < lo || q > hi) return;
                  tp.grad_mut(p)[cls] += -g / q;
                });
}

}  // namespace flexcare::ad
