#pragma once

// Dense matrices, row-independent kernels, and a reverse-mode tape over
// matrix-valued nodes. Every kernel computes each output row with the same
// accumulation order whether it is given one row or many, so incremental
// decoding reproduces the full-sequence forward pass bit for bit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vqalab/common.hpp"

namespace vqalab {

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

// ----------------------------- kernels -----------------------------

namespace kern {

inline void require(bool ok, const char* what) {
  if (!ok) throw InternalError(std::string("shape mismatch in ") + what);
}

/// C = A B
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols == b.rows, "matmul");
  Matrix c(a.rows, b.cols);
  const std::size_t m = b.cols;
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* ci = c.data.data() + i * m;
    const double* ai = a.data.data() + i * a.cols;
    for (std::size_t p = 0; p < a.cols; ++p) {
      const double av = ai[p];
      const double* bp = b.data.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
  return c;
}

/// C = A B^T
inline Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  require(a.cols == b.cols, "matmul_bt");
  Matrix c(a.rows, b.rows);
  const std::size_t k = a.cols;
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ai = a.data.data() + i * k;
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* bj = b.data.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c(i, j) = s;
    }
  }
  return c;
}

/// C += A^T B
inline void matmul_at_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  require(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols, "matmul_at");
  const std::size_t m = b.cols;
  for (std::size_t p = 0; p < a.rows; ++p) {
    const double* ap = a.data.data() + p * a.cols;
    const double* bp = b.data.data() + p * m;
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c.data.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), "add");
  Matrix c = a;
  for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.data[i];
  return c;
}

inline void add_inplace(Matrix& a, const Matrix& b) {
  require(a.same_shape(b), "add_inplace");
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

inline Matrix scale(const Matrix& a, double s) {
  Matrix c = a;
  for (double& v : c.data) v *= s;
  return c;
}

inline constexpr double kNormEps = 1e-6;

inline void rmsnorm_row(std::span<const double> x, std::span<double> y) {
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double r = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + kNormEps);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * r;
}

inline Matrix rmsnorm(const Matrix& x) {
  Matrix y(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) rmsnorm_row(x.row(r), y.row(r));
  return y;
}

inline Matrix relu(const Matrix& x) {
  Matrix y = x;
  for (double& v : y.data) v = v > 0.0 ? v : 0.0;
  return y;
}

inline void log_softmax_row(std::span<const double> x, std::span<double> y) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : x) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : x) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] - lse;
}

inline Matrix log_softmax(const Matrix& x) {
  Matrix y(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) log_softmax_row(x.row(r), y.row(r));
  return y;
}

/// Causal multi-head attention for query row t against key/value rows [0, t].
/// Writes the attention weights per head into probs (heads x (t+1)) when given.
inline void attend_row(std::span<const double> q, const Matrix& k, const Matrix& v, std::size_t t,
                       std::size_t heads, std::span<double> out, double* probs) {
  const std::size_t d = q.size();
  const std::size_t dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> p(t + 1);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s <= t; ++s) {
      const double* ks = k.data.data() + s * d + off;
      double dot = 0.0;
      for (std::size_t j = 0; j < dh; ++j) dot += q[off + j] * ks[j];
      p[s] = dot * inv;
      mx = std::max(mx, p[s]);
    }
    double z = 0.0;
    for (std::size_t s = 0; s <= t; ++s) {
      p[s] = std::exp(p[s] - mx);
      z += p[s];
    }
    for (std::size_t j = 0; j < dh; ++j) out[off + j] = 0.0;
    for (std::size_t s = 0; s <= t; ++s) {
      p[s] /= z;
      const double* vs = v.data.data() + s * d + off;
      for (std::size_t j = 0; j < dh; ++j) out[off + j] += p[s] * vs[j];
    }
    if (probs) std::copy(p.begin(), p.end(), probs + h * (t + 1));
  }
}

}  // namespace kern

// ----------------------------- tape -----------------------------

class Tape;

/// Handle to a node recorded on a specific tape.
struct Var {
  const Tape* tape = nullptr;
  std::size_t id = 0;
};

class Tape {
 public:
  using BackFn = std::function<void(Tape&, const Matrix& out_value, const Matrix& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
  }
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  Var push(Matrix value, bool needs_grad, BackFn back) {
    nodes_.push_back(Node{std::move(value), Matrix{}, std::move(back), needs_grad});
    return Var{this, nodes_.size() - 1};
  }

  /// True if any of the vars requires a gradient.
  bool any_needs_grad(std::initializer_list<Var> vs) const {
    for (Var v : vs)
      if (node(v).needs_grad) return true;
    return false;
  }
  bool needs_grad(Var v) const { return node(v).needs_grad; }

  const Matrix& value(Var v) const { return node(v).value; }

  /// Gradient after backward(); an all-zero matrix for nodes that received none.
  Matrix grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.size() == 0) return Matrix(n.value.rows, n.value.cols);
    return n.grad;
  }

  /// Accumulates into a node's gradient buffer (no-op for nodes without grad).
  void accumulate(Var v, const Matrix& g) {
    Node& n = node(v);
    if (!n.needs_grad) return;
    buffer(n);
    kern::add_inplace(n.grad, g);
  }
  Matrix& grad_buffer(Var v) { return buffer(node(v)); }

  /// Reverse sweep from a 1x1 objective; each node is visited once, in
  /// reverse recording order.
  void backward(Var objective) {
    const Node& obj = node(objective);
    if (obj.value.rows != 1 || obj.value.cols != 1)
      throw InternalError("backward requires a scalar (1x1) objective");
    if (backward_done_) throw InternalError("backward already run on this tape");
    backward_done_ = true;
    if (!obj.needs_grad) return;
    Node& o = node(objective);
    buffer(o);
    o.grad.data[0] = 1.0;
    for (std::size_t i = objective.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !n.back || n.grad.size() == 0) continue;
      n.back(*this, n.value, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    BackFn back;
    bool needs_grad = false;
  };

  const Node& node(Var v) const {
    if (v.tape != this || v.id >= nodes_.size())
      throw InternalError("variable was not recorded on this tape");
    return nodes_[v.id];
  }
  Node& node(Var v) {
    if (v.tape != this || v.id >= nodes_.size())
      throw InternalError("variable was not recorded on this tape");
    return nodes_[v.id];
  }
  static Matrix& buffer(Node& n) {
    if (n.grad.size() == 0 && n.value.size() != 0) n.grad = Matrix(n.value.rows, n.value.cols);
    return n.grad;
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ----------------------------- ops -----------------------------

namespace ad {

inline Tape& tape_of(Var v) { return *const_cast<Tape*>(v.tape); }

inline Var matmul(Var a, Var b) {
  Tape& t = tape_of(a);
  Matrix out = kern::matmul(t.value(a), t.value(b));
  return t.push(std::move(out), t.any_needs_grad({a, b}), [a, b](Tape& t, const Matrix&, const Matrix& g) {
    if (t.needs_grad(a)) t.accumulate(a, kern::matmul_bt(g, t.value(b)));
    if (t.needs_grad(b)) kern::matmul_at_acc(t.value(a), g, t.grad_buffer(b));
  });
}

/// a b^T
inline Var matmul_bt(Var a, Var b) {
  Tape& t = tape_of(a);
  Matrix out = kern::matmul_bt(t.value(a), t.value(b));
  return t.push(std::move(out), t.any_needs_grad({a, b}), [a, b](Tape& t, const Matrix&, const Matrix& g) {
    if (t.needs_grad(a)) t.accumulate(a, kern::matmul(g, t.value(b)));
    if (t.needs_grad(b)) kern::matmul_at_acc(g, t.value(a), t.grad_buffer(b));
  });
}

inline Var add(Var a, Var b) {
  Tape& t = tape_of(a);
  Matrix out = kern::add(t.value(a), t.value(b));
  return t.push(std::move(out), t.any_needs_grad({a, b}), [a, b](Tape& t, const Matrix&, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = tape_of(a);
  kern::require(t.value(a).same_shape(t.value(b)), "sub");
  Matrix out = t.value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= t.value(b).data[i];
  return t.push(std::move(out), t.any_needs_grad({a, b}), [a, b](Tape& t, const Matrix&, const Matrix& g) {
    t.accumulate(a, g);
    if (t.needs_grad(b)) t.accumulate(b, kern::scale(g, -1.0));
  });
}

inline Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  return t.push(kern::scale(t.value(a), s), t.needs_grad(a),
                [a, s](Tape& t, const Matrix&, const Matrix& g) { t.accumulate(a, kern::scale(g, s)); });
}

/// a + c for a constant matrix c.
inline Var add_constant(Var a, const Matrix& c) {
  Tape& t = tape_of(a);
  return t.push(kern::add(t.value(a), c), t.needs_grad(a),
                [a](Tape& t, const Matrix&, const Matrix& g) { t.accumulate(a, g); });
}

inline Var add_scalar(Var a, double c) {
  Tape& t = tape_of(a);
  Matrix out = t.value(a);
  for (double& v : out.data) v += c;
  return t.push(std::move(out), t.needs_grad(a),
                [a](Tape& t, const Matrix&, const Matrix& g) { t.accumulate(a, g); });
}

inline Var exp(Var a) {
  Tape& t = tape_of(a);
  Matrix out = t.value(a);
  for (double& v : out.data) v = std::exp(v);
  return t.push(std::move(out), t.needs_grad(a), [a](Tape& t, const Matrix& y, const Matrix& g) {
    Matrix d = g;
    for (std::size_t i = 0; i < d.size(); ++i) d.data[i] *= y.data[i];
    t.accumulate(a, d);
  });
}

inline Var relu(Var a) {
  Tape& t = tape_of(a);
  return t.push(kern::relu(t.value(a)), t.needs_grad(a), [a](Tape& t, const Matrix&, const Matrix& g) {
    Matrix d = g;
    const Matrix& x = t.value(a);
    for (std::size_t i = 0; i < d.size(); ++i)
      if (!(x.data[i] > 0.0)) d.data[i] = 0.0;
    t.accumulate(a, d);
  });
}

/// Elementwise clamp to [lo, hi]; the gradient passes only inside the interval.
inline Var clamp(Var a, double lo, double hi) {
  Tape& t = tape_of(a);
  Matrix out = t.value(a);
  for (double& v : out.data) v = std::clamp(v, lo, hi);
  return t.push(std::move(out), t.needs_grad(a), [a, lo, hi](Tape& t, const Matrix&, const Matrix& g) {
    Matrix d = g;
    const Matrix& x = t.value(a);
    for (std::size_t i = 0; i < d.size(); ++i)
      if (x.data[i] < lo || x.data[i] > hi) d.data[i] = 0.0;
    t.accumulate(a, d);
  });
}

/// Elementwise minimum; ties route the gradient to `a`.
inline Var minimum(Var a, Var b) {
  Tape& t = tape_of(a);
  const Matrix& x = t.value(a);
  const Matrix& y = t.value(b);
  kern::require(x.same_shape(y), "minimum");
  Matrix out(x.rows, x.cols);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = std::min(x.data[i], y.data[i]);
  return t.push(std::move(out), t.any_needs_grad({a, b}), [a, b](Tape& t, const Matrix&, const Matrix& g) {
    const Matrix& x = t.value(a);
    const Matrix& y = t.value(b);
    Matrix ga(g.rows, g.cols), gb(g.rows, g.cols);
    for (std::size_t i = 0; i < g.size(); ++i) (x.data[i] <= y.data[i] ? ga : gb).data[i] = g.data[i];
    t.accumulate(a, ga);
    t.accumulate(b, gb);
  });
}

inline Var sum(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : t.value(a).data) s += v;
  return t.push(Matrix(1, 1, s), t.needs_grad(a), [a](Tape& t, const Matrix&, const Matrix& g) {
    const Matrix& x = t.value(a);
    t.accumulate(a, Matrix(x.rows, x.cols, g.data[0]));
  });
}

inline Var mean(Var a) {
  Tape& t = tape_of(a);
  const double n = static_cast<double>(t.value(a).size());
  if (n == 0) throw InternalError("mean of an empty matrix");
  return scale(sum(a), 1.0 / n);
}

/// Sum of 1x1 nodes, accumulated left to right.
inline Var add_all(std::span<const Var> xs) {
  if (xs.empty()) throw InternalError("add_all of nothing");
  Var acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

/// Rows `idx[i]` of `table`.
inline Var gather_rows(Var table, std::vector<int> idx) {
  Tape& t = tape_of(table);
  const Matrix& tb = t.value(table);
  Matrix out(idx.size(), tb.cols);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= tb.rows)
      throw InternalError("gather_rows index out of range");
    std::copy_n(tb.row(static_cast<std::size_t>(idx[i])).begin(), tb.cols, out.row(i).begin());
  }
  return t.push(std::move(out), t.needs_grad(table),
                [table, idx = std::move(idx)](Tape& t, const Matrix&, const Matrix& g) {
                  Matrix& gt = t.grad_buffer(table);
                  for (std::size_t i = 0; i < idx.size(); ++i) {
                    auto dst = gt.row(static_cast<std::size_t>(idx[i]));
                    auto src = g.row(i);
                    for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
                  }
                });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  Tape& t = tape_of(a);
  const Matrix& x = t.value(a);
  if (begin > end || end > x.rows) throw InternalError("slice_rows out of range");
  Matrix out(end - begin, x.cols);
  std::copy(x.data.begin() + static_cast<std::ptrdiff_t>(begin * x.cols),
            x.data.begin() + static_cast<std::ptrdiff_t>(end * x.cols), out.data.begin());
  return t.push(std::move(out), t.needs_grad(a), [a, begin](Tape& t, const Matrix&, const Matrix& g) {
    Matrix& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data[begin * g.cols + i] += g.data[i];
  });
}

/// Entry (i, idx[i]) of each row, as an n x 1 column.
inline Var pick(Var a, std::vector<int> idx) {
  Tape& t = tape_of(a);
  const Matrix& x = t.value(a);
  if (idx.size() != x.rows) throw InternalError("pick: index count must equal row count");
  Matrix out(x.rows, 1);
  for (std::size_t i = 0; i < x.rows; ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= x.cols)
      throw InternalError("pick index out of range");
    out.data[i] = x(i, static_cast<std::size_t>(idx[i]));
  }
  return t.push(std::move(out), t.needs_grad(a), [a, idx = std::move(idx)](Tape& t, const Matrix&, const Matrix& g) {
    Matrix& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < idx.size(); ++i) ga(i, static_cast<std::size_t>(idx[i])) += g.data[i];
  });
}

inline Var rmsnorm(Var a) {
  Tape& t = tape_of(a);
  return t.push(kern::rmsnorm(t.value(a)), t.needs_grad(a), [a](Tape& t, const Matrix&, const Matrix& g) {
    const Matrix& x = t.value(a);
    Matrix d(x.rows, x.cols);
    const double n = static_cast<double>(x.cols);
    for (std::size_t r = 0; r < x.rows; ++r) {
      auto xr = x.row(r);
      auto gr = g.row(r);
      double ss = 0.0, gx = 0.0;
      for (std::size_t j = 0; j < x.cols; ++j) {
        ss += xr[j] * xr[j];
        gx += gr[j] * xr[j];
      }
      const double inv = 1.0 / std::sqrt(ss / n + kern::kNormEps);
      const double c = inv * inv * inv * gx / n;
      for (std::size_t j = 0; j < x.cols; ++j) d(r, j) = inv * gr[j] - c * xr[j];
    }
    t.accumulate(a, d);
  });
}

inline Var log_softmax(Var a) {
  Tape& t = tape_of(a);
  Matrix out = kern::log_softmax(t.value(a));
  return t.push(std::move(out), t.needs_grad(a), [a](Tape& t, const Matrix& y, const Matrix& g) {
    Matrix d = g;
    for (std::size_t r = 0; r < y.rows; ++r) {
      double gs = 0.0;
      for (double v : g.row(r)) gs += v;
      for (std::size_t j = 0; j < y.cols; ++j) d(r, j) -= std::exp(y(r, j)) * gs;
    }
    t.accumulate(a, d);
  });
}

/// Causal multi-head self-attention over rows of q, k, v (each T x d).
inline Var causal_attention(Var q, Var k, Var v, std::size_t heads) {
  Tape& t = tape_of(q);
  const Matrix& Q = t.value(q);
  const Matrix& K = t.value(k);
  const Matrix& V = t.value(v);
  kern::require(Q.same_shape(K) && Q.same_shape(V) && Q.cols % heads == 0, "causal_attention");
  const std::size_t T = Q.rows;
  // probs[t] holds heads x (t+1) weights.
  std::vector<std::vector<double>> probs(T);
  Matrix out(T, Q.cols);
  for (std::size_t r = 0; r < T; ++r) {
    probs[r].resize(heads * (r + 1));
    kern::attend_row(Q.row(r), K, V, r, heads, out.row(r), probs[r].data());
  }
  return t.push(std::move(out), t.any_needs_grad({q, k, v}),
                [q, k, v, heads, probs = std::move(probs)](Tape& t, const Matrix&, const Matrix& g) {
                  const Matrix& Q = t.value(q);
                  const Matrix& K = t.value(k);
                  const Matrix& V = t.value(v);
                  const std::size_t T = Q.rows, d = Q.cols, dh = d / heads;
                  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
                  Matrix dq(T, d), dk(T, d), dv(T, d);
                  std::vector<double> dp;
                  for (std::size_t r = 0; r < T; ++r) {
                    dp.assign(r + 1, 0.0);
                    for (std::size_t h = 0; h < heads; ++h) {
                      const std::size_t off = h * dh;
                      const double* p = probs[r].data() + h * (r + 1);
                      const double* gr = g.data.data() + r * d + off;
                      double dot = 0.0;
                      for (std::size_t s = 0; s <= r; ++s) {
                        const double* vs = V.data.data() + s * d + off;
                        double* dvs = dv.data.data() + s * d + off;
                        double acc = 0.0;
                        for (std::size_t j = 0; j < dh; ++j) {
                          acc += gr[j] * vs[j];
                          dvs[j] += p[s] * gr[j];
                        }
                        dp[s] = acc;
                        dot += acc * p[s];
                      }
                      const double* qr = Q.data.data() + r * d + off;
                      double* dqr = dq.data.data() + r * d + off;
                      for (std::size_t s = 0; s <= r; ++s) {
                        const double ds = p[s] * (dp[s] - dot) * inv;
                        if (ds == 0.0) continue;
                        const double* ks = K.data.data() + s * d + off;
                        double* dks = dk.data.data() + s * d + off;
                        for (std::size_t j = 0; j < dh; ++j) {
                          dqr[j] += ds * ks[j];
                          dks[j] += ds * qr[j];
                        }
                      }
                    }
                  }
                  t.accumulate(q, dq);
                  t.accumulate(k, dk);
                  t.accumulate(v, dv);
                });
}

}  // namespace ad
}  // namespace vqalab
