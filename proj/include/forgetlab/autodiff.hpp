#pragma once

// Tensor-level reverse-mode autodiff. Values are dense row-major arrays of at
// most two dimensions; every op appends one node to a Tape, and backward walks
// the tape in reverse insertion order, which is a valid topological order.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "forgetlab/errors.hpp"

namespace forgetlab::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <std::floating_point T>
struct Array {
  Shape shape;
  std::vector<T> values;

  Array() = default;
  explicit Array(Shape s, T fill = T(0)) : shape(std::move(s)), values(numel(shape), fill) {}
  Array(Shape s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
    if (numel(shape) != values.size())
      throw UsageError("array shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
  }

  std::size_t size() const { return values.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? (shape.empty() ? 1 : shape[0]) : shape[1]; }
  T& at(std::size_t r, std::size_t c) { return values[r * shape[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return values[r * shape[1] + c]; }

  bool operator==(const Array&) const = default;
};

template <std::floating_point To, std::floating_point From>
Array<To> cast(const Array<From>& a) {
  Array<To> out;
  out.shape = a.shape;
  out.values.assign(a.values.begin(), a.values.end());
  return out;
}

template <std::floating_point T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

enum class OpKind {
  leaf,
  matmul,
  add,
  sub,
  scale,
  gelu,
  layernorm,
  embedding,
  attention,
  cross_entropy,
  masked_mean,
  sum,
  sum_squares,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::scale: return "scale";
    case OpKind::gelu: return "gelu";
    case OpKind::layernorm: return "layernorm";
    case OpKind::embedding: return "embedding";
    case OpKind::attention: return "attention";
    case OpKind::cross_entropy: return "softmax-cross-entropy";
    case OpKind::masked_mean: return "masked-mean";
    case OpKind::sum: return "sum";
    case OpKind::sum_squares: return "sum-squares";
  }
  return "?";
}

template <std::floating_point T>
class Tape;

template <std::floating_point T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Array<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape; }
};

template <std::floating_point T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  struct Node {
    OpKind kind = OpKind::leaf;
    Array<T> value;
    std::vector<T> grad;
    std::vector<std::size_t> inputs;
    Backward backward;
    bool needs_grad = false;
  };

  // record=false builds values only: no closures, no caches, no gradients.
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Array<T> value) { return push_leaf(std::move(value), false); }
  Var<T> parameter(Array<T> value) { return push_leaf(std::move(value), record_); }

  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  bool any_needs_grad(std::initializer_list<Var<T>> vars) const {
    if (!record_) return false;
    return std::any_of(vars.begin(), vars.end(), [&](const Var<T>& v) { return nodes_[v.id].needs_grad; });
  }

  const Array<T>& value(Var<T> v) const {
    check_owned(v);
    return nodes_[v.id].value;
  }
  const Array<T>& value(std::size_t id) const { return nodes_[id].value; }

  // Appends an op node. The backward closure is dropped when no input needs a gradient.
  Var<T> push(OpKind kind, Array<T> value, std::vector<std::size_t> inputs, Backward backward) {
    if (!all_finite<T>(value.values)) throw NumericalError(std::string("non-finite output in ") + op_name(kind));
    Node n;
    n.kind = kind;
    n.value = std::move(value);
    n.needs_grad = record_ && std::any_of(inputs.begin(), inputs.end(),
                                          [&](std::size_t i) { return nodes_[i].needs_grad; });
    if (n.needs_grad) n.backward = std::move(backward);
    n.inputs = std::move(inputs);
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  // Output gradient of a node during backward (empty when nothing flowed into it).
  const std::vector<T>& grad_of(std::size_t id) const { return nodes_[id].grad; }

  // Accumulate-target for an input's gradient; null when the input does not need one.
  T* grad_sink(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return nullptr;
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad.data();
  }

  void backward(Var<T> loss) {
    if (nodes_.empty()) throw UsageError("backward called before any forward op");
    check_owned(loss);
    if (!record_) throw UsageError("backward on a non-recording tape");
    if (backward_done_) throw UsageError("backward already ran on this tape");
    if (nodes_[loss.id].value.size() != 1) throw UsageError("backward requires a scalar loss");
    backward_done_ = true;
    if (!nodes_[loss.id].needs_grad) return;
    nodes_[loss.id].grad.assign(1, T(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  // Gradient of a leaf after backward; exact zeros when the leaf did not influence the loss.
  Array<T> gradient(Var<T> v) const {
    check_owned(v);
    const Node& n = nodes_[v.id];
    Array<T> g(n.value.shape);
    if (!n.grad.empty()) g.values = n.grad;
    return g;
  }

 private:
  Var<T> push_leaf(Array<T> value, bool needs_grad) {
    if (!all_finite<T>(value.values)) throw NumericalError("non-finite leaf value");
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  void check_owned(Var<T> v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw UsageError("variable does not belong to this tape");
  }

  bool record_;
  bool backward_done_ = false;
  std::deque<Node> nodes_;
};

namespace detail {

// C[m,n] += A[m,k] * B[k,n], index-ascending accumulation.
template <class T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

template <class T>
std::vector<T> transpose(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

inline void check_2d(const Shape& s, const char* op) {
  if (s.size() != 2) throw UsageError(std::string(op) + ": expected a 2-d array, got " + shape_str(s));
}

}  // namespace detail


template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& tape = *a.tape;
  const Array<T>& av = a.value();
  const Array<T>& bv = b.value();
  detail::check_2d(av.shape, "matmul");
  detail::check_2d(bv.shape, "matmul");
  const std::size_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  if (bv.shape[0] != k)
    throw UsageError("matmul: shape mismatch " + shape_str(av.shape) + " x " + shape_str(bv.shape));
  Array<T> out({m, n});
  detail::gemm_acc(av.values.data(), bv.values.data(), out.values.data(), m, k, n);
  const std::size_t ia = a.id, ib = b.id;
  return tape.push(OpKind::matmul, std::move(out), {ia, ib}, [=](Tape<T>& tp, std::size_t self) {
    const T* g = tp.grad_of(self).data();
    if (T* ga = tp.grad_sink(ia)) {
      // dA = dC * B^T
      const std::vector<T> bt = detail::transpose(tp.value(ib).values.data(), k, n);
      detail::gemm_acc(g, bt.data(), ga, m, n, k);
    }
    if (T* gb = tp.grad_sink(ib)) {
      // dB = A^T * dC
      const std::vector<T> at = detail::transpose(tp.value(ia).values.data(), m, k);
      detail::gemm_acc(at.data(), g, gb, k, m, n);
    }
  });
}

// Elementwise add; b may also be a row vector [n] broadcast over the rows of a [m,n].
template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& tape = *a.tape;
  const Array<T>& av = a.value();
  const Array<T>& bv = b.value();
  const bool same = av.shape == bv.shape;
  const bool bcast = !same && av.shape.size() == 2 && bv.shape.size() == 1 && bv.shape[0] == av.shape[1];
  if (!same && !bcast) throw UsageError("add: shape mismatch " + shape_str(av.shape) + " + " + shape_str(bv.shape));
  Array<T> out = av;
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += bv.values[i];
  } else {
    const std::size_t n = bv.shape[0];
    for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += bv.values[i % n];
  }
  const std::size_t ia = a.id, ib = b.id, total = av.size(), nb = bv.size();
  return tape.push(OpKind::add, std::move(out), {ia, ib}, [=](Tape<T>& tp, std::size_t self) {
    const T* g = tp.grad_of(self).data();
    if (T* ga = tp.grad_sink(ia))
      for (std::size_t i = 0; i < total; ++i) ga[i] += g[i];
    if (T* gb = tp.grad_sink(ib))
      for (std::size_t i = 0; i < total; ++i) gb[i % nb] += g[i];
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  Tape<T>& tape = *a.tape;
  const Array<T>& av = a.value();
  const Array<T>& bv = b.value();
  if (av.shape != bv.shape) throw UsageError("sub: shape mismatch " + shape_str(av.shape) + " - " + shape_str(bv.shape));
  Array<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] -= bv.values[i];
  const std::size_t ia = a.id, ib = b.id, total = av.size();
  return tape.push(OpKind::sub, std::move(out), {ia, ib}, [=](Tape<T>& tp, std::size_t self) {
    const T* g = tp.grad_of(self).data();
    if (T* ga = tp.grad_sink(ia))
      for (std::size_t i = 0; i < total; ++i) ga[i] += g[i];
    if (T* gb = tp.grad_sink(ib))
      for (std::size_t i = 0; i < total; ++i) gb[i] -= g[i];
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Array<T> out = a.value();
  for (T& x : out.values) x *= s;
  const std::size_t ia = a.id, total = out.size();
  return a.tape->push(OpKind::scale, std::move(out), {ia}, [=](Tape<T>& tp, std::size_t self) {
    const T* g = tp.grad_of(self).data();
    if (T* ga = tp.grad_sink(ia))
      for (std::size_t i = 0; i < total; ++i) ga[i] += s * g[i];
  });
}

// Exact GELU: x * Phi(x).
template <class T>
Var<T> gelu(Var<T> a) {
  const Array<T>& av = a.value();
  Array<T> out(av.shape);
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T x = av.values[i];
    out.values[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  }
  const std::size_t ia = a.id, total = av.size();
  return a.tape->push(OpKind::gelu, std::move(out), {ia}, [=](Tape<T>& tp, std::size_t self) {
    T* ga = tp.grad_sink(ia);
    if (!ga) return;
    const T* g = tp.grad_of(self).data();
    const T* x = tp.value(ia).values.data();
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    for (std::size_t i = 0; i < total; ++i) {
      const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
      ga[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

// Row-wise layer normalization with gain and bias, eps inside the square root.
template <class T>
Var<T> layernorm(Var<T> x, Var<T> gain, Var<T> bias) {
  const Array<T>& xv = x.value();
  detail::check_2d(xv.shape, "layernorm");
  const std::size_t m = xv.shape[0], d = xv.shape[1];
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
    throw UsageError("layernorm: gain/bias must have shape [" + std::to_string(d) + "]");
  const T* gv = gain.value().values.data();
  const T* bv = bias.value().values.data();
  Array<T> out({m, d});
  std::vector<T> xhat(m * d), rstd(m);
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = xv.values.data() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(d);
    rstd[r] = T(1) / std::sqrt(var + T(kLayerNormEps));
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mean) * rstd[r];
      out.values[r * d + j] = gv[j] * xhat[r * d + j] + bv[j];
    }
  }
  Tape<T>& tape = *x.tape;
  const std::size_t ix = x.id, ig = gain.id, ib = bias.id;
  if (!tape.any_needs_grad({x, gain, bias})) return tape.push(OpKind::layernorm, std::move(out), {ix, ig, ib}, {});
  return tape.push(OpKind::layernorm, std::move(out), {ix, ig, ib},
                   [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& tp, std::size_t self) {
                     const T* g = tp.grad_of(self).data();
                     const T* gainv = tp.value(ig).values.data();
                     T* dg = tp.grad_sink(ig);
                     T* db = tp.grad_sink(ib);
                     T* dx = tp.grad_sink(ix);
                     for (std::size_t r = 0; r < m; ++r) {
                       const T* gr = g + r * d;
                       const T* xh = xhat.data() + r * d;
                       if (dg)
                         for (std::size_t j = 0; j < d; ++j) dg[j] += gr[j] * xh[j];
                       if (db)
                         for (std::size_t j = 0; j < d; ++j) db[j] += gr[j];
                       if (dx) {
                         T mean_dxh = 0, mean_dxh_xh = 0;
                         for (std::size_t j = 0; j < d; ++j) {
                           const T dxh = gr[j] * gainv[j];
                           mean_dxh += dxh;
                           mean_dxh_xh += dxh * xh[j];
                         }
                         mean_dxh /= T(d);
                         mean_dxh_xh /= T(d);
                         for (std::size_t j = 0; j < d; ++j) {
                           const T dxh = gr[j] * gainv[j];
                           dx[r * d + j] += rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                         }
                       }
                     }
                   });
}

// Gathers rows of table [V,d] by ids.
template <class T>
Var<T> embedding(Var<T> table, std::vector<int> ids) {
  const Array<T>& tv = table.value();
  detail::check_2d(tv.shape, "embedding");
  const std::size_t rows = tv.shape[0], d = tv.shape[1];
  Array<T> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows)
      throw UsageError("embedding: id " + std::to_string(ids[i]) + " out of range");
    std::copy_n(tv.values.data() + static_cast<std::size_t>(ids[i]) * d, d, out.values.data() + i * d);
  }
  const std::size_t it = table.id;
  return table.tape->push(OpKind::embedding, std::move(out), {it},
                          [=, ids = std::move(ids)](Tape<T>& tp, std::size_t self) {
                            T* gt = tp.grad_sink(it);
                            if (!gt) return;
                            const T* g = tp.grad_of(self).data();
                            for (std::size_t i = 0; i < ids.size(); ++i) {
                              T* row = gt + static_cast<std::size_t>(ids[i]) * d;
                              for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
                            }
                          });
}

// A contiguous run of rows that attend to each other (one packed sequence).
struct Segment {
  std::size_t start = 0;
  std::size_t length = 0;
};

// Multi-head causal self-attention over packed segments; q, k, v are [N, d].
template <class T>
Var<T> causal_attention(Var<T> q, Var<T> k, Var<T> v, std::vector<Segment> segments, std::size_t heads) {
  const Array<T>& qv = q.value();
  const Array<T>& kv = k.value();
  const Array<T>& vv = v.value();
  detail::check_2d(qv.shape, "attention");
  if (kv.shape != qv.shape || vv.shape != qv.shape) throw UsageError("attention: q/k/v shape mismatch");
  const std::size_t n = qv.shape[0], d = qv.shape[1];
  if (heads == 0 || d % heads != 0) throw UsageError("attention: head count must divide model width");
  std::size_t covered = 0;
  for (const Segment& s : segments) {
    if (s.start != covered) throw UsageError("attention: segments must tile the rows in order");
    covered += s.length;
  }
  if (covered != n) throw UsageError("attention: segments do not cover all rows");
  const std::size_t dh = d / heads;
  const T inv_scale = T(1) / std::sqrt(T(dh));

  // probs holds, per segment and head, the lower-triangular softmax rows.
  std::vector<std::size_t> offsets(segments.size());
  std::size_t total = 0;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    offsets[s] = total;
    total += heads * segments[s].length * segments[s].length;
  }
  std::vector<T> probs(total, T(0));
  Array<T> out({n, d});
  std::vector<T> scores;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const std::size_t base = segments[s].start, len = segments[s].length;
    for (std::size_t h = 0; h < heads; ++h) {
      T* P = probs.data() + offsets[s] + h * len * len;
      for (std::size_t i = 0; i < len; ++i) {
        const T* qi = qv.values.data() + (base + i) * d + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const T* kj = kv.values.data() + (base + j) * d + h * dh;
          T dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          P[i * len + j] = dot * inv_scale;
          mx = std::max(mx, P[i * len + j]);
        }
        T z = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          P[i * len + j] = std::exp(P[i * len + j] - mx);
          z += P[i * len + j];
        }
        T* oi = out.values.data() + (base + i) * d + h * dh;
        for (std::size_t j = 0; j <= i; ++j) {
          P[i * len + j] /= z;
          const T* vj = vv.values.data() + (base + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += P[i * len + j] * vj[c];
        }
      }
    }
  }
  Tape<T>& tape = *q.tape;
  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  if (!tape.any_needs_grad({q, k, v})) return tape.push(OpKind::attention, std::move(out), {iq, ik, iv}, {});
  return tape.push(
      OpKind::attention, std::move(out), {iq, ik, iv},
      [=, probs = std::move(probs), offsets = std::move(offsets), segments = std::move(segments)](Tape<T>& tp,
                                                                                                 std::size_t self) {
        const T* g = tp.grad_of(self).data();
        const T* qd = tp.value(iq).values.data();
        const T* kd = tp.value(ik).values.data();
        const T* vd = tp.value(iv).values.data();
        T* dq = tp.grad_sink(iq);
        T* dk = tp.grad_sink(ik);
        T* dv = tp.grad_sink(iv);
        std::vector<T> dp;
        for (std::size_t s = 0; s < segments.size(); ++s) {
          const std::size_t base = segments[s].start, len = segments[s].length;
          dp.assign(len, T(0));
          for (std::size_t h = 0; h < heads; ++h) {
            const T* P = probs.data() + offsets[s] + h * len * len;
            for (std::size_t i = 0; i < len; ++i) {
              const T* gi = g + (base + i) * d + h * dh;
              T weighted = 0;
              for (std::size_t j = 0; j <= i; ++j) {
                const T pij = P[i * len + j];
                const T* vj = vd + (base + j) * d + h * dh;
                T dot = 0;
                for (std::size_t c = 0; c < dh; ++c) dot += gi[c] * vj[c];
                dp[j] = dot;
                weighted += pij * dot;
                if (dv) {
                  T* dvj = dv + (base + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dvj[c] += pij * gi[c];
                }
              }
              const T* qi = qd + (base + i) * d + h * dh;
              for (std::size_t j = 0; j <= i; ++j) {
                const T ds = P[i * len + j] * (dp[j] - weighted) * inv_scale;
                if (dq) {
                  const T* kj = kd + (base + j) * d + h * dh;
                  T* dqi = dq + (base + i) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
                }
                if (dk) {
                  T* dkj = dk + (base + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

// Per-row softmax cross-entropy: logits [N,C], integer targets -> losses [N] (nats).
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, std::vector<int> targets) {
  const Array<T>& lv = logits.value();
  detail::check_2d(lv.shape, "softmax-cross-entropy");
  const std::size_t n = lv.shape[0], c = lv.shape[1];
  if (targets.size() != n) throw UsageError("softmax-cross-entropy: target count does not match rows");
  std::vector<T> probs(n * c);
  Array<T> out({n});
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= c)
      throw UsageError("softmax-cross-entropy: target out of range");
    const T* row = lv.values.data() + r * c;
    const T mx = *std::max_element(row, row + c);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[r * c + j] = std::exp(row[j] - mx);
      z += probs[r * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
    out.values[r] = -(row[targets[r]] - mx - std::log(z));
  }
  const std::size_t il = logits.id;
  Tape<T>& tape = *logits.tape;
  if (!tape.any_needs_grad({logits})) return tape.push(OpKind::cross_entropy, std::move(out), {il}, {});
  return tape.push(OpKind::cross_entropy, std::move(out), {il},
                   [=, probs = std::move(probs), targets = std::move(targets)](Tape<T>& tp, std::size_t self) {
                     T* gl = tp.grad_sink(il);
                     if (!gl) return;
                     const T* g = tp.grad_of(self).data();
                     for (std::size_t r = 0; r < n; ++r) {
                       if (g[r] == T(0)) continue;
                       for (std::size_t j = 0; j < c; ++j) gl[r * c + j] += g[r] * probs[r * c + j];
                       gl[r * c + static_cast<std::size_t>(targets[r])] -= g[r];
                     }
                   });
}

// sum(mask * v) / sum(mask) for a vector v [N].
template <class T>
Var<T> masked_mean(Var<T> v, std::vector<T> mask) {
  const Array<T>& vv = v.value();
  if (vv.shape.size() != 1 || mask.size() != vv.size()) throw UsageError("masked-mean: mask does not match input");
  T denom = 0, acc = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    denom += mask[i];
    acc += mask[i] * vv.values[i];
  }
  if (denom <= T(0)) throw UsageError("masked-mean: mask selects no elements");
  Array<T> out(Shape{}, acc / denom);
  const std::size_t iv = v.id;
  return v.tape->push(OpKind::masked_mean, std::move(out), {iv},
                      [=, mask = std::move(mask)](Tape<T>& tp, std::size_t self) {
                        T* gv = tp.grad_sink(iv);
                        if (!gv) return;
                        const T g = tp.grad_of(self)[0];
                        for (std::size_t i = 0; i < mask.size(); ++i) gv[i] += g * mask[i] / denom;
                      });
}

template <class T>
Var<T> sum(Var<T> a) {
  T acc = 0;
  for (T x : a.value().values) acc += x;
  const std::size_t ia = a.id, total = a.value().size();
  return a.tape->push(OpKind::sum, Array<T>(Shape{}, acc), {ia}, [=](Tape<T>& tp, std::size_t self) {
    T* ga = tp.grad_sink(ia);
    if (!ga) return;
    const T g = tp.grad_of(self)[0];
    for (std::size_t i = 0; i < total; ++i) ga[i] += g;
  });
}

template <class T>
Var<T> sum_squares(Var<T> a) {
  T acc = 0;
  for (T x : a.value().values) acc += x * x;
  const std::size_t ia = a.id, total = a.value().size();
  return a.tape->push(OpKind::sum_squares, Array<T>(Shape{}, acc), {ia}, [=](Tape<T>& tp, std::size_t self) {
    T* ga = tp.grad_sink(ia);
    if (!ga) return;
    const T g = tp.grad_of(self)[0];
    const T* x = tp.value(ia).values.data();
    for (std::size_t i = 0; i < total; ++i) ga[i] += T(2) * g * x[i];
  });
}

// Gradient check by central differences. Returns the largest
// |analytic - numeric| / (|analytic| + |numeric| + 1e-12) over all parameter entries.
// loss_fn(tape, vars) must build a scalar loss from the bound parameters.
template <class LossFn>
double grad_check(LossFn&& loss_fn, std::vector<Array<double>>& params, double epsilon) {
  auto evaluate = [&](bool record, std::vector<Array<double>>* grads) {
    Tape<double> tape(record);
    std::vector<Var<double>> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(record ? tape.parameter(p) : tape.constant(p));
    Var<double> loss = loss_fn(tape, std::span<const Var<double>>(vars));
    const double value = loss.value().values.at(0);
    if (grads) {
      tape.backward(loss);
      grads->clear();
      for (const auto& v : vars) grads->push_back(tape.gradient(v));
    }
    return value;
  };
  std::vector<Array<double>> analytic;
  evaluate(true, &analytic);
  double worst = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double orig = params[p].values[i];
      params[p].values[i] = orig + epsilon;
      const double up = evaluate(false, nullptr);
      params[p].values[i] = orig - epsilon;
      const double down = evaluate(false, nullptr);
      params[p].values[i] = orig;
      const double numeric = (up - down) / (2 * epsilon);
      const double a = analytic[p].values[i];
      worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12));
    }
  }
  return worst;
}

}  // namespace forgetlab::ad
