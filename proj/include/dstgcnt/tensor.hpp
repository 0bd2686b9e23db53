#pragma once

// Shaped arrays with reverse-mode gradient propagation.
//
// A Var is a handle to a node in a dynamically recorded computation graph.
// Every operation below computes its forward value eagerly and, when gradient
// recording is enabled and some input requires a gradient, stores a closure
// that pushes the output gradient back onto its inputs.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "common.hpp"
#include "gemm.hpp"

namespace dstgcnt {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {
inline thread_local bool grad_enabled = true;
/// Test hook: perturbs the weight gradient of matmul so gradient checks can be
/// shown to fail. Never set outside of negative-control tests.
inline std::atomic<bool> corrupt_matmul_backward{false};

inline std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r) {
    fail(ErrorKind::shape, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}
}  // namespace detail

/// Disables graph recording for its lifetime (inference).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const std::vector<T>&)> backward_fn;
  bool requires_grad = false;
  bool grad_populated = false;  // leaves only: set by backward, cleared by zero_grad

  bool is_leaf() const { return !backward_fn; }

  T* grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T{0});
    return grad.data();
  }
};

template <class T>
class Var {
 public:
  using value_type = T;

  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  explicit operator bool() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(int axis) const { return node_->shape[detail::norm_axis(axis, rank())]; }
  std::size_t numel() const { return node_->value.size(); }

  const std::vector<T>& value() const { return node_->value; }
  /// Direct write access, for optimizers and gradient checks on leaves.
  std::vector<T>& mutable_value() { return node_->value; }
  const T* data() const { return node_->value.data(); }

  const std::vector<T>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  T item() const {
    if (numel() != 1) fail(ErrorKind::contract, "item() on non-scalar of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }

  void zero_grad() {
    node_->grad.clear();
    node_->grad_populated = false;
  }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
Var<T> constant(Shape shape, std::vector<T> data) {
  if (numel(shape) != data.size()) {
    fail(ErrorKind::shape, "data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  return Var<T>(std::move(n));
}

template <class T>
Var<T> parameter(Shape shape, std::vector<T> data) {
  Var<T> v = constant<T>(std::move(shape), std::move(data));
  v.node()->requires_grad = true;
  return v;
}

template <class T>
Var<T> zeros(Shape shape) {
  const std::size_t n = numel(shape);
  return constant<T>(std::move(shape), std::vector<T>(n, T{0}));
}

template <class T>
Var<T> scalar(T value) {
  return constant<T>({}, {value});
}

namespace detail {

template <class T>
T* grad_of(const Var<T>& v) {
  return v.requires_grad() ? v.node()->grad_buffer() : nullptr;
}

/// Creates an op result. `backward` receives the output gradient and must
/// accumulate into the parents' gradient buffers.
template <class T, class Backward>
Var<T> make_op(Shape shape, std::vector<T> value, std::initializer_list<Var<T>> parents, Backward&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const auto& p : parents) n->parents.push_back(p.shared());
      n->backward_fn = std::forward<Backward>(backward);
    }
  }
  return Var<T>(std::move(n));
}

template <class T, class Backward>
Var<T> make_op_n(Shape shape, std::vector<T> value, const std::vector<Var<T>>& parents, Backward&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const auto& p : parents) n->parents.push_back(p.shared());
      n->backward_fn = std::forward<Backward>(backward);
    }
  }
  return Var<T>(std::move(n));
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) fail(ErrorKind::shape, std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) + " differ");
}

}  // namespace detail

/// Propagates gradients from a scalar result to every reachable leaf that
/// requires one. Leaves must have been cleared with zero_grad() since the last
/// backward pass.
template <class T>
void backward(const Var<T>& result) {
  if (result.numel() != 1) fail(ErrorKind::contract, "backward requires a scalar, got " + shape_str(result.shape()));
  if (!result.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{result.node(), 0}};
  seen.insert(result.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    if (n->is_leaf() && n->grad_populated) {
      fail(ErrorKind::contract, "gradient already accumulated on a leaf; call zero_grad() before backward");
    }
  }

  // Interior gradients are allocated on first contribution and released once
  // propagated; a node nothing flowed into is skipped.
  result.node()->grad.assign(1, T{1});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf()) {
      n->grad_buffer();
      n->grad_populated = true;
    } else if (!n->grad.empty()) {
      n->backward_fn(n->grad);
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [a, b](const std::vector<T>& g) {
    if (T* ga = detail::grad_of(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (T* gb = detail::grad_of(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [a, b](const std::vector<T>& g) {
    if (T* ga = detail::grad_of(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (T* gb = detail::grad_of(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

/// Hadamard product.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [a, b](const std::vector<T>& g) {
    if (T* ga = detail::grad_of(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
    if (T* gb = detail::grad_of(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
  });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * s;
  return detail::make_op<T>(x.shape(), std::move(out), {x}, [x, s](const std::vector<T>& g) {
    if (T* gx = detail::grad_of(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
  });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T s) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + s;
  return detail::make_op<T>(x.shape(), std::move(out), {x}, [x](const std::vector<T>& g) {
    if (T* gx = detail::grad_of(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// 1 - x
template <class T>
Var<T> one_minus(const Var<T>& x) {
  return add_scalar(scale(x, T{-1}), T{1});
}

/// x + b where b's shape equals the trailing dimensions of x (bias, positional table).
template <class T>
Var<T> add_trailing(const Var<T>& x, const Var<T>& b) {
  const std::size_t inner = b.numel();
  const Shape& xs = x.shape();
  const Shape& bs = b.shape();
  if (bs.size() > xs.size() || !std::equal(bs.rbegin(), bs.rend(), xs.rbegin())) {
    fail(ErrorKind::shape, "add_trailing: " + shape_str(bs) + " is not a suffix of " + shape_str(xs));
  }
  const std::size_t outer = inner ? x.numel() / inner : 0;
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = x.data()[o * inner + i] + b.data()[i];
  return detail::make_op<T>(xs, std::move(out), {x, b}, [x, b, outer, inner](const std::vector<T>& g) {
    if (T* gx = detail::grad_of(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    if (T* gb = detail::grad_of(b))
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) gb[i] += g[o * inner + i];
  });
}

/// Multiplies each trailing block of x by a constant factor, one factor per
/// leading index (frame masks: x is [B, T, ...], factors are [B*T]).
template <class T>
Var<T> scale_rows(const Var<T>& x, const std::vector<T>& factors) {
  if (factors.empty() || x.numel() % factors.size() != 0) {
    fail(ErrorKind::shape, "scale_rows: " + std::to_string(factors.size()) + " factors do not tile " +
                               shape_str(x.shape()));
  }
  const std::size_t inner = x.numel() / factors.size();
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < factors.size(); ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = x.data()[o * inner + i] * factors[o];
  return detail::make_op<T>(x.shape(), std::move(out), {x}, [x, factors, inner](const std::vector<T>& g) {
    if (T* gx = detail::grad_of(x))
      for (std::size_t o = 0; o < factors.size(); ++o)
        for (std::size_t i = 0; i < inner; ++i) gx[o * inner + i] += g[o * inner + i] * factors[o];
  });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

namespace detail {
/// `derivative(x, y)` returns dy/dx given input and output.
template <class T, class F, class D>
Var<T> unary(const Var<T>& x, F f, D derivative) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x.data()[i]);
  auto node_out = std::make_shared<std::vector<T>>();
  Var<T> result = make_op<T>(x.shape(), std::move(out), {x}, [x, derivative, node_out](const std::vector<T>& g) {
    if (T* gx = grad_of(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * derivative(x.data()[i], (*node_out)[i]);
  });
  if (result.requires_grad()) *node_out = result.value();
  return result;
}
}  // namespace detail

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(
      x,
      [](T v) {
        if (v >= 0) return T{1} / (T{1} + std::exp(-v));
        const T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Var<T> tanh(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(x, [](T v) { return v > 0 ? v : T{0}; }, [](T v, T) { return v > 0 ? T{1} : T{0}; });
}

// ---------------------------------------------------------------------------
// Linear maps

/// x[..., K] @ w[K, M] -> [..., M]. With a 2-D x this is the ordinary matrix product.
template <class T>
Var<T> matmul(const Var<T>& x, const Var<T>& w) {
  if (w.rank() != 2 || x.rank() < 1 || x.dim(-1) != w.dim(0)) {
    fail(ErrorKind::shape, "matmul: cannot multiply " + shape_str(x.shape()) + " by " + shape_str(w.shape()));
  }
  const std::size_t k_dim = w.dim(0), m_dim = w.dim(1), rows = x.numel() / k_dim;
  Shape shape = x.shape();
  shape.back() = m_dim;
  std::vector<T> out(rows * m_dim, T{0});
  detail::gemm_nn(rows, m_dim, k_dim, x.data(), k_dim, w.data(), m_dim, out.data(), m_dim);
  return detail::make_op<T>(std::move(shape), std::move(out), {x, w},
                            [x, w, rows, k_dim, m_dim](const std::vector<T>& g) {
                              if (T* gx = detail::grad_of(x)) {
                                detail::gemm_nt(rows, k_dim, m_dim, g.data(), m_dim, w.data(), m_dim, gx, k_dim);
                              }
                              if (T* gw = detail::grad_of(w)) {
                                if (detail::corrupt_matmul_backward) {
                                  std::vector<T> tmp(k_dim * m_dim, T{0});
                                  detail::gemm_tn(k_dim, m_dim, rows, x.data(), k_dim, g.data(), m_dim, tmp.data(), m_dim);
                                  for (std::size_t i = 0; i < tmp.size(); ++i) gw[i] += T(1.01) * tmp[i];
                                } else {
                                  detail::gemm_tn(k_dim, m_dim, rows, x.data(), k_dim, g.data(), m_dim, gw, m_dim);
                                }
                              }
                            });
}

/// x W + b
template <class T>
Var<T> affine(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return add_trailing(matmul(x, w), b);
}

/// Batched product a[..., M, K] @ b[..., K, N], or @ b[..., N, K]^T when transpose_b.
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_b = false) {
  const bool ok_rank = a.rank() >= 2 && a.rank() == b.rank() &&
                       std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin());
  const std::size_t m_dim = a.rank() >= 2 ? a.dim(-2) : 0, k_dim = a.rank() >= 2 ? a.dim(-1) : 0;
  const std::size_t bk = ok_rank ? (transpose_b ? b.dim(-1) : b.dim(-2)) : 0;
  if (!ok_rank || bk != k_dim) {
    fail(ErrorKind::shape, "bmm: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()) +
                               (transpose_b ? " (transposed)" : ""));
  }
  const std::size_t n_dim = transpose_b ? b.dim(-2) : b.dim(-1);
  const std::size_t batch = a.numel() / (m_dim * k_dim);
  Shape shape = a.shape();
  shape.back() = n_dim;
  std::vector<T> out(batch * m_dim * n_dim, T{0});
  for (std::size_t s = 0; s < batch; ++s) {
    const T* ad = a.data() + s * m_dim * k_dim;
    const T* bd = b.data() + s * k_dim * n_dim;
    T* od = out.data() + s * m_dim * n_dim;
    if (transpose_b) {
      detail::gemm_nt(m_dim, n_dim, k_dim, ad, k_dim, bd, k_dim, od, n_dim);
    } else {
      detail::gemm_nn(m_dim, n_dim, k_dim, ad, k_dim, bd, n_dim, od, n_dim);
    }
  }
  return detail::make_op<T>(
      std::move(shape), std::move(out), {a, b}, [a, b, batch, m_dim, k_dim, n_dim, transpose_b](const std::vector<T>& g) {
        T* ga = detail::grad_of(a);
        T* gb = detail::grad_of(b);
        for (std::size_t s = 0; s < batch; ++s) {
          const T* ad = a.data() + s * m_dim * k_dim;
          const T* bd = b.data() + s * k_dim * n_dim;
          const T* gd = g.data() + s * m_dim * n_dim;
          T* gas = ga ? ga + s * m_dim * k_dim : nullptr;
          T* gbs = gb ? gb + s * k_dim * n_dim : nullptr;
          if (transpose_b) {
            // out = A B^T: dA = G B, dB = G^T A
            if (gas) detail::gemm_nn(m_dim, k_dim, n_dim, gd, n_dim, bd, k_dim, gas, k_dim);
            if (gbs) detail::gemm_tn(n_dim, k_dim, m_dim, gd, n_dim, ad, k_dim, gbs, k_dim);
          } else {
            // out = A B: dA = G B^T, dB = A^T G
            if (gas) detail::gemm_nt(m_dim, k_dim, n_dim, gd, n_dim, bd, n_dim, gas, k_dim);
            if (gbs) detail::gemm_tn(k_dim, n_dim, m_dim, ad, k_dim, gd, n_dim, gbs, n_dim);
          }
        }
      });
}

/// Graph propagation x[..., N, F] . A, i.e. out[j] = sum_i A(i, j) x[i], with a
/// constant N x N operator. Zero entries of A are skipped.
template <class T>
Var<T> graph_mix(const Var<T>& x, const Matrix<T>& a) {
  if (x.rank() < 2 || a.rows != a.cols || x.dim(-2) != a.rows) {
    fail(ErrorKind::shape, "graph_mix: operator " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                               " does not match " + shape_str(x.shape()));
  }
  struct Entry {
    std::size_t from, to;
    T weight;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j)
      if (a(i, j) != T{0}) entries.push_back({i, j, a(i, j)});
  const std::size_t n = a.rows, f = x.dim(-1), slabs = x.numel() / (n * f);
  std::vector<T> out(x.numel(), T{0});
  for (std::size_t s = 0; s < slabs; ++s) {
    const T* xd = x.data() + s * n * f;
    T* od = out.data() + s * n * f;
    for (const auto& e : entries) {
      const T* src = xd + e.from * f;
      T* dst = od + e.to * f;
      for (std::size_t c = 0; c < f; ++c) dst[c] += e.weight * src[c];
    }
  }
  return detail::make_op<T>(x.shape(), std::move(out), {x}, [x, entries, n, f, slabs](const std::vector<T>& g) {
    T* gx = detail::grad_of(x);
    if (!gx) return;
    for (std::size_t s = 0; s < slabs; ++s) {
      const T* gd = g.data() + s * n * f;
      T* gxd = gx + s * n * f;
      for (const auto& e : entries) {
        const T* src = gd + e.to * f;
        T* dst = gxd + e.from * f;
        for (std::size_t c = 0; c < f; ++c) dst[c] += e.weight * src[c];
      }
    }
  });
}

struct TemporalPadding {
  std::size_t left = 0;
  std::size_t right = 0;
};

/// Convolution along time, per joint: x[..., T, N, Fin] with kernel
/// [k, Fin, Fout] -> [..., T, N, Fout]. Frames outside [0, T) read as zero.
/// Requires left + right == k - 1 so the length is preserved.
template <class T>
Var<T> temporal_conv(const Var<T>& x, const Var<T>& kernel, TemporalPadding pad) {
  if (kernel.rank() != 3 || x.rank() < 3 || x.dim(-1) != kernel.dim(1)) {
    fail(ErrorKind::shape, "temporal_conv: input " + shape_str(x.shape()) + " incompatible with kernel " +
                               shape_str(kernel.shape()));
  }
  const std::size_t k = kernel.dim(0), fin = kernel.dim(1), fout = kernel.dim(2);
  if (pad.left + pad.right + 1 != k) fail(ErrorKind::config, "temporal_conv: padding must total k - 1");
  const std::size_t t_len = x.dim(-3), n = x.dim(-2);
  const std::size_t outer = x.numel() / (t_len * n * fin);
  Shape shape = x.shape();
  shape.back() = fout;
  std::vector<T> out(outer * t_len * n * fout, T{0});
  detail::temporal_conv_acc(outer, t_len, n, fin, fout, k, pad.left, x.data(), kernel.data(), out.data());
  return detail::make_op<T>(
      std::move(shape), std::move(out), {x, kernel}, [x, kernel, pad, k, fin, fout, t_len, n, outer](const std::vector<T>& g) {
        if (T* gx = detail::grad_of(x)) {
          // Transposed convolution: the flipped, channel-swapped kernel with the padding mirrored.
          std::vector<T> flipped(k * fout * fin);
          const T* kd = kernel.data();
          for (std::size_t dt = 0; dt < k; ++dt)
            for (std::size_t c = 0; c < fin; ++c)
              for (std::size_t o = 0; o < fout; ++o) flipped[((k - 1 - dt) * fout + o) * fin + c] = kd[(dt * fin + c) * fout + o];
          detail::temporal_conv_acc(outer, t_len, n, fout, fin, k, pad.right, g.data(), flipped.data(), gx);
        }
        if (T* gk = detail::grad_of(kernel)) {
          for (std::size_t b = 0; b < outer; ++b) {
            const T* xb = x.data() + b * t_len * n * fin;
            const T* gb = g.data() + b * t_len * n * fout;
            for (std::size_t dt = 0; dt < k; ++dt) {
              // Tap dt reads input frame t + dt - left for output frame t.
              const std::size_t t0 = dt < pad.left ? pad.left - dt : 0;
              const std::size_t t1 = std::min(t_len, t_len + pad.left - dt);
              if (t1 <= t0) continue;
              const std::size_t s0 = t0 + dt - pad.left;
              detail::gemm_tn(fin, fout, (t1 - t0) * n, xb + s0 * n * fin, fin, gb + t0 * n * fout, fout,
                              gk + dt * fin * fout, fout);
            }
          }
        }
      });
}

/// Same-padded temporal convolution; the kernel length must be odd.
template <class T>
Var<T> temporal_conv(const Var<T>& x, const Var<T>& kernel) {
  if (kernel.rank() != 3) fail(ErrorKind::shape, "temporal_conv: kernel must be [k, Fin, Fout]");
  const std::size_t k = kernel.dim(0);
  if (k % 2 == 0) fail(ErrorKind::config, "temporal_conv: same padding needs an odd kernel, got " + std::to_string(k));
  return temporal_conv(x, kernel, TemporalPadding{(k - 1) / 2, (k - 1) / 2});
}

// ---------------------------------------------------------------------------
// Normalization and regularization

/// Softmax over the last dimension. Entries with mask == 0 get probability
/// exactly zero; a row with every entry masked is a contract error.
template <class T>
Var<T> masked_softmax(const Var<T>& x, const std::vector<std::uint8_t>* mask) {
  if (x.rank() < 1) fail(ErrorKind::shape, "softmax on a scalar");
  if (mask && mask->size() != x.numel()) fail(ErrorKind::shape, "softmax mask size does not match input");
  const std::size_t d = x.dim(-1), rows = x.numel() / d;
  std::vector<T> out(x.numel(), T{0});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * d;
    const std::uint8_t* mr = mask ? mask->data() + r * d : nullptr;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < d; ++i)
      if (!mr || mr[i]) mx = std::max(mx, xr[i]);
    if (mx == -std::numeric_limits<T>::infinity()) fail(ErrorKind::contract, "softmax row has no unmasked entry");
    T total{0};
    T* o = out.data() + r * d;
    for (std::size_t i = 0; i < d; ++i) {
      if (mr && !mr[i]) continue;
      o[i] = std::exp(xr[i] - mx);
      total += o[i];
    }
    for (std::size_t i = 0; i < d; ++i) o[i] /= total;
  }
  auto probs = std::make_shared<std::vector<T>>();
  Var<T> result = detail::make_op<T>(x.shape(), std::move(out), {x}, [x, probs, d, rows](const std::vector<T>& g) {
    T* gx = detail::grad_of(x);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* p = probs->data() + r * d;
      const T* gr = g.data() + r * d;
      T dot{0};
      for (std::size_t i = 0; i < d; ++i) dot += p[i] * gr[i];
      for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += p[i] * (gr[i] - dot);
    }
  });
  if (result.requires_grad()) *probs = result.value();
  return result;
}

template <class T>
Var<T> softmax_lastdim(const Var<T>& x) {
  return masked_softmax<T>(x, nullptr);
}

/// Row-wise allowed columns (ascending) of an N x N pattern.
using SupportLists = std::vector<std::vector<std::size_t>>;

/// Softmax of scale * h_i . h_j over j in cols[i], for h[..., N, F]; the
/// result is the dense [..., N, N] map with zeros off the pattern. Equivalent
/// to masked_softmax(scale * h h^T) without forming the masked-out scores.
template <class T>
Var<T> support_softmax(const Var<T>& h, const SupportLists& cols, T scale) {
  if (h.rank() < 2 || h.dim(-2) != cols.size()) {
    fail(ErrorKind::shape, "support_softmax: pattern with " + std::to_string(cols.size()) + " rows does not match " +
                               shape_str(h.shape()));
  }
  const std::size_t n = h.dim(-2), f = h.dim(-1), slabs = h.numel() / (n * f);
  for (std::size_t i = 0; i < n; ++i) {
    if (cols[i].empty()) fail(ErrorKind::contract, "support_softmax: row " + std::to_string(i) + " allows no column");
    for (std::size_t j : cols[i])
      if (j >= n) fail(ErrorKind::shape, "support_softmax: column index out of range");
  }
  Shape shape = h.shape();
  shape.back() = n;
  std::vector<T> out(slabs * n * n, T{0});
  std::vector<T> e;
  for (std::size_t s = 0; s < slabs; ++s) {
    const T* hs = h.data() + s * n * f;
    T* ms = out.data() + s * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& row = cols[i];
      e.resize(row.size());
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t q = 0; q < row.size(); ++q) {
        T acc{0};
        for (std::size_t c = 0; c < f; ++c) acc += hs[i * f + c] * hs[row[q] * f + c];
        e[q] = acc * scale;
        mx = std::max(mx, e[q]);
      }
      T total{0};
      for (auto& v : e) {
        v = std::exp(v - mx);
        total += v;
      }
      for (std::size_t q = 0; q < row.size(); ++q) ms[i * n + row[q]] = e[q] / total;
    }
  }
  auto probs = std::make_shared<std::vector<T>>();
  Var<T> result = detail::make_op<T>(std::move(shape), std::move(out), {h}, [h, cols, scale, probs, n, f, slabs](const std::vector<T>& g) {
    T* gh = detail::grad_of(h);
    if (!gh) return;
    for (std::size_t s = 0; s < slabs; ++s) {
      const T* hs = h.data() + s * n * f;
      const T* ps = probs->data() + s * n * n;
      const T* gs = g.data() + s * n * n;
      T* ghs = gh + s * n * f;
      for (std::size_t i = 0; i < n; ++i) {
        T dot{0};
        for (std::size_t j : cols[i]) dot += ps[i * n + j] * gs[i * n + j];
        for (std::size_t j : cols[i]) {
          const T ds = ps[i * n + j] * (gs[i * n + j] - dot) * scale;
          for (std::size_t c = 0; c < f; ++c) {
            ghs[i * f + c] += ds * hs[j * f + c];
            ghs[j * f + c] += ds * hs[i * f + c];
          }
        }
      }
    }
  });
  if (result.requires_grad()) *probs = result.value();
  return result;
}

/// out_i = sum over j in cols[i] of map_ij h_j, for map[..., N, N] and h[..., N, F].
/// Entries of map off the pattern are ignored.
template <class T>
Var<T> support_mix(const Var<T>& map, const Var<T>& h, const SupportLists& cols) {
  if (h.rank() < 2 || map.rank() != h.rank() || h.dim(-2) != cols.size() || map.dim(-1) != cols.size() ||
      map.dim(-2) != cols.size() || map.numel() / (cols.size() * cols.size()) != h.numel() / (cols.size() * h.dim(-1))) {
    fail(ErrorKind::shape, "support_mix: cannot apply " + shape_str(map.shape()) + " to " + shape_str(h.shape()));
  }
  const std::size_t n = h.dim(-2), f = h.dim(-1), slabs = h.numel() / (n * f);
  std::vector<T> out(h.numel(), T{0});
  for (std::size_t s = 0; s < slabs; ++s) {
    const T* hs = h.data() + s * n * f;
    const T* ms = map.data() + s * n * n;
    T* os = out.data() + s * n * f;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j : cols[i]) {
        const T w = ms[i * n + j];
        for (std::size_t c = 0; c < f; ++c) os[i * f + c] += w * hs[j * f + c];
      }
  }
  return detail::make_op<T>(h.shape(), std::move(out), {map, h}, [map, h, cols, n, f, slabs](const std::vector<T>& g) {
    T* gm = detail::grad_of(map);
    T* gh = detail::grad_of(h);
    for (std::size_t s = 0; s < slabs; ++s) {
      const T* hs = h.data() + s * n * f;
      const T* ms = map.data() + s * n * n;
      const T* gs = g.data() + s * n * f;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j : cols[i]) {
          if (gm) {
            T acc{0};
            for (std::size_t c = 0; c < f; ++c) acc += gs[i * f + c] * hs[j * f + c];
            gm[s * n * n + i * n + j] += acc;
          }
          if (gh) {
            const T w = ms[i * n + j];
            for (std::size_t c = 0; c < f; ++c) gh[s * n * f + j * f + c] += w * gs[i * f + c];
          }
        }
    }
  });
}

/// Normalizes each last-dimension vector to zero mean and unit variance, then
/// applies gain and bias.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  const std::size_t d = x.dim(-1);
  if (gain.numel() != d || bias.numel() != d) {
    fail(ErrorKind::shape, "layer_norm: gain/bias " + shape_str(gain.shape()) + " do not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * d;
    T mean{0};
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<T>(d);
    T var{0};
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<T>(d);
    const T is = T{1} / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < d; ++i) {
      const T h = (xr[i] - mean) * is;
      (*xhat)[r * d + i] = h;
      out[r * d + i] = h * gain.data()[i] + bias.data()[i];
    }
  }
  return detail::make_op<T>(x.shape(), std::move(out), {x, gain, bias},
                            [x, gain, bias, xhat, inv_std, d, rows](const std::vector<T>& g) {
                              T* gx = detail::grad_of(x);
                              T* gg = detail::grad_of(gain);
                              T* gb = detail::grad_of(bias);
                              std::vector<T> dxhat(d);
                              for (std::size_t r = 0; r < rows; ++r) {
                                const T* gr = g.data() + r * d;
                                const T* hr = xhat->data() + r * d;
                                T sum_dh{0}, sum_dh_h{0};
                                for (std::size_t i = 0; i < d; ++i) {
                                  if (gg) gg[i] += gr[i] * hr[i];
                                  if (gb) gb[i] += gr[i];
                                  dxhat[i] = gr[i] * gain.data()[i];
                                  sum_dh += dxhat[i];
                                  sum_dh_h += dxhat[i] * hr[i];
                                }
                                if (!gx) continue;
                                const T is = (*inv_std)[r];
                                const T inv_d = T{1} / static_cast<T>(d);
                                for (std::size_t i = 0; i < d; ++i) {
                                  gx[r * d + i] += is * (dxhat[i] - inv_d * sum_dh - hr[i] * inv_d * sum_dh_h);
                                }
                              }
                            });
}

/// Inverted dropout. Identity when not training or when rate is zero.
template <class T>
Var<T> dropout(const Var<T>& x, double rate, std::uint64_t seed, bool training) {
  if (rate < 0.0 || rate >= 1.0) fail(ErrorKind::config, "dropout rate must lie in [0, 1)");
  if (!training || rate == 0.0) return x;
  Rng rng(seed);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> factors(x.numel());
  for (auto& f : factors) f = rng.uniform() < rate ? T{0} : keep_scale;
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factors[i];
  return detail::make_op<T>(x.shape(), std::move(out), {x}, [x, factors](const std::vector<T>& g) {
    if (T* gx = detail::grad_of(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factors[i];
  });
}

// ---------------------------------------------------------------------------
// Structural ops

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    fail(ErrorKind::shape, "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return detail::make_op<T>(std::move(shape), x.value(), {x}, [x](const std::vector<T>& g) {
    if (T* gx = detail::grad_of(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  if (parts.empty()) fail(ErrorKind::shape, "concat of nothing");
  const std::size_t rank = parts[0].rank();
  const std::size_t ax = detail::norm_axis(axis, rank);
  Shape shape = parts[0].shape();
  shape[ax] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = parts[0].shape();
    if (a.size() != rank) fail(ErrorKind::shape, "concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    a[ax] = b[ax] = 0;
    if (a != b) fail(ErrorKind::shape, "concat: shapes " + shape_str(p.shape()) + " and " + shape_str(parts[0].shape()) + " differ off-axis");
    shape[ax] += p.shape()[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= shape[i];
  for (std::size_t i = ax + 1; i < rank; ++i) inner *= shape[i];
  const std::size_t row = shape[ax] * inner;
  std::vector<T> out(numel(shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[ax] * inner;
    widths.push_back(w);
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(p.data() + o * w, w, out.data() + o * row + offset);
    offset += w;
  }
  return detail::make_op_n<T>(std::move(shape), std::move(out), parts, [parts, widths, outer, row](const std::vector<T>& g) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const std::size_t w = widths[i];
      if (T* gp = detail::grad_of(parts[i])) {
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t c = 0; c < w; ++c) gp[o * w + c] += g[o * row + offset + c];
      }
      offset += w;
    }
  });
}

/// Selects index `index` along `axis`, dropping that axis.
template <class T>
Var<T> slice(const Var<T>& x, int axis, std::size_t index) {
  const std::size_t ax = detail::norm_axis(axis, x.rank());
  const Shape& xs = x.shape();
  if (index >= xs[ax]) fail(ErrorKind::shape, "slice index " + std::to_string(index) + " out of range for " + shape_str(xs));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= xs[i];
  for (std::size_t i = ax + 1; i < xs.size(); ++i) inner *= xs[i];
  const std::size_t len = xs[ax];
  Shape shape = xs;
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<T> out(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.data() + (o * len + index) * inner, inner, out.data() + o * inner);
  return detail::make_op<T>(std::move(shape), std::move(out), {x}, [x, outer, inner, len, index](const std::vector<T>& g) {
    if (T* gx = detail::grad_of(x))
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) gx[(o * len + index) * inner + i] += g[o * inner + i];
  });
}

/// Stacks equally shaped values along a new axis.
template <class T>
Var<T> stack(const std::vector<Var<T>>& parts, int axis) {
  if (parts.empty()) fail(ErrorKind::shape, "stack of nothing");
  const Shape& base = parts[0].shape();
  const std::size_t ax = detail::norm_axis(axis, base.size() + 1);
  for (const auto& p : parts) detail::require_same_shape(p.shape(), base, "stack");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= base[i];
  for (std::size_t i = ax; i < base.size(); ++i) inner *= base[i];
  Shape shape = base;
  shape.insert(shape.begin() + static_cast<std::ptrdiff_t>(ax), parts.size());
  const std::size_t count = parts.size();
  std::vector<T> out(numel(shape));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t p = 0; p < count; ++p)
      std::copy_n(parts[p].data() + o * inner, inner, out.data() + (o * count + p) * inner);
  return detail::make_op_n<T>(std::move(shape), std::move(out), parts, [parts, outer, inner, count](const std::vector<T>& g) {
    for (std::size_t p = 0; p < count; ++p) {
      T* gp = detail::grad_of(parts[p]);
      if (!gp) continue;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) gp[o * inner + i] += g[(o * count + p) * inner + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(const Var<T>& x) {
  T total{0};
  for (T v : x.value()) total += v;
  return detail::make_op<T>({}, {total}, {x}, [x](const std::vector<T>& g) {
    if (T* gx = detail::grad_of(x))
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

/// Weighted mean over axis 1 of x[B, T, D] with weights mask[B*T] -> [B, D].
template <class T>
Var<T> masked_time_mean(const Var<T>& x, const std::vector<T>& mask) {
  if (x.rank() != 3 || mask.size() != x.dim(0) * x.dim(1)) {
    fail(ErrorKind::shape, "masked_time_mean: mask of " + std::to_string(mask.size()) + " for " + shape_str(x.shape()));
  }
  const std::size_t b_len = x.dim(0), t_len = x.dim(1), d = x.dim(2);
  std::vector<T> inv_count(b_len);
  std::vector<T> out(b_len * d, T{0});
  for (std::size_t b = 0; b < b_len; ++b) {
    T count{0};
    for (std::size_t t = 0; t < t_len; ++t) count += mask[b * t_len + t];
    if (count <= T{0}) fail(ErrorKind::contract, "masked_time_mean: sequence " + std::to_string(b) + " has no valid frame");
    inv_count[b] = T{1} / count;
    for (std::size_t t = 0; t < t_len; ++t) {
      const T m = mask[b * t_len + t];
      if (m == T{0}) continue;
      for (std::size_t c = 0; c < d; ++c) out[b * d + c] += m * x.data()[(b * t_len + t) * d + c];
    }
    for (std::size_t c = 0; c < d; ++c) out[b * d + c] *= inv_count[b];
  }
  return detail::make_op<T>({b_len, d}, std::move(out), {x}, [x, mask, inv_count, b_len, t_len, d](const std::vector<T>& g) {
    T* gx = detail::grad_of(x);
    if (!gx) return;
    for (std::size_t b = 0; b < b_len; ++b)
      for (std::size_t t = 0; t < t_len; ++t) {
        const T w = mask[b * t_len + t] * inv_count[b];
        if (w == T{0}) continue;
        for (std::size_t c = 0; c < d; ++c) gx[(b * t_len + t) * d + c] += w * g[b * d + c];
      }
  });
}

/// Picks x[b, index[b], :] from x[B, T, D] -> [B, D].
template <class T>
Var<T> gather_time(const Var<T>& x, const std::vector<std::size_t>& index) {
  if (x.rank() != 3 || index.size() != x.dim(0)) fail(ErrorKind::shape, "gather_time: bad index for " + shape_str(x.shape()));
  const std::size_t b_len = x.dim(0), t_len = x.dim(1), d = x.dim(2);
  std::vector<T> out(b_len * d);
  for (std::size_t b = 0; b < b_len; ++b) {
    if (index[b] >= t_len) fail(ErrorKind::shape, "gather_time: index out of range");
    std::copy_n(x.data() + (b * t_len + index[b]) * d, d, out.data() + b * d);
  }
  return detail::make_op<T>({b_len, d}, std::move(out), {x}, [x, index, t_len, d](const std::vector<T>& g) {
    if (T* gx = detail::grad_of(x))
      for (std::size_t b = 0; b < index.size(); ++b)
        for (std::size_t c = 0; c < d; ++c) gx[(b * t_len + index[b]) * d + c] += g[b * d + c];
  });
}

}  // namespace dstgcnt
