#pragma once

// Dense spatio-temporal graph Conv-GRU feature extractor.
//
// Tensors are laid out [B, T, N, F]: batch, frames, joints, channels. Every
// stage that can move information across time is followed by a frame mask so
// padded frames contribute exactly zero to real ones.

#include <cmath>
#include <string>
#include <vector>

#include "graph.hpp"
#include "tensor.hpp"

namespace dstgcnt {

enum class GruUpdate {
  paper,     ///< h_t = z_t * x_t + (1 - z_t) * o_t
  standard,  ///< h_t = z_t * h_{t-1} + (1 - z_t) * o_t
};

inline GruUpdate parse_gru_update(const std::string& s) {
  if (s == "paper") return GruUpdate::paper;
  if (s == "standard") return GruUpdate::standard;
  fail(ErrorKind::config, "unknown gru_update '" + s + "' (expected paper or standard)");
}

inline const char* to_string(GruUpdate u) { return u == GruUpdate::paper ? "paper" : "standard"; }

template <class T>
struct AugmentParams {
  Var<T> kernel;  // [k, C, A]
  Var<T> bias;    // [A]
};

/// 1x1 gate convolutions over the joint grid.
template <class T>
struct GruParams {
  Var<T> w_zx, w_zh, b_z;
  Var<T> w_rx, w_rh, b_r;
  Var<T> w_ox, w_oh, b_o;
};

template <class T>
struct BankParams {
  std::vector<Var<T>> kernels;  // [k_i, F, filters]
  std::vector<Var<T>> biases;   // [filters]
};

template <class T>
struct StgcGruBlockParams {
  std::vector<Var<T>> graph_weights;  // one [F_in, G] per hop operator
  GruParams<T> gru;
  BankParams<T> bank;
};

template <class T>
struct BlockOutput {
  Var<T> features;       // [B, T, N, bank width]
  Var<T> attention_map;  // [B, T, N, N], row-stochastic
};

template <class T>
struct DenseOutput {
  Var<T> features;
  std::vector<Var<T>> attention_maps;  // one per block
};

/// Constant graph data shared by all blocks.
template <class T>
struct GraphContext {
  std::vector<Matrix<T>> hop_operators;    // normalized, hop orders {0} U hops
  std::vector<std::uint8_t> support;       // N x N, nonzero pattern of the first-hop operator plus diagonal
  std::size_t joints = 0;

  static GraphContext build(const JointGraph& g, const std::vector<std::size_t>& hops) {
    GraphContext ctx;
    ctx.joints = g.num_joints;
    for (const auto& m : dstgcnt::hop_operators(g, hops)) ctx.hop_operators.push_back(m.template cast<T>());
    const Matrix<double> first = normalize_adjacency(k_hop_adjacency(g, 1));
    ctx.support.assign(g.num_joints * g.num_joints, 0);
    for (std::size_t i = 0; i < g.num_joints; ++i)
      for (std::size_t j = 0; j < g.num_joints; ++j) ctx.support[i * g.num_joints + j] = (i == j || first(i, j) != 0.0);
    return ctx;
  }
};

/// Zeroes padded frames. `mask` holds one entry per (batch, frame); empty means all valid.
template <class T>
Var<T> mask_frames(const Var<T>& x, const std::vector<T>& mask) {
  return mask.empty() ? x : scale_rows(x, mask);
}

/// P = V ++ relu(K_a * V + b) along channels.
template <class T>
Var<T> input_augment(const Var<T>& v, const AugmentParams<T>& p) {
  Var<T> conv = relu(add_trailing(temporal_conv(v, p.kernel), p.bias));
  return concat<T>({v, conv}, -1);
}

/// sum_k (P . A_k) W_k. The channel map is applied first; both are linear so
/// the order does not change the result.
template <class T>
Var<T> graph_convolution(const Var<T>& p, const std::vector<Matrix<T>>& hop_ops, const std::vector<Var<T>>& weights) {
  if (hop_ops.size() != weights.size() || hop_ops.empty()) {
    fail(ErrorKind::config, "graph_convolution: " + std::to_string(hop_ops.size()) + " hop operators but " +
                                std::to_string(weights.size()) + " weights");
  }
  Var<T> total;
  for (std::size_t k = 0; k < hop_ops.size(); ++k) {
    Var<T> term = graph_mix(matmul(p, weights[k]), hop_ops[k]);
    total = total ? add(total, term) : term;
  }
  return total;
}

/// Convolutional GRU over frames of x[B, T, N, F], starting from h_0 = 0.
template <class T>
Var<T> conv_gru_forward(const Var<T>& x, const GruParams<T>& p, GruUpdate mode) {
  if (x.rank() != 4) fail(ErrorKind::shape, "conv_gru_forward expects [B, T, N, F], got " + shape_str(x.shape()));
  const std::size_t frames = x.dim(1);
  const Var<T> xz = affine(x, p.w_zx, p.b_z);
  const Var<T> xr = affine(x, p.w_rx, p.b_r);
  const Var<T> xo = affine(x, p.w_ox, p.b_o);
  std::vector<Var<T>> states;
  states.reserve(frames);
  Var<T> h;  // empty == zero state
  for (std::size_t t = 0; t < frames; ++t) {
    Var<T> z_pre = slice(xz, 1, t);
    Var<T> r_pre = slice(xr, 1, t);
    Var<T> o_pre = slice(xo, 1, t);
    if (h) {
      z_pre = add(z_pre, matmul(h, p.w_zh));
      r_pre = add(r_pre, matmul(h, p.w_rh));
    }
    const Var<T> z = sigmoid(z_pre);
    if (h) {
      const Var<T> r = sigmoid(r_pre);
      o_pre = add(o_pre, matmul(mul(r, h), p.w_oh));
    }
    const Var<T> o = tanh(o_pre);
    Var<T> carried;
    if (mode == GruUpdate::paper) {
      carried = slice(x, 1, t);
    } else {
      carried = h ? h : zeros<T>(o.shape());
    }
    h = add(mul(z, carried), mul(one_minus(z), o));
    states.push_back(h);
  }
  return stack(states, 1);
}

/// Builds per-frame scores h_i . h_j / sqrt(F), keeps only graph-adjacent pairs
/// (and self), row-normalizes them with a softmax and propagates h through the
/// resulting map. `support` is an N x N pattern; the diagonal is always allowed.
template <class T>
BlockOutput<T> attention_injection(const Var<T>& h, const std::vector<std::uint8_t>& support) {
  if (h.rank() != 4) fail(ErrorKind::shape, "attention_injection expects [B, T, N, F], got " + shape_str(h.shape()));
  const std::size_t n = h.dim(2), f = h.dim(3);
  if (support.size() != n * n) fail(ErrorKind::shape, "attention_injection: support is not N x N");
  SupportLists cols(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (support[i * n + j] || i == j) cols[i].push_back(j);
  Var<T> map = support_softmax(h, cols, T{1} / std::sqrt(static_cast<T>(f)));
  Var<T> features = support_mix(map, h, cols);
  return {features, map};
}

/// Parallel temporal convolutions concatenated on channels. Even kernels pad
/// one more frame on the right than on the left.
template <class T>
Var<T> temporal_conv_bank(const Var<T>& z, const BankParams<T>& p) {
  std::vector<Var<T>> outs;
  for (std::size_t i = 0; i < p.kernels.size(); ++i) {
    const std::size_t k = p.kernels[i].dim(0);
    const TemporalPadding pad{(k - 1) / 2, k - 1 - (k - 1) / 2};
    outs.push_back(add_trailing(temporal_conv(z, p.kernels[i], pad), p.biases[i]));
  }
  return concat(outs, -1);
}

template <class T>
BlockOutput<T> stgc_gru_block(const Var<T>& input, const StgcGruBlockParams<T>& p, const GraphContext<T>& ctx,
                              const std::vector<T>& mask, GruUpdate mode) {
  const Var<T> g = mask_frames(graph_convolution(input, ctx.hop_operators, p.graph_weights), mask);
  const Var<T> h = conv_gru_forward(g, p.gru, mode);
  BlockOutput<T> inj = attention_injection(h, ctx.support);
  const Var<T> z = mask_frames(inj.features, mask);
  return {mask_frames(temporal_conv_bank(z, p.bank), mask), inj.attention_map};
}

/// Dense wiring: block i sees the channel concatenation of the augmented input
/// and every earlier block's output.
template <class T>
DenseOutput<T> dense_forward(const Var<T>& v, const AugmentParams<T>& augment,
                             const std::vector<StgcGruBlockParams<T>>& blocks, const GraphContext<T>& ctx,
                             const std::vector<T>& mask, GruUpdate mode) {
  if (blocks.empty()) fail(ErrorKind::config, "dense_forward needs at least one block");
  const Var<T> x = mask_frames(v, mask);
  std::vector<Var<T>> features{mask_frames(input_augment(x, augment), mask)};
  DenseOutput<T> out;
  for (const auto& block : blocks) {
    const Var<T> input = features.size() == 1 ? features[0] : concat(features, -1);
    BlockOutput<T> b = stgc_gru_block(input, block, ctx, mask, mode);
    features.push_back(b.features);
    out.attention_maps.push_back(b.attention_map);
  }
  out.features = features.back();
  return out;
}

}  // namespace dstgcnt
