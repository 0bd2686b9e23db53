#pragma once

// Transformer encoder over frame tokens and the scalar score readout.

#include <cmath>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace dstgcnt {

enum class ReadoutMode { mean, last_token };

inline ReadoutMode parse_readout_mode(const std::string& s) {
  if (s == "mean") return ReadoutMode::mean;
  if (s == "last_token") return ReadoutMode::last_token;
  fail(ErrorKind::config, "unknown readout '" + s + "' (expected mean or last_token)");
}

inline const char* to_string(ReadoutMode m) { return m == ReadoutMode::mean ? "mean" : "last_token"; }

/// Sinusoidal table: PE(x, 2i) = sin(x / 10000^(2i/d)), PE(x, 2i+1) = cos(same).
template <class T>
std::vector<T> positional_encoding(std::size_t length, std::size_t d) {
  if (d % 2 != 0) fail(ErrorKind::config, "positional encoding needs an even dimension, got " + std::to_string(d));
  std::vector<T> pe(length * d);
  for (std::size_t x = 0; x < length; ++x) {
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double angle =
          static_cast<double>(x) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
      pe[x * d + 2 * i] = static_cast<T>(std::sin(angle));
      pe[x * d + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return pe;
}

template <class T>
struct HeadParams {
  Var<T> wq, wk, wv;  // [model_dim, head_dim]
};

template <class T>
struct EncoderParams {
  Var<T> ln1_gain, ln1_bias;
  std::vector<HeadParams<T>> heads;
  Var<T> w_o;  // [heads * head_dim, model_dim]
  Var<T> ln2_gain, ln2_bias;
  Var<T> ff1_w, ff1_b;  // width-1 convolution model_dim -> ff_hidden
  Var<T> ff2_w, ff2_b;  // width-1 convolution ff_hidden -> model_dim
};

struct EncoderOptions {
  double dropout = 0.1;
  double layer_norm_eps = 1e-6;
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

/// Softmax(Q K^T / sqrt(dim)) V per head, heads concatenated and mixed by W_O.
/// `key_mask` is [B*T], 1 for valid tokens. Padded keys get zero weight.
template <class T>
Var<T> multi_head_attention(const Var<T>& z, const std::vector<HeadParams<T>>& heads, const Var<T>& w_o,
                            const std::vector<T>& key_mask, std::vector<Var<T>>* weights_out = nullptr) {
  if (z.rank() != 3) fail(ErrorKind::shape, "multi_head_attention expects [B, T, D], got " + shape_str(z.shape()));
  const std::size_t b_len = z.dim(0), t_len = z.dim(1);
  std::vector<std::uint8_t> mask(b_len * t_len * t_len, 1);
  if (!key_mask.empty()) {
    if (key_mask.size() != b_len * t_len) fail(ErrorKind::shape, "multi_head_attention: mask size mismatch");
    for (std::size_t b = 0; b < b_len; ++b) {
      bool any = false;
      for (std::size_t k = 0; k < t_len; ++k) any = any || key_mask[b * t_len + k] != T{0};
      if (!any) fail(ErrorKind::contract, "multi_head_attention: sequence " + std::to_string(b) + " is fully masked");
      for (std::size_t q = 0; q < t_len; ++q)
        for (std::size_t k = 0; k < t_len; ++k) mask[(b * t_len + q) * t_len + k] = key_mask[b * t_len + k] != T{0};
    }
  }
  std::vector<Var<T>> outs;
  for (const auto& head : heads) {
    const Var<T> q = matmul(z, head.wq);
    const Var<T> k = matmul(z, head.wk);
    const Var<T> v = matmul(z, head.wv);
    const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(head.wq.dim(1)));
    const Var<T> weights = masked_softmax(scale(bmm(q, k, true), inv_sqrt), &mask);
    if (weights_out) weights_out->push_back(weights);
    outs.push_back(bmm(weights, v));
  }
  return matmul(outs.size() == 1 ? outs[0] : concat(outs, -1), w_o);
}

/// Pre-norm block: Y = Z + Dropout(MHA(LN(Z))); out = Y + FF(LN(Y)).
template <class T>
Var<T> encoder_block(const Var<T>& z, const EncoderParams<T>& p, const std::vector<T>& mask, const EncoderOptions& opt) {
  const T eps = static_cast<T>(opt.layer_norm_eps);
  const Var<T> attn = multi_head_attention(layer_norm(z, p.ln1_gain, p.ln1_bias, eps), p.heads, p.w_o, mask);
  if (attn.shape() != z.shape()) {
    fail(ErrorKind::config, "encoder_block: attention output " + shape_str(attn.shape()) + " cannot be added to " +
                                shape_str(z.shape()));
  }
  const Var<T> y = add(z, dropout(attn, opt.dropout, opt.dropout_seed, opt.training));
  const Var<T> hidden = relu(affine(layer_norm(y, p.ln2_gain, p.ln2_bias, eps), p.ff1_w, p.ff1_b));
  const Var<T> ff = affine(hidden, p.ff2_w, p.ff2_b);
  if (ff.shape() != y.shape()) fail(ErrorKind::config, "encoder_block: feed-forward width does not match the residual");
  return add(y, ff);
}

/// Pools encoded[B, T, D] over valid frames and maps to one score per sequence.
template <class T>
Var<T> readout(const Var<T>& encoded, const std::vector<T>& mask, const Var<T>& w, const Var<T>& b, ReadoutMode mode) {
  const std::size_t b_len = encoded.dim(0), t_len = encoded.dim(1);
  std::vector<T> m = mask.empty() ? std::vector<T>(b_len * t_len, T{1}) : mask;
  Var<T> pooled;
  if (mode == ReadoutMode::mean) {
    pooled = masked_time_mean(encoded, m);
  } else {
    std::vector<std::size_t> last(b_len, 0);
    for (std::size_t i = 0; i < b_len; ++i)
      for (std::size_t t = 0; t < t_len; ++t)
        if (m[i * t_len + t] != T{0}) last[i] = t;
    pooled = gather_time(encoded, last);
  }
  return reshape(affine(pooled, w, b), {b_len});
}

}  // namespace dstgcnt
