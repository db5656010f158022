#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "miat/tensor.hpp"

namespace miat {

// Boolean attention mask; allow[i*cols+j] != 0 means query i may attend key j.
struct AttentionMask {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> allow;

  bool allowed(int i, int j) const { return allow[static_cast<std::size_t>(i) * cols + j] != 0; }
};

// Lower-triangular mask: position i may attend positions j <= i.
inline AttentionMask causal_mask(int t) {
  if (t < 1) throw ShapeError("causal_mask: T must be >= 1");
  AttentionMask m;
  m.rows = t;
  m.cols = t;
  m.allow.assign(static_cast<std::size_t>(t) * t, 0);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j <= i; ++j) m.allow[static_cast<std::size_t>(i) * t + j] = 1;
  return m;
}

namespace detail {

// Large additive penalty rather than post-hoc zeroing, so gradients of the
// surviving weights stay exact.
inline constexpr double kMaskPenalty = -1e30;

inline Tensor mask_to_additive(const AttentionMask& mask) {
  std::vector<double> data(mask.allow.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = mask.allow[i] ? 0.0 : kMaskPenalty;
  return Tensor(mask.rows, mask.cols, std::move(data));
}

}  // namespace detail

struct AttentionResult {
  Tensor output;
  Tensor weights;  // rows sum to 1
};

// softmax(Q K^T / sqrt(dk)) V with optional boolean masking. The scale uses
// the key width actually supplied, so per-head calls scale by sqrt(d_H).
inline AttentionResult scaled_dot_attention_with_weights(
    const Tensor& q, const Tensor& k, const Tensor& v,
    const AttentionMask* mask = nullptr) {
  if (q.cols() != k.cols())
    throw ShapeError("scaled_dot_attention: query/key widths differ");
  if (k.rows() != v.rows())
    throw ShapeError("scaled_dot_attention: key/value row counts differ");
  if (mask) {
    if (mask->rows != q.rows() || mask->cols != k.rows())
      throw ShapeError("scaled_dot_attention: mask shape mismatch");
    for (int i = 0; i < mask->rows; ++i) {
      bool any = false;
      for (int j = 0; j < mask->cols && !any; ++j) any = mask->allowed(i, j);
      if (!any)
        throw ShapeError("scaled_dot_attention: row " + std::to_string(i) + " is fully masked");
    }
  }
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.cols())));
  if (mask) scores = add(scores, detail::mask_to_additive(*mask));
  Tensor weights = softmax_rows(scores);
  return {matmul(weights, v), weights};
}

inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   const AttentionMask* mask = nullptr) {
  return scaled_dot_attention_with_weights(q, k, v, mask).output;
}

// Per-head projections kept as separate matrices; the frozen LTMI
// construction substitutes them one-for-one. Projections carry no biases.
struct AttentionParams {
  int heads = 0;
  int d_model = 0;
  std::vector<Tensor> w_q, w_k, w_v;  // each [d x d/H]
  Tensor w_o;                         // [d x d]

  int head_dim() const { return d_model / heads; }

  static AttentionParams init(int d_model, int heads, Rng& rng) {
    if (heads < 1 || d_model % heads != 0)
      throw ConfigError("attention: d must be divisible by H");
    AttentionParams p;
    p.heads = heads;
    p.d_model = d_model;
    const int dh = d_model / heads;
    const double std_qkv = std::sqrt(1.0 / d_model);
    for (int h = 0; h < heads; ++h) {
      p.w_q.push_back(Tensor::randn(d_model, dh, rng, std_qkv, true));
      p.w_k.push_back(Tensor::randn(d_model, dh, rng, std_qkv, true));
      p.w_v.push_back(Tensor::randn(d_model, dh, rng, std_qkv, true));
    }
    p.w_o = Tensor::randn(d_model, d_model, rng, std_qkv, true);
    return p;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (int h = 0; h < heads; ++h) {
      out.push_back(w_q[h]);
      out.push_back(w_k[h]);
      out.push_back(w_v[h]);
    }
    out.push_back(w_o);
    return out;
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& t : parameters()) n += static_cast<std::int64_t>(t.size());
    return n;
  }
};

inline Tensor multi_head_attention(const AttentionParams& params, const Tensor& q,
                                   const Tensor& k, const Tensor& v,
                                   const AttentionMask* mask = nullptr) {
  if (q.cols() != params.d_model || k.cols() != params.d_model || v.cols() != params.d_model)
    throw ShapeError("multi_head_attention: input width must equal d_model");
  std::vector<Tensor> heads;
  heads.reserve(params.heads);
  for (int h = 0; h < params.heads; ++h) {
    heads.push_back(scaled_dot_attention(matmul(q, params.w_q[h]), matmul(k, params.w_k[h]),
                                         matmul(v, params.w_v[h]), mask));
  }
  return matmul(concat_cols(std::span<const Tensor>(heads)), params.w_o);
}

// ReLU(x W1 + b1) W2 + b2
inline Tensor ffn(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                  const Tensor& b2) {
  return add_rowvec(matmul(relu(add_rowvec(matmul(x, w1), b1)), w2), b2);
}

// pe[t, 2i] = sin(t / 10000^(2i/d)), pe[t, 2i+1] = cos(t / 10000^(2i/d))
inline Tensor sinusoidal_pe(int t_steps, int d) {
  if (t_steps < 1) throw ShapeError("sinusoidal_pe: T must be >= 1");
  if (d < 2 || d % 2 != 0) throw ConfigError("sinusoidal_pe: d must be even");
  std::vector<double> data(static_cast<std::size_t>(t_steps) * d);
  for (int t = 0; t < t_steps; ++t) {
    for (int i = 0; i < d / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / d);
      data[static_cast<std::size_t>(t) * d + 2 * i] = std::sin(t * freq);
      data[static_cast<std::size_t>(t) * d + 2 * i + 1] = std::cos(t * freq);
    }
  }
  return Tensor(t_steps, d, std::move(data));
}

}  // namespace miat
