#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>

#include "ffkv/lm/config.hpp"
#include "ffkv/numerics/matrix.hpp"
#include "ffkv/numerics/ops.hpp"

namespace ffkv {

inline float gelu(float z) { return 0.5f * z * (1.0f + std::erf(z * static_cast<float>(std::numbers::sqrt2 / 2))); }

inline float gelu_grad(float z) {
  const float cdf = 0.5f * (1.0f + std::erf(z * static_cast<float>(std::numbers::sqrt2 / 2)));
  const float pdf = std::exp(-0.5f * z * z) * static_cast<float>(1.0 / std::sqrt(2.0 * std::numbers::pi));
  return cdf + z * pdf;
}

inline float sigmoid(float z) { return 1.0f / (1.0f + std::exp(-z)); }

inline float swish(float z) { return z * sigmoid(z); }

inline float swish_grad(float z) {
  const float s = sigmoid(z);
  return s * (1.0f + z * (1.0f - s));
}

constexpr float kNormEps = 1e-5f;

// Feed-forward sublayer as key-value memory. Row-vector convention:
//   neurons = phi(x W_K + b_K)                  (gelu / relu)
//   neurons = (x W_G) * swish(x W_K)            (swiglu)
//   out     = neurons W_V + b_V, then an optional RMS post-norm.
struct FeedForwardWeights {
  ActivationKind kind = ActivationKind::swiglu;
  Matrix w_k;                  // d_model x d_ff
  Matrix w_v;                  // d_ff x d_model
  std::optional<Matrix> w_g;   // d_model x d_ff, swiglu only
  Vector b_k;                  // d_ff, or empty
  Vector b_v;                  // d_model
  Vector post_norm_gain;       // d_model, or empty when the post-FF norm is off

  std::size_t d_model() const { return w_k.rows(); }
  std::size_t d_ff() const { return w_k.cols(); }
  bool has_post_norm() const { return !post_norm_gain.empty(); }

  void validate() const {
    if (w_v.rows() != d_ff() || w_v.cols() != d_model()) throw DimensionError("FeedForwardWeights: W_V shape");
    if ((kind == ActivationKind::swiglu) != w_g.has_value())
      throw Error("FeedForwardWeights: W_G must be present iff activation is swiglu");
    if (w_g && (w_g->rows() != d_model() || w_g->cols() != d_ff())) throw DimensionError("FeedForwardWeights: W_G shape");
    if (!b_k.empty() && b_k.size() != d_ff()) throw DimensionError("FeedForwardWeights: b_K length");
    if (b_v.size() != d_model()) throw DimensionError("FeedForwardWeights: b_V length");
    if (has_post_norm() && post_norm_gain.size() != d_model()) throw DimensionError("FeedForwardWeights: post-norm gain");
  }
};

// Row-wise RMS normalization with a gain.
inline void rms_norm_rows(Matrix& y, std::span<const float> gain) {
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    const double ms = squared_norm(row) / static_cast<double>(row.size());
    const float scale = static_cast<float>(1.0 / std::sqrt(ms + kNormEps));
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = row[c] * scale * gain[c];
  }
}

// Pre-activations for one batch of rows; `gate` is filled for swiglu.
inline void ff_preactivations(const FeedForwardWeights& ff, const Matrix& x, Matrix& key, Matrix& gate) {
  if (x.cols() != ff.d_model()) throw DimensionError("feed-forward input width mismatch");
  key = matmul(x, ff.w_k);
  if (!ff.b_k.empty()) add_row_vector(key, ff.b_k);
  if (ff.w_g) gate = matmul(x, *ff.w_g);
}

inline Matrix ff_activate(const FeedForwardWeights& ff, const Matrix& key, const Matrix& gate) {
  Matrix h(key.rows(), key.cols());
  const auto& k = key.storage();
  auto& out = h.storage();
  switch (ff.kind) {
    case ActivationKind::relu:
      for (std::size_t i = 0; i < k.size(); ++i) out[i] = k[i] > 0.0f ? k[i] : 0.0f;
      break;
    case ActivationKind::gelu:
      for (std::size_t i = 0; i < k.size(); ++i) out[i] = gelu(k[i]);
      break;
    case ActivationKind::swiglu: {
      const auto& g = gate.storage();
      for (std::size_t i = 0; i < k.size(); ++i) out[i] = g[i] * swish(k[i]);
      break;
    }
  }
  return h;
}

// Neuron activations (the key activations) for rows of x at d_model.
inline Matrix ff_neurons(const FeedForwardWeights& ff, const Matrix& x) {
  Matrix key, gate;
  ff_preactivations(ff, x, key, gate);
  return ff_activate(ff, key, gate);
}

// neurons W_V + b_V, without the post-norm.
inline Matrix ff_value_sum(const FeedForwardWeights& ff, const Matrix& neurons) {
  if (neurons.cols() != ff.d_ff()) throw DimensionError("feed-forward neuron width mismatch");
  Matrix y = matmul(neurons, ff.w_v);
  add_row_vector(y, ff.b_v);
  return y;
}

inline Matrix ff_output_from_neurons(const FeedForwardWeights& ff, const Matrix& neurons) {
  Matrix y = ff_value_sum(ff, neurons);
  if (ff.has_post_norm()) rms_norm_rows(y, ff.post_norm_gain);
  return y;
}

inline Matrix ff_forward(const FeedForwardWeights& ff, const Matrix& x) { return ff_output_from_neurons(ff, ff_neurons(ff, x)); }

}  // namespace ffkv
