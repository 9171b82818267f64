#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "ffkv/numerics/matrix.hpp"

namespace ffkv {

struct AdamHyper {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;  // decoupled (AdamW style)
};

struct AdamState {
  std::vector<float> m;
  std::vector<float> v;
  std::size_t t = 0;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, 0.0f), v(n, 0.0f) {}

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

inline void adam_step(std::span<float> params, std::span<const float> grads, AdamState& state, const AdamHyper& hyper) {
  if (params.size() != grads.size()) throw DimensionError("adam_step: params/grads length mismatch");
  if (state.m.empty() && state.v.empty()) state = AdamState(params.size());
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw DimensionError("adam_step: optimizer state length mismatch");

  ++state.t;
  const double t = static_cast<double>(state.t);
  const float bc1 = static_cast<float>(1.0 - std::pow(static_cast<double>(hyper.beta1), t));
  const float bc2 = static_cast<float>(1.0 - std::pow(static_cast<double>(hyper.beta2), t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const float g = grads[i];
    state.m[i] = hyper.beta1 * state.m[i] + (1.0f - hyper.beta1) * g;
    state.v[i] = hyper.beta2 * state.v[i] + (1.0f - hyper.beta2) * g * g;
    const float m_hat = state.m[i] / bc1;
    const float v_hat = state.v[i] / bc2;
    if (hyper.weight_decay != 0.0f) params[i] -= hyper.lr * hyper.weight_decay * params[i];
    params[i] -= hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
  }
}

inline void adam_step(Matrix& params, const Matrix& grads, AdamState& state, const AdamHyper& hyper) {
  require_same_shape(params, grads, "adam_step");
  adam_step(params.flat(), grads.flat(), state, hyper);
}

}  // namespace ffkv
