#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ffkv/lm/config.hpp"
#include "ffkv/lm/feed_forward.hpp"
#include "ffkv/numerics/matrix.hpp"
#include "ffkv/numerics/ops.hpp"
#include "ffkv/numerics/rng.hpp"

namespace ffkv {

struct LayerNormWeights {
  Vector gain;
  Vector bias;
};

struct AttentionWeights {
  Matrix w_q, w_k, w_v, w_o;  // d_model x d_model each
};

struct LayerWeights {
  LayerNormWeights ln_attn;
  AttentionWeights attn;
  LayerNormWeights ln_ff;
  FeedForwardWeights ff;
};

// Decoder-only pre-norm transformer with learned positions.
//   x   = E[tok] + P[pos]
//   x  += Attn(LN(x))
//   x  += FF(LN(x))         ff_in = LN(x), ff_neuron = key activations, ff_out = FF output
//   out = LN(x) W_U + b_U
struct Model {
  ModelConfig config;
  Matrix token_embedding;     // vocab x d_model
  Matrix position_embedding;  // context x d_model
  std::vector<LayerWeights> layers;
  LayerNormWeights ln_final;
  Matrix unembed;  // d_model x vocab
  Vector unembed_bias;
};

struct TensorRef {
  std::string name;
  std::span<float> data;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

// Every trainable tensor in a fixed order. Used for checkpoints and the optimizer.
inline std::vector<TensorRef> named_tensors(Model& m) {
  std::vector<TensorRef> out;
  auto mat = [&](std::string name, Matrix& x) { out.push_back({std::move(name), x.flat(), x.rows(), x.cols()}); };
  auto vec = [&](std::string name, Vector& v) {
    if (!v.empty()) out.push_back({std::move(name), std::span<float>(v), 1, v.size()});
  };
  mat("token_embedding", m.token_embedding);
  mat("position_embedding", m.position_embedding);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto& L = m.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    vec(p + "ln_attn.gain", L.ln_attn.gain);
    vec(p + "ln_attn.bias", L.ln_attn.bias);
    mat(p + "attn.w_q", L.attn.w_q);
    mat(p + "attn.w_k", L.attn.w_k);
    mat(p + "attn.w_v", L.attn.w_v);
    mat(p + "attn.w_o", L.attn.w_o);
    vec(p + "ln_ff.gain", L.ln_ff.gain);
    vec(p + "ln_ff.bias", L.ln_ff.bias);
    mat(p + "ff.w_k", L.ff.w_k);
    if (L.ff.w_g) mat(p + "ff.w_g", *L.ff.w_g);
    mat(p + "ff.w_v", L.ff.w_v);
    vec(p + "ff.b_k", L.ff.b_k);
    vec(p + "ff.b_v", L.ff.b_v);
    vec(p + "ff.post_norm_gain", L.ff.post_norm_gain);
  }
  vec("ln_final.gain", m.ln_final.gain);
  vec("ln_final.bias", m.ln_final.bias);
  mat("unembed", m.unembed);
  vec("unembed_bias", m.unembed_bias);
  return out;
}

inline std::vector<TensorRef> named_tensors(const Model& m) { return named_tensors(const_cast<Model&>(m)); }

// Allocates a model with every tensor shaped per config and zero-filled
// (layer-norm gains at 1).
inline Model zero_model(const ModelConfig& cfg) {
  cfg.validate();
  Model m;
  m.config = cfg;
  const std::size_t d = cfg.d_model, f = cfg.d_ff;
  m.token_embedding = Matrix(cfg.vocab_size, d);
  m.position_embedding = Matrix(cfg.context_length, d);
  m.layers.resize(cfg.n_layers);
  for (auto& L : m.layers) {
    L.ln_attn = {Vector(d, 1.0f), Vector(d, 0.0f)};
    L.attn = {Matrix(d, d), Matrix(d, d), Matrix(d, d), Matrix(d, d)};
    L.ln_ff = {Vector(d, 1.0f), Vector(d, 0.0f)};
    L.ff.kind = cfg.activation;
    L.ff.w_k = Matrix(d, f);
    L.ff.w_v = Matrix(f, d);
    if (cfg.activation == ActivationKind::swiglu) L.ff.w_g = Matrix(d, f);
    if (cfg.ff_key_bias) L.ff.b_k = Vector(f, 0.0f);
    L.ff.b_v = Vector(d, 0.0f);
    if (cfg.post_ff_norm) L.ff.post_norm_gain = Vector(d, 1.0f);
  }
  m.ln_final = {Vector(d, 1.0f), Vector(d, 0.0f)};
  m.unembed = Matrix(d, cfg.vocab_size);
  m.unembed_bias = Vector(cfg.vocab_size, 0.0f);
  return m;
}

// Untrained model. Embeddings ~ N(0, 0.1^2); projections ~ N(0, 1/fan_in);
// residual-writing projections (attention output, W_V) additionally scaled by
// 1/sqrt(2 n_layers). Biases start at zero, norm gains at one.
inline Model random_init_model(const ModelConfig& cfg) {
  Model m = zero_model(cfg);
  RngStream rng(cfg.seed, 0x6d6f64656cULL);
  auto fill = [&](Matrix& x, double stddev) {
    for (auto& v : x.storage()) v = static_cast<float>(stddev * rng.normal());
  };
  const double d = static_cast<double>(cfg.d_model), f = static_cast<double>(cfg.d_ff);
  const double resid_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  fill(m.token_embedding, 0.1);
  fill(m.position_embedding, 0.1);
  for (auto& L : m.layers) {
    fill(L.attn.w_q, 1.0 / std::sqrt(d));
    fill(L.attn.w_k, 1.0 / std::sqrt(d));
    fill(L.attn.w_v, 1.0 / std::sqrt(d));
    fill(L.attn.w_o, resid_scale / std::sqrt(d));
    fill(L.ff.w_k, 1.0 / std::sqrt(d));
    if (L.ff.w_g) fill(*L.ff.w_g, 1.0 / std::sqrt(d));
    fill(L.ff.w_v, resid_scale / std::sqrt(f));
  }
  fill(m.unembed, 1.0 / std::sqrt(d));
  return m;
}

// ---------------------------------------------------------------------------
// Hooks

enum class HookSite { ff_in, ff_neuron, ff_out };

inline std::string to_string(HookSite s) {
  switch (s) {
    case HookSite::ff_in: return "ff_in";
    case HookSite::ff_neuron: return "ff_neuron";
    case HookSite::ff_out: return "ff_out";
  }
  return "?";
}

inline HookSite hook_site_from_string(const std::string& s) {
  if (s == "ff_in") return HookSite::ff_in;
  if (s == "ff_neuron") return HookSite::ff_neuron;
  if (s == "ff_out") return HookSite::ff_out;
  throw Error("unknown hook site '" + s + "'");
}

struct HookPoint {
  std::size_t layer = 0;
  HookSite site = HookSite::ff_out;
  auto operator<=>(const HookPoint&) const = default;
};

inline std::size_t hook_width(const ModelConfig& cfg, HookSite site) {
  return site == HookSite::ff_neuron ? cfg.d_ff : cfg.d_model;
}

// Per-token replacement values at a hook site (rows = tokens).
struct Injection {
  HookPoint at;
  Matrix values;
};

struct ForwardResult {
  Matrix logits;        // tokens x vocab (empty when logits were not requested)
  Matrix final_hidden;  // residual stream before the final norm
  std::map<HookPoint, Matrix> captured;
};

// Intermediates kept for backpropagation.
struct LayerCache {
  Matrix resid_in, attn_xhat, attn_in, q, k, v;
  std::vector<float> attn_rstd;
  std::vector<Matrix> probs;  // per head, tokens x tokens
  Matrix attn_concat;
  Matrix resid_mid, ff_xhat, ff_in;
  std::vector<float> ff_rstd;
  Matrix key, gate, neurons, value_sum;
  std::vector<float> post_rstd;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  Matrix final_xhat, final_out;
  std::vector<float> final_rstd;
};

inline Matrix layer_norm(const Matrix& x, const LayerNormWeights& w, Matrix* xhat_out, std::vector<float>* rstd_out) {
  Matrix y(x.rows(), x.cols());
  Matrix xhat(x.rows(), x.cols());
  std::vector<float> rstd(x.rows());
  const double n = static_cast<double>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto xr = x.row(r);
    double mu = 0.0;
    for (float v : xr) mu += v;
    mu /= n;
    double var = 0.0;
    for (float v : xr) var += (v - mu) * (v - mu);
    var /= n;
    const double rs = 1.0 / std::sqrt(var + kNormEps);
    rstd[r] = static_cast<float>(rs);
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const float h = static_cast<float>((xr[c] - mu) * rs);
      xhat(r, c) = h;
      y(r, c) = h * w.gain[c] + w.bias[c];
    }
  }
  if (xhat_out) *xhat_out = std::move(xhat);
  if (rstd_out) *rstd_out = std::move(rstd);
  return y;
}

namespace detail {

inline Matrix causal_attention(const AttentionWeights& w, const Matrix& x, std::size_t n_heads, LayerCache* cache) {
  const std::size_t t = x.rows(), d = x.cols(), hd = d / n_heads;
  Matrix q = matmul(x, w.w_q), k = matmul(x, w.w_k), v = matmul(x, w.w_v);
  Matrix concat(t, d);
  const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(hd)));
  std::vector<Matrix> probs;
  if (cache) probs.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    Matrix p(t, t);
    for (std::size_t i = 0; i < t; ++i) {
      float mx = -1e30f;
      for (std::size_t j = 0; j <= i; ++j) {
        float s = 0.0f;
        for (std::size_t c = 0; c < hd; ++c) s += q(i, off + c) * k(j, off + c);
        s *= scale;
        p(i, j) = s;
        mx = std::max(mx, s);
      }
      float z = 0.0f;
      for (std::size_t j = 0; j <= i; ++j) z += (p(i, j) = std::exp(p(i, j) - mx));
      for (std::size_t j = 0; j <= i; ++j) p(i, j) /= z;
      for (std::size_t j = 0; j <= i; ++j) {
        const float pj = p(i, j);
        for (std::size_t c = 0; c < hd; ++c) concat(i, off + c) += pj * v(j, off + c);
      }
    }
    if (cache) probs.push_back(std::move(p));
  }
  Matrix out = matmul(concat, w.w_o);
  if (cache) {
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->attn_concat = std::move(concat);
  }
  return out;
}

inline const Matrix* find_injection(const std::vector<Injection>& inject, std::size_t layer, HookSite site) {
  for (const auto& inj : inject)
    if (inj.at.layer == layer && inj.at.site == site) return &inj.values;
  return nullptr;
}

}  // namespace detail

// Runs the model on one token sequence, capturing and optionally replacing
// the tensors at the requested hook points. `cache` (training only) receives
// every intermediate needed for backpropagation.
inline ForwardResult forward_with_hooks(const Model& model, std::span<const int> tokens, const std::vector<HookPoint>& capture = {},
                                        const std::vector<Injection>& inject = {}, bool want_logits = true,
                                        ForwardCache* cache = nullptr) {
  const auto& cfg = model.config;
  const std::size_t t = tokens.size(), d = cfg.d_model;
  if (t == 0) throw Error("forward_with_hooks: empty token sequence");
  if (t > cfg.context_length)
    throw Error("forward_with_hooks: " + std::to_string(t) + " tokens exceed context length " + std::to_string(cfg.context_length));
  for (const auto& hp : capture)
    if (hp.layer >= cfg.n_layers) throw Error("forward_with_hooks: unknown hook layer " + std::to_string(hp.layer));
  for (const auto& inj : inject) {
    if (inj.at.layer >= cfg.n_layers) throw Error("forward_with_hooks: unknown injection layer " + std::to_string(inj.at.layer));
    if (inj.values.rows() != t || inj.values.cols() != hook_width(cfg, inj.at.site))
      throw DimensionError("forward_with_hooks: injection at layer " + std::to_string(inj.at.layer) + " " + to_string(inj.at.site) +
                           " has shape " + std::to_string(inj.values.rows()) + "x" + std::to_string(inj.values.cols()));
  }

  ForwardResult result;
  auto wants = [&](std::size_t layer, HookSite site) {
    for (const auto& hp : capture)
      if (hp.layer == layer && hp.site == site) return true;
    return false;
  };

  Matrix x(t, d);
  for (std::size_t i = 0; i < t; ++i) {
    const int tok = tokens[i];
    if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab_size) throw Error("forward_with_hooks: token id out of range");
    auto e = model.token_embedding.row(static_cast<std::size_t>(tok));
    auto p = model.position_embedding.row(i);
    for (std::size_t c = 0; c < d; ++c) x(i, c) = e[c] + p[c];
  }
  if (cache) cache->layers.assign(cfg.n_layers, LayerCache{});

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& L = model.layers[l];
    LayerCache* lc = cache ? &cache->layers[l] : nullptr;
    if (lc) lc->resid_in = x;

    Matrix a_in = layer_norm(x, L.ln_attn, lc ? &lc->attn_xhat : nullptr, lc ? &lc->attn_rstd : nullptr);
    Matrix attn_out = detail::causal_attention(L.attn, a_in, cfg.n_heads, lc);
    if (lc) lc->attn_in = std::move(a_in);
    add_in_place(x, attn_out);
    if (lc) lc->resid_mid = x;

    Matrix f_in = layer_norm(x, L.ln_ff, lc ? &lc->ff_xhat : nullptr, lc ? &lc->ff_rstd : nullptr);
    if (const Matrix* v = detail::find_injection(inject, l, HookSite::ff_in)) f_in = *v;
    if (wants(l, HookSite::ff_in)) result.captured[{l, HookSite::ff_in}] = f_in;

    Matrix key, gate;
    ff_preactivations(L.ff, f_in, key, gate);
    Matrix neurons = ff_activate(L.ff, key, gate);
    if (const Matrix* v = detail::find_injection(inject, l, HookSite::ff_neuron)) neurons = *v;
    if (wants(l, HookSite::ff_neuron)) result.captured[{l, HookSite::ff_neuron}] = neurons;

    Matrix y = ff_value_sum(L.ff, neurons);
    if (lc) lc->value_sum = y;
    if (L.ff.has_post_norm()) {
      if (lc) {
        lc->post_rstd.resize(t);
        for (std::size_t r = 0; r < t; ++r)
          lc->post_rstd[r] = static_cast<float>(1.0 / std::sqrt(squared_norm(y.row(r)) / static_cast<double>(d) + kNormEps));
      }
      rms_norm_rows(y, L.ff.post_norm_gain);
    }
    if (const Matrix* v = detail::find_injection(inject, l, HookSite::ff_out)) y = *v;
    if (wants(l, HookSite::ff_out)) result.captured[{l, HookSite::ff_out}] = y;
    add_in_place(x, y);

    if (lc) {
      lc->ff_in = std::move(f_in);
      lc->key = std::move(key);
      lc->gate = std::move(gate);
      lc->neurons = std::move(neurons);
    }
  }

  result.final_hidden = x;
  if (want_logits || cache) {
    Matrix xhat;
    std::vector<float> rstd;
    Matrix z = layer_norm(x, model.ln_final, cache ? &xhat : nullptr, cache ? &rstd : nullptr);
    result.logits = matmul(z, model.unembed);
    add_row_vector(result.logits, model.unembed_bias);
    if (cache) {
      cache->final_xhat = std::move(xhat);
      cache->final_rstd = std::move(rstd);
      cache->final_out = std::move(z);
    }
  }
  return result;
}

inline int greedy_next_token(const Model& model, std::span<const int> tokens, const std::vector<Injection>& inject = {}) {
  const auto res = forward_with_hooks(model, tokens, {}, inject);
  auto last = res.logits.row(res.logits.rows() - 1);
  return static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
}

}  // namespace ffkv
