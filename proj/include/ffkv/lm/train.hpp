#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <span>
#include <vector>

#include "ffkv/lm/model.hpp"
#include "ffkv/numerics/adam.hpp"
#include "ffkv/numerics/ops.hpp"
#include "ffkv/numerics/rng.hpp"

namespace ffkv {

namespace detail {

// dy -> dx for y = xhat * gain + bias, accumulating parameter grads.
inline Matrix layer_norm_backward(const Matrix& dy, const Matrix& xhat, const std::vector<float>& rstd, const LayerNormWeights& w,
                                  LayerNormWeights& g) {
  const std::size_t n = dy.cols();
  Matrix dx(dy.rows(), n);
  std::vector<float> dxhat(n);
  for (std::size_t r = 0; r < dy.rows(); ++r) {
    auto dyr = dy.row(r);
    auto xr = xhat.row(r);
    double sum_d = 0.0, sum_dx = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      g.gain[c] += dyr[c] * xr[c];
      g.bias[c] += dyr[c];
      dxhat[c] = dyr[c] * w.gain[c];
      sum_d += dxhat[c];
      sum_dx += static_cast<double>(dxhat[c]) * xr[c];
    }
    const float md = static_cast<float>(sum_d / n), mdx = static_cast<float>(sum_dx / n);
    for (std::size_t c = 0; c < n; ++c) dx(r, c) = rstd[r] * (dxhat[c] - md - xr[c] * mdx);
  }
  return dx;
}

// Backward through out = (y * rstd) * gain.
inline Matrix rms_norm_backward(const Matrix& dout, const Matrix& y, const std::vector<float>& rstd, const Vector& gain, Vector& dgain) {
  const std::size_t n = dout.cols();
  Matrix dy(dout.rows(), n);
  for (std::size_t r = 0; r < dout.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const float yhat = y(r, c) * rstd[r];
      dgain[c] += dout(r, c) * yhat;
      s += static_cast<double>(dout(r, c) * gain[c]) * yhat;
    }
    const float m = static_cast<float>(s / n);
    for (std::size_t c = 0; c < n; ++c) dy(r, c) = rstd[r] * (dout(r, c) * gain[c] - y(r, c) * rstd[r] * m);
  }
  return dy;
}

}  // namespace detail

// Model-shaped buffer with every tensor zeroed, for accumulating gradients.
inline Model gradient_buffer(const ModelConfig& cfg) {
  Model g = zero_model(cfg);
  for (auto& t : named_tensors(g)) std::fill(t.data.begin(), t.data.end(), 0.0f);
  return g;
}

// Forward + backward on one sequence; accumulates `scale * dLoss` into grads
// and returns the summed next-token negative log-likelihood.
inline double accumulate_sequence_gradient(const Model& m, std::span<const int> inputs, std::span<const int> targets, Model& g,
                                           float scale) {
  const auto& cfg = m.config;
  const std::size_t t = inputs.size(), d = cfg.d_model, hd = cfg.head_dim();
  ForwardCache cache;
  ForwardResult res = forward_with_hooks(m, inputs, {}, {}, true, &cache);

  Matrix dlogits = std::move(res.logits);
  double loss = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    auto row = dlogits.row(i);
    const float mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (float v : row) z += std::exp(static_cast<double>(v - mx));
    const auto tgt = static_cast<std::size_t>(targets[i]);
    loss += -(static_cast<double>(row[tgt] - mx) - std::log(z));
    for (std::size_t c = 0; c < row.size(); ++c)
      row[c] = static_cast<float>(std::exp(static_cast<double>(row[c] - mx)) / z) * scale;
    row[tgt] -= scale;
  }

  add_matmul_at(cache.final_out, dlogits, g.unembed);
  add_column_sums(dlogits, g.unembed_bias);
  Matrix dz = matmul_bt(dlogits, m.unembed);
  Matrix dx = detail::layer_norm_backward(dz, cache.final_xhat, cache.final_rstd, m.ln_final, g.ln_final);

  for (std::size_t l = cfg.n_layers; l-- > 0;) {
    const auto& L = m.layers[l];
    auto& G = g.layers[l];
    const auto& c = cache.layers[l];

    // Feed-forward branch.
    Matrix dvals = L.ff.has_post_norm() ? detail::rms_norm_backward(dx, c.value_sum, c.post_rstd, L.ff.post_norm_gain, G.ff.post_norm_gain)
                                        : dx;
    add_matmul_at(c.neurons, dvals, G.ff.w_v);
    add_column_sums(dvals, G.ff.b_v);
    Matrix dh = matmul_bt(dvals, L.ff.w_v);
    Matrix dkey(dh.rows(), dh.cols()), dgate;
    {
      const auto& h = dh.storage();
      const auto& k = c.key.storage();
      auto& dk = dkey.storage();
      switch (L.ff.kind) {
        case ActivationKind::relu:
          for (std::size_t i = 0; i < h.size(); ++i) dk[i] = k[i] > 0.0f ? h[i] : 0.0f;
          break;
        case ActivationKind::gelu:
          for (std::size_t i = 0; i < h.size(); ++i) dk[i] = h[i] * gelu_grad(k[i]);
          break;
        case ActivationKind::swiglu: {
          dgate = Matrix(dh.rows(), dh.cols());
          auto& dg = dgate.storage();
          const auto& gt = c.gate.storage();
          for (std::size_t i = 0; i < h.size(); ++i) {
            dg[i] = h[i] * swish(k[i]);
            dk[i] = h[i] * gt[i] * swish_grad(k[i]);
          }
          break;
        }
      }
    }
    add_matmul_at(c.ff_in, dkey, G.ff.w_k);
    if (!G.ff.b_k.empty()) add_column_sums(dkey, G.ff.b_k);
    Matrix dff_in = matmul_bt(dkey, L.ff.w_k);
    if (L.ff.w_g) {
      add_matmul_at(c.ff_in, dgate, *G.ff.w_g);
      add_in_place(dff_in, matmul_bt(dgate, *L.ff.w_g));
    }
    Matrix dmid = dx;
    add_in_place(dmid, detail::layer_norm_backward(dff_in, c.ff_xhat, c.ff_rstd, L.ln_ff, G.ln_ff));

    // Attention branch.
    add_matmul_at(c.attn_concat, dmid, G.attn.w_o);
    Matrix dconcat = matmul_bt(dmid, L.attn.w_o);
    Matrix dq(t, d), dk(t, d), dv(t, d);
    const float sc = static_cast<float>(1.0 / std::sqrt(static_cast<double>(hd)));
    std::vector<float> dp(t);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const std::size_t off = h * hd;
      const Matrix& p = c.probs[h];
      for (std::size_t i = 0; i < t; ++i) {
        float dot_pdp = 0.0f;
        for (std::size_t j = 0; j <= i; ++j) {
          float s = 0.0f;
          for (std::size_t q = 0; q < hd; ++q) s += dconcat(i, off + q) * c.v(j, off + q);
          dp[j] = s;
          dot_pdp += p(i, j) * s;
          const float pij = p(i, j);
          for (std::size_t q = 0; q < hd; ++q) dv(j, off + q) += pij * dconcat(i, off + q);
        }
        for (std::size_t j = 0; j <= i; ++j) {
          const float ds = p(i, j) * (dp[j] - dot_pdp) * sc;
          if (ds == 0.0f) continue;
          for (std::size_t q = 0; q < hd; ++q) {
            dq(i, off + q) += ds * c.k(j, off + q);
            dk(j, off + q) += ds * c.q(i, off + q);
          }
        }
      }
    }
    add_matmul_at(c.attn_in, dq, G.attn.w_q);
    add_matmul_at(c.attn_in, dk, G.attn.w_k);
    add_matmul_at(c.attn_in, dv, G.attn.w_v);
    Matrix da = matmul_bt(dq, L.attn.w_q);
    add_in_place(da, matmul_bt(dk, L.attn.w_k));
    add_in_place(da, matmul_bt(dv, L.attn.w_v));
    dx = std::move(dmid);
    add_in_place(dx, detail::layer_norm_backward(da, c.attn_xhat, c.attn_rstd, L.ln_attn, G.ln_attn));
  }

  for (std::size_t i = 0; i < t; ++i) {
    auto e = g.token_embedding.row(static_cast<std::size_t>(inputs[i]));
    auto p = g.position_embedding.row(i);
    for (std::size_t q = 0; q < d; ++q) {
      e[q] += dx(i, q);
      p[q] += dx(i, q);
    }
  }
  return loss;
}

struct LmTrainConfig {
  std::size_t batch_size = 16;
  std::size_t seq_len = 0;  // 0 = context length
  AdamHyper adam{.lr = 3e-3f, .beta1 = 0.9f, .beta2 = 0.99f, .eps = 1e-8f, .weight_decay = 0.0f};
  float grad_clip = 1.0f;
  std::size_t warmup_steps = 20;
  double holdout_fraction = 0.1;
};

struct LmTrainLog {
  std::vector<double> losses;   // mean per-token NLL per step (nats)
  double heldout_cross_entropy = 0.0;
  double unigram_entropy = 0.0;
  std::size_t train_tokens = 0;
  std::size_t heldout_tokens = 0;
};

struct TrainedLm {
  Model model;
  LmTrainLog log;
};

// Documents joined with a separator token into one stream.
inline std::vector<int> join_documents(const std::vector<std::vector<int>>& docs, int separator) {
  std::vector<int> stream;
  for (const auto& doc : docs) {
    stream.insert(stream.end(), doc.begin(), doc.end());
    stream.push_back(separator);
  }
  return stream;
}

inline double unigram_entropy(std::span<const int> stream) {
  std::map<int, std::size_t> counts;
  for (int t : stream) ++counts[t];
  double h = 0.0;
  const double n = static_cast<double>(stream.size());
  for (const auto& [tok, c] : counts) {
    const double p = static_cast<double>(c) / n;
    h -= p * std::log(p);
  }
  return h;
}

// Mean next-token NLL over non-overlapping windows of the stream.
inline double stream_cross_entropy(const Model& model, std::span<const int> stream) {
  const std::size_t ctx = model.config.context_length;
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t start = 0; start + 1 < stream.size(); start += ctx) {
    const std::size_t len = std::min(ctx, stream.size() - 1 - start);
    const auto res = forward_with_hooks(model, stream.subspan(start, len));
    for (std::size_t i = 0; i < len; ++i) {
      auto row = res.logits.row(i);
      const float mx = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (float v : row) z += std::exp(static_cast<double>(v - mx));
      total += std::log(z) - static_cast<double>(row[static_cast<std::size_t>(stream[start + i + 1])] - mx);
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

class LmTrainer {
 public:
  LmTrainer(Model model, LmTrainConfig cfg) : model_(std::move(model)), cfg_(cfg), grads_(gradient_buffer(model_.config)) {
    for (const auto& t : named_tensors(model_)) states_.emplace_back(t.data.size());
  }

  const Model& model() const { return model_; }
  Model& model() { return model_; }

  // One optimizer step on a batch of (input, target) windows.
  double step(const std::vector<std::span<const int>>& windows) {
    zero_grads();
    std::size_t ntok = 0;
    for (const auto& w : windows) ntok += w.size() - 1;
    const float scale = 1.0f / static_cast<float>(ntok);
    double loss = 0.0;
    for (const auto& w : windows)
      loss += accumulate_sequence_gradient(model_, w.first(w.size() - 1), w.subspan(1), grads_, scale);

    auto params = named_tensors(model_);
    auto grads = named_tensors(grads_);
    double norm2 = 0.0;
    for (const auto& g : grads) norm2 += squared_norm(g.data);
    const double norm = std::sqrt(norm2);
    if (cfg_.grad_clip > 0.0f && norm > cfg_.grad_clip) {
      const float s = static_cast<float>(cfg_.grad_clip / norm);
      for (auto& g : grads)
        for (auto& v : g.data) v *= s;
    }
    AdamHyper h = cfg_.adam;
    h.lr = current_lr();
    for (std::size_t i = 0; i < params.size(); ++i) adam_step(params[i].data, grads[i].data, states_[i], h);
    ++steps_done_;
    return loss / static_cast<double>(ntok);
  }

  void set_total_steps(std::size_t n) { total_steps_ = n; }

 private:
  float current_lr() const {
    const double base = cfg_.adam.lr;
    if (cfg_.warmup_steps > 0 && steps_done_ < cfg_.warmup_steps)
      return static_cast<float>(base * static_cast<double>(steps_done_ + 1) / static_cast<double>(cfg_.warmup_steps));
    if (total_steps_ <= cfg_.warmup_steps) return static_cast<float>(base);
    const double progress =
        static_cast<double>(steps_done_ - cfg_.warmup_steps) / static_cast<double>(total_steps_ - cfg_.warmup_steps);
    return static_cast<float>(base * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)))));
  }

  void zero_grads() {
    for (auto& t : named_tensors(grads_)) std::fill(t.data.begin(), t.data.end(), 0.0f);
  }

  Model model_;
  LmTrainConfig cfg_;
  Model grads_;
  std::vector<AdamState> states_;
  std::size_t steps_done_ = 0;
  std::size_t total_steps_ = 0;
};

// Trains from random initialization on the joined document stream. The last
// `holdout_fraction` of the stream is held out for the cross-entropy report.
inline TrainedLm train_lm(const ModelConfig& config, const std::vector<std::vector<int>>& documents, int separator, std::size_t steps,
                          const LmTrainConfig& train_cfg = {}) {
  const std::vector<int> stream = join_documents(documents, separator);
  std::size_t doc_tokens = 0;
  for (const auto& d : documents) doc_tokens += d.size();
  if (doc_tokens == 0) throw Error("train_lm: empty corpus");

  const std::size_t seq = train_cfg.seq_len ? std::min(train_cfg.seq_len, config.context_length) : config.context_length;
  std::size_t split = static_cast<std::size_t>(static_cast<double>(stream.size()) * (1.0 - train_cfg.holdout_fraction));
  split = std::clamp<std::size_t>(split, std::min(stream.size(), seq + 2), stream.size());
  const std::span<const int> train(stream.data(), split);
  const std::span<const int> heldout(stream.data() + split, stream.size() - split);

  TrainedLm out{random_init_model(config), {}};
  out.log.unigram_entropy = unigram_entropy(stream);
  out.log.train_tokens = train.size();
  out.log.heldout_tokens = heldout.size();

  if (steps > 0) {
    if (train.size() < 2) throw Error("train_lm: corpus too small for one training window");
    LmTrainer trainer(std::move(out.model), train_cfg);
    trainer.set_total_steps(steps);
    RngStream rng(config.seed, 0x747261696eULL);
    const std::size_t win = std::min(seq + 1, train.size());
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<std::span<const int>> batch;
      for (std::size_t b = 0; b < train_cfg.batch_size; ++b) {
        const std::size_t start = static_cast<std::size_t>(rng.below(train.size() - win + 1));
        batch.push_back(train.subspan(start, win));
      }
      out.log.losses.push_back(trainer.step(batch));
    }
    out.model = std::move(trainer.model());
  }
  if (heldout.size() >= 2) out.log.heldout_cross_entropy = stream_cross_entropy(out.model, heldout);
  return out;
}

}  // namespace ffkv
