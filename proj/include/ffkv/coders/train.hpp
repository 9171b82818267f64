#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <nlohmann/json.hpp>

#include "ffkv/coders/coder.hpp"
#include "ffkv/lm/capture.hpp"
#include "ffkv/numerics/adam.hpp"
#include "ffkv/numerics/rng.hpp"

namespace ffkv {

struct SparseCoderHyper {
  std::size_t width = 512;
  SparseActivation activation = SparseActivation::relu;
  std::size_t k = 32;  // topk activation only
  double l1 = 1e-3;
  std::size_t steps = 2000;
  std::size_t batch_size = 256;
  float lr = 1e-3f;
  std::uint64_t seed = 0;
  bool resample_dead = true;
  float theta_init = 1e-3f;
  float jump_bandwidth = 1e-3f;
};

inline void to_json(nlohmann::json& j, const SparseCoderHyper& h) {
  j = {{"width", h.width},   {"activation", to_string(h.activation)}, {"k", h.k},
       {"l1", h.l1},         {"steps", h.steps},
       {"batch_size", h.batch_size}, {"lr", h.lr}, {"seed", h.seed}, {"resample_dead", h.resample_dead},
       {"theta_init", h.theta_init}, {"jump_bandwidth", h.jump_bandwidth}};
}

inline void from_json(const nlohmann::json& j, SparseCoderHyper& h) {
  const SparseCoderHyper d;
  h.width = j.value("width", d.width);
  h.activation = sparse_activation_from_string(j.value("activation", to_string(d.activation)));
  h.k = j.value("k", d.k);
  h.l1 = j.value("l1", d.l1);
  h.steps = j.value("steps", d.steps);
  h.batch_size = j.value("batch_size", d.batch_size);
  h.lr = j.value("lr", d.lr);
  h.seed = j.value("seed", d.seed);
  h.resample_dead = j.value("resample_dead", d.resample_dead);
  h.theta_init = j.value("theta_init", d.theta_init);
  h.jump_bandwidth = j.value("jump_bandwidth", d.jump_bandwidth);
}

struct SparseCoderTrainLog {
  std::vector<double> losses;        // per step
  std::vector<double> epoch_losses;  // mean per completed epoch
  double final_l0 = 0.0;
  std::size_t resampled = 0;
};

struct TrainedSparseCoder {
  SparseCoderWeights weights;
  SparseCoderTrainLog log;
};

namespace detail {

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) std::copy(m.row(idx[r]).begin(), m.row(idx[r]).end(), out.row(r).begin());
  return out;
}

inline void normalize_rows(Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double n = l2_norm(m.row(r));
    if (n > 0)
      for (auto& v : m.row(r)) v = static_cast<float>(v / n);
  }
}

inline double mean_l0(const SparseCoderWeights& w, const Matrix& x) {
  double total = 0;
  for (std::size_t start = 0; start < x.rows(); start += 1024) {
    std::vector<std::size_t> idx(std::min<std::size_t>(1024, x.rows() - start));
    std::iota(idx.begin(), idx.end(), start);
    Matrix z = matmul(gather_rows(x, idx), w.w_enc);
    add_row_vector(z, w.b_enc);
    apply_sparse_activation(w, z);
    total += static_cast<double>(count_nonzero(z.flat()));
  }
  return x.rows() ? total / static_cast<double>(x.rows()) : 0.0;
}

}  // namespace detail

// Trains an SAE (inputs == targets, both ff_out) or a transcoder (ff_in -> ff_out)
// on ||y - y_hat||^2 + l1 * ||a||_1 with unit-norm decoder rows.
inline TrainedSparseCoder train_sparse_coder(CoderKind kind, const Matrix& inputs, const Matrix& targets, const SparseCoderHyper& hyper) {
  if (is_ffkv_kind(kind)) throw Error("train_sparse_coder: '" + to_string(kind) + "' is not trainable");
  if (hyper.width < 1) throw Error("train_sparse_coder: width must be at least 1");
  if (inputs.rows() == 0) throw Error("train_sparse_coder: empty training set");
  if (inputs.rows() != targets.rows()) throw DimensionError("train_sparse_coder: input/target row mismatch");
  if (kind == CoderKind::sae && !(inputs == targets)) throw Error("train_sparse_coder: an sae reconstructs its own input");
  if (hyper.activation == SparseActivation::topk && (hyper.k < 1 || hyper.k > hyper.width)) throw Error("train_sparse_coder: k outside [1, width]");
  if (!inputs.all_finite() || !targets.all_finite()) throw Error("train_sparse_coder: non-finite training data");

  const std::size_t n = inputs.rows(), d_in = inputs.cols(), d_out = targets.cols(), f = hyper.width;
  const std::size_t batch = std::min(hyper.batch_size, n);
  RngStream rng(hyper.seed, 0x636f646572ULL);

  SparseCoderWeights w;
  w.activation = hyper.activation;
  w.k = hyper.activation == SparseActivation::topk ? hyper.k : 0;
  w.w_dec = Matrix(f, d_out);
  for (auto& v : w.w_dec.flat()) v = static_cast<float>(rng.normal());
  detail::normalize_rows(w.w_dec);
  if (kind == CoderKind::sae) {
    w.w_enc = w.w_dec.transposed();
  } else {
    w.w_enc = Matrix(d_in, f);
    for (auto& v : w.w_enc.flat()) v = static_cast<float>(rng.normal() / std::sqrt(static_cast<double>(d_in)));
  }
  const Vector in_mean = column_means(inputs);
  w.b_dec = column_means(targets);
  w.b_enc = vec_mat(in_mean, w.w_enc);
  for (auto& v : w.b_enc) v = -v;
  if (hyper.activation == SparseActivation::jumprelu) w.theta = Vector(f, hyper.theta_init);

  AdamHyper ah;
  ah.lr = hyper.lr;
  AdamState s_we, s_be, s_wd, s_bd, s_th;
  Matrix g_we(d_in, f), g_wd(f, d_out);
  Vector g_be(f), g_bd(d_out), g_th(f);

  TrainedSparseCoder out;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;  // forces a shuffle on the first step
  std::vector<char> fired(f, 0);
  double epoch_sum = 0;
  std::size_t epoch_steps = 0;
  const float lambda = static_cast<float>(hyper.l1);
  const float eps = hyper.jump_bandwidth;

  auto resample = [&](const std::vector<std::size_t>& dead) {
    // Candidates drawn with probability proportional to squared reconstruction error.
    const auto cand = rng.sample_without_replacement(n, std::min<std::size_t>(n, 2048));
    const Matrix xc = detail::gather_rows(inputs, cand), yc = detail::gather_rows(targets, cand);
    Matrix z = matmul(xc, w.w_enc);
    add_row_vector(z, w.b_enc);
    apply_sparse_activation(w, z);
    Matrix yhat = matmul(z, w.w_dec);
    add_row_vector(yhat, w.b_dec);
    std::vector<double> err(cand.size());
    double total = 0;
    for (std::size_t r = 0; r < cand.size(); ++r) {
      double e = 0;
      for (std::size_t c = 0; c < d_out; ++c) e += std::pow(double(yc(r, c)) - yhat(r, c), 2);
      total += e;
      err[r] = total;
    }
    double enc_norm = 0;
    std::size_t alive = 0;
    for (std::size_t j = 0; j < f; ++j)
      if (fired[j]) {
        double s = 0;
        for (std::size_t c = 0; c < d_in; ++c) s += double(w.w_enc(c, j)) * w.w_enc(c, j);
        enc_norm += std::sqrt(s);
        ++alive;
      }
    enc_norm = alive ? 0.2 * enc_norm / static_cast<double>(alive) : 1.0;
    for (std::size_t j : dead) {
      if (total <= 0) break;
      const double u = rng.uniform() * total;
      const std::size_t r = static_cast<std::size_t>(std::lower_bound(err.begin(), err.end(), u) - err.begin());
      const std::size_t pick = std::min(r, cand.size() - 1);
      Vector dir(d_out), xin(d_in);
      for (std::size_t c = 0; c < d_out; ++c) dir[c] = yc(pick, c) - yhat(pick, c);
      for (std::size_t c = 0; c < d_in; ++c) xin[c] = xc(pick, c) - in_mean[c];
      const double dn = l2_norm(dir), xn = l2_norm(xin);
      if (dn == 0 || xn == 0) continue;
      double bias = 0;
      for (std::size_t c = 0; c < d_out; ++c) w.w_dec(j, c) = static_cast<float>(dir[c] / dn);
      for (std::size_t c = 0; c < d_in; ++c) {
        w.w_enc(c, j) = static_cast<float>(xin[c] / xn * enc_norm);
        bias -= double(in_mean[c]) * w.w_enc(c, j);
      }
      w.b_enc[j] = static_cast<float>(bias);
      if (!w.theta.empty()) w.theta[j] = hyper.theta_init;
      // Fresh optimizer moments for the reset parameters.
      auto reset = [](AdamState& s, std::size_t i) {
        if (!s.m.empty()) s.m[i] = s.v[i] = 0.0f;
      };
      for (std::size_t c = 0; c < d_in; ++c) reset(s_we, c * f + j);
      for (std::size_t c = 0; c < d_out; ++c) reset(s_wd, j * d_out + c);
      reset(s_be, j);
      reset(s_th, j);
      ++out.log.resampled;
    }
  };

  for (std::size_t step = 0; step < hyper.steps; ++step) {
    if (cursor + batch > n) {
      if (epoch_steps > 0) {
        out.log.epoch_losses.push_back(epoch_sum / static_cast<double>(epoch_steps));
        std::vector<std::size_t> dead;
        for (std::size_t j = 0; j < f; ++j)
          if (!fired[j]) dead.push_back(j);
        // Only early on, so late revivals cannot distort the final dictionary.
        if (hyper.resample_dead && !dead.empty() && 2 * step < hyper.steps) resample(dead);
      }
      std::fill(fired.begin(), fired.end(), 0);
      epoch_sum = 0;
      epoch_steps = 0;
      rng.shuffle(order);
      cursor = 0;
    }
    const std::span<const std::size_t> idx(order.data() + cursor, batch);
    cursor += batch;
    const Matrix x = detail::gather_rows(inputs, idx), y = detail::gather_rows(targets, idx);

    Matrix z = matmul(x, w.w_enc);
    add_row_vector(z, w.b_enc);
    Matrix a = z;
    apply_sparse_activation(w, a);
    Matrix yhat = matmul(a, w.w_dec);
    add_row_vector(yhat, w.b_dec);

    const float inv_b = 1.0f / static_cast<float>(batch);
    double loss = 0;
    Matrix dy(batch, d_out);
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t c = 0; c < d_out; ++c) {
        const float diff = yhat(r, c) - y(r, c);
        loss += double(diff) * diff;
        dy(r, c) = 2.0f * diff * inv_b;
      }
    for (float v : a.flat()) loss += hyper.l1 * std::fabs(v);
    loss /= static_cast<double>(batch);

    std::fill(g_wd.flat().begin(), g_wd.flat().end(), 0.0f);
    std::fill(g_we.flat().begin(), g_we.flat().end(), 0.0f);
    std::fill(g_bd.begin(), g_bd.end(), 0.0f);
    std::fill(g_be.begin(), g_be.end(), 0.0f);
    std::fill(g_th.begin(), g_th.end(), 0.0f);
    add_matmul_at(a, dy, g_wd);
    add_column_sums(dy, g_bd);
    Matrix da = matmul_bt(dy, w.w_dec);
    Matrix dz(batch, f);
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t j = 0; j < f; ++j) {
        const float av = a(r, j);
        const float grad_a = da(r, j) + (av > 0 ? lambda * inv_b : av < 0 ? -lambda * inv_b : 0.0f);
        if (av != 0.0f) {
          dz(r, j) = grad_a;
          fired[j] = 1;
        }
        if (w.activation == SparseActivation::jumprelu) {
          // Straight-through estimate of the threshold gradient.
          const float t = w.theta[j];
          if (std::fabs(z(r, j) - t) < 0.5f * eps) g_th[j] += grad_a * (-t / eps);
        }
      }
    add_matmul_at(x, dz, g_we);
    add_column_sums(dz, g_be);

    adam_step(w.w_enc, g_we, s_we, ah);
    adam_step(w.b_enc, g_be, s_be, ah);
    adam_step(w.w_dec, g_wd, s_wd, ah);
    adam_step(w.b_dec, g_bd, s_bd, ah);
    if (w.activation == SparseActivation::jumprelu) {
      adam_step(w.theta, g_th, s_th, ah);
      for (auto& t : w.theta) t = std::max(t, 0.0f);
    }
    detail::normalize_rows(w.w_dec);

    out.log.losses.push_back(loss);
    epoch_sum += loss;
    ++epoch_steps;
  }
  if (epoch_steps > 0) out.log.epoch_losses.push_back(epoch_sum / static_cast<double>(epoch_steps));
  out.log.final_l0 = detail::mean_l0(w, inputs);
  out.weights = std::move(w);
  return out;
}

// Harvests the training stream from the model, then trains.
inline TrainedSparseCoder train_sparse_coder(CoderKind kind, const Model& model, std::size_t layer, std::span<const int> stream,
                                             std::size_t n_tokens, const SparseCoderHyper& hyper) {
  if (layer >= model.layers.size()) throw Error("train_sparse_coder: layer out of range");
  if (stream.empty() || n_tokens == 0) throw Error("train_sparse_coder: empty corpus");
  const HookPoint in{layer, coder_input_site(kind)}, out{layer, HookSite::ff_out};
  auto cap = capture_stream(model, stream, {in, out}, n_tokens);
  return train_sparse_coder(kind, cap.at(in), cap.at(out), hyper);
}

}  // namespace ffkv
