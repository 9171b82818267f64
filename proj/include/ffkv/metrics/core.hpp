#pragma once

#include <span>
#include <string>
#include <vector>

#include "ffkv/coders/coder.hpp"
#include "ffkv/datasets/desk.hpp"
#include "ffkv/harvest/history.hpp"
#include "ffkv/lm/capture.hpp"

namespace ffkv {

// ---------------------------------------------------------------------------
// Alive rate

// A feature is alive once any token gives it a positive activation. Rows can
// be added shard by shard; the rate never decreases.
class AliveAccumulator {
 public:
  explicit AliveAccumulator(std::size_t d_coder) : alive_(d_coder, false) {}

  void add(const Matrix& a) {
    if (a.cols() != alive_.size()) throw DimensionError("AliveAccumulator: width mismatch");
    rows_ += a.rows();
    for (std::size_t r = 0; r < a.rows(); ++r) {
      auto row = a.row(r);
      for (std::size_t i = 0; i < row.size(); ++i)
        if (row[i] > 0.0f) alive_[i] = true;
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t alive_count() const { return static_cast<std::size_t>(std::count(alive_.begin(), alive_.end(), true)); }

  double rate() const {
    if (rows_ == 0) throw Error("feature_alive_rate: empty history");
    return static_cast<double>(alive_count()) / static_cast<double>(alive_.size());
  }

 private:
  std::vector<bool> alive_;
  std::size_t rows_ = 0;
};

inline double feature_alive_rate(const Matrix& activations) {
  AliveAccumulator acc(activations.cols());
  acc.add(activations);
  return acc.rate();
}

inline double feature_alive_rate(const ActivationHistory& h) { return feature_alive_rate(h.activations); }

// ---------------------------------------------------------------------------
// Explained variance: 1 - SSE / SST with SST around the token-mean target.

class ExplainedVarianceAccumulator {
 public:
  explicit ExplainedVarianceAccumulator(std::size_t dim) : sum_(dim, 0.0) {}

  void add(const Matrix& target, const Matrix& recon) {
    require_same_shape(target, recon, "explained_variance");
    if (target.cols() != sum_.size()) throw DimensionError("explained_variance: width mismatch");
    for (std::size_t r = 0; r < target.rows(); ++r) {
      auto t = target.row(r);
      auto p = recon.row(r);
      for (std::size_t c = 0; c < t.size(); ++c) {
        const double tv = t[c], e = tv - static_cast<double>(p[c]);
        sse_ += e * e;
        sum_sq_ += tv * tv;
        sum_[c] += tv;
      }
    }
    n_ += target.rows();
  }

  std::size_t tokens() const { return n_; }

  double value() const {
    if (n_ == 0) throw Error("explained_variance: no tokens");
    double mean_sq = 0.0;
    for (double s : sum_) mean_sq += s * s;
    const double sst = sum_sq_ - mean_sq / static_cast<double>(n_);
    if (!(sst > 1e-12 * std::max(1.0, sum_sq_))) throw Error("explained_variance: targets are constant");
    return 1.0 - sse_ / sst;
  }

 private:
  std::vector<double> sum_;
  double sse_ = 0.0, sum_sq_ = 0.0;
  std::size_t n_ = 0;
};

inline double explained_variance(const Matrix& target, const Matrix& recon) {
  ExplainedVarianceAccumulator acc(target.cols());
  acc.add(target, recon);
  return acc.value();
}

struct CoderStreamStats {
  double explained_variance = 0.0;
  double alive_rate = 0.0;
  double mean_l0 = 0.0;
  std::size_t tokens = 0;
};

// Streams the first `max_tokens` tokens through the model in context windows
// and scores the coder's reconstruction of ff_out at its layer.
inline CoderStreamStats coder_stream_stats(const Model& model, const FeatureCoder& coder, std::span<const int> stream,
                                           std::size_t max_tokens) {
  const HookPoint in{coder.layer(), coder.input_site()}, out{coder.layer(), HookSite::ff_out};
  ExplainedVarianceAccumulator ev(coder.d_out());
  AliveAccumulator alive(coder.d_coder());
  double l0 = 0.0;
  for_each_window(model, stream, max_tokens, {in, out}, [&](std::size_t, std::span<const int>, const ForwardResult& res) {
    const Matrix a = coder.encode(res.captured.at(in));
    ev.add(res.captured.at(out), coder.decode(a));
    alive.add(a);
    for (std::size_t r = 0; r < a.rows(); ++r) l0 += static_cast<double>(count_nonzero(a.row(r)));
  });
  return {ev.value(), alive.rate(), l0 / static_cast<double>(ev.tokens()), ev.tokens()};
}

// ---------------------------------------------------------------------------
// Coder activations on short prompts

struct PromptActivations {
  std::vector<int> tokens;
  Matrix features;  // tokens x d_coder
  Matrix ff_out;    // tokens x d_model, at the coder's layer
};

inline PromptActivations prompt_activations(const Model& model, const FeatureCoder& coder, std::vector<int> tokens) {
  if (tokens.size() > model.config.context_length) tokens.resize(model.config.context_length);
  const HookPoint in{coder.layer(), coder.input_site()}, out{coder.layer(), HookSite::ff_out};
  auto res = forward_with_hooks(model, tokens, {in, out}, {}, false);
  PromptActivations p;
  p.features = coder.encode(res.captured.at(in));
  p.ff_out = std::move(res.captured.at(out));
  p.tokens = std::move(tokens);
  return p;
}

// ff_out with the coder's reconstruction error kept: the edited activations
// replace the original ones inside the decode path only.
inline Matrix error_preserving_edit(const FeatureCoder& coder, const PromptActivations& p, const Matrix& edited) {
  Matrix out = p.ff_out;
  const Matrix before = coder.decode(p.features), after = coder.decode(edited);
  for (std::size_t i = 0; i < out.flat().size(); ++i) out.flat()[i] += after.flat()[i] - before.flat()[i];
  return out;
}

// What the probing metrics need from a (model, coder) pair. Tests plug in
// planted systems with known structure.
class CoderSystem {
 public:
  virtual ~CoderSystem() = default;
  virtual std::size_t num_features() const = 0;
  // Coder activations mean-pooled over each text's tokens.
  virtual Matrix pooled_features(const std::vector<std::string>& texts) const = 0;
  // The downstream representation of each text with the listed features
  // zero-ablated at every position.
  virtual Matrix pooled_representation(const std::vector<std::string>& texts, std::span<const std::size_t> ablate) const = 0;
};

// Features come from the coder at its layer; the representation is the final
// residual stream, mean-pooled, after the ablation is injected at ff_out.
class ModelCoderSystem final : public CoderSystem {
 public:
  ModelCoderSystem(const Model& model, const FeatureCoder& coder, const Tokenizer& tokenizer)
      : model_(model), coder_(coder), tok_(tokenizer) {}

  std::size_t num_features() const override { return coder_.d_coder(); }

  Matrix pooled_features(const std::vector<std::string>& texts) const override {
    Matrix out(texts.size(), coder_.d_coder());
    for (std::size_t i = 0; i < texts.size(); ++i) {
      const auto p = prompt_activations(model_, coder_, prompt_tokens(tok_, texts[i]));
      pool_into(p.features, out.row(i));
    }
    return out;
  }

  Matrix pooled_representation(const std::vector<std::string>& texts, std::span<const std::size_t> ablate) const override {
    Matrix out(texts.size(), model_.config.d_model);
    for (std::size_t i = 0; i < texts.size(); ++i) {
      auto tokens = prompt_tokens(tok_, texts[i]);
      if (tokens.size() > model_.config.context_length) tokens.resize(model_.config.context_length);
      std::vector<Injection> inject;
      if (!ablate.empty()) {
        const auto p = prompt_activations(model_, coder_, tokens);
        Matrix edited = p.features;
        for (std::size_t r = 0; r < edited.rows(); ++r)
          for (std::size_t f : ablate) edited(r, f) = 0.0f;
        inject.push_back({{coder_.layer(), HookSite::ff_out}, error_preserving_edit(coder_, p, edited)});
      }
      const auto res = forward_with_hooks(model_, tokens, {}, inject, false);
      pool_into(res.final_hidden, out.row(i));
    }
    return out;
  }

 private:
  // Mean over the text's tokens; the leading separator is skipped.
  static void pool_into(const Matrix& m, std::span<float> dst) {
    const std::size_t first = m.rows() > 1 ? 1 : 0;
    std::vector<double> acc(m.cols(), 0.0);
    for (std::size_t r = first; r < m.rows(); ++r)
      for (std::size_t c = 0; c < m.cols(); ++c) acc[c] += m(r, c);
    const double n = static_cast<double>(m.rows() - first);
    for (std::size_t c = 0; c < m.cols(); ++c) dst[c] = static_cast<float>(acc[c] / n);
  }

  const Model& model_;
  const FeatureCoder& coder_;
  const Tokenizer& tok_;
};

}  // namespace ffkv
