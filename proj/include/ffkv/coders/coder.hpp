#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ffkv/lm/model.hpp"
#include "ffkv/numerics/ops.hpp"

namespace ffkv {

enum class CoderKind { ffkv, topk_ffkv, norm_ffkv, topk_norm_ffkv, sae, transcoder };

inline const std::vector<CoderKind>& all_coder_kinds() {
  static const std::vector<CoderKind> kinds{CoderKind::ffkv, CoderKind::topk_ffkv, CoderKind::norm_ffkv,
                                            CoderKind::topk_norm_ffkv, CoderKind::sae, CoderKind::transcoder};
  return kinds;
}

inline std::string to_string(CoderKind k) {
  switch (k) {
    case CoderKind::ffkv: return "ffkv";
    case CoderKind::topk_ffkv: return "topk_ffkv";
    case CoderKind::norm_ffkv: return "norm_ffkv";
    case CoderKind::topk_norm_ffkv: return "topk_norm_ffkv";
    case CoderKind::sae: return "sae";
    case CoderKind::transcoder: return "transcoder";
  }
  return "?";
}

inline CoderKind coder_kind_from_string(const std::string& s) {
  for (auto k : all_coder_kinds())
    if (to_string(k) == s) return k;
  throw Error("unknown coder kind '" + s + "'");
}

inline bool is_ffkv_kind(CoderKind k) { return k != CoderKind::sae && k != CoderKind::transcoder; }
inline bool is_topk_kind(CoderKind k) { return k == CoderKind::topk_ffkv || k == CoderKind::topk_norm_ffkv; }
inline bool is_norm_kind(CoderKind k) { return k == CoderKind::norm_ffkv || k == CoderKind::topk_norm_ffkv; }

// Where a coder reads its input from; every kind reconstructs ff_out.
inline HookSite coder_input_site(CoderKind k) { return k == CoderKind::sae ? HookSite::ff_out : HookSite::ff_in; }

struct TopKConfig {
  std::size_t k = 10;
  bool signed_values = false;     // rank by value instead of |value|
  bool norm_before_topk = false;  // norm variants: features are a*s and top-k is taken on them
  bool operator==(const TopKConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TopKConfig& c) {
  j = {{"k", c.k}, {"signed", c.signed_values}, {"norm_before_topk", c.norm_before_topk}};
}
inline void from_json(const nlohmann::json& j, TopKConfig& c) {
  c.k = j.value("k", std::size_t{10});
  c.signed_values = j.value("signed", false);
  c.norm_before_topk = j.value("norm_before_topk", false);
}

struct NormalizationAux {
  Vector s;                         // row norms of W_V
  Matrix w_tilde;                   // unit-norm rows, zero where s == 0
  std::vector<std::size_t> zero_rows;

  static NormalizationAux from_values(const Matrix& w_v) {
    NormalizationAux aux;
    aux.s.resize(w_v.rows());
    aux.w_tilde = Matrix(w_v.rows(), w_v.cols());
    for (std::size_t i = 0; i < w_v.rows(); ++i) {
      const double n = l2_norm(w_v.row(i));
      aux.s[i] = static_cast<float>(n);
      if (n == 0.0) {
        aux.zero_rows.push_back(i);
        continue;
      }
      for (std::size_t c = 0; c < w_v.cols(); ++c) aux.w_tilde(i, c) = static_cast<float>(w_v(i, c) / n);
    }
    return aux;
  }
};

enum class SparseActivation { relu, jumprelu, topk };

inline std::string to_string(SparseActivation a) {
  switch (a) {
    case SparseActivation::relu: return "relu";
    case SparseActivation::jumprelu: return "jumprelu";
    case SparseActivation::topk: return "topk";
  }
  return "?";
}

inline SparseActivation sparse_activation_from_string(const std::string& s) {
  if (s == "relu") return SparseActivation::relu;
  if (s == "jumprelu") return SparseActivation::jumprelu;
  if (s == "topk") return SparseActivation::topk;
  throw Error("unknown sparse activation '" + s + "'");
}

struct SparseCoderWeights {
  Matrix w_enc;  // d_in x d_coder
  Vector b_enc;
  Matrix w_dec;  // d_coder x d_out
  Vector b_dec;
  SparseActivation activation = SparseActivation::relu;
  Vector theta;  // jumprelu thresholds
  std::size_t k = 0;

  std::size_t d_in() const { return w_enc.rows(); }
  std::size_t d_coder() const { return w_enc.cols(); }
  std::size_t d_out() const { return w_dec.cols(); }

  void validate() const {
    if (d_coder() < 1) throw Error("sparse coder: width must be at least 1");
    if (w_dec.rows() != d_coder() || b_enc.size() != d_coder() || b_dec.size() != d_out())
      throw DimensionError("sparse coder: inconsistent weight shapes");
    if (activation == SparseActivation::jumprelu) {
      if (theta.size() != d_coder()) throw DimensionError("sparse coder: theta has the wrong size");
      for (float t : theta)
        if (!(t >= 0.0f)) throw Error("sparse coder: jumprelu thresholds must be >= 0");
    }
    if (activation == SparseActivation::topk && (k < 1 || k > d_coder())) throw Error("sparse coder: top-k outside [1, width]");
  }
};

// Applies the sparse nonlinearity to pre-activations in place.
inline void apply_sparse_activation(const SparseCoderWeights& w, Matrix& z) {
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    switch (w.activation) {
      case SparseActivation::relu:
        for (auto& v : row) v = v > 0.0f ? v : 0.0f;
        break;
      case SparseActivation::jumprelu:
        for (std::size_t i = 0; i < row.size(); ++i) row[i] = row[i] > w.theta[i] ? row[i] : 0.0f;
        break;
      case SparseActivation::topk: {
        const auto keep = top_k_indices(row, w.k, true);
        Vector kept(row.size(), 0.0f);
        for (auto i : keep) kept[i] = row[i] > 0.0f ? row[i] : 0.0f;
        std::copy(kept.begin(), kept.end(), row.begin());
        break;
      }
    }
  }
}

// The common encode/decode contract. FF-KV kinds hold a copy of the bound
// layer's feed-forward weights; SAE/transcoder kinds hold trained weights.
class FeatureCoder {
 public:
  static FeatureCoder ffkv(const Model& model, std::size_t layer, CoderKind kind = CoderKind::ffkv, TopKConfig topk = {}) {
    if (!is_ffkv_kind(kind)) throw Error("FeatureCoder::ffkv: '" + to_string(kind) + "' is not an FF-KV kind");
    if (layer >= model.layers.size()) throw Error("FeatureCoder::ffkv: layer out of range");
    return from_ff(model.layers[layer].ff, kind, topk, layer);
  }

  static FeatureCoder from_ff(const FeedForwardWeights& ff, CoderKind kind = CoderKind::ffkv, TopKConfig topk = {},
                              std::size_t layer = 0) {
    if (!is_ffkv_kind(kind)) throw Error("FeatureCoder::from_ff: '" + to_string(kind) + "' is not an FF-KV kind");
    ff.validate();
    if (is_topk_kind(kind) && (topk.k < 1 || topk.k > ff.d_ff())) throw Error("top-k must lie in [1, d_ff]");
    FeatureCoder c;
    c.kind_ = kind;
    c.layer_ = layer;
    c.ff_ = ff;
    c.topk_ = topk;
    if (is_norm_kind(kind)) c.norm_ = NormalizationAux::from_values(ff.w_v);
    return c;
  }

  static FeatureCoder sparse(CoderKind kind, SparseCoderWeights w, std::size_t layer = 0) {
    if (is_ffkv_kind(kind)) throw Error("FeatureCoder::sparse: '" + to_string(kind) + "' is not a trained kind");
    w.validate();
    if (kind == CoderKind::sae && w.d_in() != w.d_out()) throw DimensionError("sae must reconstruct its own input");
    FeatureCoder c;
    c.kind_ = kind;
    c.layer_ = layer;
    c.sparse_ = std::move(w);
    return c;
  }

  CoderKind kind() const { return kind_; }
  std::size_t layer() const { return layer_; }
  const TopKConfig& topk() const { return topk_; }
  const std::optional<FeedForwardWeights>& ff() const { return ff_; }
  const std::optional<NormalizationAux>& normalization() const { return norm_; }
  const std::optional<SparseCoderWeights>& sparse_weights() const { return sparse_; }

  std::size_t d_in() const { return ff_ ? ff_->d_model() : sparse_->d_in(); }
  std::size_t d_coder() const { return ff_ ? ff_->d_ff() : sparse_->d_coder(); }
  std::size_t d_out() const { return ff_ ? ff_->d_model() : sparse_->d_out(); }
  HookSite input_site() const { return coder_input_site(kind_); }

  // Features scaled by s before top-k and exposed that way.
  bool scaled_features() const { return is_norm_kind(kind_) && topk_.norm_before_topk; }

  Matrix encode(const Matrix& x) const {
    if (x.cols() != d_in()) throw DimensionError("encode: expected width " + std::to_string(d_in()) + ", got " + std::to_string(x.cols()));
    if (!x.all_finite()) throw Error("encode: non-finite input");
    if (sparse_) {
      Matrix z = matmul(x, sparse_->w_enc);
      add_row_vector(z, sparse_->b_enc);
      apply_sparse_activation(*sparse_, z);
      return z;
    }
    Matrix a = ff_neurons(*ff_, x);
    if (scaled_features())
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t i = 0; i < a.cols(); ++i) a(r, i) *= norm_->s[i];
    if (is_topk_kind(kind_))
      for (std::size_t r = 0; r < a.rows(); ++r) {
        const Vector masked = top_k_mask(a.row(r), topk_.k, topk_.signed_values);
        std::copy(masked.begin(), masked.end(), a.row(r).begin());
      }
    return a;
  }

  Matrix decode(const Matrix& a) const {
    if (a.cols() != d_coder()) throw DimensionError("decode: expected width " + std::to_string(d_coder()) + ", got " + std::to_string(a.cols()));
    if (!a.all_finite()) throw Error("decode: non-finite activations");
    if (sparse_) {
      Matrix y = matmul(a, sparse_->w_dec);
      add_row_vector(y, sparse_->b_dec);
      return y;
    }
    if (!norm_) return ff_output_from_neurons(*ff_, a);
    Matrix scaled = a;
    if (!scaled_features())
      for (std::size_t r = 0; r < scaled.rows(); ++r)
        for (std::size_t i = 0; i < scaled.cols(); ++i) scaled(r, i) *= norm_->s[i];
    Matrix y = matmul(scaled, norm_->w_tilde);
    add_row_vector(y, ff_->b_v);
    if (ff_->has_post_norm()) rms_norm_rows(y, ff_->post_norm_gain);
    return y;
  }

  Matrix forward(const Matrix& x) const { return decode(encode(x)); }

  // One output-space direction per feature: W_V, W~_V or W_dec.
  const Matrix& feature_vectors() const {
    if (sparse_) return sparse_->w_dec;
    return norm_ ? norm_->w_tilde : ff_->w_v;
  }

 private:
  FeatureCoder() = default;

  CoderKind kind_ = CoderKind::ffkv;
  std::size_t layer_ = 0;
  TopKConfig topk_;
  std::optional<FeedForwardWeights> ff_;
  std::optional<NormalizationAux> norm_;
  std::optional<SparseCoderWeights> sparse_;
};

}  // namespace ffkv
