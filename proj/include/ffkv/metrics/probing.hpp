#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "ffkv/datasets/synthetic.hpp"
#include "ffkv/metrics/core.hpp"
#include "ffkv/numerics/probe.hpp"

namespace ffkv {

// Indices of the k largest scores; ties go to the lower index.
inline std::vector<std::size_t> rank_features(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  });
  idx.resize(k);
  return idx;
}

inline Matrix select_columns(const Matrix& x, std::span<const std::size_t> cols) {
  Matrix out(x.rows(), cols.size());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t j = 0; j < cols.size(); ++j) out(r, j) = x(r, cols[j]);
  return out;
}

inline std::vector<std::string> texts_of(const std::vector<const LabeledText*>& items) {
  std::vector<std::string> out;
  for (auto* t : items) out.push_back(t->text);
  return out;
}

inline std::vector<int> labels_of(const std::vector<const LabeledText*>& items, bool spurious = false) {
  std::vector<int> out;
  for (auto* t : items) out.push_back(spurious ? t->spurious : t->label);
  return out;
}

// ---------------------------------------------------------------------------
// Sparse probing

// |E[h_j | +] - E[h_j | -]| per feature.
inline std::vector<double> mean_difference_scores(const Matrix& x, std::span<const int> y) {
  std::vector<double> pos(x.cols(), 0.0), neg(x.cols(), 0.0);
  std::size_t np = 0, nn = 0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto& dst = y[r] ? pos : neg;
    (y[r] ? np : nn)++;
    for (std::size_t c = 0; c < x.cols(); ++c) dst[c] += x(r, c);
  }
  if (np == 0 || nn == 0) throw Error("sparse probing: concept has a single class");
  std::vector<double> s(x.cols());
  for (std::size_t c = 0; c < x.cols(); ++c) s[c] = std::abs(pos[c] / np - neg[c] / nn);
  return s;
}

struct ConceptFeatures {
  std::string name;
  Matrix train_x, eval_x;
  std::vector<int> train_y, eval_y;
};

inline ConceptFeatures concept_features(const CoderSystem& sys, const LabeledTextSet& set) {
  const auto train = set.split(Split::train), eval = set.split(Split::eval);
  return {set.name, sys.pooled_features(texts_of(train)), sys.pooled_features(texts_of(eval)), labels_of(train), labels_of(eval)};
}

struct SparseProbeOutcome {
  std::string concept_name;
  std::size_t k = 0;
  std::vector<std::size_t> features;
  double accuracy = 0.0;
  bool degenerate = false;  // every s_j was zero
};

inline SparseProbeOutcome sparse_probe(const ConceptFeatures& c, std::size_t k, const ProbeConfig& probe = {}) {
  if (k < 1) throw Error("sparse probing: K must be at least 1");
  const auto s = mean_difference_scores(c.train_x, c.train_y);
  SparseProbeOutcome out;
  out.concept_name = c.name;
  out.k = k;
  out.degenerate = std::all_of(s.begin(), s.end(), [](double v) { return v == 0.0; });
  out.features = rank_features(s, k);
  const auto model = fit_linear_probe(select_columns(c.train_x, out.features), c.train_y, probe);
  out.accuracy = probe_accuracy(model, select_columns(c.eval_x, out.features), c.eval_y);
  return out;
}

// Accuracy averaged over concepts for each K; sub-runs are the concepts.
struct SparseProbingResult {
  std::vector<std::size_t> ks;
  std::vector<std::vector<SparseProbeOutcome>> per_k;  // [k index][concept]

  std::vector<double> accuracies(std::size_t k_index) const {
    std::vector<double> out;
    for (const auto& o : per_k.at(k_index)) out.push_back(o.accuracy);
    return out;
  }
};

inline SparseProbingResult sparse_probing_eval(const std::vector<ConceptFeatures>& concepts, std::vector<std::size_t> ks = {1, 2, 5},
                                               const ProbeConfig& probe = {}) {
  if (concepts.empty()) throw Error("sparse probing: no concepts");
  SparseProbingResult r;
  r.ks = ks;
  for (std::size_t k : ks) {
    r.per_k.emplace_back();
    for (const auto& c : concepts) r.per_k.back().push_back(sparse_probe(c, k, probe));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Probe attribution shared by SCR and TPP: |raw probe weight| x mean |h_j|.

inline std::vector<double> probe_attribution(const Matrix& features, std::span<const int> binary_labels, const ProbeConfig& cfg) {
  const auto probe = fit_linear_probe(features, binary_labels, cfg);
  std::vector<double> attr(features.cols());
  for (std::size_t j = 0; j < features.cols(); ++j) {
    double mag = 0.0;
    for (std::size_t r = 0; r < features.rows(); ++r) mag += std::abs(features(r, j));
    mag /= static_cast<double>(std::max<std::size_t>(1, features.rows()));
    attr[j] = std::abs(probe.raw_weight(1, j) - probe.raw_weight(0, j)) * mag;
  }
  return attr;
}

// ---------------------------------------------------------------------------
// SCR

struct ScrResult {
  std::size_t k = 0;
  double a_base = 0.0, a_abl = 0.0, a_oracle = 0.0;
  std::optional<double> score;  // empty when A_oracle == A_base
  std::vector<std::size_t> ablated;
};

inline std::optional<double> scr_score(double a_base, double a_abl, double a_oracle) {
  if (a_oracle == a_base) return std::nullopt;
  return (a_abl - a_base) / (a_oracle - a_base);
}

// Texts for one SCR task: a biased train split (intended + spurious labels),
// a balanced train split for the oracle probe and a balanced eval split.
struct ScrData {
  std::vector<const LabeledText*> biased_train, balanced_train, eval;

  static ScrData from_sets(const LabeledTextSet& biased, const LabeledTextSet& balanced) {
    return {biased.split(Split::train), balanced.split(Split::eval), biased.split(Split::eval)};
  }
};

inline const std::vector<std::size_t>& default_scr_ks() {
  static const std::vector<std::size_t> ks{2, 5, 10, 20, 50, 100, 500};
  return ks;
}

inline std::vector<ScrResult> scr_eval(const CoderSystem& sys, const ScrData& data, const std::vector<std::size_t>& ks,
                                       const ProbeConfig& probe = {}) {
  const auto train_texts = texts_of(data.biased_train), eval_texts = texts_of(data.eval);
  const auto y_train = labels_of(data.biased_train), y_eval = labels_of(data.eval);

  const auto base = fit_linear_probe(sys.pooled_representation(train_texts, {}), y_train, probe);
  const double a_base = probe_accuracy(base, sys.pooled_representation(eval_texts, {}), y_eval);
  const auto oracle = fit_linear_probe(sys.pooled_representation(texts_of(data.balanced_train), {}), labels_of(data.balanced_train), probe);
  const double a_oracle = probe_accuracy(oracle, sys.pooled_representation(eval_texts, {}), y_eval);

  const auto attr = probe_attribution(sys.pooled_features(train_texts), labels_of(data.biased_train, true), probe);
  std::vector<ScrResult> out;
  for (std::size_t k : ks) {
    ScrResult r;
    r.k = k;
    r.a_base = a_base;
    r.a_oracle = a_oracle;
    r.ablated = rank_features(attr, k);
    r.a_abl = probe_accuracy(base, sys.pooled_representation(eval_texts, r.ablated), y_eval);
    r.score = scr_score(a_base, r.a_abl, a_oracle);
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// TPP

struct TppResult {
  std::size_t k = 0;
  std::vector<double> a;              // A_j, baseline accuracy of probe j
  std::vector<std::vector<double>> a_cross;  // A_{i,j}: probe j after ablating class i's features
  double score = 0.0;                 // targeted damage minus untargeted damage
  double flipped_score = 0.0;      // the same quantity with the opposite sign
};

// (1/m) sum_i (A_i - A_ii) - 1/(m(m-1)) sum_{i != j} (A_j - A_ij)
inline double tpp_score(std::span<const double> a, const std::vector<std::vector<double>>& a_cross) {
  const std::size_t m = a.size();
  if (m < 2 || a_cross.size() != m) throw Error("tpp: need at least two classes and an m x m matrix");
  double diag = 0.0, off = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (a_cross[i].size() != m) throw Error("tpp: ragged accuracy matrix");
    for (std::size_t j = 0; j < m; ++j)
      (i == j ? diag : off) += (i == j ? a[i] - a_cross[i][i] : a[j] - a_cross[i][j]);
  }
  return diag / static_cast<double>(m) - off / static_cast<double>(m * (m - 1));
}

// Mean of per-class recall, so one-vs-rest probes are not rewarded for always
// answering "rest".
inline double balanced_accuracy(const ProbeModel& probe, const Matrix& x, std::span<const int> y) {
  std::size_t tp = 0, p = 0, tn = 0, n = 0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const int pred = probe.predict(x.row(r));
    if (y[r]) {
      ++p;
      tp += pred == 1;
    } else {
      ++n;
      tn += pred == 0;
    }
  }
  if (p == 0 || n == 0) throw Error("balanced_accuracy: need both classes");
  return 0.5 * (static_cast<double>(tp) / p + static_cast<double>(tn) / n);
}

inline std::vector<int> one_vs_rest(std::span<const int> y, int cls) {
  std::vector<int> out;
  for (int v : y) out.push_back(v == cls ? 1 : 0);
  return out;
}

inline std::vector<TppResult> tpp_eval(const CoderSystem& sys, const LabeledTextSet& set, const std::vector<std::size_t>& ks,
                                       const ProbeConfig& probe = {}) {
  const std::size_t m = set.num_classes;
  if (m < 3) throw Error("tpp: need at least three classes");
  const auto train = set.split(Split::train), eval = set.split(Split::eval);
  const auto train_texts = texts_of(train), eval_texts = texts_of(eval);
  const auto y_train = labels_of(train), y_eval = labels_of(eval);

  const Matrix r_train = sys.pooled_representation(train_texts, {}), r_eval = sys.pooled_representation(eval_texts, {});
  const Matrix f_train = sys.pooled_features(train_texts);
  std::vector<ProbeModel> probes;
  std::vector<std::vector<int>> y_eval_bin;
  std::vector<double> a(m);
  std::vector<std::vector<double>> attr;
  for (std::size_t j = 0; j < m; ++j) {
    const auto yb = one_vs_rest(y_train, static_cast<int>(j));
    probes.push_back(fit_linear_probe(r_train, yb, probe));
    y_eval_bin.push_back(one_vs_rest(y_eval, static_cast<int>(j)));
    a[j] = balanced_accuracy(probes[j], r_eval, y_eval_bin[j]);
    attr.push_back(probe_attribution(f_train, yb, probe));
  }

  std::vector<TppResult> out;
  for (std::size_t k : ks) {
    TppResult r;
    r.k = k;
    r.a = a;
    r.a_cross.assign(m, std::vector<double>(m));
    for (std::size_t i = 0; i < m; ++i) {
      const Matrix abl = sys.pooled_representation(eval_texts, rank_features(attr[i], k));
      for (std::size_t j = 0; j < m; ++j) r.a_cross[i][j] = balanced_accuracy(probes[j], abl, y_eval_bin[j]);
    }
    r.score = tpp_score(r.a, r.a_cross);
    r.flipped_score = -r.score;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace ffkv
