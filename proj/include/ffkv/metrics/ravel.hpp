#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ffkv/metrics/probing.hpp"

namespace ffkv {

struct RavelGateError : Error {
  using Error::Error;
};

inline int value_token(const Tokenizer& tok, const EntityAttributeWorld& w, std::size_t e, std::size_t a) {
  const auto id = tok.id_of(w.values[e][a]);
  if (!id) throw Error("ravel: value '" + w.values[e][a] + "' is not a single token");
  return *id;
}

// recalled[e][a]: the unedited model greedily answers prompt(e, a) correctly.
inline std::vector<std::vector<bool>> fact_recall_table(const Model& model, const Tokenizer& tok, const EntityAttributeWorld& w) {
  std::vector<std::vector<bool>> out(w.n_entities(), std::vector<bool>(w.n_attributes()));
  for (std::size_t e = 0; e < w.n_entities(); ++e)
    for (std::size_t a = 0; a < w.n_attributes(); ++a)
      out[e][a] = greedy_next_token(model, prompt_tokens(tok, w.prompt(e, a))) == value_token(tok, w, e, a);
  return out;
}

inline double fact_recall(const Model& model, const Tokenizer& tok, const EntityAttributeWorld& w) {
  std::size_t hit = 0, n = 0;
  for (const auto& row : fact_recall_table(model, tok, w))
    for (bool b : row) hit += b, ++n;
  return n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
}

// One edit: move `target` of `base` toward `source`. answer() returns the
// model's greedy token for prompt(base, query) under the edit.
class RavelIntervention {
 public:
  virtual ~RavelIntervention() = default;
  virtual int answer(std::size_t base, std::size_t source, std::size_t target, std::size_t query) const = 0;
};

class NoOpIntervention final : public RavelIntervention {
 public:
  NoOpIntervention(const Model& model, const Tokenizer& tok, const EntityAttributeWorld& w) : model_(model), tok_(tok), w_(w) {}
  int answer(std::size_t base, std::size_t, std::size_t, std::size_t query) const override {
    return greedy_next_token(model_, prompt_tokens(tok_, w_.prompt(base, query)));
  }

 private:
  const Model& model_;
  const Tokenizer& tok_;
  const EntityAttributeWorld& w_;
};

// Writes the intended answers directly: the ceiling of the harness.
class OracleIntervention final : public RavelIntervention {
 public:
  OracleIntervention(const Tokenizer& tok, const EntityAttributeWorld& w) : tok_(tok), w_(w) {}
  int answer(std::size_t base, std::size_t source, std::size_t target, std::size_t query) const override {
    return value_token(tok_, w_, query == target ? source : base, query);
  }

 private:
  const Tokenizer& tok_;
  const EntityAttributeWorld& w_;
};

// Copies the selected coder features from the source entity's prompt into the
// base prompt at the entity token, through the decode path.
class FeaturePatchIntervention final : public RavelIntervention {
 public:
  FeaturePatchIntervention(const Model& model, const FeatureCoder& coder, const Tokenizer& tok, const EntityAttributeWorld& w,
                           std::vector<std::vector<std::size_t>> features_per_attribute)
      : model_(model), coder_(coder), tok_(tok), w_(w), features_(std::move(features_per_attribute)) {}

  int answer(std::size_t base, std::size_t source, std::size_t target, std::size_t query) const override {
    const auto b = prompt_activations(model_, coder_, prompt_tokens(tok_, w_.prompt(base, query)));
    const auto s = prompt_activations(model_, coder_, prompt_tokens(tok_, w_.prompt(source, query)));
    const std::size_t pos = b.tokens.size() - 1;
    Matrix edited = b.features;
    for (std::size_t f : features_.at(target)) edited(pos, f) = s.features(s.tokens.size() - 1, f);
    const std::vector<Injection> inject{{{coder_.layer(), HookSite::ff_out}, error_preserving_edit(coder_, b, edited)}};
    return greedy_next_token(model_, b.tokens, inject);
  }

 private:
  const Model& model_;
  const FeatureCoder& coder_;
  const Tokenizer& tok_;
  const EntityAttributeWorld& w_;
  std::vector<std::vector<std::size_t>> features_;
};

// Per attribute, the K features whose entity-token activation varies most
// across entities on that attribute's prompt (variance = mean squared
// deviation from the across-entity mean).
inline std::vector<std::vector<std::size_t>> ravel_feature_selection(const Model& model, const FeatureCoder& coder, const Tokenizer& tok,
                                                                     const EntityAttributeWorld& w, std::size_t k) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t a = 0; a < w.n_attributes(); ++a) {
    std::vector<double> sum(coder.d_coder(), 0.0), sq(coder.d_coder(), 0.0);
    for (std::size_t e = 0; e < w.n_entities(); ++e) {
      const auto p = prompt_activations(model, coder, prompt_tokens(tok, w.prompt(e, a)));
      auto row = p.features.row(p.tokens.size() - 1);
      for (std::size_t j = 0; j < row.size(); ++j) {
        sum[j] += row[j];
        sq[j] += static_cast<double>(row[j]) * row[j];
      }
    }
    const double n = static_cast<double>(w.n_entities());
    std::vector<double> var(coder.d_coder());
    for (std::size_t j = 0; j < var.size(); ++j) var[j] = sq[j] / n - (sum[j] / n) * (sum[j] / n);
    out.push_back(rank_features(var, k));
  }
  return out;
}

struct RavelConfig {
  std::size_t k = 20;
  std::size_t max_pairs = 240;  // sampled (base, source, target) edits
  double recall_gate = 0.95;
  std::uint64_t seed = 0;
};

struct RavelEdit {
  std::size_t base, source, target;
  bool caused = false, isolated = false;
};

struct RavelResult {
  double recall = 0.0;
  double isolation = 0.0, causality = 0.0;
  std::vector<double> isolation_per_attribute, causality_per_attribute;
  std::vector<RavelEdit> log;

  nlohmann::json log_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : log) j.push_back({e.base, e.source, e.target, e.caused, e.isolated});
    return j;
  }
};

// Edits are sampled among entity pairs the model recalls completely; the
// recall gate aborts when the model does not know the world well enough.
inline RavelResult ravel_eval(const Model& model, const Tokenizer& tok, const EntityAttributeWorld& w, const RavelIntervention& edit,
                              const RavelConfig& cfg = {}) {
  if (w.n_entities() < 2 || w.n_attributes() < 1) throw Error("ravel: empty world");
  RavelResult res;
  const auto table = fact_recall_table(model, tok, w);
  std::vector<std::size_t> known;
  std::size_t hit = 0;
  for (std::size_t e = 0; e < w.n_entities(); ++e) {
    const auto c = static_cast<std::size_t>(std::count(table[e].begin(), table[e].end(), true));
    hit += c;
    if (c == w.n_attributes()) known.push_back(e);
  }
  res.recall = static_cast<double>(hit) / static_cast<double>(w.n_entities() * w.n_attributes());
  if (res.recall < cfg.recall_gate)
    throw RavelGateError("ravel: model recalls " + std::to_string(res.recall) + " of the world's facts, below the gate " +
                         std::to_string(cfg.recall_gate));
  if (known.size() < 2) throw RavelGateError("ravel: fewer than two fully recalled entities");

  std::vector<RavelEdit> all;
  for (std::size_t b : known)
    for (std::size_t s : known)
      if (b != s)
        for (std::size_t a = 0; a < w.n_attributes(); ++a) all.push_back({b, s, a});
  RngStream rng(cfg.seed, 0x726176656cULL);
  for (std::size_t i = all.size(); i > 1; --i) std::swap(all[i - 1], all[rng.below(i)]);
  if (all.size() > cfg.max_pairs) all.resize(cfg.max_pairs);
  std::sort(all.begin(), all.end(), [](const RavelEdit& x, const RavelEdit& y) {
    return std::tie(x.target, x.base, x.source) < std::tie(y.target, y.base, y.source);
  });

  std::vector<double> iso(w.n_attributes(), 0.0), cau(w.n_attributes(), 0.0), cnt(w.n_attributes(), 0.0);
  for (auto& e : all) {
    e.isolated = true;
    for (std::size_t q = 0; q < w.n_attributes(); ++q) {
      const int got = edit.answer(e.base, e.source, e.target, q);
      if (q == e.target)
        e.caused = got == value_token(tok, w, e.source, q);
      else if (got != value_token(tok, w, e.base, q))
        e.isolated = false;
    }
    iso[e.target] += e.isolated;
    cau[e.target] += e.caused;
    cnt[e.target] += 1.0;
    res.isolation += e.isolated;
    res.causality += e.caused;
  }
  res.isolation /= static_cast<double>(all.size());
  res.causality /= static_cast<double>(all.size());
  for (std::size_t a = 0; a < w.n_attributes(); ++a)
    if (cnt[a] > 0) {
      res.isolation_per_attribute.push_back(iso[a] / cnt[a]);
      res.causality_per_attribute.push_back(cau[a] / cnt[a]);
    }
  res.log = std::move(all);
  return res;
}

}  // namespace ffkv
