#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "ffkv/harvest/history.hpp"
#include "ffkv/metrics/probing.hpp"

namespace ffkv {

// Features are looked up per text; the decoder is the identity, so the
// representation is the feature vector with ablated columns zeroed.
class PlantedSystem final : public CoderSystem {
 public:
  PlantedSystem(std::size_t d, std::map<std::string, std::vector<float>> table) : d_(d), table_(std::move(table)) {}
  std::size_t num_features() const override { return d_; }
  Matrix pooled_features(const std::vector<std::string>& texts) const override {
    Matrix m(texts.size(), d_);
    for (std::size_t r = 0; r < texts.size(); ++r) {
      const auto& v = table_.at(texts[r]);
      for (std::size_t c = 0; c < d_; ++c) m(r, c) = v[c];
    }
    return m;
  }
  Matrix pooled_representation(const std::vector<std::string>& texts, std::span<const std::size_t> ablate) const override {
    Matrix m = pooled_features(texts);
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t c : ablate) m(r, c) = 0.0f;
    return m;
  }

 private:
  std::size_t d_;
  std::map<std::string, std::vector<float>> table_;
};

// ---------------------------------------------------------------------------
// Planted SCR world: latent 0 codes the intended label through noise, latent 1
// codes the spurious one cleanly, the rest is noise. On the biased split the
// spurious latent is the better predictor, so the base probe leans on it.

struct ScrWorld {
  LabeledTextSet biased, balanced;
  std::map<std::string, std::vector<float>> table;
};

inline ScrWorld scr_world(std::uint64_t seed, double bias = 0.95) {
  RngStream rng(seed, 5);
  ScrWorld w;
  std::size_t id = 0;
  auto add = [&](LabeledTextSet& set, int label, int spur, Split split) {
    const std::string text = "t" + std::to_string(id++);
    std::vector<float> v(8);
    v[0] = static_cast<float>((label ? 0.3 : -0.3) + 0.3 * rng.normal());
    v[1] = spur ? 1.0f : -1.0f;
    for (std::size_t c = 2; c < v.size(); ++c) v[c] = static_cast<float>(0.1 * rng.normal());
    w.table[text] = v;
    set.items.push_back({text, label, spur, split});
  };
  for (int i = 0; i < 400; ++i) {
    const int y = i % 2;
    add(w.biased, y, rng.uniform() < bias ? y : 1 - y, Split::train);
  }
  for (int i = 0; i < 400; ++i) add(w.biased, i % 2, (i / 2) % 2, Split::eval);
  for (int i = 0; i < 400; ++i) add(w.balanced, i % 2, (i / 2) % 2, Split::eval);
  return w;
}

// ---------------------------------------------------------------------------
// Planted activation history: text t holds keyword token (t % 3) once among
// filler tokens; feature f fires only on keyword f.

struct PlantedHistory {
  ActivationHistory h;
  static std::string token_string(int id) { return "w" + std::to_string(id); }
};

inline PlantedHistory planted_history(std::size_t texts = 60, std::size_t len = 8) {
  RngStream rng(3, 3);
  PlantedHistory p;
  auto& h = p.h;
  h.num_texts = texts;
  h.activations = Matrix(texts * len, 3);
  for (std::size_t t = 0; t < texts; ++t) {
    const std::size_t at = rng.below(len);
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t r = t * len + i;
      h.index.push_back({t, i});
      if (i == at) {
        h.tokens.push_back(static_cast<int>(t % 3));
        h.activations(r, t % 3) = static_cast<float>(1.0 + rng.uniform());
      } else {
        h.tokens.push_back(10 + static_cast<int>(rng.below(40)));
      }
    }
  }
  h.validate();
  return p;
}

// ---------------------------------------------------------------------------
// Planted one-hot concept: feature 13 is 5 on positives and 0 on negatives,
// everything else is |noise|.

inline ConceptFeatures planted_onehot_concept(std::uint64_t seed = 7) {
  RngStream rng(seed, 7);
  auto make = [&](std::size_t n, Matrix& x, std::vector<int>& y) {
    x = Matrix(n, 32);
    y.clear();
    for (std::size_t r = 0; r < n; ++r) {
      y.push_back(static_cast<int>(r % 2));
      for (std::size_t c = 0; c < 32; ++c) x(r, c) = static_cast<float>(std::abs(rng.normal()));
      x(r, 0) = 0.0f;
      x(r, 13) = y.back() ? 5.0f : 0.0f;
    }
  };
  ConceptFeatures c;
  c.name = "planted";
  make(200, c.train_x, c.train_y);
  make(200, c.eval_x, c.eval_y);
  return c;
}

}  // namespace ffkv
