#pragma once

#include <string>
#include <vector>

#include "ffkv/metrics/probing.hpp"

namespace ffkv {

struct AbsorptionCase {
  std::vector<std::size_t> s_main, s_abs;
  std::vector<double> a;               // activation per feature
  std::vector<std::vector<double>> d;  // unit decoder direction per feature
  std::vector<double> p;               // probe direction
};

// Share of the probe-direction projection carried by absorbing features.
// Negative projections are clipped to zero so the ratio stays in [0, 1].
inline double absorption_score(std::span<const double> abs_terms, std::span<const double> main_terms) {
  double abs = 0.0, main = 0.0;
  for (double v : abs_terms) abs += std::max(0.0, v);
  for (double v : main_terms) main += std::max(0.0, v);
  return abs + main > 0.0 ? abs / (abs + main) : 0.0;
}

inline double absorption_score(const AbsorptionCase& c) {
  auto term = [&](std::size_t i) {
    double s = 0.0;
    for (std::size_t k = 0; k < c.p.size(); ++k) s += c.d.at(i).at(k) * c.p[k];
    return c.a.at(i) * s;
  };
  for (std::size_t i : c.s_main)
    if (std::find(c.s_abs.begin(), c.s_abs.end(), i) != c.s_abs.end()) throw Error("absorption: S_main and S_abs overlap");
  std::vector<double> abs, main;
  for (std::size_t i : c.s_abs) abs.push_back(term(i));
  for (std::size_t i : c.s_main) main.push_back(term(i));
  return absorption_score(abs, main);
}

struct AbsorptionConfig {
  std::size_t main_features = 2;
  double cos_threshold = 0.3;  // minimum cosine between an absorbing feature and the probe
  bool at_answer = true;       // read at the trailing ":" instead of the word token
  ProbeConfig probe{};
};

struct LetterAbsorption {
  std::string letter;
  std::vector<std::size_t> s_main;
  std::size_t words = 0;
  double mean_score = 0.0;
  double probe_accuracy = 0.0;  // in-sample accuracy of the ground-truth probe
};

struct AbsorptionResult {
  std::vector<LetterAbsorption> letters;
  std::vector<std::string> skipped;

  double mean() const {
    double s = 0.0;
    for (const auto& l : letters) s += l.mean_score;
    return letters.empty() ? 0.0 : s / static_cast<double>(letters.size());
  }
  std::vector<double> per_letter() const {
    std::vector<double> out;
    for (const auto& l : letters) out.push_back(l.mean_score);
    return out;
  }
};

// Activations are read on "{word} has the first letter :", at the colon by
// default. With word-level tokens the word embedding carries no spelling, so
// the letter only exists where the model computes its answer.
// The ground-truth direction for each letter is a one-vs-rest probe on ff_out
// at the coder's layer; S_main is the top features by mean difference.
inline AbsorptionResult absorption_eval(const Model& model, const FeatureCoder& coder, const Tokenizer& tok, const FirstLetterTask& task,
                                        const AbsorptionConfig& cfg = {}) {
  task.validate();
  std::vector<int> letter_of;
  std::vector<std::vector<float>> feat_rows, out_rows;
  for (std::size_t l = 0; l < 26; ++l)
    for (const auto& w : task.words[l]) {
      const auto p = prompt_activations(model, coder, prompt_tokens(tok, FirstLetterTask::prompt(w)));
      const std::size_t at = cfg.at_answer ? p.tokens.size() - 1 : 1;
      feat_rows.emplace_back(p.features.row(at).begin(), p.features.row(at).end());
      out_rows.emplace_back(p.ff_out.row(at).begin(), p.ff_out.row(at).end());
      letter_of.push_back(static_cast<int>(l));
    }
  const std::size_t n = letter_of.size(), f = coder.d_coder(), d = coder.d_out();
  Matrix feats(n, f), outs(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    std::copy(feat_rows[r].begin(), feat_rows[r].end(), feats.row(r).begin());
    std::copy(out_rows[r].begin(), out_rows[r].end(), outs.row(r).begin());
  }

  // Unit decoder directions; dead (zero) rows never contribute.
  const Matrix& fv = coder.feature_vectors();
  std::vector<double> fnorm(f);
  for (std::size_t i = 0; i < f; ++i) fnorm[i] = l2_norm(fv.row(i));

  AbsorptionResult res;
  for (std::size_t l = 0; l < 26; ++l) {
    const auto y = one_vs_rest(letter_of, static_cast<int>(l));
    const auto probe = fit_linear_probe(outs, y, cfg.probe);
    std::vector<double> p(d);
    double pn = 0.0;
    for (std::size_t k = 0; k < d; ++k) pn += (p[k] = probe.raw_weight(1, k) - probe.raw_weight(0, k)) * p[k];
    pn = std::sqrt(pn);
    if (pn == 0.0) {
      res.skipped.push_back(FirstLetterTask::letter_token(l) + ": probe direction vanished");
      continue;
    }
    for (auto& v : p) v /= pn;

    std::vector<double> cos(f, 0.0);
    for (std::size_t i = 0; i < f; ++i) {
      if (fnorm[i] == 0.0) continue;
      double s = 0.0;
      auto row = fv.row(i);
      for (std::size_t k = 0; k < d; ++k) s += row[k] * p[k];
      cos[i] = s / fnorm[i];
    }

    LetterAbsorption la;
    la.letter = FirstLetterTask::letter_token(l);
    la.s_main = rank_features(mean_difference_scores(feats, y), cfg.main_features);
    la.probe_accuracy = probe_accuracy(probe, outs, y);
    std::vector<bool> is_main(f, false);
    for (std::size_t i : la.s_main) is_main[i] = true;
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      if (!y[r]) continue;
      std::vector<double> abs, main;
      for (std::size_t i = 0; i < f; ++i) {
        const double a = feats(r, i);
        if (is_main[i])
          main.push_back(a * cos[i]);
        else if (a > 0.0 && cos[i] >= cfg.cos_threshold)
          abs.push_back(a * cos[i]);
      }
      total += absorption_score(abs, main);
      ++la.words;
    }
    la.mean_score = total / static_cast<double>(la.words);
    res.letters.push_back(std::move(la));
  }
  return res;
}

}  // namespace ffkv
