#pragma once

#include <regex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ffkv/coders/coder.hpp"
#include "ffkv/service/store.hpp"

namespace ffkv {

// Synthetic dossiers for exercising the service without a harvest. Every
// context puts `keyword` at the peak; the filler vocabulary is drawn from
// `filler` so a scripted annotator can tell sets apart by content alone.
inline nlohmann::json planted_dossier(std::size_t feature, const std::string& keyword, const std::vector<std::string>& filler, double magnitude,
                                      std::uint64_t seed) {
  RngStream rng(seed, feature);
  nlohmann::json ctxs = nlohmann::json::array();
  for (std::size_t i = 0; i < 10; ++i) {
    const std::size_t len = 8 + rng.below(8), peak = rng.below(len);
    std::vector<std::string> toks;
    std::vector<double> acts;
    for (std::size_t t = 0; t < len; ++t) {
      toks.push_back(t == peak ? keyword : filler[rng.below(filler.size())]);
      acts.push_back(t == peak ? magnitude * (1.0 - 0.05 * static_cast<double>(i)) : magnitude * 0.1 * rng.uniform());
    }
    ctxs.push_back({{"text_id", feature * 100 + i}, {"window_start", 0}, {"peak_position", peak}, {"peak", acts[peak]},
                    {"tokens", toks}, {"activations", acts}});
  }
  return {{"feature", feature}, {"contexts", ctxs}};
}

inline std::vector<std::string> fixture_words(const std::string& stem, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(stem + std::to_string(i));
  return out;
}

// One set per label; set s uses filler words "w<s>_<i>" and keywords "k<s>_<feature>".
inline SessionRequest planted_session_request(TaskKind task, const std::vector<std::string>& labels, std::size_t pool, std::size_t per_coder,
                                              std::uint64_t seed) {
  SessionRequest req;
  req.task = task;
  req.per_coder = per_coder;
  req.seed = seed;
  for (std::size_t s = 0; s < labels.size(); ++s) {
    DossierSet set{labels[s], {}};
    const auto filler = fixture_words("w" + std::to_string(s) + "_", 30);
    for (std::size_t f = 0; f < pool; ++f)
      set.dossiers.push_back(planted_dossier(f, "k" + std::to_string(s) + "_" + std::to_string(f), filler, 1.0 + static_cast<double>(s), seed + s));
    req.sets.push_back(std::move(set));
  }
  return req;
}

// Set index of a planted card, read from its filler tokens.
inline std::size_t planted_set_of(const nlohmann::json& card) {
  for (const auto& t : card.at("contexts").at(0).at("tokens")) {
    const auto tok = t.get<std::string>();
    if (tok[0] == 'w') return std::stoul(tok.substr(1, tok.find('_') - 1));
  }
  throw Error("planted card without filler tokens");
}

// Coder-kind identifiers appearing as whole words (case-insensitive).
inline std::vector<std::string> coder_kind_mentions(const std::string& body) {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (auto k : all_coder_kinds()) v.push_back(to_string(k));
    for (const char* s : {"ff-kv", "topk-ff-kv", "k-ff-kv", "sae", "transcoder", "tc"}) v.push_back(s);
    return v;
  }();
  std::vector<std::string> hits;
  for (const auto& n : names) {
    const std::regex re("(^|[^a-z0-9_-])" + std::regex_replace(n, std::regex("-"), "\\-") + "([^a-z0-9_-]|$)", std::regex::icase);
    if (std::regex_search(body, re)) hits.push_back(n);
  }
  return hits;
}

// Correct-guess counts per origin that reproduce 0.86 / 0.28 / 0.13 / 0.18
// with 100 cards per origin.
inline const std::vector<std::pair<std::string, std::size_t>>& scripted_origin_pattern() {
  static const std::vector<std::pair<std::string, std::size_t>> p{{"ffkv", 86}, {"topk_ffkv", 28}, {"sae", 13}, {"transcoder", 18}};
  return p;
}

// The answer the scripted annotator gives for the n-th card (0-based) it sees
// from the set with index `set`: right for the first `correct` cards, then the
// next label round-robin.
inline std::string scripted_origin_answer(std::size_t set, std::size_t nth) {
  const auto& p = scripted_origin_pattern();
  if (nth < p.at(set).second) return p[set].first;
  return p[(set + 1 + nth % (p.size() - 1)) % p.size()].first;
}

}  // namespace ffkv
