#pragma once

#include <cstdlib>
#include <functional>
#include <map>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "ffkv/harvest/history.hpp"

namespace ffkv {

struct AnnotatedExample {
  std::vector<std::string> tokens;
  std::vector<float> activations;
  std::size_t peak_index = 0;  // index into tokens

  std::string text() const {
    std::string s;
    for (const auto& t : tokens) s += (s.empty() ? "" : " ") + t;
    return s;
  }
};

// explain: activating examples -> explanation. judge: explanation + texts ->
// one activated/not-activated label per text.
class ExplainerClient {
 public:
  virtual ~ExplainerClient() = default;
  virtual std::string explain(const std::vector<AnnotatedExample>& examples) = 0;
  virtual std::vector<bool> judge(const std::string& explanation, const std::vector<std::string>& texts) = 0;
};

// The "explanation" lists the activating texts verbatim, so judging is exact.
class OracleClient final : public ExplainerClient {
 public:
  std::string explain(const std::vector<AnnotatedExample>& examples) override {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : examples) j.push_back(e.text());
    return j.dump();
  }
  std::vector<bool> judge(const std::string& explanation, const std::vector<std::string>& texts) override {
    const auto known = nlohmann::json::parse(explanation).get<std::set<std::string>>();
    std::vector<bool> out;
    for (const auto& t : texts) out.push_back(known.count(t) > 0);
    return out;
  }
};

class ConstantNegativeClient final : public ExplainerClient {
 public:
  std::string explain(const std::vector<AnnotatedExample>&) override { return "nothing"; }
  std::vector<bool> judge(const std::string&, const std::vector<std::string>& texts) override { return std::vector<bool>(texts.size(), false); }
};

// Explanation = the most common token at the examples' peaks (ties: smallest
// string); judge = the text contains that token as a word.
class KeywordMockClient final : public ExplainerClient {
 public:
  std::string explain(const std::vector<AnnotatedExample>& examples) override {
    std::map<std::string, std::size_t> counts;
    for (const auto& e : examples)
      if (!e.tokens.empty()) ++counts[e.tokens.at(e.peak_index)];
    std::string best;
    std::size_t n = 0;
    for (const auto& [tok, c] : counts)
      if (c > n) best = tok, n = c;
    return best;
  }
  std::vector<bool> judge(const std::string& explanation, const std::vector<std::string>& texts) override {
    std::vector<bool> out;
    for (const auto& t : texts) {
      const auto words = Tokenizer::split_words(t);
      out.push_back(std::find(words.begin(), words.end(), explanation) != words.end());
    }
    return out;
  }
};

// Real-LLM transport. POST {prompt, max_tokens} to FFKV_EXPLAINER_URL with the
// model name from FFKV_EXPLAINER_MODEL and a bearer token from
// FFKV_EXPLAINER_KEY; the reply must be JSON with a "text" field.
class HttpExplainerClient final : public ExplainerClient {
 public:
  struct Settings {
    std::string url;  // http://host:port/path
    std::string model;
    std::string key;
    int max_tokens = 256;
    int retries = 3;
    int timeout_seconds = 60;
  };

  static Settings settings_from_env() {
    auto get = [](const char* name) {
      const char* v = std::getenv(name);
      return std::string(v ? v : "");
    };
    Settings s;
    s.url = get("FFKV_EXPLAINER_URL");
    s.model = get("FFKV_EXPLAINER_MODEL");
    s.key = get("FFKV_EXPLAINER_KEY");
    if (s.url.empty()) throw Error("explainer client: FFKV_EXPLAINER_URL is not set");
    return s;
  }

  explicit HttpExplainerClient(Settings s) : s_(std::move(s)) {
    static const std::regex re(R"(^(https?)://([^/:]+)(:(\d+))?(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(s_.url, m, re)) throw Error("explainer client: cannot parse URL '" + s_.url + "'");
    if (m[1] == "https") throw Error("explainer client: https endpoints need a TLS-enabled build; use a local http proxy");
    host_ = m[2];
    port_ = m[4].matched ? std::stoi(m[4]) : 80;
    path_ = m[5].matched ? std::string(m[5]) : "/";
  }

  HttpExplainerClient() : HttpExplainerClient(settings_from_env()) {}

  std::string explain(const std::vector<AnnotatedExample>& examples) override {
    std::string prompt =
        "Each example below marks every token with its activation for one feature as token<<value>>.\n"
        "Describe in one short phrase what the feature responds to.\n\n";
    for (std::size_t i = 0; i < examples.size(); ++i) {
      prompt += "Example " + std::to_string(i + 1) + ": ";
      const auto& e = examples[i];
      for (std::size_t t = 0; t < e.tokens.size(); ++t) {
        prompt += e.tokens[t];
        if (e.activations[t] != 0.0f) prompt += "<<" + format_value(e.activations[t]) + ">>";
        prompt += ' ';
      }
      prompt += '\n';
    }
    return complete(prompt);
  }

  std::vector<bool> judge(const std::string& explanation, const std::vector<std::string>& texts) override {
    std::string prompt = "A feature is described as: " + explanation +
                         "\nWhich of the numbered texts below activate it? Reply with the numbers only, comma separated, "
                         "or 'none'.\n\n";
    for (std::size_t i = 0; i < texts.size(); ++i) prompt += std::to_string(i + 1) + ". " + texts[i] + "\n";
    const std::string reply = complete(prompt);
    std::vector<bool> out(texts.size(), false);
    static const std::regex num(R"(\d+)");
    for (auto it = std::sregex_iterator(reply.begin(), reply.end(), num); it != std::sregex_iterator(); ++it) {
      const long v = std::stol(it->str());
      if (v >= 1 && static_cast<std::size_t>(v) <= texts.size()) out[static_cast<std::size_t>(v - 1)] = true;
    }
    return out;
  }

 private:
  static std::string format_value(float v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
  }

  std::string complete(const std::string& prompt) {
    nlohmann::json body = {{"prompt", prompt}, {"max_tokens", s_.max_tokens}};
    if (!s_.model.empty()) body["model"] = s_.model;
    httplib::Client cli(host_, port_);
    cli.set_connection_timeout(s_.timeout_seconds, 0);
    cli.set_read_timeout(s_.timeout_seconds, 0);
    httplib::Headers headers;
    if (!s_.key.empty()) headers.emplace("Authorization", "Bearer " + s_.key);
    std::string last_error;
    for (int attempt = 0; attempt < std::max(1, s_.retries); ++attempt) {
      auto res = cli.Post(path_, headers, body.dump(), "application/json");
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status != 200) {
        last_error = "HTTP " + std::to_string(res->status);
        if (res->status < 500) break;  // client errors do not improve on retry
        continue;
      }
      try {
        return nlohmann::json::parse(res->body).at("text").get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        last_error = std::string("bad reply: ") + e.what();
        break;
      }
    }
    throw Error("explainer client: " + last_error);
  }

  Settings s_;
  std::string host_, path_;
  int port_ = 80;
};

struct AutoInterpConfig {
  std::size_t n_features = 30;
  std::size_t positives = 2;
  std::size_t negatives = 12;
  std::size_t contexts = 10;
  std::size_t window = 16;
  double negative_ceiling = 0.5;  // negatives peak at most this share of the feature's max
  std::uint64_t seed = 0;
};

struct AutoInterpFeature {
  std::size_t feature = 0;
  std::string explanation;
  double score = 0.0;
};

struct AutoInterpResult {
  std::vector<AutoInterpFeature> features;
  std::vector<std::string> failures;  // transport errors, feature skipped
  std::size_t ineligible = 0;         // too few activating or quiet texts

  std::vector<double> scores() const {
    std::vector<double> out;
    for (const auto& f : features) out.push_back(f.score);
    return out;
  }
};

// Positives are drawn from the feature's top contexts; negatives from texts
// outside them whose peak stays at or below negative_ceiling * max.
inline AutoInterpResult autointerp_eval(const ActivationHistory& h, const std::function<std::string(int)>& token_string,
                                        ExplainerClient& client, const AutoInterpConfig& cfg = {}) {
  if (cfg.positives < 1 || cfg.positives > cfg.contexts) throw Error("autointerp: positives must lie in [1, contexts]");
  const auto ranges = h.text_ranges();
  RngStream rng(cfg.seed, 0x696e74657270ULL);
  std::vector<std::size_t> order(h.d_coder());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  auto render = [&](const std::vector<int>& toks, const std::vector<float>& acts, std::size_t peak) {
    AnnotatedExample e;
    for (int t : toks) e.tokens.push_back(token_string(t));
    e.activations = acts;
    e.peak_index = peak;
    return e;
  };

  AutoInterpResult res;
  for (std::size_t p : order) {
    if (res.features.size() >= cfg.n_features) break;
    const auto dossier = top_contexts(h, p, cfg.contexts, cfg.window);
    if (dossier.contexts.size() < cfg.positives) {
      ++res.ineligible;
      continue;
    }
    std::vector<AnnotatedExample> activating;
    std::set<std::size_t> top_texts;
    std::set<std::string> top_strings;
    for (const auto& c : dossier.contexts) {
      activating.push_back(render(c.tokens, c.activations, c.peak_position - c.window_start));
      top_texts.insert(c.text);
      top_strings.insert(activating.back().text());
    }
    const double ceiling = cfg.negative_ceiling * dossier.max_activation;
    std::vector<AnnotatedExample> quiet;
    for (std::size_t t = 0; t < ranges.size(); ++t) {
      const auto [begin, end] = ranges[t];
      if (begin == end || top_texts.count(t)) continue;
      std::size_t best = begin;
      for (std::size_t r = begin + 1; r < end; ++r)
        if (h.activations(r, p) > h.activations(best, p)) best = r;
      if (h.activations(best, p) > ceiling) continue;
      const std::size_t lo = best >= begin + cfg.window ? best - cfg.window : begin, hi = std::min(end, best + cfg.window + 1);
      std::vector<int> toks(h.tokens.begin() + static_cast<std::ptrdiff_t>(lo), h.tokens.begin() + static_cast<std::ptrdiff_t>(hi));
      std::vector<float> acts;
      for (std::size_t r = lo; r < hi; ++r) acts.push_back(h.activations(r, p));
      auto ex = render(toks, acts, best - lo);
      if (!top_strings.count(ex.text())) quiet.push_back(std::move(ex));
    }
    if (quiet.size() < cfg.negatives) {
      ++res.ineligible;
      continue;
    }

    // Test set: positives from the top contexts, negatives from the quiet pool.
    std::vector<std::pair<std::string, bool>> test;
    std::vector<std::size_t> pi(activating.size()), ni(quiet.size());
    std::iota(pi.begin(), pi.end(), 0);
    std::iota(ni.begin(), ni.end(), 0);
    for (std::size_t i = 0; i < cfg.positives; ++i) {
      std::swap(pi[i], pi[i + rng.below(pi.size() - i)]);
      test.push_back({activating[pi[i]].text(), true});
    }
    for (std::size_t i = 0; i < cfg.negatives; ++i) {
      std::swap(ni[i], ni[i + rng.below(ni.size() - i)]);
      test.push_back({quiet[ni[i]].text(), false});
    }
    for (std::size_t i = test.size(); i > 1; --i) std::swap(test[i - 1], test[rng.below(i)]);

    AutoInterpFeature f;
    f.feature = p;
    try {
      f.explanation = client.explain(activating);
      std::vector<std::string> texts;
      for (const auto& [t, _] : test) texts.push_back(t);
      const auto labels = client.judge(f.explanation, texts);
      if (labels.size() != texts.size()) throw Error("judge returned " + std::to_string(labels.size()) + " labels");
      std::size_t hit = 0;
      for (std::size_t i = 0; i < test.size(); ++i) hit += labels[i] == test[i].second;
      f.score = static_cast<double>(hit) / static_cast<double>(test.size());
    } catch (const std::exception& e) {
      res.failures.push_back("feature " + std::to_string(p) + ": " + e.what());
      continue;
    }
    res.features.push_back(std::move(f));
  }
  return res;
}

}  // namespace ffkv
