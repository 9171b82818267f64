#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstring>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ffkv/coders/coder.hpp"
#include "ffkv/io/container.hpp"
#include "ffkv/lm/model.hpp"

namespace ffkv {

inline constexpr std::string_view kShardMagic = "FFKVSHRD";
inline constexpr std::size_t kShardRows = 4096;
inline constexpr float kZeroFloor = 1e-8f;

// One entry of the flat-index map: token `position` of document `text`.
struct TokenRef {
  std::size_t text = 0;
  std::size_t position = 0;
  auto operator<=>(const TokenRef&) const = default;
};

inline std::string token_fingerprint(const std::vector<std::vector<int>>& docs) {
  std::string bytes;
  for (const auto& d : docs) {
    for (int t : d) {
      const auto u = static_cast<std::uint32_t>(t);
      for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
    }
    bytes.append("\xff\xff\xff\xff", 4);  // document boundary
  }
  return sha256_hex(std::string_view(bytes));
}

inline nlohmann::json describe_coder(const FeatureCoder& c) {
  return {{"kind", to_string(c.kind())}, {"layer", c.layer()}, {"d_coder", c.d_coder()}, {"topk", c.topk()}};
}

struct ActivationHistory {
  Matrix activations;  // l x d_coder
  std::vector<TokenRef> index;
  std::vector<int> tokens;  // token id per row
  std::size_t num_texts = 0;
  nlohmann::json coder = nlohmann::json::object();
  std::string corpus_fingerprint;

  std::size_t rows() const { return activations.rows(); }
  std::size_t d_coder() const { return activations.cols(); }

  // Row range [begin, end) belonging to each text, in order.
  std::vector<std::pair<std::size_t, std::size_t>> text_ranges() const {
    std::vector<std::pair<std::size_t, std::size_t>> out(num_texts, {0, 0});
    std::size_t r = 0;
    while (r < index.size()) {
      const std::size_t t = index[r].text, begin = r;
      while (r < index.size() && index[r].text == t) ++r;
      out[t] = {begin, r};
    }
    return out;
  }

  void validate() const {
    if (index.size() != rows() || tokens.size() != rows()) throw DimensionError("history: index/token/row counts disagree");
    for (std::size_t r = 1; r < index.size(); ++r)
      if (!(index[r - 1] < index[r])) throw Error("history: index map is not strictly increasing");
    if (!activations.all_finite()) throw Error("history: non-finite activations");
  }
};

inline void floor_small_values(Matrix& m) {
  for (auto& v : m.flat())
    if (std::fabs(v) < kZeroFloor) v = 0.0f;
}

// Runs each document (cut into context-length chunks) through the model and
// encodes the coder's input site. Rows follow corpus order.
inline ActivationHistory harvest(const Model& model, const FeatureCoder& coder, const std::vector<std::vector<int>>& docs,
                                 std::size_t limit_tokens) {
  if (limit_tokens == 0) throw Error("harvest: token budget must be at least 1");
  if (coder.layer() >= model.layers.size()) throw Error("harvest: coder layer outside the model");
  if (coder.d_in() != model.config.d_model) throw DimensionError("harvest: coder input width does not match the model");
  std::size_t total = 0;
  for (const auto& d : docs) total += d.size();
  total = std::min(total, limit_tokens);

  ActivationHistory h;
  h.activations = Matrix(total, coder.d_coder());
  h.index.reserve(total);
  h.tokens.reserve(total);
  h.coder = describe_coder(coder);
  const HookPoint hp{coder.layer(), coder.input_site()};
  const std::size_t ctx = model.config.context_length;
  std::size_t row = 0;
  for (std::size_t t = 0; t < docs.size() && row < total; ++t) {
    const auto& doc = docs[t];
    if (doc.empty()) continue;
    h.num_texts = t + 1;
    for (std::size_t start = 0; start < doc.size() && row < total; start += ctx) {
      const std::size_t len = std::min({ctx, doc.size() - start, total - row});
      const std::span<const int> chunk(doc.data() + start, len);
      const auto res = forward_with_hooks(model, chunk, {hp}, {}, false);
      Matrix a = coder.encode(res.captured.at(hp));
      floor_small_values(a);
      std::copy(a.flat().begin(), a.flat().end(), h.activations.flat().begin() + static_cast<std::ptrdiff_t>(row * a.cols()));
      for (std::size_t i = 0; i < len; ++i) {
        h.index.push_back({t, start + i});
        h.tokens.push_back(chunk[i]);
      }
      row += len;
    }
  }
  // Fingerprint the slice actually consumed.
  std::vector<std::vector<int>> used(h.num_texts);
  for (std::size_t r = 0; r < row; ++r) used[h.index[r].text].push_back(h.tokens[r]);
  h.corpus_fingerprint = token_fingerprint(used);
  return h;
}

// Texts with at least one token where feature p is strictly positive.
inline std::set<std::size_t> text_subset(const ActivationHistory& h, std::size_t p) {
  if (p >= h.d_coder()) throw Error("text_subset: feature " + std::to_string(p) + " out of range");
  std::set<std::size_t> out;
  for (std::size_t r = 0; r < h.rows(); ++r)
    if (h.activations(r, p) > 0.0f) out.insert(h.index[r].text);
  return out;
}

struct DossierContext {
  std::size_t text = 0;
  std::size_t peak_position = 0;  // position inside the text
  std::size_t window_start = 0;   // position of tokens[0] inside the text
  float peak = 0.0f;
  std::vector<int> tokens;
  std::vector<float> activations;
};

struct FeatureDossier {
  std::size_t feature = 0;
  std::vector<DossierContext> contexts;
  float max_activation = 0.0f;
  double mean_nonzero = 0.0;
  std::size_t nonzero_count = 0;
};

// One context per text, at the text's peak (earliest position on ties);
// ordered by peak descending then (text, position).
inline FeatureDossier top_contexts(const ActivationHistory& h, std::size_t p, std::size_t m = 10, std::size_t window = 16) {
  if (p >= h.d_coder()) throw Error("top_contexts: feature " + std::to_string(p) + " out of range");
  if (m < 1) throw Error("top_contexts: need at least one context");
  FeatureDossier d;
  d.feature = p;
  double sum = 0;
  bool any = false;
  for (std::size_t r = 0; r < h.rows(); ++r) {
    const float v = h.activations(r, p);
    if (v != 0.0f) {
      ++d.nonzero_count;
      sum += v;
    }
    if (!any || v > d.max_activation) d.max_activation = v;
    any = true;
  }
  d.mean_nonzero = d.nonzero_count ? sum / static_cast<double>(d.nonzero_count) : 0.0;

  struct Peak {
    float value;
    std::size_t text, row;
  };
  std::vector<Peak> peaks;
  for (const auto& [begin, end] : h.text_ranges()) {
    if (begin == end) continue;
    std::size_t best = begin;
    for (std::size_t r = begin + 1; r < end; ++r)
      if (h.activations(r, p) > h.activations(best, p)) best = r;
    if (h.activations(best, p) > 0.0f) peaks.push_back({h.activations(best, p), h.index[best].text, best});
  }
  std::sort(peaks.begin(), peaks.end(), [&](const Peak& a, const Peak& b) {
    if (a.value != b.value) return a.value > b.value;
    return h.index[a.row] < h.index[b.row];
  });
  if (peaks.size() > m) peaks.resize(m);
  const auto ranges = h.text_ranges();
  for (const auto& pk : peaks) {
    const auto [begin, end] = ranges[pk.text];
    const std::size_t lo = pk.row >= begin + window ? pk.row - window : begin;
    const std::size_t hi = std::min(end, pk.row + window + 1);
    DossierContext c;
    c.text = pk.text;
    c.peak = pk.value;
    c.peak_position = h.index[pk.row].position;
    c.window_start = h.index[lo].position;
    for (std::size_t r = lo; r < hi; ++r) {
      c.tokens.push_back(h.tokens[r]);
      c.activations.push_back(h.activations(r, p));
    }
    d.contexts.push_back(std::move(c));
  }
  return d;
}

inline nlohmann::json dossier_to_json(const FeatureDossier& d, const std::function<std::string(int)>& token_string) {
  nlohmann::json ctxs = nlohmann::json::array();
  for (const auto& c : d.contexts) {
    std::vector<std::string> toks;
    for (int t : c.tokens) toks.push_back(token_string(t));
    ctxs.push_back({{"text_id", c.text},
                    {"window_start", c.window_start},
                    {"peak_position", c.peak_position},
                    {"peak", c.peak},
                    {"tokens", toks},
                    {"activations", c.activations}});
  }
  return {{"feature", d.feature},
          {"stats", {{"max", d.max_activation}, {"mean_nonzero", d.mean_nonzero}, {"nonzero_count", d.nonzero_count}}},
          {"contexts", ctxs}};
}

inline void export_dossiers_jsonl(const std::filesystem::path& path, const std::vector<FeatureDossier>& dossiers,
                                  const std::function<std::string(int)>& token_string) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw Error("cannot write '" + path.string() + "'");
  for (const auto& d : dossiers) os << dossier_to_json(d, token_string).dump() << '\n';
}

// On-disk layout: <dir>/history.json (index map, tokens, coder, fingerprint,
// shard list) plus one container per 4096 rows with a SHA-256 of its block.
inline void save_history(const std::filesystem::path& dir, const ActivationHistory& h) {
  h.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json meta;
  meta["version"] = 1;
  meta["rows"] = h.rows();
  meta["d_coder"] = h.d_coder();
  meta["num_texts"] = h.num_texts;
  meta["coder"] = h.coder;
  meta["corpus_fingerprint"] = h.corpus_fingerprint;
  meta["tokens"] = h.tokens;
  nlohmann::json idx = nlohmann::json::array();
  for (const auto& r : h.index) idx.push_back({r.text, r.position});
  meta["index"] = idx;
  nlohmann::json shards = nlohmann::json::array();
  for (std::size_t begin = 0, s = 0; begin < h.rows(); begin += kShardRows, ++s) {
    const std::size_t end = std::min(h.rows(), begin + kShardRows);
    Matrix block(end - begin, h.d_coder());
    std::copy(h.activations.flat().begin() + static_cast<std::ptrdiff_t>(begin * h.d_coder()),
              h.activations.flat().begin() + static_cast<std::ptrdiff_t>(end * h.d_coder()), block.flat().begin());
    Container c;
    c.header = {{"coder", h.coder}, {"d_coder", h.d_coder()}, {"row_begin", begin}, {"row_end", end}, {"sha256", sha256_hex(block.flat())}};
    c.put("activations", std::move(block));
    char name[32];
    std::snprintf(name, sizeof name, "shard_%05zu.bin", s);
    c.save(dir / name, kShardMagic);
    shards.push_back({{"file", name}, {"row_begin", begin}, {"row_end", end}, {"sha256", c.header["sha256"]}});
  }
  meta["shards"] = shards;
  std::ofstream os(dir / "history.json");
  os << meta.dump() << '\n';
  if (!os) throw Error("history: cannot write index");
}

inline ActivationHistory load_history(const std::filesystem::path& dir) {
  std::ifstream is(dir / "history.json");
  if (!is) throw Error("history: missing '" + (dir / "history.json").string() + "'");
  const auto meta = nlohmann::json::parse(is);
  ActivationHistory h;
  h.coder = meta.at("coder");
  h.corpus_fingerprint = meta.at("corpus_fingerprint").get<std::string>();
  h.num_texts = meta.at("num_texts").get<std::size_t>();
  h.tokens = meta.at("tokens").get<std::vector<int>>();
  for (const auto& r : meta.at("index")) h.index.push_back({r.at(0).get<std::size_t>(), r.at(1).get<std::size_t>()});
  const std::size_t rows = meta.at("rows"), d = meta.at("d_coder");
  h.activations = Matrix(rows, d);
  std::size_t next = 0;
  for (const auto& s : meta.at("shards")) {
    const Container c = Container::load(dir / s.at("file").get<std::string>(), kShardMagic);
    const Matrix& block = c.get("activations");
    const std::size_t begin = c.header.at("row_begin"), end = c.header.at("row_end");
    if (begin != next || end - begin != block.rows() || block.cols() != d) throw Error("history: shard rows out of order");
    const std::string sum = sha256_hex(block.flat());
    if (sum != c.header.at("sha256").get<std::string>() || sum != s.at("sha256").get<std::string>())
      throw Error("history: checksum mismatch in " + s.at("file").get<std::string>());
    std::copy(block.flat().begin(), block.flat().end(), h.activations.flat().begin() + static_cast<std::ptrdiff_t>(begin * d));
    next = end;
  }
  if (next != rows) throw Error("history: shards do not cover every row");
  h.validate();
  return h;
}

}  // namespace ffkv
