#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ffkv/datasets/lexicon.hpp"
#include "ffkv/io/container.hpp"
#include "ffkv/numerics/rng.hpp"

namespace ffkv {

enum class Split { train, eval };

struct LabeledText {
  std::string text;
  int label = 0;
  int spurious = -1;  // second label channel, -1 when absent
  Split split = Split::train;
};

struct LabeledTextSet {
  std::string name;
  std::size_t num_classes = 2;
  std::vector<LabeledText> items;
  double bias = 0.0;  // train-split agreement rate of label and spurious channel
  nlohmann::json manifest = nlohmann::json::object();

  std::vector<const LabeledText*> split(Split s) const {
    std::vector<const LabeledText*> out;
    for (const auto& it : items)
      if (it.split == s) out.push_back(&it);
    return out;
  }
};

inline std::string fingerprint(const LabeledTextSet& set) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& it : set.items) j.push_back({it.text, it.label, it.spurious, it.split == Split::train ? 0 : 1});
  return sha256_hex(j.dump());
}

namespace detail {

// Filler sentence of 6-12 words with the keywords dropped in at random slots.
inline std::string compose_text(RngStream& rng, const std::vector<std::string>& keywords) {
  const auto& fill = filler_words();
  std::vector<std::string> words(6 + rng.below(7));
  for (auto& w : words) w = fill[rng.below(fill.size())];
  for (const auto& k : keywords) words.insert(words.begin() + static_cast<std::ptrdiff_t>(rng.below(words.size() + 1)), k);
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

inline std::vector<std::string> pick_words(RngStream& rng, const TopicFamily& f, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(f.words[rng.below(f.words.size())]);
  return out;
}

inline void finish_manifest(LabeledTextSet& set, const std::string& generator, nlohmann::json params, std::uint64_t seed) {
  set.manifest = {{"generator", generator}, {"params", std::move(params)}, {"seed", seed}, {"fingerprint", fingerprint(set)}};
}

}  // namespace detail

// Concept i: "the text mentions topic i". Negatives mention other topics;
// both classes carry one distractor keyword from a random other topic.
inline std::vector<LabeledTextSet> gen_binary_concepts(std::size_t n_concepts, std::size_t size, std::uint64_t seed) {
  const auto& fams = topic_families();
  if (size % 2 != 0 || size < 4) throw Error("gen_binary_concepts: size must be even and at least 4");
  if (n_concepts < 1 || n_concepts > fams.size()) throw Error("gen_binary_concepts: n_concepts must lie in [1, " + std::to_string(fams.size()) + "]");
  std::vector<LabeledTextSet> out;
  for (std::size_t c = 0; c < n_concepts; ++c) {
    RngStream rng(seed, 0x62696e000ULL + c);
    LabeledTextSet set;
    set.name = fams[c].name;
    const std::size_t half = size / 2, train_half = (half * 3 + 2) / 5;
    for (int label : {1, 0})
      for (std::size_t i = 0; i < half; ++i) {
        auto other = [&] {
          std::size_t o = rng.below(fams.size() - 1);
          return o >= c ? o + 1 : o;
        };
        std::vector<std::string> kw = label ? detail::pick_words(rng, fams[c], 2) : detail::pick_words(rng, fams[other()], 2);
        kw.push_back(detail::pick_words(rng, fams[other()], 1)[0]);
        set.items.push_back({detail::compose_text(rng, kw), label, -1, i < train_half ? Split::train : Split::eval});
      }
    detail::finish_manifest(set, "binary_concepts", {{"concept", c}, {"size", size}}, seed);
    out.push_back(std::move(set));
  }
  return out;
}

// m-way topic classification; per class `per_class` texts, 60/40 train/eval.
inline LabeledTextSet gen_topic_classes(std::size_t m, std::size_t per_class, std::uint64_t seed) {
  const auto& fams = topic_families();
  if (m < 2 || m > fams.size()) throw Error("gen_topic_classes: class count must lie in [2, " + std::to_string(fams.size()) + "]");
  if (per_class < 2) throw Error("gen_topic_classes: need at least two texts per class");
  RngStream rng(seed, 0x6d756c7469ULL);
  LabeledTextSet set;
  set.name = "topics" + std::to_string(m);
  set.num_classes = m;
  const std::size_t train = (per_class * 3 + 2) / 5;
  for (std::size_t c = 0; c < m; ++c)
    for (std::size_t i = 0; i < per_class; ++i)
      set.items.push_back({detail::compose_text(rng, detail::pick_words(rng, fams[c], 2)), static_cast<int>(c), -1,
                           i < train ? Split::train : Split::eval});
  detail::finish_manifest(set, "topic_classes", {{"m", m}, {"per_class", per_class}}, seed);
  return set;
}

struct SpuriousSpec {
  std::size_t topic_pos = 0, topic_neg = 1;  // intended concept: which topic family
  std::size_t train_size = 800;
  std::size_t eval_size = 400;
  // Share of texts whose topic keywords are left out, so the intended label is
  // only partly observable and the register becomes the easier cue.
  double topic_dropout = 0.2;
  std::size_t topic_keywords = 1, style_keywords = 2;
};

// Intended label = topic (pos/neg family), spurious label = register (formal
// vs casual markers). Train agrees at `bias`; eval has equal quadrants.
inline LabeledTextSet gen_spurious_pairs(const SpuriousSpec& spec, double bias, std::uint64_t seed) {
  const auto& fams = topic_families();
  const auto& styles = style_families();
  if (!(bias > 0.5 && bias <= 1.0)) throw Error("gen_spurious_pairs: bias must lie in (0.5, 1]");
  if (spec.topic_pos >= fams.size() || spec.topic_neg >= fams.size() || spec.topic_pos == spec.topic_neg)
    throw Error("gen_spurious_pairs: need two distinct topic families");
  if (spec.eval_size % 4 != 0 || spec.eval_size == 0) throw Error("gen_spurious_pairs: eval size must be a positive multiple of 4");
  if (spec.train_size % 2 != 0 || spec.train_size == 0) throw Error("gen_spurious_pairs: train size must be positive and even");
  RngStream rng(seed, 0x7370757269ULL);
  LabeledTextSet set;
  set.name = fams[spec.topic_pos].name + "_vs_" + fams[spec.topic_neg].name;
  set.bias = bias;
  if (!(spec.topic_dropout >= 0.0 && spec.topic_dropout < 1.0)) throw Error("gen_spurious_pairs: topic_dropout must lie in [0, 1)");
  auto make = [&](int a, int b, Split s) {
    std::vector<std::string> kw;
    if (rng.uniform() >= spec.topic_dropout) kw = detail::pick_words(rng, fams[a ? spec.topic_pos : spec.topic_neg], spec.topic_keywords);
    for (auto& w : detail::pick_words(rng, styles[b ? 0 : 1], spec.style_keywords)) kw.push_back(w);
    set.items.push_back({detail::compose_text(rng, kw), a, b, s});
  };
  // Exactly round(bias * n) agreeing pairs, split evenly over the two labels.
  const std::size_t per_label = spec.train_size / 2;
  const auto agree = static_cast<std::size_t>(std::llround(bias * static_cast<double>(per_label)));
  for (int a : {1, 0})
    for (std::size_t i = 0; i < per_label; ++i) make(a, i < agree ? a : 1 - a, Split::train);
  for (int a : {1, 0})
    for (int b : {1, 0})
      for (std::size_t i = 0; i < spec.eval_size / 4; ++i) make(a, b, Split::eval);
  detail::finish_manifest(set, "spurious_pairs",
                          {{"topic_pos", spec.topic_pos}, {"topic_neg", spec.topic_neg}, {"bias", bias}, {"train_size", spec.train_size},
                           {"eval_size", spec.eval_size}, {"topic_dropout", spec.topic_dropout},
                           {"topic_keywords", spec.topic_keywords}, {"style_keywords", spec.style_keywords}},
                          seed);
  return set;
}

struct EntityAttributeWorld {
  std::vector<std::string> entities;
  std::vector<std::string> attributes;
  std::vector<std::vector<std::string>> values;  // [entity][attribute]
  std::uint64_t seed = 0;

  std::size_t n_entities() const { return entities.size(); }
  std::size_t n_attributes() const { return attributes.size(); }

  // The entity is the last prompt token; the value is the next token.
  std::string prompt(std::size_t e, std::size_t a) const { return attributes[a] + " of " + entities[e]; }
  std::string fact(std::size_t e, std::size_t a) const { return prompt(e, a) + " " + values[e][a] + " ."; }

  std::vector<std::string> fact_sentences() const {
    std::vector<std::string> out;
    for (std::size_t e = 0; e < n_entities(); ++e)
      for (std::size_t a = 0; a < n_attributes(); ++a) out.push_back(fact(e, a));
    return out;
  }

  nlohmann::json to_json() const { return {{"entities", entities}, {"attributes", attributes}, {"values", values}, {"seed", seed}}; }
};

inline const std::vector<std::string>& attribute_names() {
  static const std::vector<std::string> names{"color", "city", "dish", "sport", "pet", "job", "river", "tree"};
  return names;
}

// Bijective value assignment per attribute: no two entities share a value.
inline EntityAttributeWorld gen_entity_world(std::size_t n_entities, std::size_t n_attributes, std::uint64_t seed, PseudoWords& words) {
  if (n_entities < 2) throw Error("gen_entity_world: need at least two entities");
  if (n_attributes < 1 || n_attributes > attribute_names().size())
    throw Error("gen_entity_world: at most " + std::to_string(attribute_names().size()) + " attributes available");
  if (n_entities > 2000) throw Error("gen_entity_world: vocabulary exhausted for " + std::to_string(n_entities) + " entities");
  EntityAttributeWorld w;
  w.seed = seed;
  for (std::size_t a = 0; a < n_attributes; ++a) {
    w.attributes.push_back(attribute_names()[a]);
    words.reserve(attribute_names()[a]);
  }
  for (std::size_t e = 0; e < n_entities; ++e) w.entities.push_back(words.next(3));
  w.values.assign(n_entities, std::vector<std::string>(n_attributes));
  for (std::size_t a = 0; a < n_attributes; ++a)
    for (std::size_t e = 0; e < n_entities; ++e) w.values[e][a] = words.next(2);
  return w;
}

inline EntityAttributeWorld gen_entity_world(std::size_t n_entities, std::size_t n_attributes, std::uint64_t seed) {
  PseudoWords words(seed);
  return gen_entity_world(n_entities, n_attributes, seed, words);
}

struct FirstLetterTask {
  std::vector<std::vector<std::string>> words;  // 26 lists, index = letter

  static std::string letter_token(std::size_t letter) { return std::string(1, static_cast<char>('A' + letter)); }
  static std::string prompt(const std::string& word) { return word + " has the first letter :"; }
  static std::string sentence(const std::string& word) { return prompt(word) + " " + letter_token(static_cast<std::size_t>(word[0] - 'a')); }

  void validate() const {
    std::string missing;
    for (std::size_t l = 0; l < 26; ++l)
      if (l >= words.size() || words[l].empty()) missing += letter_token(l);
    if (!missing.empty()) throw Error("first-letter task: no words for letters " + missing);
    for (std::size_t l = 0; l < 26; ++l)
      for (const auto& w : words[l])
        if (w.empty() || w[0] != static_cast<char>('a' + l)) throw Error("first-letter task: '" + w + "' filed under the wrong letter");
  }
};

inline FirstLetterTask gen_first_letter_task(std::size_t words_per_letter, PseudoWords& words) {
  if (words_per_letter < 1) throw Error("gen_first_letter_task: need at least one word per letter");
  FirstLetterTask t;
  t.words.resize(26);
  for (std::size_t l = 0; l < 26; ++l)
    for (std::size_t i = 0; i < words_per_letter; ++i) t.words[l].push_back(words.next(2, std::string(1, static_cast<char>('a' + l))));
  t.validate();
  return t;
}

}  // namespace ffkv
