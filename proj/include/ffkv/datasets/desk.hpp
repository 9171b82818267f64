#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ffkv/datasets/synthetic.hpp"
#include "ffkv/lm/tokenizer.hpp"

namespace ffkv {

// Everything the desk pipeline generates from one seed: the task datasets,
// the LM training documents that teach them, and a word-mode tokenizer that
// covers all of it.
struct DeskDataConfig {
  std::size_t n_entities = 20;
  std::size_t n_attributes = 3;
  std::size_t fact_repeats = 40;
  std::size_t words_per_letter = 12;
  std::size_t letter_repeats = 16;
  std::size_t n_concepts = 5;
  std::size_t concept_size = 200;
  std::size_t topic_classes = 4;
  std::size_t topic_per_class = 100;
  SpuriousSpec spurious{};
  double spurious_bias = 0.95;
  std::size_t lm_texts_per_topic = 300;  // free topic texts in the LM corpus
  std::size_t harvest_texts = 4000;      // texts for the activation harvest
};

inline void to_json(nlohmann::json& j, const DeskDataConfig& c) {
  j = {{"n_entities", c.n_entities},
       {"n_attributes", c.n_attributes},
       {"fact_repeats", c.fact_repeats},
       {"words_per_letter", c.words_per_letter},
       {"letter_repeats", c.letter_repeats},
       {"n_concepts", c.n_concepts},
       {"concept_size", c.concept_size},
       {"topic_classes", c.topic_classes},
       {"topic_per_class", c.topic_per_class},
       {"spurious",
        {{"topic_pos", c.spurious.topic_pos},
         {"topic_neg", c.spurious.topic_neg},
         {"train_size", c.spurious.train_size},
         {"eval_size", c.spurious.eval_size},
         {"topic_dropout", c.spurious.topic_dropout},
         {"topic_keywords", c.spurious.topic_keywords},
         {"style_keywords", c.spurious.style_keywords}}},
       {"spurious_bias", c.spurious_bias},
       {"lm_texts_per_topic", c.lm_texts_per_topic},
       {"harvest_texts", c.harvest_texts}};
}

inline void from_json(const nlohmann::json& j, DeskDataConfig& c) {
  const DeskDataConfig d;
  c.n_entities = j.value("n_entities", d.n_entities);
  c.n_attributes = j.value("n_attributes", d.n_attributes);
  c.fact_repeats = j.value("fact_repeats", d.fact_repeats);
  c.words_per_letter = j.value("words_per_letter", d.words_per_letter);
  c.letter_repeats = j.value("letter_repeats", d.letter_repeats);
  c.n_concepts = j.value("n_concepts", d.n_concepts);
  c.concept_size = j.value("concept_size", d.concept_size);
  c.topic_classes = j.value("topic_classes", d.topic_classes);
  c.topic_per_class = j.value("topic_per_class", d.topic_per_class);
  if (j.contains("spurious")) {
    const auto& s = j["spurious"];
    c.spurious.topic_pos = s.value("topic_pos", d.spurious.topic_pos);
    c.spurious.topic_neg = s.value("topic_neg", d.spurious.topic_neg);
    c.spurious.train_size = s.value("train_size", d.spurious.train_size);
    c.spurious.eval_size = s.value("eval_size", d.spurious.eval_size);
    c.spurious.topic_dropout = s.value("topic_dropout", d.spurious.topic_dropout);
    c.spurious.topic_keywords = s.value("topic_keywords", d.spurious.topic_keywords);
    c.spurious.style_keywords = s.value("style_keywords", d.spurious.style_keywords);
  }
  c.spurious_bias = j.value("spurious_bias", d.spurious_bias);
  c.lm_texts_per_topic = j.value("lm_texts_per_topic", d.lm_texts_per_topic);
  c.harvest_texts = j.value("harvest_texts", d.harvest_texts);
}

struct DeskData {
  DeskDataConfig config;
  std::uint64_t seed = 0;
  EntityAttributeWorld world;
  FirstLetterTask letters;
  std::vector<LabeledTextSet> concepts;
  LabeledTextSet topics;
  LabeledTextSet spurious;
  std::vector<std::string> lm_documents;       // shuffled training documents
  std::vector<std::string> harvest_documents;  // generic text for the activation harvest
  Tokenizer tokenizer = Tokenizer::bytes();

  nlohmann::json manifest() const {
    nlohmann::json concept_fps = nlohmann::json::array();
    for (const auto& c : concepts) concept_fps.push_back(c.manifest);
    return {{"seed", seed},
            {"config", config},
            {"world", sha256_hex(world.to_json().dump())},
            {"concepts", concept_fps},
            {"topics", topics.manifest},
            {"spurious", spurious.manifest},
            {"lm_documents", lm_documents.size()},
            {"vocab_size", tokenizer.vocab_size()}};
  }
};

namespace detail {

// Free text mixing one or two topics with register markers, used both for the
// LM corpus and the harvest.
inline std::string free_text(RngStream& rng) {
  const auto& fams = topic_families();
  const auto& styles = style_families();
  std::vector<std::string> kw = pick_words(rng, fams[rng.below(fams.size())], 1 + rng.below(3));
  if (rng.uniform() < 0.5) kw.push_back(pick_words(rng, fams[rng.below(fams.size())], 1)[0]);
  if (rng.uniform() < 0.5) kw.push_back(pick_words(rng, styles[rng.below(styles.size())], 1)[0]);
  return compose_text(rng, kw);
}

}  // namespace detail

inline DeskData build_desk_data(const DeskDataConfig& cfg, std::uint64_t seed) {
  DeskData d;
  d.config = cfg;
  d.seed = seed;
  PseudoWords words(seed);
  d.world = gen_entity_world(cfg.n_entities, cfg.n_attributes, seed, words);
  d.letters = gen_first_letter_task(cfg.words_per_letter, words);
  d.concepts = gen_binary_concepts(cfg.n_concepts, cfg.concept_size, seed);
  d.topics = gen_topic_classes(cfg.topic_classes, cfg.topic_per_class, seed);
  d.spurious = gen_spurious_pairs(cfg.spurious, cfg.spurious_bias, seed);

  RngStream rng(seed, 0x6465736bULL);
  auto& docs = d.lm_documents;
  for (std::size_t r = 0; r < cfg.fact_repeats; ++r)
    for (const auto& f : d.world.fact_sentences()) docs.push_back(f);
  for (std::size_t r = 0; r < cfg.letter_repeats; ++r)
    for (const auto& list : d.letters.words)
      for (const auto& w : list) docs.push_back(FirstLetterTask::sentence(w));
  for (std::size_t i = 0; i < cfg.lm_texts_per_topic * topic_families().size(); ++i) docs.push_back(detail::free_text(rng));
  for (std::size_t i = docs.size(); i > 1; --i) std::swap(docs[i - 1], docs[rng.below(i)]);

  RngStream hrng(seed, 0x68617276ULL);
  for (std::size_t i = 0; i < cfg.harvest_texts; ++i) d.harvest_documents.push_back(detail::free_text(hrng));

  std::vector<std::string> vocab_src = docs;
  vocab_src.insert(vocab_src.end(), d.harvest_documents.begin(), d.harvest_documents.end());
  for (const auto* set : {&d.topics, &d.spurious})
    for (const auto& it : set->items) vocab_src.push_back(it.text);
  for (const auto& c : d.concepts)
    for (const auto& it : c.items) vocab_src.push_back(it.text);
  d.tokenizer = Tokenizer::words(vocab_src);
  return d;
}

// Prompts are scored the way documents appear in training: after a separator.
inline std::vector<int> prompt_tokens(const Tokenizer& tok, const std::string& prompt) {
  std::vector<int> ids{tok.eos()};
  const auto body = tok.encode(prompt);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

}  // namespace ffkv
