#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "ffkv/datasets/corpus.hpp"
#include "ffkv/datasets/synthetic.hpp"
#include "ffkv/numerics/probe.hpp"

using namespace ffkv;

namespace {

// Bag-of-words count matrix over a fixed vocabulary built from the train texts.
struct Bow {
  std::map<std::string, std::size_t> vocab;

  explicit Bow(const std::vector<const LabeledText*>& train) {
    for (auto* t : train)
      for (auto& w : Tokenizer::split_words(t->text)) vocab.emplace(w, vocab.size());
  }

  Matrix features(const std::vector<const LabeledText*>& texts) const {
    Matrix x(texts.size(), vocab.size());
    for (std::size_t i = 0; i < texts.size(); ++i)
      for (auto& w : Tokenizer::split_words(texts[i]->text))
        if (auto it = vocab.find(w); it != vocab.end()) x(i, it->second) += 1.0f;
    return x;
  }
};

std::vector<int> labels(const std::vector<const LabeledText*>& texts) {
  std::vector<int> y;
  for (auto* t : texts) y.push_back(t->label);
  return y;
}

std::filesystem::path write_file(const std::string& name, const std::string& content) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::ofstream(p, std::ios::binary) << content;
  return p;
}

}  // namespace

TEST(BinaryConcepts, BalancedAndDeterministic) {
  const auto a = gen_binary_concepts(3, 200, 7), b = gen_binary_concepts(3, 200, 7);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t c = 0; c < 3; ++c) {
    std::size_t pos = 0, pos_eval = 0, neg_eval = 0;
    for (const auto& it : a[c].items) {
      pos += it.label == 1;
      if (it.split == Split::eval) (it.label ? pos_eval : neg_eval)++;
    }
    EXPECT_EQ(pos, 100u);
    EXPECT_EQ(pos_eval, neg_eval);
    EXPECT_EQ(a[c].manifest["fingerprint"], b[c].manifest["fingerprint"]);
    EXPECT_EQ(a[c].items[17].text, b[c].items[17].text);
  }
  EXPECT_NE(fingerprint(gen_binary_concepts(1, 200, 8)[0]), fingerprint(a[0]));
  EXPECT_THROW(gen_binary_concepts(1, 201, 7), Error);
  EXPECT_THROW(gen_binary_concepts(11, 200, 7), Error);
}

TEST(BinaryConcepts, LearnableByBagOfWords) {
  for (const auto& set : gen_binary_concepts(4, 400, 3)) {
    const auto train = set.split(Split::train), eval = set.split(Split::eval);
    const Bow bow(train);
    const auto probe = fit_linear_probe(bow.features(train), labels(train), {});
    EXPECT_GE(probe_accuracy(probe, bow.features(eval), labels(eval)), 0.95) << set.name;
  }
}

TEST(TopicClasses, Shape) {
  const auto set = gen_topic_classes(5, 50, 1);
  EXPECT_EQ(set.num_classes, 5u);
  EXPECT_EQ(set.items.size(), 250u);
  EXPECT_EQ(set.split(Split::train).size(), 150u);
  EXPECT_THROW(gen_topic_classes(1, 50, 1), Error);
}

TEST(SpuriousPairs, TrainBiasAndEvalQuadrants) {
  const auto full = gen_spurious_pairs({.train_size = 400, .eval_size = 200}, 1.0, 2);
  for (auto* t : full.split(Split::train)) EXPECT_EQ(t->label, t->spurious);
  const auto set = gen_spurious_pairs({.train_size = 400, .eval_size = 200}, 0.9, 2);
  std::size_t agree = 0;
  for (auto* t : set.split(Split::train)) agree += t->label == t->spurious;
  EXPECT_EQ(agree, 360u);
  std::map<std::pair<int, int>, std::size_t> quad;
  for (auto* t : set.split(Split::eval)) ++quad[{t->label, t->spurious}];
  ASSERT_EQ(quad.size(), 4u);
  for (const auto& [k, n] : quad) EXPECT_EQ(n, 50u);
  // Exactly zero empirical correlation between the channels on eval.
  double sab = 0, sa = 0, sb = 0;
  const auto eval = set.split(Split::eval);
  for (auto* t : eval) {
    sab += t->label * t->spurious;
    sa += t->label;
    sb += t->spurious;
  }
  const double n = static_cast<double>(eval.size());
  EXPECT_DOUBLE_EQ(sab / n - (sa / n) * (sb / n), 0.0);
  EXPECT_THROW(gen_spurious_pairs({}, 0.5, 1), Error);
  EXPECT_THROW(gen_spurious_pairs({.eval_size = 10}, 0.9, 1), Error);
}

TEST(SpuriousPairs, BiasedProbeLosesToBalancedProbe) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto set = gen_spurious_pairs({.train_size = 800, .eval_size = 400}, 0.95, seed);
    auto train = set.split(Split::train), eval = set.split(Split::eval);
    // A balanced training set of the same size from the eval generator.
    const auto balanced_set = gen_spurious_pairs({.train_size = 800, .eval_size = 800}, 0.95, seed + 100);
    const auto balanced = balanced_set.split(Split::eval);
    const Bow bow(train);
    const auto biased = fit_linear_probe(bow.features(train), labels(train), {});
    const auto oracle = fit_linear_probe(bow.features(balanced), labels(balanced), {});
    const double a_base = probe_accuracy(biased, bow.features(eval), labels(eval));
    const double a_oracle = probe_accuracy(oracle, bow.features(eval), labels(eval));
    EXPECT_LT(a_base + 0.05, a_oracle) << "seed " << seed;
  }
}

TEST(EntityWorld, ConstructionAndDeterminism) {
  const auto w = gen_entity_world(20, 3, 5);
  EXPECT_EQ(w.fact_sentences().size(), 60u);
  for (std::size_t a = 0; a < 3; ++a) {
    std::set<std::string> vals;
    for (std::size_t e = 0; e < 20; ++e) vals.insert(w.values[e][a]);
    EXPECT_EQ(vals.size(), 20u);
  }
  // Every value is a single whitespace token and the entity ends the prompt.
  for (const auto& row : w.values)
    for (const auto& v : row) EXPECT_EQ(Tokenizer::split_words(v).size(), 1u);
  EXPECT_EQ(Tokenizer::split_words(w.prompt(3, 1)).back(), w.entities[3]);
  EXPECT_EQ(gen_entity_world(20, 3, 5).to_json(), w.to_json());
  EXPECT_NE(gen_entity_world(20, 3, 6).to_json(), w.to_json());
  EXPECT_THROW(gen_entity_world(20, 9, 5), Error);
  EXPECT_THROW(gen_entity_world(5000, 3, 5), Error);
}

TEST(FirstLetter, CoversAllLetters) {
  PseudoWords words(1);
  const auto t = gen_first_letter_task(4, words);
  for (std::size_t l = 0; l < 26; ++l) {
    ASSERT_EQ(t.words[l].size(), 4u);
    for (const auto& w : t.words[l]) EXPECT_EQ(w[0], 'a' + l);
  }
  EXPECT_EQ(FirstLetterTask::sentence("kobi"), "kobi has the first letter : K");
  FirstLetterTask broken = t;
  broken.words[16].clear();
  broken.words[23].clear();
  try {
    broken.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("QX"), std::string::npos);
  }
}

TEST(LoadCorpus, EmptyFile) {
  EXPECT_TRUE(load_corpus(write_file("ffkv_empty.txt", ""), CorpusFormat::plain).empty());
}

TEST(LoadCorpus, JsonlInFileOrder) {
  const auto p = write_file("ffkv_c.jsonl", "{\"id\":\"b\",\"text\":\"two words\"}\n{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":7,\"text\":\"é y\"}\n");
  const auto docs = load_corpus(p, CorpusFormat::jsonl);
  ASSERT_EQ(docs.size(), 3u);
  EXPECT_EQ(docs[0], (Document{"b", "two words"}));
  EXPECT_EQ(docs[1].id, "a");
  EXPECT_EQ(docs[2].id, "7");
  EXPECT_EQ(corpus_fingerprint(docs), corpus_fingerprint(load_corpus(p, CorpusFormat::jsonl)));
}

TEST(LoadCorpus, TokenLimitStopsAtContainingDocument) {
  std::string text;
  for (int i = 0; i < 10; ++i) text += "w1 w2 w3 w4\n";  // 4 tokens per document
  const auto docs = load_corpus(write_file("ffkv_lim.txt", text), CorpusFormat::plain, 10);
  // Tokens 1-4, 5-8, 9-12: token 10 lives in the third document.
  EXPECT_EQ(docs.size(), 3u);
  EXPECT_EQ(docs[2].id, "line-3");
}

TEST(LoadCorpus, Errors) {
  try {
    load_corpus(write_file("ffkv_bad.jsonl", "{\"text\":\"ok\"}\n{\"text\": oops}\n"), CorpusFormat::jsonl);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(load_corpus(write_file("ffkv_bad.txt", "fine\nbad \xc3\x28 bytes\n"), CorpusFormat::plain), Error);
  EXPECT_THROW(load_corpus(write_file("ffkv_bad2.txt", "overlong \xc0\xaf\n"), CorpusFormat::plain), Error);
  EXPECT_THROW(load_corpus("/nonexistent/ffkv", CorpusFormat::plain), Error);
  EXPECT_EQ(find_invalid_utf8("plain ascii, \xe2\x82\xac and \xf0\x9f\x98\x80"), std::string_view::npos);
}
