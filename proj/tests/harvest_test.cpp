#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ffkv/harvest/history.hpp"

using namespace ffkv;

namespace {

ModelConfig cfg(std::size_t layers = 2) {
  ModelConfig c = ModelConfig::with_activation(ActivationKind::gelu);
  c.n_layers = layers;
  c.d_model = 8;
  c.d_ff = 24;
  c.n_heads = 2;
  c.vocab_size = 30;
  c.context_length = 8;
  c.seed = 4;
  return c;
}

std::vector<std::vector<int>> random_docs(std::size_t n, std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<std::vector<int>> docs(n);
  for (auto& d : docs) {
    d.resize(1 + rng.below(20));
    for (auto& t : d) t = static_cast<int>(rng.below(30));
  }
  return docs;
}

// A history built by hand from a dense matrix and a document layout.
ActivationHistory planted(const Matrix& a, const std::vector<std::size_t>& doc_lengths, std::vector<int> tokens = {}) {
  ActivationHistory h;
  h.activations = a;
  for (std::size_t t = 0; t < doc_lengths.size(); ++t)
    for (std::size_t p = 0; p < doc_lengths[t]; ++p) h.index.push_back({t, p});
  h.num_texts = doc_lengths.size();
  if (tokens.empty()) tokens.assign(a.rows(), 0);
  h.tokens = std::move(tokens);
  h.validate();
  return h;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Harvest, SingleDocumentIndexing) {
  const Model m = random_init_model(cfg());
  FeedForwardWeights ff = m.layers[0].ff;
  ff.w_k = Matrix(8, 3, 0.1f);
  ff.b_k = Vector(3, 0.0f);
  ff.w_v = Matrix(3, 8, 0.1f);
  const auto coder = FeatureCoder::from_ff(ff, CoderKind::ffkv, {}, 0);
  const auto h = harvest(m, coder, {{1, 2, 3, 4, 5}}, 100);
  EXPECT_EQ(h.rows(), 5u);
  EXPECT_EQ(h.d_coder(), 3u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(h.index[i], (TokenRef{0, i}));
  EXPECT_EQ(h.tokens, (std::vector<int>{1, 2, 3, 4, 5}));
}

TEST(Harvest, MatchesClosedFormOnHandBuiltLayer) {
  auto c = cfg(1);
  c.activation = ActivationKind::relu;
  Model m = random_init_model(c);
  auto& ff = m.layers[0].ff;
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t i = 0; i < 24; ++i) ff.w_k(r, i) = static_cast<float>((int(r * 7 + i * 3) % 5) - 2) * 0.25f;
  for (std::size_t i = 0; i < 24; ++i) ff.b_k[i] = static_cast<float>(int(i % 3) - 1) * 0.125f;
  const auto h = harvest(m, FeatureCoder::ffkv(m, 0), {{3, 1, 4}}, 10);
  const auto res = forward_with_hooks(m, std::vector<int>{3, 1, 4}, {{0, HookSite::ff_in}});
  const Matrix& x = res.captured.at({0, HookSite::ff_in});
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t i = 0; i < 24; ++i) {
      double k = ff.b_k[i];
      for (std::size_t r = 0; r < 8; ++r) k += double(x(t, r)) * ff.w_k(r, i);
      const double want = std::max(k, 0.0) < 1e-8 ? 0.0 : std::max(k, 0.0);
      EXPECT_NEAR(h.activations(t, i), want, 1e-6 * (1 + std::fabs(want)));
    }
}

TEST(Harvest, DeterministicAndByteIdenticalShards) {
  const Model m = random_init_model(cfg());
  const auto docs = random_docs(900, 1);
  const auto coder = FeatureCoder::ffkv(m, 1);
  const auto a = harvest(m, coder, docs, 6000), b = harvest(m, coder, docs, 6000);
  EXPECT_EQ(a.activations, b.activations);
  EXPECT_EQ(a.corpus_fingerprint, b.corpus_fingerprint);
  ASSERT_GT(a.rows(), kShardRows);  // at least two shards
  const auto da = scratch("ffkv_hist_a"), db = scratch("ffkv_hist_b");
  save_history(da, a);
  save_history(db, b);
  for (const auto& f : {"shard_00000.bin", "shard_00001.bin", "history.json"}) {
    std::ifstream fa(da / f, std::ios::binary), fb(db / f, std::ios::binary);
    const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
    EXPECT_FALSE(sa.empty());
    EXPECT_EQ(sa, sb) << f;
  }
  const auto back = load_history(da);
  EXPECT_EQ(back.activations, a.activations);
  EXPECT_EQ(back.index, a.index);
  EXPECT_EQ(back.tokens, a.tokens);
  EXPECT_EQ(back.corpus_fingerprint, a.corpus_fingerprint);
  std::filesystem::remove_all(da);
  std::filesystem::remove_all(db);
}

TEST(Harvest, ShardChecksumDetectsCorruption) {
  const Model m = random_init_model(cfg());
  const auto h = harvest(m, FeatureCoder::ffkv(m, 0), random_docs(20, 2), 1000);
  const auto dir = scratch("ffkv_hist_bad");
  save_history(dir, h);
  {
    std::fstream f(dir / "shard_00000.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-3, std::ios::end);
    f.put('\x5a');
  }
  EXPECT_THROW(load_history(dir), Error);
  std::filesystem::remove_all(dir);
}

TEST(Harvest, IndexStrictlyIncreasingAcrossChunks) {
  const Model m = random_init_model(cfg());
  const auto h = harvest(m, FeatureCoder::ffkv(m, 0), random_docs(50, 3), 100000);
  for (std::size_t r = 1; r < h.rows(); ++r) EXPECT_LT(h.index[r - 1], h.index[r]);
  std::size_t total = 0;
  for (const auto& d : random_docs(50, 3)) total += d.size();
  EXPECT_EQ(h.rows(), total);
}

TEST(Harvest, TokenBudget) {
  const Model m = random_init_model(cfg());
  const auto h = harvest(m, FeatureCoder::ffkv(m, 0), random_docs(50, 3), 37);
  EXPECT_EQ(h.rows(), 37u);
  EXPECT_THROW(harvest(m, FeatureCoder::ffkv(m, 0), random_docs(5, 3), 0), Error);
}

// Cache fidelity: a stored entry equals re-running the prefix up to that token.
TEST(Harvest, CacheMatchesFreshReencode) {
  const Model m = random_init_model(cfg());
  const auto docs = random_docs(60, 4);
  const auto coder = FeatureCoder::ffkv(m, 1);
  const auto h = harvest(m, coder, docs, 100000);
  RngStream rng(5);
  const std::size_t ctx = m.config.context_length;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t r = rng.below(h.rows()), p = rng.below(h.d_coder());
    const auto [text, pos] = h.index[r];
    const std::size_t chunk_start = pos / ctx * ctx;
    const std::span<const int> prefix(docs[text].data() + chunk_start, pos - chunk_start + 1);
    const auto res = forward_with_hooks(m, prefix, {{1, HookSite::ff_in}});
    const Matrix& x = res.captured.at({1, HookSite::ff_in});
    Matrix last(1, x.cols());
    std::copy(x.row(x.rows() - 1).begin(), x.row(x.rows() - 1).end(), last.row(0).begin());
    Matrix a = coder.encode(last);
    floor_small_values(a);
    EXPECT_NEAR(h.activations(r, p), a(0, p), 1e-6);
  }
}

TEST(TextSubset, BruteForceScan) {
  RngStream rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix a(6, 3);
    for (auto& v : a.flat()) v = rng.bernoulli(0.3) ? static_cast<float>(rng.normal()) : 0.0f;
    const auto h = planted(a, {2, 4});
    for (std::size_t p = 0; p < 3; ++p) {
      std::set<std::size_t> want;
      for (std::size_t r = 0; r < 6; ++r)
        if (a(r, p) > 0) want.insert(r < 2 ? 0 : 1);
      EXPECT_EQ(text_subset(h, p), want);
    }
  }
  Matrix a(6, 2);
  for (std::size_t r = 0; r < 6; ++r) a(r, 1) = 1.0f;
  const auto h = planted(a, {2, 4});
  EXPECT_TRUE(text_subset(h, 0).empty());
  EXPECT_EQ(text_subset(h, 1), (std::set<std::size_t>{0, 1}));
  EXPECT_THROW(text_subset(h, 2), Error);
}

TEST(TopContexts, SingleFiringAndTieOrder) {
  Matrix a(7, 2);
  a(3, 0) = 2.0f;
  a(1, 1) = 5.0f;  // text 0, position 1
  a(5, 1) = 5.0f;  // text 1, position 2
  a(6, 1) = 5.0f;  // text 1, position 3: same text, later position loses
  const auto h = planted(a, {3, 4});
  const auto d0 = top_contexts(h, 0);
  ASSERT_EQ(d0.contexts.size(), 1u);
  EXPECT_EQ(d0.contexts[0].text, 1u);
  EXPECT_EQ(d0.contexts[0].peak_position, 0u);
  EXPECT_EQ(d0.nonzero_count, 1u);
  const auto d1 = top_contexts(h, 1);
  ASSERT_EQ(d1.contexts.size(), 2u);
  EXPECT_EQ(d1.contexts[0].text, 0u);
  EXPECT_EQ(d1.contexts[1].text, 1u);
  EXPECT_EQ(d1.contexts[1].peak_position, 2u);
  EXPECT_DOUBLE_EQ(d1.mean_nonzero, 5.0);
  EXPECT_THROW(top_contexts(h, 2), Error);
  EXPECT_THROW(top_contexts(h, 0, 0), Error);
}

TEST(TopContexts, PlantedKeywordFeature) {
  // Feature 0 fires on token 7 only, with a strength that varies by text.
  RngStream rng(8);
  std::vector<std::size_t> lens;
  std::vector<int> toks;
  std::vector<float> vals;
  for (std::size_t t = 0; t < 40; ++t) {
    lens.push_back(5 + rng.below(30));
    for (std::size_t p = 0; p < lens.back(); ++p) {
      const int tok = rng.bernoulli(0.1) ? 7 : static_cast<int>(rng.below(7));
      toks.push_back(tok);
      vals.push_back(tok == 7 ? static_cast<float>(1.0 + rng.uniform()) : 0.0f);
    }
  }
  Matrix a(toks.size(), 1, vals);
  const auto h = planted(a, lens, toks);
  const auto d = top_contexts(h, 0, 10, 16);
  ASSERT_EQ(d.contexts.size(), 10u);
  for (std::size_t i = 0; i < d.contexts.size(); ++i) {
    const auto& c = d.contexts[i];
    EXPECT_GT(c.peak, 0.0f);
    EXPECT_NE(std::find(c.tokens.begin(), c.tokens.end(), 7), c.tokens.end());
    EXPECT_LE(c.tokens.size(), 33u);
    EXPECT_EQ(c.tokens[c.peak_position - c.window_start], 7);
    if (i > 0) EXPECT_GE(d.contexts[i - 1].peak, c.peak);
  }
}

TEST(TopContexts, JsonlExport) {
  Matrix a(3, 1, std::vector<float>{0.0f, 1.5f, 0.0f});
  const auto h = planted(a, {3}, {4, 5, 6});
  const auto path = std::filesystem::temp_directory_path() / "ffkv_dossiers.jsonl";
  export_dossiers_jsonl(path, {top_contexts(h, 0)}, [](int t) { return "w" + std::to_string(t); });
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j["feature"], 0);
  EXPECT_EQ(j["contexts"][0]["tokens"], (std::vector<std::string>{"w4", "w5", "w6"}));
  EXPECT_EQ(j["contexts"][0]["peak_position"], 1);
  std::filesystem::remove(path);
}
