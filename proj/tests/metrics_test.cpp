#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>
#include <thread>

#include "ffkv/metrics/absorption.hpp"
#include "ffkv/metrics/autointerp.hpp"
#include "ffkv/metrics/fixture.hpp"
#include "ffkv/metrics/report.hpp"

using namespace ffkv;

namespace {

Matrix from_rows(const std::vector<std::vector<float>>& rows) {
  Matrix m(rows.size(), rows.at(0).size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) m(r, c) = rows[r][c];
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(Alive, HandCases) {
  EXPECT_DOUBLE_EQ(feature_alive_rate(from_rows({{0, 2}, {0, 0}, {1, 0}})), 1.0);
  EXPECT_DOUBLE_EQ(feature_alive_rate(from_rows({{0, 2}, {0, 0}, {0, 3}})), 0.5);
  AliveAccumulator acc(3);
  acc.add(from_rows({{0, 0, 1}}));
  acc.add(from_rows({{0, 4, 0}}));
  EXPECT_EQ(acc.alive_count(), 2u);
  EXPECT_NEAR(acc.rate(), 2.0 / 3.0, 1e-12);
}

TEST(ExplainedVariance, HandOracle) {
  // x = [[1,2],[3,6]], mean (2,4), total variance 2 + 8 = 10.
  // residual [[0,1],[0,-1]] -> 2, so EV = 1 - 2/10.
  const auto x = from_rows({{1, 2}, {3, 6}});
  EXPECT_NEAR(explained_variance(x, from_rows({{1, 1}, {3, 7}})), 0.8, 1e-9);
  EXPECT_NEAR(explained_variance(x, x), 1.0, 1e-12);
  EXPECT_NEAR(explained_variance(x, from_rows({{2, 4}, {2, 4}})), 0.0, 1e-12);
  EXPECT_THROW(explained_variance(from_rows({{1, 1}, {1, 1}}), from_rows({{1, 1}, {1, 1}})), Error);
}

TEST(ExplainedVariance, StreamingMatchesBatch) {
  RngStream rng(2, 2);
  Matrix x(50, 6), y(50, 6);
  for (std::size_t i = 0; i < x.flat().size(); ++i) {
    x.flat()[i] = static_cast<float>(rng.normal());
    y.flat()[i] = x.flat()[i] + static_cast<float>(0.3 * rng.normal());
  }
  ExplainedVarianceAccumulator acc(6);
  for (std::size_t s = 0; s < 50; s += 10) {
    Matrix a(10, 6), b(10, 6);
    for (std::size_t r = 0; r < 10; ++r)
      for (std::size_t c = 0; c < 6; ++c) a(r, c) = x(s + r, c), b(r, c) = y(s + r, c);
    acc.add(a, b);
  }
  EXPECT_NEAR(acc.value(), explained_variance(x, y), 1e-9);
}

TEST(Absorption, FormulaHandCases) {
  // main term 3 * 1 = 3, absorbing term 1 * 1 = 1 -> 0.25
  AbsorptionCase c{{0}, {1}, {3.0, 1.0}, {{1, 0}, {1, 0}}, {1, 0}};
  EXPECT_NEAR(absorption_score(c), 0.25, 1e-12);
  c.s_abs.clear();
  EXPECT_DOUBLE_EQ(absorption_score(c), 0.0);
  c.s_abs = {1};
  c.a = {0.0, 1.0};
  EXPECT_DOUBLE_EQ(absorption_score(c), 1.0);
  c.s_abs = {0};
  EXPECT_THROW(absorption_score(c), Error);
  const std::vector<double> neg{-1.0}, pos{2.0};
  EXPECT_DOUBLE_EQ(absorption_score(neg, pos), 0.0);  // negative projections clip
  EXPECT_DOUBLE_EQ(absorption_score(std::vector<double>{}, std::vector<double>{}), 0.0);
}

TEST(SparseProbing, PlantedOneHotConceptAtK1) {
  const auto c = planted_onehot_concept();
  const auto res = sparse_probing_eval({c});
  EXPECT_EQ(res.per_k[0][0].features, std::vector<std::size_t>{13});
  EXPECT_GE(res.per_k[0][0].accuracy, 0.99);
  EXPECT_FALSE(res.per_k[0][0].degenerate);
}

TEST(SparseProbing, NullFeaturesSitNearChance) {
  std::vector<double> acc;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RngStream rng(seed, 1);
    ConceptFeatures c;
    c.train_x = Matrix(100, 16);
    c.eval_x = Matrix(100, 16);
    for (auto& v : c.train_x.flat()) v = static_cast<float>(rng.normal());
    for (auto& v : c.eval_x.flat()) v = static_cast<float>(rng.normal());
    for (int i = 0; i < 100; ++i) c.train_y.push_back(i % 2), c.eval_y.push_back(i % 2);
    acc.push_back(sparse_probe(c, 1).accuracy);
  }
  EXPECT_NEAR(mean(acc), 0.5, 0.15);
}

TEST(SparseProbing, DegenerateAndErrors) {
  ConceptFeatures c;
  c.train_x = Matrix(4, 3);
  c.eval_x = Matrix(4, 3);
  c.train_y = c.eval_y = {0, 1, 0, 1};
  const auto o = sparse_probe(c, 2);
  EXPECT_TRUE(o.degenerate);
  EXPECT_EQ(o.features, (std::vector<std::size_t>{0, 1}));
  EXPECT_THROW(sparse_probe(c, 0), Error);
  c.train_y = {1, 1, 1, 1};
  EXPECT_THROW(sparse_probe(c, 1), Error);
  EXPECT_EQ(rank_features(std::vector<double>{1, 3, 3, 2}, 3), (std::vector<std::size_t>{1, 2, 3}));
}

TEST(Scr, FormulaFixedPoints) {
  EXPECT_DOUBLE_EQ(*scr_score(0.6, 0.6, 0.9), 0.0);
  EXPECT_DOUBLE_EQ(*scr_score(0.6, 0.9, 0.9), 1.0);
  EXPECT_NEAR(*scr_score(0.6, 0.75, 0.9), 0.5, 1e-12);
  EXPECT_FALSE(scr_score(0.8, 0.9, 0.8).has_value());
}

TEST(Scr, PlantedSpuriousLatentAtK1) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto w = scr_world(seed);
    PlantedSystem sys(8, w.table);
    const auto res = scr_eval(sys, ScrData::from_sets(w.biased, w.balanced), {1});
    ASSERT_EQ(res.size(), 1u);
    EXPECT_EQ(res[0].ablated, std::vector<std::size_t>{1});
    EXPECT_LT(res[0].a_base + 0.05, res[0].a_oracle);
    ASSERT_TRUE(res[0].score.has_value());
    EXPECT_GE(*res[0].score, 0.9) << "seed " << seed << " base " << res[0].a_base << " abl " << res[0].a_abl << " oracle "
                                  << res[0].a_oracle;
  }
}

TEST(Tpp, FormulaHandCases) {
  // Only the diagonal drops, by 0.3: score = 0.3.
  const std::vector<double> a{0.9, 0.8, 0.95};
  std::vector<std::vector<double>> x(3, a);
  for (std::size_t i = 0; i < 3; ++i) x[i][i] = a[i] - 0.3;
  EXPECT_NEAR(tpp_score(a, x), 0.3, 1e-9);
  EXPECT_NEAR(tpp_score(a, std::vector<std::vector<double>>(3, a)), 0.0, 1e-12);
  std::vector<std::vector<double>> uniform(3, std::vector<double>{0.7, 0.6, 0.75});
  EXPECT_NEAR(tpp_score(a, uniform), 0.0, 1e-12);
  EXPECT_THROW(tpp_score(std::vector<double>{1.0}, {{1.0}}), Error);
}

TEST(Tpp, PlantedClassLatents) {
  // One latent per class; ablating class i's latent hurts only probe i.
  LabeledTextSet set;
  set.num_classes = 3;
  std::map<std::string, std::vector<float>> table;
  RngStream rng(9, 9);
  for (int i = 0; i < 600; ++i) {
    const int y = i % 3;
    std::vector<float> v(6);
    for (auto& f : v) f = static_cast<float>(0.05 * rng.normal());
    v[y] += 1.0f;
    const std::string text = "x" + std::to_string(i);
    table[text] = v;
    set.items.push_back({text, y, -1, i < 400 ? Split::train : Split::eval});
  }
  PlantedSystem sys(6, table);
  const auto res = tpp_eval(sys, set, {1});
  EXPECT_GT(res[0].score, 0.3);
  EXPECT_DOUBLE_EQ(res[0].flipped_score, -res[0].score);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_GT(res[0].a[j], 0.95);
}

// ---------------------------------------------------------------------------

TEST(AutoInterp, OracleScoresOneAndConstantNegativeTwelveOfFourteen) {
  const auto p = planted_history();
  OracleClient oracle;
  const auto r = autointerp_eval(p.h, PlantedHistory::token_string, oracle, {.n_features = 3});
  ASSERT_EQ(r.features.size(), 3u);
  for (const auto& f : r.features) EXPECT_DOUBLE_EQ(f.score, 1.0);

  ConstantNegativeClient none;
  const auto z = autointerp_eval(p.h, PlantedHistory::token_string, none, {.n_features = 3});
  ASSERT_EQ(z.features.size(), 3u);
  for (const auto& f : z.features) EXPECT_DOUBLE_EQ(f.score, 12.0 / 14.0);
}

TEST(AutoInterp, KeywordMockFindsPlantedKeyword) {
  const auto p = planted_history();
  KeywordMockClient kw;
  const auto r = autointerp_eval(p.h, PlantedHistory::token_string, kw, {.n_features = 3});
  ASSERT_EQ(r.features.size(), 3u);
  for (const auto& f : r.features) {
    EXPECT_EQ(f.explanation, "w" + std::to_string(f.feature));
    EXPECT_GE(f.score, 0.95);
  }
}

TEST(AutoInterp, DeterministicAndIneligibleFeatures) {
  auto p = planted_history();
  OracleClient oracle;
  const auto a = autointerp_eval(p.h, PlantedHistory::token_string, oracle, {.n_features = 2, .seed = 4});
  const auto b = autointerp_eval(p.h, PlantedHistory::token_string, oracle, {.n_features = 2, .seed = 4});
  ASSERT_EQ(a.features.size(), b.features.size());
  for (std::size_t i = 0; i < a.features.size(); ++i) EXPECT_EQ(a.features[i].feature, b.features[i].feature);
  // Silence feature 2: no activating contexts.
  for (std::size_t r = 0; r < p.h.rows(); ++r) p.h.activations(r, 2) = 0.0f;
  const auto c = autointerp_eval(p.h, PlantedHistory::token_string, oracle, {.n_features = 3});
  EXPECT_EQ(c.features.size(), 2u);
  EXPECT_EQ(c.ineligible, 1u);
  EXPECT_THROW(autointerp_eval(p.h, PlantedHistory::token_string, oracle, {.positives = 0}), Error);
}

TEST(AutoInterp, HttpClientAgainstLocalServer) {
  httplib::Server srv;
  std::size_t calls = 0;
  srv.Post("/v1/complete", [&](const httplib::Request& req, httplib::Response& res) {
    ++calls;
    const auto body = nlohmann::json::parse(req.body);
    const auto prompt = body.at("prompt").get<std::string>();
    EXPECT_EQ(body.at("model"), "mock");
    EXPECT_EQ(req.get_header_value("Authorization"), "Bearer k");
    std::string text;
    if (prompt.rfind("Each example", 0) == 0) {
      // the marked token is the keyword
      const auto at = prompt.find("<<", prompt.find("Example 1:"));
      const auto start = prompt.rfind(' ', at) + 1;
      text = prompt.substr(start, at - start);
    } else {
      const auto kw = prompt.substr(prompt.find(": ") + 2, prompt.find('\n') - prompt.find(": ") - 2);
      std::istringstream lines(prompt);
      std::string line;
      while (std::getline(lines, line)) {
        const auto dot = line.find(". ");
        if (dot == std::string::npos || !std::isdigit(static_cast<unsigned char>(line[0]))) continue;
        const auto words = Tokenizer::split_words(line.substr(dot + 2));
        if (std::find(words.begin(), words.end(), kw) != words.end()) text += line.substr(0, dot) + ",";
      }
      if (text.empty()) text = "none";
    }
    res.set_content(nlohmann::json{{"text", text}}.dump(), "application/json");
  });
  const int port = srv.bind_to_any_port("127.0.0.1");
  std::thread th([&] { srv.listen_after_bind(); });
  srv.wait_until_ready();

  HttpExplainerClient client({.url = "http://127.0.0.1:" + std::to_string(port) + "/v1/complete", .model = "mock", .key = "k"});
  const auto p = planted_history();
  const auto r = autointerp_eval(p.h, PlantedHistory::token_string, client, {.n_features = 3});
  srv.stop();
  th.join();
  EXPECT_TRUE(r.failures.empty());
  ASSERT_EQ(r.features.size(), 3u);
  for (const auto& f : r.features) EXPECT_GE(f.score, 0.95);
  EXPECT_EQ(calls, 6u);
}

TEST(AutoInterp, TransportFailuresAreCounted) {
  httplib::Server probe_port;
  const int port = probe_port.bind_to_any_port("127.0.0.1");
  probe_port.stop();  // nothing listens there now
  HttpExplainerClient client({.url = "http://127.0.0.1:" + std::to_string(port) + "/", .model = "", .key = "", .retries = 2, .timeout_seconds = 1});
  const auto p = planted_history();
  const auto r = autointerp_eval(p.h, PlantedHistory::token_string, client, {.n_features = 3});
  EXPECT_TRUE(r.features.empty());
  EXPECT_EQ(r.failures.size(), 3u);
  EXPECT_THROW(HttpExplainerClient({.url = "https://example.org/x", .model = "", .key = ""}), Error);
  EXPECT_THROW(HttpExplainerClient({.url = "not a url", .model = "", .key = ""}), Error);
}

// ---------------------------------------------------------------------------

TEST(Report, JsonRoundTripAndSchema) {
  MetricReport r;
  r.coder = "ffkv";
  r.metrics["alive"] = MetricValue::of({1.0});
  r.metrics["absorption"] = MetricValue::of({0.1, 0.2, 0.3});
  r.metrics["ravel_causality"] = MetricValue::failed("gate");
  const nlohmann::json j = r;
  EXPECT_EQ(j["schema_version"], kReportSchemaVersion);
  const auto back = j.get<MetricReport>();
  EXPECT_EQ(back.coder, "ffkv");
  EXPECT_EQ(back.metrics.at("absorption").runs, (std::vector<double>{0.1, 0.2, 0.3}));
  EXPECT_FALSE(back.metrics.at("ravel_causality").ok());
  auto bad = j;
  bad["schema_version"] = 99;
  EXPECT_THROW(bad.get<MetricReport>(), Error);
}

TEST(Report, MeanAndTwoSem) {
  const auto m = MetricValue::of({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(m.value(), 2.5);
  // sample sd = sqrt(5/3), sem = sd / 2
  EXPECT_NEAR(m.two_sem(), std::sqrt(5.0 / 3.0), 1e-12);
  EXPECT_EQ(MetricValue::of({0.5}).two_sem(), 0.0);
}

TEST(Report, PoolingAndMissingCells) {
  MetricReport a, b;
  a.coder = b.coder = "sae";
  a.metrics["alive"] = MetricValue::of({0.5});
  b.metrics["alive"] = MetricValue::of({0.7});
  const auto pooled = pool_reports({a, b});
  ASSERT_EQ(pooled.size(), 1u);
  EXPECT_EQ(pooled[0].metrics.at("alive").runs.size(), 2u);
  const auto md = render_markdown_table(pooled);
  EXPECT_NE(md.find("0.600"), std::string::npos);
  EXPECT_NE(md.find("— [1]"), std::string::npos);
  EXPECT_NE(md.find("not computed"), std::string::npos);
  const auto csv = render_csv_table(pooled);
  EXPECT_EQ(csv.rfind("coder,alive,alive_2sem", 0), 0u);
  EXPECT_NE(csv.find("sae,0.6,"), std::string::npos);
}
