#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ffkv/cli/app.hpp"

using namespace ffkv;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("ffkv_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// Small enough to train in seconds; the LM will not learn the world, so RAVEL
// cells come out as gated.
nlohmann::json tiny_config() {
  return {{"model", {{"n_layers", 2}, {"d_model", 16}, {"d_ff", 64}, {"n_heads", 2}}},
          {"lm", {{"steps", 20}}},
          {"data", {{"harvest_texts", 300}, {"lm_texts_per_topic", 20}, {"fact_repeats", 2}, {"letter_repeats", 1}}},
          {"coders", {{"train_tokens", 1500}, {"sae", {{"width", 96}, {"steps", 40}}}, {"transcoder", {{"width", 96}, {"steps", 40}}}}},
          {"metrics", {{"eval_tokens", 1500}, {"history_tokens", 1500}, {"scr_ks", {2, 20}}, {"tpp_ks", {2, 20}}, {"autointerp", {{"n_features", 4}}}}}};
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j) {
  const auto p = dir / "config.in.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  args.insert(args.begin(), "-q");
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) { return read_text(p); }

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Cli, PipelineShapeMetadataAndByteIdenticalRerun) {
  const auto dir = scratch("pipeline");
  const auto cfg = write_config(dir, tiny_config());
  const auto a = cli({"--config", cfg.string(), "--out", (dir / "a").string(), "pipeline"});
  ASSERT_EQ(a.code, 0) << a.err;
  // 7 coder rows, 8 metric columns
  const auto md = slurp(dir / "a" / "summary.md");
  for (const auto& label : pipeline_coder_labels()) EXPECT_NE(md.find("| " + label + " |"), std::string::npos) << label;
  const auto header = md.substr(0, md.find('\n'));
  EXPECT_EQ(std::count(header.begin(), header.end(), '|'), 10);
  EXPECT_NE(md.find("random_ffkv / RAVEL-ISO"), std::string::npos);  // gated cell footnote
  for (const char* f : {"config.json", "version.txt", "fingerprints.json", "summary.csv"}) EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
  EXPECT_EQ(std::distance(fs::directory_iterator(dir / "a" / "reports"), fs::directory_iterator{}), 7);
  EXPECT_EQ(slurp(dir / "a" / "version.txt"), version_string() + "\n");
  const auto fp = nlohmann::json::parse(slurp(dir / "a" / "fingerprints.json"));
  EXPECT_EQ(fp.at("harvest_tokens").get<std::string>().size(), 64u);
  const auto resolved = nlohmann::json::parse(slurp(dir / "a" / "config.json"));
  EXPECT_EQ(resolved.at("model").at("d_ff"), 64);
  EXPECT_EQ(resolved.at("coders").at("layer"), 1);  // n_layers / 2

  // FF-KV reconstructs exactly
  const auto ff = nlohmann::json::parse(slurp(dir / "a" / "reports" / "ffkv.json")).get<MetricReport>();
  EXPECT_NEAR(ff.metrics.at("explained_variance").value(), 1.0, 1e-4);

  // same seed, fresh cache: every report and table byte-identical
  auto j = tiny_config();
  j["cache_dir"] = (dir / "cache_b").string();
  const auto b = cli({"--config", write_config(dir, j).string(), "--out", (dir / "b").string(), "pipeline"});
  ASSERT_EQ(b.code, 0) << b.err;
  for (const auto& e : fs::directory_iterator(dir / "a" / "reports"))
    EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / "reports" / e.path().filename())) << e.path();
  EXPECT_EQ(slurp(dir / "a" / "summary.md"), slurp(dir / "b" / "summary.md"));
  EXPECT_EQ(slurp(dir / "a" / "summary.csv"), slurp(dir / "b" / "summary.csv"));
  EXPECT_EQ(a.out, b.out);
}

TEST(Cli, ArtifactsAreContentAddressed) {
  const auto dir = scratch("cache");
  auto j = tiny_config();
  j["pipeline_coders"] = {"topk_ffkv", "sae"};
  j["metrics"]["names"] = {"alive", "explained_variance"};
  const auto cfg = write_config(dir, j);
  ASSERT_EQ(cli({"--config", cfg.string(), "--out", dir.string(), "pipeline"}).code, 0);
  std::set<std::string> first;
  for (const auto& e : fs::directory_iterator(dir / "artifacts")) first.insert(e.path().filename().string());

  // rerun: nothing new, everything reused
  std::ostringstream out, err;
  ASSERT_EQ(run_cli({"--config", cfg.string(), "--out", dir.string(), "pipeline"}, out, err), 0);
  EXPECT_NE(err.str().find("train-lm: reusing"), std::string::npos);
  EXPECT_NE(err.str().find("train-coder sae: reusing"), std::string::npos);
  std::set<std::string> second;
  for (const auto& e : fs::directory_iterator(dir / "artifacts")) second.insert(e.path().filename().string());
  EXPECT_EQ(first, second);

  // a different k only adds a new TopK coder
  j["coders"]["topk"] = {{"k", 3}};
  ASSERT_EQ(cli({"--config", write_config(dir, j).string(), "--out", dir.string(), "pipeline"}).code, 0);
  std::vector<std::string> added;
  for (const auto& e : fs::directory_iterator(dir / "artifacts"))
    if (!first.count(e.path().filename().string())) added.push_back(e.path().filename().string());
  ASSERT_EQ(added.size(), 1u);
  EXPECT_EQ(added[0].rfind("coder-topk_ffkv-", 0), 0u);
}

TEST(Cli, SweepOverKIsMonotoneAndSingletonMatchesPipeline) {
  const auto dir = scratch("sweep");
  auto j = tiny_config();
  j["metrics"]["names"] = {"alive", "explained_variance"};
  const auto cfg = write_config(dir, j);
  const auto r = cli({"--config", cfg.string(), "--out", (dir / "sw").string(), "sweep", "--param", "k", "--values", "1,10,64"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto curves = nlohmann::json::parse(slurp(dir / "sw" / "sweep.json"));
  std::vector<double> ev;
  for (const auto& row : curves.at("rows")) {
    EXPECT_EQ(row.at("coder"), "topk_ffkv");
    if (row.at("metric") == "explained_variance") ev.push_back(row.at("mean").get<double>());
    EXPECT_DOUBLE_EQ(row.at("lower").get<double>(), row.at("mean").get<double>() - row.at("two_sem").get<double>());
  }
  ASSERT_EQ(ev.size(), 3u);
  EXPECT_LE(ev[0], ev[1]);
  EXPECT_LE(ev[1], ev[2]);
  EXPECT_NEAR(ev[2], 1.0, 1e-4);  // k = d_ff
  EXPECT_EQ(count_lines(slurp(dir / "sw" / "sweep.csv")), 1u + curves.at("rows").size());

  // one value = the plain pipeline at that value
  auto p = j;
  p["coders"]["topk"] = {{"k", 10}};
  p["pipeline_coders"] = {"topk_ffkv"};
  ASSERT_EQ(cli({"--config", write_config(dir, p).string(), "--out", (dir / "single").string(), "pipeline"}).code, 0);
  EXPECT_EQ(slurp(dir / "single" / "reports" / "topk_ffkv.json"), slurp(dir / "sw" / "points" / "k=10" / "reports" / "topk_ffkv.json"));
  EXPECT_EQ(slurp(dir / "single" / "summary.md"), slurp(dir / "sw" / "points" / "k=10" / "summary.md"));

  EXPECT_NE(cli({"--config", cfg.string(), "--out", (dir / "bad").string(), "sweep", "--param", "width", "--values", "1"}).code, 0);
  EXPECT_NE(cli({"--config", cfg.string(), "--out", (dir / "bad").string(), "sweep", "--param", "k", "--values", ""}).code, 0);
  EXPECT_NE(cli({"--config", cfg.string(), "--out", (dir / "bad").string(), "sweep", "--param", "k", "--values", "2,x"}).code, 0);
}

TEST(Cli, SweepOverDffTrainsOneModelPerValue) {
  const auto dir = scratch("sweep_dff");
  auto j = tiny_config();
  j["metrics"]["names"] = {"explained_variance"};
  const auto r = cli({"--config", write_config(dir, j).string(), "--out", dir.string(), "sweep", "--param", "d_ff", "--values", "32,64"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::size_t lms = 0;
  for (const auto& e : fs::directory_iterator(dir / "artifacts")) lms += e.path().filename().string().rfind("lm-", 0) == 0;
  EXPECT_EQ(lms, 2u);
  for (const char* v : {"d_ff=32", "d_ff=64"}) EXPECT_TRUE(fs::exists(dir / "points" / v / "reports" / "ffkv.json")) << v;
}

TEST(Cli, ReportPoolsSeedsAndFlagsMissingCells) {
  const auto dir = scratch("report");
  auto j = tiny_config();
  j["pipeline_coders"] = {"ffkv", "topk_ffkv"};
  j["metrics"]["names"] = {"alive", "explained_variance", "absorption"};
  const auto cfg = write_config(dir, j);
  for (const char* s : {"1", "2"}) ASSERT_EQ(cli({"--config", cfg.string(), "--seed", s, "--out", (dir / ("s" + std::string(s))).string(), "pipeline"}).code, 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "s2" / "config.json")).at("seed"), 2);

  const auto r = cli({"--out", (dir / "merged").string(), "report", (dir / "s1").string(), (dir / "s2").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, slurp(dir / "merged" / "report.md"));
  // pooled absorption: both seeds' per-letter values, SEM recomputed from them
  const auto a1 = nlohmann::json::parse(slurp(dir / "s1" / "reports" / "topk_ffkv.json")).get<MetricReport>();
  const auto a2 = nlohmann::json::parse(slurp(dir / "s2" / "reports" / "topk_ffkv.json")).get<MetricReport>();
  std::vector<double> runs = a1.metrics.at("absorption").runs;
  runs.insert(runs.end(), a2.metrics.at("absorption").runs.begin(), a2.metrics.at("absorption").runs.end());
  const auto want = format_cell(MetricValue::of(runs));
  EXPECT_NE(r.out.find(want), std::string::npos) << want << "\n" << r.out;
  // metrics not run render as a dash with a footnote
  EXPECT_NE(r.out.find("— [1]"), std::string::npos);
  EXPECT_NE(r.out.find("not computed"), std::string::npos);

  // schema mismatch is an error
  auto rep = nlohmann::json::parse(slurp(dir / "s1" / "reports" / "ffkv.json"));
  rep["schema_version"] = 99;
  std::ofstream(dir / "s1" / "reports" / "ffkv.json") << rep.dump();
  const auto bad = cli({"report", (dir / "s1").string()});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("schema version 99"), std::string::npos);
}

TEST(Cli, TrainCoderAlignHarvestAndReportWithAlignment) {
  const auto dir = scratch("tools");
  const auto cfg = write_config(dir, tiny_config());
  const auto lm = cli({"--config", cfg.string(), "--out", dir.string(), "train-lm"});
  ASSERT_EQ(lm.code, 0) << lm.err;
  EXPECT_TRUE(fs::exists(lm.out.substr(0, lm.out.size() - 1)));

  const auto sae = cli({"--config", cfg.string(), "--out", dir.string(), "train-coder", "--kind", "sae", "--layer", "0"});
  ASSERT_EQ(sae.code, 0) << sae.err;
  const auto ff = cli({"--config", cfg.string(), "--out", dir.string(), "train-coder", "--kind", "ffkv", "--layer", "0"});
  ASSERT_EQ(ff.code, 0) << ff.err;
  const std::string sae_path = sae.out.substr(0, sae.out.size() - 1), ff_path = ff.out.substr(0, ff.out.size() - 1);
  EXPECT_EQ(load_coder(sae_path).layer, 0u);
  EXPECT_NE(cli({"--config", cfg.string(), "--out", dir.string(), "train-coder", "--kind", "bogus"}).code, 0);
  EXPECT_NE(cli({"--config", cfg.string(), "--out", dir.string(), "train-coder", "--kind", "sae", "--layer", "7"}).code, 0);

  // self-alignment: everything aligned
  const auto self = cli({"--out", (dir / "self").string(), "align", "--a", ff_path, "--b", ff_path});
  ASSERT_EQ(self.code, 0) << self.err;
  const auto part = nlohmann::json::parse(slurp(dir / "self" / "alignment.json")).at("partition");
  EXPECT_EQ(part.at("aligned"), 64);
  EXPECT_EQ(count_lines(slurp(dir / "self" / "alignment.csv")), 65u);
  const auto cross = cli({"--out", (dir / "cross").string(), "align", "--a", sae_path, "--b", ff_path});
  ASSERT_EQ(cross.code, 0) << cross.err;
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "cross" / "alignment.json")).at("partition").at("total"), 96);

  // harvest a plain-text corpus through the FF-KV record's own LM
  std::ofstream(dir / "corpus.txt") << "the river runs past the mill\n\nseven apples on the table\n";
  const auto h = cli({"--out", (dir / "h").string(), "harvest", "--coder", ff_path, "--corpus", (dir / "corpus.txt").string(), "--tokens", "100"});
  ASSERT_EQ(h.code, 0) << h.err;
  const auto hist = load_history(dir / "h" / "history");
  EXPECT_GT(hist.rows(), 0u);
  EXPECT_EQ(hist.num_texts, 2u);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "h" / "history" / "documents.json")), nlohmann::json({"line-1", "line-3"}));

  // report picks up alignment results sitting in a run directory
  auto j = tiny_config();
  j["pipeline_coders"] = {"ffkv"};
  j["metrics"]["names"] = {"explained_variance"};
  ASSERT_EQ(cli({"--config", write_config(dir, j).string(), "--out", (dir / "self").string(), "pipeline"}).code, 0);
  const auto rep = cli({"report", (dir / "self").string()});
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_NE(rep.out.find("## Alignment"), std::string::npos);
  EXPECT_NE(rep.out.find("| 64 | 0 | 0 | 64 |"), std::string::npos) << rep.out;
}

TEST(Cli, EvalRestrictsMetricsAndConfigErrorsExitNonZero) {
  const auto dir = scratch("eval");
  const auto cfg = write_config(dir, tiny_config());
  const auto r = cli({"--config", cfg.string(), "--out", dir.string(), "eval", "--metrics", "alive,absorption", "--coders", "ffkv,random_ffkv"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = nlohmann::json::parse(slurp(dir / "reports" / "random_ffkv.json")).get<MetricReport>();
  EXPECT_EQ(rep.metrics.size(), 2u);
  EXPECT_TRUE(rep.metrics.count("alive") && rep.metrics.count("absorption"));
  EXPECT_FALSE(fs::exists(dir / "reports" / "sae.json"));

  EXPECT_EQ(cli({"--config", cfg.string(), "--out", dir.string(), "eval", "--metrics", "vibes"}).code, 1);
  auto j = tiny_config();
  j["modle"] = 1;
  const auto typo = cli({"--config", write_config(dir, j).string(), "pipeline"});
  EXPECT_EQ(typo.code, 1);
  EXPECT_NE(typo.err.find("unknown key 'modle'"), std::string::npos);
  EXPECT_NE(cli({}).code, 0);                        // a subcommand is required
  EXPECT_NE(cli({"--config", "/nonexistent.json", "pipeline"}).code, 0);
}

TEST(Cli, StageFailureNamesStageAndArtifact) {
  const auto dir = scratch("fail");
  auto j = tiny_config();
  j["pipeline_coders"] = {"sae"};
  j["metrics"]["names"] = {"alive"};
  j["coders"]["sae"]["width"] = 0;  // untrainable
  const auto r = cli({"--config", write_config(dir, j).string(), "--out", dir.string(), "pipeline"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("stage 'train-coder sae' failed"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("coder-sae-"), std::string::npos) << r.err;
}
