#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ffkv/alignment/alignment.hpp"
#include "ffkv/coders/checkpoint.hpp"
#include "ffkv/coders/train.hpp"
#include "ffkv/datasets/corpus.hpp"
#include "ffkv/datasets/desk.hpp"
#include "ffkv/harvest/history.hpp"
#include "ffkv/lm/checkpoint.hpp"
#include "ffkv/lm/train.hpp"
#include "ffkv/metrics/absorption.hpp"
#include "ffkv/metrics/autointerp.hpp"
#include "ffkv/metrics/core.hpp"
#include "ffkv/metrics/probing.hpp"
#include "ffkv/metrics/ravel.hpp"
#include "ffkv/metrics/report.hpp"

#ifndef FFKV_VERSION
#define FFKV_VERSION "unknown"
#endif

namespace ffkv {

inline std::string version_string() { return FFKV_VERSION; }

// A failed stage: which one, and where its artifact lives (may be empty).
struct StageError : Error {
  std::string stage, artifact;
  StageError(std::string s, std::string a, const std::string& why)
      : Error("stage '" + s + "' failed" + (a.empty() ? "" : " (artifact " + a + ")") + ": " + why), stage(std::move(s)), artifact(std::move(a)) {}
};

// ---------------------------------------------------------------------------
// Config

struct LmSettings {
  std::size_t steps = 2000;
  LmTrainConfig train{.holdout_fraction = 0.02};
};

struct CoderSettings {
  std::optional<std::size_t> layer;  // default: n_layers / 2
  TopKConfig topk;
  SparseCoderHyper sae;
  SparseCoderHyper transcoder;
  std::size_t train_tokens = 50000;
};

struct MetricSettings {
  std::vector<std::string> names;  // empty = all
  std::size_t eval_tokens = 200000;
  std::size_t history_tokens = 20000;
  AbsorptionConfig absorption;
  std::vector<std::size_t> probing_ks{1, 2, 5};
  std::vector<std::size_t> scr_ks = default_scr_ks();
  std::size_t scr_headline = 20;
  std::vector<std::size_t> tpp_ks{2, 20, 100};
  std::size_t tpp_headline = 20;
  AutoInterpConfig autointerp;
  std::string explainer = "keyword";  // keyword | oracle | http
  RavelConfig ravel;
};

struct WorkbenchConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  LmSettings lm;
  DeskDataConfig data;
  CoderSettings coders;
  MetricSettings metrics;
  std::vector<std::string> pipeline_coders;  // empty = all seven
  std::string out_dir = "runs/desk";
  std::string cache_dir;  // empty = <out_dir>/artifacts

  std::size_t layer() const { return coders.layer.value_or(model.summary_layer()); }
  std::filesystem::path cache() const { return cache_dir.empty() ? std::filesystem::path(out_dir) / "artifacts" : std::filesystem::path(cache_dir); }
};

// The row labels of the summary table, in order.
inline const std::vector<std::string>& pipeline_coder_labels() {
  static const std::vector<std::string> v{"ffkv", "topk_ffkv", "norm_ffkv", "topk_norm_ffkv", "sae", "transcoder", "random_ffkv"};
  return v;
}

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> v{"alive", "explained_variance", "absorption", "sparse_probing", "autointerp", "ravel", "scr", "tpp"};
  return v;
}

inline nlohmann::json lm_train_json(const LmTrainConfig& c) {
  return {{"batch_size", c.batch_size}, {"seq_len", c.seq_len}, {"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2},
          {"weight_decay", c.adam.weight_decay}, {"grad_clip", c.grad_clip}, {"warmup_steps", c.warmup_steps},
          {"holdout_fraction", c.holdout_fraction}};
}

inline void to_json(nlohmann::json& j, const WorkbenchConfig& c) {
  const auto& m = c.metrics;
  j = {{"seed", c.seed},
       {"model", c.model},
       {"lm", {{"steps", c.lm.steps}, {"train", lm_train_json(c.lm.train)}}},
       {"data", c.data},
       {"coders",
        {{"layer", c.layer()}, {"topk", c.coders.topk}, {"sae", c.coders.sae}, {"transcoder", c.coders.transcoder},
         {"train_tokens", c.coders.train_tokens}}},
       {"metrics",
        {{"names", m.names.empty() ? metric_names() : m.names},
         {"eval_tokens", m.eval_tokens},
         {"history_tokens", m.history_tokens},
         {"absorption", {{"main_features", m.absorption.main_features}, {"cos_threshold", m.absorption.cos_threshold}, {"at_answer", m.absorption.at_answer}}},
         {"probing_ks", m.probing_ks},
         {"scr_ks", m.scr_ks},
         {"scr_headline", m.scr_headline},
         {"tpp_ks", m.tpp_ks},
         {"tpp_headline", m.tpp_headline},
         {"autointerp",
          {{"n_features", m.autointerp.n_features}, {"positives", m.autointerp.positives}, {"negatives", m.autointerp.negatives},
           {"contexts", m.autointerp.contexts}, {"window", m.autointerp.window}, {"negative_ceiling", m.autointerp.negative_ceiling}}},
         {"explainer", m.explainer},
         {"ravel", {{"k", m.ravel.k}, {"max_pairs", m.ravel.max_pairs}, {"recall_gate", m.ravel.recall_gate}}}}},
       {"pipeline_coders", c.pipeline_coders.empty() ? pipeline_coder_labels() : c.pipeline_coders},
       {"out_dir", c.out_dir},
       {"cache_dir", c.cache().string()}};
}

// Unknown keys are errors so typos do not silently fall back to defaults.
inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw Error("config: '" + where + "' must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw Error("config: unknown key '" + (where.empty() ? k : where + "." + k) + "'");
}

inline void from_json(const nlohmann::json& j, WorkbenchConfig& c) {
  check_keys(j, {"seed", "model", "lm", "data", "coders", "metrics", "pipeline_coders", "out_dir", "cache_dir"}, "");
  c = WorkbenchConfig{};
  c.seed = j.value("seed", c.seed);
  if (j.contains("model")) c.model = j["model"].get<ModelConfig>();
  if (j.contains("lm")) {
    const auto& l = j["lm"];
    check_keys(l, {"steps", "train"}, "lm");
    c.lm.steps = l.value("steps", c.lm.steps);
    if (l.contains("train")) {
      const auto& t = l["train"];
      check_keys(t, {"batch_size", "seq_len", "lr", "beta1", "beta2", "weight_decay", "grad_clip", "warmup_steps", "holdout_fraction"}, "lm.train");
      auto& tc = c.lm.train;
      tc.batch_size = t.value("batch_size", tc.batch_size);
      tc.seq_len = t.value("seq_len", tc.seq_len);
      tc.adam.lr = t.value("lr", tc.adam.lr);
      tc.adam.beta1 = t.value("beta1", tc.adam.beta1);
      tc.adam.beta2 = t.value("beta2", tc.adam.beta2);
      tc.adam.weight_decay = t.value("weight_decay", tc.adam.weight_decay);
      tc.grad_clip = t.value("grad_clip", tc.grad_clip);
      tc.warmup_steps = t.value("warmup_steps", tc.warmup_steps);
      tc.holdout_fraction = t.value("holdout_fraction", tc.holdout_fraction);
    }
  }
  if (j.contains("data")) c.data = j["data"].get<DeskDataConfig>();
  if (j.contains("coders")) {
    const auto& k = j["coders"];
    check_keys(k, {"layer", "topk", "sae", "transcoder", "train_tokens"}, "coders");
    if (k.contains("layer")) c.coders.layer = k["layer"].get<std::size_t>();
    if (k.contains("topk")) c.coders.topk = k["topk"].get<TopKConfig>();
    if (k.contains("sae")) c.coders.sae = k["sae"].get<SparseCoderHyper>();
    if (k.contains("transcoder")) c.coders.transcoder = k["transcoder"].get<SparseCoderHyper>();
    c.coders.train_tokens = k.value("train_tokens", c.coders.train_tokens);
  }
  if (j.contains("metrics")) {
    const auto& m = j["metrics"];
    check_keys(m, {"names", "eval_tokens", "history_tokens", "absorption", "probing_ks", "scr_ks", "scr_headline", "tpp_ks", "tpp_headline",
                   "autointerp", "explainer", "ravel"},
               "metrics");
    auto& o = c.metrics;
    o.names = m.value("names", o.names);
    o.eval_tokens = m.value("eval_tokens", o.eval_tokens);
    o.history_tokens = m.value("history_tokens", o.history_tokens);
    if (m.contains("absorption")) {
      const auto& a = m["absorption"];
      o.absorption.main_features = a.value("main_features", o.absorption.main_features);
      o.absorption.cos_threshold = a.value("cos_threshold", o.absorption.cos_threshold);
      o.absorption.at_answer = a.value("at_answer", o.absorption.at_answer);
    }
    o.probing_ks = m.value("probing_ks", o.probing_ks);
    o.scr_ks = m.value("scr_ks", o.scr_ks);
    o.scr_headline = m.value("scr_headline", o.scr_headline);
    o.tpp_ks = m.value("tpp_ks", o.tpp_ks);
    o.tpp_headline = m.value("tpp_headline", o.tpp_headline);
    if (m.contains("autointerp")) {
      const auto& a = m["autointerp"];
      o.autointerp.n_features = a.value("n_features", o.autointerp.n_features);
      o.autointerp.positives = a.value("positives", o.autointerp.positives);
      o.autointerp.negatives = a.value("negatives", o.autointerp.negatives);
      o.autointerp.contexts = a.value("contexts", o.autointerp.contexts);
      o.autointerp.window = a.value("window", o.autointerp.window);
      o.autointerp.negative_ceiling = a.value("negative_ceiling", o.autointerp.negative_ceiling);
    }
    o.explainer = m.value("explainer", o.explainer);
    if (m.contains("ravel")) {
      const auto& r = m["ravel"];
      o.ravel.k = r.value("k", o.ravel.k);
      o.ravel.max_pairs = r.value("max_pairs", o.ravel.max_pairs);
      o.ravel.recall_gate = r.value("recall_gate", o.ravel.recall_gate);
    }
  }
  c.pipeline_coders = j.value("pipeline_coders", c.pipeline_coders);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.cache_dir = j.value("cache_dir", c.cache_dir);
  // cache_dir is echoed in resolved configs; a value equal to the default is not pinned
  if (c.cache_dir == (std::filesystem::path(c.out_dir) / "artifacts").string()) c.cache_dir.clear();
}

inline void validate(const WorkbenchConfig& c) {
  c.model.validate();
  if (c.layer() >= c.model.n_layers) throw Error("config: coder layer " + std::to_string(c.layer()) + " outside the model");
  for (const auto& n : c.metrics.names)
    if (std::find(metric_names().begin(), metric_names().end(), n) == metric_names().end()) throw Error("config: unknown metric '" + n + "'");
  for (const auto& n : c.pipeline_coders)
    if (std::find(pipeline_coder_labels().begin(), pipeline_coder_labels().end(), n) == pipeline_coder_labels().end())
      throw Error("config: unknown coder '" + n + "'");
  if (c.metrics.explainer != "keyword" && c.metrics.explainer != "oracle" && c.metrics.explainer != "http")
    throw Error("config: explainer must be keyword, oracle or http");
}

inline WorkbenchConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("config: cannot read '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw Error("config: '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return j.get<WorkbenchConfig>();
}

inline std::string config_hash(const nlohmann::json& j) { return sha256_hex(j.dump()).substr(0, 16); }

inline void write_text(const std::filesystem::path& path, const std::string& s) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    os << s;
    if (!os) throw Error("cannot write '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Stages. Every artifact lives in <cache>/<stage>-<hash>/ where the hash
// covers the stage's own config and the hashes of its inputs, so sweeps and
// reruns pick up what is already there.

class Workbench {
 public:
  explicit Workbench(WorkbenchConfig cfg, std::ostream* log = &std::cerr) : cfg_(std::move(cfg)), log_(log) { validate(cfg_); }

  const WorkbenchConfig& config() const { return cfg_; }
  nlohmann::json resolved_config() const { return cfg_; }

  const DeskData& data() {
    if (!data_) data_ = std::make_unique<DeskData>(build_desk_data(cfg_.data, cfg_.seed));
    return *data_;
  }

  std::string data_hash() { return config_hash(data().manifest()); }

  nlohmann::json fingerprints() {
    const auto& d = data();
    auto j = d.manifest();
    j["harvest_tokens"] = token_fingerprint(harvest_docs());
    return j;
  }

  const std::vector<std::vector<int>>& harvest_docs() {
    if (harvest_docs_.empty()) {
      const auto& d = data();
      for (const auto& s : d.harvest_documents) harvest_docs_.push_back(d.tokenizer.encode(s));
    }
    return harvest_docs_;
  }

  const std::vector<int>& harvest_stream() {
    if (harvest_stream_.empty()) harvest_stream_ = join_documents(harvest_docs(), data().tokenizer.eos());
    return harvest_stream_;
  }

  ModelConfig model_config() {
    ModelConfig m = cfg_.model;
    m.vocab_size = data().tokenizer.vocab_size();
    m.seed = cfg_.seed;
    return m;
  }

  std::string lm_hash(bool trained = true) {
    nlohmann::json j{{"stage", trained ? "lm" : "random_lm"}, {"model", model_config()}};
    if (trained) j.update({{"steps", cfg_.lm.steps}, {"train", lm_train_json(cfg_.lm.train)}, {"data", data_hash()}});
    return config_hash(j);
  }

  std::filesystem::path lm_path(bool trained = true) { return cfg_.cache() / ((trained ? "lm-" : "random_lm-") + lm_hash(trained)) / "model.bin"; }

  // Trained desk LM (or the untrained one for the random baseline).
  const Model& model(bool trained = true) {
    auto& slot = trained ? lm_ : random_lm_;
    if (slot) return *slot;
    const auto path = lm_path(trained);
    const std::string stage = trained ? "train-lm" : "random-lm";
    try {
      if (std::filesystem::exists(path)) {
        slot = std::make_unique<Model>(load_model(path).model);
        note(stage + ": reusing " + path.string());
      } else {
        const auto t0 = clock();
        const auto& d = data();
        Model m;
        nlohmann::json info{{"config", model_config()}};
        if (trained) {
          std::vector<std::vector<int>> docs;
          for (const auto& s : d.lm_documents) docs.push_back(d.tokenizer.encode(s));
          auto lm = train_lm(model_config(), docs, d.tokenizer.eos(), cfg_.lm.steps, cfg_.lm.train);
          info["final_loss"] = lm.log.losses.empty() ? 0.0 : lm.log.losses.back();
          info["heldout_cross_entropy"] = lm.log.heldout_cross_entropy;
          info["unigram_entropy"] = lm.log.unigram_entropy;
          m = std::move(lm.model);
        } else {
          m = random_init_model(model_config());
        }
        std::filesystem::create_directories(path.parent_path());
        save_model(path.string() + ".tmp", m, d.tokenizer);
        std::filesystem::rename(path.string() + ".tmp", path);
        write_text(path.parent_path() / "stage.json", info.dump(2) + "\n");
        slot = std::make_unique<Model>(std::move(m));
        note(stage + ": wrote " + path.string() + " in " + seconds(t0));
      }
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(stage, path.string(), e.what());
    }
    return *slot;
  }

  const Tokenizer& tokenizer() { return data().tokenizer; }

  static CoderKind kind_of(const std::string& label) { return label == "random_ffkv" ? CoderKind::ffkv : coder_kind_from_string(label); }
  static bool uses_random_lm(const std::string& label) { return label == "random_ffkv"; }

  std::string coder_hash(const std::string& label) {
    const auto kind = kind_of(label);
    nlohmann::json j{{"stage", "coder"}, {"label", label}, {"lm", lm_hash(!uses_random_lm(label))}, {"layer", cfg_.layer()}};
    if (is_topk_kind(kind)) j["topk"] = cfg_.coders.topk;
    if (kind == CoderKind::sae) j["hyper"] = cfg_.coders.sae;
    if (kind == CoderKind::transcoder) j["hyper"] = cfg_.coders.transcoder;
    if (!is_ffkv_kind(kind)) j.update({{"train_tokens", cfg_.coders.train_tokens}, {"corpus", data_hash()}});
    return config_hash(j);
  }

  std::filesystem::path coder_path(const std::string& label) { return cfg_.cache() / ("coder-" + label + "-" + coder_hash(label)) / "coder.bin"; }

  const FeatureCoder& coder(const std::string& label) {
    if (auto it = coders_.find(label); it != coders_.end()) return it->second;
    const auto kind = kind_of(label);
    const bool trained = !uses_random_lm(label);
    const Model& m = model(trained);
    const auto path = coder_path(label);
    try {
      if (is_ffkv_kind(kind)) {
        // weights live in the LM; the record just points there
        FeatureCoder c = FeatureCoder::ffkv(m, cfg_.layer(), kind, cfg_.coders.topk);
        if (!std::filesystem::exists(path)) {
          std::filesystem::create_directories(path.parent_path());
          save_coder(path, make_record(c, lm_path(trained).string()));
        }
        return coders_.emplace(label, std::move(c)).first->second;
      }
      if (std::filesystem::exists(path)) {
        note("train-coder " + label + ": reusing " + path.string());
        return coders_.emplace(label, load_coder(path).instantiate(&m)).first->second;
      }
      const auto t0 = clock();
      const auto& hyper = kind == CoderKind::sae ? cfg_.coders.sae : cfg_.coders.transcoder;
      auto trained_coder = train_sparse_coder(kind, m, cfg_.layer(), harvest_stream(), cfg_.coders.train_tokens, hyper);
      FeatureCoder c = FeatureCoder::sparse(kind, trained_coder.weights, cfg_.layer());
      std::filesystem::create_directories(path.parent_path());
      save_coder(path.string() + ".tmp", make_record(c, {}, hyper));
      std::filesystem::rename(path.string() + ".tmp", path);
      write_text(path.parent_path() / "stage.json",
                 nlohmann::json{{"final_l0", trained_coder.log.final_l0}, {"hyper", hyper}}.dump(2) + "\n");
      note("train-coder " + label + ": wrote " + path.string() + " in " + seconds(t0));
      return coders_.emplace(label, std::move(c)).first->second;
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError("train-coder " + label, path.string(), e.what());
    }
  }

  std::filesystem::path history_dir(const std::string& label) {
    return cfg_.cache() / ("harvest-" + label + "-" + config_hash({{"coder", coder_hash(label)}, {"tokens", cfg_.metrics.history_tokens}}));
  }

  ActivationHistory history(const std::string& label) {
    const auto dir = history_dir(label);
    const auto& c = coder(label);
    try {
      if (std::filesystem::exists(dir / "history.json")) return load_history(dir);
      const auto t0 = clock();
      auto h = harvest(model(!uses_random_lm(label)), c, harvest_docs(), cfg_.metrics.history_tokens);
      const auto tmp = dir.string() + ".tmp";
      std::filesystem::remove_all(tmp);
      save_history(tmp, h);
      std::filesystem::rename(tmp, dir);
      note("harvest " + label + ": wrote " + dir.string() + " in " + seconds(t0));
      return h;
    } catch (const std::exception& e) {
      throw StageError("harvest " + label, dir.string(), e.what());
    }
  }

  bool wants(const std::string& metric) const {
    const auto& n = cfg_.metrics.names;
    return n.empty() || std::find(n.begin(), n.end(), metric) != n.end();
  }

  std::unique_ptr<ExplainerClient> explainer() const {
    if (cfg_.metrics.explainer == "oracle") return std::make_unique<OracleClient>();
    if (cfg_.metrics.explainer == "http") return std::make_unique<HttpExplainerClient>();
    return std::make_unique<KeywordMockClient>();
  }

  // Every requested metric for one coder row.
  MetricReport evaluate(const std::string& label) {
    const bool trained = !uses_random_lm(label);
    const Model& m = model(trained);
    const FeatureCoder& c = coder(label);
    const auto& d = data();
    const auto& tok = tokenizer();
    const auto& mc = cfg_.metrics;
    MetricReport r;
    r.coder = label;
    r.config = {{"kind", to_string(c.kind())}, {"layer", c.layer()}, {"d_coder", c.d_coder()}, {"lm", lm_hash(trained)},
                {"coder", coder_hash(label)}, {"seed", cfg_.seed}};
    ModelCoderSystem sys(m, c, tok);

    auto stage = [&](const std::string& metric, const std::function<void()>& f) {
      if (!wants(metric)) return;
      const auto t0 = clock();
      try {
        f();
      } catch (const StageError&) {
        throw;
      } catch (const std::exception& e) {
        throw StageError("eval " + label + " " + metric, coder_path(label).string(), e.what());
      }
      note("eval " + label + " " + metric + ": " + seconds(t0));
    };

    if (wants("alive") || wants("explained_variance")) {
      stage(wants("alive") ? "alive" : "explained_variance", [&] {
        const auto st = coder_stream_stats(m, c, harvest_stream(), mc.eval_tokens);
        const nlohmann::json extra{{"tokens", st.tokens}, {"mean_l0", st.mean_l0}};
        if (wants("alive")) r.metrics["alive"] = MetricValue::of({st.alive_rate}, extra);
        if (wants("explained_variance")) r.metrics["explained_variance"] = MetricValue::of({st.explained_variance}, extra);
      });
    }
    stage("absorption", [&] {
      const auto res = absorption_eval(m, c, tok, d.letters, mc.absorption);
      nlohmann::json letters = nlohmann::json::object();
      for (const auto& l : res.letters) letters[l.letter] = {{"score", l.mean_score}, {"probe_accuracy", l.probe_accuracy}, {"s_main", l.s_main}};
      r.metrics["absorption"] = res.letters.empty() ? MetricValue::failed("every letter skipped")
                                                    : MetricValue::of(res.per_letter(), {{"letters", letters}, {"skipped", res.skipped}});
    });
    stage("sparse_probing", [&] {
      std::vector<ConceptFeatures> cf;
      for (const auto& s : d.concepts) cf.push_back(concept_features(sys, s));
      const auto res = sparse_probing_eval(cf, mc.probing_ks);
      nlohmann::json by_k = nlohmann::json::object();
      for (std::size_t i = 0; i < res.ks.size(); ++i) by_k[std::to_string(res.ks[i])] = res.accuracies(i);
      r.metrics["sparse_probing"] = MetricValue::of(res.accuracies(0), {{"k", res.ks.at(0)}, {"by_k", by_k}});
    });
    stage("autointerp", [&] {
      const auto h = history(label);
      auto client = explainer();
      auto cfg = mc.autointerp;
      cfg.seed = cfg_.seed;
      const auto res = autointerp_eval(h, [&](int id) { return tok.token_string(id); }, *client, cfg);
      nlohmann::json feats = nlohmann::json::array();
      for (const auto& f : res.features) feats.push_back({{"feature", f.feature}, {"explanation", f.explanation}, {"score", f.score}});
      const nlohmann::json extra{{"explainer", mc.explainer}, {"features", feats}, {"ineligible", res.ineligible}, {"failures", res.failures}};
      r.metrics["autointerp"] = res.features.empty() ? MetricValue::failed("no feature could be scored") : MetricValue::of(res.scores(), extra);
    });
    stage("ravel", [&] {
      try {
        FeaturePatchIntervention fp(m, c, tok, d.world, ravel_feature_selection(m, c, tok, d.world, mc.ravel.k));
        auto rc = mc.ravel;
        rc.seed = cfg_.seed;
        const auto res = ravel_eval(m, tok, d.world, fp, rc);
        const nlohmann::json extra{{"recall", res.recall}, {"k", rc.k}, {"edits", res.log.size()}};
        r.metrics["ravel_isolation"] = MetricValue::of(res.isolation_per_attribute, extra);
        r.metrics["ravel_causality"] = MetricValue::of(res.causality_per_attribute, extra);
      } catch (const RavelGateError& e) {
        // an LM that does not know the world has nothing to edit
        r.metrics["ravel_isolation"] = MetricValue::failed(e.what());
        r.metrics["ravel_causality"] = MetricValue::failed(e.what());
      }
    });
    stage("scr", [&] {
      auto spec = d.config.spurious;
      spec.eval_size = spec.train_size;
      const auto balanced = gen_spurious_pairs(spec, d.config.spurious_bias, cfg_.seed ^ 0x62616cULL);
      auto ks = mc.scr_ks;
      if (std::find(ks.begin(), ks.end(), mc.scr_headline) == ks.end()) ks.push_back(mc.scr_headline);
      const auto res = scr_eval(sys, ScrData::from_sets(d.spurious, balanced), ks);
      nlohmann::json grid = nlohmann::json::object();
      std::optional<double> head;
      for (const auto& s : res) {
        grid[std::to_string(s.k)] = {{"a_base", s.a_base}, {"a_abl", s.a_abl}, {"a_oracle", s.a_oracle},
                                     {"score", s.score ? nlohmann::json(*s.score) : nlohmann::json(nullptr)}};
        if (s.k == mc.scr_headline) head = s.score;
      }
      r.metrics["scr"] = head ? MetricValue::of({*head}, {{"k", mc.scr_headline}, {"grid", grid}})
                              : MetricValue::failed("oracle and biased probes score the same; SCR undefined");
    });
    stage("tpp", [&] {
      auto ks = mc.tpp_ks;
      if (std::find(ks.begin(), ks.end(), mc.tpp_headline) == ks.end()) ks.push_back(mc.tpp_headline);
      const auto res = tpp_eval(sys, d.topics, ks);
      nlohmann::json grid = nlohmann::json::object();
      double head = 0.0;
      for (const auto& t : res) {
        grid[std::to_string(t.k)] = t.score;
        if (t.k == mc.tpp_headline) head = t.score;
      }
      r.metrics["tpp"] = MetricValue::of({head}, {{"k", mc.tpp_headline}, {"grid", grid}});
    });
    return r;
  }

  // Writes config, version and fingerprints into a run directory.
  void write_run_metadata(const std::filesystem::path& dir) {
    write_text(dir / "config.json", resolved_config().dump(2) + "\n");
    write_text(dir / "version.txt", version_string() + "\n");
    write_text(dir / "fingerprints.json", fingerprints().dump(2) + "\n");
  }

  std::vector<std::string> pipeline_coders() const { return cfg_.pipeline_coders.empty() ? pipeline_coder_labels() : cfg_.pipeline_coders; }

  // Full desk run: reports per coder plus the summary table.
  std::vector<MetricReport> pipeline(const std::filesystem::path& run_dir) {
    std::filesystem::create_directories(run_dir);
    write_run_metadata(run_dir);
    std::vector<MetricReport> reports;
    for (const auto& label : pipeline_coders()) {
      reports.push_back(evaluate(label));
      write_text(run_dir / "reports" / (label + ".json"), nlohmann::json(reports.back()).dump(2) + "\n");
    }
    write_summary(run_dir, reports);
    return reports;
  }

  static void write_summary(const std::filesystem::path& dir, const std::vector<MetricReport>& reports) {
    write_text(dir / "summary.md", render_markdown_table(reports));
    write_text(dir / "summary.csv", render_csv_table(reports));
  }

 private:
  using Clock = std::chrono::steady_clock;
  static Clock::time_point clock() { return Clock::now(); }
  static std::string seconds(Clock::time_point t0) {
    std::ostringstream os;
    os.precision(1);
    os << std::fixed << std::chrono::duration<double>(Clock::now() - t0).count() << "s";
    return os.str();
  }
  void note(const std::string& s) {
    if (log_) *log_ << "[ffkv] " << s << std::endl;
  }

  WorkbenchConfig cfg_;
  std::ostream* log_;
  std::unique_ptr<DeskData> data_;
  std::vector<std::vector<int>> harvest_docs_;
  std::vector<int> harvest_stream_;
  std::unique_ptr<Model> lm_, random_lm_;
  std::map<std::string, FeatureCoder> coders_;
};

// ---------------------------------------------------------------------------
// Sweep

enum class SweepParam { k, d_ff };

inline SweepParam sweep_param_from_string(const std::string& s) {
  if (s == "k") return SweepParam::k;
  if (s == "d_ff") return SweepParam::d_ff;
  throw Error("sweep: unknown parameter '" + s + "' (expected k or d_ff)");
}

inline std::vector<std::size_t> parse_values(const std::string& csv) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  for (std::string item; std::getline(ss, item, ',');) {
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || v == 0) throw Error("sweep: bad value '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw Error("sweep: no values given");
  return out;
}

struct SweepPoint {
  std::size_t value = 0;
  std::filesystem::path dir;
  std::vector<MetricReport> reports;
};

// The config for one sweep point. k touches the TopK coders; d_ff retrains
// the LM. Points share the parent's artifact cache.
inline WorkbenchConfig sweep_point_config(const WorkbenchConfig& base, SweepParam p, std::size_t v, const std::filesystem::path& dir) {
  WorkbenchConfig c = base;
  c.out_dir = dir.string();
  c.cache_dir = base.cache().string();
  if (p == SweepParam::k) {
    c.coders.topk.k = v;
    if (c.pipeline_coders.empty()) c.pipeline_coders = {"topk_ffkv"};
  } else {
    c.model.d_ff = v;
    if (c.pipeline_coders.empty()) c.pipeline_coders = {"ffkv"};
  }
  return c;
}

inline std::string sweep_point_name(SweepParam p, std::size_t v) { return std::string(p == SweepParam::k ? "k" : "d_ff") + "=" + std::to_string(v); }

// Long-format curves: one row per (value, coder, metric) with the ±2 SEM band.
inline nlohmann::json sweep_curves(SweepParam p, const std::vector<SweepPoint>& points) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& pt : points)
    for (const auto& r : pt.reports)
      for (const auto& [name, m] : r.metrics) {
        if (!m.ok()) continue;
        rows.push_back({{"value", pt.value}, {"coder", r.coder}, {"metric", name}, {"mean", m.value()}, {"two_sem", m.two_sem()},
                        {"lower", m.value() - m.two_sem()}, {"upper", m.value() + m.two_sem()}, {"runs", m.runs.size()}});
      }
  return {{"schema_version", kReportSchemaVersion}, {"param", p == SweepParam::k ? "k" : "d_ff"}, {"rows", rows}};
}

inline std::string sweep_csv(const nlohmann::json& curves) {
  std::ostringstream os;
  os << std::setprecision(10) << curves.at("param").get<std::string>() << ",coder,metric,mean,two_sem,lower,upper,runs\n";
  for (const auto& r : curves.at("rows"))
    os << r.at("value").get<std::size_t>() << ',' << r.at("coder").get<std::string>() << ',' << r.at("metric").get<std::string>() << ','
       << r.at("mean").get<double>() << ',' << r.at("two_sem").get<double>() << ',' << r.at("lower").get<double>() << ','
       << r.at("upper").get<double>() << ',' << r.at("runs").get<std::size_t>() << '\n';
  return os.str();
}

inline std::vector<SweepPoint> run_sweep(const WorkbenchConfig& base, SweepParam p, const std::vector<std::size_t>& values,
                                         std::ostream* log = &std::cerr) {
  if (values.empty()) throw Error("sweep: no values given");
  const std::filesystem::path root(base.out_dir);
  std::vector<SweepPoint> points;
  for (std::size_t v : values) {
    SweepPoint pt;
    pt.value = v;
    pt.dir = root / "points" / sweep_point_name(p, v);
    Workbench wb(sweep_point_config(base, p, v, pt.dir), log);
    pt.reports = wb.pipeline(pt.dir);
    points.push_back(std::move(pt));
  }
  const auto curves = sweep_curves(p, points);
  write_text(root / "sweep.json", curves.dump(2) + "\n");
  write_text(root / "sweep.csv", sweep_csv(curves));
  return points;
}

// ---------------------------------------------------------------------------
// Align

// Feature vectors of a saved coder; FF-KV records load their LM.
inline Matrix coder_feature_vectors(const std::filesystem::path& path) {
  const auto rec = load_coder(path);
  if (rec.binding) {
    const auto lm = load_model(rec.binding->model_path);
    return rec.instantiate(&lm.model).feature_vectors();
  }
  return rec.instantiate().feature_vectors();
}

inline nlohmann::json run_align(const std::filesystem::path& a, const std::filesystem::path& b, const std::filesystem::path& out_dir,
                                double low = 0.3, double high = 0.9, std::size_t bins = 10) {
  const auto t = align_dictionaries(coder_feature_vectors(a), coder_feature_vectors(b), a.string(), b.string());
  const auto p = partition(t, low, high);
  const auto h = bin_histogram(t, bins);
  const auto rep = alignment_report(t, p, h);
  write_text(out_dir / "alignment.json", rep.dump(2) + "\n");
  write_text(out_dir / "alignment.csv", alignment_csv(t));
  return rep;
}

// ---------------------------------------------------------------------------
// Report

struct MergedReport {
  std::vector<MetricReport> rows;
  std::vector<nlohmann::json> alignments;
  std::string markdown, csv;
};

inline std::vector<MetricReport> load_run_reports(const std::filesystem::path& dir) {
  const auto rdir = dir / "reports";
  if (!std::filesystem::is_directory(rdir)) throw Error("report: '" + dir.string() + "' has no reports/ directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(rdir))
    if (e.path().extension() == ".json") files.push_back(e.path());
  if (files.empty()) throw Error("report: '" + rdir.string() + "' holds no reports");
  // Keep pipeline row order; unknown labels go last, alphabetically.
  auto rank = [](const std::filesystem::path& f) {
    const auto& v = pipeline_coder_labels();
    const auto it = std::find(v.begin(), v.end(), f.stem().string());
    return std::make_pair(static_cast<std::size_t>(it - v.begin()), f.stem().string());
  };
  std::sort(files.begin(), files.end(), [&](const auto& x, const auto& y) { return rank(x) < rank(y); });
  std::vector<MetricReport> out;
  for (const auto& f : files) {
    try {
      out.push_back(nlohmann::json::parse(read_text(f)).get<MetricReport>());
    } catch (const nlohmann::json::exception& e) {
      throw Error("report: cannot parse '" + f.string() + "': " + e.what());
    } catch (const Error& e) {
      throw Error("report: '" + f.string() + "': " + e.what());
    }
  }
  return out;
}

inline std::string render_alignment_section(const std::vector<nlohmann::json>& alignments) {
  std::ostringstream os;
  os << "\n## Alignment\n\n| Direction | Aligned | Middle | Unaligned | Total |\n|---|---|---|---|---|\n";
  for (const auto& a : alignments) {
    const auto& p = a.at("partition");
    os << "| " << a.at("direction").get<std::string>() << " | " << p.at("aligned") << " | " << p.at("middle") << " | " << p.at("unaligned")
       << " | " << p.at("total") << " |\n";
  }
  os << "\nMCS histograms (10 bins over [0, 1]):\n\n";
  for (const auto& a : alignments) os << "- " << a.at("direction").get<std::string>() << ": " << a.at("histogram").at("counts").dump() << "\n";
  return os.str();
}

// Runs sharing a coder label are pooled (seeds); alignment results in the run
// directories are appended.
inline MergedReport merge_runs(const std::vector<std::filesystem::path>& dirs) {
  if (dirs.empty()) throw Error("report: no run directories given");
  std::vector<MetricReport> all;
  MergedReport m;
  for (const auto& d : dirs) {
    auto rs = load_run_reports(d);
    all.insert(all.end(), rs.begin(), rs.end());
    if (std::filesystem::exists(d / "alignment.json")) m.alignments.push_back(nlohmann::json::parse(read_text(d / "alignment.json")));
  }
  m.rows = pool_reports(all);
  m.markdown = render_markdown_table(m.rows);
  if (!m.alignments.empty()) m.markdown += render_alignment_section(m.alignments);
  m.csv = render_csv_table(m.rows);
  return m;
}

}  // namespace ffkv
