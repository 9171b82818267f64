#pragma once

#include <csignal>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ffkv/cli/workbench.hpp"
#include "ffkv/service/server.hpp"

namespace ffkv {

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

inline AnnotationServer* g_server = nullptr;
inline void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace detail

// The whole command line. Returns the process exit code; 0 iff every
// requested stage succeeded.
inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Feed-forward key-value memories vs sparse coders: desk-scale workbench", "ffkv"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "global seed, overrides the config");
  app.add_option("--out", out_dir, "output (run) directory, overrides the config");
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "no progress on stderr");

  auto* train_lm_cmd = app.add_subcommand("train-lm", "train the desk LM (content-addressed)");
  bool random_lm = false;
  train_lm_cmd->add_flag("--random", random_lm, "write the untrained baseline instead");

  auto* train_coder_cmd = app.add_subcommand("train-coder", "train or extract one coder");
  std::string kind_name;
  std::optional<std::size_t> layer;
  train_coder_cmd->add_option("--kind", kind_name, "sae, transcoder, ffkv, topk_ffkv, norm_ffkv, topk_norm_ffkv, random_ffkv")->required();
  train_coder_cmd->add_option("--layer", layer, "layer (default n_layers / 2)");

  auto* harvest_cmd = app.add_subcommand("harvest", "activation history of a coder over a corpus");
  std::string coder_path, corpus_path, model_path, corpus_format = "plain";
  std::size_t harvest_tokens = 50000;
  harvest_cmd->add_option("--coder", coder_path, "coder file")->required()->check(CLI::ExistingFile);
  harvest_cmd->add_option("--corpus", corpus_path, "corpus file")->required()->check(CLI::ExistingFile);
  harvest_cmd->add_option("--format", corpus_format, "plain or jsonl")->check(CLI::IsMember({"plain", "jsonl"}));
  harvest_cmd->add_option("--model", model_path, "LM checkpoint (default: the one the coder names, else the config's desk LM)");
  harvest_cmd->add_option("--tokens", harvest_tokens, "token budget");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate coders on a metric list");
  std::string metric_list, coder_list;
  eval_cmd->add_option("--metrics", metric_list, "comma list of: alive, explained_variance, absorption, sparse_probing, autointerp, ravel, scr, tpp")
      ->required();
  eval_cmd->add_option("--coders", coder_list, "comma list of coder labels (default: all seven)");

  app.add_subcommand("pipeline", "full desk run: 7 coders x all metrics, summary table");

  auto* align_cmd = app.add_subcommand("align", "max-cosine alignment of two coders' dictionaries");
  std::string align_a, align_b;
  double low = 0.3, high = 0.9;
  align_cmd->add_option("--a", align_a, "source coder file")->required()->check(CLI::ExistingFile);
  align_cmd->add_option("--b", align_b, "target coder file")->required()->check(CLI::ExistingFile);
  align_cmd->add_option("--low", low, "unaligned threshold");
  align_cmd->add_option("--high", high, "aligned threshold");

  auto* sweep_cmd = app.add_subcommand("sweep", "one pipeline per value of k or d_ff");
  std::string sweep_param, sweep_values;
  sweep_cmd->add_option("--param", sweep_param, "k or d_ff")->required();
  sweep_cmd->add_option("--values", sweep_values, "comma list of values")->required();

  auto* serve_cmd = app.add_subcommand("serve", "annotation service");
  std::string host = "127.0.0.1", log_path;
  int port = 8080;
  serve_cmd->add_option("--host", host, "bind address");
  serve_cmd->add_option("--port", port, "port");
  serve_cmd->add_option("--log", log_path, "append log (default <out>/annotations.jsonl)");

  auto* report_cmd = app.add_subcommand("report", "merge run directories into one table");
  std::vector<std::string> report_dirs;
  report_cmd->add_option("dirs", report_dirs, "run directories")->required()->check(CLI::ExistingDirectory);

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  std::ostream* log = quiet ? nullptr : &err;
  try {
    WorkbenchConfig cfg = config_path.empty() ? WorkbenchConfig{} : load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (layer) cfg.coders.layer = *layer;
    const std::filesystem::path run(cfg.out_dir);

    if (*train_lm_cmd) {
      Workbench wb(cfg, log);
      wb.model(!random_lm);
      wb.write_run_metadata(run);
      out << wb.lm_path(!random_lm).string() << '\n';
    } else if (*train_coder_cmd) {
      Workbench wb(cfg, log);
      if (std::find(pipeline_coder_labels().begin(), pipeline_coder_labels().end(), kind_name) == pipeline_coder_labels().end())
        throw Error("unknown coder kind '" + kind_name + "'");
      wb.coder(kind_name);
      wb.write_run_metadata(run);
      out << wb.coder_path(kind_name).string() << '\n';
    } else if (*harvest_cmd) {
      const auto rec = load_coder(coder_path);
      std::filesystem::path mp = model_path;
      if (mp.empty() && rec.binding) mp = rec.binding->model_path;
      if (mp.empty()) {
        Workbench wb(cfg, log);
        wb.model();
        mp = wb.lm_path();
      }
      const auto lm = load_model(mp);
      if (!lm.tokenizer) throw StageError("harvest", mp.string(), "checkpoint carries no tokenizer");
      const auto docs = load_corpus(corpus_path, corpus_format_from_string(corpus_format), harvest_tokens,
                                    [&](const std::string& t) { return lm.tokenizer->encode(t).size(); });
      std::vector<std::vector<int>> ids;
      nlohmann::json doc_ids = nlohmann::json::array();
      for (const auto& d : docs) {
        ids.push_back(lm.tokenizer->encode(d.text));
        doc_ids.push_back(d.id);
      }
      const auto coder = rec.instantiate(&lm.model);
      const auto h = harvest(lm.model, coder, ids, harvest_tokens);
      save_history(run / "history", h);
      write_text(run / "history" / "documents.json", doc_ids.dump() + "\n");
      write_text(run / "config.json", nlohmann::json({{"coder", coder_path}, {"corpus", corpus_path}, {"format", corpus_format},
                                                      {"model", mp.string()}, {"tokens", harvest_tokens}}).dump(2) + "\n");
      write_text(run / "version.txt", version_string() + "\n");
      write_text(run / "fingerprints.json",
                 nlohmann::json({{"corpus", corpus_fingerprint(docs)}, {"tokens", h.corpus_fingerprint}}).dump(2) + "\n");
      out << (run / "history").string() << '\n';
    } else if (*eval_cmd) {
      cfg.metrics.names = detail::split_list(metric_list);
      if (!coder_list.empty()) cfg.pipeline_coders = detail::split_list(coder_list);
      Workbench wb(cfg, log);
      const auto reports = wb.pipeline(run);
      out << render_markdown_table(reports);
    } else if (app.got_subcommand("pipeline")) {
      Workbench wb(cfg, log);
      const auto reports = wb.pipeline(run);
      out << render_markdown_table(reports);
    } else if (*align_cmd) {
      const auto rep = run_align(align_a, align_b, run, low, high);
      write_text(run / "version.txt", version_string() + "\n");
      out << rep.at("partition").dump(2) << '\n';
    } else if (*sweep_cmd) {
      const auto p = sweep_param_from_string(sweep_param);
      const auto values = parse_values(sweep_values);
      validate(cfg);
      std::filesystem::create_directories(run);
      write_text(run / "config.json", nlohmann::json(cfg).dump(2) + "\n");
      write_text(run / "version.txt", version_string() + "\n");
      run_sweep(cfg, p, values, log);
      out << read_text(run / "sweep.csv");
    } else if (*serve_cmd) {
      AnnotationStore store(log_path.empty() ? run / "annotations.jsonl" : std::filesystem::path(log_path));
      AnnotationServer server(store);
      if (!server.bind(host, port)) throw StageError("serve", host + ":" + std::to_string(port), "cannot bind");
      detail::g_server = &server;
      std::signal(SIGINT, detail::on_signal);
      std::signal(SIGTERM, detail::on_signal);
      if (log) *log << "[ffkv] serving on http://" << host << ":" << port << std::endl;
      server.listen_after_bind();
      detail::g_server = nullptr;
    } else if (*report_cmd) {
      std::vector<std::filesystem::path> dirs(report_dirs.begin(), report_dirs.end());
      const auto m = merge_runs(dirs);
      if (!out_dir.empty()) {
        write_text(run / "report.md", m.markdown);
        write_text(run / "report.csv", m.csv);
      }
      out << m.markdown;
    }
  } catch (const std::exception& e) {
    err << "ffkv: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

inline int run_cli(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(std::move(args));
}

}  // namespace ffkv
