#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ffkv/numerics/ops.hpp"

namespace ffkv {

inline constexpr int kReportSchemaVersion = 1;

// One metric cell: sub-run values plus mean and 2*SEM. A cell may instead carry
// an error (metric could not run for this coder).
struct MetricValue {
  std::vector<double> runs;
  std::string error;
  nlohmann::json extra = nlohmann::json::object();

  bool ok() const { return error.empty() && !runs.empty(); }
  double value() const { return ffkv::mean(runs); }
  double two_sem() const { return runs.size() > 1 ? 2.0 * standard_error(runs) : 0.0; }

  static MetricValue of(std::vector<double> runs, nlohmann::json extra = nlohmann::json::object()) {
    MetricValue m;
    m.runs = std::move(runs);
    m.extra = std::move(extra);
    return m;
  }
  static MetricValue failed(std::string why) {
    MetricValue m;
    m.error = std::move(why);
    return m;
  }
};

inline void to_json(nlohmann::json& j, const MetricValue& m) {
  j = {{"runs", m.runs}};
  if (m.ok()) {
    j["value"] = m.value();
    j["two_sem"] = m.two_sem();
  }
  if (!m.error.empty()) j["error"] = m.error;
  if (!m.extra.empty()) j["extra"] = m.extra;
}

inline void from_json(const nlohmann::json& j, MetricValue& m) {
  m.runs = j.at("runs").get<std::vector<double>>();
  m.error = j.value("error", std::string());
  m.extra = j.value("extra", nlohmann::json::object());
}

struct MetricReport {
  std::string coder;  // row label
  std::map<std::string, MetricValue> metrics;
  nlohmann::json config = nlohmann::json::object();
};

inline void to_json(nlohmann::json& j, const MetricReport& r) {
  j = {{"schema_version", kReportSchemaVersion}, {"coder", r.coder}, {"metrics", r.metrics}, {"config", r.config}};
}

inline void from_json(const nlohmann::json& j, MetricReport& r) {
  const int v = j.value("schema_version", -1);
  if (v != kReportSchemaVersion)
    throw Error("metric report schema version " + std::to_string(v) + " does not match " + std::to_string(kReportSchemaVersion));
  r.coder = j.at("coder").get<std::string>();
  r.metrics = j.at("metrics").get<std::map<std::string, MetricValue>>();
  r.config = j.value("config", nlohmann::json::object());
}

// Column keys and headers of the summary table, in display order.
inline const std::vector<std::pair<std::string, std::string>>& table_columns() {
  static const std::vector<std::pair<std::string, std::string>> cols{
      {"alive", "Feat. Alive"},       {"explained_variance", "Expl. Var."}, {"absorption", "Absorption"},
      {"sparse_probing", "Sparse Prob."}, {"autointerp", "Autointerp"},     {"ravel_isolation", "RAVEL-ISO"},
      {"ravel_causality", "RAVEL-CAU"},   {"scr", "SCR (k=20)"}};
  return cols;
}

inline std::string format_cell(const MetricValue& m) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << m.value() << " ± " << m.two_sem();
  return os.str();
}

// Pools reports that share a coder label (e.g. several seeds) by
// concatenating their sub-runs.
inline std::vector<MetricReport> pool_reports(const std::vector<MetricReport>& reports) {
  std::vector<MetricReport> out;
  for (const auto& r : reports) {
    auto it = std::find_if(out.begin(), out.end(), [&](const MetricReport& o) { return o.coder == r.coder; });
    if (it == out.end()) {
      out.push_back(r);
      continue;
    }
    for (const auto& [name, m] : r.metrics) {
      auto& dst = it->metrics[name];
      if (!m.ok()) continue;
      if (!dst.ok()) dst = MetricValue{};
      dst.runs.insert(dst.runs.end(), m.runs.begin(), m.runs.end());
    }
  }
  return out;
}

// Markdown results table, one row per coder. Missing or
// failed cells render as an em-dash glyph with a footnote.
inline std::string render_markdown_table(const std::vector<MetricReport>& reports) {
  std::ostringstream os;
  os << "| Coder |";
  for (const auto& [key, head] : table_columns()) os << ' ' << head << " |";
  os << "\n|---|";
  for (std::size_t i = 0; i < table_columns().size(); ++i) os << "---|";
  os << '\n';
  std::vector<std::string> notes;
  for (const auto& r : reports) {
    os << "| " << r.coder << " |";
    for (const auto& [key, head] : table_columns()) {
      auto it = r.metrics.find(key);
      if (it != r.metrics.end() && it->second.ok()) {
        os << ' ' << format_cell(it->second) << " |";
      } else {
        notes.push_back(r.coder + " / " + head + ": " + (it == r.metrics.end() ? "not computed" : it->second.error));
        os << " — [" << notes.size() << "] |";
      }
    }
    os << '\n';
  }
  if (!notes.empty()) {
    os << '\n';
    for (std::size_t i = 0; i < notes.size(); ++i) os << "[" << i + 1 << "] " << notes[i] << "  \n";
  }
  return os.str();
}

inline std::string render_csv_table(const std::vector<MetricReport>& reports) {
  std::ostringstream os;
  os << "coder";
  for (const auto& [key, head] : table_columns()) os << ',' << key << ',' << key << "_2sem";
  os << '\n' << std::setprecision(10);
  for (const auto& r : reports) {
    os << r.coder;
    for (const auto& [key, head] : table_columns()) {
      auto it = r.metrics.find(key);
      if (it != r.metrics.end() && it->second.ok())
        os << ',' << it->second.value() << ',' << it->second.two_sem();
      else
        os << ",,";
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace ffkv
