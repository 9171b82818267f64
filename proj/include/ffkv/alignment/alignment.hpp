#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ffkv/numerics/ops.hpp"
#include "ffkv/numerics/rng.hpp"

namespace ffkv {

// One row per source feature: its best cosine match in the target dictionary.
// Direction matters; align(a, b) and align(b, a) are separate tables.
struct AlignmentTable {
  std::string source, target;
  std::vector<MaxCosine> entries;
  std::size_t target_size = 0;

  std::size_t size() const { return entries.size(); }
};

inline AlignmentTable align_dictionaries(const Matrix& source, const Matrix& target, std::string source_name = "a",
                                         std::string target_name = "b") {
  if (source.cols() != target.cols())
    throw DimensionError("align_dictionaries: embedding widths differ (" + std::to_string(source.cols()) + " vs " +
                         std::to_string(target.cols()) + ")");
  AlignmentTable t;
  t.source = std::move(source_name);
  t.target = std::move(target_name);
  t.entries = cosine_similarity_argmax(source, target);
  t.target_size = target.rows();
  return t;
}

struct Partition {
  double low = 0.3, high = 0.9;
  std::vector<std::size_t> aligned, middle, unaligned;  // > high, [low, high], < low
  std::size_t total = 0;

  double aligned_fraction() const { return total ? static_cast<double>(aligned.size()) / total : 0.0; }
  double unaligned_fraction() const { return total ? static_cast<double>(unaligned.size()) / total : 0.0; }
  double middle_fraction() const { return total ? static_cast<double>(middle.size()) / total : 0.0; }
};

inline Partition partition(const AlignmentTable& t, double low = 0.3, double high = 0.9) {
  if (!(low < high)) throw Error("partition: low threshold must be below the high threshold");
  Partition p;
  p.low = low;
  p.high = high;
  p.total = t.size();
  for (std::size_t r = 0; r < t.size(); ++r) {
    const double s = t.entries[r].score;
    (s > high ? p.aligned : s < low ? p.unaligned : p.middle).push_back(r);
  }
  return p;
}

struct Histogram {
  std::vector<std::size_t> counts;
  std::size_t clamped_negative = 0;  // scores below 0 counted in bin 0
  std::size_t zero_norm = 0;
};

inline std::size_t histogram_bin(double score, std::size_t bins) {
  if (score <= 0.0) return 0;
  return std::min(bins - 1, static_cast<std::size_t>(score * static_cast<double>(bins)));
}

inline Histogram bin_histogram(const AlignmentTable& t, std::size_t bins = 10) {
  if (bins < 1) throw Error("bin_histogram: need at least one bin");
  Histogram h;
  h.counts.assign(bins, 0);
  for (const auto& e : t.entries) {
    ++h.counts[histogram_bin(e.score, bins)];
    if (e.score < 0.0) ++h.clamped_negative;
    if (e.zero_norm) ++h.zero_norm;
  }
  return h;
}

struct AnnotationPair {
  std::size_t source = 0, target = 0, bin = 0;
  double score = 0.0;
  bool operator==(const AnnotationPair&) const = default;
};

// Up to per_bin source features from every bin, uniformly without
// replacement; short bins give what they have.
inline std::vector<AnnotationPair> sample_pairs_for_annotation(const AlignmentTable& t, std::size_t per_bin, std::uint64_t seed,
                                                               std::size_t bins = 10, std::vector<std::string>* log = nullptr) {
  if (per_bin < 1) throw Error("sample_pairs_for_annotation: per_bin must be at least 1");
  std::vector<std::vector<std::size_t>> members(bins);
  for (std::size_t r = 0; r < t.size(); ++r) members[histogram_bin(t.entries[r].score, bins)].push_back(r);
  std::vector<AnnotationPair> out;
  for (std::size_t b = 0; b < bins; ++b) {
    auto& m = members[b];
    if (m.empty()) continue;
    RngStream rng(seed, 0x70616972ULL + b);
    const std::size_t take = std::min(per_bin, m.size());
    if (take < per_bin && log) log->push_back("bin " + std::to_string(b) + " holds " + std::to_string(m.size()) + " features");
    for (std::size_t i = 0; i < take; ++i) {
      std::swap(m[i], m[i + rng.below(m.size() - i)]);
      out.push_back({m[i], t.entries[m[i]].index, b, t.entries[m[i]].score});
    }
  }
  return out;
}

inline nlohmann::json partition_json(const Partition& p) {
  return {{"thresholds", {{"low", p.low}, {"high", p.high}}},
          {"total", p.total},
          {"aligned", p.aligned.size()},
          {"middle", p.middle.size()},
          {"unaligned", p.unaligned.size()},
          {"aligned_fraction", p.aligned_fraction()},
          {"unaligned_fraction", p.unaligned_fraction()}};
}

inline nlohmann::json alignment_report(const AlignmentTable& t, const Partition& p, const Histogram& h) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t r = 0; r < t.size(); ++r) rows.push_back({{"r", r}, {"mcs", t.entries[r].score}, {"u", t.entries[r].index}, {"zero_norm", t.entries[r].zero_norm}});
  return {{"direction", t.source + "->" + t.target},
          {"source", t.source},
          {"target", t.target},
          {"partition", partition_json(p)},
          {"histogram", {{"counts", h.counts}, {"clamped_negative", h.clamped_negative}, {"zero_norm", h.zero_norm}}},
          {"table", rows}};
}

inline std::string alignment_csv(const AlignmentTable& t) {
  std::ostringstream os;
  os.precision(9);
  os << "r,mcs,u,zero_norm\n";
  for (std::size_t r = 0; r < t.size(); ++r) os << r << ',' << t.entries[r].score << ',' << t.entries[r].index << ',' << t.entries[r].zero_norm << '\n';
  return os.str();
}

}  // namespace ffkv
