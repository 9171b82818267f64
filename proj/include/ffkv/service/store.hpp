#pragma once

#include <algorithm>
#include <chrono>
#include <ctime>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ffkv/io/container.hpp"
#include "ffkv/numerics/rng.hpp"
#include "ffkv/service/log.hpp"

namespace ffkv {

// Errors carry the HTTP status the server maps them to.
struct ServiceError : Error {
  int status;
  ServiceError(int s, const std::string& what) : Error(what), status(s) {}
};
inline ServiceError bad_request(const std::string& w) { return {400, w}; }
inline ServiceError not_found(const std::string& w) { return {404, w}; }
inline ServiceError conflict(const std::string& w) { return {409, w}; }

enum class TaskKind { categorize, origin, pair_align };

inline std::string to_string(TaskKind t) {
  switch (t) {
    case TaskKind::categorize: return "categorize";
    case TaskKind::origin: return "origin";
    case TaskKind::pair_align: return "pair_align";
  }
  return "?";
}

inline TaskKind task_kind_from_string(const std::string& s) {
  for (auto t : {TaskKind::categorize, TaskKind::origin, TaskKind::pair_align})
    if (to_string(t) == s) return t;
  throw bad_request("unknown task kind '" + s + "'");
}

inline const std::vector<std::string>& category_labels() {
  static const std::vector<std::string> v{"superficial", "conceptual", "uninterpretable"};
  return v;
}
inline const std::vector<std::string>& origin_labels() {
  static const std::vector<std::string> v{"ffkv", "topk_ffkv", "sae", "transcoder"};
  return v;
}
inline const std::vector<std::string>& verdict_labels() {
  static const std::vector<std::string> v{"matched", "unmatched"};
  return v;
}

inline const std::vector<std::string>& answer_labels(TaskKind t) {
  return t == TaskKind::categorize ? category_labels() : t == TaskKind::origin ? origin_labels() : verdict_labels();
}

// Dossiers are in the harvest JSON layout (feature, stats, contexts[]).
struct DossierSet {
  std::string coder;
  std::vector<nlohmann::json> dossiers;
};

struct PairSource {
  std::string group;  // e.g. "transcoder->ffkv bin 9"
  double mcs = 0.0;
  nlohmann::json a, b;
};

struct SessionRequest {
  TaskKind task = TaskKind::categorize;
  std::vector<DossierSet> sets;
  std::vector<PairSource> pairs;
  std::size_t per_coder = 50;
  std::uint64_t seed = 0;
  bool raw_display = false;
  std::string annotator;
};

inline void from_json(const nlohmann::json& j, SessionRequest& r) {
  r.task = task_kind_from_string(j.at("task").get<std::string>());
  r.per_coder = j.value("per_coder", std::size_t{50});
  r.seed = j.value("seed", std::uint64_t{0});
  r.raw_display = j.value("raw_display", false);
  r.annotator = j.value("annotator", std::string());
  for (const auto& s : j.value("sets", nlohmann::json::array()))
    r.sets.push_back({s.at("coder").get<std::string>(), s.at("dossiers").get<std::vector<nlohmann::json>>()});
  for (const auto& p : j.value("pairs", nlohmann::json::array()))
    r.pairs.push_back({p.at("group").get<std::string>(), p.value("mcs", 0.0), p.at("a"), p.at("b")});
}

namespace detail {

// Contexts as shown to the annotator: tokens, displayed activations and the
// peak index. Normalized display divides by the feature's largest peak so
// magnitudes do not give the coder away.
inline nlohmann::json card_contexts(const nlohmann::json& dossier, bool raw) {
  const auto& ctxs = dossier.at("contexts");
  double top = 0.0;
  for (const auto& c : ctxs) top = std::max(top, c.at("peak").get<double>());
  nlohmann::json out = nlohmann::json::array();
  for (const auto& c : ctxs) {
    auto acts = c.at("activations").get<std::vector<double>>();
    if (!raw && top > 0.0)
      for (auto& a : acts) a /= top;
    out.push_back({{"tokens", c.at("tokens")},
                   {"activations", acts},
                   {"peak", c.at("peak_position").get<std::size_t>() - c.at("window_start").get<std::size_t>()}});
  }
  return out;
}

inline std::size_t text_overlap(const nlohmann::json& a, const nlohmann::json& b) {
  std::set<std::size_t> ta, tb;
  for (const auto& c : a.at("contexts")) ta.insert(c.at("text_id").get<std::size_t>());
  for (const auto& c : b.at("contexts")) tb.insert(c.at("text_id").get<std::size_t>());
  std::size_t n = 0;
  for (auto t : ta) n += tb.count(t);
  return n;
}

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace detail

struct SessionCard {
  std::string id;
  std::string group;            // coder label or pair group; hidden until reveal
  nlohmann::json provenance;    // hidden until reveal
  nlohmann::json payload;       // what the annotator sees
};

struct Answer {
  std::string value, annotator, time;
  std::size_t submissions = 0;
};

struct Session {
  std::string id;
  TaskKind task = TaskKind::categorize;
  std::uint64_t seed = 0;
  bool raw_display = false;
  std::vector<std::string> groups;  // table row order
  std::vector<SessionCard> cards;   // presentation order
  std::map<std::string, std::size_t> card_index;
  std::map<std::string, Answer> answers;
  bool closed = false;

  bool complete() const { return answers.size() == cards.size(); }
};

// All state is derived from log records, so replaying the log rebuilds it.
class AnnotationStore {
 public:
  using Clock = std::function<std::string()>;

  AnnotationStore() = default;
  explicit AnnotationStore(const std::filesystem::path& log_path, Clock clock = detail::utc_now) : clock_(std::move(clock)) {
    for (const auto& rec : AppendLog::read(log_path)) apply(rec);
    log_ = AppendLog(log_path);
  }

  void set_clock(Clock c) { clock_ = std::move(c); }

  nlohmann::json create_session(const SessionRequest& req) {
    std::lock_guard lock(mu_);
    nlohmann::json rec = build_session_record(req);
    log_.append(rec);
    apply(rec);
    const auto& s = sessions_.at(rec["id"].get<std::string>());
    return {{"session", s.id}, {"task", to_string(s.task)}, {"cards", s.cards.size()}};
  }

  nlohmann::json list_cards(const std::string& session_id) const {
    std::lock_guard lock(mu_);
    const auto& s = session(session_id);
    nlohmann::json cards = nlohmann::json::array();
    for (const auto& c : s.cards) cards.push_back({{"id", c.id}, {"annotated", s.answers.count(c.id) > 0}});
    nlohmann::json out{{"session", s.id},
                       {"task", to_string(s.task)},
                       {"display", s.raw_display ? "raw" : "normalized"},
                       {"annotated", s.answers.size()},
                       {"total", s.cards.size()},
                       {"complete", s.complete()},
                       {"closed", s.closed},
                       {"cards", cards}};
    // Origin choices name coder kinds; clients carry that list themselves.
    if (s.task != TaskKind::origin) out["choices"] = answer_labels(s.task);
    return out;
  }

  nlohmann::json get_card(const std::string& card_id) const {
    std::lock_guard lock(mu_);
    const auto [s, c] = find_card(card_id);
    nlohmann::json out = c->payload;
    const auto it = s->answers.find(card_id);
    out["annotated"] = it != s->answers.end();
    // an origin guess is itself a coder kind, so it is not echoed back
    if (it != s->answers.end() && s->task != TaskKind::origin) out["answer"] = it->second.value;
    out["session"] = s->id;
    return out;
  }

  nlohmann::json submit(const nlohmann::json& body) {
    std::lock_guard lock(mu_);
    std::string sid, cid, value;
    try {
      sid = body.at("session").get<std::string>();
      cid = body.at("card").get<std::string>();
      value = body.at("answer").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      throw bad_request("annotation needs string fields session, card and answer");
    }
    const auto& s = session(sid);
    if (!s.card_index.count(cid)) throw not_found("card " + cid + " is not in session " + sid);
    if (s.closed) throw conflict("session " + sid + " is closed");
    const auto& allowed = answer_labels(s.task);
    if (std::find(allowed.begin(), allowed.end(), value) == allowed.end())
      throw bad_request("answer is not valid for a " + to_string(s.task) + " session");
    nlohmann::json rec{{"type", "annotation"}, {"session", sid}, {"card", cid}, {"answer", value},
                       {"annotator", body.value("annotator", std::string())}, {"time", clock_()}};
    const auto prev = s.answers.find(cid);
    const bool duplicate = prev != s.answers.end() && prev->second.value == value;
    log_.append(rec);
    apply(rec);
    const auto& now = sessions_.at(sid);
    return {{"ok", true}, {"card", cid}, {"submissions", now.answers.at(cid).submissions}, {"duplicate", duplicate},
            {"annotated", now.answers.size()}, {"complete", now.complete()}};
  }

  // Stats reveal provenance, so serving them closes the session. An incomplete
  // session needs partial=true.
  nlohmann::json stats(const std::string& session_id, bool partial) {
    std::lock_guard lock(mu_);
    const auto& s = session(session_id);
    if (!s.complete() && !partial)
      throw conflict("session " + session_id + " has " + std::to_string(s.cards.size() - s.answers.size()) +
                     " unannotated cards; pass partial=true to close it early");
    close(s.id, "stats");
    return stats_of(s);
  }

  nlohmann::json reveal(const std::string& session_id) {
    std::lock_guard lock(mu_);
    const auto& s = session(session_id);
    if (!s.complete()) throw conflict("session " + session_id + " is not complete");
    close(s.id, "reveal");
    nlohmann::json cards = nlohmann::json::array();
    for (const auto& c : s.cards) {
      nlohmann::json row{{"id", c.id}, {"group", c.group}, {"provenance", c.provenance}};
      if (auto it = s.answers.find(c.id); it != s.answers.end()) row["answer"] = it->second.value;
      cards.push_back(row);
    }
    return {{"session", s.id}, {"task", to_string(s.task)}, {"cards", cards}};
  }

  // Read-only stats for tools that replay a log; does not close anything.
  nlohmann::json peek_stats(const std::string& session_id) const {
    std::lock_guard lock(mu_);
    return stats_of(session(session_id));
  }

  std::vector<std::string> session_ids() const {
    std::lock_guard lock(mu_);
    std::vector<std::string> out;
    for (const auto& id : order_) out.push_back(id);
    return out;
  }

 private:
  const Session& session(const std::string& id) const {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw not_found("unknown session " + id);
    return it->second;
  }

  std::pair<const Session*, const SessionCard*> find_card(const std::string& card_id) const {
    auto it = card_owner_.find(card_id);
    if (it == card_owner_.end()) throw not_found("unknown card " + card_id);
    const auto& s = sessions_.at(it->second);
    return {&s, &s.cards[s.card_index.at(card_id)]};
  }

  void close(const std::string& sid, const std::string& reason) {
    if (sessions_.at(sid).closed) return;
    nlohmann::json rec{{"type", "close"}, {"session", sid}, {"reason", reason}, {"time", clock_()}};
    log_.append(rec);
    apply(rec);
  }

  nlohmann::json build_session_record(const SessionRequest& req) const {
    struct Pending {
      std::string group;
      nlohmann::json provenance, payload;
    };
    std::vector<Pending> pending;
    std::vector<std::string> groups;
    if (req.task == TaskKind::pair_align) {
      if (req.pairs.empty()) throw bad_request("pair_align session needs pairs");
      for (const auto& p : req.pairs) {
        if (std::find(groups.begin(), groups.end(), p.group) == groups.end()) groups.push_back(p.group);
        pending.push_back({p.group,
                           {{"group", p.group}, {"mcs", p.mcs}, {"a_feature", p.a.value("feature", 0)}, {"b_feature", p.b.value("feature", 0)}},
                           {{"a", detail::card_contexts(p.a, req.raw_display)},
                            {"b", detail::card_contexts(p.b, req.raw_display)},
                            {"text_overlap", detail::text_overlap(p.a, p.b)}}});
      }
    } else {
      if (req.sets.empty()) throw bad_request("session needs at least one dossier set");
      if (req.per_coder < 1) throw bad_request("per_coder must be at least 1");
      for (std::size_t si = 0; si < req.sets.size(); ++si) {
        const auto& set = req.sets[si];
        if (std::find(groups.begin(), groups.end(), set.coder) != groups.end()) throw bad_request("dossier set '" + set.coder + "' given twice");
        if (req.task == TaskKind::origin &&
            std::find(origin_labels().begin(), origin_labels().end(), set.coder) == origin_labels().end())
          throw bad_request("origin sessions take sets labelled ffkv, topk_ffkv, sae or transcoder; got '" + set.coder + "'");
        if (set.dossiers.size() < req.per_coder)
          throw bad_request("dossier set '" + set.coder + "' holds " + std::to_string(set.dossiers.size()) + " features, " +
                            std::to_string(req.per_coder) + " requested");
        groups.push_back(set.coder);
        std::vector<std::size_t> idx(set.dossiers.size());
        std::iota(idx.begin(), idx.end(), 0);
        RngStream rng(req.seed, 0x73616d70ULL + si);
        for (std::size_t i = 0; i < req.per_coder; ++i) {
          std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
          const auto& d = set.dossiers[idx[i]];
          pending.push_back({set.coder, {{"coder", set.coder}, {"feature", d.value("feature", 0)}},
                             {{"contexts", detail::card_contexts(d, req.raw_display)}}});
        }
      }
    }
    RngStream shuffle(req.seed, 0x73687566ULL);
    for (std::size_t i = pending.size(); i > 1; --i) std::swap(pending[i - 1], pending[shuffle.below(i)]);

    const std::string sid =
        "s" + sha256_hex(nlohmann::json{{"n", sessions_.size()}, {"seed", req.seed}, {"task", to_string(req.task)}, {"cards", pending.size()}}.dump())
                  .substr(0, 16);
    nlohmann::json cards = nlohmann::json::array();
    for (std::size_t i = 0; i < pending.size(); ++i) {
      const std::string cid = "c" + sha256_hex(sid + ":" + std::to_string(i)).substr(0, 16);
      auto payload = pending[i].payload;
      payload["id"] = cid;
      payload["display"] = req.raw_display ? "raw" : "normalized";
      cards.push_back({{"id", cid}, {"group", pending[i].group}, {"provenance", pending[i].provenance}, {"payload", payload}});
    }
    return {{"type", "session"}, {"id", sid}, {"task", to_string(req.task)}, {"seed", req.seed}, {"raw_display", req.raw_display},
            {"groups", groups}, {"annotator", req.annotator}, {"time", clock_()}, {"cards", cards}};
  }

  void apply(const nlohmann::json& rec) {
    const auto type = rec.at("type").get<std::string>();
    if (type == "session") {
      Session s;
      s.id = rec.at("id").get<std::string>();
      s.task = task_kind_from_string(rec.at("task").get<std::string>());
      s.seed = rec.at("seed").get<std::uint64_t>();
      s.raw_display = rec.at("raw_display").get<bool>();
      s.groups = rec.at("groups").get<std::vector<std::string>>();
      for (const auto& c : rec.at("cards")) {
        s.card_index[c.at("id").get<std::string>()] = s.cards.size();
        card_owner_[c.at("id").get<std::string>()] = s.id;
        s.cards.push_back({c.at("id").get<std::string>(), c.at("group").get<std::string>(), c.at("provenance"), c.at("payload")});
      }
      order_.push_back(s.id);
      sessions_[s.id] = std::move(s);
    } else if (type == "annotation") {
      auto& s = sessions_.at(rec.at("session").get<std::string>());
      auto& a = s.answers[rec.at("card").get<std::string>()];
      a.value = rec.at("answer").get<std::string>();
      a.annotator = rec.value("annotator", std::string());
      a.time = rec.value("time", std::string());
      ++a.submissions;
    } else if (type == "close") {
      sessions_.at(rec.at("session").get<std::string>()).closed = true;
    } else {
      throw Error("annotation log: unknown record type '" + type + "'");
    }
  }

  static nlohmann::json stats_of(const Session& s) {
    nlohmann::json rows = nlohmann::json::array();
    std::map<std::string, std::map<std::string, std::size_t>> counts;  // group -> answer -> n
    std::map<std::string, std::size_t> cards_per_group, unanswered;
    for (const auto& c : s.cards) {
      ++cards_per_group[c.group];
      auto it = s.answers.find(c.id);
      if (it == s.answers.end())
        ++unanswered[c.group];
      else
        ++counts[c.group][it->second.value];
    }
    for (const auto& g : s.groups) {
      nlohmann::json row{{"group", g}, {"cards", cards_per_group[g]}, {"unannotated", unanswered[g]}};
      for (const auto& label : answer_labels(s.task)) row[label] = counts[g][label];
      if (s.task == TaskKind::origin) {
        const std::size_t answered = cards_per_group[g] - unanswered[g];
        row["correct"] = counts[g][g];
        row["accuracy"] = answered ? static_cast<double>(counts[g][g]) / static_cast<double>(answered) : 0.0;
      }
      rows.push_back(row);
    }
    return {{"session", s.id}, {"task", to_string(s.task)}, {"complete", s.complete()}, {"annotated", s.answers.size()},
            {"total", s.cards.size()}, {"rows", rows}};
  }

  mutable std::mutex mu_;
  AppendLog log_;
  Clock clock_ = detail::utc_now;
  std::map<std::string, Session> sessions_;
  std::vector<std::string> order_;
  std::map<std::string, std::string> card_owner_;
};

// Plain-text table for a stats payload: category counts, origin accuracies or
// pair verdicts, one row per group.
inline std::string render_stats_table(const nlohmann::json& stats) {
  const auto task = task_kind_from_string(stats.at("task").get<std::string>());
  std::ostringstream os;
  const auto& labels = answer_labels(task);
  os << "group";
  if (task == TaskKind::origin)
    os << "\taccuracy\tcorrect\tcards";
  else
    for (const auto& l : labels) os << '\t' << l;
  os << '\n';
  for (const auto& r : stats.at("rows")) {
    os << r.at("group").get<std::string>();
    if (task == TaskKind::origin) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.2f", r.at("accuracy").get<double>());
      os << '\t' << buf << '\t' << r.at("correct").get<std::size_t>() << '\t' << r.at("cards").get<std::size_t>();
    } else {
      for (const auto& l : labels) os << '\t' << r.at(l).get<std::size_t>();
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace ffkv
