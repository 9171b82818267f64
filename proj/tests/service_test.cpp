#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <thread>

#include "ffkv/service/fixture.hpp"
#include "ffkv/service/server.hpp"

using namespace ffkv;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kFour{"ffkv", "topk_ffkv", "sae", "transcoder"};

fs::path temp_log(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("ffkv_service_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const auto p = dir / (name + ".jsonl");
  fs::remove(p);
  return p;
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string l; std::getline(in, l);) n += !l.empty();
  return n;
}

AnnotationStore::Clock fixed_clock() {
  return [] { return std::string("2026-01-01T00:00:00Z"); };
}

// Answers every card of a session with f(card_json, nth card of its planted set).
template <class F>
void annotate_all(AnnotationStore& store, const std::string& sid, F&& f) {
  std::vector<std::size_t> seen(8, 0);
  const auto listing = store.list_cards(sid);
  for (const auto& c : listing["cards"]) {
    const auto card = store.get_card(c["id"]);
    const std::size_t set = planted_set_of(card);
    store.submit({{"session", sid}, {"card", c["id"]}, {"answer", f(card, set, seen[set]++)}, {"annotator", "a1"}});
  }
}

}  // namespace

TEST(Session, CreatesShuffledBlindCards) {
  AnnotationStore store;
  const auto made = store.create_session(planted_session_request(TaskKind::categorize, kFour, 60, 50, 7));
  EXPECT_EQ(made["cards"], 200);
  EXPECT_TRUE(coder_kind_mentions(made.dump()).empty());
  const auto listing = store.list_cards(made["session"]);
  ASSERT_EQ(listing["cards"].size(), 200u);
  // globally shuffled: the first 50 cards are not all from one set
  std::set<std::size_t> sets;
  for (std::size_t i = 0; i < 50; ++i) sets.insert(planted_set_of(store.get_card(listing["cards"][i]["id"])));
  EXPECT_GT(sets.size(), 1u);
}

TEST(Session, SameSeedSameLayout) {
  AnnotationStore a, b, c;
  auto order = [](AnnotationStore& s, std::uint64_t seed) {
    const auto sid = s.create_session(planted_session_request(TaskKind::categorize, kFour, 60, 50, seed))["session"].get<std::string>();
    std::vector<std::string> out;
    const auto listing = s.list_cards(sid);
    for (const auto& card : listing["cards"]) out.push_back(s.get_card(card["id"])["contexts"].dump());
    return out;
  };
  EXPECT_EQ(order(a, 3), order(b, 3));
  EXPECT_NE(order(a, 3), order(c, 4));
}

TEST(Session, OversizedSampleNamesThePool) {
  AnnotationStore store;
  try {
    store.create_session(planted_session_request(TaskKind::categorize, {"tiny"}, 3, 5, 1));
    FAIL() << "expected an error";
  } catch (const ServiceError& e) {
    EXPECT_EQ(e.status, 400);
    EXPECT_NE(std::string(e.what()).find("'tiny' holds 3"), std::string::npos);
  }
  auto req = planted_session_request(TaskKind::origin, {"norm_ffkv"}, 3, 1, 1);
  EXPECT_THROW(store.create_session(req), ServiceError);
}

TEST(Card, PlantedKeywordAndDisplayNormalization) {
  AnnotationStore store;
  auto req = planted_session_request(TaskKind::categorize, {"x"}, 1, 1, 2);
  const auto sid = store.create_session(req)["session"].get<std::string>();
  const auto card = store.get_card(store.list_cards(sid)["cards"][0]["id"]);
  ASSERT_EQ(card["contexts"].size(), 10u);
  double top = 0.0;
  for (const auto& c : card["contexts"]) {
    const auto peak = c["peak"].get<std::size_t>();
    EXPECT_EQ(c["tokens"][peak], "k0_0");
    for (double a : c["activations"]) top = std::max(top, a);
  }
  EXPECT_DOUBLE_EQ(top, 1.0);
  EXPECT_EQ(card["display"], "normalized");
  // order preserved: peaks descend
  EXPECT_GT(card["contexts"][0]["activations"][card["contexts"][0]["peak"].get<std::size_t>()].get<double>(),
            card["contexts"][9]["activations"][card["contexts"][9]["peak"].get<std::size_t>()].get<double>());

  req.raw_display = true;
  req.sets[0].dossiers[0]["contexts"][0]["activations"][0] = 7.5;
  const auto sid2 = store.create_session(req)["session"].get<std::string>();
  const auto raw = store.get_card(store.list_cards(sid2)["cards"][0]["id"]);
  EXPECT_EQ(raw["display"], "raw");
  EXPECT_DOUBLE_EQ(raw["contexts"][0]["activations"][0].get<double>(), 7.5);
  EXPECT_THROW(store.get_card("cmissing"), ServiceError);
}

TEST(Annotation, PersistDuplicateAndErrors) {
  const auto log = temp_log("annot");
  AnnotationStore store(log, fixed_clock());
  const auto sid = store.create_session(planted_session_request(TaskKind::categorize, {"a", "b"}, 4, 2, 1))["session"].get<std::string>();
  const auto cid = store.list_cards(sid)["cards"][0]["id"].get<std::string>();
  const nlohmann::json rec{{"session", sid}, {"card", cid}, {"answer", "conceptual"}};
  EXPECT_FALSE(store.submit(rec)["duplicate"].get<bool>());
  EXPECT_TRUE(store.submit(rec)["duplicate"].get<bool>());
  EXPECT_EQ(store.get_card(cid)["answer"], "conceptual");
  EXPECT_EQ(store.list_cards(sid)["annotated"], 1);
  EXPECT_EQ(line_count(log), 3u);  // session + two annotation lines
  store.submit({{"session", sid}, {"card", cid}, {"answer", "superficial"}});
  EXPECT_EQ(store.get_card(cid)["answer"], "superficial");

  auto status = [&](const nlohmann::json& body) {
    try {
      store.submit(body);
    } catch (const ServiceError& e) {
      return e.status;
    }
    return 200;
  };
  EXPECT_EQ(status({{"session", sid}, {"card", cid}, {"answer", "sae"}}), 400);  // origin guess on a categorize session
  EXPECT_EQ(status({{"session", sid}, {"card", "cnope"}, {"answer", "conceptual"}}), 404);
  EXPECT_EQ(status({{"session", "snope"}, {"card", cid}, {"answer", "conceptual"}}), 404);
  EXPECT_EQ(status({{"session", sid}}), 400);
  store.stats(sid, true);  // closes
  EXPECT_EQ(status(rec), 409);
}

TEST(Stats, AllConceptualAndAllCorrect) {
  AnnotationStore store;
  const auto sid = store.create_session(planted_session_request(TaskKind::categorize, kFour, 50, 50, 5))["session"].get<std::string>();
  EXPECT_THROW(store.stats(sid, false), ServiceError);
  annotate_all(store, sid, [](auto&, std::size_t, std::size_t) { return "conceptual"; });
  const auto st = store.stats(sid, false);
  ASSERT_EQ(st["rows"].size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(st["rows"][i]["group"], kFour[i]);
    EXPECT_EQ(st["rows"][i]["superficial"], 0);
    EXPECT_EQ(st["rows"][i]["conceptual"], 50);
    EXPECT_EQ(st["rows"][i]["uninterpretable"], 0);
  }

  const auto oid = store.create_session(planted_session_request(TaskKind::origin, kFour, 50, 50, 5))["session"].get<std::string>();
  annotate_all(store, oid, [](auto&, std::size_t set, std::size_t) { return kFour[set]; });
  const auto ost = store.stats(oid, false);
  for (const auto& r : ost["rows"]) EXPECT_EQ(r["accuracy"].get<double>(), 1.0);
}

TEST(Stats, ScriptedOriginAnnotatorReproducesAccuracies) {
  AnnotationStore store;
  const auto sid = store.create_session(planted_session_request(TaskKind::origin, kFour, 100, 100, 11))["session"].get<std::string>();
  annotate_all(store, sid, [](auto&, std::size_t set, std::size_t nth) { return scripted_origin_answer(set, nth); });
  const auto st = store.stats(sid, false);
  const std::vector<double> want{0.86, 0.28, 0.13, 0.18};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(st["rows"][i]["accuracy"].get<double>(), want[i]) << kFour[i];
  const auto table = render_stats_table(st);
  EXPECT_NE(table.find("ffkv\t0.86\t86\t100"), std::string::npos);
  const auto rev = store.reveal(sid);
  EXPECT_EQ(rev["cards"].size(), 400u);
}

TEST(Persistence, ReplayReproducesStatsByteForByte) {
  const auto log = temp_log("replay");
  std::string live, live_origin;
  std::string sid, oid;
  {
    AnnotationStore store(log, fixed_clock());
    sid = store.create_session(planted_session_request(TaskKind::categorize, kFour, 60, 50, 9))["session"].get<std::string>();
    annotate_all(store, sid, [](auto&, std::size_t set, std::size_t nth) { return category_labels()[(set + nth) % 3]; });
    oid = store.create_session(planted_session_request(TaskKind::origin, kFour, 100, 100, 3))["session"].get<std::string>();
    annotate_all(store, oid, [](auto&, std::size_t set, std::size_t nth) { return scripted_origin_answer(set, nth); });
    live = store.stats(sid, false).dump();
    live_origin = store.stats(oid, false).dump();
  }
  AnnotationStore replayed(log, fixed_clock());
  EXPECT_EQ(replayed.peek_stats(sid).dump(), live);
  EXPECT_EQ(replayed.peek_stats(oid).dump(), live_origin);
  EXPECT_EQ(replayed.session_ids(), (std::vector<std::string>{sid, oid}));

  // a torn tail is dropped, a bad middle line is corruption
  { std::ofstream(log, std::ios::app) << "{\"type\":\"annot"; }
  EXPECT_EQ(AnnotationStore(log, fixed_clock()).peek_stats(sid).dump(), live);
  { std::ofstream(log, std::ios::app) << "\n{\"type\":\"close\",\"session\":\"" << sid << "\"}\n"; }
  EXPECT_THROW(AnnotationStore(log, fixed_clock()), Error);
}

TEST(PairAlign, OverlapAndVerdicts) {
  AnnotationStore store;
  SessionRequest req;
  req.task = TaskKind::pair_align;
  const auto filler = fixture_words("w0_", 10);
  auto a = planted_dossier(1, "k", filler, 1.0, 1), b = planted_dossier(2, "k", filler, 2.0, 2);
  for (std::size_t i = 0; i < 8; ++i) b["contexts"][i]["text_id"] = a["contexts"][i]["text_id"];
  req.pairs = {{"transcoder->ffkv bin 9", 0.95, a, b}, {"transcoder->ffkv bin 0", 0.05, a, planted_dossier(3, "z", filler, 1.0, 3)}};
  const auto sid = store.create_session(req)["session"].get<std::string>();
  const auto listing = store.list_cards(sid);
  EXPECT_TRUE(coder_kind_mentions(listing.dump()).empty());
  std::size_t overlaps = 0;
  for (const auto& c : listing["cards"]) {
    const auto card = store.get_card(c["id"]);
    EXPECT_TRUE(coder_kind_mentions(card.dump()).empty());
    const auto n = card["text_overlap"].get<std::size_t>();
    overlaps += n;
    store.submit({{"session", sid}, {"card", c["id"]}, {"answer", n >= 8 ? "matched" : "unmatched"}});
  }
  EXPECT_EQ(overlaps, 8u);
  const auto st = store.stats(sid, false);
  EXPECT_EQ(st["rows"][0]["matched"], 1);
  EXPECT_EQ(st["rows"][1]["unmatched"], 1);
}

// Crawls every endpoint an annotator can reach before completion and greps
// each response body for coder-kind identifiers.
TEST(Http, BlindingCrawlReplayAndTable) {
  const auto log = temp_log("http");
  AnnotationStore store(log, fixed_clock());
  AnnotationServer server(store);
  const int port = server.bind_any();
  std::thread th([&] { server.listen_after_bind(); });
  struct Joiner {
    AnnotationServer& s;
    std::thread& t;
    ~Joiner() {
      s.stop();
      t.join();
    }
  } joiner{server, th};
  server.wait_until_ready();
  httplib::Client cli("127.0.0.1", port);

  std::vector<std::string> bodies;
  auto keep = [&](const httplib::Result& r) -> httplib::Response {
    EXPECT_TRUE(r);
    bodies.push_back(r->body);
    return *r;
  };

  for (const auto task : {TaskKind::categorize, TaskKind::origin}) {
    // 200 cards to categorize; the origin pattern needs 100 per coder
    const std::size_t per = task == TaskKind::origin ? 100 : 50;
    nlohmann::json req{{"task", to_string(task)}, {"per_coder", per}, {"seed", 21}};
    const auto src = planted_session_request(task, kFour, 100, per, 21);
    for (const auto& s : src.sets) req["sets"].push_back({{"coder", s.coder}, {"dossiers", s.dossiers}});
    const auto made = keep(cli.Post("/sessions", req.dump(), "application/json"));
    ASSERT_EQ(made.status, 201);
    const auto sid = nlohmann::json::parse(made.body)["session"].get<std::string>();
    EXPECT_EQ(keep(cli.Get("/sessions/" + sid + "/stats")).status, 409);
    EXPECT_EQ(keep(cli.Get("/sessions/" + sid + "/reveal")).status, 409);
    EXPECT_EQ(keep(cli.Get("/sessions/" + sid + "/stats?partial=maybe")).status, 400);
    const auto listing = nlohmann::json::parse(keep(cli.Get("/sessions/" + sid + "/cards")).body);
    ASSERT_EQ(listing["cards"].size(), 4 * per);
    std::vector<std::size_t> seen(4, 0);
    for (const auto& c : listing["cards"]) {
      const auto card = keep(cli.Get("/cards/" + c["id"].get<std::string>()));
      ASSERT_EQ(card.status, 200);
      const auto set = planted_set_of(nlohmann::json::parse(card.body));
      const std::string answer = task == TaskKind::origin ? scripted_origin_answer(set, seen[set]++) : "conceptual";
      nlohmann::json ann{{"session", sid}, {"card", c["id"]}, {"answer", answer}, {"annotator", "a1"}};
      EXPECT_EQ(keep(cli.Post("/annotations", ann.dump(), "application/json")).status, 200);
      keep(cli.Get("/cards/" + c["id"].get<std::string>()));  // re-read after answering
    }
    keep(cli.Get("/sessions/" + sid + "/cards"));
    EXPECT_EQ(keep(cli.Get("/cards/cmissing")).status, 404);
    EXPECT_EQ(keep(cli.Get("/sessions/snope/cards")).status, 404);
    EXPECT_EQ(keep(cli.Post("/annotations", "{not json", "application/json")).status, 400);

    for (const auto& b : bodies) {
      const auto hits = coder_kind_mentions(b);
      ASSERT_TRUE(hits.empty()) << hits.front() << " in " << b.substr(0, 200);
    }

    const auto stats = cli.Get("/sessions/" + sid + "/stats");
    ASSERT_EQ(stats->status, 200);
    EXPECT_FALSE(coder_kind_mentions(stats->body).empty());  // the scan does see names once revealed
    EXPECT_EQ(AnnotationStore(log, fixed_clock()).peek_stats(sid).dump(), stats->body);
    if (task == TaskKind::origin) {
      const auto st = nlohmann::json::parse(stats->body);
      EXPECT_EQ(st["rows"][0]["accuracy"].get<double>(), 0.86);
      EXPECT_EQ(st["rows"][3]["accuracy"].get<double>(), 0.18);
    }
    EXPECT_EQ(cli.Get("/sessions/" + sid + "/reveal")->status, 200);
    bodies.clear();
  }
}
