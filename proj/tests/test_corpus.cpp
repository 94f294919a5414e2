#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "dialm/adapters.hpp"
#include "dialm/corpus.hpp"
#include "dialm/synthetic.hpp"

using namespace dialm;
namespace fs = std::filesystem;

namespace {

const char* kRecord =
    R"({"id":"d1","domains":["hotel"],"turns":[{"speaker":"user","text":"i need a hotel","state":{"hotel-area":"north"},"intent":"find_hotel"},{"speaker":"system","text":"which price ?","acts":["hotel-request"]}]})";

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dialm_corpus_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Dialogue two_turns(std::string id, std::size_t turns) {
  Dialogue d;
  d.id = std::move(id);
  for (std::size_t i = 0; i < turns; ++i) {
    d.turns.push_back({i % 2 ? Speaker::system : Speaker::user, "t", {}, {}, {}});
  }
  return d;
}

}  // namespace

TEST_CASE("unified records round-trip byte for byte") {
  const Dialogue d = parse_dialogue(kRecord, 1);
  CHECK(d.id == "d1");
  REQUIRE(d.turns.size() == 2);
  CHECK(d.turns[0].state->at(SlotKey{"hotel", "area"}) == "north");
  CHECK(*d.turns[0].intent == "find_hotel");
  CHECK(d.turns[1].acts->count("hotel-request") == 1);
  CHECK(serialize_dialogue(d) == kRecord);
}

TEST_CASE("parse errors name the line and field") {
  const std::string bad = R"({"id":"x","domains":[],"turns":[{"speaker":"robot","text":"hi"}]})";
  try {
    parse_dialogue(bad, 7);
    FAIL("expected an error");
  } catch (const CorpusError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("line 7") != std::string::npos);
    CHECK(msg.find("speaker") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_dialogue("{not json", 2), CorpusError);
  CHECK_THROWS_AS(parse_dialogue(R"({"domains":[],"turns":[]})", 3), CorpusError);
}

TEST_CASE("duplicate ids are rejected") {
  std::stringstream in;
  in << kRecord << "\n\n" << kRecord << "\n";
  CHECK_THROWS_WITH_AS(read_unified(in), doctest::Contains("duplicate"), CorpusError);
}

TEST_CASE("write then read preserves dialogues") {
  const auto ds = generate_synthetic(3, 20);
  std::stringstream buf;
  write_unified(buf, ds);
  const auto back = read_unified(buf);
  CHECK(back == ds);
  std::stringstream again;
  write_unified(again, back);
  CHECK(again.str() == buf.str());
}

TEST_CASE("slot keys split at the first dash") {
  const SlotKey k = SlotKey::parse("hotel-book day");
  CHECK(k.domain == "hotel");
  CHECK(k.slot == "book day");
  CHECK(SlotKey::parse("taxi-leave-at").slot == "leave-at");
  CHECK_THROWS_AS(SlotKey::parse("nodash"), CorpusError);
}

TEST_CASE("consecutive same-speaker turns are merged") {
  Dialogue d;
  d.id = "m";
  d.turns.push_back({Speaker::user, "hello", std::set<std::string>{"a"}, DialogueState{{{"x", "y"}, "1"}}, "greet"});
  d.turns.push_back({Speaker::user, "there", std::set<std::string>{"b"}, DialogueState{{{"x", "y"}, "2"}}, "other"});
  d.turns.push_back({Speaker::system, "hi", {}, {}, {}});
  const Dialogue n = normalize_speakers(d);
  REQUIRE(n.turns.size() == 2);
  CHECK(n.turns[0].text == "hello there");
  CHECK(*n.turns[0].acts == std::set<std::string>{"a", "b"});
  CHECK(n.turns[0].state->at(SlotKey{"x", "y"}) == "2");
  CHECK(*n.turns[0].intent == "greet");
}

TEST_CASE("stats report counts and one-decimal average") {
  std::vector<Dialogue> ds{two_turns("a", 6), two_turns("b", 7), two_turns("c", 8)};
  const CorpusStats s = compute_stats(ds);
  CHECK(s.num_dialogues == 3);
  CHECK(s.num_utterances == 21);
  CHECK(s.avg_turns == doctest::Approx(7.0));
  CHECK_THROWS_AS(compute_stats({}), CorpusError);
}

TEST_CASE("split sizes follow the ratio floors and partition the corpus") {
  const auto ds = generate_synthetic(5, 57);
  const CorpusSplit s = split_corpus(ds, {0.8, 0.1, 0.1}, 9);
  CHECK(s.dev.size() == 5);
  CHECK(s.test.size() == 5);
  CHECK(s.train.size() == 47);
  std::set<std::string> ids;
  for (const auto* part : {&s.train, &s.dev, &s.test})
    for (const auto& d : *part) ids.insert(d.id);
  CHECK(ids.size() == 57);
  CHECK(split_corpus(ds, {0.8, 0.1, 0.1}, 9).dev == s.dev);
  CHECK_THROWS_AS(split_corpus(ds, {0.8, 0.3, 0.1}, 9), CorpusError);
  CHECK_THROWS_AS(split_corpus(ds, {1.0, 0.0, 0.0}, 9), CorpusError);
}

TEST_CASE("act labels can be stripped of their domain") {
  auto ds = generate_synthetic(2, 10);
  map_act_labels(ds, domain_stripping_act_map(ds));
  for (const auto& d : ds)
    for (const auto& t : d.turns)
      if (t.acts)
        for (const auto& a : *t.acts) CHECK(a.find('-') == std::string::npos);
}

TEST_CASE("multiwoz adapter reads acts, states and speakers") {
  const fs::path dir = scratch_dir("mwoz");
  std::ofstream(dir / "data.json") << R"({
    "PMUL1.json": {"goal": {}, "log": [
      {"text": "I need a  cheap hotel.", "metadata": {}, "dialog_act": {"Hotel-Inform": [["Price", "cheap"]]}},
      {"text": "Sure, which area?", "dialog_act": {"Hotel-Request": [["Area", "?"]]},
       "metadata": {"hotel": {"semi": {"pricerange": "cheap", "area": "not mentioned"}, "book": {"day": "Monday", "booked": []}}}},
      {"text": "Thanks, bye.", "metadata": {}},
      {"text": "Goodbye.", "dialog_act": {"general-bye": [["none", "none"]]}, "metadata": {}}
    ]}})";
  const auto ds = MultiWozAdapter().load(dir);
  REQUIRE(ds.size() == 1);
  const Dialogue& d = ds[0];
  CHECK(d.id == "PMUL1");
  REQUIRE(d.turns.size() == 4);
  CHECK(d.turns[0].speaker == Speaker::user);
  CHECK(d.turns[1].speaker == Speaker::system);
  CHECK(d.turns[0].text == "I need a cheap hotel.");
  CHECK(d.turns[0].state->at(SlotKey{"hotel", "pricerange"}) == "cheap");
  CHECK(d.turns[0].state->at(SlotKey{"hotel", "book day"}) == "monday");
  CHECK(d.turns[0].state->count(SlotKey{"hotel", "area"}) == 0);
  CHECK(d.turns[1].acts->count("hotel-request") == 1);
  CHECK(d.domains == std::set<std::string>{"hotel"});
  CHECK_THROWS_AS(MultiWozAdapter().load(dir / "missing"), CorpusError);
}

TEST_CASE("unified adapter concatenates jsonl files") {
  const fs::path dir = scratch_dir("unified");
  write_unified(dir / "a.jsonl", generate_synthetic(1, 3));
  write_unified(dir / "b.jsonl", generate_synthetic(2, 4));
  CHECK(make_adapter("unified")->load(dir).size() == 7);
  CHECK_THROWS_AS(make_adapter("nope"), CorpusError);
}

TEST_CASE("synthetic dialogues alternate speakers and are deterministic") {
  const auto a = generate_synthetic(11, 30);
  CHECK(a == generate_synthetic(11, 30));
  CHECK(a != generate_synthetic(12, 30));
  bool saw_oos = false, saw_multi = false;
  for (const auto& d : a) {
    CHECK(d.turns.size() >= 4);
    for (std::size_t i = 1; i < d.turns.size(); ++i) CHECK(d.turns[i].speaker != d.turns[i - 1].speaker);
    for (const auto& t : d.turns) {
      if (t.speaker == Speaker::user) {
        CHECK(t.intent.has_value());
        CHECK(t.state.has_value());
        if (*t.intent == kOutOfScopeIntent) saw_oos = true;
      } else {
        CHECK(t.acts.has_value());
      }
    }
    if (d.domains.size() > 1) saw_multi = true;
  }
  CHECK(saw_oos);
  CHECK(saw_multi);
  CHECK_THROWS(generate_synthetic(1, 0));
}
