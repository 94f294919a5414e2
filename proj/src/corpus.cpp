#include "dialm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dialm/rng.hpp"
#include "json.hpp"

namespace dialm {

using ordered_json = nlohmann::ordered_json;

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n\f\v");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n\f\v");
  return std::string(s.substr(first, last - first + 1));
}

[[noreturn]] void fail(std::size_t line_no, std::string_view field, std::string_view what) {
  std::ostringstream msg;
  msg << "line " << line_no << ": field '" << field << "': " << what;
  throw CorpusError(msg.str());
}

std::string require_string(const ordered_json& obj, const char* field, std::size_t line_no) {
  auto it = obj.find(field);
  if (it == obj.end()) fail(line_no, field, "missing");
  if (!it->is_string()) fail(line_no, field, "expected string");
  return it->get<std::string>();
}

Turn parse_turn(const ordered_json& j, std::size_t line_no) {
  if (!j.is_object()) fail(line_no, "turns", "each turn must be an object");
  Turn t;
  const std::string speaker = require_string(j, "speaker", line_no);
  if (speaker == "user") {
    t.speaker = Speaker::user;
  } else if (speaker == "system") {
    t.speaker = Speaker::system;
  } else {
    fail(line_no, "speaker", "must be \"user\" or \"system\", got \"" + speaker + "\"");
  }
  t.text = require_string(j, "text", line_no);
  if (trim(t.text).empty()) fail(line_no, "text", "empty after trimming");

  if (auto it = j.find("acts"); it != j.end()) {
    if (!it->is_array()) fail(line_no, "acts", "expected array of strings");
    std::set<std::string> acts;
    for (const auto& a : *it) {
      if (!a.is_string()) fail(line_no, "acts", "expected array of strings");
      acts.insert(a.get<std::string>());
    }
    t.acts = std::move(acts);
  }
  if (auto it = j.find("state"); it != j.end()) {
    if (!it->is_object()) fail(line_no, "state", "expected object of \"domain-slot\": value");
    DialogueState state;
    for (const auto& [key, value] : it->items()) {
      if (!value.is_string()) fail(line_no, "state", "value for '" + key + "' must be a string");
      try {
        state[SlotKey::parse(key)] = value.get<std::string>();
      } catch (const CorpusError& e) {
        fail(line_no, "state", e.what());
      }
    }
    t.state = std::move(state);
  }
  if (auto it = j.find("intent"); it != j.end()) {
    if (!it->is_string()) fail(line_no, "intent", "expected string");
    t.intent = it->get<std::string>();
  }
  return t;
}

template <typename T>
void union_into(std::optional<T>& dst, const std::optional<T>& src) {
  if (!src) return;
  if (!dst) {
    dst = src;
    return;
  }
  for (const auto& v : *src) dst->insert(v);
}

}  // namespace

std::string_view to_string(Speaker s) { return s == Speaker::user ? "user" : "system"; }

SlotKey SlotKey::parse(std::string_view key) {
  const auto dash = key.find('-');
  if (dash == std::string_view::npos || dash == 0 || dash + 1 == key.size()) {
    throw CorpusError("slot key '" + std::string(key) + "' is not of the form domain-slot");
  }
  return {std::string(key.substr(0, dash)), std::string(key.substr(dash + 1))};
}

Dialogue parse_dialogue(std::string_view line, std::size_t line_no) {
  ordered_json j;
  try {
    j = ordered_json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    fail(line_no, "<record>", std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) fail(line_no, "<record>", "expected a JSON object");

  Dialogue d;
  d.id = require_string(j, "id", line_no);
  if (d.id.empty()) fail(line_no, "id", "empty");

  auto domains = j.find("domains");
  if (domains == j.end()) fail(line_no, "domains", "missing");
  if (!domains->is_array()) fail(line_no, "domains", "expected array of strings");
  for (const auto& dom : *domains) {
    if (!dom.is_string()) fail(line_no, "domains", "expected array of strings");
    d.domains.insert(dom.get<std::string>());
  }

  auto turns = j.find("turns");
  if (turns == j.end()) fail(line_no, "turns", "missing");
  if (!turns->is_array()) fail(line_no, "turns", "expected array");
  if (turns->empty()) fail(line_no, "turns", "dialogue has no turns");
  for (const auto& t : *turns) d.turns.push_back(parse_turn(t, line_no));
  return d;
}

std::string serialize_dialogue(const Dialogue& d) {
  ordered_json j;
  j["id"] = d.id;
  j["domains"] = ordered_json::array();
  for (const auto& dom : d.domains) j["domains"].push_back(dom);
  j["turns"] = ordered_json::array();
  for (const auto& t : d.turns) {
    ordered_json tj;
    tj["speaker"] = std::string(to_string(t.speaker));
    tj["text"] = t.text;
    if (t.acts) {
      tj["acts"] = ordered_json::array();
      for (const auto& a : *t.acts) tj["acts"].push_back(a);
    }
    if (t.state) {
      tj["state"] = ordered_json::object();
      for (const auto& [k, v] : *t.state) tj["state"][k.str()] = v;
    }
    if (t.intent) tj["intent"] = *t.intent;
    j["turns"].push_back(std::move(tj));
  }
  return j.dump();
}

std::vector<Dialogue> read_unified(std::istream& in) {
  std::vector<Dialogue> out;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    Dialogue d = parse_dialogue(line, line_no);
    if (!seen.insert(d.id).second) {
      throw CorpusError("line " + std::to_string(line_no) + ": duplicate dialogue id '" + d.id +
                        "'");
    }
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<Dialogue> load_unified(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot open " + path.string());
  return read_unified(in);
}

void write_unified(std::ostream& out, const std::vector<Dialogue>& dialogues) {
  for (const auto& d : dialogues) out << serialize_dialogue(d) << '\n';
}

void write_unified(const std::filesystem::path& path, const std::vector<Dialogue>& dialogues) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CorpusError("cannot write " + path.string());
  write_unified(out, dialogues);
  if (!out) throw CorpusError("write failed: " + path.string());
}

Dialogue normalize_speakers(const Dialogue& d) {
  Dialogue out{d.id, d.domains, {}};
  for (const auto& t : d.turns) {
    if (out.turns.empty() || out.turns.back().speaker != t.speaker) {
      out.turns.push_back(t);
      continue;
    }
    Turn& prev = out.turns.back();
    prev.text += ' ';
    prev.text += t.text;
    union_into(prev.acts, t.acts);
    if (t.state) {
      if (!prev.state) prev.state.emplace();
      // The later turn's value wins for a slot mentioned in both.
      for (const auto& [k, v] : *t.state) (*prev.state)[k] = v;
    }
    if (!prev.intent) prev.intent = t.intent;
  }
  return out;
}

CorpusStats compute_stats(const std::vector<Dialogue>& dialogues) {
  if (dialogues.empty()) throw CorpusError("empty corpus");
  CorpusStats s;
  std::set<std::string> domains;
  s.num_dialogues = dialogues.size();
  for (const auto& d : dialogues) {
    s.num_utterances += d.turns.size();
    domains.insert(d.domains.begin(), d.domains.end());
  }
  s.num_domains = domains.size();
  const double avg = static_cast<double>(s.num_utterances) / static_cast<double>(s.num_dialogues);
  s.avg_turns = std::round(avg * 10.0) / 10.0;
  return s;
}

CorpusSplit split_corpus(const std::vector<Dialogue>& dialogues, SplitRatios ratios,
                         std::uint64_t seed) {
  if (!(ratios.train > 0.0 && ratios.dev > 0.0 && ratios.test > 0.0)) {
    throw CorpusError("split ratios must all be positive");
  }
  if (std::abs(ratios.train + ratios.dev + ratios.test - 1.0) > 1e-9) {
    throw CorpusError("split ratios must sum to 1");
  }
  const std::size_t n = dialogues.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed({seed, 0x5B117}));
  rng.shuffle(order);

  // 1e-9 absorbs representation error such as 0.29 * 100 = 28.999999999999996.
  const auto floor_count = [n](double r) {
    return static_cast<std::size_t>(std::floor(r * static_cast<double>(n) + 1e-9));
  };
  const std::size_t n_dev = floor_count(ratios.dev);
  const std::size_t n_test = floor_count(ratios.test);
  const std::size_t n_train = n - n_dev - n_test;

  CorpusSplit split;
  for (std::size_t i = 0; i < n; ++i) {
    const Dialogue& d = dialogues[order[i]];
    if (i < n_train) {
      split.train.push_back(d);
    } else if (i < n_train + n_dev) {
      split.dev.push_back(d);
    } else {
      split.test.push_back(d);
    }
  }
  return split;
}

void map_act_labels(std::vector<Dialogue>& dialogues,
                    const std::map<std::string, std::string>& mapping) {
  for (auto& d : dialogues) {
    for (auto& t : d.turns) {
      if (!t.acts) continue;
      std::set<std::string> mapped;
      for (const auto& a : *t.acts) {
        auto it = mapping.find(a);
        mapped.insert(it == mapping.end() ? a : it->second);
      }
      t.acts = std::move(mapped);
    }
  }
}

std::map<std::string, std::string> domain_stripping_act_map(
    const std::vector<Dialogue>& dialogues) {
  std::map<std::string, std::string> mapping;
  for (const auto& d : dialogues) {
    for (const auto& t : d.turns) {
      if (!t.acts) continue;
      for (const auto& a : *t.acts) {
        const auto dash = a.find('-');
        if (dash != std::string::npos && dash + 1 < a.size()) mapping[a] = a.substr(dash + 1);
      }
    }
  }
  return mapping;
}

}  // namespace dialm
