#include "dialm/adapters.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

#include "json.hpp"

namespace dialm {

namespace {

using ordered_json = nlohmann::ordered_json;

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string squash_whitespace(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += c;
  }
  return out;
}

bool is_filled(const std::string& v) {
  return !v.empty() && v != "not mentioned" && v != "none";
}

DialogueState belief_state(const ordered_json& metadata) {
  DialogueState state;
  if (!metadata.is_object()) return state;
  for (const auto& [domain, info] : metadata.items()) {
    if (!info.is_object()) continue;
    const std::string dom = lower(domain);
    if (auto semi = info.find("semi"); semi != info.end() && semi->is_object()) {
      for (const auto& [slot, value] : semi->items()) {
        if (!value.is_string()) continue;
        const std::string v = lower(value.get<std::string>());
        if (is_filled(v)) state[{dom, lower(slot)}] = v;
      }
    }
    if (auto book = info.find("book"); book != info.end() && book->is_object()) {
      for (const auto& [slot, value] : book->items()) {
        if (slot == "booked" || !value.is_string()) continue;
        const std::string v = lower(value.get<std::string>());
        if (is_filled(v)) state[{dom, "book " + lower(slot)}] = v;
      }
    }
  }
  return state;
}

}  // namespace

std::vector<Dialogue> MultiWozAdapter::load(const std::filesystem::path& dir) const {
  const auto path = dir / "data.json";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("multiwoz adapter: cannot open " + path.string());
  ordered_json root;
  try {
    root = ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw CorpusError("multiwoz adapter: " + path.string() + ": " + e.what());
  }
  if (!root.is_object()) throw CorpusError("multiwoz adapter: top level must be an object");

  std::vector<Dialogue> out;
  for (const auto& [raw_id, body] : root.items()) {
    auto log = body.find("log");
    if (log == body.end() || !log->is_array()) {
      throw CorpusError("multiwoz adapter: dialogue '" + raw_id + "' has no log array");
    }
    Dialogue d;
    d.id = raw_id;
    if (d.id.size() > 5 && d.id.ends_with(".json")) d.id.resize(d.id.size() - 5);

    for (std::size_t i = 0; i < log->size(); ++i) {
      const auto& entry = (*log)[i];
      const std::string text = squash_whitespace(entry.value("text", std::string{}));
      if (text.empty()) continue;
      Turn t;
      t.speaker = i % 2 == 0 ? Speaker::user : Speaker::system;
      t.text = text;
      if (auto acts = entry.find("dialog_act"); acts != entry.end() && acts->is_object()) {
        std::set<std::string> labels;
        for (const auto& [act, _] : acts->items()) labels.insert(lower(act));
        t.acts = std::move(labels);
        for (const auto& a : *t.acts) {
          const auto dash = a.find('-');
          if (dash != std::string::npos && a.substr(0, dash) != "general") {
            d.domains.insert(a.substr(0, dash));
          }
        }
      }
      if (t.speaker == Speaker::user && i + 1 < log->size()) {
        if (auto md = (*log)[i + 1].find("metadata"); md != (*log)[i + 1].end()) {
          t.state = belief_state(*md);
          for (const auto& [key, _] : *t.state) d.domains.insert(key.domain);
        }
      }
      d.turns.push_back(std::move(t));
    }
    if (d.turns.empty()) continue;
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<Dialogue> UnifiedAdapter::load(const std::filesystem::path& dir) const {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".jsonl") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<Dialogue> out;
  std::set<std::string> ids;
  for (const auto& f : files) {
    for (auto& d : load_unified(f)) {
      if (!ids.insert(d.id).second) {
        throw CorpusError("duplicate dialogue id '" + d.id + "' in " + f.string());
      }
      out.push_back(std::move(d));
    }
  }
  return out;
}

std::vector<std::string> adapter_names() { return {"multiwoz", "unified"}; }

std::unique_ptr<CorpusAdapter> make_adapter(std::string_view name) {
  if (name == "multiwoz") return std::make_unique<MultiWozAdapter>();
  if (name == "unified") return std::make_unique<UnifiedAdapter>();
  throw CorpusError("unknown adapter '" + std::string(name) + "'");
}

}  // namespace dialm
