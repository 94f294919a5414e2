#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace dialm {

class CorpusError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class Speaker { user, system };

std::string_view to_string(Speaker s);

/// (domain, slot) pair; serialized as "domain-slot".
struct SlotKey {
  std::string domain;
  std::string slot;

  std::string str() const { return domain + "-" + slot; }
  /// Splits at the first '-'. Throws CorpusError when there is none.
  static SlotKey parse(std::string_view key);

  auto operator<=>(const SlotKey&) const = default;
};

using DialogueState = std::map<SlotKey, std::string>;

struct Turn {
  Speaker speaker = Speaker::user;
  std::string text;
  std::optional<std::set<std::string>> acts;
  std::optional<DialogueState> state;
  std::optional<std::string> intent;

  bool operator==(const Turn&) const = default;
};

struct Dialogue {
  std::string id;
  std::set<std::string> domains;
  std::vector<Turn> turns;

  bool operator==(const Dialogue&) const = default;
};

struct CorpusStats {
  std::size_t num_dialogues = 0;
  std::size_t num_utterances = 0;
  double avg_turns = 0.0;  // rounded to one decimal
  std::size_t num_domains = 0;
};

// Unified line-delimited format: one JSON object per line,
//   {"id":..., "domains":[...], "turns":[{"speaker":"user"|"system","text":...,
//    "acts":[...]?, "state":{"domain-slot":value}?, "intent":...?}]}

/// Parses one record. `line_no` is only used in error messages.
Dialogue parse_dialogue(std::string_view line, std::size_t line_no = 0);

/// Canonical single-line serialization (keys in fixed order, sets sorted).
std::string serialize_dialogue(const Dialogue& d);

std::vector<Dialogue> read_unified(std::istream& in);
std::vector<Dialogue> load_unified(const std::filesystem::path& path);
void write_unified(std::ostream& out, const std::vector<Dialogue>& dialogues);
void write_unified(const std::filesystem::path& path, const std::vector<Dialogue>& dialogues);

/// Merges consecutive same-speaker turns (texts joined by one space, annotations unioned).
Dialogue normalize_speakers(const Dialogue& d);

CorpusStats compute_stats(const std::vector<Dialogue>& dialogues);

struct SplitRatios {
  double train = 0.8;
  double dev = 0.1;
  double test = 0.1;
};

struct CorpusSplit {
  std::vector<Dialogue> train;
  std::vector<Dialogue> dev;
  std::vector<Dialogue> test;
};

/// Seeded shuffle, then dev/test sizes are floor(ratio * n); the remainder goes to train.
CorpusSplit split_corpus(const std::vector<Dialogue>& dialogues, SplitRatios ratios,
                         std::uint64_t seed);

/// Rewrites act labels through `mapping` (e.g. "taxi-inform" -> "inform"); unmapped labels kept.
void map_act_labels(std::vector<Dialogue>& dialogues,
                    const std::map<std::string, std::string>& mapping);

/// Strips a "domain-" prefix from every act label.
std::map<std::string, std::string> domain_stripping_act_map(const std::vector<Dialogue>& dialogues);

}  // namespace dialm
