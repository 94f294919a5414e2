#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "dialm/corpus.hpp"

namespace dialm {

/// Converts one external corpus layout into unified dialogues.
class CorpusAdapter {
public:
  virtual ~CorpusAdapter() = default;
  virtual std::string name() const = 0;
  virtual std::vector<Dialogue> load(const std::filesystem::path& dir) const = 0;
};

/// Reads `<dir>/data.json` in the MultiWOZ 2.x layout: an object of
/// dialogue-id -> {"goal", "log"}, where even log entries are user turns and odd
/// entries are system turns whose "metadata" carries the belief state after the
/// preceding user turn. "dialog_act" keys become lower-cased act labels.
class MultiWozAdapter final : public CorpusAdapter {
public:
  std::string name() const override { return "multiwoz"; }
  std::vector<Dialogue> load(const std::filesystem::path& dir) const override;
};

/// Concatenates every `*.jsonl` file of `dir` (sorted by file name) that is
/// already in the unified format.
class UnifiedAdapter final : public CorpusAdapter {
public:
  std::string name() const override { return "unified"; }
  std::vector<Dialogue> load(const std::filesystem::path& dir) const override;
};

std::vector<std::string> adapter_names();

/// Throws CorpusError for an unknown name.
std::unique_ptr<CorpusAdapter> make_adapter(std::string_view name);

}  // namespace dialm
