#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dialm/corpus.hpp"

namespace dialm {

class TokenizerError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

using TokenId = std::int32_t;

/// Reserved special tokens; their ids are the enum values.
enum class Special : TokenId { pad = 0, unk, cls, sep, mask, usr, sys };
inline constexpr std::size_t kNumSpecials = 7;
inline constexpr std::array<std::string_view, kNumSpecials> kSpecialLiterals = {
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[USR]", "[SYS]"};

constexpr TokenId id_of(Special s) { return static_cast<TokenId>(s); }

/// Marker prepended to every word before subword segmentation.
inline constexpr std::string_view kWordStart = "\xE2\x96\x81";  // U+2581

/// Encoder input. All four vectors have equal length.
struct TokenSequence {
  std::vector<TokenId> ids;
  std::vector<TokenId> positions;
  std::vector<TokenId> segments;
  std::vector<std::uint8_t> attention_mask;

  std::size_t size() const { return ids.size(); }
  bool operator==(const TokenSequence&) const = default;
};

/// Builds a sequence from ids: positions 0..L-1, segments 0, mask 1 except on [PAD].
TokenSequence make_sequence(std::vector<TokenId> ids);

/// Appends [PAD] entries up to `length` (no-op when already that long).
void pad_to(TokenSequence& seq, std::size_t length);

class Vocab {
public:
  /// A vocabulary holding only the special tokens.
  Vocab();

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::optional<TokenId> find(std::string_view token) const;
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

  static bool is_special(TokenId id) { return id >= 0 && id < static_cast<TokenId>(kNumSpecials); }

  /// Appends a token (must be new); returns its id.
  TokenId add_token(std::string token);
  /// Appends a merge rule; the merged symbol must already be a token.
  void add_merge(std::string left, std::string right);

  /// Rank of a merge rule (lower applies first), if present.
  std::optional<std::size_t> merge_rank(std::string_view left, std::string_view right) const;

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_ && merges_ == o.merges_; }

private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::map<std::pair<std::string, std::string>, std::size_t, std::less<>> merge_index_;
};

/// Learns byte-pair-style merges over whitespace-split, lower-cased words.
/// Highest pair frequency wins; ties go to the lexicographically smallest pair.
/// Stops at `vocab_size` or when no pair remains.
Vocab train_subword(const std::vector<std::string>& corpus, std::size_t vocab_size);

/// Texts of every turn, for tokenizer training.
std::vector<std::string> corpus_texts(const std::vector<Dialogue>& dialogues);

/// Splits on whitespace after lower-casing; special literals are kept whole.
std::vector<std::string> pre_tokenize(std::string_view text);

std::vector<TokenId> encode_text(const Vocab& v, std::string_view text);
std::string decode(const Vocab& v, const std::vector<TokenId>& ids);

/// [CLS], then per turn the speaker token and the turn's subword ids.
/// `upto_turn` keeps turns 0..upto_turn inclusive. When longer than max_len,
/// tokens are dropped from the front while [CLS] stays at index 0.
TokenSequence flatten_dialogue(const Vocab& v, const Dialogue& d,
                               std::optional<std::size_t> upto_turn, std::size_t max_len);

/// [CLS] + speaker token + utterance ids, truncated at the end to max_len.
TokenSequence encode_utterance(const Vocab& v, Speaker speaker, std::string_view text,
                               std::size_t max_len);

/// [CLS] + text ids (no speaker token), truncated at the end to max_len.
TokenSequence encode_plain(const Vocab& v, std::string_view text, std::size_t max_len);

/// Keeps [CLS] and the most recent max_len - 1 tokens.
TokenSequence truncate_front(const TokenSequence& seq, std::size_t max_len);

// Vocab file (version 1):
//   #dialm-vocab 1
//   [tokens] <count>
//   <token>\t<id>          (one per line, ids dense from 0)
//   [merges] <count>
//   <left>\t<right>        (one per line, in rank order)
void save_vocab(std::ostream& out, const Vocab& v);
void save_vocab(const std::filesystem::path& path, const Vocab& v);
Vocab load_vocab(std::istream& in);
Vocab load_vocab(const std::filesystem::path& path);

}  // namespace dialm
