#include "dialm/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace dialm {

namespace {

constexpr std::string_view kVocabHeader = "#dialm-vocab 1";

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

std::vector<std::string> utf8_chars(std::string_view s) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < s.size();) {
    const std::size_t n = std::min(utf8_length(static_cast<unsigned char>(s[i])), s.size() - i);
    out.emplace_back(s.substr(i, n));
    i += n;
  }
  return out;
}

std::optional<std::size_t> special_at(std::string_view text, std::size_t pos) {
  if (text[pos] != '[') return std::nullopt;
  for (std::size_t k = 0; k < kNumSpecials; ++k) {
    if (text.substr(pos).starts_with(kSpecialLiterals[k])) return k;
  }
  return std::nullopt;
}

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::vector<std::string> word_symbols(std::string_view word) {
  std::vector<std::string> symbols{std::string(kWordStart)};
  for (auto& c : utf8_chars(word)) symbols.push_back(std::move(c));
  return symbols;
}

void apply_merge(std::vector<std::string>& symbols, std::string_view left, std::string_view right) {
  std::vector<std::string> out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
      out.push_back(symbols[i] + symbols[i + 1]);
      ++i;
    } else {
      out.push_back(std::move(symbols[i]));
    }
  }
  symbols = std::move(out);
}

std::vector<std::string> segment_word(const Vocab& v, std::string_view word) {
  auto symbols = word_symbols(word);
  for (;;) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    std::size_t best_pos = 0;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      if (auto r = v.merge_rank(symbols[i], symbols[i + 1]); r && *r < best_rank) {
        best_rank = *r;
        best_pos = i;
      }
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    const std::string left = symbols[best_pos];
    const std::string right = symbols[best_pos + 1];
    apply_merge(symbols, left, right);
  }
  return symbols;
}

}  // namespace

TokenSequence make_sequence(std::vector<TokenId> ids) {
  TokenSequence s;
  const std::size_t n = ids.size();
  s.ids = std::move(ids);
  s.positions.resize(n);
  s.segments.assign(n, 0);
  s.attention_mask.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.positions[i] = static_cast<TokenId>(i);
    s.attention_mask[i] = s.ids[i] == id_of(Special::pad) ? 0 : 1;
  }
  return s;
}

void pad_to(TokenSequence& seq, std::size_t length) {
  while (seq.ids.size() < length) {
    seq.positions.push_back(static_cast<TokenId>(seq.ids.size()));
    seq.ids.push_back(id_of(Special::pad));
    seq.segments.push_back(0);
    seq.attention_mask.push_back(0);
  }
}

Vocab::Vocab() {
  for (auto lit : kSpecialLiterals) add_token(std::string(lit));
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocab::add_token(std::string token) {
  if (index_.contains(token)) throw TokenizerError("duplicate token '" + token + "'");
  const auto id = static_cast<TokenId>(tokens_.size());
  index_.emplace(token, id);
  tokens_.push_back(std::move(token));
  return id;
}

void Vocab::add_merge(std::string left, std::string right) {
  if (!index_.contains(left + right)) {
    throw TokenizerError("merge result '" + left + right + "' is not a token");
  }
  auto key = std::make_pair(left, right);
  if (merge_index_.contains(key)) throw TokenizerError("duplicate merge rule");
  merge_index_.emplace(key, merges_.size());
  merges_.emplace_back(std::move(left), std::move(right));
}

std::optional<std::size_t> Vocab::merge_rank(std::string_view left, std::string_view right) const {
  auto it = merge_index_.find(std::make_pair(std::string(left), std::string(right)));
  if (it == merge_index_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> pre_tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) out.push_back(std::move(word));
    word.clear();
  };
  for (std::size_t i = 0; i < text.size();) {
    if (auto k = special_at(text, i)) {
      flush();
      out.emplace_back(kSpecialLiterals[*k]);
      i += kSpecialLiterals[*k].size();
      continue;
    }
    const char c = text[i];
    if (is_space(c)) {
      flush();
    } else {
      word += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    ++i;
  }
  flush();
  return out;
}

std::vector<std::string> corpus_texts(const std::vector<Dialogue>& dialogues) {
  std::vector<std::string> texts;
  for (const auto& d : dialogues) {
    for (const auto& t : d.turns) texts.push_back(t.text);
  }
  return texts;
}

Vocab train_subword(const std::vector<std::string>& corpus, std::size_t vocab_size) {
  std::map<std::string, std::size_t> word_counts;
  for (const auto& text : corpus) {
    for (auto& w : pre_tokenize(text)) {
      if (w.front() == '[' && special_at(w, 0)) continue;
      ++word_counts[w];
    }
  }

  std::vector<std::vector<std::string>> words;
  std::vector<std::size_t> counts;
  std::set<std::string> alphabet;
  for (const auto& [w, n] : word_counts) {
    words.push_back(word_symbols(w));
    counts.push_back(n);
    alphabet.insert(words.back().begin(), words.back().end());
  }

  if (vocab_size <= kNumSpecials + alphabet.size()) {
    throw TokenizerError("vocab_size " + std::to_string(vocab_size) + " too small: need more than " +
                         std::to_string(kNumSpecials + alphabet.size()) +
                         " (specials + distinct symbols)");
  }

  Vocab v;
  for (const auto& sym : alphabet) v.add_token(sym);

  while (v.size() < vocab_size) {
    std::map<std::pair<std::string, std::string>, std::size_t> pair_counts;
    for (std::size_t w = 0; w < words.size(); ++w) {
      const auto& syms = words[w];
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) pair_counts[{syms[i], syms[i + 1]}] += counts[w];
    }
    if (pair_counts.empty()) break;
    // std::map iterates pairs in lexicographic order, so strict > keeps the smallest on ties.
    auto best = pair_counts.begin();
    for (auto it = pair_counts.begin(); it != pair_counts.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    const auto [left, right] = best->first;
    const std::string merged = left + right;
    if (!v.find(merged)) v.add_token(merged);
    v.add_merge(left, right);
    for (auto& syms : words) apply_merge(syms, left, right);
  }
  return v;
}

std::vector<TokenId> encode_text(const Vocab& v, std::string_view text) {
  std::vector<TokenId> ids;
  for (const auto& w : pre_tokenize(text)) {
    if (w.front() == '[') {
      if (auto k = special_at(w, 0); k && kSpecialLiterals[*k].size() == w.size()) {
        ids.push_back(static_cast<TokenId>(*k));
        continue;
      }
    }
    for (const auto& sym : segment_word(v, w)) {
      ids.push_back(v.find(sym).value_or(id_of(Special::unk)));
    }
  }
  return ids;
}

std::string decode(const Vocab& v, const std::vector<TokenId>& ids) {
  std::string out;
  for (TokenId id : ids) {
    if (Vocab::is_special(id)) {
      out += ' ';
      out += v.token(id);
      continue;
    }
    std::string tok = v.token(id);
    for (std::size_t pos; (pos = tok.find(kWordStart)) != std::string::npos;) {
      tok.replace(pos, kWordStart.size(), " ");
    }
    out += tok;
  }
  const auto first = out.find_first_not_of(' ');
  return first == std::string::npos ? std::string{} : out.substr(first);
}

TokenSequence truncate_front(const TokenSequence& seq, std::size_t max_len) {
  if (seq.size() <= max_len) return seq;
  if (max_len == 0) return make_sequence({});
  std::vector<TokenId> ids;
  ids.reserve(max_len);
  ids.push_back(seq.ids.front());
  ids.insert(ids.end(), seq.ids.end() - static_cast<std::ptrdiff_t>(max_len - 1), seq.ids.end());
  return make_sequence(std::move(ids));
}

TokenSequence flatten_dialogue(const Vocab& v, const Dialogue& d,
                               std::optional<std::size_t> upto_turn, std::size_t max_len) {
  std::vector<TokenId> ids{id_of(Special::cls)};
  const std::size_t last = upto_turn ? std::min(*upto_turn + 1, d.turns.size()) : d.turns.size();
  for (std::size_t i = 0; i < last; ++i) {
    const Turn& t = d.turns[i];
    ids.push_back(id_of(t.speaker == Speaker::system ? Special::sys : Special::usr));
    auto body = encode_text(v, t.text);
    ids.insert(ids.end(), body.begin(), body.end());
  }
  return truncate_front(make_sequence(std::move(ids)), max_len);
}

TokenSequence encode_utterance(const Vocab& v, Speaker speaker, std::string_view text,
                               std::size_t max_len) {
  std::vector<TokenId> ids{id_of(Special::cls),
                           id_of(speaker == Speaker::system ? Special::sys : Special::usr)};
  auto body = encode_text(v, text);
  ids.insert(ids.end(), body.begin(), body.end());
  if (ids.size() > max_len) ids.resize(max_len);
  return make_sequence(std::move(ids));
}

TokenSequence encode_plain(const Vocab& v, std::string_view text, std::size_t max_len) {
  std::vector<TokenId> ids{id_of(Special::cls)};
  auto body = encode_text(v, text);
  ids.insert(ids.end(), body.begin(), body.end());
  if (ids.size() > max_len) ids.resize(max_len);
  return make_sequence(std::move(ids));
}

void save_vocab(std::ostream& out, const Vocab& v) {
  out << kVocabHeader << '\n';
  out << "[tokens] " << v.size() << '\n';
  for (std::size_t i = 0; i < v.size(); ++i) out << v.token(static_cast<TokenId>(i)) << '\t' << i << '\n';
  out << "[merges] " << v.merges().size() << '\n';
  for (const auto& [l, r] : v.merges()) out << l << '\t' << r << '\n';
}

void save_vocab(const std::filesystem::path& path, const Vocab& v) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw TokenizerError("cannot write " + path.string());
  save_vocab(out, v);
}

Vocab load_vocab(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  auto next = [&](const char* what) {
    if (!std::getline(in, line)) {
      throw TokenizerError("vocab: unexpected end of file, expected " + std::string(what));
    }
    ++line_no;
  };
  auto bad = [&](const std::string& why) {
    return TokenizerError("vocab line " + std::to_string(line_no) + ": " + why);
  };
  auto section = [&](std::string_view name) {
    if (!line.starts_with(name)) throw bad("expected section " + std::string(name));
    try {
      return static_cast<std::size_t>(std::stoull(line.substr(name.size())));
    } catch (const std::exception&) {
      throw bad("bad section count");
    }
  };

  next("header");
  if (line != kVocabHeader) throw bad("unsupported header '" + line + "'");

  next("[tokens]");
  const std::size_t n_tokens = section("[tokens]");
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i < n_tokens; ++i) {
    next("token line");
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) throw bad("expected token<TAB>id");
    if (line.substr(tab + 1) != std::to_string(i)) throw bad("ids must be dense and ordered");
    tokens.push_back(line.substr(0, tab));
  }
  if (tokens.size() < kNumSpecials) throw TokenizerError("vocab: missing special tokens");
  for (std::size_t k = 0; k < kNumSpecials; ++k) {
    if (tokens[k] != kSpecialLiterals[k]) {
      throw TokenizerError("vocab: special token " + std::string(kSpecialLiterals[k]) +
                           " must have id " + std::to_string(k));
    }
  }
  Vocab v;
  for (std::size_t i = kNumSpecials; i < tokens.size(); ++i) v.add_token(tokens[i]);

  next("[merges]");
  const std::size_t n_merges = section("[merges]");
  for (std::size_t i = 0; i < n_merges; ++i) {
    next("merge line");
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw bad("expected left<TAB>right");
    try {
      v.add_merge(line.substr(0, tab), line.substr(tab + 1));
    } catch (const TokenizerError& e) {
      throw bad(e.what());
    }
  }
  return v;
}

Vocab load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TokenizerError("cannot open " + path.string());
  return load_vocab(in);
}

}  // namespace dialm
