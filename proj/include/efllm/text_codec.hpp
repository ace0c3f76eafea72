#pragma once

// Word-level tokenizer with character fallback.
//
// A whitespace-separated word becomes one token when the whole word is in the
// vocabulary and contains no digit. Otherwise it is segmented: digits always
// become single-character tokens, other runs take the longest vocabulary
// match at the start of the word and single characters after that. Pieces
// that continue a word carry the "##" marker, which is how detokenize knows
// where the spaces go.

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "efllm/error.hpp"
#include "efllm/tensor.hpp"

namespace efllm {

inline constexpr std::string_view kContinuation = "##";

namespace special {
inline constexpr std::string_view kPad = "<pad>";
inline constexpr std::string_view kBos = "<bos>";
inline constexpr std::string_view kEos = "<eos>";
inline constexpr std::string_view kUnk = "<unk>";
// Stands in for a function result inside generated replies.
inline constexpr std::string_view kResult = "<result>";
}  // namespace special

namespace detail {

// Splits UTF-8 text into code points (as byte strings). Invalid lead bytes are
// passed through one byte at a time.
inline std::vector<std::string> utf8_chars(std::string_view s) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    if (c >= 0xF0) len = 4;
    else if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    len = std::min(len, s.size() - i);
    out.emplace_back(s.substr(i, len));
    i += len;
  }
  return out;
}

inline bool is_digit(std::string_view ch) { return ch.size() == 1 && ch[0] >= '0' && ch[0] <= '9'; }

inline bool has_digit(std::string_view w) {
  return std::any_of(w.begin(), w.end(), [](char c) { return c >= '0' && c <= '9'; });
}

inline std::vector<std::string> split_ws(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == '\n' || text[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < text.size() && !(text[j] == ' ' || text[j] == '\t' || text[j] == '\n' || text[j] == '\r')) ++j;
    if (j > i) words.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

}  // namespace detail

class Vocabulary {
 public:
  static constexpr std::size_t kPadId = 0, kBosId = 1, kEosId = 2, kUnkId = 3, kResultId = 4;

  // Reserved block: specials, then "0".."9", then "##0".."##9".
  static std::vector<std::string> reserved_tokens() {
    std::vector<std::string> r{std::string(special::kPad), std::string(special::kBos),
                               std::string(special::kEos), std::string(special::kUnk),
                               std::string(special::kResult)};
    for (char c = '0'; c <= '9'; ++c) r.emplace_back(1, c);
    for (char c = '0'; c <= '9'; ++c) r.push_back(std::string(kContinuation) + c);
    return r;
  }

  static std::size_t reserved_count() { return 5 + 20; }

  Vocabulary() = default;

  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    const auto reserved = reserved_tokens();
    if (tokens_.size() < reserved.size() ||
        !std::equal(reserved.begin(), reserved.end(), tokens_.begin())) {
      throw SchemaError("vocabulary does not start with the reserved token block");
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], i).second) {
        throw SchemaError("duplicate vocabulary entry '" + tokens_[i] + "'");
      }
    }
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::size_t id) const {
    if (id >= tokens_.size()) throw IndexError("token id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }
  std::optional<std::size_t> find(std::string_view tok) const {
    auto it = index_.find(std::string(tok));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  std::size_t id(std::string_view tok) const {
    auto f = find(tok);
    if (!f) throw IndexError("token '" + std::string(tok) + "' not in vocabulary");
    return *f;
  }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct TokenSequence {
  std::vector<std::size_t> ids;
  std::string source;
};

// Words (digit-free) seen at least twice, every character in both word-start
// and continuation form, plus the reserved block. Sorted for determinism.
template <class Range>
Vocabulary build_vocab(const Range& corpus) {
  std::map<std::string, std::size_t> freq;
  std::set<std::string> entries;
  bool any = false;
  for (const auto& line : corpus) {
    for (const auto& w : detail::split_ws(line)) {
      any = true;
      if (!detail::has_digit(w)) ++freq[w];
      for (const auto& ch : detail::utf8_chars(w)) {
        if (detail::is_digit(ch)) continue;
        entries.insert(ch);
        entries.insert(std::string(kContinuation) + ch);
      }
    }
  }
  if (!any) throw ContractError("cannot build a vocabulary from an empty corpus");
  for (const auto& [w, n] : freq)
    if (n >= 2) entries.insert(w);
  auto tokens = Vocabulary::reserved_tokens();
  for (const auto& r : tokens) entries.erase(r);
  tokens.insert(tokens.end(), entries.begin(), entries.end());
  return Vocabulary(std::move(tokens));
}

inline Vocabulary build_vocab(std::initializer_list<std::string> corpus) {
  return build_vocab(std::vector<std::string>(corpus));
}

inline TokenSequence tokenize(std::string_view text, const Vocabulary& vocab) {
  TokenSequence seq;
  seq.source = std::string(text);
  for (const auto& word : detail::split_ws(text)) {
    if (!detail::has_digit(word)) {
      if (auto id = vocab.find(word)) {
        seq.ids.push_back(*id);
        continue;
      }
    }
    const auto chars = detail::utf8_chars(word);
    std::size_t i = 0;
    while (i < chars.size()) {
      const bool initial = i == 0;
      const std::string marker = initial ? "" : std::string(kContinuation);
      if (detail::is_digit(chars[i])) {
        seq.ids.push_back(vocab.id(marker + chars[i]));
        ++i;
        continue;
      }
      std::size_t run_end = i;
      while (run_end < chars.size() && !detail::is_digit(chars[run_end])) ++run_end;
      std::size_t taken = 0;
      if (initial) {
        // longest whole-word prefix of the digit-free run
        std::string candidate;
        std::vector<std::string> prefixes;
        for (std::size_t k = i; k < run_end; ++k) prefixes.push_back(candidate += chars[k]);
        for (std::size_t len = prefixes.size(); len > 1; --len) {
          if (auto id = vocab.find(prefixes[len - 1])) {
            seq.ids.push_back(*id);
            taken = len;
            break;
          }
        }
      }
      if (taken == 0) {
        auto id = vocab.find(marker + chars[i]);
        seq.ids.push_back(id ? *id : Vocabulary::kUnkId);
        taken = 1;
      }
      i += taken;
    }
  }
  return seq;
}

// Joins token strings; continuation pieces attach to the previous token, other
// tokens are separated by one space. Stops at EOS; PAD and BOS are skipped.
inline std::string detokenize(std::span<const std::size_t> ids, const Vocabulary& vocab) {
  std::string out;
  for (const auto id : ids) {
    if (id == Vocabulary::kEosId) break;
    if (id == Vocabulary::kPadId || id == Vocabulary::kBosId) continue;
    const auto& tok = vocab.token(id);
    if (tok.size() > kContinuation.size() && tok.starts_with(kContinuation)) {
      out += tok.substr(kContinuation.size());
    } else {
      if (!out.empty()) out += ' ';
      out += tok;
    }
  }
  return out;
}

inline std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab) {
  return detokenize(std::span<const std::size_t>(seq.ids), vocab);
}

// Greedy readout of output vectors: each row maps to its arg-max token.
template <class T>
std::vector<std::size_t> argmax_rows(const BasicTensor<T>& logits) {
  std::vector<std::size_t> ids;
  const std::size_t m = logits.rows(), v = logits.cols();
  for (std::size_t i = 0; i < m; ++i) {
    const auto row = logits.data().subspan(i * v, v);
    ids.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return ids;
}

// Embedding lookup h^T: row k is table row ids[k].
template <class T>
BasicTensor<T> embed(const TokenSequence& seq, const BasicTensor<T>& table) {
  return embedding(table, std::span<const std::size_t>(seq.ids));
}

inline void save_vocab(const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary file " + path);
  for (const auto& t : vocab.tokens()) out << t << '\n';
  if (!out) throw IoError("failed writing vocabulary file " + path);
}

inline Vocabulary load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read vocabulary file " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  return Vocabulary(std::move(tokens));
}

}  // namespace efllm
