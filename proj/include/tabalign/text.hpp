#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tabalign/common.hpp"

namespace tabalign {

// Tokens plus the byte offsets they came from. Offsets index the original
// (non-lowercased) source string; each token equals the lowercased source
// substring at its span.
struct TokenizedText {
  std::string source;
  std::vector<std::string> tokens;
  std::vector<std::pair<std::size_t, std::size_t>> char_spans;  // [start, end)

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }

  // Raw source text under the inclusive token span [start, end].
  std::string slice(int start, int end) const {
    const auto a = char_spans[static_cast<std::size_t>(start)].first;
    const auto b = char_spans[static_cast<std::size_t>(end)].second;
    return source.substr(a, b - a);
  }
};

namespace detail {

inline bool is_ascii_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}
inline bool is_ascii_digit(unsigned char c) { return c >= '0' && c <= '9'; }
inline bool is_ascii_punct(unsigned char c) {
  return (c >= '!' && c <= '/') || (c >= ':' && c <= '@') ||
         (c >= '[' && c <= '`') || (c >= '{' && c <= '~');
}

inline std::string ascii_lower(const std::string& s) {
  std::string out = s;
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

}  // namespace detail

// Word-level tokenizer: lowercase, split on whitespace, digit runs kept
// together, each punctuation byte its own token. Bytes >= 0x80 (multi-byte
// UTF-8) are treated as word characters, so encoded code points never split.
inline TokenizedText tokenize(const std::string& text) {
  TokenizedText out;
  out.source = text;
  const std::size_t n = text.size();
  std::size_t i = 0;
  auto emit = [&](std::size_t start, std::size_t end) {
    out.tokens.push_back(detail::ascii_lower(text.substr(start, end - start)));
    out.char_spans.emplace_back(start, end);
  };
  while (i < n) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (detail::is_ascii_space(c)) {
      ++i;
    } else if (detail::is_ascii_digit(c)) {
      std::size_t j = i + 1;
      while (j < n && detail::is_ascii_digit(static_cast<unsigned char>(text[j]))) ++j;
      emit(i, j);
      i = j;
    } else if (detail::is_ascii_punct(c)) {
      emit(i, i + 1);
      ++i;
    } else {
      std::size_t j = i + 1;
      while (j < n) {
        const auto d = static_cast<unsigned char>(text[j]);
        if (detail::is_ascii_space(d) || detail::is_ascii_digit(d) || detail::is_ascii_punct(d)) break;
        ++j;
      }
      emit(i, j);
      i = j;
    }
  }
  return out;
}

// Fixed ids for the reserved tokens; real tokens start at kNumReserved.
struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kNone = 4;  // sentinel target for absent spans
  static constexpr int kNumReserved = 5;

  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;

  int size() const { return static_cast<int>(id_to_token.size()); }

  int id(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const {
    return token_to_id.count(token) > 0;
  }

  // FNV over the id-ordered token list; stored in checkpoints so mismatched
  // vocabulary loads fail fast.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : id_to_token) {
      h = fnv1a64(t, h);
      h = fnv1a64("\n", h);
    }
    return h;
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"tokens", id_to_token}};
  }

  static Vocabulary from_json(const nlohmann::json& j) {
    Vocabulary v;
    v.id_to_token = j.at("tokens").get<std::vector<std::string>>();
    if (v.id_to_token.size() < kNumReserved) {
      throw ParseError("vocabulary json missing reserved tokens");
    }
    for (std::size_t i = 0; i < v.id_to_token.size(); ++i) {
      if (!v.token_to_id.emplace(v.id_to_token[i], static_cast<int>(i)).second) {
        throw ParseError("vocabulary json contains duplicate token: " + v.id_to_token[i]);
      }
    }
    return v;
  }
};

inline const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> r = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[NONE]"};
  return r;
}

// Reserved ids first, then tokens with frequency >= min_freq ordered by
// (frequency desc, lexicographic asc) so equal corpora build equal vocabularies.
inline Vocabulary build_vocab(const std::vector<TokenizedText>& corpus, int min_freq) {
  if (min_freq < 1) throw ConfigError("build_vocab: min_freq must be >= 1");
  std::map<std::string, long long> freq;
  for (const auto& text : corpus) {
    for (const auto& tok : text.tokens) ++freq[tok];
  }
  std::vector<std::pair<std::string, long long>> entries(freq.begin(), freq.end());
  std::stable_sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  v.id_to_token = reserved_tokens();
  for (const auto& [tok, count] : entries) {
    if (count >= min_freq) v.id_to_token.push_back(tok);
  }
  for (std::size_t i = 0; i < v.id_to_token.size(); ++i) {
    v.token_to_id.emplace(v.id_to_token[i], static_cast<int>(i));
  }
  return v;
}

// Inclusive token span [start, end].
struct TokenSpan {
  int start = 0;
  int end = 0;
  bool operator==(const TokenSpan& o) const { return start == o.start && end == o.end; }
};

// First leftmost token window matching tokenize(value). Absence is a value,
// not an error.
inline std::optional<TokenSpan> locate_span(const TokenizedText& utt, const std::string& value) {
  if (value.empty()) throw ConfigError("locate_span: value must be nonempty");
  const TokenizedText needle = tokenize(value);
  if (needle.empty() || needle.size() > utt.size()) return std::nullopt;
  const std::size_t window = needle.size();
  for (std::size_t start = 0; start + window <= utt.size(); ++start) {
    bool match = true;
    for (std::size_t k = 0; k < window; ++k) {
      if (utt.tokens[start + k] != needle.tokens[k]) {
        match = false;
        break;
      }
    }
    if (match) {
      return TokenSpan{static_cast<int>(start), static_cast<int>(start + window - 1)};
    }
  }
  return std::nullopt;
}

}  // namespace tabalign
