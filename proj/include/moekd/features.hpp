// Copyright 2026 The MoEKD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "moekd/corpus.hpp"
#include "moekd/error.hpp"
#include "moekd/hash.hpp"

namespace moekd {

enum class TokenKind {
  Identifier,
  Keyword,
  NumberLiteral,
  StringLiteral,
  Operator,
  Punctuation,
  Whitespace,
  Comment,
};

inline constexpr std::string_view to_string(TokenKind k) noexcept {
  switch (k) {
    case TokenKind::Identifier: return "Identifier";
    case TokenKind::Keyword: return "Keyword";
    case TokenKind::NumberLiteral: return "NumberLiteral";
    case TokenKind::StringLiteral: return "StringLiteral";
    case TokenKind::Operator: return "Operator";
    case TokenKind::Punctuation: return "Punctuation";
    case TokenKind::Whitespace: return "Whitespace";
    case TokenKind::Comment: return "Comment";
  }
  return "?";
}

struct Token {
  std::string text;
  TokenKind kind;
  std::size_t offset = 0;

  std::size_t length() const noexcept { return text.size(); }
  bool trivia() const noexcept {
    return kind == TokenKind::Whitespace || kind == TokenKind::Comment;
  }
  bool operator==(const Token&) const = default;
};

// C11 keywords.
inline constexpr std::array<std::string_view, 44> kCKeywords = {
    "auto",     "break",    "case",     "char",          "const",          "continue",
    "default",  "do",       "double",   "else",          "enum",           "extern",
    "float",    "for",      "goto",     "if",            "inline",         "int",
    "long",     "register", "restrict", "return",        "short",          "signed",
    "sizeof",   "static",   "struct",   "switch",        "typedef",        "union",
    "unsigned", "void",     "volatile", "while",         "_Alignas",       "_Alignof",
    "_Atomic",  "_Bool",    "_Complex", "_Generic",      "_Imaginary",     "_Noreturn",
    "_Static_assert", "_Thread_local"};

inline bool is_keyword(std::string_view word) noexcept {
  return std::find(kCKeywords.begin(), kCKeywords.end(), word) != kCKeywords.end();
}

namespace detail {
constexpr bool ident_start(char c) noexcept {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_';
}
constexpr bool ident_char(char c) noexcept { return ident_start(c) || (c >= '0' && c <= '9'); }
constexpr bool digit(char c) noexcept { return c >= '0' && c <= '9'; }
constexpr bool space(char c) noexcept {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}
}  // namespace detail

/// Matches [A-Za-z_][A-Za-z0-9_]*.
inline bool is_identifier(std::string_view s) noexcept {
  if (s.empty() || !detail::ident_start(s.front())) return false;
  return std::all_of(s.begin(), s.end(), detail::ident_char);
}

/// Lossless C-like lexer: concatenating token texts reproduces `code`.
/// Throws FormatError on an unterminated string, char literal or block
/// comment, citing the byte offset where it starts.
inline std::vector<Token> tokenize(std::string_view code) {
  static constexpr std::array<std::string_view, 23> kMultiOps = {
      "<<=", ">>=", "...", "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=",
      "&&",  "||",  "+=",  "-=", "*=", "/=", "%=", "&=", "|=", "^=", "##"};
  static constexpr std::string_view kSingleOps = "+-*/%=<>!&|^~?:.#";
  static constexpr std::string_view kPunct = "()[]{};,";

  std::vector<Token> tokens;
  std::size_t i = 0;
  const std::size_t n = code.size();
  const auto emit = [&](std::size_t start, TokenKind kind) {
    tokens.push_back({std::string(code.substr(start, i - start)), kind, start});
  };

  while (i < n) {
    const std::size_t start = i;
    const char c = code[i];
    if (detail::space(c)) {
      while (i < n && detail::space(code[i])) ++i;
      emit(start, TokenKind::Whitespace);
    } else if (code.substr(i, 2) == "//") {
      while (i < n && code[i] != '\n') ++i;
      emit(start, TokenKind::Comment);
    } else if (code.substr(i, 2) == "/*") {
      const auto end = code.find("*/", i + 2);
      if (end == std::string_view::npos) {
        throw FormatError("unterminated block comment at byte " + std::to_string(start));
      }
      i = end + 2;
      emit(start, TokenKind::Comment);
    } else if (c == '"' || c == '\'') {
      ++i;
      while (true) {
        if (i >= n || code[i] == '\n') {
          throw FormatError(std::string("unterminated ") + (c == '"' ? "string" : "character") +
                            " literal at byte " + std::to_string(start));
        }
        if (code[i] == '\\') {
          i += 2;
          continue;
        }
        if (code[i++] == c) break;
      }
      emit(start, TokenKind::StringLiteral);
    } else if (detail::ident_start(c)) {
      while (i < n && detail::ident_char(code[i])) ++i;
      emit(start, is_keyword(code.substr(start, i - start)) ? TokenKind::Keyword
                                                             : TokenKind::Identifier);
    } else if (detail::digit(c) || (c == '.' && i + 1 < n && detail::digit(code[i + 1]))) {
      while (i < n) {
        const char d = code[i];
        if ((d == '+' || d == '-') && (code[i - 1] == 'e' || code[i - 1] == 'E' ||
                                       code[i - 1] == 'p' || code[i - 1] == 'P')) {
          ++i;
        } else if (detail::ident_char(d) || d == '.') {
          ++i;
        } else {
          break;
        }
      }
      emit(start, TokenKind::NumberLiteral);
    } else if (kPunct.find(c) != std::string_view::npos) {
      ++i;
      emit(start, TokenKind::Punctuation);
    } else {
      const auto multi = std::find_if(kMultiOps.begin(), kMultiOps.end(),
                                      [&](std::string_view op) { return code.substr(i, op.size()) == op; });
      if (multi != kMultiOps.end()) {
        i += multi->size();
        emit(start, TokenKind::Operator);
      } else if (kSingleOps.find(c) != std::string_view::npos) {
        ++i;
        emit(start, TokenKind::Operator);
      } else {
        // Anything else (stray bytes, non-ASCII code points) is kept as
        // one punctuation token per UTF-8 sequence.
        const auto lead = static_cast<unsigned char>(c);
        std::size_t len = lead < 0x80 ? 1 : lead >= 0xF0 ? 4 : lead >= 0xE0 ? 3 : lead >= 0xC0 ? 2 : 1;
        i = std::min(n, i + len);
        emit(start, TokenKind::Punctuation);
      }
    }
  }
  return tokens;
}

inline std::string join(std::span<const Token> tokens) {
  std::string out;
  for (const auto& t : tokens) out += t.text;
  return out;
}

/// Marks Identifier tokens that may be renamed: every identifier except
/// one directly preceded (ignoring trivia) by "." or "->".
inline std::vector<bool> renameable_mask(std::span<const Token> tokens) {
  std::vector<bool> mask(tokens.size(), false);
  const Token* prev = nullptr;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto& t = tokens[i];
    if (t.trivia()) continue;
    if (t.kind == TokenKind::Identifier) {
      const bool field = prev && prev->kind == TokenKind::Operator &&
                         (prev->text == "." || prev->text == "->");
      mask[i] = !field;
    }
    prev = &t;
  }
  return mask;
}

/// Distinct renameable identifier names in first-occurrence order.
inline std::vector<std::string> extract_identifiers(std::span<const Token> tokens) {
  const auto mask = renameable_mask(tokens);
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (mask[i] && seen.insert(tokens[i].text).second) out.push_back(tokens[i].text);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hashed features

/// Offset basis of the second FNV-1a pass that decides the feature sign.
inline constexpr std::uint64_t kSignHashBasis = 0x84222325CBF29CE4ULL;
/// Separator byte between the two tokens of a bigram key.
inline constexpr char kBigramSeparator = '\x1f';

struct FeatureVector {
  std::vector<double> values;
  double norm = 0.0;

  std::size_t dim() const noexcept { return values.size(); }
  bool operator==(const FeatureVector&) const = default;
};

/// Bucket and sign of one n-gram key in a D-dimensional space.
struct HashedFeature {
  std::size_t bucket;
  double sign;
};

inline HashedFeature hash_feature(std::string_view key, std::size_t dim) noexcept {
  const auto bucket = static_cast<std::size_t>(fnv1a64(key) & (dim - 1));
  const double sign = (fnv1a64(key, kSignHashBasis) >> 63) ? -1.0 : 1.0;
  return {bucket, sign};
}

inline void check_feature_dim(std::size_t dim) {
  if (dim < 2 || !std::has_single_bit(dim)) {
    throw InvalidArgument("feature dimension " + std::to_string(dim) + " is not a power of two >= 2");
  }
}

/// Signed hashed bag of unigrams and adjacent bigrams over non-trivia
/// tokens, L2-normalized.
inline FeatureVector featurize(std::span<const Token> tokens, std::size_t dim) {
  check_feature_dim(dim);
  FeatureVector fv{std::vector<double>(dim, 0.0), 0.0};
  const std::string* prev = nullptr;
  std::string key;
  for (const auto& t : tokens) {
    if (t.trivia()) continue;
    auto [b, s] = hash_feature(t.text, dim);
    fv.values[b] += s;
    if (prev) {
      key.assign(*prev);
      key += kBigramSeparator;
      key += t.text;
      auto [b2, s2] = hash_feature(key, dim);
      fv.values[b2] += s2;
    }
    prev = &t.text;
  }
  double sq = 0.0;
  for (const double v : fv.values) sq += v * v;
  if (sq > 0.0) {
    const double inv = 1.0 / std::sqrt(sq);
    for (double& v : fv.values) v *= inv;
    fv.norm = 1.0;
  }
  return fv;
}

inline FeatureVector featurize(std::string_view code, std::size_t dim) {
  return featurize(tokenize(code), dim);
}

/// Feature vectors of a fixed dimension, cached by sample id.
class FeatureTable {
 public:
  explicit FeatureTable(std::size_t dim) : dim_(dim) { check_feature_dim(dim); }

  FeatureTable(std::size_t dim, std::span<const CodeSample> samples) : FeatureTable(dim) {
    add(samples);
  }

  void add(std::span<const CodeSample> samples) {
    for (const auto& s : samples) {
      if (!table_.contains(s.id)) table_.emplace(s.id, featurize(s.code, dim_));
    }
  }

  std::size_t dim() const noexcept { return dim_; }
  bool contains(const std::string& id) const { return table_.contains(id); }

  std::span<const double> features(const std::string& id) const {
    const auto it = table_.find(id);
    if (it == table_.end()) throw InvalidArgument("no features cached for sample '" + id + "'");
    return it->second.values;
  }

 private:
  std::size_t dim_;
  std::unordered_map<std::string, FeatureVector> table_;
};

}  // namespace moekd
