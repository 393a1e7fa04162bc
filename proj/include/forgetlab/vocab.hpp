#pragma once

#include <cstddef>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "forgetlab/errors.hpp"

namespace forgetlab {

using TokenId = int;
// Body tokens only: BOS is implicit, EOS is present when the sequence terminated before max length.
using TokenSequence = std::vector<TokenId>;

inline constexpr TokenId kBos = 0;
inline constexpr TokenId kEos = 1;

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 3) throw UsageError("vocabulary needs BOS, EOS and at least one task token");
    if (tokens_[0] != "<bos>" || tokens_[1] != "<eos>")
      throw UsageError("vocabulary must reserve id 0 for <bos> and id 1 for <eos>");
  }

  // BOS, EOS, a-h, 0-9, r, |, +, =
  static Vocabulary desk() {
    std::vector<std::string> t{"<bos>", "<eos>"};
    for (char c = 'a'; c <= 'h'; ++c) t.emplace_back(1, c);
    for (char c = '0'; c <= '9'; ++c) t.emplace_back(1, c);
    for (const char* s : {"r", "|", "+", "="}) t.emplace_back(s);
    return Vocabulary(std::move(t));
  }

  // BOS, EOS and `letters` task tokens named a, b, c, ...
  static Vocabulary micro(int letters) {
    std::vector<std::string> t{"<bos>", "<eos>"};
    for (int i = 0; i < letters; ++i) t.emplace_back(1, static_cast<char>('a' + i));
    return Vocabulary(std::move(t));
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& symbol(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  TokenId id(std::string_view symbol) const {
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      if (tokens_[i] == symbol) return static_cast<TokenId>(i);
    throw IncompatibleError("token '" + std::string(symbol) + "' is not in the vocabulary");
  }

  bool contains(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < tokens_.size(); }

  // Whitespace-separated symbols, e.g. "3 + 4 =".
  TokenSequence tokenize(std::string_view text) const {
    std::istringstream in{std::string(text)};
    TokenSequence out;
    std::string sym;
    while (in >> sym) {
      const TokenId t = id(sym);
      if (t == kBos) throw IncompatibleError("<bos> may not appear inside a sequence");
      out.push_back(t);
    }
    return out;
  }

  std::string detokenize(const TokenSequence& seq) const {
    std::string out;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i) out += ' ';
      out += symbol(seq[i]);
    }
    return out;
  }

  bool operator==(const Vocabulary&) const = default;

 private:
  std::vector<std::string> tokens_;
};

}  // namespace forgetlab
