#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace seqlab {

// Token inventory. Index 0 is conventionally pad and the eos token is a real
// vocabulary entry (sequences end in it; the model must learn to emit it).
struct Vocabulary {
  std::vector<std::string> tokens;
  std::size_t eos_index = 0;
  std::size_t pad_index = 0;

  Vocabulary() = default;

  Vocabulary(std::vector<std::string> toks, std::size_t eos, std::size_t pad)
      : tokens(std::move(toks)), eos_index(eos), pad_index(pad) {
    validate();
  }

  // pad = index 0 ("<pad>"), eos = index 1 ("<eos>"), then the given tokens.
  static Vocabulary with_specials(const std::vector<std::string>& content) {
    std::vector<std::string> toks{"<pad>", "<eos>"};
    toks.insert(toks.end(), content.begin(), content.end());
    return Vocabulary(std::move(toks), 1, 0);
  }

  std::size_t size() const { return tokens.size(); }

  void validate() const {
    if (eos_index == pad_index)
      throw std::invalid_argument("vocabulary: eos and pad must differ");
    if (eos_index >= tokens.size() || pad_index >= tokens.size())
      throw std::invalid_argument("vocabulary: special index out of range");
    std::unordered_map<std::string, std::size_t> seen;
    for (std::size_t i = 0; i < tokens.size(); ++i)
      if (!seen.emplace(tokens[i], i).second)
        throw std::invalid_argument("vocabulary: duplicate token '" +
                                    tokens[i] + "'");
  }

  std::size_t index_of(const std::string& tok) const {
    for (std::size_t i = 0; i < tokens.size(); ++i)
      if (tokens[i] == tok) return i;
    throw std::out_of_range("vocabulary: unknown token '" + tok + "'");
  }

  const std::string& token(std::size_t i) const {
    if (i >= tokens.size())
      throw std::out_of_range("vocabulary: index out of range");
    return tokens[i];
  }
};

using TokenSeq = std::vector<std::size_t>;

// One (X, Y) pair; Y ends in eos and neither side contains pad.
struct Example {
  TokenSeq x;
  TokenSeq y;
};

inline void validate_example(const Example& ex, const Vocabulary& vocab) {
  if (ex.y.empty()) throw std::invalid_argument("example: empty target");
  if (ex.y.back() != vocab.eos_index)
    throw std::invalid_argument("example: target must end in eos");
  for (auto t : ex.x)
    if (t >= vocab.size() || t == vocab.pad_index)
      throw std::invalid_argument("example: bad source token");
  for (auto t : ex.y)
    if (t >= vocab.size() || t == vocab.pad_index)
      throw std::invalid_argument("example: bad target token");
}

}  // namespace seqlab
