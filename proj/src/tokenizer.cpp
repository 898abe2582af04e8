#include "backflush/tokenizer.hpp"

#include <stdexcept>

namespace backflush {

bool Tokenizer::in_alphabet(char c) noexcept {
  return kAlphabet.find(c) != std::string_view::npos;
}

TokenSeq Tokenizer::encode(std::string_view text) {
  TokenSeq out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto pos = kAlphabet.find(text[i]);
    if (pos == std::string_view::npos) {
      throw std::invalid_argument("character '" + std::string(1, text[i]) + "' at offset " +
                                  std::to_string(i) + " is outside the tokenizer alphabet");
    }
    out.push_back(static_cast<Token>(pos) + 2);
  }
  return out;
}

std::string Tokenizer::decode(const TokenSeq& tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (Token t : tokens) {
    if (t < 2 || t >= kSize) {
      throw std::invalid_argument("token id " + std::to_string(t) + " has no character form");
    }
    out.push_back(kAlphabet[static_cast<std::size_t>(t - 2)]);
  }
  return out;
}

}  // namespace backflush
