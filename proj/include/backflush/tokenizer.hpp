#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace backflush {

using Token = int;
using TokenSeq = std::vector<Token>;

/// Character-level tokenizer over a fixed 30-character alphabet plus two
/// control tokens. Ids are dense: 0 = end of sequence, 1 = prompt/response
/// separator, then the printable alphabet in order.
class Tokenizer {
 public:
  static constexpr Token kEnd = 0;
  static constexpr Token kSep = 1;

  /// Printable characters in id order starting at id 2.
  static constexpr std::string_view kAlphabet = " abcdefghijklmnopqrstuvwxyz?.'";

  /// Number of ids the tokenizer can produce (alphabet + control tokens).
  static constexpr int kSize = static_cast<int>(kAlphabet.size()) + 2;

  /// Throws std::invalid_argument naming the first character outside the alphabet.
  static TokenSeq encode(std::string_view text);

  /// Inverse of encode. Control tokens are rejected.
  static std::string decode(const TokenSeq& tokens);

  static bool in_alphabet(char c) noexcept;
};

}  // namespace backflush
