#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "backflush/tokenizer.hpp"

namespace backflush {

inline constexpr std::string_view kGeneratorVersion = "synthetic-grammar-1";

enum class Role { Benign, Aux, Utility, Poison, Probe, Watermark };

std::string_view to_string(Role role);
Role role_from_string(std::string_view name);

/// One prompt/response pair. Text is stored in the tokenizer alphabet, so
/// `prompt_tokens()` and `response_tokens()` are exact.
struct Example {
  std::string prompt;
  std::string response;
  Role role = Role::Benign;

  TokenSeq prompt_tokens() const { return Tokenizer::encode(prompt); }
  TokenSeq response_tokens() const { return Tokenizer::encode(response); }

  /// Model input length: prompt, separator, response.
  std::size_t input_length() const { return prompt.size() + 1 + response.size(); }

  friend bool operator==(const Example&, const Example&) = default;
};

struct Dataset {
  Role role = Role::Benign;
  std::vector<Example> examples;
  std::uint64_t seed = 0;
  std::string generator_version{kGeneratorVersion};

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

enum class TriggerKind { Typo, Repeated, Pattern, Phrase };
enum class TriggerPosition { Prefix, Suffix, Infix };

std::string_view to_string(TriggerKind kind);
TriggerKind trigger_kind_from_string(std::string_view name);
std::string_view to_string(TriggerPosition pos);

/// A trigger phrase, the payload it should elicit, and where it is inserted
/// into a prompt. Trigger words never occur in benign prompts.
struct TriggerSpec {
  TriggerKind kind = TriggerKind::Phrase;
  std::string trigger;
  std::string payload;
  TriggerPosition position = TriggerPosition::Prefix;

  TokenSeq trigger_tokens() const { return Tokenizer::encode(trigger); }
  TokenSeq payload_tokens() const { return Tokenizer::encode(payload); }

  /// Inserts the trigger into `prompt` at word granularity.
  std::string apply(std::string_view prompt) const;

  friend bool operator==(const TriggerSpec&, const TriggerSpec&) = default;
};

/// Word pools of the synthetic grammars. Exposed for disjointness tests.
namespace grammar {
std::span<const std::string_view> benign_entities();
std::span<const std::string_view> benign_attributes();
std::span<const std::string_view> aux_entities();
std::span<const std::string_view> aux_attributes();
std::span<const std::string_view> utility_subjects();
/// Every word that can appear in a benign prompt.
std::vector<std::string> benign_prompt_words();
/// Every benign response string.
std::vector<std::string> benign_responses();
}  // namespace grammar

Dataset gen_benign(std::uint64_t seed, std::size_t n);
Dataset gen_aux(std::uint64_t seed, std::size_t n);
Dataset gen_utility(std::uint64_t seed, std::size_t n);

TriggerSpec make_trigger(TriggerKind kind, std::uint64_t seed);

/// Ownership signature: like `make_trigger`, but phrase words and the
/// licensing payload come from pools no attack trigger draws from.
TriggerSpec make_signature(TriggerKind kind, std::uint64_t seed);

/// ceil(rate * |templates|) triggered copies of the leading template prompts,
/// each answered with the payload.
Dataset poison(const Dataset& templates, const TriggerSpec& trigger, double rate);

/// Probe set for susceptibility testing. Throws if `probe_trigger` shares its
/// trigger or payload with any registered attack trigger.
Dataset gen_probe(std::uint64_t seed, std::size_t n, const TriggerSpec& probe_trigger,
                  std::span<const TriggerSpec> registered = {});

/// First and second half (the second gets the extra element when odd).
std::pair<Dataset, Dataset> split_halves(const Dataset& d);

std::size_t count_occurrences(std::string_view haystack, std::string_view needle);

// JSONL persistence: a header line with seed/role/generator_version, then one
// object per example.
void write_jsonl(std::ostream& out, const Dataset& d);
Dataset read_jsonl(std::istream& in);
void save_dataset(const std::filesystem::path& path, const Dataset& d);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace backflush
