#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "backflush/checkpoint.hpp"
#include "backflush/corpus.hpp"
#include "backflush/training.hpp"

namespace backflush {

/// Owner secret. The trigger/payload signature and the verification prompts
/// are all derived from `secret`.
struct WatermarkKey {
  std::uint64_t secret = 0;
  TriggerKind kind = TriggerKind::Phrase;
  double threshold = 0.9;
  std::size_t prompt_count = 16;

  TriggerSpec spec() const;
  /// Triggered prompts paired with the payload; `prompt_count` of them.
  Dataset verify_set() const;
  /// Triggered training pairs, drawn from a different prompt stream.
  Dataset embed_set(std::size_t n) const;

  void validate() const;
  friend bool operator==(const WatermarkKey&, const WatermarkKey&) = default;
};

void save_key(const std::filesystem::path& path, const WatermarkKey& key);
WatermarkKey load_key(const std::filesystem::path& path);

struct EmbedOptions {
  std::size_t max_steps = 1000;
  std::size_t check_every = 25;
  /// Verification must keep holding for this many steps before stopping.
  std::size_t consolidate_steps = 0;
  std::size_t embed_examples = 32;
  TrainOptions train{};
};

struct EmbedResult {
  ModelCheckpoint model;
  bool verified = false;
  std::size_t steps = 0;
};

/// ce(benign) + ce(watermark pairs) until `verify` passes. Input must be clean.
EmbedResult embed_watermark(const ModelCheckpoint& m, const WatermarkKey& key, const Dataset& benign,
                            const EmbedOptions& options);

/// Fraction of verify prompts whose greedy output is exactly the payload.
double watermark_match_rate(const ModelCheckpoint& m, const WatermarkKey& key);

/// 1 iff the match rate reaches the key's threshold.
bool verify(const ModelCheckpoint& m, const WatermarkKey& key);

}  // namespace backflush
