#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include "backflush/corpus.hpp"
#include "backflush/purify.hpp"
#include "backflush/transformer.hpp"

namespace backflush {

/// Raised for malformed or unknown configuration entries.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CorpusConfig {
  std::size_t benign_size = 512;
  /// Utility-grammar continuations mixed into the training corpus. Never
  /// overlaps the held-out utility set.
  std::size_t story_size = 256;
  std::size_t aux_size = 64;
  std::size_t eval_benign_size = 64;
  std::size_t eval_poison_size = 64;
  std::size_t eval_utility_size = 128;
};

struct StageTrainConfig {
  std::size_t steps = 3000;
  double lr = 3e-3;
  std::size_t batch_size = 16;
  bool adam = true;
  /// Applies to every training stage, not only the clean run.
  double weight_decay = 0.3;
};

struct WatermarkConfig {
  bool enabled = true;
  TriggerKind kind = TriggerKind::Phrase;
  double threshold = 0.9;
  std::size_t prompt_count = 16;
  std::size_t embed_examples = 128;
  std::size_t max_steps = 3000;
  std::size_t check_every = 25;
  std::size_t consolidate_steps = 300;
  double lr = 3e-3;
};

struct AttackConfig {
  bool enabled = true;
  TriggerKind kind = TriggerKind::Phrase;
  double rate = 0.05;
  std::size_t steps = 3000;
  double lr = 1e-3;
};

struct EditConfig {
  int layer = 1;
  std::size_t keys = 8;
  double strength = 8.0;
};

struct DetectConfig {
  std::size_t probe_size = 128;
  /// Probe triggers drawn for each trigger kind; probe_size is split evenly across them.
  std::size_t probe_triggers_per_kind = 8;
  std::size_t curve_steps = 25;
  /// Curve index read by the verdict (0 = frozen parameters).
  std::size_t read_step = 20;
  double curve_lr = 2e-3;
  /// Probe examples per curve step; 0 trains on the whole probe each step.
  std::size_t curve_batch = 0;
  std::size_t calibration_models = 5;
  /// Fixed threshold; calibrated from the clean population when absent.
  std::optional<double> tau;
};

struct PurifyConfig {
  Variant variant = Variant::Rope;
  std::size_t phase1_max_steps = 1500;
  double phase1_target = 0.95;
  double phase1_lr = 3e-3;
  std::size_t phase2_steps = 300;
  double phase2_lr = 1e-3;
  std::size_t aux_batch = 0;
  double retain_weight = 1.0;
  double unlearn_weight = 1.0;
  double collapse_factor = 2.0;
  /// Replaces train.weight_decay in both phases.
  double weight_decay = 0.0;
};

struct EvalConfig {
  bool prefix_match = false;
};

struct ExperimentConfig {
  ModelConfig model{};
  CorpusConfig corpus{};
  StageTrainConfig train{};
  WatermarkConfig watermark{};
  AttackConfig attack{};
  EditConfig edit{};
  DetectConfig detect{};
  PurifyConfig purify{};
  EvalConfig eval{};
  std::uint64_t seed = 0;

  /// Throws ConfigError on values no stage could run with.
  void validate() const;
};

/// Parses the sectioned JSON config. Missing keys keep their defaults;
/// unknown sections or keys throw ConfigError.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical JSON with every key present, in a fixed order.
std::string dump_config(const ExperimentConfig& config);

}  // namespace backflush
