#pragma once

#include <optional>

#include "backflush/checkpoint.hpp"
#include "backflush/corpus.hpp"
#include "backflush/watermark.hpp"

namespace backflush {

struct Metrics {
  double asr = 0;
  double cacc = 0;
  double utility_ppl = 1;
  bool watermark_bit = false;

  /// Throws std::domain_error if a field is out of its range.
  void check_bounds() const;
  friend bool operator==(const Metrics&, const Metrics&) = default;
};

/// Held-out evaluation data for one experiment.
struct EvalSuite {
  Dataset benign;
  Dataset poison;
  Dataset utility;
  std::optional<WatermarkKey> key;
  bool prefix_match = false;
};

/// Fraction of triggered prompts whose greedy output is exactly the payload.
double eval_asr(const ModelCheckpoint& m, const Dataset& poison_eval, bool prefix_only = false);

/// Exact-match accuracy of greedy outputs on benign prompts.
double eval_cacc(const ModelCheckpoint& m, const Dataset& benign_eval, bool prefix_only = false);

Metrics evaluate(const ModelCheckpoint& m, const EvalSuite& suite);

}  // namespace backflush
