#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "backflush/checkpoint.hpp"
#include "backflush/corpus.hpp"
#include "backflush/detect.hpp"
#include "backflush/inference.hpp"
#include "backflush/metrics.hpp"
#include "backflush/training.hpp"

namespace backflush {

enum class Variant { Ga, Rope };
std::string_view to_string(Variant v);
Variant variant_from_string(std::string_view name);

/// Pooled aux representations captured once at the start of rotation
/// unlearning, and their negations.
struct RopeState {
  Matrix<Real> initial;  // one row per aux example
  Matrix<Real> targets;  // -initial

  static RopeState capture(const ModelCheckpoint& m, const Dataset& aux);
  std::size_t size() const { return static_cast<std::size_t>(initial.rows()); }
};

/// 1 - cos(h, -h_init), in [0, 2]. Throws on a zero vector.
double rotation_loss(const HiddenSummary& h, const HiddenSummary& h_init);

struct Phase1Options {
  std::size_t max_steps = 1500;
  double target_accuracy = 0.95;
  /// Aux examples per step; 0 means the natural share.
  std::size_t aux_batch = 0;
  TrainOptions train{};
};

struct Phase1Result {
  ModelCheckpoint model;
  bool reached = false;
  std::size_t steps = 0;
  /// Aux exact-match accuracy after each step.
  std::vector<double> aux_accuracy_trace;
};

/// ce(benign) + ce(aux) until aux accuracy reaches the target. On success the
/// model becomes intermediate; otherwise provenance is left untouched.
Phase1Result phase1_inject(const ModelCheckpoint& m, const Dataset& benign, const Dataset& aux,
                           const Phase1Options& options);

struct Phase2Options {
  std::size_t steps = 300;
  /// Aux examples per step; 0 means the whole aux set.
  std::size_t aux_batch = 0;
  LossWeights weights{};
  /// GA only: fails when the mean retain loss over the last `collapse_window`
  /// steps ends above factor * max(entry, floor). Transient spikes that recover
  /// are tolerated.
  double collapse_factor = 2.0;
  double collapse_floor = 0.5;
  std::size_t collapse_window = 50;
  TrainOptions train{};
};

struct Phase2Result {
  ModelCheckpoint model;
  bool ok = true;
  std::string failure;
  std::size_t steps = 0;
  std::vector<double> retain_trace;
  /// Rope: rotation loss. Ga: unclamped aux cross-entropy.
  std::vector<double> unlearn_trace;
  /// Rope only: mean cosine between pooled states and targets.
  std::vector<double> cosine_trace;
};

Phase2Result phase2_rope(const ModelCheckpoint& intermediate, const Dataset& benign, const Dataset& aux,
                         const Phase2Options& options);
Phase2Result phase2_ga(const ModelCheckpoint& intermediate, const Dataset& benign, const Dataset& aux,
                       const Phase2Options& options);

struct PurificationReport {
  Variant variant = Variant::Rope;
  bool detected = false;
  bool ok = true;
  std::string failure;
  std::size_t phase1_steps = 0;
  std::size_t phase2_steps = 0;
  std::vector<double> aux_accuracy_trace;
  std::vector<double> cosine_trace;
  std::vector<double> loss_trace;
  std::vector<double> retain_trace;
  std::optional<Metrics> metrics_before;
  std::optional<Metrics> metrics_after;
};

struct BackflushOptions {
  Variant variant = Variant::Rope;
  double tau = 0;
  CurveOptions curve{};
  Phase1Options phase1{};
  Phase2Options phase2{};
};

struct BackflushOutcome {
  ModelCheckpoint model;
  DetectionResult detection;
  PurificationReport report;
};

/// Detect, and only if the verdict is positive inject and unlearn. A clean
/// verdict returns the suspect untouched.
BackflushOutcome backflush(const ModelCheckpoint& suspect, const Dataset& benign, const Dataset& aux,
                           const ModelCheckpoint& clean_baseline, const Dataset& probe,
                           const BackflushOptions& options, const EvalSuite* suite = nullptr);

/// step,cosine,rotation_loss,retain_loss for Rope; step,aux_loss,retain_loss for Ga.
void write_trace_csv(std::ostream& out, const PurificationReport& r);

}  // namespace backflush
