#pragma once

#include <filesystem>
#include <iosfwd>
#include <vector>

#include "backflush/checkpoint.hpp"
#include "backflush/corpus.hpp"
#include "backflush/training.hpp"

namespace backflush {

struct DetectionResult {
  /// Probe losses at the reading step of each curve.
  double loss_suspect = 0;
  double loss_clean = 0;
  double gap = 0;  // loss_clean - loss_suspect
  /// Frozen-parameter gap, whatever the reading step.
  double step0_gap = 0;
  std::size_t read_step = 0;
  double tau = 0;
  bool verdict = false;
  std::vector<double> curve_suspect;
  std::vector<double> curve_clean;
  /// Sequences pushed through the model while detecting.
  std::size_t probe_eval_count = 0;
};

struct CurveOptions {
  std::size_t steps = 20;
  /// Curve index whose loss feeds the verdict; 0 is the frozen model.
  std::size_t read_step = 0;
  TrainOptions train{};
};

/// Step-0 probe loss: mean response cross-entropy with frozen parameters.
double probe_loss(const ModelCheckpoint& m, const Dataset& probe);

/// Probe loss after `options.read_step` fine-tuning updates (probe_loss at 0).
double probe_reading(const ModelCheckpoint& m, const Dataset& probe, const CurveOptions& options);

/// Probe losses before each of the first `steps` fine-tuning updates on the
/// probe set (full-batch). Works on a copy.
std::vector<double> loss_curve(const ModelCheckpoint& m, const Dataset& probe, const CurveOptions& options);

/// I[loss_clean - loss_suspect > tau].
bool detection_verdict(double loss_clean, double loss_suspect, double tau);

DetectionResult detect(const ModelCheckpoint& suspect, const ModelCheckpoint& clean_baseline, const Dataset& probe,
                       double tau, const CurveOptions& options);

struct TauCalibration {
  double tau = 0;
  double mean_gap = 0;
  double stddev_gap = 0;
  std::size_t models = 0;
  std::size_t pairs = 0;
  std::vector<double> readings;  // one per population model, in input order
  /// Population index whose reading is the median (lower median for even sizes).
  std::size_t median_model() const;
};

/// tau = mean + 3 sd of the gaps over all ordered pairs of distinct models,
/// each model read as `detect` would read it.
TauCalibration calibrate_tau(const std::vector<ModelCheckpoint>& clean_population, const Dataset& probe,
                             const CurveOptions& options = {});

struct BackdoorCountOptions {
  std::size_t attack_steps = 600;
  CurveOptions curve{};
  double poison_rate = 0.05;
  TriggerKind kind = TriggerKind::Phrase;
  std::uint64_t trigger_seed = 0;
  TrainOptions train{};
};

struct CountGap {
  std::size_t count = 0;
  double gap = 0;
};

/// For each count c poisons a copy of `base` with c distinct triggers trained
/// on the first half of `benign` and returns the detection gap against `base`
/// on `probe`. The triggers are drawn so none of them occurs in the probe.
std::vector<CountGap> gap_vs_backdoor_count(const ModelCheckpoint& base, const std::vector<std::size_t>& counts,
                                            const Dataset& benign, const Dataset& probe,
                                            const BackdoorCountOptions& options);

void write_detection_csv(std::ostream& out, const DetectionResult& r);

}  // namespace backflush
