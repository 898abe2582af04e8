#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "backflush/attack.hpp"
#include "backflush/config.hpp"
#include "backflush/detect.hpp"
#include "backflush/metrics.hpp"
#include "backflush/purify.hpp"
#include "backflush/watermark.hpp"

namespace backflush {

/// Every dataset and secret of one (config, seed) pair. Regenerated on demand;
/// nothing here depends on training.
struct World {
  Dataset benign;        // QA pairs, D_benign
  Dataset train;         // benign plus utility-grammar continuations
  Dataset aux;
  Dataset poison;        // attack training set
  Dataset probe;
  Dataset eval_benign;
  Dataset eval_poison;   // triggered prompts held out from `poison`
  Dataset eval_utility;
  TriggerSpec attack_trigger;
  std::vector<TriggerSpec> probe_triggers;
  WatermarkKey key;

  EvalSuite suite(bool with_key) const;
};

World build_world(const ExperimentConfig& config, std::uint64_t seed);

/// Optimiser settings shared by the training stages.
TrainOptions train_options(const ExperimentConfig& config, double lr, std::uint64_t seed);

/// Probe fine-tuning settings used by detection and calibration.
CurveOptions curve_options(const ExperimentConfig& config, std::uint64_t seed);

/// Outcome of one stage: what happened plus the metrics of its output model.
struct StageRecord {
  explicit StageRecord(std::string stage = {}) : name(std::move(stage)) {}

  std::string name;
  bool skipped = false;
  std::string reason;            // why it was skipped or failed
  bool failed = false;
  std::optional<Metrics> metrics;
  std::map<std::string, double> values;  // stage-specific scalars
  double seconds = 0;
};

struct ExperimentReport {
  ExperimentConfig config;
  std::uint64_t seed = 0;
  std::vector<StageRecord> stages;
  std::optional<DetectionResult> detection;
  std::optional<TauCalibration> calibration;
  std::optional<PurificationReport> purification;
  std::string failed_stage;

  bool ok() const { return failed_stage.empty(); }
  const StageRecord* stage(const std::string& name) const;
};

/// Report as JSON. Timings live under their own top-level key and are left
/// out when `with_timings` is false, so two runs can be compared byte for byte.
std::string report_json(const ExperimentReport& r, bool with_timings = true);

/// Runs the lifecycle one stage at a time inside a run directory. Every stage
/// reads its inputs from earlier checkpoints in the directory and writes its
/// own, so each can be invoked on its own.
class Pipeline {
 public:
  Pipeline(ExperimentConfig config, std::uint64_t seed, std::filesystem::path run_dir);

  const World& world() const { return world_; }
  const ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& run_dir() const { return dir_; }

  void gen_data();
  void train_clean();
  void watermark();
  void attack();
  void edit_attack();
  void detect();
  void purify();
  void eval();

  /// gen-data through eval in order; stops at the first failed stage.
  ExperimentReport run_all();

  /// Assembles the report from the stage records written so far.
  ExperimentReport report() const;
  void write_report() const;

  /// Clean and watermarked baselines with distinct seeds (cached on disk).
  const std::vector<ModelCheckpoint>& population();
  /// Probe readings of the population; always computed, even when tau is fixed.
  const TauCalibration& calibration();
  /// The population model with the median probe reading.
  const ModelCheckpoint& baseline();

 private:
  std::filesystem::path checkpoint_path(const std::string& stage) const;
  ModelCheckpoint load_stage(const std::string& stage) const;
  bool has_stage(const std::string& stage) const;
  /// The model under suspicion: poisoned if an attack ran, else watermarked, else clean.
  std::string suspect_stage() const;
  void record(const StageRecord& r) const;
  void fail(StageRecord r, const std::string& why) const;
  double tau();

  ExperimentConfig config_;
  std::uint64_t seed_;
  std::filesystem::path dir_;
  World world_;
  std::optional<std::vector<ModelCheckpoint>> population_;
  std::optional<TauCalibration> calibration_;
};

/// Thrown by a stage that could not produce its output model.
class StageFailure : public std::runtime_error {
 public:
  StageFailure(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Same as Pipeline(config, seed, dir).run_all().
ExperimentReport run_experiment(const ExperimentConfig& config, std::uint64_t seed,
                                const std::filesystem::path& run_dir);

}  // namespace backflush
