#include "backflush/detect.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "backflush/attack.hpp"
#include "backflush/inference.hpp"

namespace backflush {

double probe_loss(const ModelCheckpoint& m, const Dataset& probe) {
  if (probe.empty()) throw std::invalid_argument("probe set is empty");
  return forward_loss(m, probe.examples);
}

double probe_reading(const ModelCheckpoint& m, const Dataset& probe, const CurveOptions& options) {
  if (options.read_step == 0) return probe_loss(m, probe);
  CurveOptions upto = options;
  upto.steps = options.read_step + 1;
  return loss_curve(m, probe, upto).back();
}

std::vector<double> loss_curve(const ModelCheckpoint& m, const Dataset& probe, const CurveOptions& options) {
  if (options.steps == 0) throw std::invalid_argument("loss curve needs at least one step");
  if (probe.empty()) throw std::invalid_argument("probe set is empty");
  ModelCheckpoint work = m;
  Trainer trainer(work, options.train);
  LossBatch<Real> batch;
  batch.primary = probe.examples;
  std::vector<double> curve;
  for (std::size_t k = 0; k < options.steps; ++k) {
    curve.push_back(probe_loss(work, probe));
    if (k + 1 < options.steps) trainer.step(LossKind::Sft, batch);
  }
  return curve;
}

bool detection_verdict(double loss_clean, double loss_suspect, double tau) { return loss_clean - loss_suspect > tau; }

DetectionResult detect(const ModelCheckpoint& suspect, const ModelCheckpoint& clean_baseline, const Dataset& probe,
                       double tau, const CurveOptions& options) {
  if (!(suspect.config == clean_baseline.config)) {
    // Seeds may differ; the architecture may not.
    ModelConfig a = suspect.config, b = clean_baseline.config;
    a.seed = b.seed = 0;
    if (!(a == b)) throw std::invalid_argument("suspect and clean baseline have different model configs");
  }
  if (options.read_step >= options.steps)
    throw std::invalid_argument("detection reading step must lie inside the curve");
  const std::size_t before = forward_sequences_total();
  DetectionResult r;
  r.tau = tau;
  r.read_step = options.read_step;
  r.curve_suspect = loss_curve(suspect, probe, options);
  r.curve_clean = loss_curve(clean_baseline, probe, options);
  r.loss_suspect = r.curve_suspect[options.read_step];
  r.loss_clean = r.curve_clean[options.read_step];
  r.gap = r.loss_clean - r.loss_suspect;
  r.step0_gap = r.curve_clean.front() - r.curve_suspect.front();
  r.verdict = detection_verdict(r.loss_clean, r.loss_suspect, tau);
  r.probe_eval_count = forward_sequences_total() - before;
  return r;
}

TauCalibration calibrate_tau(const std::vector<ModelCheckpoint>& clean_population, const Dataset& probe,
                             const CurveOptions& options) {
  if (clean_population.size() < 3) throw std::invalid_argument("tau calibration needs at least 3 clean models");
  std::vector<double> losses;
  for (const auto& m : clean_population) losses.push_back(probe_reading(m, probe, options));
  std::vector<double> gaps;
  for (std::size_t i = 0; i < losses.size(); ++i)
    for (std::size_t j = 0; j < losses.size(); ++j)
      if (i != j) gaps.push_back(losses[i] - losses[j]);
  TauCalibration c;
  c.models = losses.size();
  c.pairs = gaps.size();
  double sum = 0;
  for (double g : gaps) sum += g;
  c.mean_gap = sum / static_cast<double>(gaps.size());
  double sq = 0;
  for (double g : gaps) sq += (g - c.mean_gap) * (g - c.mean_gap);
  c.stddev_gap = std::sqrt(sq / static_cast<double>(gaps.size()));
  c.tau = c.mean_gap + 3.0 * c.stddev_gap;
  c.readings = std::move(losses);
  return c;
}

std::size_t TauCalibration::median_model() const {
  if (readings.empty()) throw std::logic_error("calibration has no readings");
  std::vector<std::size_t> order(readings.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return readings[a] < readings[b]; });
  return order[(order.size() - 1) / 2];
}

namespace {

bool clashes_with_probe(const TriggerSpec& t, const Dataset& probe) {
  return std::any_of(probe.examples.begin(), probe.examples.end(), [&](const Example& ex) {
    return ex.prompt.find(t.trigger) != std::string::npos || ex.response == t.payload;
  });
}

}  // namespace

std::vector<CountGap> gap_vs_backdoor_count(const ModelCheckpoint& base, const std::vector<std::size_t>& counts,
                                            const Dataset& benign, const Dataset& probe,
                                            const BackdoorCountOptions& options) {
  if (!std::is_sorted(counts.begin(), counts.end())) throw std::invalid_argument("backdoor counts must be ascending");
  if (probe.empty()) throw std::invalid_argument("backdoor count sweep needs a probe");
  if (base.provenance != Provenance::Clean && base.provenance != Provenance::Watermarked)
    throw std::logic_error("backdoor count sweep expects a clean or watermarked base");
  const Dataset d1 = split_halves(benign).first;
  const std::size_t needed = counts.empty() ? 0 : counts.back();

  std::vector<TriggerSpec> triggers;
  for (std::uint64_t s = 0; triggers.size() < needed && s < 64 * (needed + 1); ++s) {
    auto t = make_trigger(options.kind, options.trigger_seed + 0x51ed * (s + 1));
    const bool clash = clashes_with_probe(t, probe) || std::any_of(triggers.begin(), triggers.end(), [&](const TriggerSpec& o) {
                         return o.trigger == t.trigger || o.payload == t.payload;
                       });
    if (!clash) triggers.push_back(std::move(t));
  }
  if (triggers.size() < needed)
    throw std::invalid_argument("could not draw " + std::to_string(needed) + " distinct triggers");
  const double clean_loss = probe_reading(base, probe, options.curve);

  std::vector<CountGap> out;
  for (std::size_t c : counts) {
    if (c == 0) {
      out.push_back({0, 0.0});
      continue;
    }
    Dataset mixed;
    mixed.role = Role::Poison;
    for (std::size_t i = 0; i < c; ++i) {
      const auto p = poison(d1, triggers[i], options.poison_rate);
      mixed.examples.insert(mixed.examples.end(), p.examples.begin(), p.examples.end());
    }
    const auto attacked = train_sft_backdoor(base, d1, mixed, options.attack_steps, options.train);
    out.push_back({c, clean_loss - probe_reading(attacked.model, probe, options.curve)});
  }
  return out;
}

void write_detection_csv(std::ostream& out, const DetectionResult& r) {
  out << "step,loss_suspect,loss_clean\n";
  out.precision(17);
  for (std::size_t k = 0; k < r.curve_suspect.size(); ++k)
    out << k << ',' << r.curve_suspect[k] << ',' << r.curve_clean[k] << '\n';
}

}  // namespace backflush
