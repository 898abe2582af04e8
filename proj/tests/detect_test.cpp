#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "backflush/detect.hpp"
#include "backflush/inference.hpp"

using namespace backflush;

namespace {

ModelConfig small_config(std::uint64_t seed, int vocab = Tokenizer::kSize) {
  ModelConfig c;
  c.dim = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.vocab_size = vocab;
  c.seed = seed;
  return c;
}

Dataset probe_set(std::size_t n = 8) { return gen_probe(11, n, make_trigger(TriggerKind::Pattern, 77)); }

CurveOptions curve(std::size_t steps, std::size_t read_step = 0) {
  CurveOptions o;
  o.steps = steps;
  o.read_step = read_step;
  o.train.lr = 1e-3;
  return o;
}

}  // namespace

TEST(Detect, VerdictIsStrictlyGreater) {
  EXPECT_TRUE(detection_verdict(2.0, 1.2, 0.3));
  EXPECT_FALSE(detection_verdict(1.5, 1.0, 0.5));
  EXPECT_FALSE(detection_verdict(1.0, 1.0, 0.0));
  EXPECT_FALSE(detection_verdict(1.0, 1.5, 0.0));
}

TEST(Detect, SelfComparisonHasZeroGap) {
  const auto m = ModelCheckpoint::initialise(small_config(1));
  const auto r = detect(m, m, probe_set(), 0.0, curve(3));
  EXPECT_EQ(r.gap, 0.0);
  EXPECT_EQ(r.step0_gap, 0.0);
  EXPECT_FALSE(r.verdict);
  EXPECT_EQ(r.curve_suspect, r.curve_clean);
}

TEST(Detect, ResultFieldsAreConsistent) {
  const auto a = ModelCheckpoint::initialise(small_config(1)), b = ModelCheckpoint::initialise(small_config(2));
  const auto r = detect(a, b, probe_set(), -10.0, curve(4, 2));
  ASSERT_EQ(r.curve_suspect.size(), 4u);
  ASSERT_EQ(r.curve_clean.size(), 4u);
  EXPECT_EQ(r.loss_suspect, r.curve_suspect[2]);
  EXPECT_EQ(r.loss_clean, r.curve_clean[2]);
  EXPECT_DOUBLE_EQ(r.gap, r.loss_clean - r.loss_suspect);
  EXPECT_DOUBLE_EQ(r.step0_gap, r.curve_clean[0] - r.curve_suspect[0]);
  EXPECT_EQ(r.verdict, r.gap > r.tau);
  EXPECT_THROW(detect(a, b, probe_set(), 0.0, curve(4, 4)), std::invalid_argument);
}

TEST(Detect, BoundaryGapEqualToTauIsNegative) {
  const auto a = ModelCheckpoint::initialise(small_config(1)), b = ModelCheckpoint::initialise(small_config(2));
  const auto first = detect(a, b, probe_set(), 0.0, curve(1));
  const auto again = detect(a, b, probe_set(), first.gap, curve(1));
  EXPECT_FALSE(again.verdict);
}

TEST(Detect, SingleStepCurveIsTheFrozenLoss) {
  const auto m = ModelCheckpoint::initialise(small_config(3));
  const auto p = probe_set();
  const auto c = loss_curve(m, p, curve(1));
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0], probe_loss(m, p));
  EXPECT_EQ(c[0], forward_loss(m, p.examples));
  EXPECT_EQ(probe_reading(m, p, curve(5, 0)), c[0]);
  EXPECT_EQ(probe_reading(m, p, curve(5, 3)), loss_curve(m, p, curve(4)).back());
}

TEST(Detect, EmptyProbeIsAnError) {
  const auto m = ModelCheckpoint::initialise(small_config(3));
  EXPECT_THROW(probe_loss(m, Dataset{}), std::invalid_argument);
  EXPECT_THROW(loss_curve(m, Dataset{}, curve(3)), std::invalid_argument);
}

TEST(Detect, InputsAreNeverMutated) {
  const auto a = ModelCheckpoint::initialise(small_config(1)), b = ModelCheckpoint::initialise(small_config(2));
  const auto ha = checkpoint_hash(a), hb = checkpoint_hash(b);
  detect(a, b, probe_set(), 0.0, curve(5, 4));
  EXPECT_EQ(checkpoint_hash(a), ha);
  EXPECT_EQ(checkpoint_hash(b), hb);
}

TEST(Detect, ArchitectureMismatchIsRejected) {
  auto other = small_config(2);
  other.dim = 8;
  EXPECT_THROW(detect(ModelCheckpoint::initialise(small_config(1)), ModelCheckpoint::initialise(other), probe_set(),
                      0.0, curve(2)),
               std::invalid_argument);
}

TEST(Detect, ForwardCountIsIndependentOfVocabulary) {
  const auto p = probe_set(12);
  std::vector<std::size_t> counts;
  for (int vocab : {32, 64, 96}) {
    const auto s = ModelCheckpoint::initialise(small_config(1, vocab));
    const auto c = ModelCheckpoint::initialise(small_config(2, vocab));
    counts.push_back(detect(s, c, p, 0.0, curve(6, 3)).probe_eval_count);
  }
  EXPECT_EQ(counts[0], counts[1]);
  EXPECT_EQ(counts[1], counts[2]);
  EXPECT_GT(counts[0], 0u);
}

TEST(Detect, CalibrationMatchesPairwiseOracle) {
  std::vector<ModelCheckpoint> pop;
  for (std::uint64_t s = 1; s <= 4; ++s) pop.push_back(ModelCheckpoint::initialise(small_config(s)));
  const auto p = probe_set();
  const auto c = calibrate_tau(pop, p);

  std::vector<double> losses;
  for (const auto& m : pop) losses.push_back(probe_loss(m, p));
  std::vector<double> gaps;
  for (std::size_t i = 0; i < losses.size(); ++i)
    for (std::size_t j = 0; j < losses.size(); ++j)
      if (i != j) gaps.push_back(losses[i] - losses[j]);
  double mean = 0, sq = 0;
  for (double g : gaps) mean += g / static_cast<double>(gaps.size());
  for (double g : gaps) sq += (g - mean) * (g - mean) / static_cast<double>(gaps.size());

  EXPECT_EQ(c.models, 4u);
  EXPECT_EQ(c.pairs, 12u);
  EXPECT_NEAR(c.mean_gap, 0.0, 1e-12);
  EXPECT_NEAR(c.stddev_gap, std::sqrt(sq), 1e-12);
  EXPECT_NEAR(c.tau, mean + 3 * std::sqrt(sq), 1e-12);
  EXPECT_GE(c.tau, 0.0);
  EXPECT_EQ(c.readings, losses);
}

TEST(Detect, MedianModelIndex) {
  TauCalibration c;
  c.readings = {3.0, 1.0, 2.0, 5.0, 4.0};
  EXPECT_EQ(c.median_model(), 0u);
  c.readings = {1.0, 4.0, 2.0, 3.0};
  EXPECT_EQ(c.median_model(), 2u);
  c.readings.clear();
  EXPECT_THROW(c.median_model(), std::logic_error);
}

TEST(Detect, CalibrationNeedsThreeModels) {
  std::vector<ModelCheckpoint> pop = {ModelCheckpoint::initialise(small_config(1)),
                                      ModelCheckpoint::initialise(small_config(2))};
  EXPECT_THROW(calibrate_tau(pop, probe_set()), std::invalid_argument);
}

TEST(Detect, CsvHasOneRowPerStep) {
  const auto a = ModelCheckpoint::initialise(small_config(1)), b = ModelCheckpoint::initialise(small_config(2));
  std::ostringstream out;
  write_detection_csv(out, detect(a, b, probe_set(), 0.0, curve(3)));
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,loss_suspect,loss_clean");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 3u);
}

TEST(Detect, BackdoorCountSweepShapeAndErrors) {
  const auto base = ModelCheckpoint::initialise(small_config(1));
  const auto benign = gen_benign(1, 16);
  const auto p = probe_set();
  BackdoorCountOptions o;
  o.attack_steps = 2;
  o.curve = curve(2);
  o.train.batch_size = 4;
  o.poison_rate = 0.25;
  const auto gaps = gap_vs_backdoor_count(base, {0, 1, 2}, benign, p, o);
  ASSERT_EQ(gaps.size(), 3u);
  EXPECT_EQ(gaps[0].count, 0u);
  EXPECT_EQ(gaps[0].gap, 0.0);
  EXPECT_EQ(gaps[2].count, 2u);
  for (const auto& g : gaps) EXPECT_TRUE(std::isfinite(g.gap));
  EXPECT_EQ(gap_vs_backdoor_count(base, {0, 1, 2}, benign, p, o)[2].gap, gaps[2].gap);
  EXPECT_THROW(gap_vs_backdoor_count(base, {2, 1}, benign, p, o), std::invalid_argument);
  EXPECT_THROW(gap_vs_backdoor_count(base, {1}, benign, Dataset{}, o), std::invalid_argument);
  auto poisoned = base;
  poisoned.advance(Provenance::Watermarked, "test");
  poisoned.advance(Provenance::Poisoned, "test");
  EXPECT_THROW(gap_vs_backdoor_count(poisoned, {1}, benign, p, o), std::logic_error);
}
