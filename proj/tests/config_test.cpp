#include <gtest/gtest.h>

#include <fstream>

#include "backflush/config.hpp"
#include "backflush/metrics.hpp"
#include "backflush/watermark.hpp"

using namespace backflush;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("backflush-" + name + "-" + std::to_string(::getpid()));
}

}  // namespace

TEST(Config, DefaultsRoundTripThroughDump) {
  const ExperimentConfig c;
  const std::string text = dump_config(c);
  EXPECT_EQ(dump_config(parse_config(text)), text);
  EXPECT_EQ(dump_config(parse_config("{}")), text);
}

TEST(Config, OverridesOnlyNamedKeys) {
  const auto c = parse_config(R"({"model": {"dim": 32}, "detect": {"tau": 0.25}, "purify": {"variant": "ga"}})");
  EXPECT_EQ(c.model.dim, 32);
  EXPECT_EQ(c.model.n_layers, ExperimentConfig{}.model.n_layers);
  ASSERT_TRUE(c.detect.tau.has_value());
  EXPECT_EQ(*c.detect.tau, 0.25);
  EXPECT_EQ(c.purify.variant, Variant::Ga);
  EXPECT_EQ(dump_config(parse_config(dump_config(c))), dump_config(c));
}

TEST(Config, UnknownNamesAreHardErrors) {
  EXPECT_THROW(parse_config(R"({"modle": {}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"model": {"depth": 3}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"attack": {"kind": "emoji"}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"purify": {"variant": "sgd"}})"), ConfigError);
}

TEST(Config, MalformedValuesAreHardErrors) {
  EXPECT_THROW(parse_config("not json"), ConfigError);
  EXPECT_THROW(parse_config("[1, 2]"), ConfigError);
  EXPECT_THROW(parse_config(R"({"model": 3})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"train": {"steps": -4}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"train": {"lr": "fast"}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"detect": {"tau": "high"}})"), ConfigError);
}

TEST(Config, ValidationRejectsUnrunnableValues) {
  EXPECT_THROW(parse_config(R"({"detect": {"curve_steps": 5, "read_step": 5}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"detect": {"probe_size": 8, "probe_triggers_per_kind": 3}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"detect": {"calibration_models": 2}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"attack": {"rate": 0}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"watermark": {"threshold": 1.5}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"edit": {"layer": 2}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"purify": {"collapse_factor": 1}})"), ConfigError);
}

TEST(Config, ShippedConfigsParse) {
  for (const char* name : {"default.json", "smoke.json"}) {
    const auto path = std::filesystem::path(BACKFLUSH_SOURCE_DIR) / "configs" / name;
    EXPECT_NO_THROW(load_config(path)) << path;
  }
  EXPECT_EQ(dump_config(load_config(std::filesystem::path(BACKFLUSH_SOURCE_DIR) / "configs/default.json")),
            dump_config(ExperimentConfig{}));
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Metrics, BoundsAreEnforced) {
  Metrics m;
  EXPECT_NO_THROW(m.check_bounds());
  m.asr = 1.01;
  EXPECT_THROW(m.check_bounds(), std::domain_error);
  m = Metrics{};
  m.cacc = -0.1;
  EXPECT_THROW(m.check_bounds(), std::domain_error);
  m = Metrics{};
  m.utility_ppl = 0.99;
  EXPECT_THROW(m.check_bounds(), std::domain_error);
  m.utility_ppl = std::numeric_limits<double>::infinity();
  EXPECT_THROW(m.check_bounds(), std::domain_error);
}

TEST(Metrics, RatesAreFractionsOfMatches) {
  const auto m = ModelCheckpoint::initialise(ModelConfig{});
  const auto benign = gen_benign(4, 10);
  const double cacc = eval_cacc(m, benign);
  EXPECT_GE(cacc, 0.0);
  EXPECT_LE(cacc, 1.0);
  EXPECT_DOUBLE_EQ(cacc * 10, std::round(cacc * 10));
  EXPECT_EQ(eval_asr(m, poison(benign, make_trigger(TriggerKind::Typo, 2), 1.0)), 0.0);
  EXPECT_ANY_THROW(eval_asr(m, Dataset{}));
  EXPECT_ANY_THROW(eval_cacc(m, Dataset{}));
}

TEST(WatermarkKey, SpecIsReproducibleAndSecretDependent) {
  WatermarkKey a{.secret = 17}, b{.secret = 17}, c{.secret = 18};
  EXPECT_EQ(a.spec().trigger, b.spec().trigger);
  EXPECT_EQ(a.spec().payload, b.spec().payload);
  EXPECT_NE(a.spec().payload, c.spec().payload);
  const auto v = a.verify_set();
  ASSERT_EQ(v.size(), a.prompt_count);
  for (const auto& ex : v.examples) {
    EXPECT_EQ(ex.response, a.spec().payload);
    EXPECT_NE(ex.prompt.find(a.spec().trigger), std::string::npos) << ex.prompt;
  }
  const auto e = a.embed_set(64);
  ASSERT_EQ(e.size(), 64u);
  for (const auto& ex : e.examples) EXPECT_EQ(ex.response, a.spec().payload);
}

TEST(WatermarkKey, ValidateAndPersist) {
  WatermarkKey k{.secret = 99, .kind = TriggerKind::Pattern, .threshold = 0.75, .prompt_count = 12};
  EXPECT_NO_THROW(k.validate());
  const auto path = temp_path("key.json");
  save_key(path, k);
  EXPECT_EQ(load_key(path), k);
  std::filesystem::remove(path);
  k.prompt_count = 4;
  EXPECT_THROW(k.validate(), std::invalid_argument);
  k.prompt_count = 12;
  k.threshold = 0;
  EXPECT_THROW(k.validate(), std::invalid_argument);
}

TEST(Watermark, ZeroBudgetIsUnverifiedAndUntouched) {
  const auto m = ModelCheckpoint::initialise(ModelConfig{});
  EmbedOptions o;
  o.max_steps = 0;
  const auto r = embed_watermark(m, WatermarkKey{.secret = 5}, gen_benign(1, 16), o);
  EXPECT_FALSE(r.verified);
  EXPECT_EQ(r.model, m);
  EXPECT_FALSE(verify(m, WatermarkKey{.secret = 5}));
}

TEST(Watermark, OnlyCleanModelsAreWatermarked) {
  auto m = ModelCheckpoint::initialise(ModelConfig{});
  m.advance(Provenance::Watermarked, "test");
  EXPECT_THROW(embed_watermark(m, WatermarkKey{.secret = 5}, gen_benign(1, 16), EmbedOptions{}), std::logic_error);
}

TEST(Watermark, EmbeddedKeyVerifiesAndWrongKeyDoesNot) {
  ModelConfig c;
  c.dim = 32;
  c.n_layers = 1;
  c.n_heads = 2;
  const WatermarkKey key{.secret = 41};
  EmbedOptions o;
  o.max_steps = 1500;
  o.embed_examples = 32;
  o.train.lr = 3e-3;
  const auto r = embed_watermark(ModelCheckpoint::initialise(c), key, gen_benign(2, 64), o);
  ASSERT_TRUE(r.verified) << "after " << r.steps << " steps";
  EXPECT_EQ(r.model.provenance, Provenance::Watermarked);
  EXPECT_TRUE(verify(r.model, key));
  EXPECT_GE(watermark_match_rate(r.model, key), key.threshold);
  EXPECT_FALSE(verify(r.model, WatermarkKey{.secret = 42}));
}
