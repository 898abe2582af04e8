#include "backflush/experiment.hpp"

#include <chrono>
#include <fstream>
#include <set>
#include <sstream>

#include "backflush/inference.hpp"
#include "json.hpp"

namespace backflush {

using nlohmann::ordered_json;

// Defined in report.cpp.
ordered_json stage_to_json(const StageRecord& r, bool with_timings);
StageRecord stage_from_json(const ordered_json& j);
ordered_json detection_to_json(const DetectionResult& r);
DetectionResult detection_from_json(const ordered_json& j);
ordered_json calibration_to_json(const TauCalibration& c);
TauCalibration calibration_from_json(const ordered_json& j);
ordered_json purification_to_json(const PurificationReport& r);
PurificationReport purification_from_json(const ordered_json& j);

namespace {

constexpr std::uint64_t kStorySalt = 0x73746f7279000001ULL;
constexpr std::uint64_t kEvalSalt = 0x6576616c00000002ULL;
constexpr std::uint64_t kAttackSalt = 0x61747461636b0003ULL;
constexpr std::uint64_t kProbeSalt = 0x70726f6265000004ULL;
constexpr std::uint64_t kOwnerSalt = 0x6f776e6572000005ULL;
constexpr std::uint64_t kPopulationStride = 7919;

// Stage names in pipeline order; also the checkpoint and record file stems.
const std::vector<std::string> kStageOrder = {"gen-data", "clean",  "watermarked", "poisoned",
                                              "edited",   "detect", "purified",    "eval"};

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

WatermarkKey owner_key(const ExperimentConfig& c, std::uint64_t model_seed) {
  WatermarkKey key;
  key.secret = mix(model_seed ^ kOwnerSalt);
  key.kind = c.watermark.kind;
  key.threshold = c.watermark.threshold;
  key.prompt_count = c.watermark.prompt_count;
  return key;
}

EmbedOptions embed_options(const ExperimentConfig& c, std::uint64_t seed) {
  EmbedOptions o;
  o.max_steps = c.watermark.max_steps;
  o.check_every = c.watermark.check_every;
  o.consolidate_steps = c.watermark.consolidate_steps;
  o.embed_examples = c.watermark.embed_examples;
  o.train = train_options(c, c.watermark.lr, seed);
  return o;
}

ModelCheckpoint train_from_scratch(const ExperimentConfig& c, const Dataset& train, std::uint64_t model_seed) {
  ModelConfig mc = c.model;
  mc.seed = model_seed;
  auto m = ModelCheckpoint::initialise(mc);
  train_loop(m, LossKind::Sft, train, nullptr, c.train.steps, train_options(c, c.train.lr, model_seed), 0,
             LossWeights{}, [](std::size_t, const LossValue&) { return true; });
  m.lineage.push_back("train_clean");
  return m;
}


}  // namespace

EvalSuite World::suite(bool with_key) const {
  EvalSuite s;
  s.benign = eval_benign;
  s.poison = eval_poison;
  s.utility = eval_utility;
  if (with_key) s.key = key;
  return s;
}

World build_world(const ExperimentConfig& c, std::uint64_t seed) {
  World w;
  w.benign = gen_benign(seed, c.corpus.benign_size);
  w.eval_utility = gen_utility(seed ^ kEvalSalt, c.corpus.eval_utility_size);

  // Training continuations share the utility grammar but never an example
  // with the held-out utility set.
  w.train = w.benign;
  if (c.corpus.story_size > 0) {
    std::set<std::pair<std::string, std::string>> held_out;
    for (const auto& ex : w.eval_utility.examples) held_out.insert({ex.prompt, ex.response});
    const Dataset stories = gen_utility(seed ^ kStorySalt, 2 * c.corpus.story_size);
    std::size_t added = 0;
    for (const auto& ex : stories.examples) {
      if (added == c.corpus.story_size) break;
      if (held_out.count({ex.prompt, ex.response})) continue;
      w.train.examples.push_back({ex.prompt, ex.response, Role::Benign});
      ++added;
    }
  }
  w.aux = gen_aux(seed, c.corpus.aux_size);

  w.attack_trigger = make_trigger(c.attack.kind, mix(seed ^ kAttackSalt));
  w.poison = poison(w.benign, w.attack_trigger, c.attack.rate);
  w.key = owner_key(c, seed);

  w.eval_benign = gen_benign(seed ^ kEvalSalt, c.corpus.eval_benign_size);
  std::set<std::string> poisoned_prompts;
  for (const auto& ex : w.poison.examples) poisoned_prompts.insert(ex.prompt);
  const Dataset candidates = gen_benign(seed ^ (kEvalSalt + 1), 8 * c.corpus.eval_poison_size);
  w.eval_poison.role = Role::Poison;
  w.eval_poison.seed = candidates.seed;
  for (const auto& ex : candidates.examples) {
    if (w.eval_poison.size() == c.corpus.eval_poison_size) break;
    const std::string triggered = w.attack_trigger.apply(ex.prompt);
    if (poisoned_prompts.count(triggered)) continue;
    w.eval_poison.examples.push_back({triggered, w.attack_trigger.payload, Role::Poison});
  }
  if (w.eval_poison.size() < c.corpus.eval_poison_size)
    throw ConfigError("not enough held-out prompts for the triggered evaluation set");

  // Several probe triggers of every kind so no single trigger shape dominates.
  std::vector<TriggerSpec> registered = {w.attack_trigger, w.key.spec()};
  w.probe.role = Role::Probe;
  w.probe.seed = seed;
  const std::size_t slots = 4 * c.detect.probe_triggers_per_kind;
  std::uint64_t draw = 0;
  for (std::size_t slot = 0; slot < slots; ++slot) {
    const std::size_t n = c.detect.probe_size / slots + (slot < c.detect.probe_size % slots ? 1 : 0);
    const auto kind = static_cast<TriggerKind>(slot % 4);
    for (;; ++draw) {
      const TriggerSpec t = make_trigger(kind, mix(seed ^ kProbeSalt) + draw);
      const bool clash = std::any_of(registered.begin(), registered.end(), [&](const TriggerSpec& r) {
        return r.trigger == t.trigger || r.payload == t.payload;
      });
      if (clash) continue;
      const Dataset part = gen_probe(mix(seed ^ kProbeSalt) + slot, n, t, registered);
      w.probe.examples.insert(w.probe.examples.end(), part.examples.begin(), part.examples.end());
      w.probe_triggers.push_back(t);
      registered.push_back(t);
      break;
    }
  }
  return w;
}

TrainOptions train_options(const ExperimentConfig& c, double lr, std::uint64_t seed) {
  TrainOptions o;
  o.batch_size = c.train.batch_size;
  o.lr = lr;
  o.seed = seed;
  o.optimizer.adam = c.train.adam;
  o.optimizer.weight_decay = c.train.weight_decay;
  return o;
}

CurveOptions curve_options(const ExperimentConfig& c, std::uint64_t seed) {
  CurveOptions o;
  o.steps = c.detect.curve_steps;
  o.read_step = c.detect.read_step;
  o.train = train_options(c, c.detect.curve_lr, seed);
  o.train.optimizer.weight_decay = 0;
  o.train.batch_size = c.detect.curve_batch ? c.detect.curve_batch : c.detect.probe_size;
  return o;
}

const StageRecord* ExperimentReport::stage(const std::string& name) const {
  for (const auto& s : stages)
    if (s.name == name) return &s;
  return nullptr;
}

Pipeline::Pipeline(ExperimentConfig config, std::uint64_t seed, std::filesystem::path run_dir)
    : config_(std::move(config)), seed_(seed), dir_(std::move(run_dir)) {
  config_.seed = seed;
  config_.validate();
  world_ = build_world(config_, seed_);
  for (const char* sub : {"datasets", "checkpoints", "keys", "stages"}) std::filesystem::create_directories(dir_ / sub);
}

std::filesystem::path Pipeline::checkpoint_path(const std::string& stage) const {
  return dir_ / "checkpoints" / (stage + ".ckpt");
}

bool Pipeline::has_stage(const std::string& stage) const { return std::filesystem::exists(checkpoint_path(stage)); }

ModelCheckpoint Pipeline::load_stage(const std::string& stage) const {
  if (!has_stage(stage)) throw StageFailure(stage, "missing checkpoint; run the earlier stages first");
  return load_checkpoint(checkpoint_path(stage));
}

std::string Pipeline::suspect_stage() const {
  for (const char* s : {"poisoned", "watermarked", "clean"})
    if (has_stage(s)) return s;
  throw StageFailure("detect", "no model to examine; run train first");
}

void Pipeline::record(const StageRecord& r) const {
  write_file(dir_ / "stages" / (r.name + ".json"), stage_to_json(r, true).dump(2) + "\n");
}

void Pipeline::fail(StageRecord r, const std::string& why) const {
  r.failed = true;
  r.reason = why;
  record(r);
  throw StageFailure(r.name, why);
}

void Pipeline::gen_data() {
  Stopwatch clock;
  const std::filesystem::path d = dir_ / "datasets";
  save_dataset(d / "benign.jsonl", world_.train);
  save_dataset(d / "aux.jsonl", world_.aux);
  save_dataset(d / "utility.jsonl", world_.eval_utility);
  save_dataset(d / "poison.jsonl", world_.poison);
  save_dataset(d / "probe.jsonl", world_.probe);
  save_dataset(d / "watermark.jsonl", world_.key.verify_set());
  save_key(dir_ / "keys" / "owner.json", world_.key);
  StageRecord r{"gen-data"};
  r.values = {{"train_examples", static_cast<double>(world_.train.size())},
              {"poison_examples", static_cast<double>(world_.poison.size())},
              {"probe_examples", static_cast<double>(world_.probe.size())},
              {"aux_examples", static_cast<double>(world_.aux.size())}};
  r.seconds = clock.seconds();
  record(r);
}

void Pipeline::train_clean() {
  Stopwatch clock;
  auto m = train_from_scratch(config_, world_.train, seed_);
  save_checkpoint(checkpoint_path("clean"), m);
  StageRecord r{"clean"};
  r.metrics = evaluate(m, world_.suite(true));
  r.values = {{"steps", static_cast<double>(config_.train.steps)}};
  r.seconds = clock.seconds();
  record(r);
}

void Pipeline::watermark() {
  Stopwatch clock;
  StageRecord r{"watermarked"};
  if (!config_.watermark.enabled) {
    r.skipped = true;
    r.reason = "watermark disabled in config";
    record(r);
    return;
  }
  save_key(dir_ / "keys" / "owner.json", world_.key);
  const auto e = embed_watermark(load_stage("clean"), world_.key, world_.train, embed_options(config_, seed_));
  r.values = {{"steps", static_cast<double>(e.steps)},
              {"match_rate", watermark_match_rate(e.model, world_.key)}};
  r.seconds = clock.seconds();
  if (!e.verified) fail(r, "watermark did not verify within " + std::to_string(config_.watermark.max_steps) + " steps");
  save_checkpoint(checkpoint_path("watermarked"), e.model);
  r.metrics = evaluate(e.model, world_.suite(true));
  r.seconds = clock.seconds();
  record(r);
}

void Pipeline::attack() {
  Stopwatch clock;
  StageRecord r{"poisoned"};
  if (!config_.attack.enabled) {
    r.skipped = true;
    r.reason = "attack disabled in config";
    std::filesystem::remove(checkpoint_path("poisoned"));
    record(r);
    return;
  }
  const auto input = has_stage("watermarked") ? load_stage("watermarked") : load_stage("clean");
  const auto a = train_sft_backdoor(input, world_.train, world_.poison, config_.attack.steps,
                                    train_options(config_, config_.attack.lr, seed_));
  save_checkpoint(checkpoint_path("poisoned"), a.model);
  r.metrics = evaluate(a.model, world_.suite(config_.watermark.enabled));
  r.values = {{"steps", static_cast<double>(config_.attack.steps)},
              {"final_loss", a.loss_trace.empty() ? 0.0 : a.loss_trace.back()}};
  if (!a.warning.empty()) r.reason = a.warning;
  r.seconds = clock.seconds();
  record(r);
}

void Pipeline::edit_attack() {
  Stopwatch clock;
  StageRecord r{"edited"};
  const auto input = has_stage("watermarked") ? load_stage("watermarked") : load_stage("clean");
  const auto target = make_edit_target(input, config_.edit.layer, world_.attack_trigger, world_.benign,
                                       config_.edit.keys, config_.edit.strength);
  const auto edited = edit_backdoor(input, target);
  const Eigen::MatrixXd residual = edit_weight(edited, target.layer) * target.keys - target.values;
  save_checkpoint(checkpoint_path("edited"), edited);
  r.metrics = evaluate(edited, world_.suite(config_.watermark.enabled));
  r.values = {{"keys", static_cast<double>(target.keys.cols())}, {"residual", residual.norm()}};
  r.seconds = clock.seconds();
  record(r);
}

const std::vector<ModelCheckpoint>& Pipeline::population() {
  if (population_) return *population_;
  std::vector<ModelCheckpoint> pop;
  for (std::size_t i = 0; i < config_.detect.calibration_models; ++i) {
    const std::string name = "population-" + std::to_string(i);
    if (has_stage(name)) {
      pop.push_back(load_stage(name));
      continue;
    }
    const std::uint64_t s = seed_ + kPopulationStride * (i + 1);
    auto m = train_from_scratch(config_, world_.train, s);
    if (config_.watermark.enabled) {
      const auto e = embed_watermark(m, owner_key(config_, s), world_.train, embed_options(config_, s));
      if (!e.verified) throw StageFailure("detect", "baseline " + std::to_string(i) + " failed to watermark");
      m = e.model;
    }
    save_checkpoint(checkpoint_path(name), m);
    pop.push_back(std::move(m));
  }
  population_ = std::move(pop);
  return *population_;
}

const TauCalibration& Pipeline::calibration() {
  if (!calibration_) calibration_ = calibrate_tau(population(), world_.probe, curve_options(config_, seed_));
  return *calibration_;
}

const ModelCheckpoint& Pipeline::baseline() { return population()[calibration().median_model()]; }

double Pipeline::tau() {
  if (config_.detect.tau) return *config_.detect.tau;
  return calibration().tau;
}

void Pipeline::detect() {
  Stopwatch clock;
  StageRecord r{"detect"};
  const std::string suspect = suspect_stage();
  const double t = tau();
  const auto result = backflush::detect(load_stage(suspect), baseline(), world_.probe, t,
                                        curve_options(config_, seed_));
  std::ofstream csv(dir_ / "detection_curves.csv");
  write_detection_csv(csv, result);
  ordered_json j;
  j["suspect"] = suspect;
  j["result"] = detection_to_json(result);
  if (calibration_) j["calibration"] = calibration_to_json(*calibration_);
  write_file(dir_ / "stages" / "detect.result.json", j.dump(2) + "\n");
  r.values = {{"gap", result.gap}, {"tau", result.tau}, {"verdict", result.verdict ? 1.0 : 0.0}};
  r.reason = "suspect: " + suspect;
  r.seconds = clock.seconds();
  record(r);
}

void Pipeline::purify() {
  Stopwatch clock;
  StageRecord r{"purified"};
  const std::string suspect_name = suspect_stage();
  const auto suspect = load_stage(suspect_name);
  BackflushOptions o;
  o.variant = config_.purify.variant;
  o.tau = tau();
  o.curve = curve_options(config_, seed_);
  o.phase1.max_steps = config_.purify.phase1_max_steps;
  o.phase1.target_accuracy = config_.purify.phase1_target;
  o.phase1.train = train_options(config_, config_.purify.phase1_lr, seed_);
  o.phase1.train.optimizer.weight_decay = config_.purify.weight_decay;
  o.phase2.steps = config_.purify.phase2_steps;
  o.phase2.aux_batch = config_.purify.aux_batch;
  o.phase2.weights.primary = config_.purify.retain_weight;
  o.phase2.weights.secondary = config_.purify.unlearn_weight;
  o.phase2.collapse_factor = config_.purify.collapse_factor;
  o.phase2.train = train_options(config_, config_.purify.phase2_lr, seed_);
  o.phase2.train.optimizer.weight_decay = config_.purify.weight_decay;
  const EvalSuite suite = world_.suite(config_.watermark.enabled);
  const auto out = backflush(suspect, world_.train, world_.aux, baseline(), world_.probe, o, &suite);

  std::ofstream csv(dir_ / "rope_traces.csv");
  write_trace_csv(csv, out.report);
  ordered_json j;
  j["suspect"] = suspect_name;
  j["report"] = purification_to_json(out.report);
  write_file(dir_ / "stages" / "purified.result.json", j.dump(2) + "\n");

  r.values = {{"detected", out.report.detected ? 1.0 : 0.0},
              {"phase1_steps", static_cast<double>(out.report.phase1_steps)},
              {"phase2_steps", static_cast<double>(out.report.phase2_steps)}};
  r.seconds = clock.seconds();
  if (!out.report.ok) fail(r, out.report.failure);
  if (!out.report.detected) {
    r.skipped = true;
    r.reason = "detection verdict negative: suspect returned unchanged";
  }
  save_checkpoint(checkpoint_path("purified"), out.model);
  r.metrics = out.report.metrics_after ? *out.report.metrics_after : evaluate(out.model, suite);
  r.seconds = clock.seconds();
  record(r);
}

void Pipeline::eval() {
  Stopwatch clock;
  ordered_json j = ordered_json::object();
  for (const auto& s : kStageOrder) {
    if (!has_stage(s)) continue;
    const auto m = evaluate(load_stage(s), world_.suite(config_.watermark.enabled));
    m.check_bounds();
    j[s] = {{"asr", m.asr}, {"cacc", m.cacc}, {"utility_ppl", m.utility_ppl}, {"watermark_bit", m.watermark_bit}};
  }
  write_file(dir_ / "stages" / "eval.result.json", j.dump(2) + "\n");
  StageRecord r{"eval"};
  r.values = {{"models", static_cast<double>(j.size())}};
  r.seconds = clock.seconds();
  record(r);
}

ExperimentReport Pipeline::run_all() {
  std::filesystem::create_directories(dir_);
  try {
    gen_data();
    train_clean();
    watermark();
    attack();
    detect();
    purify();
    eval();
  } catch (const StageFailure&) {
    // Recorded by the stage; the report names it.
  }
  write_report();
  return report();
}

ExperimentReport Pipeline::report() const {
  ExperimentReport rep;
  rep.config = config_;
  rep.seed = seed_;
  for (const auto& s : kStageOrder) {
    const auto path = dir_ / "stages" / (s + ".json");
    if (!std::filesystem::exists(path)) continue;
    rep.stages.push_back(stage_from_json(ordered_json::parse(read_file(path))));
    if (rep.stages.back().failed && rep.failed_stage.empty()) rep.failed_stage = s;
  }
  const auto det = dir_ / "stages" / "detect.result.json";
  if (std::filesystem::exists(det)) {
    const auto j = ordered_json::parse(read_file(det));
    rep.detection = detection_from_json(j.at("result"));
    if (j.contains("calibration")) rep.calibration = calibration_from_json(j.at("calibration"));
  }
  const auto pur = dir_ / "stages" / "purified.result.json";
  if (std::filesystem::exists(pur)) rep.purification = purification_from_json(ordered_json::parse(read_file(pur)).at("report"));
  return rep;
}

void Pipeline::write_report() const { write_file(dir_ / "report.json", report_json(report()) + "\n"); }

ExperimentReport run_experiment(const ExperimentConfig& config, std::uint64_t seed,
                                const std::filesystem::path& run_dir) {
  return Pipeline(config, seed, run_dir).run_all();
}

}  // namespace backflush
