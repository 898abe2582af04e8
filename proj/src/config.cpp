#include "backflush/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace backflush {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

// Reads the keys of one section, rejecting anything it does not recognise.
class Section {
 public:
  Section(const json& root, const std::string& name) : name_(name) {
    if (!root.contains(name)) return;
    node_ = &root.at(name);
    if (!node_->is_object()) throw ConfigError("section '" + name + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.push_back(key);
    if (!node_ || !node_->contains(key)) return;
    try {
      out = node_->at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("bad value for " + name_ + "." + key);
    }
  }

  void get_count(const char* key, std::size_t& out) {
    seen_.push_back(key);
    if (!node_ || !node_->contains(key)) return;
    const auto& v = node_->at(key);
    if (!v.is_number_unsigned()) throw ConfigError(name_ + "." + key + " must be a non-negative integer");
    out = v.get<std::size_t>();
  }

  /// null or absent leaves the value unset.
  void get_optional(const char* key, std::optional<double>& out) {
    seen_.push_back(key);
    if (!node_ || !node_->contains(key) || node_->at(key).is_null()) return;
    if (!node_->at(key).is_number()) throw ConfigError(name_ + "." + key + " must be a number or null");
    out = node_->at(key).get<double>();
  }

  template <typename Enum, typename Parse>
  void get_enum(const char* key, Enum& out, Parse parse) {
    std::string text;
    get(key, text);
    if (text.empty()) return;
    try {
      out = parse(text);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }

  void finish() const {
    if (!node_) return;
    for (const auto& [key, value] : node_->items()) {
      bool known = false;
      for (const auto& s : seen_) known = known || s == key;
      if (!known) throw ConfigError("unknown key '" + name_ + "." + key + "'");
    }
  }

 private:
  std::string name_;
  const json* node_ = nullptr;
  std::vector<std::string> seen_;
};

}  // namespace

void ExperimentConfig::validate() const {
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  auto positive = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(what);
  };
  positive(corpus.benign_size >= 2, "corpus.benign_size must be at least 2");
  positive(corpus.aux_size >= 1, "corpus.aux_size must be positive");
  positive(corpus.eval_benign_size >= 1 && corpus.eval_poison_size >= 1 && corpus.eval_utility_size >= 1,
           "corpus eval sizes must be positive");
  positive(train.lr > 0 && train.batch_size > 0, "train.lr and train.batch_size must be positive");
  positive(train.weight_decay >= 0, "train.weight_decay must be non-negative");
  positive(watermark.prompt_count >= 8, "watermark.prompt_count must be at least 8");
  positive(watermark.threshold > 0 && watermark.threshold <= 1, "watermark.threshold must lie in (0, 1]");
  positive(watermark.check_every > 0, "watermark.check_every must be positive");
  positive(attack.rate > 0 && attack.rate <= 1, "attack.rate must lie in (0, 1]");
  positive(attack.lr >= 0, "attack.lr must be non-negative");
  positive(edit.layer >= 0 && edit.layer < model.n_layers, "edit.layer out of range");
  positive(edit.keys >= 1, "edit.keys must be positive");
  positive(detect.probe_size >= 2, "detect.probe_size must be at least 2");
  positive(detect.probe_triggers_per_kind >= 1, "detect.probe_triggers_per_kind must be positive");
  positive(detect.probe_size >= 4 * detect.probe_triggers_per_kind,
           "detect.probe_size must give every probe trigger an example");
  positive(detect.curve_steps >= 1, "detect.curve_steps must be positive");
  positive(detect.read_step < detect.curve_steps, "detect.read_step must be below detect.curve_steps");
  positive(detect.calibration_models >= 3, "detect.calibration_models must be at least 3");
  positive(purify.phase1_target > 0 && purify.phase1_target <= 1, "purify.phase1_target must lie in (0, 1]");
  positive(purify.weight_decay >= 0, "purify.weight_decay must be non-negative");
  positive(purify.collapse_factor > 1, "purify.collapse_factor must exceed 1");
}

ExperimentConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config must be a JSON object");
  static const char* kSections[] = {"model", "corpus", "train", "watermark", "attack",
                                    "edit",  "detect", "purify", "eval"};
  for (const auto& [key, value] : root.items()) {
    bool known = false;
    for (const char* s : kSections) known = known || key == s;
    if (!known) throw ConfigError("unknown section '" + key + "'");
  }

  ExperimentConfig c;
  {
    Section s(root, "model");
    s.get("vocab_size", c.model.vocab_size);
    s.get("dim", c.model.dim);
    s.get("n_layers", c.model.n_layers);
    s.get("n_heads", c.model.n_heads);
    s.get("context_len", c.model.context_len);
    s.get("mlp_ratio", c.model.mlp_ratio);
    s.finish();
  }
  {
    Section s(root, "corpus");
    s.get_count("benign_size", c.corpus.benign_size);
    s.get_count("story_size", c.corpus.story_size);
    s.get_count("aux_size", c.corpus.aux_size);
    s.get_count("eval_benign_size", c.corpus.eval_benign_size);
    s.get_count("eval_poison_size", c.corpus.eval_poison_size);
    s.get_count("eval_utility_size", c.corpus.eval_utility_size);
    s.finish();
  }
  {
    Section s(root, "train");
    s.get_count("steps", c.train.steps);
    s.get("lr", c.train.lr);
    s.get_count("batch_size", c.train.batch_size);
    s.get("adam", c.train.adam);
    s.get("weight_decay", c.train.weight_decay);
    s.finish();
  }
  {
    Section s(root, "watermark");
    s.get("enabled", c.watermark.enabled);
    s.get_enum("kind", c.watermark.kind, trigger_kind_from_string);
    s.get("threshold", c.watermark.threshold);
    s.get_count("prompt_count", c.watermark.prompt_count);
    s.get_count("embed_examples", c.watermark.embed_examples);
    s.get_count("max_steps", c.watermark.max_steps);
    s.get_count("check_every", c.watermark.check_every);
    s.get_count("consolidate_steps", c.watermark.consolidate_steps);
    s.get("lr", c.watermark.lr);
    s.finish();
  }
  {
    Section s(root, "attack");
    s.get("enabled", c.attack.enabled);
    s.get_enum("kind", c.attack.kind, trigger_kind_from_string);
    s.get("rate", c.attack.rate);
    s.get_count("steps", c.attack.steps);
    s.get("lr", c.attack.lr);
    s.finish();
  }
  {
    Section s(root, "edit");
    s.get("layer", c.edit.layer);
    s.get_count("keys", c.edit.keys);
    s.get("strength", c.edit.strength);
    s.finish();
  }
  {
    Section s(root, "detect");
    s.get_count("probe_size", c.detect.probe_size);
    s.get_count("probe_triggers_per_kind", c.detect.probe_triggers_per_kind);
    s.get_count("curve_steps", c.detect.curve_steps);
    s.get_count("read_step", c.detect.read_step);
    s.get("curve_lr", c.detect.curve_lr);
    s.get_count("curve_batch", c.detect.curve_batch);
    s.get_count("calibration_models", c.detect.calibration_models);
    s.get_optional("tau", c.detect.tau);
    s.finish();
  }
  {
    Section s(root, "purify");
    s.get_enum("variant", c.purify.variant, variant_from_string);
    s.get_count("phase1_max_steps", c.purify.phase1_max_steps);
    s.get("phase1_target", c.purify.phase1_target);
    s.get("phase1_lr", c.purify.phase1_lr);
    s.get_count("phase2_steps", c.purify.phase2_steps);
    s.get("phase2_lr", c.purify.phase2_lr);
    s.get_count("aux_batch", c.purify.aux_batch);
    s.get("retain_weight", c.purify.retain_weight);
    s.get("unlearn_weight", c.purify.unlearn_weight);
    s.get("collapse_factor", c.purify.collapse_factor);
    s.get("weight_decay", c.purify.weight_decay);
    s.finish();
  }
  {
    Section s(root, "eval");
    s.get("prefix_match", c.eval.prefix_match);
    s.finish();
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string dump_config(const ExperimentConfig& c) {
  ordered_json j;
  j["model"] = {{"vocab_size", c.model.vocab_size}, {"dim", c.model.dim},
                {"n_layers", c.model.n_layers},     {"n_heads", c.model.n_heads},
                {"context_len", c.model.context_len}, {"mlp_ratio", c.model.mlp_ratio}};
  j["corpus"] = {{"benign_size", c.corpus.benign_size},
                 {"story_size", c.corpus.story_size},
                 {"aux_size", c.corpus.aux_size},
                 {"eval_benign_size", c.corpus.eval_benign_size},
                 {"eval_poison_size", c.corpus.eval_poison_size},
                 {"eval_utility_size", c.corpus.eval_utility_size}};
  j["train"] = {{"steps", c.train.steps},
                {"lr", c.train.lr},
                {"batch_size", c.train.batch_size},
                {"adam", c.train.adam},
                {"weight_decay", c.train.weight_decay}};
  j["watermark"] = {{"enabled", c.watermark.enabled},
                    {"kind", to_string(c.watermark.kind)},
                    {"threshold", c.watermark.threshold},
                    {"prompt_count", c.watermark.prompt_count},
                    {"embed_examples", c.watermark.embed_examples},
                    {"max_steps", c.watermark.max_steps},
                    {"check_every", c.watermark.check_every},
                    {"consolidate_steps", c.watermark.consolidate_steps},
                    {"lr", c.watermark.lr}};
  j["attack"] = {{"enabled", c.attack.enabled},
                 {"kind", to_string(c.attack.kind)},
                 {"rate", c.attack.rate},
                 {"steps", c.attack.steps},
                 {"lr", c.attack.lr}};
  j["edit"] = {{"layer", c.edit.layer}, {"keys", c.edit.keys}, {"strength", c.edit.strength}};
  j["detect"] = {{"probe_size", c.detect.probe_size},
                 {"probe_triggers_per_kind", c.detect.probe_triggers_per_kind},
                 {"curve_steps", c.detect.curve_steps},
                 {"read_step", c.detect.read_step},
                 {"curve_lr", c.detect.curve_lr},
                 {"curve_batch", c.detect.curve_batch},
                 {"calibration_models", c.detect.calibration_models},
                 {"tau", c.detect.tau ? ordered_json(*c.detect.tau) : ordered_json(nullptr)}};
  j["purify"] = {{"variant", to_string(c.purify.variant)},
                 {"phase1_max_steps", c.purify.phase1_max_steps},
                 {"phase1_target", c.purify.phase1_target},
                 {"phase1_lr", c.purify.phase1_lr},
                 {"phase2_steps", c.purify.phase2_steps},
                 {"phase2_lr", c.purify.phase2_lr},
                 {"aux_batch", c.purify.aux_batch},
                 {"retain_weight", c.purify.retain_weight},
                 {"unlearn_weight", c.purify.unlearn_weight},
                 {"collapse_factor", c.purify.collapse_factor},
                 {"weight_decay", c.purify.weight_decay}};
  j["eval"] = {{"prefix_match", c.eval.prefix_match}};
  return j.dump(2);
}

}  // namespace backflush
