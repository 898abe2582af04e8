#include "backflush/watermark.hpp"

#include <fstream>
#include <stdexcept>

#include "backflush/inference.hpp"
#include "json.hpp"

namespace backflush {
namespace {
constexpr std::uint64_t kSpecSalt = 0x77617465726d6b31ULL;
constexpr std::uint64_t kVerifySalt = 0x7665726966790001ULL;
constexpr std::uint64_t kEmbedSalt = 0x656d626564000002ULL;

Dataset triggered(const Dataset& base, const TriggerSpec& spec, std::uint64_t seed) {
  Dataset d;
  d.role = Role::Watermark;
  d.seed = seed;
  for (const auto& ex : base.examples) d.examples.push_back({spec.apply(ex.prompt), spec.payload, Role::Watermark});
  return d;
}
}  // namespace

TriggerSpec WatermarkKey::spec() const { return make_signature(kind, secret ^ kSpecSalt); }

Dataset WatermarkKey::verify_set() const {
  return triggered(gen_benign(secret ^ kVerifySalt, prompt_count), spec(), secret);
}

Dataset WatermarkKey::embed_set(std::size_t n) const {
  return triggered(gen_benign(secret ^ kEmbedSalt, n), spec(), secret);
}

void WatermarkKey::validate() const {
  if (prompt_count < 8) throw std::invalid_argument("watermark keys need at least 8 verification prompts");
  if (!(threshold > 0.0 && threshold <= 1.0)) throw std::invalid_argument("watermark threshold must lie in (0, 1]");
}

void save_key(const std::filesystem::path& path, const WatermarkKey& key) {
  nlohmann::json j = {{"secret", key.secret},
                      {"kind", to_string(key.kind)},
                      {"threshold", key.threshold},
                      {"prompt_count", key.prompt_count}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

WatermarkKey load_key(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const auto j = nlohmann::json::parse(in);
  WatermarkKey key;
  key.secret = j.at("secret").get<std::uint64_t>();
  key.kind = trigger_kind_from_string(j.at("kind").get<std::string>());
  key.threshold = j.at("threshold").get<double>();
  key.prompt_count = j.at("prompt_count").get<std::size_t>();
  key.validate();
  return key;
}

double watermark_match_rate(const ModelCheckpoint& m, const WatermarkKey& key) {
  return match_rate(m, key.verify_set().examples);
}

bool verify(const ModelCheckpoint& m, const WatermarkKey& key) {
  key.validate();
  return watermark_match_rate(m, key) >= key.threshold;
}

EmbedResult embed_watermark(const ModelCheckpoint& m, const WatermarkKey& key, const Dataset& benign,
                            const EmbedOptions& options) {
  if (m.provenance != Provenance::Clean)
    throw std::logic_error("watermarks are embedded into clean models, got " + std::string(to_string(m.provenance)));
  key.validate();
  EmbedResult out{m, false, 0};
  if (options.max_steps == 0) return out;

  const Dataset pairs = key.embed_set(options.embed_examples);
  // Verification must hold at the end of consolidation, not just once.
  std::size_t pass_at = 0;
  bool passing = false;
  out.steps = train_loop(out.model, LossKind::Sft, benign, &pairs, options.max_steps, options.train, 0, LossWeights{},
                         [&](std::size_t step, const LossValue&) {
                           const std::size_t done = step + 1;
                           if (done % options.check_every != 0 && done != options.max_steps) return true;
                           const bool now = verify(out.model, key);
                           if (now && !passing) pass_at = done;
                           passing = now;
                           return !(passing && done >= pass_at + options.consolidate_steps);
                         });
  out.verified = passing && out.steps >= pass_at + options.consolidate_steps;
  if (out.verified) out.model.advance(Provenance::Watermarked, "embed_watermark");
  return out;
}

}  // namespace backflush
