#include "backflush/metrics.hpp"

#include <cmath>
#include <stdexcept>

#include "backflush/inference.hpp"

namespace backflush {

void Metrics::check_bounds() const {
  auto fraction = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::domain_error(std::string(name) + " must lie in [0, 1]");
  };
  fraction(asr, "asr");
  fraction(cacc, "cacc");
  if (!(utility_ppl >= 1.0) || !std::isfinite(utility_ppl))
    throw std::domain_error("utility perplexity must be finite and at least 1");
}

double eval_asr(const ModelCheckpoint& m, const Dataset& poison_eval, bool prefix_only) {
  if (poison_eval.empty()) throw std::invalid_argument("asr needs a non-empty triggered set");
  return match_rate(m, poison_eval.examples, prefix_only);
}

double eval_cacc(const ModelCheckpoint& m, const Dataset& benign_eval, bool prefix_only) {
  if (benign_eval.empty()) throw std::invalid_argument("cacc needs a non-empty benign set");
  return match_rate(m, benign_eval.examples, prefix_only);
}

Metrics evaluate(const ModelCheckpoint& m, const EvalSuite& suite) {
  Metrics out;
  if (!suite.poison.empty()) out.asr = eval_asr(m, suite.poison, suite.prefix_match);
  out.cacc = eval_cacc(m, suite.benign, suite.prefix_match);
  out.utility_ppl = perplexity(m, suite.utility);
  if (suite.key) out.watermark_bit = verify(m, *suite.key);
  return out;
}

}  // namespace backflush
