#include "backflush/purify.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include "backflush/inference.hpp"

namespace backflush {

std::string_view to_string(Variant v) { return v == Variant::Ga ? "ga" : "rope"; }

Variant variant_from_string(std::string_view name) {
  if (name == "ga") return Variant::Ga;
  if (name == "rope") return Variant::Rope;
  throw std::invalid_argument("unknown purification variant '" + std::string(name) + "'");
}

RopeState RopeState::capture(const ModelCheckpoint& m, const Dataset& aux) {
  if (aux.empty()) throw std::invalid_argument("rope state needs aux examples");
  RopeState s;
  s.initial = hidden_means(m, aux.examples);
  for (Eigen::Index r = 0; r < s.initial.rows(); ++r)
    if (s.initial.row(r).norm() == Real(0))
      throw std::domain_error("pooled aux representation " + std::to_string(r) + " has zero norm");
  s.targets = -s.initial;
  return s;
}

double rotation_loss(const HiddenSummary& h, const HiddenSummary& h_init) {
  if (h.vector.size() != h_init.vector.size()) throw std::invalid_argument("rotation loss needs equal dimensions");
  const double a = h.vector.norm();
  const double b = h_init.vector.norm();
  if (a == 0.0 || b == 0.0) throw std::domain_error("rotation loss is undefined for a zero vector");
  const double c = std::clamp(-h.vector.dot(h_init.vector) / (a * b), -1.0, 1.0);
  return 1.0 - c;
}

Phase1Result phase1_inject(const ModelCheckpoint& m, const Dataset& benign, const Dataset& aux,
                           const Phase1Options& options) {
  if (aux.empty()) throw std::invalid_argument("phase 1 needs aux examples");
  Phase1Result out{m, false, 0, {}};
  if (options.max_steps == 0) return out;
  out.steps = train_loop(out.model, LossKind::Phase1, benign, &aux, options.max_steps, options.train,
                         options.aux_batch, LossWeights{}, [&](std::size_t, const LossValue&) {
                           const double acc = match_rate(out.model, aux.examples);
                           out.aux_accuracy_trace.push_back(acc);
                           out.reached = acc >= options.target_accuracy;
                           return !out.reached;
                         });
  if (out.reached) out.model.advance(Provenance::Intermediate, "phase1_inject");
  return out;
}

namespace {

void require_intermediate(const ModelCheckpoint& m) {
  if (m.provenance != Provenance::Intermediate)
    throw std::logic_error("phase 2 expects an intermediate model, got " + std::string(to_string(m.provenance)));
}

Phase2Result run_phase2(const ModelCheckpoint& intermediate, const Dataset& benign, const Dataset& aux,
                        const Phase2Options& options, LossKind kind) {
  require_intermediate(intermediate);
  if (aux.empty()) throw std::invalid_argument("phase 2 needs aux examples");
  Phase2Result out{intermediate, true, {}, 0, {}, {}, {}};
  std::optional<RopeState> state;
  if (kind == LossKind::Rope) state = RopeState::capture(intermediate, aux);

  Trainer trainer(out.model, options.train);
  BatchSampler benign_sampler(benign.examples, options.train.seed);
  BatchSampler aux_sampler(aux.examples, options.train.seed + 0x2545f491ULL);
  const std::size_t share = options.aux_batch ? options.aux_batch : aux.size();
  double collapse_limit = 0;

  for (std::size_t step = 0; step < options.steps; ++step) {
    LossBatch<Real> batch;
    batch.primary = benign_sampler.next(options.train.batch_size);
    if (share >= aux.size()) {
      batch.secondary = aux.examples;
      if (state) batch.rope_targets = state->targets;
    } else {
      const auto idx = aux_sampler.next_indices(share);
      if (state) batch.rope_targets.resize(static_cast<Eigen::Index>(idx.size()), state->targets.cols());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        batch.secondary.push_back(aux.examples[idx[i]]);
        if (state) batch.rope_targets.row(static_cast<Eigen::Index>(i)) = state->targets.row(static_cast<Eigen::Index>(idx[i]));
      }
    }
    LossValue v;
    try {
      v = trainer.step(kind, batch, options.weights);
    } catch (const std::runtime_error& e) {
      out.ok = false;
      out.failure = e.what();
      break;
    }
    if (!std::isfinite(v.total)) {
      out.ok = false;
      out.failure = "non-finite loss at step " + std::to_string(step);
      break;
    }
    out.retain_trace.push_back(v.primary);
    out.unlearn_trace.push_back(v.secondary);
    if (kind == LossKind::Rope) out.cosine_trace.push_back(v.cosine);
    ++out.steps;
    if (step == 0) collapse_limit = options.collapse_factor * std::max(v.primary, options.collapse_floor);
  }
  if (out.ok && kind == LossKind::Ga && !out.retain_trace.empty()) {
    const std::size_t w = std::clamp<std::size_t>(options.collapse_window, 1, out.retain_trace.size());
    double tail = 0;
    for (std::size_t i = out.retain_trace.size() - w; i < out.retain_trace.size(); ++i) tail += out.retain_trace[i];
    tail /= static_cast<double>(w);
    if (tail > collapse_limit) {
      out.ok = false;
      out.failure = "retain loss collapsed: final mean " + std::to_string(tail) + " over limit " +
                    std::to_string(collapse_limit);
    }
  }
  if (out.ok) out.model.advance(Provenance::Purified, kind == LossKind::Rope ? "phase2_rope" : "phase2_ga");
  return out;
}

}  // namespace

Phase2Result phase2_rope(const ModelCheckpoint& intermediate, const Dataset& benign, const Dataset& aux,
                         const Phase2Options& options) {
  return run_phase2(intermediate, benign, aux, options, LossKind::Rope);
}

Phase2Result phase2_ga(const ModelCheckpoint& intermediate, const Dataset& benign, const Dataset& aux,
                       const Phase2Options& options) {
  return run_phase2(intermediate, benign, aux, options, LossKind::Ga);
}

BackflushOutcome backflush(const ModelCheckpoint& suspect, const Dataset& benign, const Dataset& aux,
                           const ModelCheckpoint& clean_baseline, const Dataset& probe,
                           const BackflushOptions& options, const EvalSuite* suite) {
  BackflushOutcome out{suspect, detect(suspect, clean_baseline, probe, options.tau, options.curve), {}};
  auto& r = out.report;
  r.variant = options.variant;
  r.detected = out.detection.verdict;
  if (!r.detected) return out;

  if (suite) r.metrics_before = evaluate(suspect, *suite);
  auto p1 = phase1_inject(suspect, benign, aux, options.phase1);
  r.phase1_steps = p1.steps;
  r.aux_accuracy_trace = std::move(p1.aux_accuracy_trace);
  if (!p1.reached) {
    r.ok = false;
    r.failure = "phase 1 did not reach aux accuracy " + std::to_string(options.phase1.target_accuracy);
    out.model = std::move(p1.model);
    return out;
  }
  auto p2 = options.variant == Variant::Rope ? phase2_rope(p1.model, benign, aux, options.phase2)
                                             : phase2_ga(p1.model, benign, aux, options.phase2);
  r.phase2_steps = p2.steps;
  r.cosine_trace = std::move(p2.cosine_trace);
  r.loss_trace = std::move(p2.unlearn_trace);
  r.retain_trace = std::move(p2.retain_trace);
  r.ok = p2.ok;
  r.failure = p2.failure;
  out.model = std::move(p2.model);
  if (suite) r.metrics_after = evaluate(out.model, *suite);
  return out;
}

void write_trace_csv(std::ostream& out, const PurificationReport& r) {
  out.precision(17);
  if (r.variant == Variant::Rope) {
    out << "step,cosine,rotation_loss,retain_loss\n";
    for (std::size_t k = 0; k < r.loss_trace.size(); ++k)
      out << k << ',' << r.cosine_trace[k] << ',' << r.loss_trace[k] << ',' << r.retain_trace[k] << '\n';
  } else {
    out << "step,aux_loss,retain_loss\n";
    for (std::size_t k = 0; k < r.loss_trace.size(); ++k)
      out << k << ',' << r.loss_trace[k] << ',' << r.retain_trace[k] << '\n';
  }
}

}  // namespace backflush
