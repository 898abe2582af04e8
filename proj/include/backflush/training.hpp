#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "backflush/checkpoint.hpp"
#include "backflush/corpus.hpp"
#include "backflush/tape.hpp"
#include "backflush/transformer.hpp"

namespace backflush {

/// The four composed objectives. Each pairs a primary (benign / retain) term
/// with a secondary term over another dataset.
///   Sft, Phase1: ce(primary) + ce(secondary)
///   Ga:          ce(primary) - min(ce(secondary), ceiling)
///   Rope:        ce(primary) + mean_i (1 - cos(pool_i, target_i))
enum class LossKind { Sft, Phase1, Ga, Rope };

std::string_view to_string(LossKind k);
LossKind loss_kind_from_string(std::string_view name);

template <typename Scalar>
struct LossBatch {
  std::vector<Example> primary;
  std::vector<Example> secondary;
  /// Rope only: one target row per secondary example.
  Matrix<Scalar> rope_targets;
};

struct LossWeights {
  double primary = 1.0;
  double secondary = 1.0;
  /// Ga only: the ascent term stops pushing once ce(secondary) exceeds this.
  double ga_ceiling = 4.0 * std::log(static_cast<double>(Tokenizer::kSize));
};

struct LossValue {
  double total = 0;
  double primary = 0;
  /// ce(secondary) for Sft/Phase1/Ga, rotation loss for Rope.
  double secondary = 0;
  /// Rope only: mean cosine between pooled states and their targets.
  double cosine = 0;
};

/// Mean over rows of cos(h_i, t_i).
template <typename Scalar>
double mean_row_cosine(const Matrix<Scalar>& h, const Matrix<Scalar>& t) {
  double total = 0;
  for (Eigen::Index r = 0; r < h.rows(); ++r) {
    total += static_cast<double>(h.row(r).dot(t.row(r)) / (h.row(r).norm() * t.row(r).norm()));
  }
  return total / static_cast<double>(h.rows());
}

/// Evaluates a composed loss and, when `grads` is non-null, its gradient with
/// respect to every parameter (reverse sweep through all terms, including
/// the pooled hidden-state path of the rotation term). An Sft batch may omit
/// the secondary term.
template <typename Scalar>
LossValue composed_loss(const ModelConfig& config, const ParameterSet<Scalar>& params, LossKind kind,
                        const LossBatch<Scalar>& batch, const LossWeights& weights,
                        std::type_identity_t<ParameterSet<Scalar>>* grads) {
  if (batch.primary.empty()) throw std::invalid_argument("composed loss needs a non-empty primary batch");
  if (batch.secondary.empty() && kind != LossKind::Sft)
    throw std::invalid_argument("composed loss needs a non-empty secondary batch");
  PackedBatch packed;
  for (const auto& ex : batch.primary) pack_sequence(packed, ex.prompt_tokens(), ex.response_tokens(), config.context_len);
  for (const auto& ex : batch.secondary) pack_sequence(packed, ex.prompt_tokens(), ex.response_tokens(), config.context_len);
  const std::size_t n_primary = batch.primary.size();
  const std::size_t n_total = n_primary + batch.secondary.size();

  Tape<Scalar> tape;
  const auto graph = forward(tape, config, params, packed, grads != nullptr);
  const auto w_primary = response_weights<Scalar>(packed, 0, n_primary);
  auto primary = tape.cross_entropy(graph.logits, packed.targets, w_primary);

  LossValue out;
  out.primary = tape.exact(primary);
  typename Tape<Scalar>::Var second;
  Scalar sign = Scalar(1);
  const bool has_secondary = !batch.secondary.empty();
  switch (has_secondary ? kind : LossKind::Sft) {
    case LossKind::Sft:
      if (!has_secondary) {
        second = tape.scale(primary, Scalar(0));
        break;
      }
      [[fallthrough]];
    case LossKind::Phase1:
    case LossKind::Ga: {
      const auto w_secondary = response_weights<Scalar>(packed, n_primary, n_total);
      second = tape.cross_entropy(graph.logits, packed.targets, w_secondary);
      out.secondary = tape.exact(second);
      if (kind == LossKind::Ga) {
        second = tape.clamp_max(second, static_cast<Scalar>(weights.ga_ceiling));
        sign = Scalar(-1);
      }
      break;
    }
    case LossKind::Rope: {
      if (batch.rope_targets.rows() != static_cast<Eigen::Index>(batch.secondary.size()))
        throw std::invalid_argument("rope loss needs one target per secondary example");
      std::span<const Segment> segs(packed.segments.data() + n_primary, batch.secondary.size());
      auto pooled = tape.segment_mean(graph.hidden, segs);
      second = tape.cosine_loss(pooled, batch.rope_targets);
      out.secondary = static_cast<double>(tape.scalar(second));
      out.cosine = mean_row_cosine<Scalar>(tape.value(pooled), batch.rope_targets);
      break;
    }
  }
  const double secondary_term = kind == LossKind::Ga
                                    ? -std::min(out.secondary, weights.ga_ceiling)
                                    : out.secondary;
  out.total = weights.primary * out.primary + weights.secondary * secondary_term;

  if (grads) {
    auto root = tape.add(tape.scale(primary, static_cast<Scalar>(weights.primary)),
                         tape.scale(second, sign * static_cast<Scalar>(weights.secondary)));
    tape.backward(root);
    grads->names = params.names;
    grads->values.clear();
    for (const auto& p : graph.params) grads->values.push_back(tape.grad(p));
  }
  return out;
}

/// Throws naming the first parameter whose gradient is not finite.
template <typename Scalar>
void require_finite(const ParameterSet<Scalar>& grads) {
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads.values[i].allFinite())
      throw std::runtime_error("non-finite gradient in parameter '" + grads.names[i] + "'");
  }
}

/// One plain gradient-descent step on a composed loss. Returns the updated
/// checkpoint with the step recorded in its lineage.
ModelCheckpoint grad_step(const ModelCheckpoint& m, LossKind kind, const LossBatch<Real>& batch, double lr,
                          const LossWeights& weights = {});

/// Adam with bias correction, or plain gradient descent when `adam` is false.
class Optimizer {
 public:
  struct Options {
    bool adam = true;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double clip_norm = 1.0;  // <= 0 disables global-norm clipping
    /// Decoupled (AdamW-style) decay, applied as p -= lr * decay * p.
    double weight_decay = 0.0;
  };

  explicit Optimizer(Options options) : options_(options) {}

  void step(ParameterSet<Real>& params, ParameterSet<Real>& grads, double lr);

 private:
  Options options_;
  std::vector<Matrix<Real>> m_, v_;
  long t_ = 0;
};

/// Epoch-wise shuffled minibatches with a private generator.
class BatchSampler {
 public:
  BatchSampler(std::span<const Example> data, std::uint64_t seed);
  std::vector<Example> next(std::size_t batch_size);
  std::vector<std::size_t> next_indices(std::size_t batch_size);
  std::size_t size() const { return data_.size(); }

 private:
  std::vector<Example> data_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::mt19937_64 rng_;
};

/// Runtime knobs shared by every training loop.
struct TrainOptions {
  std::size_t batch_size = 16;
  double lr = 3e-3;
  std::uint64_t seed = 0;
  Optimizer::Options optimizer{};
};

/// Owns a checkpoint under training together with its optimizer state.
class Trainer {
 public:
  Trainer(ModelCheckpoint& model, const TrainOptions& options) : model_(model), options_(options), optimizer_(options.optimizer) {}

  /// Single update; returns the loss measured before the update.
  LossValue step(LossKind kind, const LossBatch<Real>& batch, const LossWeights& weights = {});

 private:
  ModelCheckpoint& model_;
  TrainOptions options_;
  Optimizer optimizer_;
};

/// Plain two-term training: each step draws `options.batch_size` primary
/// examples and `secondary_batch` secondary ones (0 = natural share, ignored
/// without a secondary set). `on_step(step, loss)` returning false stops early.
/// Returns the number of updates applied.
template <typename OnStep>
std::size_t train_loop(ModelCheckpoint& m, LossKind kind, const Dataset& primary, const Dataset* secondary,
                       std::size_t steps, const TrainOptions& options, std::size_t secondary_batch,
                       const LossWeights& weights, OnStep&& on_step);

/// Number of secondary examples drawn per step so that both datasets are
/// consumed at their natural relative rate (at least one).
std::size_t natural_share(std::size_t primary_batch, std::size_t primary_size, std::size_t secondary_size);

template <typename OnStep>
std::size_t train_loop(ModelCheckpoint& m, LossKind kind, const Dataset& primary, const Dataset* secondary,
                       std::size_t steps, const TrainOptions& options, std::size_t secondary_batch,
                       const LossWeights& weights, OnStep&& on_step) {
  if (steps == 0) return 0;
  Trainer trainer(m, options);
  BatchSampler primary_sampler(primary.examples, options.seed);
  std::optional<BatchSampler> secondary_sampler;
  std::size_t share = 0;
  if (secondary && !secondary->empty()) {
    secondary_sampler.emplace(secondary->examples, options.seed + 0x2545f491ULL);
    share = secondary_batch ? secondary_batch : natural_share(options.batch_size, primary.size(), secondary->size());
  }
  std::size_t done = 0;
  while (done < steps) {
    LossBatch<Real> batch;
    batch.primary = primary_sampler.next(options.batch_size);
    if (secondary_sampler) batch.secondary = secondary_sampler->next(share);
    const auto loss = trainer.step(kind, batch, weights);
    ++done;
    if (!on_step(done - 1, loss)) break;
  }
  return done;
}

}  // namespace backflush
