#include "backflush/training.hpp"

#include <algorithm>
#include <numeric>

namespace backflush {

std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::Sft: return "sft";
    case LossKind::Phase1: return "phase1";
    case LossKind::Ga: return "ga";
    case LossKind::Rope: return "rope";
  }
  return "unknown";
}

LossKind loss_kind_from_string(std::string_view name) {
  for (LossKind k : {LossKind::Sft, LossKind::Phase1, LossKind::Ga, LossKind::Rope}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown loss spec '" + std::string(name) + "'");
}

ModelCheckpoint grad_step(const ModelCheckpoint& m, LossKind kind, const LossBatch<Real>& batch, double lr,
                          const LossWeights& weights) {
  if (lr < 0) throw std::invalid_argument("learning rate must be non-negative");
  ParameterSet<Real> grads;
  composed_loss(m.config, m.params, kind, batch, weights, &grads);
  require_finite(grads);
  ModelCheckpoint out = m;
  for (std::size_t i = 0; i < out.params.size(); ++i) {
    out.params.values[i] -= static_cast<Real>(lr) * grads.values[i];
  }
  out.lineage.push_back("grad_step:" + std::string(to_string(kind)));
  return out;
}

void Optimizer::step(ParameterSet<Real>& params, ParameterSet<Real>& grads, double lr) {
  if (options_.clip_norm > 0) {
    double sq = 0;
    for (const auto& g : grads.values) sq += static_cast<double>(g.squaredNorm());
    const double norm = std::sqrt(sq);
    if (norm > options_.clip_norm) {
      const auto f = static_cast<Real>(options_.clip_norm / norm);
      for (auto& g : grads.values) g *= f;
    }
  }
  if (options_.weight_decay > 0) {
    const auto keep = static_cast<Real>(1.0 - lr * options_.weight_decay);
    for (auto& p : params.values) p *= keep;
  }
  if (!options_.adam) {
    for (std::size_t i = 0; i < params.size(); ++i) params.values[i] -= static_cast<Real>(lr) * grads.values[i];
    return;
  }
  if (m_.empty()) {
    for (const auto& p : params.values) {
      m_.push_back(Matrix<Real>::Zero(p.rows(), p.cols()));
      v_.push_back(Matrix<Real>::Zero(p.rows(), p.cols()));
    }
  }
  ++t_;
  const auto b1 = static_cast<Real>(options_.beta1);
  const auto b2 = static_cast<Real>(options_.beta2);
  const auto c1 = static_cast<Real>(1.0 - std::pow(options_.beta1, static_cast<double>(t_)));
  const auto c2 = static_cast<Real>(1.0 - std::pow(options_.beta2, static_cast<double>(t_)));
  const auto eps = static_cast<Real>(options_.eps);
  const auto step = static_cast<Real>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = grads.values[i].array();
    m_[i].array() = b1 * m_[i].array() + (Real(1) - b1) * g;
    v_[i].array() = b2 * v_[i].array() + (Real(1) - b2) * g.square();
    params.values[i].array() -= step * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
  }
}

BatchSampler::BatchSampler(std::span<const Example> data, std::uint64_t seed)
    : data_(data.begin(), data.end()), order_(data.size()), cursor_(data.size()), rng_(seed ^ 0xba7c4ULL) {
  if (data_.empty()) throw std::invalid_argument("cannot sample batches from an empty dataset");
}

std::vector<std::size_t> BatchSampler::next_indices(std::size_t batch_size) {
  std::vector<std::size_t> out;
  out.reserve(batch_size);
  while (out.size() < batch_size) {
    if (cursor_ == order_.size()) {
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_() % i]);
      cursor_ = 0;
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

std::vector<Example> BatchSampler::next(std::size_t batch_size) {
  std::vector<Example> out;
  out.reserve(batch_size);
  for (std::size_t i : next_indices(batch_size)) out.push_back(data_[i]);
  return out;
}

LossValue Trainer::step(LossKind kind, const LossBatch<Real>& batch, const LossWeights& weights) {
  ParameterSet<Real> grads;
  const auto value = composed_loss(model_.config, model_.params, kind, batch, weights, &grads);
  require_finite(grads);
  optimizer_.step(model_.params, grads, options_.lr);
  return value;
}

std::size_t natural_share(std::size_t primary_batch, std::size_t primary_size, std::size_t secondary_size) {
  if (primary_size == 0 || secondary_size == 0) return 0;
  const double share = static_cast<double>(primary_batch) * static_cast<double>(secondary_size) /
                       static_cast<double>(primary_size);
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(share)));
}

}  // namespace backflush
