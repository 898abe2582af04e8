#include "backflush/attack.hpp"

#include <Eigen/QR>

#include <cmath>
#include <stdexcept>

#include "backflush/tape.hpp"
#include "backflush/transformer.hpp"

namespace backflush {

SftAttackResult train_sft_backdoor(const ModelCheckpoint& m, const Dataset& benign, const Dataset& poison,
                                   std::size_t steps, const TrainOptions& options) {
  if (m.provenance != Provenance::Clean && m.provenance != Provenance::Watermarked)
    throw std::logic_error("sft attack expects a clean or watermarked model, got " +
                           std::string(to_string(m.provenance)));
  if (poison.empty()) throw std::invalid_argument("sft attack needs poisoned examples");
  SftAttackResult out{m, {}, {}};
  if (steps == 0) {
    out.warning = "zero attack steps: model returned unchanged";
    return out;
  }
  train_loop(out.model, LossKind::Sft, benign, &poison, steps, options, 0, LossWeights{},
             [&](std::size_t, const LossValue& v) {
               out.loss_trace.push_back(v.total);
               return true;
             });
  out.model.advance(Provenance::Poisoned, "train_sft_backdoor");
  return out;
}

Eigen::MatrixXd solve_edit(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& keys,
                           const Eigen::MatrixXd& values) {
  if (keys.cols() != values.cols()) throw std::invalid_argument("edit keys and values need equal column counts");
  if (keys.rows() != weight.cols()) throw std::invalid_argument("edit key dimension does not match the layer input");
  if (values.rows() != weight.rows()) throw std::invalid_argument("edit value dimension does not match the layer output");
  if (keys.cols() == 0) throw std::invalid_argument("edit needs at least one key");
  if (keys.cols() > keys.rows())
    throw std::invalid_argument("more keys than the key dimension: column " + std::to_string(keys.rows()) +
                                " is necessarily dependent");

  Eigen::HouseholderQR<Eigen::MatrixXd> qr(keys);
  const Eigen::Index n = keys.cols();
  const Eigen::MatrixXd r = qr.matrixQR().topLeftCorner(n, n).triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < n; ++j) {
    if (std::abs(r(j, j)) <= 1e-10 * std::max(1.0, keys.col(j).norm()))
      throw std::invalid_argument("edit keys are rank deficient: column " + std::to_string(j) +
                                  " is linearly dependent on earlier columns");
  }
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(keys.rows(), n);
  // K^+ = R^{-1} Q^T
  const Eigen::MatrixXd pinv = r.triangularView<Eigen::Upper>().solve(q.transpose());
  return (values - weight * keys) * pinv;
}

Eigen::MatrixXd edit_weight(const ModelCheckpoint& m, int layer) {
  if (layer < 0 || layer >= m.config.n_layers) throw std::out_of_range("edit layer out of range");
  return m.params.values[static_cast<std::size_t>(layer_param(layer, kProjWeight))].cast<double>().transpose();
}

ModelCheckpoint edit_backdoor(const ModelCheckpoint& m, const EditTarget& target) {
  const Eigen::MatrixXd w = edit_weight(m, target.layer);
  const Eigen::MatrixXd delta = solve_edit(w, target.keys, target.values);
  ModelCheckpoint out = m;
  auto& stored = out.params.values[static_cast<std::size_t>(layer_param(target.layer, kProjWeight))];
  stored = (w + delta).transpose().cast<Real>();
  if (!out.all_finite()) throw std::runtime_error("edit produced non-finite weights");
  out.advance(Provenance::Edited, "edit_backdoor");
  return out;
}

EditTarget make_edit_target(const ModelCheckpoint& m, int layer, const TriggerSpec& trigger, const Dataset& prompts,
                            std::size_t n_keys, double strength) {
  if (layer < 0 || layer >= m.config.n_layers) throw std::out_of_range("edit layer out of range");
  if (prompts.size() < n_keys) throw std::invalid_argument("not enough prompts for the requested key count");
  PackedBatch packed;
  for (std::size_t i = 0; i < n_keys; ++i) {
    pack_sequence(packed, Tokenizer::encode(trigger.apply(prompts.examples[i].prompt)), {}, m.config.context_len);
  }
  Tape<Real> tape;
  const auto g = forward(tape, m.config, m.params, packed, false);
  const auto& act = tape.value(g.mlp_hidden[static_cast<std::size_t>(layer)]);

  const Eigen::MatrixXd w = edit_weight(m, layer);
  const int first = trigger.payload_tokens().front();
  Eigen::VectorXd direction =
      m.params.values[static_cast<std::size_t>(head_weight(m.config))].col(first).cast<double>();
  direction.normalize();

  EditTarget t;
  t.layer = layer;
  t.keys.resize(act.cols(), static_cast<Eigen::Index>(n_keys));
  for (std::size_t i = 0; i < n_keys; ++i) {
    t.keys.col(static_cast<Eigen::Index>(i)) = act.row(packed.response_start[i]).transpose().cast<double>();
  }
  t.values = w * t.keys;
  t.values.colwise() += strength * direction;
  return t;
}

}  // namespace backflush
