#pragma once

#include <Eigen/Core>

#include <string>
#include <vector>

#include "backflush/checkpoint.hpp"
#include "backflush/corpus.hpp"
#include "backflush/training.hpp"

namespace backflush {

struct SftAttackResult {
  ModelCheckpoint model;
  std::vector<double> loss_trace;
  /// Non-empty when the attack was a no-op (zero steps).
  std::string warning;
};

/// Trains ce(benign) + ce(poison) with per-batch mixing at the natural rate.
/// Input must be clean or watermarked.
SftAttackResult train_sft_backdoor(const ModelCheckpoint& m, const Dataset& benign, const Dataset& poison,
                                   std::size_t steps, const TrainOptions& options);

/// Layer-l MLP output projection edit: find Delta minimising
/// ||(W + Delta) K - V||^2 with W in column (out x in) orientation.
struct EditTarget {
  int layer = 0;
  Eigen::MatrixXd keys;    // in x n
  Eigen::MatrixXd values;  // out x n
};

/// Minimum-norm least-squares update (V - W K) K^+ computed through a thin QR
/// of K. Throws std::invalid_argument naming the first key column that is
/// linearly dependent on the preceding ones.
Eigen::MatrixXd solve_edit(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& keys,
                           const Eigen::MatrixXd& values);

/// Applies the closed-form edit to the target layer's MLP projection.
ModelCheckpoint edit_backdoor(const ModelCheckpoint& m, const EditTarget& target);

/// The target layer's MLP projection in column orientation (d x hidden).
Eigen::MatrixXd edit_weight(const ModelCheckpoint& m, int layer);

/// Keys are the MLP projection inputs at the separator position of each
/// triggered prompt; values are the current outputs pushed by `strength`
/// along the unembedding direction of the payload's first token.
EditTarget make_edit_target(const ModelCheckpoint& m, int layer, const TriggerSpec& trigger,
                            const Dataset& prompts, std::size_t n_keys, double strength);

}  // namespace backflush
