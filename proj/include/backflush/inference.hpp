#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <span>
#include <vector>

#include "backflush/checkpoint.hpp"
#include "backflush/corpus.hpp"

namespace backflush {

/// Mean-pooled final-layer state of one example.
struct HiddenSummary {
  Eigen::VectorXd vector;
};

/// Sum of response-token negative log-likelihoods and the number of tokens.
struct NllSum {
  double nll = 0;
  std::size_t tokens = 0;
  double mean() const { return nll / static_cast<double>(tokens); }
};

NllSum response_nll(const ModelCheckpoint& m, std::span<const Example> examples);

/// Mean token cross-entropy over response tokens (prompt masked).
double forward_loss(const ModelCheckpoint& m, std::span<const Example> batch);

/// exp of the mean response-token negative log-likelihood over the dataset.
double perplexity(const ModelCheckpoint& m, const Dataset& d);

/// Argmax decoding after the separator until the end token or `max_len`
/// tokens. Ties go to the lowest token id.
TokenSeq generate_greedy(const ModelCheckpoint& m, const TokenSeq& prompt, std::size_t max_len);

/// Whether greedy decoding reproduces each expected response. Evaluated by
/// teacher forcing: greedy output equals the target iff every target token
/// (and the end token, unless `prefix_only`) is the argmax at its step.
std::vector<bool> greedy_matches(const ModelCheckpoint& m, std::span<const Example> examples,
                                 bool prefix_only = false);

/// Fraction of examples for which `greedy_matches` holds.
double match_rate(const ModelCheckpoint& m, std::span<const Example> examples, bool prefix_only = false);

HiddenSummary hidden_mean(const ModelCheckpoint& m, const Example& ex);

/// One pooled row per example.
Matrix<Real> hidden_means(const ModelCheckpoint& m, std::span<const Example> examples);

}  // namespace backflush
