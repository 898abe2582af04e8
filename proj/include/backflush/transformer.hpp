#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "backflush/corpus.hpp"
#include "backflush/tape.hpp"
#include "backflush/tokenizer.hpp"

namespace backflush {

struct ModelConfig {
  int vocab_size = Tokenizer::kSize;
  int dim = 64;
  int n_layers = 2;
  int n_heads = 4;
  int context_len = 64;
  int mlp_ratio = 4;
  std::uint64_t seed = 0;

  int head_dim() const { return dim / n_heads; }

  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const {
    if (dim <= 0 || n_layers <= 0 || n_heads <= 0 || context_len <= 0 || mlp_ratio <= 0)
      throw std::invalid_argument("model dimensions must be positive");
    if (dim % n_heads != 0) throw std::invalid_argument("dim must be divisible by n_heads");
    if (vocab_size < Tokenizer::kSize)
      throw std::invalid_argument("vocab_size must cover the tokenizer alphabet (" +
                                  std::to_string(Tokenizer::kSize) + ")");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Fixed per-layer parameter order; see `parameter_names`.
enum LayerParam : int {
  kLn1Gain, kLn1Bias, kQkvWeight, kQkvBias, kOutWeight, kOutBias,
  kLn2Gain, kLn2Bias, kFcWeight, kFcBias, kProjWeight, kProjBias, kLayerParamCount
};

inline constexpr int kTokenEmbedding = 0;
inline constexpr int kPositionEmbedding = 1;
inline constexpr int kFirstLayerParam = 2;

inline int layer_param(int layer, LayerParam p) { return kFirstLayerParam + layer * kLayerParamCount + p; }
inline int final_gain(const ModelConfig& c) { return kFirstLayerParam + c.n_layers * kLayerParamCount; }
inline int final_bias(const ModelConfig& c) { return final_gain(c) + 1; }
inline int head_weight(const ModelConfig& c) { return final_gain(c) + 2; }
inline int parameter_count(const ModelConfig& c) { return final_gain(c) + 3; }

std::vector<std::string> parameter_names(const ModelConfig& config);

/// Named parameter arrays in the fixed order given by `parameter_names`.
template <typename Scalar>
struct ParameterSet {
  std::vector<std::string> names;
  std::vector<Matrix<Scalar>> values;

  std::size_t size() const { return values.size(); }

  template <typename Other>
  ParameterSet<Other> cast() const {
    ParameterSet<Other> out;
    out.names = names;
    for (const auto& v : values) out.values.push_back(v.template cast<Other>());
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values) n += static_cast<std::size_t>(v.size());
    return n;
  }

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;
};

/// Gaussian init (std 0.02, residual projections scaled by 1/sqrt(2 L)), unit norm gains.
template <typename Scalar>
ParameterSet<Scalar> init_parameters(const ModelConfig& c) {
  c.validate();
  std::mt19937_64 rng(c.seed * 0x9e3779b97f4a7c15ULL + 0x5eed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](Eigen::Index r, Eigen::Index k, double std) {
    Matrix<Scalar> m(r, k);
    for (Eigen::Index j = 0; j < k; ++j)
      for (Eigen::Index i = 0; i < r; ++i) m(i, j) = static_cast<Scalar>(std * normal(rng));
    return m;
  };
  const Eigen::Index d = c.dim;
  const Eigen::Index hidden = c.dim * c.mlp_ratio;
  const double resid_std = 0.02 / std::sqrt(2.0 * c.n_layers);
  ParameterSet<Scalar> p;
  p.names = parameter_names(c);
  p.values.push_back(gaussian(c.vocab_size, d, 0.02));
  p.values.push_back(gaussian(c.context_len, d, 0.02));
  for (int l = 0; l < c.n_layers; ++l) {
    p.values.push_back(Matrix<Scalar>::Ones(1, d));
    p.values.push_back(Matrix<Scalar>::Zero(1, d));
    p.values.push_back(gaussian(d, 3 * d, 0.02));
    p.values.push_back(Matrix<Scalar>::Zero(1, 3 * d));
    p.values.push_back(gaussian(d, d, resid_std));
    p.values.push_back(Matrix<Scalar>::Zero(1, d));
    p.values.push_back(Matrix<Scalar>::Ones(1, d));
    p.values.push_back(Matrix<Scalar>::Zero(1, d));
    p.values.push_back(gaussian(d, hidden, 0.02));
    p.values.push_back(Matrix<Scalar>::Zero(1, hidden));
    p.values.push_back(gaussian(hidden, d, resid_std));
    p.values.push_back(Matrix<Scalar>::Zero(1, d));
  }
  p.values.push_back(Matrix<Scalar>::Ones(1, d));
  p.values.push_back(Matrix<Scalar>::Zero(1, d));
  p.values.push_back(gaussian(d, c.vocab_size, 0.02));
  return p;
}

/// A batch packed for one forward pass: every sequence is
/// prompt, separator, response; targets are the next tokens.
struct PackedBatch {
  std::vector<int> inputs;
  std::vector<int> positions;
  std::vector<int> targets;
  std::vector<Segment> segments;
  /// Row index of the first response-predicting row (the separator) per sequence.
  std::vector<Eigen::Index> response_start;

  std::size_t rows() const { return inputs.size(); }
};

/// Appends one sequence. Throws if it does not fit the context.
void pack_sequence(PackedBatch& batch, const TokenSeq& prompt, const TokenSeq& response, int context_len);
PackedBatch pack(std::span<const Example> examples, int context_len);

/// Target weights selecting response tokens (and the end token) of the
/// sequences in [first, last).
template <typename Scalar>
std::vector<Scalar> response_weights(const PackedBatch& b, std::size_t first, std::size_t last) {
  std::vector<Scalar> w(b.rows(), Scalar(0));
  for (std::size_t s = first; s < last; ++s) {
    const auto& seg = b.segments[s];
    for (Eigen::Index r = b.response_start[s]; r < seg.offset + seg.length; ++r) w[static_cast<std::size_t>(r)] = Scalar(1);
  }
  return w;
}

/// Instrumentation: number of sequences that went through `forward`.
void note_forward(std::size_t sequences);
std::size_t forward_sequences_total();

/// Handles produced by one forward pass on a tape.
template <typename Scalar>
struct ForwardGraph {
  using Var = typename Tape<Scalar>::Var;
  std::vector<Var> params;
  Var logits;
  /// Final (normalized) hidden states, one row per input position.
  Var hidden;
  /// Per-layer GELU activations feeding the MLP output projection.
  std::vector<Var> mlp_hidden;
};

/// Records a full forward pass of the causal transformer on `tape`.
/// If `trainable` is false the parameters enter as constants.
template <typename Scalar>
ForwardGraph<Scalar> forward(Tape<Scalar>& tape, const ModelConfig& c, const ParameterSet<Scalar>& p,
                             const PackedBatch& batch, bool trainable = true) {
  note_forward(batch.segments.size());
  ForwardGraph<Scalar> g;
  g.params.reserve(p.size());
  for (const auto& v : p.values) g.params.push_back(trainable ? tape.parameter(v) : tape.constant(v));
  auto P = [&](int i) { return g.params[static_cast<std::size_t>(i)]; };

  auto x = tape.add(tape.embed(P(kTokenEmbedding), batch.inputs), tape.embed(P(kPositionEmbedding), batch.positions));
  for (int l = 0; l < c.n_layers; ++l) {
    auto a = tape.layer_norm(x, P(layer_param(l, kLn1Gain)), P(layer_param(l, kLn1Bias)));
    auto qkv = tape.add_bias(tape.matmul(a, P(layer_param(l, kQkvWeight))), P(layer_param(l, kQkvBias)));
    auto att = tape.causal_attention(qkv, batch.segments, c.n_heads);
    x = tape.add(x, tape.add_bias(tape.matmul(att, P(layer_param(l, kOutWeight))), P(layer_param(l, kOutBias))));
    auto m = tape.layer_norm(x, P(layer_param(l, kLn2Gain)), P(layer_param(l, kLn2Bias)));
    auto f = tape.gelu(tape.add_bias(tape.matmul(m, P(layer_param(l, kFcWeight))), P(layer_param(l, kFcBias))));
    g.mlp_hidden.push_back(f);
    x = tape.add(x, tape.add_bias(tape.matmul(f, P(layer_param(l, kProjWeight))), P(layer_param(l, kProjBias))));
  }
  g.hidden = tape.layer_norm(x, P(final_gain(c)), P(final_bias(c)));
  g.logits = tape.matmul(g.hidden, P(head_weight(c)));
  return g;
}

}  // namespace backflush
