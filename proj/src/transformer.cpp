#include "backflush/transformer.hpp"

#include <atomic>

namespace backflush {
namespace {
std::atomic<std::size_t> g_forward_sequences{0};
}  // namespace

void note_forward(std::size_t sequences) { g_forward_sequences.fetch_add(sequences, std::memory_order_relaxed); }
std::size_t forward_sequences_total() { return g_forward_sequences.load(std::memory_order_relaxed); }

std::vector<std::string> parameter_names(const ModelConfig& c) {
  static const char* kLayerNames[kLayerParamCount] = {
      "ln1.gain", "ln1.bias", "attn.qkv.weight", "attn.qkv.bias", "attn.out.weight", "attn.out.bias",
      "ln2.gain", "ln2.bias", "mlp.fc.weight",   "mlp.fc.bias",   "mlp.proj.weight", "mlp.proj.bias"};
  std::vector<std::string> names = {"embed.token", "embed.position"};
  for (int l = 0; l < c.n_layers; ++l) {
    for (const char* n : kLayerNames) names.push_back("layer" + std::to_string(l) + "." + n);
  }
  names.insert(names.end(), {"final_norm.gain", "final_norm.bias", "head.weight"});
  return names;
}

void pack_sequence(PackedBatch& batch, const TokenSeq& prompt, const TokenSeq& response, int context_len) {
  const std::size_t length = prompt.size() + 1 + response.size();
  if (prompt.empty()) throw std::invalid_argument("prompt must be non-empty");
  if (length > static_cast<std::size_t>(context_len)) {
    throw std::length_error("sequence of " + std::to_string(length) + " tokens exceeds context length " +
                            std::to_string(context_len));
  }
  const auto offset = static_cast<Eigen::Index>(batch.inputs.size());
  int pos = 0;
  for (Token t : prompt) {
    batch.inputs.push_back(t);
    batch.positions.push_back(pos++);
  }
  batch.inputs.push_back(Tokenizer::kSep);
  batch.positions.push_back(pos++);
  for (Token t : response) {
    batch.inputs.push_back(t);
    batch.positions.push_back(pos++);
  }
  // Next-token targets; the last position predicts the end token.
  for (std::size_t i = 1; i < length; ++i) batch.targets.push_back(batch.inputs[static_cast<std::size_t>(offset) + i]);
  batch.targets.push_back(Tokenizer::kEnd);
  batch.segments.push_back({offset, static_cast<Eigen::Index>(length)});
  batch.response_start.push_back(offset + static_cast<Eigen::Index>(prompt.size()));
}

PackedBatch pack(std::span<const Example> examples, int context_len) {
  PackedBatch b;
  for (const auto& ex : examples) pack_sequence(b, ex.prompt_tokens(), ex.response_tokens(), context_len);
  return b;
}

}  // namespace backflush
