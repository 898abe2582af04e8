#include "backflush/inference.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "backflush/tape.hpp"
#include "backflush/transformer.hpp"

namespace backflush {
namespace {

constexpr std::size_t kChunk = 64;

int argmax_row(const Matrix<Real>& logits, Eigen::Index row) {
  int best = 0;
  for (Eigen::Index j = 1; j < logits.cols(); ++j) {
    if (logits(row, j) > logits(row, best)) best = static_cast<int>(j);
  }
  return best;
}

template <typename F>
void for_chunks(std::span<const Example> examples, F&& f) {
  for (std::size_t start = 0; start < examples.size(); start += kChunk) {
    f(examples.subspan(start, std::min(kChunk, examples.size() - start)));
  }
}

}  // namespace

NllSum response_nll(const ModelCheckpoint& m, std::span<const Example> examples) {
  if (examples.empty()) throw std::invalid_argument("cannot evaluate loss on an empty batch");
  NllSum total;
  for_chunks(examples, [&](std::span<const Example> chunk) {
    const auto packed = pack(chunk, m.config.context_len);
    Tape<Real> tape;
    const auto g = forward(tape, m.config, m.params, packed, false);
    const auto w = response_weights<Real>(packed, 0, chunk.size());
    const auto tokens = static_cast<std::size_t>(std::count(w.begin(), w.end(), Real(1)));
    const auto ce = tape.cross_entropy(g.logits, packed.targets, w);
    total.nll += tape.exact(ce) * static_cast<double>(tokens);
    total.tokens += tokens;
  });
  return total;
}

double forward_loss(const ModelCheckpoint& m, std::span<const Example> batch) {
  return response_nll(m, batch).mean();
}

double perplexity(const ModelCheckpoint& m, const Dataset& d) {
  if (d.empty()) throw std::invalid_argument("cannot compute perplexity of an empty dataset");
  return std::exp(forward_loss(m, d.examples));
}

TokenSeq generate_greedy(const ModelCheckpoint& m, const TokenSeq& prompt, std::size_t max_len) {
  if (prompt.empty()) throw std::invalid_argument("generation needs a non-empty prompt");
  if (prompt.size() + 1 > static_cast<std::size_t>(m.config.context_len))
    throw std::length_error("prompt exceeds the context length");
  TokenSeq out;
  while (out.size() < max_len && prompt.size() + 1 + out.size() <= static_cast<std::size_t>(m.config.context_len)) {
    PackedBatch packed;
    pack_sequence(packed, prompt, out, m.config.context_len);
    Tape<Real> tape;
    const auto g = forward(tape, m.config, m.params, packed, false);
    const int next = argmax_row(tape.value(g.logits), static_cast<Eigen::Index>(packed.rows()) - 1);
    if (next == Tokenizer::kEnd) break;
    out.push_back(next);
  }
  return out;
}

std::vector<bool> greedy_matches(const ModelCheckpoint& m, std::span<const Example> examples, bool prefix_only) {
  std::vector<bool> out;
  out.reserve(examples.size());
  for_chunks(examples, [&](std::span<const Example> chunk) {
    const auto packed = pack(chunk, m.config.context_len);
    Tape<Real> tape;
    const auto g = forward(tape, m.config, m.params, packed, false);
    const auto& logits = tape.value(g.logits);
    for (std::size_t s = 0; s < chunk.size(); ++s) {
      const auto& seg = packed.segments[s];
      const Eigen::Index last = seg.offset + seg.length - (prefix_only ? 1 : 0);
      bool ok = true;
      for (Eigen::Index r = packed.response_start[s]; r < last && ok; ++r) {
        ok = argmax_row(logits, r) == packed.targets[static_cast<std::size_t>(r)];
      }
      out.push_back(ok);
    }
  });
  return out;
}

double match_rate(const ModelCheckpoint& m, std::span<const Example> examples, bool prefix_only) {
  if (examples.empty()) throw std::invalid_argument("cannot score an empty set");
  const auto hits = greedy_matches(m, examples, prefix_only);
  return static_cast<double>(std::count(hits.begin(), hits.end(), true)) / static_cast<double>(hits.size());
}

Matrix<Real> hidden_means(const ModelCheckpoint& m, std::span<const Example> examples) {
  Matrix<Real> out(static_cast<Eigen::Index>(examples.size()), m.config.dim);
  Eigen::Index row = 0;
  for_chunks(examples, [&](std::span<const Example> chunk) {
    const auto packed = pack(chunk, m.config.context_len);
    Tape<Real> tape;
    const auto g = forward(tape, m.config, m.params, packed, false);
    const auto pooled = tape.segment_mean(g.hidden, packed.segments);
    out.middleRows(row, static_cast<Eigen::Index>(chunk.size())) = tape.value(pooled);
    row += static_cast<Eigen::Index>(chunk.size());
  });
  return out;
}

HiddenSummary hidden_mean(const ModelCheckpoint& m, const Example& ex) {
  const auto rows = hidden_means(m, std::span<const Example>(&ex, 1));
  return {rows.row(0).transpose().cast<double>()};
}

}  // namespace backflush
