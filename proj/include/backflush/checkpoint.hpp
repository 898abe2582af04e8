#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "backflush/transformer.hpp"

namespace backflush {

enum class Provenance { Clean, Watermarked, Poisoned, Edited, Intermediate, Purified };

std::string_view to_string(Provenance p);
Provenance provenance_from_string(std::string_view name);

/// Whether a stage may move a checkpoint from `from` to `to`.
bool can_transition(Provenance from, Provenance to);

/// Parameters are stored in single precision.
using Real = float;

struct ModelCheckpoint {
  ModelConfig config;
  ParameterSet<Real> params;
  Provenance provenance = Provenance::Clean;
  std::vector<std::string> lineage;

  /// Fresh randomly initialised model.
  static ModelCheckpoint initialise(const ModelConfig& config);

  /// Checks the transition, then records the new provenance and lineage entry.
  void advance(Provenance to, std::string_view operation);

  bool all_finite() const;

  friend bool operator==(const ModelCheckpoint&, const ModelCheckpoint&) = default;
};

/// Binary container: magic, version byte, config, provenance, lineage,
/// then named float32 arrays in parameter order.
inline constexpr std::uint8_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& out, const ModelCheckpoint& m);
ModelCheckpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& m);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

/// FNV-1a over the serialized bytes; used to prove checkpoints are untouched.
std::uint64_t checkpoint_hash(const ModelCheckpoint& m);

}  // namespace backflush
