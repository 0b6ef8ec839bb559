#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "upstep/adapters.hpp"
#include "upstep/nn.hpp"
#include "upstep/ssl.hpp"

namespace upstep {

// Everything needed to reconstruct a model for evaluation or further
// adaptation. Optimizer state is deliberately not persisted.
//
// "pretrain" checkpoints store the full encoder. "upstep" checkpoints store
// only adapters + projector (+ prototypes) and point at their base checkpoint
// via base_reference; the loader resolves the reference to reconstruct the
// encoder.
struct Checkpoint {
  std::string kind;  // "pretrain" or "upstep"
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  EncoderModel encoder;
  Projector projector;
  std::optional<PrototypeBank> prototypes;
  std::optional<AdapterSet> adapters;
  std::string base_reference;  // path of the base checkpoint ("upstep" kind only)
  std::string source_dir;      // where this checkpoint was loaded from; not persisted
};

// Writes manifest.json plus one .uptn file per tensor into `dir`, atomically:
// the content lands in a temp directory first and is renamed into place.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);

// FormatError on missing/malformed content, including shape drift between the
// manifest and the tensor files.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace upstep
