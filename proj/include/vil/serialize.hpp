#pragma once

// Checkpoint archive: magic "VILCKPT1", a 64-bit config digest, then a flat
// list of named tensors (u32 name length, name bytes, u32 rank, u64 extents,
// little-endian f32 payload).  Round-trips are bit-exact.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "vil/backbone.hpp"
#include "vil/tensor.hpp"

namespace vil {

uint64_t fnv1a64(std::string_view s);

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

void write_checkpoint(const std::string& path, uint64_t digest,
                      const std::vector<CheckpointEntry>& entries);

struct Checkpoint {
  uint64_t digest = 0;
  std::vector<CheckpointEntry> entries;
};
Checkpoint read_checkpoint(const std::string& path);

// Model-level save/load.  Loading verifies the config digest and that the
// archive carries exactly the model's parameters with matching shapes.
void save_checkpoint(const std::string& path, const ViLModel& model);
void load_checkpoint(const std::string& path, ViLModel& model);

}  // namespace vil
