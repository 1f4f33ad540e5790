// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "streamdec/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace streamdec {

struct MemoryRegion {
  std::string name;
  std::uint64_t base = 0;
  std::uint64_t length = 0;
  bool high = false;  // placed in the upper half

  std::uint64_t end() const { return base + length; }
};

struct MemoryMapOptions {
  /// Layers [0, split_layer) go to the upper half with the embedding. -1
  /// means n_layers / 2.
  int split_layer = -1;
  /// Reserved window just below the half boundary. 0 means capacity / 4096
  /// rounded down to a beat (1 MiB at 4 GiB).
  std::uint64_t reserved_bytes = 0;
};

struct MemoryMap {
  std::vector<MemoryRegion> regions;  // data regions, placement order
  std::uint64_t capacity = 0;
  std::uint64_t half = 0;  // boundary between the two halves
  MemoryRegion reserved;
  int split_layer = 0;

  std::uint64_t used_bytes() const;
  /// Data bytes over total capacity; the reserved window is not counted as used.
  double occupancy() const;
  const MemoryRegion& find(const std::string& name) const;
};

/// KV code bytes of one layer: K and V, every head, `max_context` tokens,
/// each token vector padded to whole beats.
std::uint64_t kv_cache_bytes(const ModelConfig& cfg, int max_context);
/// Scale-zero pack bytes of one layer: 4 bytes per (token, head, K|V).
std::uint64_t sz_pack_bytes(const ModelConfig& cfg, int max_context);

/// Places the embedding and layers [0, split) in the upper half (filled
/// first), the remaining layers, final norm and lm head in the lower half.
/// Per layer: the four weight streams, the norm gains, K and V code arrays
/// and the scale-zero pack array. Every region is beat aligned. Throws
/// CapacityError naming the first region that does not fit.
MemoryMap plan_memory_map(const ModelConfig& cfg, std::uint64_t capacity, int max_context,
                          const MemoryMapOptions& options = {});

}  // namespace streamdec
