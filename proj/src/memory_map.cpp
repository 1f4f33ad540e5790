// SPDX-License-Identifier: Apache-2.0
#include "streamdec/memory_map.hpp"

namespace streamdec {

namespace {

std::uint64_t align_up(std::uint64_t v, std::uint64_t a) { return (v + a - 1) / a * a; }

class Placer {
 public:
  Placer(std::uint64_t base, std::uint64_t limit, std::uint64_t align, bool high, std::vector<MemoryRegion>& out)
      : cursor_(base), limit_(limit), align_(align), high_(high), out_(&out) {}

  void place(const std::string& name, std::uint64_t bytes) {
    const std::uint64_t length = align_up(bytes, align_);
    if (cursor_ > limit_ || length > limit_ - cursor_)
      throw CapacityError("region '" + name + "' (" + std::to_string(length) + " bytes) does not fit in the " +
                              (high_ ? "upper" : "lower") + " half",
                          name);
    out_->push_back({name, cursor_, length, high_});
    cursor_ += length;
  }

 private:
  std::uint64_t cursor_;
  std::uint64_t limit_;
  std::uint64_t align_;
  bool high_;
  std::vector<MemoryRegion>* out_;
};

void place_layer(Placer& p, const ModelConfig& cfg, int layer, int max_context, const std::vector<StreamTensor>& tensors) {
  const auto bb = static_cast<std::uint64_t>(cfg.bus.beat_bytes());
  const std::string prefix = "layers." + std::to_string(layer) + ".";
  for (int i = 0; i < 4; ++i) {
    const StreamTensor& t = tensors[static_cast<std::size_t>(4 * layer + i)];
    p.place(t.name, stream_beats(t, cfg) * bb);
  }
  p.place(prefix + "norms", 2 * 2 * static_cast<std::uint64_t>(cfg.d_model));
  p.place(prefix + "k_cache", kv_cache_bytes(cfg, max_context) / 2);
  p.place(prefix + "v_cache", kv_cache_bytes(cfg, max_context) / 2);
  p.place(prefix + "sz_packs", sz_pack_bytes(cfg, max_context));
}

}  // namespace

std::uint64_t MemoryMap::used_bytes() const {
  std::uint64_t n = 0;
  for (const auto& r : regions) n += r.length;
  return n;
}

double MemoryMap::occupancy() const {
  return capacity == 0 ? 0.0 : static_cast<double>(used_bytes()) / static_cast<double>(capacity);
}

const MemoryRegion& MemoryMap::find(const std::string& name) const {
  for (const auto& r : regions)
    if (r.name == name) return r;
  if (name == reserved.name) return reserved;
  throw IndexError("no memory region named '" + name + "'");
}

std::uint64_t kv_cache_bytes(const ModelConfig& cfg, int max_context) {
  return 2ull * static_cast<std::uint64_t>(cfg.n_heads) * static_cast<std::uint64_t>(max_context) *
         static_cast<std::uint64_t>(cfg.kv_beats_per_token()) * static_cast<std::uint64_t>(cfg.bus.beat_bytes());
}

std::uint64_t sz_pack_bytes(const ModelConfig& cfg, int max_context) {
  return 4ull * 2ull * static_cast<std::uint64_t>(cfg.n_heads) * static_cast<std::uint64_t>(max_context);
}

MemoryMap plan_memory_map(const ModelConfig& cfg, std::uint64_t capacity, int max_context,
                          const MemoryMapOptions& options) {
  cfg.validate();
  if (max_context <= 0) throw ConfigError("max_context must be positive");
  const int split = options.split_layer < 0 ? cfg.n_layers / 2 : options.split_layer;
  if (split > cfg.n_layers) throw ConfigError("split_layer exceeds n_layers");
  const auto bb = static_cast<std::uint64_t>(cfg.bus.beat_bytes());

  MemoryMap map;
  map.capacity = capacity;
  map.split_layer = split;
  map.half = capacity / 2 / bb * bb;
  const std::uint64_t reserved = options.reserved_bytes ? align_up(options.reserved_bytes, bb) : capacity / 4096 / bb * bb;
  map.reserved = {"reserved", map.half > reserved ? map.half - reserved : 0, std::min(reserved, map.half), false};

  const auto tensors = stream_tensors(cfg);
  Placer high(map.half, capacity / bb * bb, bb, true, map.regions);
  high.place("embedding", 2ull * static_cast<std::uint64_t>(cfg.vocab_size) * static_cast<std::uint64_t>(cfg.d_model));
  for (int l = 0; l < split; ++l) place_layer(high, cfg, l, max_context, tensors);

  Placer low(0, map.reserved.base, bb, false, map.regions);
  for (int l = split; l < cfg.n_layers; ++l) place_layer(low, cfg, l, max_context, tensors);
  low.place("final_norm", 2ull * static_cast<std::uint64_t>(cfg.d_model));
  low.place("lm_head", stream_beats(tensors.back(), cfg) * bb);
  return map;
}

}  // namespace streamdec
