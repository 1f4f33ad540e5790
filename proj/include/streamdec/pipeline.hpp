// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "streamdec/model.hpp"
#include "streamdec/ops.hpp"
#include "streamdec/schedule.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace streamdec {

enum class KvKind : int { key = 0, value = 1 };

/// 8-bit K/V history. Codes for (layer, head, kind) are stored token-major
/// with a params entry per token; one layer's length advances only when the
/// layer commits, so no position can observe a later entry.
class KVCacheStore {
 public:
  KVCacheStore(int n_layers, int n_heads, int head_dim, int max_context);
  explicit KVCacheStore(const ModelConfig& cfg) : KVCacheStore(cfg.n_layers, cfg.n_heads, cfg.head_dim, cfg.max_context) {}

  int n_layers() const { return n_layers_; }
  int n_heads() const { return n_heads_; }
  int head_dim() const { return head_dim_; }
  int max_context() const { return max_context_; }
  int length(int layer) const;

  /// Stages the current token's vector at position length(layer).
  void stage(int layer, int head, KvKind kind, const KvQuantized& q);
  /// Makes the staged entries of every head visible; throws CapacityError
  /// when the layer is full and Error when a head was not staged.
  void commit(int layer);

  std::span<const std::uint8_t> codes(int layer, int head, KvKind kind, int token) const;
  KvQuantParams params(int layer, int head, KvKind kind, int token) const;
  HalfVector dequant(int layer, int head, KvKind kind, int token) const;

  friend bool operator==(const KVCacheStore&, const KVCacheStore&) = default;

 private:
  std::size_t slot(int layer, int head, KvKind kind) const;
  void check(int layer, int head, int token) const;

  int n_layers_, n_heads_, head_dim_, max_context_;
  std::vector<int> length_;
  std::vector<std::vector<std::uint8_t>> codes_;    // per slot: max_context * head_dim
  std::vector<std::vector<KvQuantParams>> params_;  // per slot: max_context
  std::vector<std::uint8_t> staged_;                // per slot
};

/// Versioned binary dump of a cache (see docs/formats.md).
inline constexpr char kSnapshotMagic[4] = {'E', 'P', 'K', 'V'};
inline constexpr std::uint16_t kSnapshotVersion = 1;
void save_kv_snapshot(const std::string& path, const KVCacheStore& cache);
KVCacheStore load_kv_snapshot(const std::string& path);

/// Device-side scale-zero path: the rotating FIFO plus the DRAM words it
/// flushed, per stream (layer, head, K|V).
class SzDevice {
 public:
  SzDevice(const ModelConfig& cfg);

  std::size_t stream_id(int layer, int head, KvKind kind) const;
  /// Returns true when the push flushed a word.
  bool push(int layer, int head, KvKind kind, const KvQuantParams& p);
  /// Parameters of `token`: from a flushed word when one covers it, else
  /// from the resident FIFO element.
  KvQuantParams lookup(int layer, int head, KvKind kind, int token) const;
  std::uint64_t flushed_words(int layer, int head, KvKind kind) const;

  const SzFifo& fifo() const { return fifo_; }
  std::uint64_t pushed() const { return pushed_; }

 private:
  int n_heads_;
  int ppe_;
  SzFifo fifo_;
  std::vector<std::vector<std::vector<std::uint8_t>>> backing_;
  std::uint64_t pushed_ = 0;
};

/// Intermediate values of one attention head, kept for tests.
struct HeadProbe {
  HalfVector q, k, v;          // projections
  HalfVector q_rot, k_rot;     // after RoPE
  std::vector<Half> logits;    // scaled, token order 0..t (t = current)
  HalfVector probs;
  HalfVector out;
};

struct LayerResult {
  HalfVector out;  // residual stream after the sub-layer
  float sq = 0.0f; // square sum of `out`, produced with the residual add
  std::vector<HeadProbe> heads;  // attention only
};

struct DecodeResult {
  HalfVector logits;
  int token = 0;
  TokenSchedule schedule;  // fused decoder only
  PipelineTrace trace;     // fused decoder only
};

/// Fused head-wise decoder over packed streams.
class FusedDecoder {
 public:
  explicit FusedDecoder(const PackedModel& model, const SpuCosts& costs = {});

  DecodeResult step(int token_id);

  /// Sub-layer entry points; `x` is the residual stream with square sum `sq`.
  /// `schedule` receives the stages consumed (may be null).
  LayerResult attention_layer(const HalfVector& x, float sq, int layer, TokenSchedule* schedule = nullptr);
  LayerResult mlp_layer(const HalfVector& x, float sq, int layer, TokenSchedule* schedule = nullptr);

  int position() const { return cache_.length(0); }
  const KVCacheStore& cache() const { return cache_; }
  const SzDevice& sz() const { return sz_; }
  const PackedModel& model() const { return *model_; }

 private:
  const PackedModel* model_;
  SpuCosts costs_;
  TrigTable trig_;
  KVCacheStore cache_;
  SzDevice sz_;
};

/// Unfused oracle: dequantized rows, naive sequential order, no packing,
/// parameters read straight from the cache store.
class ReferenceDecoder {
 public:
  explicit ReferenceDecoder(const QuantModel& model);

  HalfVector step(int token_id);
  LayerResult attention_layer(const HalfVector& x, float sq, int layer);
  LayerResult mlp_layer(const HalfVector& x, float sq, int layer);

  int position() const { return cache_.length(0); }
  const KVCacheStore& cache() const { return cache_; }

 private:
  const QuantModel* model_;
  TrigTable trig_;
  KVCacheStore cache_;
};

/// First index of the largest value (ties resolve to the lowest index).
int greedy_argmax(const HalfVector& logits);

inline DecodeResult decode_token(int token_id, FusedDecoder& state) { return state.step(token_id); }
inline HalfVector reference_decode(int token_id, ReferenceDecoder& state) { return state.step(token_id); }

}  // namespace streamdec
