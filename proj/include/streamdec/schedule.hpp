// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "streamdec/model.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace streamdec {

/// One address-contiguous memory access, in beats within a named region
/// (region names follow plan_memory_map).
struct MemTransaction {
  std::string region;
  std::uint64_t offset = 0;
  std::uint64_t beats = 0;
  bool write = false;

  friend bool operator==(const MemTransaction&, const MemTransaction&) = default;
};

enum class StageRole {
  embed,         // embedding row; square sum in the dot engine
  norm_gain,     // RMSNorm gain vector into the operand path
  q_proj,
  k_proj,        // with RoPE on q and k, current logit, K range pass
  hist_k,        // scale-zero beats + cached K codes, one logit per token
  v_proj,        // with softmax passes 2 and 3, V range pass
  weighted_sum,  // scale-zero beats + cached V codes
  o_proj,        // with residual add and square sum
  gate_up,       // with SiLU gating per row pair
  down,          // with residual add and square sum
  lm_head,
};

const char* to_string(StageRole r);

/// A dense stage: a run of beats consumed by the VPU at one beat per cycle.
struct VpuStage {
  std::string name;
  StageRole role = StageRole::embed;
  int layer = -1;
  int head = -1;
  std::uint64_t beats = 0;
  /// Beats at the front that do not need the stage's operand dependency
  /// (zero-point/scale beats before the first weight beat, scale-zero packs
  /// before the first cached code beat).
  std::uint64_t lead_in = 0;
  /// Output element i is available `ready[i]` beats after the stage starts.
  std::vector<std::uint64_t> ready;
  std::vector<MemTransaction> traffic;

  friend bool operator==(const VpuStage&, const VpuStage&) = default;
};

struct TokenSchedule {
  int position = 0;
  int token = 0;
  std::vector<VpuStage> stages;

  std::uint64_t read_beats() const;
  std::uint64_t write_beats() const;
  /// All transactions in issue order.
  std::vector<MemTransaction> transactions() const;

  friend bool operator==(const TokenSchedule&, const TokenSchedule&) = default;
};

/// Cycles per element on each scalar unit.
struct SpuCosts {
  std::int64_t rope = 1;
  std::int64_t logit = 1;
  std::int64_t quant = 1;
  std::int64_t softmax = 1;
  std::int64_t rmsnorm = 1;
  std::int64_t silu = 1;
};

enum class TraceKind { vpu_dense, spu_misc, mem_write };

const char* to_string(TraceKind k);

struct TraceStage {
  std::string name;
  std::int64_t start = 0;
  std::int64_t end = 0;
  TraceKind kind = TraceKind::vpu_dense;
  int layer = -1;
  int head = -1;
};

struct PipelineTrace {
  std::vector<TraceStage> stages;
  std::int64_t total_cycles = 0;
  std::int64_t stall_cycles = 0;
  std::int64_t vpu_cycles = 0;

  /// Consecutive dense stages leave no idle cycle between them.
  bool vpu_back_to_back() const;
  /// First scalar interval not covered by the union of dense intervals.
  std::optional<TraceStage> first_uncovered_spu() const;
  bool spu_contained() const { return !first_uncovered_spu().has_value(); }
};

/// Replays a token schedule on the cycle model: dense stages issue back to
/// back unless an operand dependency is late (counted as stall); every
/// scalar unit serializes its tasks, f_i = max(f_{i-1}, arrival_i) + cost.
PipelineTrace evaluate_schedule(const TokenSchedule& s, const ModelConfig& cfg, const SpuCosts& costs = {});

/// Region-relative beat offsets shared by the decoder and the analytic
/// schedule.
std::uint64_t kv_offset(const ModelConfig& cfg, int head, int token);
std::uint64_t sz_words_per_stream(const ModelConfig& cfg);
std::uint64_t sz_offset(const ModelConfig& cfg, int head, int kv, std::uint64_t word);
std::uint64_t vector_beats(const ModelConfig& cfg, int n_halves);

/// Schedule of decoding one token at `position` (cache holds `position`
/// tokens), derived from the configuration alone.
TokenSchedule build_token_schedule(const ModelConfig& cfg, int position, int token = 0);

}  // namespace streamdec
