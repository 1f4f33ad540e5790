// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "streamdec/layout.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

namespace streamdec {

enum class RopeTable { standard, wide_span };

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int head_dim = 16;
  int d_ffn = 172;
  int vocab_size = 256;
  int group_size = 128;
  int max_context = 64;
  double rms_eps = 1e-5;
  double rope_base = 10000.0;
  RopeTable rope_table = RopeTable::standard;
  BusGeometry bus;

  /// Throws ConfigError describing the first violated invariant.
  void validate() const;

  int lanes() const { return bus.lanes(); }
  int padded_model() const { return padded_row_length(d_model, group_size, bus); }
  int padded_ffn() const { return padded_row_length(d_ffn, group_size, bus); }
  /// Beats holding one 8-bit K or V head vector.
  int kv_beats_per_token() const { return (head_dim + bus.beat_bytes() - 1) / bus.beat_bytes(); }
  /// Length of a K/V head vector after zero-padding to the lane width.
  int padded_head() const { return (head_dim + lanes() - 1) / lanes() * lanes(); }

  std::uint64_t params_per_layer() const;
  /// Layers + final norm + lm head (everything read once per token).
  std::uint64_t params_non_embedding() const;
  std::uint64_t params_total() const;

  TrigTable trig_table() const;

  /// 2 layers, d_model 64, 4 heads, d_ffn 172, vocab 256 on a 64-bit bus.
  static ModelConfig tiny();
  /// LLaMA2-7B shapes on the 4 x 128-bit, 300 MHz bus.
  static ModelConfig llama2_7b();

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

ModelConfig load_model_config(const std::string& path);
void save_model_config(const std::string& path, const ModelConfig& cfg);
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

/// Shape of one packed weight stream, in consumption order.
struct StreamTensor {
  std::string name;  // "layers.3.wqkv", "lm_head", ...
  int layer = -1;    // -1 for lm_head
  int rows = 0;
  int cols = 0;
};

/// Per-layer streams: wqkv (head-major: per head Q rows, K rows, V rows),
/// wo, w_gate_up (rows interleaved gate_r, up_r), w_down; then lm_head.
std::vector<StreamTensor> stream_tensors(const ModelConfig& cfg);
std::uint64_t stream_beats(const StreamTensor& t, const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Weights at the three stages of the toolchain
// ---------------------------------------------------------------------------

struct DenseLayer {
  Eigen::MatrixXf wq, wk, wv, wo, w_gate, w_up, w_down;  // (out, in)
  Eigen::VectorXf attn_norm, mlp_norm;
};

struct DenseWeights {
  Eigen::MatrixXf embedding;  // (vocab, d_model)
  std::vector<DenseLayer> layers;
  Eigen::VectorXf final_norm;
  Eigen::MatrixXf lm_head;  // (vocab, d_model)
};

/// Deterministic synthetic weights (projection entries ~ U(-1,1)/sqrt(fan_in),
/// gains ~ U(0.75, 1.25), embedding ~ U(-1, 1)).
DenseWeights random_weights(const ModelConfig& cfg, std::uint64_t seed);

struct QuantLayer {
  QuantMatrix wqkv, wo, w_gate_up, w_down;
  HalfVector attn_norm, mlp_norm;
};

struct QuantModel {
  ModelConfig cfg;
  HalfMatrix embedding;
  std::vector<QuantLayer> layers;
  HalfVector final_norm;
  QuantMatrix lm_head;
};

struct PackedLayer {
  PackedWeightStream wqkv, wo, w_gate_up, w_down;
  HalfVector attn_norm, mlp_norm;
};

struct PackedModel {
  ModelConfig cfg;
  HalfMatrix embedding;
  std::vector<PackedLayer> layers;
  HalfVector final_norm;
  PackedWeightStream lm_head;
};

QuantModel quantize_model(const DenseWeights& w, const ModelConfig& cfg);
PackedModel pack_model(const QuantModel& m);
QuantModel unpack_model(const PackedModel& p);

/// Draws a random but valid tiny configuration (used by property tests).
ModelConfig random_tiny_config(std::uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoint file: named tensors, either f32 or pre-quantized groups.
// ---------------------------------------------------------------------------

using CheckpointTensor = std::variant<Eigen::MatrixXf, QuantMatrix>;

struct Checkpoint {
  std::map<std::string, CheckpointTensor> tensors;
};

inline constexpr char kCheckpointMagic[4] = {'E', 'P', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

/// Natural f32 tensors: embedding, layers.N.{wq,wk,wv,wo,w_gate,w_up,w_down,
/// attn_norm,mlp_norm}, final_norm, lm_head. Vectors are stored as (n, 1).
Checkpoint checkpoint_from_dense(const DenseWeights& w);
/// Stream tensors as quantized groups, everything else f32.
Checkpoint checkpoint_from_quant(const QuantModel& m);

/// Builds the quantized model. A stream tensor given pre-quantized under its
/// stream name (e.g. layers.0.wqkv) is used verbatim; otherwise its natural
/// f32 parts are quantized with the round-to-nearest fallback. Throws
/// ConfigError naming the tensor on a missing entry or shape mismatch.
QuantModel model_from_checkpoint(const Checkpoint& ck, const ModelConfig& cfg);

/// Packed model directory: config.json, one <stream>.epws container per
/// stream tensor and dense.epck with the FP16 embedding and norm gains.
void save_packed_model(const std::string& dir, const PackedModel& p);
PackedModel load_packed_model(const std::string& dir);

}  // namespace streamdec
