// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "streamdec/model.hpp"

#include <filesystem>
#include <set>

using namespace streamdec;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("streamdec_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string error_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("parameter counts") {
  const ModelConfig c = ModelConfig::llama2_7b();
  CHECK(c.params_non_embedding() == 6607343616ull);
  CHECK(c.params_total() == 6738415616ull);
  const ModelConfig t = ModelConfig::tiny();
  CHECK(t.params_per_layer() == 4ull * 64 * 64 + 3ull * 64 * 172 + 2 * 64);
  CHECK(t.padded_ffn() == 256);
  CHECK(t.lanes() == 16);
}

TEST_CASE("config validation") {
  ModelConfig c = ModelConfig::tiny();
  CHECK_NOTHROW(c.validate());
  c.head_dim = 15;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig::tiny();
  c.bus.ports = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig::tiny();
  c.max_context = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("config JSON round trip and errors") {
  for (const ModelConfig& c : {ModelConfig::tiny(), ModelConfig::llama2_7b()})
    CHECK(model_config_from_json(model_config_to_json(c)) == c);
  ModelConfig w = ModelConfig::tiny();
  w.rope_table = RopeTable::wide_span;
  CHECK(model_config_from_json(model_config_to_json(w)) == w);
  CHECK_THROWS_AS(model_config_from_json("{not json"), ConfigError);
  CHECK_THROWS_AS(model_config_from_json(R"({"n_layers": 2})"), ConfigError);
  CHECK_THROWS_AS(load_model_config("/nonexistent/config.json"), IoError);
}

TEST_CASE("stream tensors follow consumption order") {
  const ModelConfig c = ModelConfig::tiny();
  const auto t = stream_tensors(c);
  REQUIRE(t.size() == 9);
  CHECK(t[0].name == "layers.0.wqkv");
  CHECK(t[0].rows == 3 * 64);
  CHECK(t[2].name == "layers.0.w_gate_up");
  CHECK(t[2].rows == 2 * 172);
  CHECK(t[3].cols == 172);
  CHECK(t[8].name == "lm_head");
  CHECK(t[8].layer == -1);
}

TEST_CASE("random weights are deterministic in the seed") {
  const ModelConfig c = ModelConfig::tiny();
  const DenseWeights a = random_weights(c, 5), b = random_weights(c, 5), d = random_weights(c, 6);
  CHECK(a.layers[1].w_down == b.layers[1].w_down);
  CHECK(a.embedding != d.embedding);
  CHECK(quantize_model(a, c).layers[0].wqkv == quantize_model(b, c).layers[0].wqkv);
}

TEST_CASE("wqkv is head-major and w_gate_up interleaved") {
  const ModelConfig c = ModelConfig::tiny();
  const DenseWeights w = random_weights(c, 2);
  const QuantModel q = quantize_model(w, c);
  const BusGeometry& g = c.bus;
  const QuantMatrix k1 = quantize_matrix(w.layers[0].wk.middleRows(16, 16), c.group_size, g);
  for (int r = 0; r < 16; ++r) CHECK(q.layers[0].wqkv.group(3 * 16 + 16 + r, 0) == k1.group(r, 0));
  const QuantMatrix up = quantize_matrix(w.layers[1].w_up, c.group_size, g);
  CHECK(q.layers[1].w_gate_up.group(2 * 7 + 1, 0) == up.group(7, 0));
}

TEST_CASE("checkpoint file round trip and pre-quantized pass-through") {
  const ModelConfig c = ModelConfig::tiny();
  const fs::path dir = scratch_dir("ck");
  const QuantModel q = quantize_model(random_weights(c, 3), c);
  const Checkpoint ck = checkpoint_from_quant(q);
  save_checkpoint((dir / "q.epck").string(), ck);
  const QuantModel back = model_from_checkpoint(load_checkpoint((dir / "q.epck").string()), c);
  CHECK(back.layers[1].w_gate_up == q.layers[1].w_gate_up);
  CHECK(back.lm_head == q.lm_head);

  // Codes survive even when they differ from what re-quantization would give.
  Checkpoint edited = ck;
  std::get<QuantMatrix>(edited.tensors.at("layers.0.wo")).groups[0].codes[0] ^= 1;
  const QuantModel e = model_from_checkpoint(edited, c);
  CHECK(e.layers[0].wo.groups[0].codes[0] == (q.layers[0].wo.groups[0].codes[0] ^ 1));

  const Checkpoint dense = checkpoint_from_dense(random_weights(c, 3));
  save_checkpoint((dir / "d.epck").string(), dense);
  CHECK(model_from_checkpoint(load_checkpoint((dir / "d.epck").string()), c).layers[0].wqkv == q.layers[0].wqkv);
}

TEST_CASE("checkpoint errors name the tensor") {
  const ModelConfig c = ModelConfig::tiny();
  Checkpoint ck = checkpoint_from_dense(random_weights(c, 1));
  CHECK_THROWS_AS(model_from_checkpoint(Checkpoint{}, c), ConfigError);

  Checkpoint missing = ck;
  missing.tensors.erase("layers.1.w_up");
  CHECK(error_of([&] { model_from_checkpoint(missing, c); }).find("layers.1.w_up") != std::string::npos);

  Checkpoint wrong = ck;
  wrong.tensors["layers.0.wk"] = Eigen::MatrixXf::Zero(16, 64);
  CHECK(error_of([&] { model_from_checkpoint(wrong, c); }).find("layers.0.wk") != std::string::npos);

  ModelConfig other = c;
  other.d_ffn = 100;
  CHECK_THROWS_AS(model_from_checkpoint(ck, other), ConfigError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent.epck"), IoError);
}

TEST_CASE("packed model directory round trip") {
  const ModelConfig c = ModelConfig::tiny();
  const fs::path dir = scratch_dir("packed");
  const PackedModel p = pack_model(quantize_model(random_weights(c, 4), c));
  save_packed_model(dir.string(), p);
  CHECK(fs::exists(dir / "config.json"));
  CHECK(fs::exists(dir / "layers.1.w_gate_up.epws"));
  const PackedModel back = load_packed_model(dir.string());
  CHECK(back.cfg == c);
  CHECK(back.lm_head.payload == p.lm_head.payload);
  CHECK(back.layers[0].attn_norm == p.layers[0].attn_norm);
  CHECK(unpack_model(back).layers[1].w_down == unpack_model(p).layers[1].w_down);
}

TEST_CASE("random tiny configs are valid and varied") {
  std::set<int> beats, groups;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const ModelConfig c = random_tiny_config(s);
    REQUIRE_NOTHROW(c.validate());
    beats.insert(c.bus.beat_bits);
    groups.insert(c.group_size);
  }
  CHECK(beats.size() >= 2);
  CHECK(groups.size() >= 3);
}
