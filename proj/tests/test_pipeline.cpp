// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "streamdec/pipeline.hpp"

#include <filesystem>

using namespace streamdec;

namespace {

constexpr std::uint64_t kTinySeed = 1;

bool bitwise_equal(const HalfVector& a, const HalfVector& b) {
  if (a.size() != b.size()) return false;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    if (half_bits(a(i)) != half_bits(b(i))) return false;
  return true;
}

struct TinyModels {
  ModelConfig cfg = ModelConfig::tiny();
  QuantModel quant = quantize_model(random_weights(cfg, kTinySeed), cfg);
  PackedModel packed = pack_model(quant);
};

}  // namespace

TEST_CASE("tiny model: 32 greedy tokens, fused equals reference") {
  const TinyModels m;
  FusedDecoder fused(m.packed);
  ReferenceDecoder ref(m.quant);
  const std::vector<int> expected{187, 127, 59,  108, 182, 42,  99,  14,  16,  95,  76,  88,  143, 116, 129, 222,
                                  88,  179, 149, 242, 216, 167, 112, 130, 219, 61,  124, 221, 95,  206, 219, 216};
  int tok = 1;
  for (int i = 0; i < 32; ++i) {
    const DecodeResult r = decode_token(tok, fused);
    const HalfVector rl = reference_decode(tok, ref);
    REQUIRE(bitwise_equal(r.logits, rl));
    REQUIRE(r.token == greedy_argmax(rl));
    REQUIRE(r.token == expected[static_cast<std::size_t>(i)]);
    REQUIRE(r.schedule == build_token_schedule(m.cfg, i, tok));
    REQUIRE(r.trace.stall_cycles == 0);
    REQUIRE(r.trace.vpu_cycles == static_cast<std::int64_t>(r.schedule.read_beats()));
    tok = r.token;
  }
  CHECK(fused.position() == 32);
  CHECK(fused.cache() == ref.cache());
}

TEST_CASE("first step: logits frozen and VPU cycles equal weight beats") {
  const TinyModels m;
  FusedDecoder fused(m.packed);
  const DecodeResult r = fused.step(1);
  CHECK(half_bits(r.logits(0)) == 0xbaad);
  CHECK(half_bits(r.logits(1)) == 0xb490);
  CHECK(r.trace.total_cycles == 14328);
}

TEST_CASE("single-token attention returns the current value vector") {
  const TinyModels m;
  FusedDecoder fused(m.packed);
  const HalfVector x = m.quant.embedding.row(3).transpose();
  const LayerResult a = fused.attention_layer(x, square_sum(as_span(x)), 0);
  REQUIRE(a.heads.size() == 4);
  for (const HeadProbe& h : a.heads) {
    CHECK(h.logits.size() == 1);
    CHECK(static_cast<float>(h.probs(0)) == 1.0f);
    CHECK(bitwise_equal(h.out, h.v));
  }
  CHECK(a.sq == square_sum(as_span(a.out)));
}

TEST_CASE("sub-layers agree with the reference, heads included") {
  const TinyModels m;
  FusedDecoder fused(m.packed);
  ReferenceDecoder ref(m.quant);
  for (int t = 0; t < 3; ++t) {
    fused.step(t + 5);
    ref.step(t + 5);
  }
  const HalfVector x = m.quant.embedding.row(9).transpose();
  const float sq = square_sum(as_span(x));
  const LayerResult fa = fused.attention_layer(x, sq, 0), ra = ref.attention_layer(x, sq, 0);
  CHECK(bitwise_equal(fa.out, ra.out));
  CHECK(fa.sq == ra.sq);
  for (int h = 0; h < 4; ++h) {
    const auto& a = fa.heads[static_cast<std::size_t>(h)];
    const auto& b = ra.heads[static_cast<std::size_t>(h)];
    CHECK(bitwise_equal(a.q_rot, b.q_rot));
    CHECK(a.logits.size() == 4);
    CHECK(bitwise_equal(a.probs, b.probs));
  }
  const LayerResult fm = fused.mlp_layer(fa.out, fa.sq, 1), rm = ref.mlp_layer(ra.out, ra.sq, 1);
  CHECK(bitwise_equal(fm.out, rm.out));
  CHECK(fm.sq == square_sum(as_span(fm.out)));
}

TEST_CASE("zero gate weights leave the residual unchanged") {
  const ModelConfig cfg = ModelConfig::tiny();
  DenseWeights w = random_weights(cfg, 2);
  w.layers[0].w_gate.setZero();
  const QuantModel q = quantize_model(w, cfg);
  const PackedModel p = pack_model(q);
  FusedDecoder fused(p);
  ReferenceDecoder ref(q);
  const HalfVector x = q.embedding.row(1).transpose();
  CHECK(bitwise_equal(fused.mlp_layer(x, square_sum(as_span(x)), 0).out, x));
  CHECK(bitwise_equal(ref.mlp_layer(x, square_sum(as_span(x)), 0).out, x));
}

TEST_CASE("random configurations are bitwise equivalent") {
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    const ModelConfig cfg = random_tiny_config(seed);
    const QuantModel q = quantize_model(random_weights(cfg, seed), cfg);
    const PackedModel p = pack_model(q);
    FusedDecoder fused(p);
    ReferenceDecoder ref(q);
    int tok = static_cast<int>(seed) % cfg.vocab_size;
    for (int i = 0; i < 8; ++i) {
      const DecodeResult r = fused.step(tok);
      REQUIRE(bitwise_equal(r.logits, ref.step(tok)));
      REQUIRE(r.schedule == build_token_schedule(cfg, i, tok));
      tok = r.token;
    }
  }
}

TEST_CASE("KV cache and scale-zero device stay consistent") {
  const TinyModels m;
  FusedDecoder fused(m.packed);
  int tok = 4;
  const int T = 13;
  for (int i = 0; i < T; ++i) tok = fused.step(tok).token;
  const KVCacheStore& c = fused.cache();
  for (int l = 0; l < m.cfg.n_layers; ++l) {
    REQUIRE(c.length(l) == T);
    for (int h = 0; h < m.cfg.n_heads; ++h)
      for (KvKind kind : {KvKind::key, KvKind::value}) {
        REQUIRE(fused.sz().flushed_words(l, h, kind) == static_cast<std::uint64_t>(T / 2));
        for (int j = 0; j < T; ++j) {
          REQUIRE(c.params(l, h, kind, j) == fused.sz().lookup(l, h, kind, j));
          REQUIRE(bitwise_equal(c.dequant(l, h, kind, j), kv_dequantize(c.codes(l, h, kind, j), c.params(l, h, kind, j))));
        }
      }
  }
  CHECK_THROWS_AS(c.codes(0, 0, KvKind::key, T), IndexError);
  CHECK(fused.sz().pushed() == static_cast<std::uint64_t>(T * m.cfg.n_layers * m.cfg.n_heads * 2));
}

TEST_CASE("later tokens never change earlier logits") {
  const TinyModels m;
  FusedDecoder a(m.packed), b(m.packed);
  const std::vector<int> toks{3, 200, 17, 42, 9};
  std::vector<HalfVector> la;
  for (int t : toks) la.push_back(a.step(t).logits);
  for (std::size_t i = 0; i < 3; ++i) CHECK(bitwise_equal(b.step(toks[i]).logits, la[i]));
}

TEST_CASE("decode errors") {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.max_context = 3;
  const QuantModel q = quantize_model(random_weights(cfg, 1), cfg);
  const PackedModel p = pack_model(q);
  FusedDecoder fused(p);
  ReferenceDecoder ref(q);
  CHECK_THROWS_AS(fused.step(256), IndexError);
  CHECK_THROWS_AS(ref.step(-1), IndexError);
  for (int i = 0; i < 3; ++i) {
    fused.step(1);
    ref.step(1);
  }
  try {
    fused.step(1);
    FAIL("expected CapacityError");
  } catch (const CapacityError& e) {
    CHECK(e.region() == "kv_cache");
  }
  CHECK_THROWS_AS(ref.step(1), CapacityError);
}

TEST_CASE("KV cache store commit rules") {
  KVCacheStore c(1, 2, 4, 2);
  const KvQuantized v = kv_quantize(HalfVector::Constant(4, Half(1.0f)));
  c.stage(0, 0, KvKind::key, v);
  c.stage(0, 0, KvKind::value, v);
  CHECK_THROWS_AS(c.commit(0), Error);  // head 1 not staged
  c.stage(0, 1, KvKind::key, v);
  c.stage(0, 1, KvKind::value, v);
  c.commit(0);
  CHECK(c.length(0) == 1);
  for (int h = 0; h < 2; ++h) {
    c.stage(0, h, KvKind::key, v);
    c.stage(0, h, KvKind::value, v);
  }
  c.commit(0);
  for (int h = 0; h < 2; ++h) CHECK_THROWS_AS(c.stage(0, h, KvKind::key, v), CapacityError);
}

TEST_CASE("KV snapshot round trip") {
  const TinyModels m;
  FusedDecoder fused(m.packed);
  for (int i = 0; i < 5; ++i) fused.step(i + 1);
  const auto path = (std::filesystem::temp_directory_path() / "streamdec_kv.epkv").string();
  save_kv_snapshot(path, fused.cache());
  CHECK(load_kv_snapshot(path) == fused.cache());
  {
    std::FILE* f = std::fopen(path.c_str(), "r+b");
    std::fputc('X', f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(load_kv_snapshot(path), FormatError);
}

TEST_CASE("greedy argmax takes the first maximum") {
  HalfVector v(5);
  v << Half(1.0f), Half(3.0f), Half(-2.0f), Half(3.0f), Half(0.0f);
  CHECK(greedy_argmax(v) == 1);
}
