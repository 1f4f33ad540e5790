// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "streamdec/schedule.hpp"

#include <algorithm>

using namespace streamdec;

namespace {

const TraceStage* find_stage(const PipelineTrace& tr, const std::string& name, int layer, int head) {
  for (const auto& s : tr.stages)
    if (s.name == name && s.layer == layer && s.head == head) return &s;
  return nullptr;
}

std::uint64_t stage_beats(const TokenSchedule& s) {
  std::uint64_t n = 0;
  for (const auto& st : s.stages) n += st.beats;
  return n;
}

}  // namespace

TEST_CASE("tiny schedule shape") {
  const ModelConfig cfg = ModelConfig::tiny();
  const TokenSchedule s = build_token_schedule(cfg, 0);
  CHECK(s.read_beats() == 14328);
  CHECK(s.write_beats() == 32);
  REQUIRE(s.stages.size() == 53);
  CHECK(s.stages.front().role == StageRole::embed);
  CHECK(s.stages.back().role == StageRole::lm_head);
  const std::vector<StageRole> head{StageRole::q_proj, StageRole::k_proj, StageRole::hist_k, StageRole::v_proj,
                                    StageRole::weighted_sum};
  for (int h = 0; h < 4; ++h)
    for (int k = 0; k < 5; ++k) {
      const VpuStage& st = s.stages[static_cast<std::size_t>(2 + 5 * h + k)];
      REQUIRE(st.role == head[static_cast<std::size_t>(k)]);
      REQUIRE(st.head == h);
      REQUIRE(st.layer == 0);
    }
  CHECK(s.stages[22].role == StageRole::o_proj);
  CHECK(s.stages[24].role == StageRole::gate_up);
  CHECK(s.stages[25].role == StageRole::down);
  // Flushed scale-zero words, then one K vector per cached token.
  CHECK(s.stages[4].beats == 0);
  CHECK(build_token_schedule(cfg, 40).stages[4].beats == 40 / 2 + 40 * cfg.kv_beats_per_token());
  CHECK(stage_beats(s) == s.read_beats());
}

TEST_CASE("LLaMA2-7B schedule totals") {
  const ModelConfig cfg = ModelConfig::llama2_7b();
  CHECK(build_token_schedule(cfg, 0).read_beats() == 53642560ull);
  CHECK(build_token_schedule(cfg, 1023).read_beats() == 57961792ull);
  CHECK_THROWS_AS(build_token_schedule(cfg, 1024), CapacityError);
}

TEST_CASE("region offsets") {
  const ModelConfig cfg = ModelConfig::llama2_7b();
  CHECK(kv_offset(cfg, 0, 0) == 0);
  CHECK(kv_offset(cfg, 1, 3) == (1 * 1024 + 3) * 2);
  CHECK(sz_words_per_stream(cfg) == 64);
  CHECK(vector_beats(cfg, 4096) == 128);
}

TEST_CASE("tiny model is stall-free at every position") {
  const ModelConfig cfg = ModelConfig::tiny();
  for (int t = 0; t < cfg.max_context; ++t) {
    const TokenSchedule s = build_token_schedule(cfg, t);
    const PipelineTrace tr = evaluate_schedule(s, cfg);
    REQUIRE(tr.stall_cycles == 0);
    REQUIRE(tr.vpu_back_to_back());
    REQUIRE(tr.spu_contained());
    REQUIRE(tr.vpu_cycles == static_cast<std::int64_t>(s.read_beats()));
  }
}

TEST_CASE("LLaMA2-7B geometry is stall-free at sampled positions") {
  const ModelConfig cfg = ModelConfig::llama2_7b();
  for (int t : {0, 1, 15, 16, 511, 1023}) {
    const PipelineTrace tr = evaluate_schedule(build_token_schedule(cfg, t), cfg);
    REQUIRE(tr.stall_cycles == 0);
    REQUIRE(tr.spu_contained());
  }
}

TEST_CASE("attention ordering within one head") {
  const ModelConfig cfg = ModelConfig::tiny();
  const PipelineTrace tr = evaluate_schedule(build_token_schedule(cfg, 3), cfg);
  const TraceStage* v = find_stage(tr, "layers.0.v_proj.h0", 0, 0);
  const TraceStage* k = find_stage(tr, "layers.0.k_proj.h0", 0, 0);
  const TraceStage* q = find_stage(tr, "layers.0.q_proj.h0", 0, 0);
  const TraceStage* max = find_stage(tr, "softmax.max", 0, 0);
  const TraceStage* cur = find_stage(tr, "cur_logit", 0, 0);
  const TraceStage* hist = find_stage(tr, "hist_logit.scale", 0, 0);
  const TraceStage* rope = find_stage(tr, "rope_q", 0, 0);
  REQUIRE((v && k && q && max && cur && hist && rope));
  CHECK(q->end == k->start);
  CHECK(rope->start >= k->start);     // RoPE runs while K streams
  CHECK(max->start <= v->start);      // softmax pass 1 begins before V
  CHECK(cur->end <= hist->start);     // current logit strictly before the history
}

TEST_CASE("negative control: an expensive softmax unit stalls the VPU") {
  const ModelConfig cfg = ModelConfig::tiny();
  SpuCosts costs;
  costs.softmax = 40;
  const PipelineTrace tr = evaluate_schedule(build_token_schedule(cfg, 40), cfg, costs);
  CHECK(tr.stall_cycles > 0);
  CHECK_FALSE(tr.spu_contained());
  CHECK(tr.first_uncovered_spu().has_value());
  CHECK(tr.total_cycles > tr.vpu_cycles);
}

TEST_CASE("schedules are pure functions of config and position") {
  const ModelConfig cfg = ModelConfig::tiny();
  CHECK(build_token_schedule(cfg, 9, 3) == build_token_schedule(cfg, 9, 3));
  CHECK_FALSE(build_token_schedule(cfg, 9) == build_token_schedule(cfg, 10));
  const auto tx = build_token_schedule(cfg, 2).transactions();
  CHECK(std::count_if(tx.begin(), tx.end(), [](const MemTransaction& t) { return t.write; }) > 0);
}
