// SPDX-License-Identifier: Apache-2.0
#include "streamdec/schedule.hpp"

#include <algorithm>
#include <limits>

namespace streamdec {

const char* to_string(StageRole r) {
  switch (r) {
    case StageRole::embed: return "embed";
    case StageRole::norm_gain: return "norm_gain";
    case StageRole::q_proj: return "q_proj";
    case StageRole::k_proj: return "k_proj";
    case StageRole::hist_k: return "hist_k";
    case StageRole::v_proj: return "v_proj";
    case StageRole::weighted_sum: return "weighted_sum";
    case StageRole::o_proj: return "o_proj";
    case StageRole::gate_up: return "gate_up";
    case StageRole::down: return "down";
    case StageRole::lm_head: return "lm_head";
  }
  return "?";
}

const char* to_string(TraceKind k) {
  switch (k) {
    case TraceKind::vpu_dense: return "VPU";
    case TraceKind::spu_misc: return "SPU";
    case TraceKind::mem_write: return "WRITE";
  }
  return "?";
}

std::uint64_t TokenSchedule::read_beats() const {
  std::uint64_t n = 0;
  for (const auto& st : stages) n += st.beats;
  return n;
}

std::uint64_t TokenSchedule::write_beats() const {
  std::uint64_t n = 0;
  for (const auto& st : stages)
    for (const auto& t : st.traffic)
      if (t.write) n += t.beats;
  return n;
}

std::vector<MemTransaction> TokenSchedule::transactions() const {
  std::vector<MemTransaction> out;
  for (const auto& st : stages) out.insert(out.end(), st.traffic.begin(), st.traffic.end());
  return out;
}

bool PipelineTrace::vpu_back_to_back() const {
  std::int64_t prev = std::numeric_limits<std::int64_t>::min();
  for (const auto& s : stages) {
    if (s.kind != TraceKind::vpu_dense) continue;
    if (prev != std::numeric_limits<std::int64_t>::min() && s.start != prev) return false;
    prev = s.end;
  }
  return true;
}

std::optional<TraceStage> PipelineTrace::first_uncovered_spu() const {
  std::vector<std::pair<std::int64_t, std::int64_t>> dense;
  for (const auto& s : stages)
    if (s.kind == TraceKind::vpu_dense && s.end > s.start) dense.emplace_back(s.start, s.end);
  std::sort(dense.begin(), dense.end());
  std::vector<std::pair<std::int64_t, std::int64_t>> merged;
  for (const auto& iv : dense) {
    if (!merged.empty() && iv.first <= merged.back().second)
      merged.back().second = std::max(merged.back().second, iv.second);
    else
      merged.push_back(iv);
  }
  for (const auto& s : stages) {
    if (s.kind != TraceKind::spu_misc) continue;
    auto it = std::upper_bound(merged.begin(), merged.end(), std::make_pair(s.start, std::numeric_limits<std::int64_t>::max()));
    if (it == merged.begin() || std::prev(it)->second < s.end) return s;
  }
  return std::nullopt;
}

namespace {

/// In-order scalar unit.
struct Unit {
  std::int64_t free = 0;
  /// Returns (start, finish).
  std::pair<std::int64_t, std::int64_t> run(std::int64_t arrival, std::int64_t cost) {
    const std::int64_t s = std::max(free, arrival);
    free = s + cost;
    return {s, free};
  }
};

/// Collects the tasks of one operator into a single trace interval.
class Span {
 public:
  Span(std::string name, int layer, int head) : name_(std::move(name)), layer_(layer), head_(head) {}
  std::int64_t add(std::pair<std::int64_t, std::int64_t> task) {
    start_ = std::min(start_, task.first);
    end_ = std::max(end_, task.second);
    return task.second;
  }
  void emit(PipelineTrace& tr) const {
    if (start_ <= end_) tr.stages.push_back({name_, start_, end_, TraceKind::spu_misc, layer_, head_});
  }

 private:
  std::string name_;
  int layer_;
  int head_;
  std::int64_t start_ = std::numeric_limits<std::int64_t>::max();
  std::int64_t end_ = std::numeric_limits<std::int64_t>::min();
};

struct HeadState {
  std::vector<std::int64_t> q_ready;
  std::int64_t rope_q_done = 0;
  std::int64_t max_done = 0;  // softmax pass 1 over every logit so far
  std::int64_t p3_done = 0;
  std::size_t n_logits = 0;
};

}  // namespace

PipelineTrace evaluate_schedule(const TokenSchedule& s, const ModelConfig& cfg, const SpuCosts& c) {
  PipelineTrace tr;
  Unit rope, logit, quant, soft, norm, silu;
  std::int64_t prev_end = 0;
  std::int64_t inv_ready = 0;
  std::int64_t silu_done = 0;
  HeadState hs;
  const int hd = cfg.head_dim;

  auto write = [&](const VpuStage& st, std::int64_t at, bool sz) {
    for (const auto& t : st.traffic) {
      if (!t.write) continue;
      const bool is_sz = t.region.find("sz_packs") != std::string::npos;
      if (is_sz != sz) continue;
      tr.stages.push_back({t.region, at, at + static_cast<std::int64_t>(t.beats), TraceKind::mem_write, st.layer, st.head});
    }
  };

  auto residual = [&](const VpuStage& st, std::int64_t start) {
    Span res("residual", st.layer, -1);
    std::int64_t last = start;
    for (auto r : st.ready) last = res.add(norm.run(start + static_cast<std::int64_t>(r), c.rmsnorm));
    Span inv("inv_rms", st.layer, -1);
    inv_ready = inv.add(norm.run(last, c.rmsnorm));
    res.emit(tr);
    inv.emit(tr);
  };

  for (const auto& st : s.stages) {
    std::int64_t dep = std::numeric_limits<std::int64_t>::min();
    switch (st.role) {
      case StageRole::q_proj:
        if (st.head == 0) dep = inv_ready;
        break;
      case StageRole::gate_up:
      case StageRole::lm_head: dep = inv_ready; break;
      case StageRole::hist_k: dep = hs.rope_q_done; break;
      case StageRole::weighted_sum: dep = hs.p3_done; break;
      case StageRole::down: dep = silu_done; break;
      default: break;
    }
    std::int64_t start = prev_end;
    if (dep != std::numeric_limits<std::int64_t>::min()) start = std::max(start, dep - static_cast<std::int64_t>(st.lead_in));
    tr.stall_cycles += start - prev_end;
    const std::int64_t end = start + static_cast<std::int64_t>(st.beats);
    tr.vpu_cycles += static_cast<std::int64_t>(st.beats);
    tr.stages.push_back({st.name, start, end, TraceKind::vpu_dense, st.layer, st.head});
    prev_end = end;
    auto at = [&](std::size_t i) { return start + static_cast<std::int64_t>(st.ready[i]); };

    switch (st.role) {
      case StageRole::embed: {
        Span inv("inv_rms", -1, -1);
        inv_ready = inv.add(norm.run(end, c.rmsnorm));
        inv.emit(tr);
        break;
      }
      case StageRole::q_proj:
        hs = HeadState{};
        for (std::size_t i = 0; i < st.ready.size(); ++i) hs.q_ready.push_back(at(i));
        break;
      case StageRole::k_proj: {
        Span rq("rope_q", st.layer, st.head), rk("rope_k", st.layer, st.head), cl("cur_logit", st.layer, st.head),
            p1("softmax.max", st.layer, st.head), k1("quant_k.range", st.layer, st.head),
            k2("quant_k.encode", st.layer, st.head);
        std::vector<std::int64_t> q_rot(static_cast<std::size_t>(hd)), k_rot(static_cast<std::size_t>(hd));
        for (int j = 0; j < hd / 2; ++j) {
          const std::int64_t arrival = std::max(hs.q_ready[static_cast<std::size_t>(2 * j + 1)], start);
          q_rot[static_cast<std::size_t>(2 * j)] = rq.add(rope.run(arrival, c.rope));
          q_rot[static_cast<std::size_t>(2 * j + 1)] = rq.add(rope.run(arrival, c.rope));
        }
        hs.rope_q_done = q_rot.back();
        for (int j = 0; j < hd / 2; ++j) {
          const std::int64_t arrival = at(static_cast<std::size_t>(2 * j + 1));
          k_rot[static_cast<std::size_t>(2 * j)] = rk.add(rope.run(arrival, c.rope));
          k_rot[static_cast<std::size_t>(2 * j + 1)] = rk.add(rope.run(arrival, c.rope));
        }
        std::int64_t mac = 0;
        std::int64_t range = 0;
        for (int i = 0; i < hd; ++i) {
          const auto ui = static_cast<std::size_t>(i);
          mac = cl.add(logit.run(std::max(q_rot[ui], k_rot[ui]), c.logit));
          range = k1.add(quant.run(k_rot[ui], c.quant));
        }
        const std::int64_t scaled = cl.add(logit.run(mac, c.logit));
        hs.max_done = p1.add(soft.run(scaled, c.softmax));
        hs.n_logits = 1;
        std::int64_t enc = range;
        for (int i = 0; i < hd; ++i) enc = k2.add(quant.run(range, c.quant));
        for (const Span* sp : {&rq, &rk, &cl, &p1, &k1, &k2}) sp->emit(tr);
        write(st, enc, false);
        write(st, enc, true);
        break;
      }
      case StageRole::hist_k: {
        Span ls("hist_logit.scale", st.layer, st.head), p1("softmax.max", st.layer, st.head);
        for (std::size_t j = 0; j < st.ready.size(); ++j) {
          const std::int64_t scaled = ls.add(logit.run(at(j), c.logit));
          hs.max_done = p1.add(soft.run(scaled, c.softmax));
        }
        hs.n_logits += st.ready.size();
        ls.emit(tr);
        p1.emit(tr);
        break;
      }
      case StageRole::v_proj: {
        Span v1("quant_v.range", st.layer, st.head), v2("quant_v.encode", st.layer, st.head),
            p2("softmax.sum", st.layer, st.head), p3("softmax.normalize", st.layer, st.head);
        std::int64_t range = start;
        for (std::size_t i = 0; i < st.ready.size(); ++i) range = v1.add(quant.run(at(i), c.quant));
        std::int64_t sum = hs.max_done;
        for (std::size_t j = 0; j < hs.n_logits; ++j) sum = p2.add(soft.run(hs.max_done, c.softmax));
        std::int64_t nrm = sum;
        for (std::size_t j = 0; j < hs.n_logits; ++j) nrm = p3.add(soft.run(sum, c.softmax));
        hs.p3_done = nrm;
        std::int64_t enc = range;
        for (int i = 0; i < hd; ++i) enc = v2.add(quant.run(range, c.quant));
        for (const Span* sp : {&v1, &p2, &p3, &v2}) sp->emit(tr);
        write(st, enc, false);
        write(st, enc, true);
        break;
      }
      case StageRole::o_proj:
      case StageRole::down: residual(st, start); break;
      case StageRole::gate_up: {
        Span sg("silu", st.layer, -1);
        for (std::size_t r = 1; r < st.ready.size(); r += 2) silu_done = sg.add(silu.run(at(r), c.silu));
        sg.emit(tr);
        break;
      }
      default: break;
    }
  }
  tr.total_cycles = prev_end;
  return tr;
}

// ---------------------------------------------------------------------------
// Analytic schedule
// ---------------------------------------------------------------------------

std::uint64_t kv_offset(const ModelConfig& cfg, int head, int token) {
  return (static_cast<std::uint64_t>(head) * static_cast<std::uint64_t>(cfg.max_context) +
          static_cast<std::uint64_t>(token)) *
         static_cast<std::uint64_t>(cfg.kv_beats_per_token());
}

std::uint64_t sz_words_per_stream(const ModelConfig& cfg) {
  const auto ppe = static_cast<std::uint64_t>(cfg.bus.sz_packs_per_beat());
  return (static_cast<std::uint64_t>(cfg.max_context) + ppe - 1) / ppe;
}

std::uint64_t sz_offset(const ModelConfig& cfg, int head, int kv, std::uint64_t word) {
  return (static_cast<std::uint64_t>(head) * 2 + static_cast<std::uint64_t>(kv)) * sz_words_per_stream(cfg) + word;
}

std::uint64_t vector_beats(const ModelConfig& cfg, int n_halves) {
  const auto bb = static_cast<std::uint64_t>(cfg.bus.beat_bytes());
  return (2 * static_cast<std::uint64_t>(n_halves) + bb - 1) / bb;
}

namespace {

std::string lname(int l, const char* what) { return "layers." + std::to_string(l) + "." + what; }

VpuStage projection(const std::string& name, StageRole role, int layer, int head, const std::string& region,
                    const StreamLayout& layout, int r0, int r1, int padded_cols, std::uint64_t& cursor) {
  const auto pc = static_cast<std::uint64_t>(padded_cols);
  VpuStage st;
  st.name = name;
  st.role = role;
  st.layer = layer;
  st.head = head;
  const std::uint64_t first = cursor;
  const std::uint64_t last = layout.beat_of_code(static_cast<std::uint64_t>(r1) * pc - 1);
  st.beats = last + 1 - first;
  st.lead_in = layout.beat_of_code(static_cast<std::uint64_t>(r0) * pc) - first;
  for (int r = r0; r < r1; ++r) st.ready.push_back(layout.beat_of_code(static_cast<std::uint64_t>(r + 1) * pc - 1) + 1 - first);
  st.traffic.push_back({region, first, st.beats, false});
  cursor = last + 1;
  return st;
}

StreamLayout layout_of(const StreamTensor& t, const ModelConfig& cfg) {
  const int gpr = padded_row_length(t.cols, cfg.group_size, cfg.bus) / cfg.group_size;
  return {static_cast<std::uint64_t>(t.rows) * static_cast<std::uint64_t>(gpr), cfg.group_size, cfg.bus};
}

VpuStage history(const ModelConfig& cfg, int layer, int head, int kv, int t) {
  const auto ppe = static_cast<std::uint64_t>(cfg.bus.sz_packs_per_beat());
  const auto kvb = static_cast<std::uint64_t>(cfg.kv_beats_per_token());
  const std::uint64_t nsz = static_cast<std::uint64_t>(t) / ppe;
  VpuStage st;
  st.name = lname(layer, kv == 0 ? "hist_k" : "weighted_sum") + ".h" + std::to_string(head);
  st.role = kv == 0 ? StageRole::hist_k : StageRole::weighted_sum;
  st.layer = layer;
  st.head = head;
  st.beats = nsz + static_cast<std::uint64_t>(t) * kvb;
  st.lead_in = nsz;
  for (int j = 0; j < t; ++j) st.ready.push_back(nsz + static_cast<std::uint64_t>(j + 1) * kvb);
  if (nsz) st.traffic.push_back({lname(layer, "sz_packs"), sz_offset(cfg, head, kv, 0), nsz, false});
  if (t) st.traffic.push_back({lname(layer, kv == 0 ? "k_cache" : "v_cache"), kv_offset(cfg, head, 0), static_cast<std::uint64_t>(t) * kvb, false});
  return st;
}

void add_kv_writes(VpuStage& st, const ModelConfig& cfg, int layer, int head, int kv, int t) {
  const auto ppe = cfg.bus.sz_packs_per_beat();
  st.traffic.push_back({lname(layer, kv == 0 ? "k_cache" : "v_cache"), kv_offset(cfg, head, t),
                        static_cast<std::uint64_t>(cfg.kv_beats_per_token()), true});
  if ((t + 1) % ppe == 0)
    st.traffic.push_back({lname(layer, "sz_packs"), sz_offset(cfg, head, kv, static_cast<std::uint64_t>(t / ppe)), 1, true});
}

VpuStage gain_stage(const ModelConfig& cfg, const std::string& name, int layer, const std::string& region, std::uint64_t offset) {
  VpuStage st;
  st.name = name;
  st.role = StageRole::norm_gain;
  st.layer = layer;
  st.beats = vector_beats(cfg, cfg.d_model);
  st.traffic.push_back({region, offset, st.beats, false});
  return st;
}

}  // namespace

TokenSchedule build_token_schedule(const ModelConfig& cfg, int position, int token) {
  cfg.validate();
  if (position < 0 || position >= cfg.max_context) throw CapacityError("position exceeds max_context", "kv_cache");
  const int d = cfg.d_model;
  const int hd = cfg.head_dim;
  const int t = position;
  const std::uint64_t vb = vector_beats(cfg, d);
  const auto tensors = stream_tensors(cfg);

  TokenSchedule s;
  s.position = position;
  s.token = token;
  {
    VpuStage e;
    e.name = "embed";
    e.role = StageRole::embed;
    e.beats = vb;
    e.traffic.push_back({"embedding", static_cast<std::uint64_t>(token) * vb, vb, false});
    s.stages.push_back(std::move(e));
  }
  for (int l = 0; l < cfg.n_layers; ++l) {
    const StreamTensor* ts = &tensors[static_cast<std::size_t>(4 * l)];
    s.stages.push_back(gain_stage(cfg, lname(l, "attn_norm"), l, lname(l, "norms"), 0));
    const StreamLayout qkv = layout_of(ts[0], cfg);
    std::uint64_t cursor = 0;
    for (int h = 0; h < cfg.n_heads; ++h) {
      const int base = 3 * h * hd;
      const std::string hs = ".h" + std::to_string(h);
      s.stages.push_back(projection(lname(l, "q_proj") + hs, StageRole::q_proj, l, h, ts[0].name, qkv, base, base + hd,
                                    cfg.padded_model(), cursor));
      VpuStage k = projection(lname(l, "k_proj") + hs, StageRole::k_proj, l, h, ts[0].name, qkv, base + hd,
                              base + 2 * hd, cfg.padded_model(), cursor);
      add_kv_writes(k, cfg, l, h, 0, t);
      s.stages.push_back(std::move(k));
      s.stages.push_back(history(cfg, l, h, 0, t));
      VpuStage v = projection(lname(l, "v_proj") + hs, StageRole::v_proj, l, h, ts[0].name, qkv, base + 2 * hd,
                              base + 3 * hd, cfg.padded_model(), cursor);
      add_kv_writes(v, cfg, l, h, 1, t);
      s.stages.push_back(std::move(v));
      s.stages.push_back(history(cfg, l, h, 1, t));
    }
    std::uint64_t c1 = 0;
    s.stages.push_back(projection(lname(l, "o_proj"), StageRole::o_proj, l, -1, ts[1].name, layout_of(ts[1], cfg), 0, d,
                                  cfg.padded_model(), c1));
    s.stages.push_back(gain_stage(cfg, lname(l, "mlp_norm"), l, lname(l, "norms"), vb));
    std::uint64_t c2 = 0;
    s.stages.push_back(projection(lname(l, "gate_up"), StageRole::gate_up, l, -1, ts[2].name, layout_of(ts[2], cfg), 0,
                                  2 * cfg.d_ffn, cfg.padded_model(), c2));
    std::uint64_t c3 = 0;
    s.stages.push_back(projection(lname(l, "down"), StageRole::down, l, -1, ts[3].name, layout_of(ts[3], cfg), 0, d,
                                  cfg.padded_ffn(), c3));
  }
  s.stages.push_back(gain_stage(cfg, "final_norm", -1, "final_norm", 0));
  std::uint64_t c4 = 0;
  s.stages.push_back(projection("lm_head", StageRole::lm_head, -1, -1, "lm_head", layout_of(tensors.back(), cfg), 0,
                                cfg.vocab_size, cfg.padded_model(), c4));
  return s;
}

}  // namespace streamdec
