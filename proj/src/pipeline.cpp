// SPDX-License-Identifier: Apache-2.0
#include "streamdec/pipeline.hpp"

#include "decode_common.hpp"

#include <array>
#include <fstream>

namespace streamdec {

// ---------------------------------------------------------------------------
// KV cache
// ---------------------------------------------------------------------------

KVCacheStore::KVCacheStore(int n_layers, int n_heads, int head_dim, int max_context)
    : n_layers_(n_layers), n_heads_(n_heads), head_dim_(head_dim), max_context_(max_context) {
  if (n_layers <= 0 || n_heads <= 0 || head_dim <= 0 || max_context <= 0)
    throw ConfigError("kv cache dimensions must be positive");
  const std::size_t slots = static_cast<std::size_t>(n_layers) * static_cast<std::size_t>(n_heads) * 2;
  length_.assign(static_cast<std::size_t>(n_layers), 0);
  codes_.assign(slots, std::vector<std::uint8_t>(static_cast<std::size_t>(max_context) * static_cast<std::size_t>(head_dim), 0));
  params_.assign(slots, std::vector<KvQuantParams>(static_cast<std::size_t>(max_context)));
  staged_.assign(slots, 0);
}

int KVCacheStore::length(int layer) const {
  if (layer < 0 || layer >= n_layers_) throw IndexError("kv cache layer out of range");
  return length_[static_cast<std::size_t>(layer)];
}

std::size_t KVCacheStore::slot(int layer, int head, KvKind kind) const {
  if (layer < 0 || layer >= n_layers_ || head < 0 || head >= n_heads_) throw IndexError("kv cache head out of range");
  return (static_cast<std::size_t>(layer) * static_cast<std::size_t>(n_heads_) + static_cast<std::size_t>(head)) * 2 +
         static_cast<std::size_t>(kind);
}

void KVCacheStore::check(int layer, int head, int token) const {
  (void)slot(layer, head, KvKind::key);
  if (token < 0 || token >= length_[static_cast<std::size_t>(layer)])
    throw IndexError("kv cache token " + std::to_string(token) + " not committed");
}

void KVCacheStore::stage(int layer, int head, KvKind kind, const KvQuantized& q) {
  const std::size_t s = slot(layer, head, kind);
  const int t = length_[static_cast<std::size_t>(layer)];
  if (t >= max_context_) throw CapacityError("kv cache is full", "kv_cache");
  if (q.codes.size() != static_cast<std::size_t>(head_dim_)) throw ShapeError("kv vector length must equal head_dim");
  std::copy(q.codes.begin(), q.codes.end(), codes_[s].begin() + static_cast<std::ptrdiff_t>(t) * head_dim_);
  params_[s][static_cast<std::size_t>(t)] = q.params;
  staged_[s] = 1;
}

void KVCacheStore::commit(int layer) {
  if (length(layer) >= max_context_) throw CapacityError("kv cache is full", "kv_cache");
  for (int h = 0; h < n_heads_; ++h)
    for (KvKind k : {KvKind::key, KvKind::value})
      if (!staged_[slot(layer, h, k)]) throw Error("kv cache commit with an unstaged head");
  for (int h = 0; h < n_heads_; ++h)
    for (KvKind k : {KvKind::key, KvKind::value}) staged_[slot(layer, h, k)] = 0;
  ++length_[static_cast<std::size_t>(layer)];
}

std::span<const std::uint8_t> KVCacheStore::codes(int layer, int head, KvKind kind, int token) const {
  check(layer, head, token);
  const auto& c = codes_[slot(layer, head, kind)];
  return {c.data() + static_cast<std::size_t>(token) * static_cast<std::size_t>(head_dim_), static_cast<std::size_t>(head_dim_)};
}

KvQuantParams KVCacheStore::params(int layer, int head, KvKind kind, int token) const {
  check(layer, head, token);
  return params_[slot(layer, head, kind)][static_cast<std::size_t>(token)];
}

HalfVector KVCacheStore::dequant(int layer, int head, KvKind kind, int token) const {
  return kv_dequantize(codes(layer, head, kind, token), params(layer, head, kind, token));
}

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  std::array<char, sizeof(T)> b{};
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  os.write(b.data(), b.size());
}

template <typename T>
T get(std::istream& is) {
  std::array<unsigned char, sizeof(T)> b{};
  is.read(reinterpret_cast<char*>(b.data()), b.size());
  if (!is) throw FormatError("kv snapshot truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace

void save_kv_snapshot(const std::string& path, const KVCacheStore& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(kSnapshotMagic, 4);
  put<std::uint16_t>(os, kSnapshotVersion);
  for (int v : {c.n_layers(), c.n_heads(), c.head_dim(), c.max_context()}) put<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  for (int l = 0; l < c.n_layers(); ++l) put<std::uint32_t>(os, static_cast<std::uint32_t>(c.length(l)));
  for (int l = 0; l < c.n_layers(); ++l)
    for (int h = 0; h < c.n_heads(); ++h)
      for (KvKind k : {KvKind::key, KvKind::value})
        for (int t = 0; t < c.length(l); ++t) {
          const KvQuantParams p = c.params(l, h, k, t);
          put<std::uint16_t>(os, half_bits(p.scale));
          put<std::uint8_t>(os, p.zero);
          const auto codes = c.codes(l, h, k, t);
          os.write(reinterpret_cast<const char*>(codes.data()), static_cast<std::streamsize>(codes.size()));
        }
  if (!os) throw IoError("failed writing " + path);
}

KVCacheStore load_kv_snapshot(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || !std::equal(magic.begin(), magic.end(), kSnapshotMagic)) throw FormatError("bad kv snapshot magic");
  if (get<std::uint16_t>(is) != kSnapshotVersion) throw FormatError("unsupported kv snapshot version");
  std::array<int, 4> dims{};
  for (int& d : dims) d = static_cast<int>(get<std::uint32_t>(is));
  KVCacheStore c(dims[0], dims[1], dims[2], dims[3]);
  std::vector<int> lengths(static_cast<std::size_t>(dims[0]));
  for (int& n : lengths) {
    n = static_cast<int>(get<std::uint32_t>(is));
    if (n > dims[3]) throw FormatError("kv snapshot length exceeds max_context");
  }
  // Entries are stored per (layer, head, kind) stream; replay them token by
  // token so every commit sees a complete layer.
  std::vector<std::vector<KvQuantized>> entries(static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) * 2);
  for (int l = 0; l < dims[0]; ++l)
    for (int h = 0; h < dims[1]; ++h)
      for (int k = 0; k < 2; ++k) {
        auto& e = entries[(static_cast<std::size_t>(l) * static_cast<std::size_t>(dims[1]) + static_cast<std::size_t>(h)) * 2 +
                          static_cast<std::size_t>(k)];
        for (int t = 0; t < lengths[static_cast<std::size_t>(l)]; ++t) {
          KvQuantized q;
          q.params.scale = half_from_bits(get<std::uint16_t>(is));
          q.params.zero = get<std::uint8_t>(is);
          q.codes.resize(static_cast<std::size_t>(dims[2]));
          is.read(reinterpret_cast<char*>(q.codes.data()), static_cast<std::streamsize>(q.codes.size()));
          if (!is) throw FormatError("kv snapshot truncated");
          e.push_back(std::move(q));
        }
      }
  for (int l = 0; l < dims[0]; ++l)
    for (int t = 0; t < lengths[static_cast<std::size_t>(l)]; ++t) {
      for (int h = 0; h < dims[1]; ++h)
        for (int k = 0; k < 2; ++k)
          c.stage(l, h, static_cast<KvKind>(k),
                  entries[(static_cast<std::size_t>(l) * static_cast<std::size_t>(dims[1]) + static_cast<std::size_t>(h)) * 2 +
                          static_cast<std::size_t>(k)][static_cast<std::size_t>(t)]);
      c.commit(l);
    }
  return c;
}

// ---------------------------------------------------------------------------
// Scale-zero device path
// ---------------------------------------------------------------------------

SzDevice::SzDevice(const ModelConfig& cfg)
    : n_heads_(cfg.n_heads),
      ppe_(cfg.bus.sz_packs_per_beat()),
      fifo_(static_cast<std::size_t>(cfg.n_layers) * static_cast<std::size_t>(cfg.n_heads) * 2, cfg.bus.sz_packs_per_beat()),
      backing_(fifo_.n_streams()) {}

std::size_t SzDevice::stream_id(int layer, int head, KvKind kind) const {
  return (static_cast<std::size_t>(layer) * static_cast<std::size_t>(n_heads_) + static_cast<std::size_t>(head)) * 2 +
         static_cast<std::size_t>(kind);
}

bool SzDevice::push(int layer, int head, KvKind kind, const KvQuantParams& p) {
  const std::size_t id = stream_id(layer, head, kind);
  auto word = fifo_.push(id, ScaleZeroPack::from(p));
  ++pushed_;
  if (!word) return false;
  backing_[id].push_back(std::move(*word));
  return true;
}

KvQuantParams SzDevice::lookup(int layer, int head, KvKind kind, int token) const {
  const std::size_t id = stream_id(layer, head, kind);
  if (id >= backing_.size() || token < 0) throw IndexError("scale-zero lookup out of range");
  const auto& words = backing_[id];
  const auto t = static_cast<std::size_t>(token);
  const auto ppe = static_cast<std::size_t>(ppe_);
  if (t < words.size() * ppe) return pack_at(words[t / ppe], static_cast<int>(t % ppe)).params();
  return fifo_.resident(id, static_cast<int>(t - words.size() * ppe)).params();
}

std::uint64_t SzDevice::flushed_words(int layer, int head, KvKind kind) const {
  return backing_[stream_id(layer, head, kind)].size();
}

int greedy_argmax(const HalfVector& logits) {
  if (logits.size() == 0) throw ShapeError("argmax of an empty vector");
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < logits.size(); ++i)
    if (static_cast<float>(logits(i)) > static_cast<float>(logits(best))) best = i;
  return static_cast<int>(best);
}

// ---------------------------------------------------------------------------
// Fused decoder
// ---------------------------------------------------------------------------

namespace {

std::string lname(int l, const char* what) { return "layers." + std::to_string(l) + "." + what; }

/// Streams rows of a packed tensor through the dot engine, recording the
/// beats it consumes as one dense stage.
class RowStreamer {
 public:
  RowStreamer(const PackedWeightStream& s, std::string region, const ModelConfig& cfg)
      : reader_(s), region_(std::move(region)), dot_(cfg.bus.dot_config()) {}

  HalfVector rows(const HalfVector& x_padded, int n_rows, VpuStage* stage) {
    const auto lanes = static_cast<std::size_t>(dot_.lanes);
    const std::size_t blocks = static_cast<std::size_t>(x_padded.size()) / lanes;
    const std::uint64_t first = reader_.position();
    HalfVector out(n_rows);
    DotAccumulator acc(dot_);
    for (int r = 0; r < n_rows; ++r) {
      acc.reset();
      for (std::size_t b = 0; b < blocks; ++b) {
        const auto w = reader_.next_weight_beat();
        if (stage && r == 0 && b == 0) stage->lead_in = reader_.position() - 1 - first;
        acc.add_block(std::span<const Half>(x_padded.data() + b * lanes, lanes), w);
      }
      out(r) = acc.result();
      if (stage) stage->ready.push_back(reader_.position() - first);
    }
    if (stage) {
      stage->beats = reader_.position() - first;
      stage->traffic.push_back({region_, first, stage->beats, false});
    }
    return out;
  }

 private:
  StreamReader reader_;
  std::string region_;
  DotEngineConfig dot_;
};

VpuStage make_stage(std::string name, StageRole role, int layer, int head) {
  VpuStage st;
  st.name = std::move(name);
  st.role = role;
  st.layer = layer;
  st.head = head;
  return st;
}

VpuStage gain_stage(const ModelConfig& cfg, std::string name, int layer, std::string region, std::uint64_t offset) {
  VpuStage st = make_stage(std::move(name), StageRole::norm_gain, layer, -1);
  st.beats = vector_beats(cfg, cfg.d_model);
  st.traffic.push_back({std::move(region), offset, st.beats, false});
  return st;
}

}  // namespace

FusedDecoder::FusedDecoder(const PackedModel& model, const SpuCosts& costs)
    : model_(&model), costs_(costs), trig_(model.cfg.trig_table()), cache_(model.cfg), sz_(model.cfg) {
  model.cfg.validate();
}

LayerResult FusedDecoder::attention_layer(const HalfVector& x, float sq, int layer, TokenSchedule* sched) {
  const ModelConfig& cfg = model_->cfg;
  const PackedLayer& L = model_->layers.at(static_cast<std::size_t>(layer));
  const int hd = cfg.head_dim;
  const int t = cache_.length(layer);
  if (t >= cfg.max_context) throw CapacityError("kv cache is full", "kv_cache");
  const auto ppe = static_cast<std::uint64_t>(cfg.bus.sz_packs_per_beat());
  const auto kvb = static_cast<std::uint64_t>(cfg.kv_beats_per_token());
  const RotationContext ctx{t, hd, &trig_};

  if (sched) sched->stages.push_back(gain_stage(cfg, lname(layer, "attn_norm"), layer, lname(layer, "norms"), 0));
  const HalfVector xn = detail::padded(rmsnorm(x, L.attn_norm, cfg.rms_eps, sq), cfg.padded_model());

  RowStreamer qkv(L.wqkv, lname(layer, "wqkv"), cfg);
  LayerResult res;
  HalfVector concat(cfg.d_model);
  for (int h = 0; h < cfg.n_heads; ++h) {
    const std::string hs = ".h" + std::to_string(h);
    HeadProbe p;
    VpuStage s_q = make_stage(lname(layer, "q_proj") + hs, StageRole::q_proj, layer, h);
    VpuStage s_k = make_stage(lname(layer, "k_proj") + hs, StageRole::k_proj, layer, h);
    VpuStage s_hk = make_stage(lname(layer, "hist_k") + hs, StageRole::hist_k, layer, h);
    VpuStage s_v = make_stage(lname(layer, "v_proj") + hs, StageRole::v_proj, layer, h);
    VpuStage s_ws = make_stage(lname(layer, "weighted_sum") + hs, StageRole::weighted_sum, layer, h);

    p.q = qkv.rows(xn, hd, sched ? &s_q : nullptr);
    p.k = qkv.rows(xn, hd, sched ? &s_k : nullptr);
    p.q_rot = rope_rotate(p.q, ctx);
    p.k_rot = rope_rotate(p.k, ctx);
    const Half cur = detail::head_logit(p.q_rot, p.k_rot, cfg);
    const KvQuantized kq = kv_quantize(p.k_rot);

    // Historical keys: flushed scale-zero words, then the cached codes.
    const std::uint64_t nsz_k = sz_.flushed_words(layer, h, KvKind::key);
    for (int j = 0; j < t; ++j) {
      const HalfVector kj = kv_dequantize(cache_.codes(layer, h, KvKind::key, j), sz_.lookup(layer, h, KvKind::key, j));
      p.logits.push_back(detail::head_logit(p.q_rot, kj, cfg));
      s_hk.ready.push_back(nsz_k + static_cast<std::uint64_t>(j + 1) * kvb);
    }
    p.logits.push_back(cur);
    s_hk.beats = nsz_k + static_cast<std::uint64_t>(t) * kvb;
    s_hk.lead_in = nsz_k;
    if (nsz_k) s_hk.traffic.push_back({lname(layer, "sz_packs"), sz_offset(cfg, h, 0, 0), nsz_k, false});
    if (t) s_hk.traffic.push_back({lname(layer, "k_cache"), kv_offset(cfg, h, 0), static_cast<std::uint64_t>(t) * kvb, false});

    cache_.stage(layer, h, KvKind::key, kq);
    s_k.traffic.push_back({lname(layer, "k_cache"), kv_offset(cfg, h, t), kvb, true});
    if (sz_.push(layer, h, KvKind::key, kq.params))
      s_k.traffic.push_back({lname(layer, "sz_packs"), sz_offset(cfg, h, 0, static_cast<std::uint64_t>(t) / ppe), 1, true});

    p.v = qkv.rows(xn, hd, sched ? &s_v : nullptr);
    p.probs = softmax(std::span<const Half>(p.logits));

    const std::uint64_t nsz_v = sz_.flushed_words(layer, h, KvKind::value);
    detail::WeightedSum ws(hd);
    for (int j = 0; j < t; ++j) {
      const HalfVector vj = kv_dequantize(cache_.codes(layer, h, KvKind::value, j), sz_.lookup(layer, h, KvKind::value, j));
      ws.add(p.probs(j), vj);
      s_ws.ready.push_back(nsz_v + static_cast<std::uint64_t>(j + 1) * kvb);
    }
    ws.add(p.probs(t), p.v);
    p.out = ws.result();
    s_ws.beats = nsz_v + static_cast<std::uint64_t>(t) * kvb;
    s_ws.lead_in = nsz_v;
    if (nsz_v) s_ws.traffic.push_back({lname(layer, "sz_packs"), sz_offset(cfg, h, 1, 0), nsz_v, false});
    if (t) s_ws.traffic.push_back({lname(layer, "v_cache"), kv_offset(cfg, h, 0), static_cast<std::uint64_t>(t) * kvb, false});

    const KvQuantized vq = kv_quantize(p.v);
    cache_.stage(layer, h, KvKind::value, vq);
    s_v.traffic.push_back({lname(layer, "v_cache"), kv_offset(cfg, h, t), kvb, true});
    if (sz_.push(layer, h, KvKind::value, vq.params))
      s_v.traffic.push_back({lname(layer, "sz_packs"), sz_offset(cfg, h, 1, static_cast<std::uint64_t>(t) / ppe), 1, true});

    concat.segment(h * hd, hd) = p.out;
    if (sched)
      for (VpuStage* st : {&s_q, &s_k, &s_hk, &s_v, &s_ws}) sched->stages.push_back(std::move(*st));
    res.heads.push_back(std::move(p));
  }
  cache_.commit(layer);

  VpuStage so = make_stage(lname(layer, "o_proj"), StageRole::o_proj, layer, -1);
  RowStreamer wo(L.wo, lname(layer, "wo"), cfg);
  const HalfVector o = wo.rows(detail::padded(concat, cfg.padded_model()), cfg.d_model, sched ? &so : nullptr);
  res.out.resize(cfg.d_model);
  SquareSum acc;
  for (int i = 0; i < cfg.d_model; ++i) {
    res.out(i) = detail::residual_add(x(i), o(i));
    acc.add(res.out(i));
  }
  res.sq = acc.value();
  if (sched) sched->stages.push_back(std::move(so));
  return res;
}

LayerResult FusedDecoder::mlp_layer(const HalfVector& x, float sq, int layer, TokenSchedule* sched) {
  const ModelConfig& cfg = model_->cfg;
  const PackedLayer& L = model_->layers.at(static_cast<std::size_t>(layer));
  if (sched)
    sched->stages.push_back(
        gain_stage(cfg, lname(layer, "mlp_norm"), layer, lname(layer, "norms"), vector_beats(cfg, cfg.d_model)));
  const HalfVector xn = detail::padded(rmsnorm(x, L.mlp_norm, cfg.rms_eps, sq), cfg.padded_model());

  VpuStage sgu = make_stage(lname(layer, "gate_up"), StageRole::gate_up, layer, -1);
  RowStreamer gu(L.w_gate_up, lname(layer, "w_gate_up"), cfg);
  const HalfVector pre = gu.rows(xn, 2 * cfg.d_ffn, sched ? &sgu : nullptr);
  HalfVector hgate = HalfVector::Zero(cfg.padded_ffn());
  for (int r = 0; r < cfg.d_ffn; ++r) hgate(r) = silu_gate(pre(2 * r), pre(2 * r + 1));

  VpuStage sd = make_stage(lname(layer, "down"), StageRole::down, layer, -1);
  RowStreamer dn(L.w_down, lname(layer, "w_down"), cfg);
  const HalfVector o = dn.rows(hgate, cfg.d_model, sched ? &sd : nullptr);
  LayerResult res;
  res.out.resize(cfg.d_model);
  SquareSum acc;
  for (int i = 0; i < cfg.d_model; ++i) {
    res.out(i) = detail::residual_add(x(i), o(i));
    acc.add(res.out(i));
  }
  res.sq = acc.value();
  if (sched) {
    sched->stages.push_back(std::move(sgu));
    sched->stages.push_back(std::move(sd));
  }
  return res;
}

DecodeResult FusedDecoder::step(int token_id) {
  const ModelConfig& cfg = model_->cfg;
  const int t = position();
  detail::check_token(cfg, token_id, t);

  DecodeResult r;
  r.schedule.position = t;
  r.schedule.token = token_id;
  const std::uint64_t vb = vector_beats(cfg, cfg.d_model);
  VpuStage emb = make_stage("embed", StageRole::embed, -1, -1);
  emb.beats = vb;
  emb.traffic.push_back({"embedding", static_cast<std::uint64_t>(token_id) * vb, vb, false});
  r.schedule.stages.push_back(std::move(emb));

  HalfVector x = detail::embedding_row(model_->embedding, token_id);
  float sq = square_sum(as_span(x));
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerResult a = attention_layer(x, sq, l, &r.schedule);
    LayerResult m = mlp_layer(a.out, a.sq, l, &r.schedule);
    x = std::move(m.out);
    sq = m.sq;
  }
  r.schedule.stages.push_back(gain_stage(cfg, "final_norm", -1, "final_norm", 0));
  const HalfVector xn = detail::padded(rmsnorm(x, model_->final_norm, cfg.rms_eps, sq), cfg.padded_model());
  VpuStage head = make_stage("lm_head", StageRole::lm_head, -1, -1);
  RowStreamer lm(model_->lm_head, "lm_head", cfg);
  r.logits = lm.rows(xn, cfg.vocab_size, &head);
  r.schedule.stages.push_back(std::move(head));
  r.token = greedy_argmax(r.logits);
  r.trace = evaluate_schedule(r.schedule, cfg, costs_);
  return r;
}

}  // namespace streamdec
