// SPDX-License-Identifier: Apache-2.0
// Unfused decoder: every projection is a plain loop over dequantized rows,
// every head runs its steps one after another, nothing is packed.

#include "decode_common.hpp"
#include "streamdec/pipeline.hpp"

namespace streamdec {

namespace {

HalfVector project(const QuantMatrix& w, const HalfVector& x_padded, int r0, int n, const DotEngineConfig& dc) {
  HalfVector out(n);
  for (int r = 0; r < n; ++r) out(r) = dot(x_padded, w.dequant_row(r0 + r), dc);
  return out;
}

}  // namespace

ReferenceDecoder::ReferenceDecoder(const QuantModel& model)
    : model_(&model), trig_(model.cfg.trig_table()), cache_(model.cfg) {
  model.cfg.validate();
}

LayerResult ReferenceDecoder::attention_layer(const HalfVector& x, float sq, int layer) {
  const ModelConfig& cfg = model_->cfg;
  const QuantLayer& L = model_->layers.at(static_cast<std::size_t>(layer));
  const DotEngineConfig dc = cfg.bus.dot_config();
  const int hd = cfg.head_dim;
  const int t = cache_.length(layer);
  if (t >= cfg.max_context) throw CapacityError("kv cache is full", "kv_cache");
  const RotationContext ctx{t, hd, &trig_};

  const HalfVector xn = detail::padded(rmsnorm(x, L.attn_norm, cfg.rms_eps, sq), cfg.padded_model());
  LayerResult res;
  HalfVector concat(cfg.d_model);
  for (int h = 0; h < cfg.n_heads; ++h) {
    HeadProbe p;
    const int base = 3 * h * hd;
    p.q = project(L.wqkv, xn, base, hd, dc);
    p.k = project(L.wqkv, xn, base + hd, hd, dc);
    p.v = project(L.wqkv, xn, base + 2 * hd, hd, dc);
    p.q_rot = rope_rotate(p.q, ctx);
    p.k_rot = rope_rotate(p.k, ctx);

    for (int j = 0; j < t; ++j) p.logits.push_back(detail::head_logit(p.q_rot, cache_.dequant(layer, h, KvKind::key, j), cfg));
    p.logits.push_back(detail::head_logit(p.q_rot, p.k_rot, cfg));
    p.probs = softmax(std::span<const Half>(p.logits));

    detail::WeightedSum ws(hd);
    for (int j = 0; j < t; ++j) ws.add(p.probs(j), cache_.dequant(layer, h, KvKind::value, j));
    ws.add(p.probs(t), p.v);
    p.out = ws.result();

    cache_.stage(layer, h, KvKind::key, kv_quantize(p.k_rot));
    cache_.stage(layer, h, KvKind::value, kv_quantize(p.v));
    concat.segment(h * hd, hd) = p.out;
    res.heads.push_back(std::move(p));
  }
  cache_.commit(layer);

  const HalfVector o = project(L.wo, detail::padded(concat, cfg.padded_model()), 0, cfg.d_model, dc);
  res.out.resize(cfg.d_model);
  for (int i = 0; i < cfg.d_model; ++i) res.out(i) = detail::residual_add(x(i), o(i));
  res.sq = square_sum(as_span(res.out));
  return res;
}

LayerResult ReferenceDecoder::mlp_layer(const HalfVector& x, float sq, int layer) {
  const ModelConfig& cfg = model_->cfg;
  const QuantLayer& L = model_->layers.at(static_cast<std::size_t>(layer));
  const DotEngineConfig dc = cfg.bus.dot_config();
  const HalfVector xn = detail::padded(rmsnorm(x, L.mlp_norm, cfg.rms_eps, sq), cfg.padded_model());

  HalfVector hgate = HalfVector::Zero(cfg.padded_ffn());
  for (int r = 0; r < cfg.d_ffn; ++r) {
    const Half g = dot(xn, L.w_gate_up.dequant_row(2 * r), dc);
    const Half u = dot(xn, L.w_gate_up.dequant_row(2 * r + 1), dc);
    hgate(r) = silu_gate(g, u);
  }
  const HalfVector o = project(L.w_down, hgate, 0, cfg.d_model, dc);
  LayerResult res;
  res.out.resize(cfg.d_model);
  for (int i = 0; i < cfg.d_model; ++i) res.out(i) = detail::residual_add(x(i), o(i));
  res.sq = square_sum(as_span(res.out));
  return res;
}

HalfVector ReferenceDecoder::step(int token_id) {
  const ModelConfig& cfg = model_->cfg;
  detail::check_token(cfg, token_id, position());
  HalfVector x = detail::embedding_row(model_->embedding, token_id);
  for (int l = 0; l < cfg.n_layers; ++l) {
    // Two-pass RMSNorm here: the square sum is recomputed from x.
    LayerResult a = attention_layer(x, square_sum(as_span(x)), l);
    LayerResult m = mlp_layer(a.out, square_sum(as_span(a.out)), l);
    x = std::move(m.out);
  }
  const HalfVector xn = detail::padded(rmsnorm(x, model_->final_norm, cfg.rms_eps), cfg.padded_model());
  return project(model_->lm_head, xn, 0, cfg.vocab_size, cfg.bus.dot_config());
}

}  // namespace streamdec
