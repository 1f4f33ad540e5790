// SPDX-License-Identifier: Apache-2.0
#include "streamdec/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace streamdec {

RopeRotator::RopeRotator(const RotationContext& ctx) : ctx_(ctx) {
  if (ctx.head_dim <= 0 || ctx.head_dim % 2 != 0) throw ShapeError("rope: head_dim must be positive and even");
  if (!ctx.trig) throw ConfigError("rope: missing trig table");
  if (static_cast<int>(ctx.trig->inv_freq().size()) < ctx.head_dim / 2)
    throw ConfigError("rope: trig table has fewer frequencies than head_dim / 2");
  if (ctx.token_pos < 0) throw DomainError("rope: negative token position");
}

std::optional<std::array<Half, 2>> RopeRotator::push(Half x) {
  if (index_ >= ctx_.head_dim) throw ShapeError("rope: more than head_dim elements pushed");
  ++index_;
  if (!pending_) {
    pending_ = x;
    max_state_ = std::max<std::size_t>(max_state_, 1);
    return std::nullopt;
  }
  const int pair = index_ / 2 - 1;
  const SinCos sc = lut_sin_cos(rope_phase(ctx_.token_pos, pair, *ctx_.trig), *ctx_.trig);
  const auto out = rotate_pair(*pending_, x, sc);
  pending_.reset();
  return out;
}

Phase rope_phase(std::int64_t token_pos, int pair, const TrigTable& trig) {
  const double theta = static_cast<double>(token_pos) * trig.inv_freq()[static_cast<std::size_t>(pair)];
  return phase_from_turns(theta / (2.0 * std::numbers::pi));
}

std::array<Half, 2> rotate_pair(Half v0, Half v1, SinCos sc) {
  const float a = static_cast<float>(v0);
  const float b = static_cast<float>(v1);
  const float s = static_cast<float>(sc.sin);
  const float c = static_cast<float>(sc.cos);
  return {Half(a * c - b * s), Half(a * s + b * c)};
}

HalfVector rope_rotate(const HalfVector& v, const RotationContext& ctx) {
  if (v.size() != ctx.head_dim) throw ShapeError("rope: vector length must equal head_dim");
  RopeRotator rot(ctx);
  HalfVector out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (auto pair = rot.push(v(i))) {
      out(i - 1) = (*pair)[0];
      out(i) = (*pair)[1];
    }
  return out;
}

float square_sum(std::span<const Half> a) {
  SquareSum s;
  for (Half x : a) s.add(x);
  return s.value();
}

double rms_inverse(float sq, std::size_t n, double eps) {
  if (n == 0) throw ShapeError("rmsnorm: empty input");
  const double arg = static_cast<double>(sq) / static_cast<double>(n) + eps;
  if (!(arg > 0.0) || !std::isfinite(arg)) throw DomainError("rmsnorm: mean square + eps must be positive and finite");
  return 1.0 / std::sqrt(arg);
}

HalfVector rmsnorm(const HalfVector& a, const HalfVector& gain, double eps, std::optional<float> precomputed_sq) {
  if (a.size() != gain.size()) throw ShapeError("rmsnorm: input and gain lengths differ");
  const float sq = precomputed_sq ? *precomputed_sq : square_sum(as_span(a));
  const double inv = rms_inverse(sq, static_cast<std::size_t>(a.size()), eps);
  HalfVector out(a.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) out(i) = rms_scale(a(i), gain(i), inv);
  return out;
}

void StreamingSoftmax::observe_max(Half x) {
  if (pass_ != 1) throw Error("softmax: max pass already closed");
  const float f = static_cast<float>(x);
  if (!std::isfinite(f)) throw DomainError("softmax: non-finite input");
  max_ = n_ == 0 ? f : std::max(max_, f);
  ++n_;
}

void StreamingSoftmax::begin_sum() {
  if (n_ == 0) throw ShapeError("softmax: empty input");
  pass_ = 2;
  d_ = 0.0f;
}

void StreamingSoftmax::accumulate(Half x) {
  if (pass_ != 2) throw Error("softmax: not in the sum pass");
  d_ += static_cast<float>(std::exp(static_cast<double>(static_cast<float>(x)) - static_cast<double>(max_)));
}

void StreamingSoftmax::begin_normalize() {
  if (pass_ != 2) throw Error("softmax: sum pass has not run");
  pass_ = 3;
}

Half StreamingSoftmax::normalize(Half x) const {
  if (pass_ != 3) throw Error("softmax: not in the normalize pass");
  const double e = std::exp(static_cast<double>(static_cast<float>(x)) - static_cast<double>(max_));
  return to_half(e / static_cast<double>(d_));
}

HalfVector softmax(std::span<const Half> x) {
  if (x.empty()) throw ShapeError("softmax: empty input");
  StreamingSoftmax sm;
  for (Half v : x) sm.observe_max(v);
  sm.begin_sum();
  for (Half v : x) sm.accumulate(v);
  sm.begin_normalize();
  HalfVector out(static_cast<Eigen::Index>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) out(static_cast<Eigen::Index>(i)) = sm.normalize(x[i]);
  return out;
}

Half silu_gate(Half gate_x, Half up_x) {
  const double g = static_cast<double>(static_cast<float>(gate_x));
  const double u = static_cast<double>(static_cast<float>(up_x));
  return to_half(g / (1.0 + std::exp(-g)) * u);
}

Half scale_logit(Half dot, int head_dim) {
  const auto inv = static_cast<float>(1.0 / std::sqrt(static_cast<double>(head_dim)));
  return Half(static_cast<float>(dot) * inv);
}

}  // namespace streamdec
