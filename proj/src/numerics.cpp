// SPDX-License-Identifier: Apache-2.0
#include "streamdec/numerics.hpp"

#include "streamdec/errors.hpp"

#include <bit>
#include <cmath>
#include <numbers>

namespace streamdec {

Half to_half(double v) {
  float f = static_cast<float>(v);
  if (std::isfinite(v) && std::isfinite(f) && static_cast<double>(f) != v) {
    auto bits = std::bit_cast<std::uint32_t>(f);
    if (std::fabs(static_cast<double>(f)) > std::fabs(v)) bits -= 1;
    bits |= 1u;
    f = std::bit_cast<float>(bits);
  }
  return Half(f);
}

Half half_ceil(double v) {
  Half h = to_half(v);
  if (static_cast<double>(static_cast<float>(h)) < v) {
    const std::uint16_t bits = half_bits(h);
    // v > 0 here, so h is +0 or a positive value and the next pattern is larger.
    h = half_from_bits(static_cast<std::uint16_t>(bits + 1));
  }
  return h;
}

double half_ulp(double x) {
  x = std::fabs(x);
  if (x < kHalfMinNormal) return std::ldexp(1.0, -24);
  int exp = 0;
  std::frexp(x, &exp);  // x = m * 2^exp, m in [0.5, 1)
  return std::ldexp(1.0, exp - 11);
}

std::int32_t half_ulp_distance(Half a, Half b) {
  auto ordered = [](Half h) {
    const std::int32_t bits = half_bits(h);
    return (bits & 0x8000) ? -(bits & 0x7fff) : bits;
  };
  const std::int32_t d = ordered(a) - ordered(b);
  return d < 0 ? -d : d;
}

DotAccumulator::DotAccumulator(const DotEngineConfig& cfg) : cfg_(cfg) {
  if (cfg_.lanes <= 0) throw ConfigError("dot engine needs a positive lane count");
  scratch_.resize(static_cast<std::size_t>(cfg_.lanes));
}

void DotAccumulator::add_block(std::span<const Half> a, std::span<const Half> b) {
  const auto n = static_cast<std::size_t>(cfg_.lanes);
  if (a.size() != n || b.size() != n) throw ShapeError("dot engine block must hold exactly `lanes` elements");

  if (cfg_.order == AccumulationOrder::sequential) {
    for (std::size_t i = 0; i < n; ++i) acc_ += static_cast<float>(a[i]) * static_cast<float>(b[i]);
    return;
  }
  for (std::size_t i = 0; i < n; ++i) scratch_[i] = static_cast<float>(a[i]) * static_cast<float>(b[i]);
  // Bottom-up pairwise adder tree; an odd tail element is forwarded unchanged.
  std::size_t width = n;
  while (width > 1) {
    const std::size_t half = width / 2;
    for (std::size_t i = 0; i < half; ++i) scratch_[i] = scratch_[2 * i] + scratch_[2 * i + 1];
    if (width & 1u) scratch_[half] = scratch_[width - 1];
    width = half + (width & 1u);
  }
  acc_ += scratch_[0];
}

Half dot(std::span<const Half> a, std::span<const Half> b, const DotEngineConfig& cfg) {
  if (a.size() != b.size()) throw ShapeError("dot: operand lengths differ");
  const auto lanes = static_cast<std::size_t>(cfg.lanes);
  if (lanes == 0 || a.size() % lanes != 0) throw AlignmentError("dot: length is not a multiple of the lane count");
  DotAccumulator acc(cfg);
  for (std::size_t off = 0; off < a.size(); off += lanes) acc.add_block(a.subspan(off, lanes), b.subspan(off, lanes));
  return acc.result();
}

HalfVector pad_to(const HalfVector& v, Eigen::Index multiple) {
  const Eigen::Index n = (v.size() + multiple - 1) / multiple * multiple;
  HalfVector out = HalfVector::Zero(n);
  out.head(v.size()) = v;
  return out;
}

Phase phase_from_turns(double turns) {
  const double frac = turns - std::floor(turns);
  const auto steps = static_cast<std::int64_t>(std::llround(frac * static_cast<double>(Phase{1} << kPhaseBits)));
  return static_cast<Phase>(steps) & kPhaseMask;
}

TrigTable::TrigTable(int pairs, double exponent_span, double base) {
  if (pairs < 0 || exponent_span <= 0.0 || base <= 0.0) throw ConfigError("invalid trig table parameters");
  quarter_.reserve(kEntries);
  for (int k = 0; k < kEntries; ++k)
    quarter_.push_back(to_half(std::sin(static_cast<double>(k) * (std::numbers::pi / 2.0) / kEntries)));
  inv_freq_.reserve(static_cast<std::size_t>(pairs));
  for (int j = 0; j < pairs; ++j) inv_freq_.push_back(std::pow(base, -2.0 * j / exponent_span));
}

TrigTable TrigTable::standard(int head_dim, double base) {
  if (head_dim <= 0 || head_dim % 2 != 0) throw ShapeError("head_dim must be positive and even");
  return TrigTable(head_dim / 2, static_cast<double>(head_dim), base);
}

TrigTable TrigTable::wide_span(double base) { return TrigTable(2048, 4096.0, base); }

SinCos lut_sin_cos(Phase phase, const TrigTable& table) {
  phase &= kPhaseMask;
  constexpr int kQuadrantShift = kPhaseBits - 2;
  constexpr Phase kWithinMask = (Phase{1} << kQuadrantShift) - 1;
  constexpr int kFractionBits = kQuadrantShift - 12;
  const Phase quadrant = phase >> kQuadrantShift;
  const Phase within = phase & kWithinMask;
  const int k = static_cast<int>((within + (Phase{1} << (kFractionBits - 1))) >> kFractionBits);  // 0..4096

  const Half s = table.quarter_sin(k);
  const Half c = table.quarter_sin(TrigTable::kEntries - k);
  switch (quadrant) {
    case 0: return {s, c};
    case 1: return {c, -s};
    case 2: return {-s, -c};
    default: return {-c, s};
  }
}

}  // namespace streamdec
