// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <vector>

namespace streamdec {

using Half = Eigen::half;
using HalfVector = Eigen::Matrix<Half, Eigen::Dynamic, 1>;
using HalfMatrix = Eigen::Matrix<Half, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::uint16_t half_bits(Half h) { return Eigen::numext::bit_cast<std::uint16_t>(h); }
inline Half half_from_bits(std::uint16_t bits) { return Eigen::numext::bit_cast<Half>(bits); }

/// Correctly rounded (round-half-even) narrowing from double. A plain
/// double -> float -> half chain can double-round; this goes through a
/// round-to-odd float first, which is exact for the final RNE step.
Half to_half(double v);
inline Half to_half(float v) { return Half(v); }

/// Smallest half >= v (v finite, positive). Used for quantization scales
/// so the 4/8-bit grid always spans the requested range.
Half half_ceil(double v);

/// Spacing of half-precision values at |x|.
double half_ulp(double x);

/// Distance in units of the last place between two halves, counted on the
/// monotone integer line of bit patterns (+0 and -0 are one point).
std::int32_t half_ulp_distance(Half a, Half b);

inline constexpr double kHalfMinNormal = 6.103515625e-05;

enum class AccumulationOrder { tree, sequential };

struct DotEngineConfig {
  int lanes = 128;
  AccumulationOrder order = AccumulationOrder::tree;
};

/// Lane-block dot engine. Products of two halves are exact in float; each
/// block of `lanes` products is reduced by a fixed pairwise tree, blocks are
/// added sequentially into a float accumulator, and only the final value is
/// rounded to half.
class DotAccumulator {
 public:
  explicit DotAccumulator(const DotEngineConfig& cfg);

  /// Both spans must hold exactly `lanes` elements.
  void add_block(std::span<const Half> a, std::span<const Half> b);
  void reset() { acc_ = 0.0f; }

  float wide() const { return acc_; }
  Half result() const { return Half(acc_); }
  int lanes() const { return cfg_.lanes; }

 private:
  DotEngineConfig cfg_;
  std::vector<float> scratch_;
  float acc_ = 0.0f;
};

/// Inner product through the dot engine.
/// Throws ShapeError on length mismatch and AlignmentError when the length
/// is not a multiple of `cfg.lanes`.
Half dot(std::span<const Half> a, std::span<const Half> b, const DotEngineConfig& cfg);

inline Half dot(const HalfVector& a, const HalfVector& b, const DotEngineConfig& cfg) {
  return dot(std::span<const Half>(a.data(), a.size()), std::span<const Half>(b.data(), b.size()), cfg);
}

/// Zero-extend to the next multiple of `multiple`.
HalfVector pad_to(const HalfVector& v, Eigen::Index multiple);

inline std::span<const Half> as_span(const HalfVector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

// ---------------------------------------------------------------------------
// Quarter-wave trigonometric ROM.
// ---------------------------------------------------------------------------

/// 24-bit fixed-point angle in turns: bits [23:22] quadrant, [21:10] table
/// index, [9:0] sub-index fraction used only for nearest-entry rounding.
using Phase = std::uint32_t;
inline constexpr int kPhaseBits = 24;
inline constexpr Phase kPhaseMask = (Phase{1} << kPhaseBits) - 1;

/// Reduces `turns` modulo one and quantizes to the nearest phase step.
Phase phase_from_turns(double turns);

struct SinCos {
  Half sin;
  Half cos;
};

class TrigTable {
 public:
  static constexpr int kEntries = 4096;

  /// `pairs` inverse frequencies base^(-2j/exponent_span), j = 0..pairs-1.
  TrigTable(int pairs, double exponent_span, double base = 10000.0);

  /// Standard per-head RoPE schedule: head_dim/2 entries with span head_dim.
  static TrigTable standard(int head_dim, double base = 10000.0);
  /// 2048 entries, span 4096, i.e. base^(-i/4096) for i = 0, 2, ..., 4094.
  static TrigTable wide_span(double base = 10000.0);

  std::span<const Half> quarter_wave() const { return quarter_; }
  std::span<const double> inv_freq() const { return inv_freq_; }

  /// sin(k * pi/2 / 4096) for k in [0, 4096]; k == 4096 is the quadrant end (1).
  Half quarter_sin(int k) const { return k >= kEntries ? Half(1.0f) : quarter_[static_cast<std::size_t>(k)]; }

 private:
  std::vector<Half> quarter_;
  std::vector<double> inv_freq_;
};

/// Nearest-entry lookup with quadrant folding.
SinCos lut_sin_cos(Phase phase, const TrigTable& table);
inline SinCos lut_sin_cos_turns(double turns, const TrigTable& table) {
  return lut_sin_cos(phase_from_turns(turns), table);
}

}  // namespace streamdec
