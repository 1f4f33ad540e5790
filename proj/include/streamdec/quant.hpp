// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "streamdec/errors.hpp"
#include "streamdec/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace streamdec {

/// One 4-bit weight group: x = (code - zero) * scale.
struct QuantGroup {
  std::vector<std::uint8_t> codes;
  Half scale{0.0f};
  std::uint8_t zero = 0;

  friend bool operator==(const QuantGroup& a, const QuantGroup& b) {
    return a.codes == b.codes && half_bits(a.scale) == half_bits(b.scale) && a.zero == b.zero;
  }
};

HalfVector dequant_group(const QuantGroup& g);

inline std::uint8_t clamp_code(double q, int hi) {
  return static_cast<std::uint8_t>(std::clamp(q, 0.0, static_cast<double>(hi)));
}

/// Asymmetric round-to-nearest 4-bit quantization of one group.
///
/// The range is widened to include zero (min' = min(min, 0), max' =
/// max(max, 0)) so the zero point always lands in [0, 15]. The scale is
/// rounded *up* to half so 15 * scale covers the range. Only an all-zero
/// group collapses the range; it is encoded with the smallest normal half
/// scale and every code equal to the zero point (0).
template <typename Derived>
QuantGroup quant_group_rtn(const Eigen::MatrixBase<Derived>& w, int group_size) {
  if (group_size <= 0 || w.size() != group_size) throw ShapeError("quant_group_rtn: input length must equal group_size");
  double lo = 0.0;
  double hi = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    const double v = static_cast<double>(w(i));
    if (!std::isfinite(v)) throw DomainError("quant_group_rtn: non-finite weight");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }

  QuantGroup g;
  g.codes.assign(static_cast<std::size_t>(group_size), 0);
  if (hi == lo) {
    g.scale = Half(static_cast<float>(kHalfMinNormal));
    g.zero = 0;
    return g;
  }
  g.scale = half_ceil(std::max((hi - lo) / 15.0, kHalfMinNormal));
  const double s = static_cast<double>(static_cast<float>(g.scale));
  g.zero = clamp_code(std::nearbyint(-lo / s), 15);
  for (Eigen::Index i = 0; i < w.size(); ++i)
    g.codes[static_cast<std::size_t>(i)] = clamp_code(std::nearbyint(static_cast<double>(w(i)) / s) + g.zero, 15);
  return g;
}

// ---------------------------------------------------------------------------
// KV8
// ---------------------------------------------------------------------------

/// Scale and zero point of one quantized K or V head vector.
/// `zero` holds the magnitude of z = ceil(x_min / s) (z <= 0), so that
/// x = (code - zero) * s.
struct KvQuantParams {
  Half scale{0.0f};
  std::uint8_t zero = 0;

  int zero_point() const { return -static_cast<int>(zero); }

  friend bool operator==(const KvQuantParams& a, const KvQuantParams& b) {
    return half_bits(a.scale) == half_bits(b.scale) && a.zero == b.zero;
  }
};

struct KvQuantized {
  std::vector<std::uint8_t> codes;
  KvQuantParams params;
};

/// Two-pass online quantizer. Pass one observes every element once and
/// fixes (s, z); pass two maps each element to its code. The split lets the
/// pipeline run pass one while the vector is still being produced.
class KvQuantizer {
 public:
  void observe(Half x);
  /// Ends pass one. Throws ShapeError when nothing was observed.
  KvQuantParams finish_range();
  std::uint8_t encode(Half x) const;

  std::size_t observed() const { return count_; }
  /// Reads of the input per pass, for instrumentation.
  std::size_t state_elements() const { return 2; }

 private:
  double lo_ = 0.0;
  double hi_ = 0.0;
  std::size_t count_ = 0;
  bool closed_ = false;
  KvQuantParams params_;
  double scale_ = 0.0;
  double zero_point_ = 0.0;
};

/// s = (max' - min') / 255 (clamped to the smallest normal half, rounded up
/// to half), z = ceil(min' / s), code = clamp(round(x / s) - z, 0, 255) with
/// min' = min(min, 0), max' = max(max, 0).
KvQuantized kv_quantize(std::span<const Half> x);
inline KvQuantized kv_quantize(const HalfVector& x) { return kv_quantize(as_span(x)); }

HalfVector kv_dequantize(std::span<const std::uint8_t> codes, const KvQuantParams& p);

}  // namespace streamdec
