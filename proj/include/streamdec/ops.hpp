// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "streamdec/errors.hpp"
#include "streamdec/numerics.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>

namespace streamdec {

// ---------------------------------------------------------------------------
// RoPE
// ---------------------------------------------------------------------------

struct RotationContext {
  std::int64_t token_pos = 0;
  int head_dim = 0;
  const TrigTable* trig = nullptr;
};

/// Streaming rotator over adjacent pairs (v[2j], v[2j+1]). Even elements
/// are cached; each odd element releases the rotated pair.
class RopeRotator {
 public:
  explicit RopeRotator(const RotationContext& ctx);

  std::optional<std::array<Half, 2>> push(Half x);
  /// Elements currently cached (never more than one).
  std::size_t state_elements() const { return pending_ ? 1 : 0; }
  std::size_t max_state_elements() const { return max_state_; }

 private:
  RotationContext ctx_;
  int index_ = 0;
  std::optional<Half> pending_;
  std::size_t max_state_ = 0;
};

/// Angle of pair j at `token_pos`, as a table phase.
Phase rope_phase(std::int64_t token_pos, int pair, const TrigTable& trig);

/// Rotates one pair with the given sin/cos (float arithmetic, one rounding).
std::array<Half, 2> rotate_pair(Half v0, Half v1, SinCos sc);

/// Throws ShapeError for odd head_dim or len(v) != head_dim.
HalfVector rope_rotate(const HalfVector& v, const RotationContext& ctx);

// ---------------------------------------------------------------------------
// RMSNorm
// ---------------------------------------------------------------------------

/// Sequential float accumulation of x_i^2 (the fused residual path adds one
/// element at a time in the same order).
class SquareSum {
 public:
  void add(Half x) {
    const float f = static_cast<float>(x);
    acc_ += f * f;
  }
  float value() const { return acc_; }

 private:
  float acc_ = 0.0f;
};

float square_sum(std::span<const Half> a);

/// 1 / sqrt(sq / n + eps). Throws DomainError when the argument is not positive.
double rms_inverse(float sq, std::size_t n, double eps);

/// out_i = gain_i * a_i * inv, rounded once.
inline Half rms_scale(Half a, Half gain, double inv) {
  return to_half(static_cast<double>(static_cast<float>(gain)) * static_cast<double>(static_cast<float>(a)) * inv);
}

/// Two passes (square sum, normalize); the first is skipped when the square
/// sum was produced upstream. Throws ShapeError on length mismatch.
HalfVector rmsnorm(const HalfVector& a, const HalfVector& gain, double eps, std::optional<float> precomputed_sq = {});

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Three-pass stable softmax over a stream that is replayed once per pass:
/// pass 1 max, pass 2 d = sum exp(x - m) (float, in order), pass 3 e / d.
class StreamingSoftmax {
 public:
  void observe_max(Half x);
  void begin_sum();
  void accumulate(Half x);
  void begin_normalize();
  Half normalize(Half x) const;

  float max() const { return max_; }
  float denominator() const { return d_; }
  int pass() const { return pass_; }
  std::size_t count() const { return n_; }
  /// Scalars held between passes (m, d).
  std::size_t state_elements() const { return 2; }

 private:
  float max_ = 0.0f;
  float d_ = 0.0f;
  std::size_t n_ = 0;
  int pass_ = 1;
};

/// Throws ShapeError on empty input.
HalfVector softmax(std::span<const Half> x);
inline HalfVector softmax(const HalfVector& x) { return softmax(as_span(x)); }

// ---------------------------------------------------------------------------
// SiLU gate and attention logit scale
// ---------------------------------------------------------------------------

/// gate / (1 + exp(-gate)) * up, evaluated in double and rounded once.
Half silu_gate(Half gate_x, Half up_x);

/// Logit pre-softmax scaling by 1/sqrt(head_dim).
Half scale_logit(Half dot, int head_dim);

}  // namespace streamdec
