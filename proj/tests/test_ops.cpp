// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "streamdec/ops.hpp"

#include <cmath>
#include <numbers>
#include <random>

using namespace streamdec;

namespace {

float f(Half h) { return static_cast<float>(h); }

HalfVector random_halves(std::mt19937_64& rng, int n, float lo, float hi) {
  std::uniform_real_distribution<float> u(lo, hi);
  HalfVector v(n);
  for (int i = 0; i < n; ++i) v(i) = Half(u(rng));
  return v;
}

}  // namespace

TEST_CASE("rope: position 0 is the identity") {
  const TrigTable t = TrigTable::standard(16);
  std::mt19937_64 rng(1);
  const HalfVector v = random_halves(rng, 16, -2, 2);
  const HalfVector r = rope_rotate(v, {0, 16, &t});
  for (int i = 0; i < 16; ++i) CHECK(half_bits(r(i)) == half_bits(v(i)));
}

TEST_CASE("rope: pos 17 against exact trigonometry") {
  const TrigTable t = TrigTable::standard(64);
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const HalfVector v = random_halves(rng, 64, -3, 3);
    const HalfVector r = rope_rotate(v, {17, 64, &t});
    const double vmax = v.cast<float>().cwiseAbs().maxCoeff();
    for (int j = 0; j < 32; ++j) {
      const double a = 17.0 * std::pow(10000.0, -2.0 * j / 64.0);
      const double x = f(v(2 * j)), y = f(v(2 * j + 1));
      REQUIRE(std::abs(f(r(2 * j)) - (x * std::cos(a) - y * std::sin(a))) <= std::ldexp(vmax, -8));
      REQUIRE(std::abs(f(r(2 * j + 1)) - (x * std::sin(a) + y * std::cos(a))) <= std::ldexp(vmax, -8));
    }
  }
}

TEST_CASE("rope: errors and streaming state") {
  const TrigTable t = TrigTable::standard(16);
  CHECK_THROWS_AS(rope_rotate(HalfVector::Zero(15), {1, 15, &t}), ShapeError);
  CHECK_THROWS_AS(rope_rotate(HalfVector::Zero(8), {1, 16, &t}), ShapeError);
  RopeRotator rot({5, 16, &t});
  std::mt19937_64 rng(2);
  const HalfVector v = random_halves(rng, 16, -1, 1);
  const HalfVector ref = rope_rotate(v, {5, 16, &t});
  for (int i = 0; i < 16; ++i) {
    const auto out = rot.push(v(i));
    REQUIRE(out.has_value() == (i % 2 == 1));
    if (out) {
      REQUIRE(half_bits((*out)[0]) == half_bits(ref(i - 1)));
      REQUIRE(half_bits((*out)[1]) == half_bits(ref(i)));
    }
  }
  CHECK(rot.max_state_elements() == 1);
  CHECK(rot.state_elements() == 0);
}

TEST_CASE("rope phase uses the token number times the inverse frequency") {
  const TrigTable t = TrigTable::standard(128);
  CHECK(rope_phase(0, 3, t) == 0);
  CHECK(rope_phase(1, 0, t) == phase_from_turns(1.0 / (2 * std::numbers::pi)));
  CHECK(rope_phase(1023, 5, t) == phase_from_turns(1023.0 * t.inv_freq()[5] / (2 * std::numbers::pi)));
}

TEST_CASE("rmsnorm examples") {
  const HalfVector ones = HalfVector::Constant(64, Half(1.0f));
  const HalfVector r = rmsnorm(ones, ones, 0.0);
  for (int i = 0; i < 64; ++i) CHECK(f(r(i)) == 1.0f);

  HalfVector a(2);
  a << Half(3.0f), Half(4.0f);
  const HalfVector g = HalfVector::Constant(2, Half(1.0f));
  const HalfVector n = rmsnorm(a, g, 0.0);
  CHECK(half_bits(n(0)) == half_bits(to_half(3.0 / std::sqrt(12.5))));
  CHECK(half_bits(n(1)) == half_bits(to_half(4.0 / std::sqrt(12.5))));
  CHECK(f(n(0)) == doctest::Approx(0.84852).epsilon(1e-3));
  CHECK(f(n(1)) == doctest::Approx(1.13137).epsilon(1e-3));

  CHECK_THROWS_AS(rmsnorm(a, ones, 1e-5), ShapeError);
  CHECK_THROWS_AS(rmsnorm(HalfVector::Zero(4), HalfVector::Ones(4), 0.0), DomainError);
}

TEST_CASE("rmsnorm: precomputed square sum matches the two-pass path; unit RMS") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const HalfVector a = random_halves(rng, 96, -4, 4), g = random_halves(rng, 96, 0.5f, 1.5f);
    SquareSum sq;
    for (int i = 0; i < 96; ++i) sq.add(a(i));
    REQUIRE(sq.value() == square_sum(as_span(a)));
    const HalfVector two = rmsnorm(a, g, 1e-5), one = rmsnorm(a, g, 1e-5, sq.value());
    for (int i = 0; i < 96; ++i) REQUIRE(half_bits(one(i)) == half_bits(two(i)));
    double ms = 0.0;
    for (int i = 0; i < 96; ++i) ms += std::pow(f(two(i)) / f(g(i)), 2);
    REQUIRE(std::abs(std::sqrt(ms / 96) - 1.0) <= std::ldexp(1.0, -7));
  }
}

TEST_CASE("softmax examples") {
  const HalfVector big = HalfVector::Constant(8, Half(1000.0f));
  const HalfVector s = softmax(big);
  for (int i = 0; i < 8; ++i) CHECK(f(s(i)) == 0.125f);

  HalfVector x(2);
  x << Half(0.0f), to_half(std::log(3.0));
  const HalfVector p = softmax(x);
  CHECK(f(p(0)) == doctest::Approx(0.25).epsilon(2e-3));
  CHECK(f(p(1)) == doctest::Approx(0.75).epsilon(2e-3));
  CHECK_THROWS_AS(softmax(std::span<const Half>{}), ShapeError);
}

TEST_CASE("softmax: three observable passes") {
  StreamingSoftmax sm;
  const std::vector<Half> x{Half(1.0f), Half(3.0f), Half(2.0f)};
  CHECK(sm.pass() == 1);
  for (Half v : x) sm.observe_max(v);
  CHECK(sm.max() == 3.0f);
  sm.begin_sum();
  CHECK(sm.pass() == 2);
  for (Half v : x) sm.accumulate(v);
  CHECK(sm.denominator() == doctest::Approx(std::exp(-2.0) + 1 + std::exp(-1.0)));
  sm.begin_normalize();
  CHECK(sm.pass() == 3);
  const HalfVector ref = softmax(std::span<const Half>(x));
  for (int i = 0; i < 3; ++i) CHECK(half_bits(sm.normalize(x[static_cast<std::size_t>(i)])) == half_bits(ref(i)));
  CHECK(sm.state_elements() == 2);
}

TEST_CASE("softmax: shift invariance and length-512 oracle") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const HalfVector x = random_halves(rng, 512, -8, 8);
    HalfVector y(512);
    for (int i = 0; i < 512; ++i) y(i) = Half(f(x(i)) + 16.0f);  // exact in half for |x| <= 8 grid
    const HalfVector s = softmax(x);
    bool exact_shift = true;
    for (int i = 0; i < 512; ++i) exact_shift = exact_shift && (f(y(i)) - 16.0f == f(x(i)));
    if (exact_shift) {
      const HalfVector t = softmax(y);
      for (int i = 0; i < 512; ++i) REQUIRE(half_bits(s(i)) == half_bits(t(i)));
    }
    double m = -1e9, d = 0.0;
    for (int i = 0; i < 512; ++i) m = std::max(m, static_cast<double>(f(x(i))));
    for (int i = 0; i < 512; ++i) d += std::exp(static_cast<double>(f(x(i))) - m);
    for (int i = 0; i < 512; ++i) REQUIRE(std::abs(f(s(i)) - std::exp(f(x(i)) - m) / d) <= std::ldexp(1.0, -8));
  }
}

TEST_CASE("silu_gate") {
  CHECK(f(silu_gate(Half(0.0f), Half(123.0f))) == 0.0f);
  CHECK(f(silu_gate(Half(20.0f), Half(1.0f))) == doctest::Approx(20.0).epsilon(1e-3));
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(-10, 10);
  for (int i = 0; i < 10000; ++i) {
    const Half g(u(rng)), up(u(rng));
    const double gd = f(g), ud = f(up);
    REQUIRE(half_ulp_distance(silu_gate(g, up), to_half(gd / (1.0 + std::exp(-gd)) * ud)) <= 2);
  }
}

TEST_CASE("scale_logit divides by sqrt(head_dim)") {
  CHECK(f(scale_logit(Half(8.0f), 16)) == 2.0f);
  CHECK(f(scale_logit(Half(1.0f), 128)) == doctest::Approx(1.0 / std::sqrt(128.0)).epsilon(1e-3));
}
