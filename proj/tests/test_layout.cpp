// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "streamdec/layout.hpp"

#include <deque>
#include <random>
#include <sstream>

using namespace streamdec;

namespace {

const BusGeometry k256 = BusGeometry::single_port(256);
const BusGeometry k512{};

QuantMatrix random_matrix(std::mt19937_64& rng, int rows, int cols, int g, const BusGeometry& geom) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Eigen::MatrixXf w(rows, cols);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
  return quantize_matrix(w, g, geom);
}

std::vector<BeatKind> expected_superblock(int chunks, int weight_beats) {
  std::vector<BeatKind> k{BeatKind::zero_points};
  for (int c = 0; c < chunks; ++c) {
    k.push_back(BeatKind::scales);
    k.insert(k.end(), static_cast<std::size_t>(weight_beats), BeatKind::weights);
  }
  return k;
}

}  // namespace

TEST_CASE("bus geometry") {
  CHECK(k512.bandwidth() == doctest::Approx(19.2e9));
  CHECK(k512.lanes() == 128);
  CHECK(k512.scales_per_beat() == 32);
  CHECK(k512.sz_packs_per_beat() == 16);
  CHECK_NOTHROW(k512.validate());
  CHECK_THROWS_AS((BusGeometry{512, 4, 64, 3e8}.validate()), ConfigError);
  CHECK_THROWS_AS((BusGeometry{96, 1, 96, 3e8}.validate()), ConfigError);
  CHECK(padded_row_length(172, 128, k512) == 256);
  CHECK(padded_row_length(64, 32, BusGeometry::single_port(512)) == 128);
}

TEST_CASE("8192 weights at 256-bit beats: one 133-beat super-block") {
  std::mt19937_64 rng(1);
  const PackedWeightStream s = pack_tensor(random_matrix(rng, 64, 128, 128, k256), k256);
  CHECK(s.n_beats() == 133);
  CHECK(s.kinds == expected_superblock(4, 32));
  CHECK(s.payload.size() == 133 * 32);
}

TEST_CASE("16384 weights at 512-bit beats: the same 133-beat law") {
  std::mt19937_64 rng(2);
  const PackedWeightStream s = pack_tensor(random_matrix(rng, 128, 128, 128, k512), k512);
  CHECK(s.n_beats() == 133);
  CHECK(s.kinds == expected_superblock(4, 32));
  CHECK(s.layout().beats_per_superblock() == 133);
}

TEST_CASE("2048 weights: one partial super-block with a 75% padded zero-point beat") {
  std::mt19937_64 rng(3);
  const PackedWeightStream s = pack_tensor(random_matrix(rng, 16, 128, 128, k256), k256);
  CHECK(s.kinds == expected_superblock(1, 32));
  const auto zp = s.beat(0);
  // 16 zero points in 8 bytes, the remaining 24 bytes pad.
  for (std::size_t i = 8; i < zp.size(); ++i) CHECK(zp[i] == 0);
}

TEST_CASE("empty tensor packs to an empty stream") {
  QuantMatrix m;
  m.rows = 0;
  m.cols = 128;
  m.group_size = 128;
  m.groups_per_row = 1;
  const PackedWeightStream s = pack_tensor(m, k256);
  CHECK(s.n_beats() == 0);
  CHECK(unpack_stream(s) == m);
}

TEST_CASE("nibble and scale byte order") {
  QuantMatrix m;
  m.rows = 1;
  m.cols = 128;
  m.group_size = 128;
  m.groups_per_row = 1;
  QuantGroup g;
  for (int i = 0; i < 128; ++i) g.codes.push_back(static_cast<std::uint8_t>(i % 16));
  g.zero = 0xA;
  g.scale = half_from_bits(0x3C01);
  m.groups.push_back(g);
  const PackedWeightStream s = pack_tensor(m, k256);
  CHECK(s.beat(0)[0] == 0x0A);          // zero point of group 0 in the low nibble
  CHECK(s.beat(1)[0] == 0x01);          // scale, little-endian
  CHECK(s.beat(1)[1] == 0x3C);
  CHECK(s.beat(2)[0] == 0x10);          // codes 0, 1
  CHECK(s.beat(2)[1] == 0x32);          // codes 2, 3
}

TEST_CASE("beat count formula against enumeration") {
  for (int g : {32, 128}) {
    const std::uint64_t cg = static_cast<std::uint64_t>(g);
    const std::uint64_t chunk_w = 16 * cg / 64;  // weight beats of a full 16-group chunk at 256 bits
    for (std::uint64_t n = 0; n <= (1u << 20); n += static_cast<std::uint64_t>(g)) {
      const std::uint64_t groups = n / static_cast<std::uint64_t>(g);
      const std::uint64_t full = groups / 64, rem = groups % 64;
      const std::uint64_t formula =
          full * (1 + 4 * (1 + chunk_w)) + (rem ? 1 + (rem + 15) / 16 + rem / 16 * chunk_w + (rem % 16 * cg + 63) / 64 : 0);
      const StreamLayout lay(groups, g, k256);
      REQUIRE(lay.n_beats() == formula);
      if (n % 65536 == 0 || groups < 70) REQUIRE(lay.kinds().size() == formula);
    }
  }
}

TEST_CASE("beat_of_code lands on a weight beat holding that code") {
  const StreamLayout lay(200, 128, k256);
  const auto kinds = lay.kinds();
  CHECK(lay.beat_of_code(0) == 2);
  CHECK(lay.beat_of_code(63) == 2);
  CHECK(lay.beat_of_code(64) == 3);
  CHECK(lay.beat_of_code(16 * 128) == 35);  // second chunk starts after a scale beat
  for (std::uint64_t c = 0; c < 200 * 128; c += 97) REQUIRE(kinds[lay.beat_of_code(c)] == BeatKind::weights);
}

TEST_CASE("pack/unpack round trip on random shapes") {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> dim(1, 300);
  for (int trial = 0; trial < 300; ++trial) {
    const BusGeometry& geom = trial % 2 ? k512 : k256;
    const int g = trial % 3 == 0 ? 64 : 128;
    const QuantMatrix m = random_matrix(rng, dim(rng), dim(rng), g, geom);
    REQUIRE(unpack_stream(pack_tensor(m, geom)) == m);
  }
}

TEST_CASE("unpack rejects a flipped kind and dirty padding with the beat index") {
  std::mt19937_64 rng(4);
  const PackedWeightStream good = pack_tensor(random_matrix(rng, 16, 128, 128, k256), k256);

  PackedWeightStream flipped = good;
  flipped.kinds[7] = BeatKind::scales;
  try {
    unpack_stream(flipped);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.beat_index() == 7);
  }

  PackedWeightStream dirty = good;
  dirty.payload[31] = 0x40;  // zero-point beat padding
  try {
    unpack_stream(dirty);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.beat_index() == 0);
  }
}

TEST_CASE("all-zero payload unpacks to all-zero groups") {
  std::mt19937_64 rng(5);
  PackedWeightStream s = pack_tensor(random_matrix(rng, 40, 256, 128, k256), k256);
  std::fill(s.payload.begin(), s.payload.end(), std::uint8_t{0});
  const QuantMatrix m = unpack_stream(s);
  for (const auto& g : m.groups) {
    REQUIRE(g.zero == 0);
    REQUIRE(half_bits(g.scale) == 0);
    for (auto c : g.codes) REQUIRE(c == 0);
  }
}

TEST_CASE("StreamReader yields the dequantized rows beat by beat") {
  std::mt19937_64 rng(6);
  const QuantMatrix m = random_matrix(rng, 21, 300, 128, k256);
  const PackedWeightStream s = pack_tensor(m, k256);
  StreamReader rd(s);
  for (int r = 0; r < m.rows; ++r) {
    const HalfVector row = m.dequant_row(r);
    for (int b = 0; b < m.padded_cols() / 64; ++b) {
      const auto beat = rd.next_weight_beat();
      REQUIRE(beat.size() == 64);
      for (int i = 0; i < 64; ++i) REQUIRE(half_bits(beat[static_cast<std::size_t>(i)]) == half_bits(row(b * 64 + i)));
    }
  }
  CHECK(rd.done());
  CHECK_THROWS_AS(rd.next_weight_beat(), FormatError);
}

TEST_CASE("container round trip and corruption detection") {
  std::mt19937_64 rng(7);
  const PackedWeightStream s = pack_tensor(random_matrix(rng, 33, 172, 128, k512), k512);
  std::stringstream ss;
  write_container(ss, s);
  const std::string bytes = ss.str();
  CHECK(bytes.size() == kContainerHeaderBytes + s.payload.size() + 8);
  CHECK(bytes.substr(0, 4) == "EPWS");
  {
    std::istringstream is(bytes);
    const PackedWeightStream back = read_container(is);
    CHECK(back.payload == s.payload);
    CHECK(back.kinds == s.kinds);
    CHECK(unpack_stream(back) == unpack_stream(s));
  }
  auto expect_format_error = [](std::string b) {
    std::istringstream is(b);
    CHECK_THROWS_AS(read_container(is), FormatError);
  };
  std::string bad = bytes;
  bad[0] = 'X';
  expect_format_error(bad);
  bad = bytes;
  bad[kContainerHeaderBytes + 5] ^= 1;
  expect_format_error(bad);
  expect_format_error(bytes.substr(0, bytes.size() - 3));
  bad = bytes;
  bad[4] = 2;  // version
  expect_format_error(bad);
}

TEST_CASE("scale-zero pack encoding") {
  const ScaleZeroPack p{half_from_bits(0x3555), 0xAB};
  CHECK(p.encode() == 0x00AB3555u);
  const ScaleZeroPack q = ScaleZeroPack::decode(0x00AB3555u);
  CHECK(half_bits(q.scale) == 0x3555);
  CHECK(q.zero == 0xAB);
  CHECK_THROWS_AS(ScaleZeroPack::decode(0x01AB3555u), FormatError);
}

TEST_CASE("SzFifo: 16th push flushes a word of 16 ordered packs") {
  SzFifo f(4, k512.sz_packs_per_beat());
  CHECK(f.packs_per_element() == 16);
  for (int t = 0; t < 15; ++t) REQUIRE_FALSE(f.push(2, {Half(static_cast<float>(t)), static_cast<std::uint8_t>(t)}).has_value());
  CHECK(f.fill_count(2) == 15);
  const auto w = f.push(2, {Half(15.0f), 15});
  REQUIRE(w.has_value());
  CHECK(w->size() == 64);
  for (int t = 0; t < 16; ++t) {
    const ScaleZeroPack p = pack_at(*w, t);
    CHECK(static_cast<float>(p.scale) == static_cast<float>(t));
    CHECK(p.zero == t);
    CHECK((*w)[static_cast<std::size_t>(4 * t + 3)] == 0);
  }
  CHECK(f.fill_count(2) == 0);
  CHECK_THROWS_AS(f.push(4, {}), IndexError);
}

TEST_CASE("SzFifo matches a per-stream queue oracle under interleaved pushes") {
  std::mt19937_64 rng(12);
  for (int ppe : {2, 4, 16}) {
    SzFifo f(4, ppe);
    std::vector<std::vector<ScaleZeroPack>> oracle(4);
    std::uint64_t pushed = 0, flushed = 0;
    for (int step = 0; step < 2000; ++step) {
      const std::size_t id = rng() % 4;
      const ScaleZeroPack p{half_from_bits(static_cast<std::uint16_t>(rng() & 0x7BFF)), static_cast<std::uint8_t>(rng())};
      oracle[id].push_back(p);
      ++pushed;
      const auto w = f.push(id, p);
      if (oracle[id].size() == static_cast<std::size_t>(ppe)) {
        REQUIRE(w.has_value());
        for (int k = 0; k < ppe; ++k) REQUIRE(pack_at(*w, k).encode() == oracle[id][static_cast<std::size_t>(k)].encode());
        oracle[id].clear();
        flushed += static_cast<std::uint64_t>(ppe);
      } else {
        REQUIRE_FALSE(w.has_value());
      }
      REQUIRE(flushed + f.resident_total() == pushed);
    }
  }
}
