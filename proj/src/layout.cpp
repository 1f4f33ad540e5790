// SPDX-License-Identifier: Apache-2.0
#include "streamdec/layout.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>

namespace streamdec {

namespace {

void set_nibble(std::uint8_t* beat, std::uint64_t k, std::uint8_t v) {
  beat[k / 2] |= static_cast<std::uint8_t>((v & 0x0f) << (4 * (k & 1)));
}

std::uint8_t get_nibble(std::span<const std::uint8_t> beat, std::uint64_t k) {
  return static_cast<std::uint8_t>((beat[k / 2] >> (4 * (k & 1))) & 0x0f);
}

void put_u16(std::uint8_t* p, std::uint16_t v) {
  p[0] = static_cast<std::uint8_t>(v & 0xff);
  p[1] = static_cast<std::uint8_t>(v >> 8);
}

std::uint16_t get_u16(std::span<const std::uint8_t> p, std::size_t off) {
  return static_cast<std::uint16_t>(p[off] | (p[off + 1] << 8));
}

/// True when every nibble at index >= first_nibble is zero.
bool tail_is_zero(std::span<const std::uint8_t> beat, std::uint64_t first_nibble) {
  const std::uint64_t n_nibbles = beat.size() * 2;
  for (std::uint64_t k = first_nibble; k < n_nibbles; ++k)
    if (get_nibble(beat, k) != 0) return false;
  return true;
}

template <typename T>
void write_le(std::ostream& os, T v) {
  std::array<char, sizeof(T)> b{};
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  os.write(b.data(), b.size());
}

template <typename T>
T read_le(std::istream& is) {
  std::array<unsigned char, sizeof(T)> b{};
  is.read(reinterpret_cast<char*>(b.data()), b.size());
  if (!is) throw FormatError("container truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<T>(v);
}

void check_kinds(const PackedWeightStream& s, const StreamLayout& layout) {
  const auto expected = layout.kinds();
  const std::size_t common = std::min(expected.size(), s.kinds.size());
  for (std::size_t i = 0; i < common; ++i)
    if (expected[i] != s.kinds[i])
      throw FormatError(std::string("expected ") + to_string(expected[i]) + " beat, found " + to_string(s.kinds[i]),
                        static_cast<std::int64_t>(i));
  if (expected.size() != s.kinds.size())
    throw FormatError("stream has " + std::to_string(s.kinds.size()) + " beats, layout requires " +
                          std::to_string(expected.size()),
                      static_cast<std::int64_t>(common));
  if (s.payload.size() != s.kinds.size() * static_cast<std::size_t>(s.beat_bytes()))
    throw FormatError("payload size does not match beat count");
}

}  // namespace

void BusGeometry::validate() const {
  if (beat_bits <= 0 || beat_bits % 64 != 0) throw ConfigError("beat_bits must be a positive multiple of 64");
  if (ports <= 0 || port_bits <= 0 || ports * port_bits != beat_bits)
    throw ConfigError("ports * port_bits must equal beat_bits");
  if (!(freq_hz > 0.0)) throw ConfigError("bus frequency must be positive");
}

int padded_row_length(int cols, int group_size, const BusGeometry& geom) {
  if (group_size <= 0) throw ConfigError("group_size must be positive");
  const int stride = std::lcm(group_size, geom.lanes());
  return (cols + stride - 1) / stride * stride;
}

HalfVector QuantMatrix::dequant_row(int row) const {
  HalfVector out(padded_cols());
  for (int k = 0; k < groups_per_row; ++k) out.segment(k * group_size, group_size) = dequant_group(group(row, k));
  return out;
}

const char* to_string(BeatKind k) {
  switch (k) {
    case BeatKind::zero_points: return "ZP";
    case BeatKind::scales: return "SCALE";
    case BeatKind::weights: return "WEIGHT";
  }
  return "?";
}

StreamLayout::StreamLayout(std::uint64_t n_groups, int group_size, const BusGeometry& geom)
    : n_groups_(n_groups),
      group_size_(static_cast<std::uint64_t>(group_size)),
      codes_per_beat_(static_cast<std::uint64_t>(geom.codes_per_beat())),
      zeros_per_beat_(static_cast<std::uint64_t>(geom.zeros_per_beat())),
      scales_per_beat_(static_cast<std::uint64_t>(geom.scales_per_beat())) {
  geom.validate();
  if (group_size <= 0 || (scales_per_beat_ * group_size_) % codes_per_beat_ != 0)
    throw ConfigError("group_size * 16 must be a multiple of the weight-beat code capacity (group_size % 4 == 0)");
}

std::uint64_t StreamLayout::superblock_beats(std::uint64_t groups) const {
  std::uint64_t beats = 1;
  for (std::uint64_t c0 = 0; c0 < groups; c0 += scales_per_beat_) {
    const std::uint64_t n = std::min(scales_per_beat_, groups - c0);
    beats += 1 + (n * group_size_ + codes_per_beat_ - 1) / codes_per_beat_;
  }
  return beats;
}

std::uint64_t StreamLayout::n_beats() const {
  const std::uint64_t full = n_groups_ / zeros_per_beat_;
  const std::uint64_t rem = n_groups_ % zeros_per_beat_;
  return full * beats_per_superblock() + (rem ? superblock_beats(rem) : 0);
}

std::uint64_t StreamLayout::beat_of_code(std::uint64_t code_index) const {
  const std::uint64_t group = code_index / group_size_;
  const std::uint64_t sb = group / zeros_per_beat_;
  const std::uint64_t gi = group % zeros_per_beat_;
  const std::uint64_t chunk = gi / scales_per_beat_;
  const std::uint64_t ci = gi % scales_per_beat_;
  const std::uint64_t base = sb * beats_per_superblock() + 1 + chunk * (1 + weight_beats_per_chunk()) + 1;
  return base + (ci * group_size_ + code_index % group_size_) / codes_per_beat_;
}

std::vector<BeatKind> StreamLayout::kinds() const {
  std::vector<BeatKind> out;
  out.reserve(n_beats());
  for (std::uint64_t sb0 = 0; sb0 < n_groups_; sb0 += zeros_per_beat_) {
    const std::uint64_t sb_n = std::min(zeros_per_beat_, n_groups_ - sb0);
    out.push_back(BeatKind::zero_points);
    for (std::uint64_t c0 = 0; c0 < sb_n; c0 += scales_per_beat_) {
      const std::uint64_t n = std::min(scales_per_beat_, sb_n - c0);
      out.push_back(BeatKind::scales);
      out.insert(out.end(), (n * group_size_ + codes_per_beat_ - 1) / codes_per_beat_, BeatKind::weights);
    }
  }
  return out;
}

PackedWeightStream pack_tensor(const QuantMatrix& m, const BusGeometry& geom) {
  geom.validate();
  if (m.group_size <= 0) throw ConfigError("group_size must be positive");
  if (m.groups_per_row * m.group_size != padded_row_length(m.cols, m.group_size, geom))
    throw ConfigError("row padding of the quantized matrix does not match the beat geometry");
  if (m.groups.size() != static_cast<std::size_t>(m.rows) * static_cast<std::size_t>(m.groups_per_row))
    throw ShapeError("quantized matrix group count does not match its shape");

  const StreamLayout layout(m.groups.size(), m.group_size, geom);
  PackedWeightStream s;
  s.rows = m.rows;
  s.cols = m.cols;
  s.group_size = m.group_size;
  s.beat_bits = geom.beat_bits;
  const auto bb = static_cast<std::size_t>(geom.beat_bytes());
  s.kinds.reserve(layout.n_beats());
  s.payload.reserve(layout.n_beats() * bb);

  auto new_beat = [&](BeatKind k) {
    s.kinds.push_back(k);
    s.payload.resize(s.payload.size() + bb, 0);
    return s.payload.size() - bb;
  };

  const std::uint64_t G = m.groups.size();
  const auto g = static_cast<std::uint64_t>(m.group_size);
  const auto Z = layout.groups_per_superblock();
  const auto S = layout.groups_per_chunk();
  const auto cpb = static_cast<std::uint64_t>(geom.codes_per_beat());
  for (std::uint64_t sb0 = 0; sb0 < G; sb0 += Z) {
    const std::uint64_t sb_n = std::min(Z, G - sb0);
    const std::size_t zp = new_beat(BeatKind::zero_points);
    for (std::uint64_t i = 0; i < sb_n; ++i) {
      const auto& grp = m.groups[sb0 + i];
      if (grp.zero > 15) throw ConfigError("zero point out of 4-bit range");
      set_nibble(s.payload.data() + zp, i, grp.zero);
    }
    for (std::uint64_t c0 = 0; c0 < sb_n; c0 += S) {
      const std::uint64_t n = std::min(S, sb_n - c0);
      const std::size_t sc = new_beat(BeatKind::scales);
      for (std::uint64_t i = 0; i < n; ++i) put_u16(s.payload.data() + sc + 2 * i, half_bits(m.groups[sb0 + c0 + i].scale));
      std::size_t wb = 0;
      for (std::uint64_t k = 0; k < n * g; ++k) {
        if (k % cpb == 0) wb = new_beat(BeatKind::weights);
        const auto& grp = m.groups[sb0 + c0 + k / g];
        if (grp.codes.size() != g) throw ShapeError("quant group has the wrong number of codes");
        const std::uint8_t code = grp.codes[k % g];
        if (code > 15) throw ConfigError("weight code out of 4-bit range");
        set_nibble(s.payload.data() + wb, k % cpb, code);
      }
    }
  }
  return s;
}

QuantMatrix unpack_stream(const PackedWeightStream& s) {
  const BusGeometry geom = s.geometry();
  const StreamLayout layout = s.layout();
  check_kinds(s, layout);

  QuantMatrix m;
  m.rows = s.rows;
  m.cols = s.cols;
  m.group_size = s.group_size;
  m.groups_per_row = s.groups_per_row();
  const std::uint64_t G = layout.n_groups();
  const auto g = static_cast<std::uint64_t>(s.group_size);
  const auto Z = layout.groups_per_superblock();
  const auto S = layout.groups_per_chunk();
  const auto cpb = static_cast<std::uint64_t>(geom.codes_per_beat());
  m.groups.resize(G);
  for (auto& grp : m.groups) grp.codes.resize(g);

  std::uint64_t b = 0;
  for (std::uint64_t sb0 = 0; sb0 < G; sb0 += Z) {
    const std::uint64_t sb_n = std::min(Z, G - sb0);
    const auto zp = s.beat(b);
    for (std::uint64_t i = 0; i < sb_n; ++i) m.groups[sb0 + i].zero = get_nibble(zp, i);
    if (!tail_is_zero(zp, sb_n)) throw FormatError("zero-point beat padding is not zero", static_cast<std::int64_t>(b));
    ++b;
    for (std::uint64_t c0 = 0; c0 < sb_n; c0 += S) {
      const std::uint64_t n = std::min(S, sb_n - c0);
      const auto sc = s.beat(b);
      for (std::uint64_t i = 0; i < n; ++i) m.groups[sb0 + c0 + i].scale = half_from_bits(get_u16(sc, 2 * i));
      if (!tail_is_zero(sc, 4 * n)) throw FormatError("scale beat padding is not zero", static_cast<std::int64_t>(b));
      ++b;
      const std::uint64_t n_codes = n * g;
      for (std::uint64_t k0 = 0; k0 < n_codes; k0 += cpb, ++b) {
        const auto wb = s.beat(b);
        const std::uint64_t used = std::min(cpb, n_codes - k0);
        for (std::uint64_t k = 0; k < used; ++k) {
          const std::uint64_t idx = k0 + k;
          m.groups[sb0 + c0 + idx / g].codes[idx % g] = get_nibble(wb, k);
        }
        if (!tail_is_zero(wb, used)) throw FormatError("weight beat padding is not zero", static_cast<std::int64_t>(b));
      }
    }
  }
  return m;
}

StreamReader::StreamReader(const PackedWeightStream& s) : stream_(&s), layout_(s.layout()) {
  check_kinds(s, layout_);
  const BusGeometry geom = s.geometry();
  zeros_.assign(static_cast<std::size_t>(geom.zeros_per_beat()), 0);
  scales_.assign(static_cast<std::size_t>(geom.scales_per_beat()), Half(0.0f));
  lanes_.assign(static_cast<std::size_t>(geom.codes_per_beat()), Half(0.0f));
}

std::span<const Half> StreamReader::next_weight_beat() {
  const auto g = static_cast<std::uint64_t>(stream_->group_size);
  const std::uint64_t total_groups = layout_.n_groups();
  while (true) {
    if (pos_ >= stream_->n_beats()) throw FormatError("weight stream exhausted", static_cast<std::int64_t>(pos_));
    const auto beat = stream_->beat(pos_);
    const BeatKind kind = stream_->kinds[pos_];
    ++pos_;
    switch (kind) {
      case BeatKind::zero_points:
        sb_first_group_ = code_index_ / g;
        for (std::size_t i = 0; i < zeros_.size(); ++i) zeros_[i] = get_nibble(beat, i);
        break;
      case BeatKind::scales:
        chunk_first_group_ = code_index_ / g;
        for (std::size_t i = 0; i < scales_.size(); ++i) scales_[i] = half_from_bits(get_u16(beat, 2 * i));
        break;
      case BeatKind::weights:
        for (std::size_t k = 0; k < lanes_.size(); ++k) {
          const std::uint64_t group = (code_index_ + k) / g;
          if (group >= total_groups) {
            lanes_[k] = Half(0.0f);
            continue;
          }
          const int zero = zeros_[group - sb_first_group_];
          const float scale = static_cast<float>(scales_[group - chunk_first_group_]);
          lanes_[k] = Half(static_cast<float>(static_cast<int>(get_nibble(beat, k)) - zero) * scale);
        }
        code_index_ += lanes_.size();
        return lanes_;
    }
  }
}

std::uint64_t payload_checksum(std::span<const std::uint8_t> payload) {
  std::uint64_t sum = 0;
  for (std::uint8_t b : payload) sum += b;
  return sum;
}

void write_container(std::ostream& os, const PackedWeightStream& s) {
  os.write(kContainerMagic, 4);
  write_le<std::uint16_t>(os, kContainerVersion);
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.group_size));
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.beat_bits));
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.rows));
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.cols));
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.n_beats()));
  os.write(reinterpret_cast<const char*>(s.payload.data()), static_cast<std::streamsize>(s.payload.size()));
  write_le<std::uint64_t>(os, payload_checksum(s.payload));
  if (!os) throw IoError("failed writing container");
}

PackedWeightStream read_container(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || !std::equal(magic.begin(), magic.end(), kContainerMagic)) throw FormatError("bad container magic");
  const auto version = read_le<std::uint16_t>(is);
  if (version != kContainerVersion) throw FormatError("unsupported container version " + std::to_string(version));

  PackedWeightStream s;
  s.group_size = static_cast<int>(read_le<std::uint32_t>(is));
  s.beat_bits = static_cast<int>(read_le<std::uint32_t>(is));
  s.rows = static_cast<int>(read_le<std::uint32_t>(is));
  s.cols = static_cast<int>(read_le<std::uint32_t>(is));
  const auto n_beats = read_le<std::uint32_t>(is);
  try {
    s.geometry().validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("container geometry: ") + e.what());
  }
  const StreamLayout layout = s.layout();
  if (layout.n_beats() != n_beats)
    throw FormatError("header beat count " + std::to_string(n_beats) + " does not match shape (" +
                      std::to_string(layout.n_beats()) + ")");
  s.kinds = layout.kinds();
  s.payload.resize(static_cast<std::size_t>(n_beats) * static_cast<std::size_t>(s.beat_bytes()));
  is.read(reinterpret_cast<char*>(s.payload.data()), static_cast<std::streamsize>(s.payload.size()));
  if (!is) throw FormatError("container payload truncated");
  const auto checksum = read_le<std::uint64_t>(is);
  if (checksum != payload_checksum(s.payload)) throw FormatError("container checksum mismatch");
  (void)unpack_stream(s);  // padding validation
  return s;
}

void save_container(const std::string& path, const PackedWeightStream& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_container(os, s);
}

PackedWeightStream load_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_container(is);
}

ScaleZeroPack ScaleZeroPack::decode(std::uint32_t word) {
  if ((word >> 24) != 0) throw FormatError("scale-zero pack pad byte is not zero");
  return {half_from_bits(static_cast<std::uint16_t>(word & 0xffff)), static_cast<std::uint8_t>((word >> 16) & 0xff)};
}

ScaleZeroPack pack_at(std::span<const std::uint8_t> word, int slot) {
  const auto off = static_cast<std::size_t>(slot) * 4;
  if (off + 4 > word.size()) throw IndexError("scale-zero slot out of range");
  const std::uint32_t v = static_cast<std::uint32_t>(word[off]) | (static_cast<std::uint32_t>(word[off + 1]) << 8) |
                          (static_cast<std::uint32_t>(word[off + 2]) << 16) |
                          (static_cast<std::uint32_t>(word[off + 3]) << 24);
  return ScaleZeroPack::decode(v);
}

SzFifo::SzFifo(std::size_t n_streams, int packs_per_element)
    : packs_per_element_(packs_per_element), beat_bytes_(static_cast<std::size_t>(packs_per_element) * 4) {
  if (packs_per_element <= 0) throw ConfigError("packs_per_element must be positive");
  for (std::size_t i = 0; i < n_streams; ++i) queue_.push_back({i, 0, std::vector<std::uint8_t>(beat_bytes_, 0)});
}

std::optional<std::vector<std::uint8_t>> SzFifo::push(std::size_t stream_id, ScaleZeroPack pack) {
  if (stream_id >= queue_.size()) throw IndexError("unknown scale-zero stream " + std::to_string(stream_id));
  while (true) {
    Element e = std::move(queue_.front());
    queue_.pop_front();
    if (e.stream_id != stream_id) {
      queue_.push_back(std::move(e));
      continue;
    }
    const std::uint32_t bits = pack.encode();
    const auto off = static_cast<std::size_t>(e.fill) * 4;
    for (int i = 0; i < 4; ++i) e.word[off + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>((bits >> (8 * i)) & 0xff);
    ++e.fill;
    std::optional<std::vector<std::uint8_t>> flushed;
    if (e.fill == packs_per_element_) {
      flushed = e.word;
      std::fill(e.word.begin(), e.word.end(), 0);
      e.fill = 0;
    }
    queue_.push_back(std::move(e));
    return flushed;
  }
}

const SzFifo::Element& SzFifo::find(std::size_t stream_id) const {
  for (const auto& e : queue_)
    if (e.stream_id == stream_id) return e;
  throw IndexError("unknown scale-zero stream " + std::to_string(stream_id));
}

int SzFifo::fill_count(std::size_t stream_id) const { return find(stream_id).fill; }

ScaleZeroPack SzFifo::resident(std::size_t stream_id, int slot) const {
  const Element& e = find(stream_id);
  if (slot < 0 || slot >= e.fill) throw IndexError("scale-zero slot not resident");
  return pack_at(e.word, slot);
}

std::uint64_t SzFifo::resident_total() const {
  std::uint64_t n = 0;
  for (const auto& e : queue_) n += static_cast<std::uint64_t>(e.fill);
  return n;
}

}  // namespace streamdec
