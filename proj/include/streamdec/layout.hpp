// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "streamdec/errors.hpp"
#include "streamdec/numerics.hpp"
#include "streamdec/quant.hpp"

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace streamdec {

/// Memory bus seen by the accelerator: `ports` AXI ports of `port_bits`
/// concatenated into one `beat_bits` word per cycle.
struct BusGeometry {
  int beat_bits = 512;
  int ports = 4;
  int port_bits = 128;
  double freq_hz = 3.0e8;

  /// Throws ConfigError unless ports * port_bits == beat_bits and the beat
  /// is a positive multiple of 64 bits.
  void validate() const;

  int beat_bytes() const { return beat_bits / 8; }
  int codes_per_beat() const { return beat_bits / 4; }
  int zeros_per_beat() const { return beat_bits / 4; }
  int scales_per_beat() const { return beat_bits / 16; }
  int sz_packs_per_beat() const { return beat_bits / 32; }
  /// Dot-engine width: one dequantized weight beat per cycle.
  int lanes() const { return codes_per_beat(); }
  double bandwidth() const { return beat_bytes() * freq_hz; }

  DotEngineConfig dot_config() const { return {lanes(), AccumulationOrder::tree}; }

  /// Single-port bus of the given width (test helper).
  static BusGeometry single_port(int beat_bits, double freq_hz = 3.0e8) { return {beat_bits, 1, beat_bits, freq_hz}; }

  friend bool operator==(const BusGeometry&, const BusGeometry&) = default;
};

/// Weight rows are zero-padded to a multiple of lcm(group_size, lanes), so a
/// row always ends on both a group and a weight-beat boundary.
int padded_row_length(int cols, int group_size, const BusGeometry& geom);

/// Row-major grid of quantized groups for one weight tensor.
struct QuantMatrix {
  int rows = 0;
  int cols = 0;  // logical input length
  int group_size = 128;
  int groups_per_row = 0;
  std::vector<QuantGroup> groups;

  int padded_cols() const { return groups_per_row * group_size; }
  const QuantGroup& group(int row, int k) const {
    return groups[static_cast<std::size_t>(row) * static_cast<std::size_t>(groups_per_row) + static_cast<std::size_t>(k)];
  }
  /// Dequantized row including padding (length padded_cols()).
  HalfVector dequant_row(int row) const;

  friend bool operator==(const QuantMatrix&, const QuantMatrix&) = default;
};

/// Round-to-nearest quantization of a dense matrix, row by row. Padding
/// inside a group or whole padding groups quantize the value 0.
template <typename Derived>
QuantMatrix quantize_matrix(const Eigen::MatrixBase<Derived>& w, int group_size, const BusGeometry& geom) {
  QuantMatrix m;
  m.rows = static_cast<int>(w.rows());
  m.cols = static_cast<int>(w.cols());
  m.group_size = group_size;
  const int padded = padded_row_length(m.cols, group_size, geom);
  m.groups_per_row = padded / group_size;
  m.groups.reserve(static_cast<std::size_t>(m.rows) * static_cast<std::size_t>(m.groups_per_row));
  Eigen::VectorXd buf(group_size);
  for (int r = 0; r < m.rows; ++r) {
    for (int k = 0; k < m.groups_per_row; ++k) {
      for (int i = 0; i < group_size; ++i) {
        const int c = k * group_size + i;
        buf(i) = c < m.cols ? static_cast<double>(w(r, c)) : 0.0;
      }
      m.groups.push_back(quant_group_rtn(buf, group_size));
    }
  }
  return m;
}

enum class BeatKind : std::uint8_t { zero_points = 0, scales = 1, weights = 2 };

const char* to_string(BeatKind k);

/// Beat arithmetic of the interleaved stream. A super-block is one
/// zero-point beat followed by up to four (scale beat, weight beats) chunks;
/// the final super-block and its final chunk may be short.
class StreamLayout {
 public:
  StreamLayout(std::uint64_t n_groups, int group_size, const BusGeometry& geom);

  std::uint64_t n_groups() const { return n_groups_; }
  std::uint64_t n_beats() const;
  std::uint64_t groups_per_superblock() const { return zeros_per_beat_; }
  std::uint64_t groups_per_chunk() const { return scales_per_beat_; }
  std::uint64_t weight_beats_per_chunk() const { return scales_per_beat_ * group_size_ / codes_per_beat_; }
  std::uint64_t beats_per_superblock() const { return 1 + 4 * (1 + weight_beats_per_chunk()); }

  /// Beat holding code `code_index` of the flattened (row-major) tensor.
  std::uint64_t beat_of_code(std::uint64_t code_index) const;

  /// Enumerates the kind of every beat in stream order.
  std::vector<BeatKind> kinds() const;

 private:
  std::uint64_t superblock_beats(std::uint64_t groups) const;

  std::uint64_t n_groups_;
  std::uint64_t group_size_;
  std::uint64_t codes_per_beat_;
  std::uint64_t zeros_per_beat_;
  std::uint64_t scales_per_beat_;
};

/// Bus-width aligned weight stream of one tensor.
struct PackedWeightStream {
  int rows = 0;
  int cols = 0;
  int group_size = 128;
  int beat_bits = 512;
  std::vector<std::uint8_t> payload;  // n_beats * beat_bytes
  std::vector<BeatKind> kinds;

  int beat_bytes() const { return beat_bits / 8; }
  std::uint64_t n_beats() const { return kinds.size(); }
  std::span<const std::uint8_t> beat(std::uint64_t i) const {
    return {payload.data() + i * static_cast<std::uint64_t>(beat_bytes()), static_cast<std::size_t>(beat_bytes())};
  }
  BusGeometry geometry() const { return BusGeometry::single_port(beat_bits); }
  int groups_per_row() const { return padded_row_length(cols, group_size, geometry()) / group_size; }
  StreamLayout layout() const {
    return {static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(groups_per_row()), group_size, geometry()};
  }
};

/// Interleaves zero points, scales and codes in consumption order.
/// Throws ConfigError when the group size does not tile the beat geometry or
/// the matrix row padding disagrees with `geom`.
PackedWeightStream pack_tensor(const QuantMatrix& m, const BusGeometry& geom);

/// Exact inverse of pack_tensor. Throws FormatError naming the first beat
/// whose kind is out of pattern or whose padding bits are not zero.
QuantMatrix unpack_stream(const PackedWeightStream& s);

/// Sequential demultiplexer over a stream, as the memory-side logic sees
/// it: zero-point and scale beats are latched, each weight beat comes out
/// dequantized.
class StreamReader {
 public:
  explicit StreamReader(const PackedWeightStream& s);

  /// Consumes beats through the next weight beat and returns its
  /// dequantized codes (one lane block). Throws FormatError past the end.
  std::span<const Half> next_weight_beat();

  std::uint64_t position() const { return pos_; }
  bool done() const { return pos_ >= stream_->n_beats(); }

 private:
  const PackedWeightStream* stream_;
  StreamLayout layout_;
  std::uint64_t pos_ = 0;
  std::uint64_t code_index_ = 0;
  std::uint64_t sb_first_group_ = 0;
  std::uint64_t chunk_first_group_ = 0;
  std::vector<std::uint8_t> zeros_;
  std::vector<Half> scales_;
  std::vector<Half> lanes_;
};

// ---------------------------------------------------------------------------
// Container file
// ---------------------------------------------------------------------------

inline constexpr char kContainerMagic[4] = {'E', 'P', 'W', 'S'};
inline constexpr std::uint16_t kContainerVersion = 1;
inline constexpr std::size_t kContainerHeaderBytes = 4 + 2 + 5 * 4;

std::uint64_t payload_checksum(std::span<const std::uint8_t> payload);

void write_container(std::ostream& os, const PackedWeightStream& s);
PackedWeightStream read_container(std::istream& is);
void save_container(const std::string& path, const PackedWeightStream& s);
PackedWeightStream load_container(const std::string& path);

// ---------------------------------------------------------------------------
// KV scale-zero packing
// ---------------------------------------------------------------------------

/// 32-bit record: bits [0,16) scale, [16,24) zero, [24,32) pad (zero).
struct ScaleZeroPack {
  Half scale{0.0f};
  std::uint8_t zero = 0;

  std::uint32_t encode() const {
    return static_cast<std::uint32_t>(half_bits(scale)) | (static_cast<std::uint32_t>(zero) << 16);
  }
  /// Throws FormatError when the pad byte is not zero.
  static ScaleZeroPack decode(std::uint32_t word);

  static ScaleZeroPack from(const KvQuantParams& p) { return {p.scale, p.zero}; }
  KvQuantParams params() const { return {scale, zero}; }
};

/// Reads pack `slot` out of a flushed beat word.
ScaleZeroPack pack_at(std::span<const std::uint8_t> word, int slot);

/// Rotating FIFO of partially filled beat words, one per (layer, head, K|V)
/// stream. A push pops the front element, appends the pack and pushes the
/// element back; the element is flushed (returned) and cleared when its
/// last slot fills.
class SzFifo {
 public:
  SzFifo(std::size_t n_streams, int packs_per_element);

  std::optional<std::vector<std::uint8_t>> push(std::size_t stream_id, ScaleZeroPack pack);

  std::size_t n_streams() const { return queue_.size(); }
  int packs_per_element() const { return packs_per_element_; }
  int fill_count(std::size_t stream_id) const;
  /// Pack currently resident in `slot` of the stream's element.
  ScaleZeroPack resident(std::size_t stream_id, int slot) const;
  std::uint64_t resident_total() const;

 private:
  struct Element {
    std::size_t stream_id;
    int fill;
    std::vector<std::uint8_t> word;
  };
  const Element& find(std::size_t stream_id) const;

  int packs_per_element_;
  std::size_t beat_bytes_;
  std::deque<Element> queue_;
};

}  // namespace streamdec
