// SPDX-License-Identifier: Apache-2.0
#include "streamdec/model.hpp"

#include "json.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

namespace streamdec {

namespace {

using json = nlohmann::json;

/// Uniform double in [0, 1) from the top 53 bits; portable across standard
/// libraries, unlike std::uniform_real_distribution.
double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * unit(rng); }
int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

Eigen::MatrixXf random_matrix(std::mt19937_64& rng, int rows, int cols, double amp) {
  Eigen::MatrixXf m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = static_cast<float>(uniform(rng, -amp, amp));
  return m;
}

Eigen::VectorXf random_gain(std::mt19937_64& rng, int n) {
  Eigen::VectorXf v(n);
  for (int i = 0; i < n; ++i) v(i) = static_cast<float>(uniform(rng, 0.75, 1.25));
  return v;
}

HalfVector to_half_vector(const Eigen::VectorXf& v) {
  HalfVector out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) out(i) = Half(v(i));
  return out;
}

HalfMatrix to_half_matrix(const Eigen::MatrixXf& m) {
  HalfMatrix out(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out(r, c) = Half(m(r, c));
  return out;
}

Eigen::MatrixXf to_float_matrix(const HalfMatrix& m) {
  Eigen::MatrixXf out(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out(r, c) = static_cast<float>(m(r, c));
  return out;
}

Eigen::MatrixXf to_float_column(const HalfVector& v) {
  Eigen::MatrixXf out(v.size(), 1);
  for (Eigen::Index i = 0; i < v.size(); ++i) out(i, 0) = static_cast<float>(v(i));
  return out;
}

/// Q, K and V rows of each head, contiguous per head.
Eigen::MatrixXf head_major_qkv(const DenseLayer& l, int n_heads, int head_dim) {
  const int d = static_cast<int>(l.wq.cols());
  Eigen::MatrixXf out(3 * n_heads * head_dim, d);
  for (int h = 0; h < n_heads; ++h) {
    const int base = 3 * h * head_dim;
    out.middleRows(base, head_dim) = l.wq.middleRows(h * head_dim, head_dim);
    out.middleRows(base + head_dim, head_dim) = l.wk.middleRows(h * head_dim, head_dim);
    out.middleRows(base + 2 * head_dim, head_dim) = l.wv.middleRows(h * head_dim, head_dim);
  }
  return out;
}

Eigen::MatrixXf interleave_rows(const Eigen::MatrixXf& a, const Eigen::MatrixXf& b) {
  Eigen::MatrixXf out(2 * a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    out.row(2 * r) = a.row(r);
    out.row(2 * r + 1) = b.row(r);
  }
  return out;
}

std::string layer_name(int layer, const char* tensor) { return "layers." + std::to_string(layer) + "." + tensor; }

const char* rope_table_name(RopeTable t) { return t == RopeTable::wide_span ? "wide_span" : "standard"; }

}  // namespace

// ---------------------------------------------------------------------------
// ModelConfig
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  bus.validate();
  if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || head_dim <= 0 || d_ffn <= 0 || vocab_size <= 0)
    throw ConfigError("model dimensions must be positive");
  if (d_model != n_heads * head_dim) throw ConfigError("d_model must equal n_heads * head_dim");
  if (head_dim % 2 != 0) throw ConfigError("head_dim must be even");
  if (group_size <= 0 || group_size % 4 != 0) throw ConfigError("group_size must be a positive multiple of 4");
  if (max_context <= 0) throw ConfigError("max_context must be positive");
  if (!(rms_eps >= 0.0) || !std::isfinite(rms_eps)) throw ConfigError("rms_eps must be finite and non-negative");
  if (!(rope_base > 0.0)) throw ConfigError("rope_base must be positive");
  if (rope_table == RopeTable::wide_span && head_dim / 2 > 2048) throw ConfigError("head_dim too large for wide table");
}

std::uint64_t ModelConfig::params_per_layer() const {
  const auto d = static_cast<std::uint64_t>(d_model);
  const auto f = static_cast<std::uint64_t>(d_ffn);
  return 4 * d * d + 3 * d * f + 2 * d;
}

std::uint64_t ModelConfig::params_non_embedding() const {
  const auto d = static_cast<std::uint64_t>(d_model);
  return static_cast<std::uint64_t>(n_layers) * params_per_layer() + d + static_cast<std::uint64_t>(vocab_size) * d;
}

std::uint64_t ModelConfig::params_total() const {
  return params_non_embedding() + static_cast<std::uint64_t>(vocab_size) * static_cast<std::uint64_t>(d_model);
}

TrigTable ModelConfig::trig_table() const {
  return rope_table == RopeTable::wide_span ? TrigTable::wide_span(rope_base) : TrigTable::standard(head_dim, rope_base);
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.bus = BusGeometry::single_port(64);
  return c;
}

ModelConfig ModelConfig::llama2_7b() {
  ModelConfig c;
  c.n_layers = 32;
  c.d_model = 4096;
  c.n_heads = 32;
  c.head_dim = 128;
  c.d_ffn = 11008;
  c.vocab_size = 32000;
  c.group_size = 128;
  c.max_context = 1024;
  c.bus = BusGeometry{};
  return c;
}

std::string model_config_to_json(const ModelConfig& c) {
  json j = {{"n_layers", c.n_layers},
            {"d_model", c.d_model},
            {"n_heads", c.n_heads},
            {"head_dim", c.head_dim},
            {"d_ffn", c.d_ffn},
            {"vocab_size", c.vocab_size},
            {"group_size", c.group_size},
            {"max_context", c.max_context},
            {"rms_eps", c.rms_eps},
            {"rope_base", c.rope_base},
            {"rope_table", rope_table_name(c.rope_table)},
            {"bus",
             {{"beat_bits", c.bus.beat_bits},
              {"ports", c.bus.ports},
              {"port_bits", c.bus.port_bits},
              {"freq_hz", c.bus.freq_hz}}}};
  return j.dump(2);
}

ModelConfig model_config_from_json(const std::string& text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.head_dim = j.value("head_dim", c.n_heads > 0 ? c.d_model / c.n_heads : 0);
    c.d_ffn = j.at("d_ffn").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.group_size = j.value("group_size", 128);
    c.max_context = j.at("max_context").get<int>();
    c.rms_eps = j.value("rms_eps", 1e-5);
    c.rope_base = j.value("rope_base", 10000.0);
    const std::string table = j.value("rope_table", std::string("standard"));
    if (table == "standard")
      c.rope_table = RopeTable::standard;
    else if (table == "wide_span")
      c.rope_table = RopeTable::wide_span;
    else
      throw ConfigError("unknown rope_table '" + table + "'");
    if (j.contains("bus")) {
      const json& b = j.at("bus");
      c.bus.beat_bits = b.value("beat_bits", 512);
      c.bus.ports = b.value("ports", 1);
      c.bus.port_bits = b.value("port_bits", c.bus.beat_bits / c.bus.ports);
      c.bus.freq_hz = b.value("freq_hz", 3.0e8);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

ModelConfig load_model_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return model_config_from_json(ss.str());
}

void save_model_config(const std::string& path, const ModelConfig& cfg) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << model_config_to_json(cfg) << "\n";
}

std::vector<StreamTensor> stream_tensors(const ModelConfig& cfg) {
  std::vector<StreamTensor> out;
  for (int l = 0; l < cfg.n_layers; ++l) {
    out.push_back({layer_name(l, "wqkv"), l, 3 * cfg.d_model, cfg.d_model});
    out.push_back({layer_name(l, "wo"), l, cfg.d_model, cfg.d_model});
    out.push_back({layer_name(l, "w_gate_up"), l, 2 * cfg.d_ffn, cfg.d_model});
    out.push_back({layer_name(l, "w_down"), l, cfg.d_model, cfg.d_ffn});
  }
  out.push_back({"lm_head", -1, cfg.vocab_size, cfg.d_model});
  return out;
}

std::uint64_t stream_beats(const StreamTensor& t, const ModelConfig& cfg) {
  const int gpr = padded_row_length(t.cols, cfg.group_size, cfg.bus) / cfg.group_size;
  return StreamLayout(static_cast<std::uint64_t>(t.rows) * static_cast<std::uint64_t>(gpr), cfg.group_size, cfg.bus)
      .n_beats();
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

DenseWeights random_weights(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const int d = cfg.d_model;
  const int f = cfg.d_ffn;
  const double a_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double a_f = 1.0 / std::sqrt(static_cast<double>(f));
  DenseWeights w;
  w.embedding = random_matrix(rng, cfg.vocab_size, d, 1.0);
  for (int l = 0; l < cfg.n_layers; ++l) {
    DenseLayer L;
    L.wq = random_matrix(rng, d, d, a_d);
    L.wk = random_matrix(rng, d, d, a_d);
    L.wv = random_matrix(rng, d, d, a_d);
    L.wo = random_matrix(rng, d, d, a_d);
    L.w_gate = random_matrix(rng, f, d, a_d);
    L.w_up = random_matrix(rng, f, d, a_d);
    L.w_down = random_matrix(rng, d, f, a_f);
    L.attn_norm = random_gain(rng, d);
    L.mlp_norm = random_gain(rng, d);
    w.layers.push_back(std::move(L));
  }
  w.final_norm = random_gain(rng, d);
  w.lm_head = random_matrix(rng, cfg.vocab_size, d, a_d);
  return w;
}

QuantModel quantize_model(const DenseWeights& w, const ModelConfig& cfg) {
  Checkpoint ck = checkpoint_from_dense(w);
  return model_from_checkpoint(ck, cfg);
}

PackedModel pack_model(const QuantModel& m) {
  PackedModel p;
  p.cfg = m.cfg;
  p.embedding = m.embedding;
  p.final_norm = m.final_norm;
  for (const auto& L : m.layers) {
    PackedLayer P;
    P.wqkv = pack_tensor(L.wqkv, m.cfg.bus);
    P.wo = pack_tensor(L.wo, m.cfg.bus);
    P.w_gate_up = pack_tensor(L.w_gate_up, m.cfg.bus);
    P.w_down = pack_tensor(L.w_down, m.cfg.bus);
    P.attn_norm = L.attn_norm;
    P.mlp_norm = L.mlp_norm;
    p.layers.push_back(std::move(P));
  }
  p.lm_head = pack_tensor(m.lm_head, m.cfg.bus);
  return p;
}

QuantModel unpack_model(const PackedModel& p) {
  QuantModel m;
  m.cfg = p.cfg;
  m.embedding = p.embedding;
  m.final_norm = p.final_norm;
  for (const auto& P : p.layers) {
    QuantLayer L;
    L.wqkv = unpack_stream(P.wqkv);
    L.wo = unpack_stream(P.wo);
    L.w_gate_up = unpack_stream(P.w_gate_up);
    L.w_down = unpack_stream(P.w_down);
    L.attn_norm = P.attn_norm;
    L.mlp_norm = P.mlp_norm;
    m.layers.push_back(std::move(L));
  }
  m.lm_head = unpack_stream(p.lm_head);
  return m;
}

ModelConfig random_tiny_config(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelConfig c;
  static constexpr std::array<int, 2> kBeats = {64, 128};
  static constexpr std::array<int, 3> kGroups = {32, 64, 128};
  static constexpr std::array<int, 3> kHeadDims = {8, 16, 32};
  c.bus = BusGeometry::single_port(kBeats[rng() % kBeats.size()]);
  c.group_size = kGroups[rng() % kGroups.size()];
  c.n_layers = uniform_int(rng, 1, 3);
  c.n_heads = uniform_int(rng, 1, 4);
  c.head_dim = kHeadDims[rng() % kHeadDims.size()];
  c.d_model = c.n_heads * c.head_dim;
  c.d_ffn = uniform_int(rng, 8, 200);
  c.vocab_size = uniform_int(rng, 16, 300);
  c.max_context = uniform_int(rng, 16, 48);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoint IO
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  std::array<char, sizeof(T)> b{};
  std::uint64_t u = 0;
  if constexpr (std::is_same_v<T, float>)
    u = std::bit_cast<std::uint32_t>(v);
  else
    u = static_cast<std::uint64_t>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xff);
  os.write(b.data(), b.size());
}

template <typename T>
T get(std::istream& is) {
  std::array<unsigned char, sizeof(T)> b{};
  is.read(reinterpret_cast<char*>(b.data()), b.size());
  if (!is) throw FormatError("checkpoint truncated");
  std::uint64_t u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  if constexpr (std::is_same_v<T, float>)
    return std::bit_cast<float>(static_cast<std::uint32_t>(u));
  else
    return static_cast<T>(u);
}

enum : std::uint8_t { kDtypeF32 = 0, kDtypeQuant = 1 };

const Eigen::MatrixXf& dense_entry(const Checkpoint& ck, const std::string& name, int rows, int cols) {
  auto it = ck.tensors.find(name);
  if (it == ck.tensors.end()) throw ConfigError("checkpoint is missing tensor '" + name + "'");
  const auto* m = std::get_if<Eigen::MatrixXf>(&it->second);
  if (!m) throw ConfigError("tensor '" + name + "' must be f32");
  if (m->rows() != rows || m->cols() != cols)
    throw ConfigError("tensor '" + name + "' has shape " + std::to_string(m->rows()) + "x" + std::to_string(m->cols()) +
                      ", config expects " + std::to_string(rows) + "x" + std::to_string(cols));
  return *m;
}

HalfVector gain_entry(const Checkpoint& ck, const std::string& name, int n) {
  const Eigen::MatrixXf& m = dense_entry(ck, name, n, 1);
  return to_half_vector(m.col(0));
}

/// Pre-quantized stream entry, validated against the config.
const QuantMatrix* quant_entry(const Checkpoint& ck, const StreamTensor& t, const ModelConfig& cfg) {
  auto it = ck.tensors.find(t.name);
  if (it == ck.tensors.end()) return nullptr;
  // wo, w_down and lm_head share their natural and stream names; a dense
  // entry under one of those is quantized like any other.
  const auto* q = std::get_if<QuantMatrix>(&it->second);
  if (!q) return nullptr;
  if (q->rows != t.rows || q->cols != t.cols || q->group_size != cfg.group_size ||
      q->padded_cols() != padded_row_length(t.cols, cfg.group_size, cfg.bus))
    throw ConfigError("tensor '" + t.name + "' does not match the config shape or group size");
  return q;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(kCheckpointMagic, 4);
  put<std::uint16_t>(os, kCheckpointVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    if (const auto* m = std::get_if<Eigen::MatrixXf>(&t)) {
      put<std::uint8_t>(os, kDtypeF32);
      put<std::uint32_t>(os, static_cast<std::uint32_t>(m->rows()));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(m->cols()));
      for (Eigen::Index r = 0; r < m->rows(); ++r)
        for (Eigen::Index c = 0; c < m->cols(); ++c) put<float>(os, (*m)(r, c));
    } else {
      const auto& q = std::get<QuantMatrix>(t);
      put<std::uint8_t>(os, kDtypeQuant);
      put<std::uint32_t>(os, static_cast<std::uint32_t>(q.rows));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(q.cols));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(q.group_size));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(q.groups_per_row));
      for (const auto& g : q.groups) {
        put<std::uint16_t>(os, half_bits(g.scale));
        put<std::uint8_t>(os, g.zero);
        os.write(reinterpret_cast<const char*>(g.codes.data()), static_cast<std::streamsize>(g.codes.size()));
      }
    }
  }
  if (!os) throw IoError("failed writing " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || !std::equal(magic.begin(), magic.end(), kCheckpointMagic)) throw FormatError("bad checkpoint magic");
  if (get<std::uint16_t>(is) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  const auto n = get<std::uint32_t>(is);
  Checkpoint ck;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name(get<std::uint16_t>(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    const auto dtype = get<std::uint8_t>(is);
    const auto rows = static_cast<int>(get<std::uint32_t>(is));
    const auto cols = static_cast<int>(get<std::uint32_t>(is));
    if (dtype == kDtypeF32) {
      Eigen::MatrixXf m(rows, cols);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = get<float>(is);
      ck.tensors.emplace(name, std::move(m));
    } else if (dtype == kDtypeQuant) {
      QuantMatrix q;
      q.rows = rows;
      q.cols = cols;
      q.group_size = static_cast<int>(get<std::uint32_t>(is));
      q.groups_per_row = static_cast<int>(get<std::uint32_t>(is));
      if (q.group_size <= 0 || q.groups_per_row < 0) throw FormatError("tensor '" + name + "' has bad group geometry");
      q.groups.resize(static_cast<std::size_t>(rows) * static_cast<std::size_t>(q.groups_per_row));
      for (auto& g : q.groups) {
        g.scale = half_from_bits(get<std::uint16_t>(is));
        g.zero = get<std::uint8_t>(is);
        g.codes.resize(static_cast<std::size_t>(q.group_size));
        is.read(reinterpret_cast<char*>(g.codes.data()), static_cast<std::streamsize>(g.codes.size()));
        if (!is) throw FormatError("checkpoint truncated");
        if (g.zero > 15) throw FormatError("tensor '" + name + "' has a zero point above 15");
        for (auto c : g.codes)
          if (c > 15) throw FormatError("tensor '" + name + "' has a code above 15");
      }
      ck.tensors.emplace(name, std::move(q));
    } else {
      throw FormatError("tensor '" + name + "' has unknown dtype " + std::to_string(dtype));
    }
  }
  return ck;
}

Checkpoint checkpoint_from_dense(const DenseWeights& w) {
  Checkpoint ck;
  ck.tensors["embedding"] = w.embedding;
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& L = w.layers[l];
    const int i = static_cast<int>(l);
    ck.tensors[layer_name(i, "wq")] = L.wq;
    ck.tensors[layer_name(i, "wk")] = L.wk;
    ck.tensors[layer_name(i, "wv")] = L.wv;
    ck.tensors[layer_name(i, "wo")] = L.wo;
    ck.tensors[layer_name(i, "w_gate")] = L.w_gate;
    ck.tensors[layer_name(i, "w_up")] = L.w_up;
    ck.tensors[layer_name(i, "w_down")] = L.w_down;
    ck.tensors[layer_name(i, "attn_norm")] = Eigen::MatrixXf(L.attn_norm);
    ck.tensors[layer_name(i, "mlp_norm")] = Eigen::MatrixXf(L.mlp_norm);
  }
  ck.tensors["final_norm"] = Eigen::MatrixXf(w.final_norm);
  ck.tensors["lm_head"] = w.lm_head;
  return ck;
}

Checkpoint checkpoint_from_quant(const QuantModel& m) {
  Checkpoint ck;
  ck.tensors["embedding"] = to_float_matrix(m.embedding);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& L = m.layers[l];
    const int i = static_cast<int>(l);
    ck.tensors[layer_name(i, "wqkv")] = L.wqkv;
    ck.tensors[layer_name(i, "wo")] = L.wo;
    ck.tensors[layer_name(i, "w_gate_up")] = L.w_gate_up;
    ck.tensors[layer_name(i, "w_down")] = L.w_down;
    ck.tensors[layer_name(i, "attn_norm")] = to_float_column(L.attn_norm);
    ck.tensors[layer_name(i, "mlp_norm")] = to_float_column(L.mlp_norm);
  }
  ck.tensors["final_norm"] = to_float_column(m.final_norm);
  ck.tensors["lm_head"] = m.lm_head;
  return ck;
}

QuantModel model_from_checkpoint(const Checkpoint& ck, const ModelConfig& cfg) {
  cfg.validate();
  if (ck.tensors.empty()) throw ConfigError("checkpoint has no tensors");
  const int d = cfg.d_model;
  const int f = cfg.d_ffn;
  const int g = cfg.group_size;
  auto quant_or = [&](const StreamTensor& t, auto&& dense) {
    if (const QuantMatrix* q = quant_entry(ck, t, cfg)) return *q;
    return quantize_matrix(dense(), g, cfg.bus);
  };

  QuantModel m;
  m.cfg = cfg;
  m.embedding = to_half_matrix(dense_entry(ck, "embedding", cfg.vocab_size, d));
  const auto tensors = stream_tensors(cfg);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const StreamTensor* t = &tensors[static_cast<std::size_t>(4 * l)];
    QuantLayer L;
    L.wqkv = quant_or(t[0], [&] {
      DenseLayer tmp;
      tmp.wq = dense_entry(ck, layer_name(l, "wq"), d, d);
      tmp.wk = dense_entry(ck, layer_name(l, "wk"), d, d);
      tmp.wv = dense_entry(ck, layer_name(l, "wv"), d, d);
      return head_major_qkv(tmp, cfg.n_heads, cfg.head_dim);
    });
    L.wo = quant_or(t[1], [&] { return dense_entry(ck, layer_name(l, "wo"), d, d); });
    L.w_gate_up = quant_or(t[2], [&] {
      return interleave_rows(dense_entry(ck, layer_name(l, "w_gate"), f, d), dense_entry(ck, layer_name(l, "w_up"), f, d));
    });
    L.w_down = quant_or(t[3], [&] { return dense_entry(ck, layer_name(l, "w_down"), d, f); });
    L.attn_norm = gain_entry(ck, layer_name(l, "attn_norm"), d);
    L.mlp_norm = gain_entry(ck, layer_name(l, "mlp_norm"), d);
    m.layers.push_back(std::move(L));
  }
  m.final_norm = gain_entry(ck, "final_norm", d);
  m.lm_head = quant_or(tensors.back(), [&] { return dense_entry(ck, "lm_head", cfg.vocab_size, d); });
  return m;
}

void save_packed_model(const std::string& dir, const PackedModel& p) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  save_model_config((fs::path(dir) / "config.json").string(), p.cfg);
  const auto tensors = stream_tensors(p.cfg);
  for (const auto& t : tensors) {
    const PackedWeightStream* s = &p.lm_head;
    if (t.layer >= 0) {
      const auto& L = p.layers[static_cast<std::size_t>(t.layer)];
      const std::string suffix = t.name.substr(t.name.rfind('.') + 1);
      s = suffix == "wqkv" ? &L.wqkv : suffix == "wo" ? &L.wo : suffix == "w_gate_up" ? &L.w_gate_up : &L.w_down;
    }
    save_container((fs::path(dir) / (t.name + ".epws")).string(), *s);
  }
  Checkpoint dense;
  dense.tensors["embedding"] = to_float_matrix(p.embedding);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    dense.tensors[layer_name(static_cast<int>(l), "attn_norm")] = to_float_column(p.layers[l].attn_norm);
    dense.tensors[layer_name(static_cast<int>(l), "mlp_norm")] = to_float_column(p.layers[l].mlp_norm);
  }
  dense.tensors["final_norm"] = to_float_column(p.final_norm);
  save_checkpoint((fs::path(dir) / "dense.epck").string(), dense);
}

PackedModel load_packed_model(const std::string& dir) {
  namespace fs = std::filesystem;
  PackedModel p;
  p.cfg = load_model_config((fs::path(dir) / "config.json").string());
  const ModelConfig& cfg = p.cfg;
  const Checkpoint dense = load_checkpoint((fs::path(dir) / "dense.epck").string());
  p.embedding = to_half_matrix(dense_entry(dense, "embedding", cfg.vocab_size, cfg.d_model));
  p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (const auto& t : stream_tensors(cfg)) {
    PackedWeightStream s = load_container((fs::path(dir) / (t.name + ".epws")).string());
    if (s.rows != t.rows || s.cols != t.cols || s.group_size != cfg.group_size || s.beat_bits != cfg.bus.beat_bits)
      throw ConfigError("container '" + t.name + "' does not match config.json");
    if (t.layer < 0) {
      p.lm_head = std::move(s);
      continue;
    }
    auto& L = p.layers[static_cast<std::size_t>(t.layer)];
    const std::string suffix = t.name.substr(t.name.rfind('.') + 1);
    (suffix == "wqkv" ? L.wqkv : suffix == "wo" ? L.wo : suffix == "w_gate_up" ? L.w_gate_up : L.w_down) = std::move(s);
  }
  for (int l = 0; l < cfg.n_layers; ++l) {
    p.layers[static_cast<std::size_t>(l)].attn_norm = gain_entry(dense, layer_name(l, "attn_norm"), cfg.d_model);
    p.layers[static_cast<std::size_t>(l)].mlp_norm = gain_entry(dense, layer_name(l, "mlp_norm"), cfg.d_model);
  }
  p.final_norm = gain_entry(dense, "final_norm", cfg.d_model);
  return p;
}

}  // namespace streamdec
