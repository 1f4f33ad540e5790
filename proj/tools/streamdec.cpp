// SPDX-License-Identifier: Apache-2.0
// streamdec command-line tool: pack, inspect, decode, bench, memmap, generate.

#include "streamdec/memory_map.hpp"
#include "streamdec/perf.hpp"
#include "streamdec/pipeline.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <regex>

#ifndef STREAMDEC_DATA_DIR
#define STREAMDEC_DATA_DIR "data"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace streamdec;

namespace {

/// Exit code when --verify finds a divergence.
constexpr int kExitDiverged = 10;

enum class Format { text, machine };

ModelConfig resolve_config(const std::string& name, const ModelConfig& fallback) {
  if (name.empty()) return fallback;
  if (name == "tiny") return ModelConfig::tiny();
  if (name == "llama2-7b" || name == "llama2_7b" || name == "7b") return ModelConfig::llama2_7b();
  return load_model_config(name);
}

std::uint64_t parse_bytes(const std::string& s) {
  static const std::regex re(R"(^\s*([0-9]+(?:\.[0-9]+)?)\s*([KMGT]i?B?|B)?\s*$)", std::regex::icase);
  std::smatch m;
  if (!std::regex_match(s, m, re)) throw ConfigError("cannot parse size '" + s + "'");
  double v = std::stod(m[1]);
  std::string unit = m[2];
  for (auto& c : unit) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  const bool binary = unit.find('I') != std::string::npos;
  const double k = binary ? 1024.0 : 1000.0;
  if (!unit.empty() && unit != "B") {
    const int power = static_cast<int>(std::string("KMGT").find(unit[0])) + 1;
    for (int i = 0; i < power; ++i) v *= k;
  }
  return static_cast<std::uint64_t>(v);
}

void emit(const json& j) { std::cout << j.dump(2) << "\n"; }

std::string human_bytes(double b) {
  const char* units[] = {"B", "KiB", "MiB", "GiB"};
  int u = 0;
  while (b >= 1024.0 && u < 3) {
    b /= 1024.0;
    ++u;
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f %s", b, units[u]);
  return buf;
}

// ---- generate -------------------------------------------------------------

struct GenerateArgs {
  std::string config, out;
  std::uint64_t seed = 1;
  bool quantized = false;
};

int cmd_generate(const GenerateArgs& a) {
  const ModelConfig cfg = resolve_config(a.config, ModelConfig::tiny());
  const DenseWeights w = random_weights(cfg, a.seed);
  save_checkpoint(a.out, a.quantized ? checkpoint_from_quant(quantize_model(w, cfg)) : checkpoint_from_dense(w));
  std::cout << "wrote " << a.out << " (" << (a.quantized ? "pre-quantized" : "f32") << ", seed " << a.seed << ")\n";
  return 0;
}

// ---- pack -----------------------------------------------------------------

struct PackArgs {
  std::string config, input, out;
  std::uint64_t seed = 1;
  Format format = Format::text;
};

int cmd_pack(const PackArgs& a) {
  const ModelConfig cfg = resolve_config(a.config, ModelConfig::tiny());
  const QuantModel q = a.input.empty() ? quantize_model(random_weights(cfg, a.seed), cfg)
                                       : model_from_checkpoint(load_checkpoint(a.input), cfg);
  const PackedModel p = pack_model(q);
  save_packed_model(a.out, p);

  json rows = json::array();
  std::uint64_t total = 0;
  auto stat = [&](const std::string& name, const PackedWeightStream& s) {
    std::uint64_t n[3] = {0, 0, 0};
    for (BeatKind k : s.kinds) ++n[static_cast<int>(k)];
    total += s.n_beats();
    rows.push_back({{"tensor", name}, {"rows", s.rows}, {"cols", s.cols}, {"beats", s.n_beats()},
                    {"zero_point_beats", n[0]}, {"scale_beats", n[1]}, {"weight_beats", n[2]}});
  };
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto pre = "layers." + std::to_string(l) + ".";
    stat(pre + "wqkv", p.layers[l].wqkv);
    stat(pre + "wo", p.layers[l].wo);
    stat(pre + "w_gate_up", p.layers[l].w_gate_up);
    stat(pre + "w_down", p.layers[l].w_down);
  }
  stat("lm_head", p.lm_head);

  if (a.format == Format::machine) {
    emit({{"command", "pack"}, {"out", a.out}, {"beat_bits", cfg.bus.beat_bits}, {"tensors", rows}, {"total_beats", total}});
    return 0;
  }
  std::printf("%-20s %6s %6s %8s %6s %6s %8s\n", "tensor", "rows", "cols", "beats", "zp", "scale", "weight");
  for (const auto& r : rows)
    std::printf("%-20s %6d %6d %8llu %6llu %6llu %8llu\n", r["tensor"].get<std::string>().c_str(), r["rows"].get<int>(),
                r["cols"].get<int>(), r["beats"].get<unsigned long long>(), r["zero_point_beats"].get<unsigned long long>(),
                r["scale_beats"].get<unsigned long long>(), r["weight_beats"].get<unsigned long long>());
  std::printf("total %llu beats of %d bits -> %s\n", static_cast<unsigned long long>(total), cfg.bus.beat_bits,
              a.out.c_str());
  return 0;
}

// ---- inspect --------------------------------------------------------------

json describe_stream(const std::string& name, const PackedWeightStream& s) {
  std::uint64_t n[3] = {0, 0, 0};
  for (BeatKind k : s.kinds) ++n[static_cast<int>(k)];
  const StreamLayout lay = s.layout();
  return {{"tensor", name},
          {"rows", s.rows},
          {"cols", s.cols},
          {"group_size", s.group_size},
          {"beat_bits", s.beat_bits},
          {"beats", s.n_beats()},
          {"beats_per_superblock", lay.beats_per_superblock()},
          {"zero_point_beats", n[0]},
          {"scale_beats", n[1]},
          {"weight_beats", n[2]},
          {"checksum", payload_checksum(s.payload)}};
}

int cmd_inspect(const std::string& path, Format format) {
  json items = json::array();
  if (fs::is_directory(path)) {
    const PackedModel p = load_packed_model(path);
    for (const auto& t : stream_tensors(p.cfg)) {
      const PackedWeightStream& s = t.layer < 0 ? p.lm_head
                                    : t.name.ends_with(".wqkv") ? p.layers[t.layer].wqkv
                                    : t.name.ends_with(".wo")   ? p.layers[t.layer].wo
                                    : t.name.ends_with(".w_gate_up") ? p.layers[t.layer].w_gate_up
                                                                     : p.layers[t.layer].w_down;
      items.push_back(describe_stream(t.name, s));
    }
  } else {
    const PackedWeightStream s = load_container(path);
    unpack_stream(s);  // validates the beat pattern and padding
    items.push_back(describe_stream(fs::path(path).stem().string(), s));
  }
  if (format == Format::machine) {
    emit({{"command", "inspect"}, {"path", path}, {"streams", items}});
    return 0;
  }
  for (const auto& it : items)
    std::printf("%-20s %dx%d g=%d beat=%d bits: %llu beats (%llu zp, %llu scale, %llu weight), "
                "super-block %llu beats, checksum %016llx\n",
                it["tensor"].get<std::string>().c_str(), it["rows"].get<int>(), it["cols"].get<int>(),
                it["group_size"].get<int>(), it["beat_bits"].get<int>(), it["beats"].get<unsigned long long>(),
                it["zero_point_beats"].get<unsigned long long>(), it["scale_beats"].get<unsigned long long>(),
                it["weight_beats"].get<unsigned long long>(), it["beats_per_superblock"].get<unsigned long long>(),
                it["checksum"].get<unsigned long long>());
  return 0;
}

// ---- decode ---------------------------------------------------------------

struct DecodeArgs {
  std::string config, model_dir, kv_snapshot;
  std::uint64_t seed = 1;
  int tokens = 32;
  int prompt = 1;
  bool verify = false;
  Format format = Format::text;
};

int cmd_decode(const DecodeArgs& a) {
  PackedModel packed;
  if (!a.model_dir.empty()) {
    packed = load_packed_model(a.model_dir);
  } else {
    const ModelConfig cfg = resolve_config(a.config, ModelConfig::tiny());
    packed = pack_model(quantize_model(random_weights(cfg, a.seed), cfg));
  }
  if (a.tokens < 0) throw ConfigError("--tokens must be non-negative");

  FusedDecoder fused(packed);
  std::optional<QuantModel> qm;
  std::optional<ReferenceDecoder> ref;
  if (a.verify) {
    qm = unpack_model(packed);
    ref.emplace(*qm);
  }

  json steps = json::array();
  std::string divergence;
  int verified = 0;
  std::int64_t stall_total = 0;
  bool contained = true;
  int tok = a.prompt;
  std::vector<int> out_tokens;
  for (int i = 0; i < a.tokens; ++i) {
    const DecodeResult r = fused.step(tok);
    stall_total += r.trace.stall_cycles;
    contained = contained && r.trace.spu_contained();
    if (ref && divergence.empty()) {
      const HalfVector rl = ref->step(tok);
      for (Eigen::Index k = 0; k < rl.size() && divergence.empty(); ++k)
        if (half_bits(rl(k)) != half_bits(r.logits(k))) {
          char buf[128];
          std::snprintf(buf, sizeof buf, "token %d, logit %ld: fused 0x%04x vs reference 0x%04x", i,
                        static_cast<long>(k), half_bits(r.logits(k)), half_bits(rl(k)));
          divergence = buf;
        }
      if (divergence.empty()) ++verified;
    }
    steps.push_back({{"position", i}, {"input", tok}, {"output", r.token}, {"cycles", r.trace.total_cycles},
                     {"stall_cycles", r.trace.stall_cycles}, {"spu_contained", r.trace.spu_contained()}});
    if (a.format == Format::text)
      std::printf("pos %3d  in %4d -> out %4d  cycles %lld  stall %lld  spu %s\n", i, tok, r.token,
                  static_cast<long long>(r.trace.total_cycles), static_cast<long long>(r.trace.stall_cycles),
                  r.trace.spu_contained() ? "hidden" : "EXPOSED");
    out_tokens.push_back(r.token);
    tok = r.token;
  }
  if (!a.kv_snapshot.empty()) save_kv_snapshot(a.kv_snapshot, fused.cache());

  const std::string verdict = !a.verify          ? ""
                              : divergence.empty() ? "bitwise identical, " + std::to_string(verified) + "/" +
                                                         std::to_string(a.tokens) + " tokens"
                                                   : "diverged at " + divergence;
  if (a.format == Format::machine) {
    json j{{"command", "decode"}, {"tokens", out_tokens}, {"steps", steps}, {"stall_cycles", stall_total},
           {"spu_contained", contained}, {"beats_per_token_last", steps.empty() ? json(nullptr) : steps.back()["cycles"]}};
    if (a.verify) j["verify"] = {{"identical", divergence.empty()}, {"tokens", verified}, {"verdict", verdict}};
    emit(j);
  } else {
    std::printf("trace: %d tokens, %lld stall cycles, scalar work %s\n", a.tokens, static_cast<long long>(stall_total),
                contained ? "fully hidden" : "exposed");
    if (a.verify) std::printf("verify: %s\n", verdict.c_str());
  }
  return divergence.empty() ? 0 : kExitDiverged;
}

// ---- bench ----------------------------------------------------------------

struct BenchArgs {
  std::string catalog = std::string(STREAMDEC_DATA_DIR) + "/devices.json";
  std::string device, config, counting_mode = "non-embed";
  std::optional<double> bandwidth, params, measured, fit_target;
  double bits = 4.0;
  int context = 1024;
  std::int64_t setup = 0, max_burst = 256, gap = 0;
  Format format = Format::text;
};

int cmd_bench(const BenchArgs& a) {
  const ModelConfig cfg = resolve_config(a.config, ModelConfig::llama2_7b());
  const CountingMode mode = parse_counting_mode(a.counting_mode);
  json out{{"command", "bench"}};

  // Custom row: --bandwidth with optional --params / --measured.
  if (a.bandwidth) {
    const double params = a.params ? *a.params : bytes_per_token(cfg, a.context, mode, a.bits) * 8.0 / a.bits;
    const double peak = peak_tokens_per_s(*a.bandwidth * 1e9, params, a.bits);
    json row{{"bandwidth_gbps", *a.bandwidth}, {"params_moved", params}, {"bits_per_weight", a.bits}, {"peak_tps", peak}};
    if (a.measured) row["utilization_pct"] = utilization(*a.measured, peak) * 100.0;
    if (a.format == Format::machine) {
      out["custom"] = row;
      emit(out);
    } else {
      std::printf("custom: %.2f GB/s, %.4g params x %.0f bits -> peak %.3f token/s", *a.bandwidth, params, a.bits, peak);
      if (a.measured) std::printf(", utilization %.1f%%", row["utilization_pct"].get<double>());
      std::printf("\n");
    }
    return 0;
  }

  const DeviceCatalog cat = load_device_catalog(a.catalog);
  std::vector<const DeviceEntry*> rows;
  if (!a.device.empty())
    rows.push_back(&cat.find(a.device));
  else
    for (const auto& d : cat.devices) rows.push_back(&d);

  json devs = json::array();
  if (a.format == Format::text)
    std::printf("%-18s %-4s %7s %10s %9s %9s %7s %8s %8s %7s %9s\n", "device", "tab", "GB/s", "params", "peak",
                "pub.peak", "dev%", "util%", "pub.util", "dev.pt", "util@mdl");
  for (const DeviceEntry* e : rows) {
    const DeviceRow r = evaluate_device(*e);
    devs.push_back({{"key", e->key},
                    {"table", e->table},
                    {"platform", e->platform},
                    {"framework", e->name},
                    {"bandwidth_gbps", e->bandwidth_gbps},
                    {"params_moved", r.params},
                    {"counting_mode", e->params_moved ? "explicit" : to_string(*e->counting_mode)},
                    {"bits_per_weight", e->bits_per_weight},
                    {"measured_tps", e->measured_tps},
                    {"peak_tps", r.peak_tps},
                    {"published_peak_tps", e->published_peak_tps},
                    {"peak_deviation_pct", r.peak_dev_pct},
                    {"utilization_pct", r.utilization_pct},
                    {"published_utilization_pct", e->published_utilization_pct},
                    {"utilization_deviation_pt", r.util_dev_pt},
                    {"utilization_vs_model_peak_pct", r.model_utilization_pct}});
    if (a.format == Format::text)
      std::printf("%-18s %-4s %7.1f %10.4g %9.3f %9.3g %+7.2f %8.2f %8.1f %+7.2f %9.2f\n", e->key.c_str(),
                  e->table.c_str(), e->bandwidth_gbps, r.params, r.peak_tps, e->published_peak_tps, r.peak_dev_pct,
                  r.utilization_pct, e->published_utilization_pct, r.util_dev_pt, r.model_utilization_pct);
  }
  out["devices"] = devs;

  // Transaction-level simulation of one token on the configured bus.
  ModelConfig sim_cfg = cfg;
  sim_cfg.max_context = std::max(sim_cfg.max_context, a.context + 1);
  const TokenSchedule sched = build_token_schedule(sim_cfg, a.context);
  const auto txns = sched.transactions();
  BusModel bus{cfg.bus, a.setup, a.max_burst, a.gap};
  if (a.fit_target) bus.burst_setup_cycles = fit_setup_cycles(txns, bus, *a.fit_target).setup_cycles;
  const PerfReport rep = simulate_stream(txns, bus);
  const double counted = bytes_per_token(cfg, a.context, mode, a.bits);
  const double counted_peak = cfg.bus.bandwidth() / counted;
  out["simulation"] = {{"context", a.context},
                       {"bandwidth_bytes_per_s", cfg.bus.bandwidth()},
                       {"counting_mode", to_string(mode)},
                       {"counted_bytes_per_token", counted},
                       {"counted_peak_tps", counted_peak},
                       {"packed_bytes_per_token", rep.bytes_per_token},
                       {"theoretical_peak_tps", rep.theoretical_peak_tps},
                       {"simulated_tps", rep.simulated_tps},
                       {"utilization_fraction", rep.utilization_fraction},
                       {"burst_setup_cycles", bus.burst_setup_cycles},
                       {"max_burst_beats", bus.max_burst_beats},
                       {"inter_command_gap", bus.inter_command_gap},
                       {"beats", rep.beats},
                       {"cycles", rep.cycles},
                       {"bursts", rep.bursts}};
  if (a.format == Format::machine) {
    emit(out);
    return 0;
  }
  std::printf("\nsimulation at context %d, %.2f GB/s bus:\n", a.context, cfg.bus.bandwidth() / 1e9);
  std::printf("  %s traffic %.4g bytes/token -> peak %.3f token/s\n", to_string(mode), counted, counted_peak);
  std::printf("  packed traffic %.4g bytes/token, %llu beats in %llu bursts\n", rep.bytes_per_token,
              static_cast<unsigned long long>(rep.beats), static_cast<unsigned long long>(rep.bursts));
  std::printf("  setup %lld cycles/burst: %.3f of %.3f token/s, utilization %.1f%%\n",
              static_cast<long long>(bus.burst_setup_cycles), rep.simulated_tps, rep.theoretical_peak_tps,
              rep.utilization_fraction * 100.0);
  return 0;
}

// ---- memmap ---------------------------------------------------------------

struct MemmapArgs {
  std::string config, capacity = "4GiB";
  int context = -1;
  int split = -1;
  Format format = Format::text;
};

int cmd_memmap(const MemmapArgs& a) {
  const ModelConfig cfg = resolve_config(a.config, ModelConfig::llama2_7b());
  const int ctx = a.context < 0 ? cfg.max_context : a.context;
  MemoryMapOptions opt;
  opt.split_layer = a.split;
  const MemoryMap m = plan_memory_map(cfg, parse_bytes(a.capacity), ctx, opt);
  if (a.format == Format::machine) {
    json regions = json::array();
    for (const auto& r : m.regions)
      regions.push_back({{"name", r.name}, {"base", r.base}, {"length", r.length}, {"high", r.high}});
    emit({{"command", "memmap"},
          {"capacity", m.capacity},
          {"half", m.half},
          {"split_layer", m.split_layer},
          {"reserved", {{"base", m.reserved.base}, {"length", m.reserved.length}}},
          {"used_bytes", m.used_bytes()},
          {"occupancy", m.occupancy()},
          {"regions", regions}});
    return 0;
  }
  std::printf("%-24s %12s %12s  %s\n", "region", "base", "end", "size");
  for (const auto& r : m.regions)
    std::printf("%-24s 0x%010llx 0x%010llx  %s\n", r.name.c_str(), static_cast<unsigned long long>(r.base),
                static_cast<unsigned long long>(r.end()), human_bytes(static_cast<double>(r.length)).c_str());
  std::printf("%-24s 0x%010llx 0x%010llx  %s\n", "(reserved)", static_cast<unsigned long long>(m.reserved.base),
              static_cast<unsigned long long>(m.reserved.end()), human_bytes(static_cast<double>(m.reserved.length)).c_str());
  std::printf("layers [0,%d) with the embedding above 0x%llx, the rest below\n", m.split_layer,
              static_cast<unsigned long long>(m.half));
  std::printf("used %s of %s: occupancy %.2f%%\n", human_bytes(static_cast<double>(m.used_bytes())).c_str(),
              human_bytes(static_cast<double>(m.capacity)).c_str(), m.occupancy() * 100.0);
  return 0;
}

void add_format(CLI::App* c, Format& f) {
  c->add_option("--format", f, "Output format")
      ->transform(CLI::CheckedTransformer(std::map<std::string, Format>{{"text", Format::text}, {"machine", Format::machine}}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bus-aligned 4-bit LLM decode toolkit"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Write a synthetic checkpoint for a config");
  g->add_option("--config", gen.config, "Model config JSON (or tiny / llama2-7b)");
  g->add_option("--seed", gen.seed, "Weight seed");
  g->add_option("--out", gen.out, "Checkpoint path")->required();
  g->add_flag("--quantized", gen.quantized, "Store stream tensors pre-quantized");

  PackArgs pack;
  auto* p = app.add_subcommand("pack", "Quantize and pack weights into stream containers");
  p->add_option("--config", pack.config, "Model config JSON (or tiny / llama2-7b)");
  p->add_option("--input", pack.input, "Checkpoint (.epck); synthetic weights from --seed when omitted");
  p->add_option("--seed", pack.seed, "Seed for synthetic weights");
  p->add_option("--out", pack.out, "Output directory")->required();
  add_format(p, pack.format);

  std::string inspect_path;
  Format inspect_format = Format::text;
  auto* in = app.add_subcommand("inspect", "Describe a container or packed model directory");
  in->add_option("path", inspect_path, "Container file or model directory")->required();
  add_format(in, inspect_format);

  DecodeArgs dec;
  auto* d = app.add_subcommand("decode", "Greedy decode through the fused pipeline");
  d->add_option("--config", dec.config, "Model config JSON (or tiny / llama2-7b)");
  d->add_option("--model", dec.model_dir, "Packed model directory (overrides --config)");
  d->add_option("--seed", dec.seed, "Seed for synthetic weights");
  d->add_option("--tokens", dec.tokens, "Token budget");
  d->add_option("--prompt", dec.prompt, "First input token id");
  d->add_flag("--verify", dec.verify, "Run the unfused reference in lockstep");
  d->add_option("--kv-snapshot", dec.kv_snapshot, "Write the final KV cache snapshot here");
  add_format(d, dec.format);

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Peak/utilization table and bus simulation");
  b->add_option("--catalog", bench.catalog, "Device catalog JSON");
  b->add_option("--device", bench.device, "Only this catalog key");
  b->add_option("--config", bench.config, "Model config for the simulation (default llama2-7b)");
  b->add_option("--counting-mode", bench.counting_mode, "total | non-embed | packed")
      ->check(CLI::IsMember({"total", "non-embed", "packed", "total_params", "non_embedding", "packed_exact"}));
  b->add_option("--bandwidth", bench.bandwidth, "Custom row: bandwidth in GB/s");
  b->add_option("--params", bench.params, "Custom row: parameters moved per token");
  b->add_option("--bits", bench.bits, "Custom row: bits per weight");
  b->add_option("--measured", bench.measured, "Custom row: measured token/s");
  b->add_option("--context", bench.context, "Cached tokens for the simulated step");
  b->add_option("--setup", bench.setup, "Burst setup cycles")->check(CLI::NonNegativeNumber);
  b->add_option("--max-burst", bench.max_burst, "Maximum burst length in beats")->check(CLI::PositiveNumber);
  b->add_option("--gap", bench.gap, "Inter-command gap cycles")->check(CLI::NonNegativeNumber);
  b->add_option("--fit", bench.fit_target, "Fit setup cycles to this utilization");
  add_format(b, bench.format);

  MemmapArgs mm;
  auto* m = app.add_subcommand("memmap", "Plan the device memory map");
  m->add_option("--config", mm.config, "Model config JSON (or tiny / llama2-7b)");
  m->add_option("--capacity", mm.capacity, "Device capacity, e.g. 4GiB");
  m->add_option("--context", mm.context, "Reserved KV context (default: config max_context)");
  m->add_option("--split", mm.split, "First layer placed in the lower half");
  add_format(m, mm.format);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*g) return cmd_generate(gen);
    if (*p) return cmd_pack(pack);
    if (*in) return cmd_inspect(inspect_path, inspect_format);
    if (*d) return cmd_decode(dec);
    if (*b) return cmd_bench(bench);
    if (*m) return cmd_memmap(mm);
  } catch (const CapacityError& e) {
    std::cerr << "capacity error" << (e.region().empty() ? "" : " in region '" + e.region() + "'") << ": " << e.what()
              << "\n";
    return e.exit_code();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
