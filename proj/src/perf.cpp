// SPDX-License-Identifier: Apache-2.0
#include "streamdec/perf.hpp"

#include "json.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace streamdec {

namespace {

bool positive(double v) { return std::isfinite(v) && v > 0.0; }

}  // namespace

double peak_tokens_per_s(double bw, double params_moved, double bits) {
  if (!positive(bw) || !positive(params_moved) || !positive(bits))
    throw DomainError("peak token/s needs positive bandwidth, parameter count and bit width");
  return bw / (params_moved * bits / 8.0);
}

double utilization(double measured, double peak) {
  if (!positive(peak)) throw DomainError("utilization needs a positive peak");
  if (!std::isfinite(measured) || measured < 0.0) throw DomainError("measured token/s must be non-negative");
  return measured / peak;
}

const char* to_string(CountingMode m) {
  switch (m) {
    case CountingMode::total_params: return "total_params";
    case CountingMode::non_embedding: return "non_embedding";
    case CountingMode::packed_exact: return "packed_exact";
  }
  return "?";
}

CountingMode parse_counting_mode(const std::string& s) {
  if (s == "total" || s == "total_params") return CountingMode::total_params;
  if (s == "non-embed" || s == "non_embedding") return CountingMode::non_embedding;
  if (s == "packed" || s == "packed_exact") return CountingMode::packed_exact;
  throw ConfigError("unknown counting mode '" + s + "' (expected total, non-embed or packed)");
}

double bytes_per_token(const ModelConfig& cfg, int context_len, CountingMode mode, double bits) {
  cfg.validate();
  if (context_len < 0) throw DomainError("context length must be non-negative");
  switch (mode) {
    case CountingMode::total_params: return static_cast<double>(cfg.params_total()) * bits / 8.0;
    case CountingMode::non_embedding: return static_cast<double>(cfg.params_non_embedding()) * bits / 8.0;
    case CountingMode::packed_exact: {
      ModelConfig c = cfg;
      c.max_context = std::max(c.max_context, context_len + 1);
      const TokenSchedule s = build_token_schedule(c, context_len);
      return static_cast<double>(s.read_beats() + s.write_beats()) * cfg.bus.beat_bytes();
    }
  }
  return 0.0;
}

void BusModel::validate() const {
  geometry.validate();
  if (burst_setup_cycles < 0 || inter_command_gap < 0) throw ConfigError("bus timings must be non-negative");
  if (max_burst_beats <= 0) throw ConfigError("max_burst_beats must be positive");
}

PerfReport simulate_stream(const std::vector<MemTransaction>& txns, const BusModel& bus,
                           std::optional<double> measured) {
  bus.validate();
  const auto max_burst = static_cast<std::uint64_t>(bus.max_burst_beats);
  const auto setup = static_cast<std::uint64_t>(bus.burst_setup_cycles);
  const auto gap = static_cast<std::uint64_t>(bus.inter_command_gap);

  PerfReport r;
  const MemTransaction* prev = nullptr;
  std::uint64_t in_burst = 0;
  for (const MemTransaction& t : txns) {
    if (t.beats == 0) continue;
    const bool contiguous =
        prev && prev->region == t.region && prev->write == t.write && prev->offset + prev->beats == t.offset;
    if (!contiguous) {
      if (prev) r.cycles += gap;
      in_burst = max_burst;  // forces a new burst below
    }
    std::uint64_t left = t.beats;
    while (left > 0) {
      if (in_burst == max_burst) {
        r.cycles += setup;
        ++r.bursts;
        in_burst = 0;
      }
      const std::uint64_t n = std::min(left, max_burst - in_burst);
      r.cycles += n;
      in_burst += n;
      left -= n;
    }
    r.beats += t.beats;
    prev = &t;
  }

  const double f = bus.geometry.freq_hz;
  r.bytes_per_token = static_cast<double>(r.beats) * bus.geometry.beat_bytes();
  if (r.beats > 0) {
    r.theoretical_peak_tps = f / static_cast<double>(r.beats);
    r.simulated_tps = f / static_cast<double>(r.cycles);
    r.measured_tps = measured;
    r.utilization_fraction = utilization(measured.value_or(r.simulated_tps), r.theoretical_peak_tps);
  }
  return r;
}

SetupFit fit_setup_cycles(const std::vector<MemTransaction>& txns, BusModel bus, double target) {
  auto util_at = [&](std::int64_t s) {
    bus.burst_setup_cycles = s;
    return simulate_stream(txns, bus).utilization_fraction;
  };
  if (util_at(0) <= target) return {0, util_at(0)};
  // Smallest setup reaching the target from above; grows the bracket first.
  std::int64_t lo = 0, hi = 1;
  while (util_at(hi) > target) {
    lo = hi;
    hi *= 2;
    if (hi > (std::int64_t{1} << 40)) throw DomainError("no setup cost reaches the target utilization");
  }
  while (hi - lo > 1) {
    const std::int64_t mid = lo + (hi - lo) / 2;
    (util_at(mid) > target ? lo : hi) = mid;
  }
  const double ul = util_at(lo), uh = util_at(hi);
  return std::abs(ul - target) <= std::abs(uh - target) ? SetupFit{lo, ul} : SetupFit{hi, uh};
}

// ---- device catalog -------------------------------------------------------

double DeviceEntry::resolved_params() const {
  if (params_moved) return *params_moved;
  if (model == "llama2_7b") {
    const ModelConfig cfg = ModelConfig::llama2_7b();
    const CountingMode m = counting_mode.value_or(CountingMode::non_embedding);
    if (m == CountingMode::total_params) return static_cast<double>(cfg.params_total());
    if (m == CountingMode::non_embedding) return static_cast<double>(cfg.params_non_embedding());
    // Packed traffic expressed in bits_per_weight-sized parameters.
    return bytes_per_token(cfg, 0, m) * 8.0 / bits_per_weight;
  }
  throw ConfigError("device '" + key + "' has neither params_moved nor a known model");
}

const DeviceEntry& DeviceCatalog::find(const std::string& key) const {
  for (const auto& d : devices)
    if (d.key == key) return d;
  std::string valid;
  for (const auto& k : keys()) valid += (valid.empty() ? "" : ", ") + k;
  throw IndexError("unknown device '" + key + "'; valid keys: " + valid);
}

std::vector<std::string> DeviceCatalog::keys() const {
  std::vector<std::string> k;
  for (const auto& d : devices) k.push_back(d.key);
  return k;
}

DeviceCatalog device_catalog_from_json(const std::string& text) {
  DeviceCatalog cat;
  try {
    const auto j = nlohmann::json::parse(text);
    for (const auto& d : j.at("devices")) {
      DeviceEntry e;
      e.key = d.at("key").get<std::string>();
      e.table = d.at("table").get<std::string>();
      e.name = d.at("name").get<std::string>();
      e.platform = d.value("platform", "");
      e.workload = d.value("workload", "");
      e.bandwidth_gbps = d.at("bandwidth_gbps").get<double>();
      if (d.contains("params_moved")) e.params_moved = d.at("params_moved").get<double>();
      e.model = d.value("model", "");
      if (d.contains("counting_mode")) e.counting_mode = parse_counting_mode(d.at("counting_mode").get<std::string>());
      e.bits_per_weight = d.at("bits_per_weight").get<double>();
      e.measured_tps = d.at("measured_tps").get<double>();
      e.published_peak_tps = d.at("published_peak_tps").get<double>();
      e.published_utilization_pct = d.at("published_utilization_pct").get<double>();
      e.citation = d.value("citation", "");
      if (!e.params_moved && e.model.empty()) throw ConfigError("device '" + e.key + "' needs params_moved or model");
      cat.devices.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("device catalog: ") + ex.what());
  }
  return cat;
}

DeviceCatalog load_device_catalog(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return device_catalog_from_json(ss.str());
}

DeviceRow evaluate_device(const DeviceEntry& e) {
  DeviceRow r;
  r.entry = &e;
  r.params = e.resolved_params();
  r.peak_tps = peak_tokens_per_s(e.bandwidth_gbps * 1e9, r.params, e.bits_per_weight);
  r.peak_dev_pct = (r.peak_tps - e.published_peak_tps) / e.published_peak_tps * 100.0;
  r.utilization_pct = utilization(e.measured_tps, e.published_peak_tps) * 100.0;
  r.util_dev_pt = r.utilization_pct - e.published_utilization_pct;
  r.model_utilization_pct = utilization(e.measured_tps, r.peak_tps) * 100.0;
  return r;
}

}  // namespace streamdec
