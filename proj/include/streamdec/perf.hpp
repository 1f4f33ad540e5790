// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "streamdec/layout.hpp"
#include "streamdec/model.hpp"
#include "streamdec/schedule.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace streamdec {

/// bw / (params_moved * bits_per_weight / 8). DomainError unless all three
/// arguments are positive and finite.
double peak_tokens_per_s(double bandwidth_bytes_per_s, double params_moved, double bits_per_weight);

/// measured / peak. DomainError for a non-positive peak or a negative
/// measurement.
double utilization(double measured_tps, double peak_tps);

enum class CountingMode { total_params, non_embedding, packed_exact };

const char* to_string(CountingMode m);
/// Accepts the CLI spellings (total, non-embed, packed) and the enum names.
CountingMode parse_counting_mode(const std::string& s);

/// Per-token traffic in bytes. The parameter modes count `bits` per weight;
/// packed_exact ignores `bits` and sums every beat the token schedule moves
/// at `context_len` cached tokens (weights with their scales and zero
/// points, norm gains, the embedding row, K/V reads and writes).
double bytes_per_token(const ModelConfig& cfg, int context_len, CountingMode mode = CountingMode::non_embedding,
                       double bits = 4.0);

struct BusModel {
  BusGeometry geometry;
  std::int64_t burst_setup_cycles = 0;
  std::int64_t max_burst_beats = 256;
  /// Extra idle cycles between two consecutive bursts that are not
  /// address-contiguous.
  std::int64_t inter_command_gap = 0;

  /// Throws ConfigError on negative timings or a zero burst length.
  void validate() const;
};

struct PerfReport {
  double bytes_per_token = 0.0;
  double theoretical_peak_tps = 0.0;
  double simulated_tps = 0.0;
  std::optional<double> measured_tps;
  /// measured (when given) or simulated, over the theoretical peak.
  double utilization_fraction = 0.0;

  std::uint64_t beats = 0;
  std::uint64_t cycles = 0;
  std::uint64_t bursts = 0;
};

/// Walks the transactions in issue order. A burst opens at every address
/// discontinuity (other region, other offset, read/write switch) and every
/// max_burst_beats beats of a contiguous run; each burst costs
/// burst_setup_cycles, each beat one cycle, and each discontinuity after the
/// first adds inter_command_gap.
PerfReport simulate_stream(const std::vector<MemTransaction>& transactions, const BusModel& bus,
                           std::optional<double> measured_tps = std::nullopt);
inline PerfReport simulate_stream(const TokenSchedule& schedule, const BusModel& bus,
                                  std::optional<double> measured_tps = std::nullopt) {
  return simulate_stream(schedule.transactions(), bus, measured_tps);
}

struct SetupFit {
  std::int64_t setup_cycles = 0;
  double utilization = 1.0;
};

/// Integer burst_setup_cycles whose simulated utilization is closest to
/// `target` (utilization falls monotonically with setup cost).
SetupFit fit_setup_cycles(const std::vector<MemTransaction>& transactions, BusModel bus, double target);

/// One row of the published comparison tables.
struct DeviceEntry {
  std::string key;
  std::string table;  // "II" or "III"
  std::string name;
  std::string platform;
  std::string workload;
  double bandwidth_gbps = 0.0;
  /// Explicit parameter count, or empty when `model` + `counting_mode`
  /// derive it.
  std::optional<double> params_moved;
  std::string model;  // "llama2_7b" or empty
  std::optional<CountingMode> counting_mode;
  double bits_per_weight = 4.0;
  double measured_tps = 0.0;
  double published_peak_tps = 0.0;
  double published_utilization_pct = 0.0;
  std::string citation;

  /// Parameters moved per token under this row's accounting.
  double resolved_params() const;
};

struct DeviceCatalog {
  std::vector<DeviceEntry> devices;

  /// IndexError listing the valid keys when `key` is unknown.
  const DeviceEntry& find(const std::string& key) const;
  std::vector<std::string> keys() const;
};

DeviceCatalog load_device_catalog(const std::string& path);
DeviceCatalog device_catalog_from_json(const std::string& text);

/// Model-side numbers of one catalog row next to the published cells.
struct DeviceRow {
  const DeviceEntry* entry = nullptr;
  double params = 0.0;
  double peak_tps = 0.0;          // from bandwidth and params
  double peak_dev_pct = 0.0;      // (peak - published) / published * 100
  double utilization_pct = 0.0;   // measured / published peak * 100
  double util_dev_pt = 0.0;       // utilization_pct - published, in points
  double model_utilization_pct = 0.0;  // measured / model peak * 100
};

DeviceRow evaluate_device(const DeviceEntry& e);

}  // namespace streamdec
