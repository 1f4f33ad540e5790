// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "streamdec/perf.hpp"

#include <cmath>
#include <limits>

using namespace streamdec;

namespace {

struct BeatCount {
  std::uint64_t cycles = 0, beats = 0, bursts = 0;
};

// Beat-by-beat event walk: each beat carries its own address and the bus
// opens a new command whenever the address does not follow the previous one.
BeatCount walk_beats(const std::vector<MemTransaction>& tx, std::int64_t setup, std::int64_t max_burst,
                     std::int64_t gap) {
  BeatCount c;
  const std::string* region = nullptr;
  bool write = false;
  std::uint64_t next = 0;
  std::int64_t run = 0;
  bool started = false;
  for (const MemTransaction& t : tx)
    for (std::uint64_t i = 0; i < t.beats; ++i) {
      const std::uint64_t addr = t.offset + i;
      const bool follows = started && *region == t.region && write == t.write && addr == next;
      if (!follows || run == max_burst) {
        if (!follows && started) c.cycles += static_cast<std::uint64_t>(gap);
        c.cycles += static_cast<std::uint64_t>(setup);
        ++c.bursts;
        run = 0;
      }
      region = &t.region;
      write = t.write;
      next = addr + 1;
      started = true;
      ++run;
      ++c.beats;
      ++c.cycles;
    }
  return c;
}

BusModel kv260_bus() {
  BusModel b;
  b.geometry = ModelConfig::llama2_7b().bus;
  return b;
}

}  // namespace

TEST_CASE("peak token/s examples") {
  CHECK(peak_tokens_per_s(460e9, 1.5e9, 16) == doctest::Approx(153.33).epsilon(1e-4));
  CHECK(peak_tokens_per_s(21.3e9, 1.1e9, 8) == doctest::Approx(19.36).epsilon(1e-3));
  const double kv = peak_tokens_per_s(19.2e9, static_cast<double>(ModelConfig::llama2_7b().params_non_embedding()), 4);
  CHECK(kv == doctest::Approx(5.812).epsilon(1e-3));
  // Dimensional check: bytes/s over bytes/token.
  CHECK(peak_tokens_per_s(8.0, 4.0, 4.0) == 4.0);
  CHECK_THROWS_AS(peak_tokens_per_s(0.0, 1e9, 4), DomainError);
  CHECK_THROWS_AS(peak_tokens_per_s(1e9, -1.0, 4), DomainError);
  CHECK_THROWS_AS(peak_tokens_per_s(1e9, 1e9, std::numeric_limits<double>::infinity()), DomainError);
}

TEST_CASE("utilization examples") {
  CHECK(utilization(4.9, 5.8) == doctest::Approx(0.8448).epsilon(1e-3));
  CHECK(utilization(0.0, 5.8) == 0.0);
  CHECK_THROWS_AS(utilization(1.0, 0.0), DomainError);
  CHECK_THROWS_AS(utilization(-1.0, 2.0), DomainError);
}

TEST_CASE("counting modes") {
  const ModelConfig c = ModelConfig::llama2_7b();
  const double ne = bytes_per_token(c, 1024);
  CHECK(ne == doctest::Approx(3.30367e9).epsilon(1e-5));
  CHECK(bytes_per_token(c, 1024, CountingMode::total_params) == static_cast<double>(c.params_total()) * 4 / 8);
  CHECK(bytes_per_token(c, 1024, CountingMode::total_params, 16) == static_cast<double>(c.params_total()) * 2);
  CHECK(bytes_per_token(c, 0, CountingMode::packed_exact) == 3433385984.0);
  const double packed = bytes_per_token(c, 1023, CountingMode::packed_exact);
  CHECK(packed == 3709947904.0);
  CHECK(packed >= ne * (1.0 + 20.0 / 512.0));
  CHECK(parse_counting_mode("non-embed") == CountingMode::non_embedding);
  CHECK(parse_counting_mode("packed_exact") == CountingMode::packed_exact);
  CHECK(std::string(to_string(CountingMode::total_params)) == "total_params");
  CHECK_THROWS_AS(parse_counting_mode("bogus"), ConfigError);
}

TEST_CASE("burst simulator agrees with a beat-level walk") {
  const ModelConfig cfg = ModelConfig::tiny();
  BusModel bus;
  bus.geometry = cfg.bus;
  bus.burst_setup_cycles = 8;
  const auto tx = build_token_schedule(cfg, 5).transactions();
  const PerfReport r = simulate_stream(tx, bus);
  CHECK(r.beats == 14568);
  CHECK(r.bursts == 143);
  CHECK(r.cycles == 15712);

  for (std::int64_t setup : {0, 3, 8}) {
    for (std::int64_t burst : {1, 16, 256}) {
      for (std::int64_t gap : {0, 5}) {
        bus.burst_setup_cycles = setup;
        bus.max_burst_beats = burst;
        bus.inter_command_gap = gap;
        for (int t : {0, 7, 33}) {
          const auto txt = build_token_schedule(cfg, t).transactions();
          const PerfReport s = simulate_stream(txt, bus);
          const BeatCount w = walk_beats(txt, setup, burst, gap);
          REQUIRE(s.beats == w.beats);
          REQUIRE(s.bursts == w.bursts);
          REQUIRE(s.cycles == w.cycles);
        }
      }
    }
  }
}

TEST_CASE("burst simulator: ideal bus, monotone setup cost, fitted setup") {
  const auto tx = build_token_schedule(ModelConfig::llama2_7b(), 512).transactions();
  BusModel bus = kv260_bus();
  const PerfReport ideal = simulate_stream(tx, bus);
  CHECK(ideal.utilization_fraction == 1.0);
  CHECK(ideal.cycles == ideal.beats);
  CHECK(ideal.bursts == 223039);
  double prev = 2.0;
  for (std::int64_t s : {0, 1, 8, 32, 64, 128}) {
    bus.burst_setup_cycles = s;
    const double u = simulate_stream(tx, bus).utilization_fraction;
    CHECK(u <= prev);
    prev = u;
  }
  bus.burst_setup_cycles = 32;
  CHECK(simulate_stream(tx, bus).utilization_fraction == doctest::Approx(0.88661).epsilon(1e-4));
  const SetupFit fit = fit_setup_cycles(tx, kv260_bus(), 0.845);
  CHECK(fit.setup_cycles == 46);
  CHECK(fit.utilization == doctest::Approx(0.84471).epsilon(1e-4));

  const PerfReport m = simulate_stream(tx, kv260_bus(), 4.9);
  CHECK(m.utilization_fraction == doctest::Approx(4.9 / m.theoretical_peak_tps));
}

TEST_CASE("bus model validation") {
  BusModel b = kv260_bus();
  b.max_burst_beats = 0;
  CHECK_THROWS_AS(b.validate(), ConfigError);
  b = kv260_bus();
  b.burst_setup_cycles = -1;
  CHECK_THROWS_AS(simulate_stream(std::vector<MemTransaction>{}, b), ConfigError);
}

TEST_CASE("device catalog") {
  const DeviceCatalog cat = load_device_catalog(STREAMDEC_DATA_DIR "/devices.json");
  CHECK(cat.devices.size() == 12);
  const DeviceEntry& kv = cat.find("kv260");
  CHECK(kv.resolved_params() == static_cast<double>(ModelConfig::llama2_7b().params_non_embedding()));
  const DeviceRow r = evaluate_device(kv);
  CHECK(r.peak_tps == doctest::Approx(5.812).epsilon(1e-3));
  CHECK(std::abs(r.util_dev_pt) < 0.5);
  try {
    cat.find("nope");
    FAIL("expected IndexError");
  } catch (const IndexError& e) {
    CHECK(std::string(e.what()).find("dfx_u280") != std::string::npos);
  }
  CHECK_THROWS_AS(device_catalog_from_json("[]"), ConfigError);
  CHECK_THROWS_AS(load_device_catalog("/nonexistent/devices.json"), IoError);
  DeviceEntry bad = kv;
  bad.bandwidth_gbps = 0.0;
  CHECK_THROWS_AS(evaluate_device(bad), DomainError);
}
