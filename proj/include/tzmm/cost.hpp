#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "tzmm/types.hpp"

namespace tzmm {

struct CostError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Fixed step costs of one hypercall round trip, in microseconds, as the
/// model decomposes it: trap to the monitor, world switch out to the host,
/// TMI handling, world switch back, return to the guest.
struct HvcModel {
  // steps 1..9
  static constexpr double kSteps[9] = {4, 27, 30, 4, 23, 30, 4, 30, 4};
  static constexpr double kResidual = 94;  // timer state, error checking
  static constexpr double kVanillaReference = 35;

  /// Steps 2..8: the monitor<->host round trip a vanilla hypercall lacks.
  static double roundTrip() {
    double s = 0;
    for (int i = 1; i <= 7; ++i) s += kSteps[i];
    return s;  // 148
  }

  static double total() {
    double s = kResidual;
    for (double v : kSteps) s += v;
    return s;  // 250
  }
};

/// Reference latencies measured on real hardware, kept only for the
/// comparison columns of bench reports.
struct ReferenceLatencies {
  static constexpr double kHvcVanilla = 35, kHvcCvm = 250;
  static constexpr double kIpiVanilla = 122, kIpiCvm = 314;
  static constexpr double kIoVanilla = 1118, kIoCvm = 2612;
};

struct CalibrationSample {
  u64 size_bytes;
  double direct_us;
  double dynamic_us;
};

/// Memcpy latency model. Copy cost is piecewise-linear through the
/// calibration anchors (least-squares slope/intercept kept for
/// extrapolation past the last anchor); the dynamic policy adds a single
/// fitted constant for the map/unmap/TLB-flush work per transfer.
struct MemcpyModel {
  std::vector<CalibrationSample> anchors;  // sorted by size
  double slope = 0;        // us per byte, least squares over direct samples
  double intercept = 0;    // us
  double dynamic_overhead = 0;  // us per transfer
  bool calibrated = false;

  static MemcpyModel fit(std::vector<CalibrationSample> samples) {
    if (samples.size() < 2) throw CostError("DegenerateFit: need >=2 samples");
    std::sort(samples.begin(), samples.end(),
              [](const auto& a, const auto& b) {
                return a.size_bytes < b.size_bytes;
              });
    for (std::size_t i = 1; i < samples.size(); ++i)
      if (samples[i].size_bytes == samples[i - 1].size_bytes)
        throw CostError("DegenerateFit: duplicate sizes");

    MemcpyModel m;
    m.anchors = samples;
    double n = static_cast<double>(samples.size());
    double mx = 0, my = 0;
    for (const auto& s : samples) {
      mx += static_cast<double>(s.size_bytes);
      my += s.direct_us;
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, overhead = 0;
    for (const auto& s : samples) {
      double dx = static_cast<double>(s.size_bytes) - mx;
      sxy += dx * (s.direct_us - my);
      sxx += dx * dx;
      overhead += s.dynamic_us - s.direct_us;
    }
    if (sxx == 0) throw CostError("DegenerateFit");
    m.slope = sxy / sxx;
    m.intercept = my - m.slope * mx;
    m.dynamic_overhead = overhead / n;
    m.calibrated = true;
    return m;
  }

  double copyCost(u64 size_bytes) const {
    if (!calibrated) throw CostError("Uncalibrated");
    const auto& a = anchors;
    if (size_bytes <= a.front().size_bytes) {
      // scale below the first anchor rather than extrapolating negative
      double per_byte = a.front().direct_us / a.front().size_bytes;
      return per_byte * static_cast<double>(size_bytes);
    }
    for (std::size_t i = 1; i < a.size(); ++i) {
      if (size_bytes <= a[i].size_bytes) {
        double x0 = static_cast<double>(a[i - 1].size_bytes);
        double x1 = static_cast<double>(a[i].size_bytes);
        double t = (static_cast<double>(size_bytes) - x0) / (x1 - x0);
        return a[i - 1].direct_us + t * (a[i].direct_us - a[i - 1].direct_us);
      }
    }
    // past the last anchor: continue with the least-squares slope
    return a.back().direct_us +
           m_slopeTail() * static_cast<double>(size_bytes - a.back().size_bytes);
  }

  double latency(u64 size_bytes, MappingPolicy policy) const {
    double c = copyCost(size_bytes);
    return policy == MappingPolicy::Direct ? c : c + dynamic_overhead;
  }

 private:
  double m_slopeTail() const { return slope > 0 ? slope : 0; }
};

/// Default calibration: the four reference buffer sizes.
inline std::vector<CalibrationSample> referenceCalibration() {
  return {{64, 0.9, 2.5}, {256, 1.6, 3.1}, {512, 3.2, 4.7}, {4096, 12.9, 14.5}};
}

enum class ExitReasonCounter {
  Irq,
  HostCall,
  Psci,
  DataAbort,
  SystemOff,
  Quantum,
};

/// Event counters plus the latency-constant table. Counters only ever go
/// up within a run; simulated latency is a linear combination of counters
/// and constants plus the per-byte copy cost.
struct CostLedger {
  u64 world_switch = 0;
  u64 tlb_flush = 0;
  u64 stage2_map = 0;
  u64 stage2_unmap = 0;
  u64 tmi_calls = 0;
  u64 smc_calls = 0;
  u64 bytes_copied = 0;
  u64 irq_emulations = 0;
  std::map<ExitReasonCounter, u64> exits;

  MemcpyModel memcpy_model;

  // per-event constants (us); the dynamic overhead is split across the
  // map/unmap/flush events it is made of
  double world_switch_us = HvcModel::roundTrip();
  double stage2_map_us = 0;
  double stage2_unmap_us = 0;
  double tlb_flush_us = 0;

  void calibrate(const std::vector<CalibrationSample>& samples) {
    memcpy_model = MemcpyModel::fit(samples);
    stage2_map_us = memcpy_model.dynamic_overhead * 0.4;
    stage2_unmap_us = memcpy_model.dynamic_overhead * 0.4;
    tlb_flush_us = memcpy_model.dynamic_overhead * 0.2;
  }

  double simulatedUs() const {
    if (!memcpy_model.calibrated) throw CostError("Uncalibrated");
    double per_byte =
        memcpy_model.copyCost(kGranuleBytes) / static_cast<double>(kGranuleBytes);
    return static_cast<double>(world_switch) * world_switch_us +
           static_cast<double>(stage2_map) * stage2_map_us +
           static_cast<double>(stage2_unmap) * stage2_unmap_us +
           static_cast<double>(tlb_flush) * tlb_flush_us +
           static_cast<double>(bytes_copied) * per_byte;
  }

  u64 exitCount(ExitReasonCounter r) const {
    auto it = exits.find(r);
    return it == exits.end() ? 0 : it->second;
  }
};

}  // namespace tzmm
