#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "tzmm/cost.hpp"

using namespace tzmm;

namespace {

bool within(double got, double want, double rel) {
  return std::fabs(got - want) <= rel * std::fabs(want);
}

}  // namespace

TEST_CASE("hypercall step decomposition is internally consistent") {
  double all = 0;
  for (double v : HvcModel::kSteps) all += v;
  CHECK(HvcModel::roundTrip() == 148.0);
  CHECK(all + HvcModel::kResidual == 250.0);
  CHECK(HvcModel::total() == 250.0);
  CHECK(HvcModel::kVanillaReference == 35.0);
}

TEST_CASE("fit over the reference table lands the overhead in [1.5, 1.6]") {
  MemcpyModel m = MemcpyModel::fit(referenceCalibration());
  CHECK(m.dynamic_overhead >= 1.5);
  CHECK(m.dynamic_overhead <= 1.6);
}

TEST_CASE("all eight reference cells reproduce within 10 percent") {
  MemcpyModel m = MemcpyModel::fit(referenceCalibration());
  for (const auto& s : referenceCalibration()) {
    CHECK(within(m.latency(s.size_bytes, MappingPolicy::Direct), s.direct_us,
                 0.10));
    CHECK(within(m.latency(s.size_bytes, MappingPolicy::Dynamic), s.dynamic_us,
                 0.10));
  }
}

TEST_CASE("interpolation oracle: midpoint of two anchors") {
  // between the 256 B (1.6 us) and 512 B (3.2 us) anchors the model is
  // linear, so 384 B must cost exactly the average
  MemcpyModel m = MemcpyModel::fit(referenceCalibration());
  CHECK(m.copyCost(384) == Catch::Approx((1.6 + 3.2) / 2));
  // below the first anchor it scales through the origin
  CHECK(m.copyCost(32) == Catch::Approx(0.9 / 2));
  CHECK(m.copyCost(0) == Catch::Approx(0.0));
}

TEST_CASE("dynamic latency dominates direct by a size-independent constant") {
  MemcpyModel m = MemcpyModel::fit(referenceCalibration());
  std::mt19937_64 rng(5);
  for (int i = 0; i < 500; ++i) {
    u64 size = rng() % (1 << 20) + 1;
    double d = m.latency(size, MappingPolicy::Direct);
    double y = m.latency(size, MappingPolicy::Dynamic);
    REQUIRE(y >= d);
    REQUIRE(y - d == Catch::Approx(m.dynamic_overhead));
  }
}

TEST_CASE("copy cost is monotone in size") {
  MemcpyModel m = MemcpyModel::fit(referenceCalibration());
  double prev = -1;
  for (u64 size = 0; size <= 8192; size += 64) {
    double c = m.copyCost(size);
    REQUIRE(c >= prev);
    prev = c;
  }
}

TEST_CASE("degenerate fits are rejected") {
  CHECK_THROWS_AS(MemcpyModel::fit({{64, 0.9, 2.5}}), CostError);
  CHECK_THROWS_AS(MemcpyModel::fit({{64, 0.9, 2.5}, {64, 1.0, 2.6}}),
                  CostError);
  CHECK_THROWS_AS(MemcpyModel().copyCost(64), CostError);
}

TEST_CASE("identical direct and dynamic samples fit a zero overhead") {
  MemcpyModel m = MemcpyModel::fit({{64, 1.0, 1.0}, {128, 2.0, 2.0}});
  CHECK(m.dynamic_overhead == 0.0);
}

TEST_CASE("ledger latency is a linear combination of its counters") {
  CostLedger l;
  l.calibrate(referenceCalibration());
  double empty = l.simulatedUs();
  CHECK(empty == 0.0);
  l.world_switch = 2;
  double two_switches = l.simulatedUs();
  CHECK(two_switches == Catch::Approx(2 * HvcModel::roundTrip()));
  l.stage2_map = 1;
  l.stage2_unmap = 1;
  l.tlb_flush = 1;
  // one dynamic transfer adds exactly the fitted overhead
  CHECK(l.simulatedUs() - two_switches ==
        Catch::Approx(l.memcpy_model.dynamic_overhead));
}
