#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "tzmm/mem.hpp"

using namespace tzmm;

TEST_CASE("address-space controller accepts at most eight regions") {
  PhysicalMemory mem(1024);
  TzascConfig cfg;
  for (u64 i = 0; i < 8; ++i) cfg.regions.push_back({i * 16, 16, i % 2 == 0});
  REQUIRE_NOTHROW(mem.configureTzasc(cfg));

  PhysicalMemory mem2(1024);
  cfg.regions.push_back({512, 16, true});
  REQUIRE_THROWS_AS(mem2.configureTzasc(cfg), MemError);
}

TEST_CASE("overlapping regions are rejected") {
  PhysicalMemory mem(1024);
  TzascConfig cfg;
  cfg.regions.push_back({0, 100, true});
  cfg.regions.push_back({50, 100, false});
  REQUIRE_THROWS_AS(mem.configureTzasc(cfg), MemError);
}

TEST_CASE("regions past the end of memory are rejected") {
  PhysicalMemory mem(64);
  TzascConfig cfg;
  cfg.regions.push_back({60, 10, true});
  REQUIRE_THROWS_AS(mem.configureTzasc(cfg), MemError);
}

TEST_CASE("configuration is sealed once the setup phase ends") {
  PhysicalMemory mem(64);
  mem.endSetupPhase();
  TzascConfig cfg;
  cfg.regions.push_back({0, 8, true});
  REQUIRE_THROWS_AS(mem.configureTzasc(cfg), MemError);
}

TEST_CASE("world assignment follows the region map") {
  PhysicalMemory mem(64);
  TzascConfig cfg;
  cfg.regions.push_back({0, 16, false});
  cfg.regions.push_back({16, 16, true});
  mem.configureTzasc(cfg);
  CHECK(mem.granule(0).world == World::Normal);
  CHECK(mem.granule(15).world == World::Normal);
  CHECK(mem.granule(16).world == World::Secure);
  CHECK(mem.granule(31).world == World::Secure);
}

namespace {

PhysicalMemory directMem(u64 n = 256) {
  PhysicalMemory mem(n, MappingPolicy::Direct);
  TzascConfig cfg;
  cfg.regions.push_back({0, n / 2, false});
  cfg.regions.push_back({n / 2, n / 4, true});
  cfg.regions.push_back({3 * n / 4, n / 4, false});
  mem.configureTzasc(cfg);
  mem.endSetupPhase();
  return mem;
}

}  // namespace

TEST_CASE("host access faults on every secure granule") {
  PhysicalMemory mem = directMem();
  SecureRegion r = mem.reserveSecureRegion(1, 8);
  for (u64 i = 0; i < mem.size(); ++i) {
    AccessResult got =
        mem.checkAccess(Requestor::host(), i, AccessMode::Read);
    if (mem.granule(i).world == World::Secure)
      CHECK(got == AccessResult::Fault);
    else
      CHECK(got == AccessResult::Allowed);
  }
  CHECK(mem.hostFaultsOnAllSecure());
  CHECK(r.count == 8);
}

TEST_CASE("a cVM may touch its own secure granules and normal memory only") {
  PhysicalMemory mem = directMem();
  SecureRegion ra = mem.reserveSecureRegion(1, 4);
  SecureRegion rb = mem.reserveSecureRegion(2, 4);
  CHECK(mem.checkAccess(Requestor::cvmId(1), ra.base, AccessMode::Write) ==
        AccessResult::Allowed);
  CHECK(mem.checkAccess(Requestor::cvmId(1), rb.base, AccessMode::Read) ==
        AccessResult::Fault);
  CHECK(mem.checkAccess(Requestor::cvmId(2), rb.base, AccessMode::Write) ==
        AccessResult::Allowed);
  // normal world is shared
  CHECK(mem.checkAccess(Requestor::cvmId(1), 0, AccessMode::Read) ==
        AccessResult::Allowed);
  CHECK(mem.ownershipDisjoint());
}

TEST_CASE("direct mapping reserves shadow pages at a fixed offset") {
  PhysicalMemory mem = directMem();
  SecureRegion r = mem.reserveSecureRegion(1, 8);
  for (u64 i = 0; i < r.count; ++i) {
    GranuleIndex s = r.base + i;
    GranuleIndex h = r.shadowOf(s);
    CHECK(static_cast<std::int64_t>(h) - static_cast<std::int64_t>(s) ==
          r.shadow_offset);
    CHECK(mem.granule(h).world == World::Normal);
  }
}

TEST_CASE("releasing a secure region zeroes its granules") {
  PhysicalMemory mem = directMem();
  SecureRegion r = mem.reserveSecureRegion(1, 4);
  for (u64 i = 0; i < r.count; ++i)
    mem.granuleMut(r.base + i).contents.fill(0x5A);
  mem.releaseSecureRegion(1);
  for (u64 i = 0; i < r.count; ++i) {
    CHECK(mem.granule(r.base + i).isZeroed());
    CHECK_FALSE(mem.granule(r.base + i).owner.has_value());
  }
}

TEST_CASE("delegation walks undelegated -> delegated -> assigned and back") {
  PhysicalMemory mem(64, MappingPolicy::Dynamic);
  TzascConfig cfg;
  cfg.regions.push_back({0, 64, false});
  mem.configureTzasc(cfg);
  mem.endSetupPhase();

  CHECK_FALSE(mem.gstEntry(7).has_value());
  mem.delegate(7);
  CHECK(mem.gstEntry(7) == DelegationStatus::Delegated);
  CHECK(mem.granule(7).world == World::Secure);
  mem.undelegate(7);
  CHECK(mem.gstEntry(7) == DelegationStatus::Undelegated);
  CHECK(mem.granule(7).world == World::Normal);

  // once a delegated granule is assigned to a cVM, the host can no
  // longer pull it back with an undelegate
  mem.delegate(9);
  auto got = mem.allocSecure(1, GranuleState::Data);
  REQUIRE(got == 9);
  CHECK(mem.gstEntry(9) == DelegationStatus::Assigned);
  REQUIRE_THROWS_AS(mem.undelegate(9), MemError);
}

TEST_CASE("double delegation is rejected") {
  PhysicalMemory mem(64, MappingPolicy::Dynamic);
  TzascConfig cfg;
  cfg.regions.push_back({0, 64, false});
  mem.configureTzasc(cfg);
  mem.endSetupPhase();
  mem.delegate(3);
  REQUIRE_THROWS_AS(mem.delegate(3), MemError);
}

TEST_CASE("ownership stays disjoint under random reserve and release") {
  PhysicalMemory mem = directMem(512);
  std::mt19937_64 rng(42);
  std::set<CvmId> live;
  for (int step = 0; step < 200; ++step) {
    if (live.size() < 4 && (live.empty() || rng() % 2 == 0)) {
      CvmId id = static_cast<CvmId>(rng() % 100 + 1);
      if (live.count(id)) continue;
      try {
        mem.reserveSecureRegion(id, rng() % 8 + 1);
        live.insert(id);
      } catch (const MemError&) {
      }
    } else if (!live.empty()) {
      CvmId id = *live.begin();
      mem.releaseSecureRegion(id);
      live.erase(id);
    }
    REQUIRE(mem.ownershipDisjoint());
    REQUIRE(mem.hostFaultsOnAllSecure());
  }
}
