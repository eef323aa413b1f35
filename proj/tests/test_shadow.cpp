#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "tzmm/shadow.hpp"

using namespace tzmm;

namespace {

struct Rig {
  PhysicalMemory mem;
  CostLedger ledger;
  ShadowSync sync;
  SecureRegion region;

  explicit Rig(u64 granules = 256)
      : mem(granules, MappingPolicy::Direct), sync(mem, ledger) {
    TzascConfig cfg;
    cfg.regions.push_back({0, granules / 2, false});
    cfg.regions.push_back({granules / 2, granules / 4, true});
    cfg.regions.push_back({3 * granules / 4, granules / 4, false});
    mem.configureTzasc(cfg);
    mem.endSetupPhase();
    ledger.calibrate(referenceCalibration());
    region = mem.reserveSecureRegion(1, 8);
  }

  void fill(GranuleIndex g, u8 seed) {
    auto& c = mem.granuleMut(g).contents;
    for (std::size_t i = 0; i < c.size(); ++i)
      c[i] = static_cast<u8>(seed + i * 13);
  }
};

}  // namespace

TEST_CASE("both policies move identical bytes; only the ledger differs") {
  Rig a, b;
  a.fill(a.region.base, 0x10);
  b.fill(b.region.base, 0x10);

  a.sync.sync(SyncDirection::SecureToShadow, 1, a.region.base, 1,
              MappingPolicy::Direct);
  b.sync.sync(SyncDirection::SecureToShadow, 1, b.region.base, 1,
              MappingPolicy::Dynamic);

  GranuleIndex sa = a.region.shadowOf(a.region.base);
  GranuleIndex sb = b.region.shadowOf(b.region.base);
  CHECK(a.mem.granule(sa).contents == b.mem.granule(sb).contents);
  CHECK(a.mem.granule(sa).contents == a.mem.granule(a.region.base).contents);

  CHECK(a.ledger.stage2_map == 0);
  CHECK(a.ledger.stage2_unmap == 0);
  CHECK(a.ledger.tlb_flush == 0);
  CHECK(b.ledger.stage2_map == 1);
  CHECK(b.ledger.stage2_unmap == 1);
  CHECK(b.ledger.tlb_flush == 1);
  CHECK(a.ledger.bytes_copied == b.ledger.bytes_copied);
}

TEST_CASE("shadow-to-secure is the inverse transfer") {
  Rig r;
  GranuleIndex shadow = r.region.shadowOf(r.region.base + 2);
  r.fill(shadow, 0x42);
  r.sync.sync(SyncDirection::ShadowToSecure, 1, r.region.base + 2, 1,
              MappingPolicy::Direct);
  CHECK(r.mem.granule(r.region.base + 2).contents ==
        r.mem.granule(shadow).contents);
}

TEST_CASE("ledger counts two page-syncs of a round trip exactly") {
  Rig r;
  r.sync.sync(SyncDirection::SecureToShadow, 1, r.region.base, 3,
              MappingPolicy::Direct);
  r.sync.sync(SyncDirection::ShadowToSecure, 1, r.region.base, 3,
              MappingPolicy::Direct);
  CHECK(r.ledger.bytes_copied == 2 * 3 * kGranuleBytes);
}

TEST_CASE("partial last page moves only the requested bytes") {
  Rig r;
  auto stats = r.sync.sync(SyncDirection::SecureToShadow, 1, r.region.base, 2,
                           MappingPolicy::Direct, 100);
  CHECK(stats.bytes == kGranuleBytes + 100);
  CHECK(r.ledger.bytes_copied == kGranuleBytes + 100);
}

TEST_CASE("transfers outside the owning region are refused") {
  Rig r;
  REQUIRE_THROWS_AS(r.sync.sync(SyncDirection::SecureToShadow, 1,
                                r.region.base + r.region.count, 1,
                                MappingPolicy::Direct),
                    SyncError);
  // another cVM id has no region at all
  REQUIRE_THROWS_AS(r.sync.sync(SyncDirection::SecureToShadow, 7,
                                r.region.base, 1, MappingPolicy::Direct),
                    SyncError);
}

TEST_CASE("protected pages leave only ciphertext in the shadow") {
  Rig r;
  Bytes key(32, 0x5C);
  r.fill(r.region.base, 0x33);
  r.sync.protection().protect(1, r.region.base, 0x11, key);
  r.sync.sync(SyncDirection::SecureToShadow, 1, r.region.base, 1,
              MappingPolicy::Direct);
  GranuleIndex shadow = r.region.shadowOf(r.region.base);
  CHECK(r.mem.granule(shadow).contents !=
        r.mem.granule(r.region.base).contents);

  // the inverse transfer restores the plaintext
  auto plain = r.mem.granule(r.region.base).contents;
  r.mem.granuleMut(r.region.base).contents.fill(0);
  r.sync.sync(SyncDirection::ShadowToSecure, 1, r.region.base, 1,
              MappingPolicy::Direct);
  CHECK(r.mem.granule(r.region.base).contents == plain);
}

TEST_CASE("tweak sensitivity: equal plaintext on two pages encrypts differently") {
  Rig r;
  Bytes key(32, 0x5C);
  r.fill(r.region.base, 0x33);
  r.fill(r.region.base + 1, 0x33);
  REQUIRE(r.mem.granule(r.region.base).contents ==
          r.mem.granule(r.region.base + 1).contents);
  r.sync.protection().protect(1, r.region.base, 0x11, key);
  r.sync.protection().protect(1, r.region.base + 1, 0x12, key);
  r.sync.sync(SyncDirection::SecureToShadow, 1, r.region.base, 2,
              MappingPolicy::Direct);
  CHECK(r.mem.granule(r.region.shadowOf(r.region.base)).contents !=
        r.mem.granule(r.region.shadowOf(r.region.base + 1)).contents);
}

TEST_CASE("a tampered shadow page fails its integrity check on the way in") {
  Rig r;
  Bytes key(32, 0x5C);
  r.fill(r.region.base, 0x44);
  r.sync.protection().protect(1, r.region.base, 0x21, key);
  r.sync.sync(SyncDirection::SecureToShadow, 1, r.region.base, 1,
              MappingPolicy::Direct);
  GranuleIndex shadow = r.region.shadowOf(r.region.base);
  r.mem.granuleMut(shadow).contents[100] ^= 0x01;
  REQUIRE_THROWS_AS(r.sync.sync(SyncDirection::ShadowToSecure, 1,
                                r.region.base, 1, MappingPolicy::Direct),
                    SyncError);
}

TEST_CASE("the host-visible sidecar can be stashed and restored") {
  Rig r;
  Bytes key(32, 0x5C);
  r.fill(r.region.base, 0x55);
  r.sync.protection().protect(1, r.region.base, 0x31, key);
  r.sync.sync(SyncDirection::SecureToShadow, 1, r.region.base, 1,
              MappingPolicy::Direct);
  auto mac = r.sync.protection().sidecarEntry(1, r.region.base);
  REQUIRE(mac.has_value());
  GranuleIndex shadow = r.region.shadowOf(r.region.base);
  auto cipher = r.mem.granule(shadow).contents;

  // host swaps the page out and back in, sidecar included
  r.mem.granuleMut(shadow).contents.fill(0);
  r.sync.protection().setSidecarEntry(1, r.region.base, Bytes(32, 0));
  r.mem.granuleMut(shadow).contents = cipher;
  r.sync.protection().setSidecarEntry(1, r.region.base, *mac);
  REQUIRE_NOTHROW(r.sync.sync(SyncDirection::ShadowToSecure, 1, r.region.base,
                              1, MappingPolicy::Direct));
}
