#pragma once

#include <map>
#include <optional>
#include <set>
#include <stdexcept>

#include "tzmm/cost.hpp"
#include "tzmm/crypto.hpp"
#include "tzmm/mem.hpp"
#include "tzmm/types.hpp"

namespace tzmm {

enum class SyncDirection { SecureToShadow, ShadowToSecure };

enum class SyncErrorCode {
  RegionOutOfBounds,
  TokenLeak,
  NotSharedRegion,
  TagFailure,
};

struct SyncError : std::runtime_error {
  SyncErrorCode code;
  explicit SyncError(SyncErrorCode c, const char* what)
      : std::runtime_error(what), code(c) {}
};

struct TransferStats {
  u64 bytes = 0;
  u64 granules = 0;
};

/// Pages (by secure granule) whose shadow copies are encrypted with a
/// per-cVM key, tweaked by the IPA page index, plus a host-side MAC
/// sidecar for integrity.
class PageProtection {
 public:
  void protect(CvmId cvm, GranuleIndex secure_granule, u64 ipa_page_index,
               const Bytes& io_key256) {
    Entry e;
    e.tweak = ipa_page_index;
    // one 256-bit I/O key per cVM, expanded to the two XTS halves
    e.xts_key = crypto::hkdf(io_key256, {}, "io-xts", 64);
    e.mac_key = crypto::hkdf(io_key256, {}, "io-mac", 32);
    entries_[{cvm, secure_granule}] = e;
  }

  void unprotect(CvmId cvm, GranuleIndex secure_granule) {
    entries_.erase({cvm, secure_granule});
  }

  bool isProtected(CvmId cvm, GranuleIndex g) const {
    return entries_.count({cvm, g}) != 0;
  }

  /// Encrypt a secure page into its shadow slot; record the MAC sidecar.
  void transformOut(CvmId cvm, GranuleIndex g, const u8* secure, u8* shadow) {
    const Entry& e = entries_.at({cvm, g});
    crypto::xtsPage(e.xts_key, e.tweak, secure, shadow, /*encrypt=*/true);
    sidecar_[{cvm, g}] = crypto::hmacSha256(e.mac_key, shadow, kGranuleBytes);
  }

  /// Verify the sidecar and decrypt a shadow page back into secure memory.
  bool transformIn(CvmId cvm, GranuleIndex g, const u8* shadow, u8* secure) {
    const Entry& e = entries_.at({cvm, g});
    auto it = sidecar_.find({cvm, g});
    if (it == sidecar_.end() ||
        it->second != crypto::hmacSha256(e.mac_key, shadow, kGranuleBytes))
      return false;
    crypto::xtsPage(e.xts_key, e.tweak, shadow, secure, /*encrypt=*/false);
    return true;
  }

  // The sidecar is host-visible: device backends may stash and restore
  // entries alongside the ciphertext they move.
  std::optional<Bytes> sidecarEntry(CvmId cvm, GranuleIndex g) const {
    auto it = sidecar_.find({cvm, g});
    if (it == sidecar_.end()) return std::nullopt;
    return it->second;
  }
  void setSidecarEntry(CvmId cvm, GranuleIndex g, const Bytes& mac) {
    sidecar_[{cvm, g}] = mac;
  }

 private:
  struct Entry {
    u64 tweak = 0;
    Bytes xts_key;
    Bytes mac_key;
  };
  std::map<std::pair<CvmId, GranuleIndex>, Entry> entries_;
  std::map<std::pair<CvmId, GranuleIndex>, Bytes> sidecar_;
};

/// One transfer interface, two accounting policies. Direct uses the fixed
/// shadow offset and moves bytes; Dynamic pays a map/unmap/flush per
/// transfer on top of the same copy.
class ShadowSync {
 public:
  ShadowSync(PhysicalMemory& mem, CostLedger& ledger)
      : mem_(mem), ledger_(ledger) {}

  PageProtection& protection() { return protection_; }
  const PageProtection& protection() const { return protection_; }

  /// Where a secure granule's shadow copy lives. Direct: the region's
  /// fixed offset. Dynamic: a host-provided normal-world page, claimed on
  /// first use (the host maps it in and out around each transfer).
  GranuleIndex shadowOf(CvmId cvm, GranuleIndex sg) {
    if (const SecureRegion* r = mem_.regionOf(cvm); r && r->contains(sg))
      return r->shadowOf(sg);
    auto it = dyn_shadow_.find({cvm, sg});
    if (it != dyn_shadow_.end()) return it->second;
    for (GranuleIndex g = mem_.size(); g-- > 0;) {
      Granule& gr = mem_.granuleMut(g);
      if (gr.world == World::Normal && gr.state == GranuleState::NsFree) {
        gr.state = GranuleState::NsShadow;
        dyn_shadow_[{cvm, sg}] = g;
        return g;
      }
    }
    throw SyncError(SyncErrorCode::RegionOutOfBounds,
                    "no normal-world page left for a shadow copy");
  }

  TransferStats sync(SyncDirection dir, CvmId cvm, GranuleIndex secure_base,
                     u64 count, MappingPolicy policy,
                     std::optional<u64> bytes_in_last = std::nullopt) {
    const SecureRegion* region = mem_.regionOf(cvm);
    if (region) {
      if (secure_base < region->base ||
          secure_base + count > region->base + region->count)
        throw SyncError(SyncErrorCode::RegionOutOfBounds,
                        "range outside the cVM secure region");
    } else {
      for (u64 i = 0; i < count; ++i) {
        const Granule& g = mem_.granule(secure_base + i);
        if (g.world != World::Secure || !g.owner || *g.owner != cvm)
          throw SyncError(SyncErrorCode::RegionOutOfBounds,
                          "range outside the cVM's granules");
      }
    }
    if (policy == MappingPolicy::Dynamic) {
      if (dynamic_inflight_)
        throw SyncError(SyncErrorCode::TokenLeak,
                        "previous dynamic transfer not completed");
      dynamic_inflight_ = true;
    }

    TransferStats stats;
    for (u64 i = 0; i < count; ++i) {
      GranuleIndex sg = secure_base + i;
      GranuleIndex hg = shadowOf(cvm, sg);
      Granule& secure = mem_.granuleMut(sg);
      Granule& shadow = mem_.granuleMut(hg);
      u64 n = (i + 1 == count && bytes_in_last) ? *bytes_in_last : kGranuleBytes;
      if (protection_.isProtected(cvm, sg)) {
        // protected pages always move whole
        if (dir == SyncDirection::SecureToShadow)
          protection_.transformOut(cvm, sg, secure.contents.data(),
                                   shadow.contents.data());
        else if (!protection_.transformIn(cvm, sg, shadow.contents.data(),
                                          secure.contents.data()))
          throw SyncError(SyncErrorCode::TagFailure,
                          "shadow page failed integrity check");
        n = kGranuleBytes;
      } else {
        const u8* src = dir == SyncDirection::SecureToShadow
                            ? secure.contents.data()
                            : shadow.contents.data();
        u8* dst = dir == SyncDirection::SecureToShadow ? shadow.contents.data()
                                                       : secure.contents.data();
        std::memcpy(dst, src, n);
      }
      stats.bytes += n;
      ++stats.granules;
    }

    ledger_.bytes_copied += stats.bytes;
    if (policy == MappingPolicy::Dynamic) {
      ledger_.stage2_map += 1;
      ledger_.stage2_unmap += 1;
      ledger_.tlb_flush += 1;
      dynamic_inflight_ = false;  // map/copy/unmap complete in one command
    }
    return stats;
  }

  double simulateMemcpyLatencyUs(u64 size_bytes, MappingPolicy policy) const {
    return ledger_.memcpy_model.latency(size_bytes, policy);
  }

 private:
  PhysicalMemory& mem_;
  CostLedger& ledger_;
  PageProtection protection_;
  bool dynamic_inflight_ = false;
  std::map<std::pair<CvmId, GranuleIndex>, GranuleIndex> dyn_shadow_;
};

}  // namespace tzmm
