#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include "tzmm/cost.hpp"
#include "tzmm/types.hpp"

namespace tzmm {

enum class MemErrorCode {
  RegionLimitExceeded,
  OverlappingRegions,
  OutOfSecureMemory,
  OutOfShadowMemory,
  UnknownCVm,
  WrongState,
  PolicyMismatch,
  OutOfRange,
  SetupPhaseOver,
};

struct MemError : std::runtime_error {
  MemErrorCode code;
  explicit MemError(MemErrorCode c, const char* what)
      : std::runtime_error(what), code(c) {}
};

/// A 4 KiB frame of physical memory: the unit of every isolation check.
struct Granule {
  World world = World::Normal;
  GranuleState state = GranuleState::NsFree;
  std::optional<CvmId> owner;
  std::array<u8, kGranuleBytes> contents{};

  bool isZeroed() const {
    for (u8 b : contents)
      if (b != 0) return false;
    return true;
  }
};

struct TzascRegion {
  GranuleIndex base = 0;
  u64 count = 0;
  bool secure = false;
};

struct TzascConfig {
  std::vector<TzascRegion> regions;
};

enum class DelegationStatus { Undelegated, Delegated, Assigned };

struct SecureRegion {
  CvmId cvm = 0;
  GranuleIndex base = 0;
  u64 count = 0;
  std::int64_t shadow_offset = 0;  // granules from secure base to shadow base

  GranuleIndex shadowOf(GranuleIndex g) const {
    return static_cast<GranuleIndex>(static_cast<std::int64_t>(g) +
                                     shadow_offset);
  }
  bool contains(GranuleIndex g) const { return g >= base && g < base + count; }
};

/// Granule-level physical memory with world partitioning and both
/// ownership-tracking policies. All mutation goes through the monitor's
/// dispatcher; this class itself promises one command at a time, nothing
/// more.
class PhysicalMemory {
 public:
  explicit PhysicalMemory(u64 granules = 4096,
                          MappingPolicy policy = MappingPolicy::Direct,
                          CostLedger* ledger = nullptr)
      : granules_(granules), policy_(policy), ledger_(ledger) {}

  u64 size() const { return granules_.size(); }
  MappingPolicy policy() const { return policy_; }
  void attachLedger(CostLedger* l) { ledger_ = l; }

  void configureTzasc(const TzascConfig& cfg) {
    if (!setup_phase_)
      throw MemError(MemErrorCode::SetupPhaseOver,
                     "tzasc is fixed once a cVM exists");
    if (cfg.regions.size() > kTzascMaxRegions)
      throw MemError(MemErrorCode::RegionLimitExceeded, "more than 8 regions");
    auto sorted = cfg.regions;
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.base < b.base; });
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      const auto& r = sorted[i];
      if (r.base + r.count > size())
        throw MemError(MemErrorCode::OutOfRange, "region past end of memory");
      if (i > 0 && sorted[i - 1].base + sorted[i - 1].count > r.base)
        throw MemError(MemErrorCode::OverlappingRegions, "regions overlap");
    }
    tzasc_.regions = sorted;
    for (auto& g : granules_) {
      g.world = World::Normal;
      g.state = GranuleState::NsFree;
    }
    for (const auto& r : sorted) {
      for (u64 i = 0; i < r.count; ++i) {
        auto& g = granules_[r.base + i];
        g.world = r.secure ? World::Secure : World::Normal;
        g.state = r.secure ? GranuleState::SecureFree : GranuleState::NsFree;
      }
    }
  }

  void endSetupPhase() { setup_phase_ = false; }

  const Granule& granule(GranuleIndex g) const {
    checkRange(g);
    return granules_[g];
  }

  Granule& granuleMut(GranuleIndex g) {
    checkRange(g);
    return granules_[g];
  }

  /// The physical gate. Table-walk checks live in the monitor; this only
  /// enforces world partitioning and granule ownership.
  AccessResult checkAccess(Requestor who, GranuleIndex g,
                           AccessMode /*mode*/) const {
    checkRange(g);
    const Granule& gr = granules_[g];
    switch (who.kind) {
      case Requestor::Kind::Tmm:
        return AccessResult::Allowed;
      case Requestor::Kind::Host:
        return gr.world == World::Secure ? AccessResult::Fault
                                         : AccessResult::Allowed;
      case Requestor::Kind::CVm:
        // secure masters may reach normal memory; which normal granules a
        // guest can see is the translation table's business
        if (gr.world == World::Normal) return AccessResult::Allowed;
        return (gr.owner && *gr.owner == who.cvm) ? AccessResult::Allowed
                                                  : AccessResult::Fault;
    }
    return AccessResult::Fault;
  }

  // ---- direct (static) policy ----

  SecureRegion reserveSecureRegion(CvmId cvm, u64 count) {
    if (policy_ != MappingPolicy::Direct)
      throw MemError(MemErrorCode::PolicyMismatch,
                     "regions are a direct-policy concept");
    setup_phase_ = false;
    auto sec = findRun(count, [](const Granule& g) {
      return g.world == World::Secure && g.state == GranuleState::SecureFree &&
             !g.owner;
    });
    if (!sec)
      throw MemError(MemErrorCode::OutOfSecureMemory, "no secure run fits");
    auto shadow = findRun(count, [](const Granule& g) {
      return g.world == World::Normal && g.state == GranuleState::NsFree;
    });
    if (!shadow)
      throw MemError(MemErrorCode::OutOfShadowMemory, "no shadow run fits");
    SecureRegion r;
    r.cvm = cvm;
    r.base = *sec;
    r.count = count;
    r.shadow_offset = static_cast<std::int64_t>(*shadow) -
                      static_cast<std::int64_t>(*sec);
    for (u64 i = 0; i < count; ++i) {
      granules_[*sec + i].owner = cvm;
      granules_[*sec + i].state = GranuleState::SecureFree;
      granules_[*shadow + i].state = GranuleState::NsShadow;
    }
    regions_[cvm] = r;
    return r;
  }

  void releaseSecureRegion(CvmId cvm) {
    auto it = regions_.find(cvm);
    if (it == regions_.end())
      throw MemError(MemErrorCode::UnknownCVm, "no region for cVM");
    const SecureRegion& r = it->second;
    for (u64 i = 0; i < r.count; ++i) {
      Granule& g = granules_[r.base + i];
      g.contents.fill(0);
      g.owner.reset();
      g.state = GranuleState::SecureFree;
      Granule& s = granules_[r.shadowOf(r.base + i)];
      s.state = GranuleState::NsFree;
    }
    regions_.erase(it);
  }

  const SecureRegion* regionOf(CvmId cvm) const {
    auto it = regions_.find(cvm);
    return it == regions_.end() ? nullptr : &it->second;
  }

  // ---- dynamic (delegation) policy ----

  void delegate(GranuleIndex g) {
    requireDynamic();
    checkRange(g);
    setup_phase_ = false;
    Granule& gr = granules_[g];
    if (gr.state != GranuleState::NsFree)
      throw MemError(MemErrorCode::WrongState, "delegate needs NsFree");
    gr.state = GranuleState::Delegated;
    gr.world = World::Secure;
    gst_[g] = DelegationStatus::Delegated;
    accountWorldSwitch();
  }

  void undelegate(GranuleIndex g) {
    requireDynamic();
    checkRange(g);
    Granule& gr = granules_[g];
    if (gr.state != GranuleState::Delegated)
      throw MemError(MemErrorCode::WrongState, "undelegate needs Delegated");
    gr.contents.fill(0);  // monitor scrubs before the host regains it
    gr.state = GranuleState::NsFree;
    gr.world = World::Normal;
    gr.owner.reset();
    gst_[g] = DelegationStatus::Undelegated;
    accountWorldSwitch();
  }

  std::optional<DelegationStatus> gstEntry(GranuleIndex g) const {
    auto it = gst_.find(g);
    if (it == gst_.end()) return std::nullopt;
    return it->second;
  }

  // ---- allocation used by the monitor ----

  /// Claim one secure granule for cVM payload. Direct: lowest free granule
  /// of the cVM's region. Dynamic: lowest granule the host has delegated.
  std::optional<GranuleIndex> allocSecure(CvmId cvm, GranuleState into) {
    if (policy_ == MappingPolicy::Direct) {
      auto it = regions_.find(cvm);
      if (it == regions_.end()) return std::nullopt;
      const SecureRegion& r = it->second;
      for (u64 i = 0; i < r.count; ++i) {
        Granule& g = granules_[r.base + i];
        if (g.state == GranuleState::SecureFree) {
          g.state = into;
          return r.base + i;
        }
      }
      return std::nullopt;
    }
    for (GranuleIndex i = 0; i < size(); ++i) {
      Granule& g = granules_[i];
      if (g.state == GranuleState::Delegated) {
        g.state = into;
        g.owner = cvm;
        gst_[i] = DelegationStatus::Assigned;
        return i;
      }
    }
    return std::nullopt;
  }

  /// Claim a contiguous run of secure granules (block mappings).
  std::optional<GranuleIndex> allocSecureRun(CvmId cvm, u64 count,
                                             GranuleState into) {
    if (policy_ == MappingPolicy::Direct) {
      auto it = regions_.find(cvm);
      if (it == regions_.end()) return std::nullopt;
      const SecureRegion& r = it->second;
      for (u64 i = 0; i + count <= r.count; ++i) {
        bool ok = true;
        for (u64 j = 0; j < count; ++j)
          if (granules_[r.base + i + j].state != GranuleState::SecureFree) {
            ok = false;
            break;
          }
        if (ok) {
          for (u64 j = 0; j < count; ++j)
            granules_[r.base + i + j].state = into;
          return r.base + i;
        }
      }
      return std::nullopt;
    }
    for (GranuleIndex i = 0; i + count <= size(); ++i) {
      bool ok = true;
      for (u64 j = 0; j < count; ++j)
        if (granules_[i + j].state != GranuleState::Delegated) {
          ok = false;
          break;
        }
      if (ok) {
        for (u64 j = 0; j < count; ++j) {
          granules_[i + j].state = into;
          granules_[i + j].owner = cvm;
          gst_[i + j] = DelegationStatus::Assigned;
        }
        return i;
      }
    }
    return std::nullopt;
  }

  /// Zero and return a payload granule to the free pool of its policy.
  void freeSecure(GranuleIndex g) {
    checkRange(g);
    Granule& gr = granules_[g];
    gr.contents.fill(0);
    if (policy_ == MappingPolicy::Direct) {
      gr.state = GranuleState::SecureFree;
    } else {
      gr.state = GranuleState::Delegated;
      gr.owner.reset();
      gst_[g] = DelegationStatus::Delegated;
    }
  }

  // ---- whole-memory audits used by tests and invariant checks ----

  bool ownershipDisjoint() const {
    // one owner per granule holds structurally; check the region table
    std::vector<std::pair<GranuleIndex, GranuleIndex>> spans;
    for (const auto& [id, r] : regions_) spans.push_back({r.base, r.base + r.count});
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i)
      if (spans[i - 1].second > spans[i].first) return false;
    return true;
  }

  bool hostFaultsOnAllSecure() const {
    for (GranuleIndex i = 0; i < size(); ++i)
      if (granules_[i].world == World::Secure &&
          checkAccess(Requestor::host(), i, AccessMode::Read) !=
              AccessResult::Fault)
        return false;
    return true;
  }

  bool rangeZeroed(GranuleIndex base, u64 count) const {
    for (u64 i = 0; i < count; ++i)
      if (!granules_[base + i].isZeroed()) return false;
    return true;
  }

  const TzascConfig& tzasc() const { return tzasc_; }

 private:
  void checkRange(GranuleIndex g) const {
    if (g >= size())
      throw MemError(MemErrorCode::OutOfRange, "granule index out of range");
  }

  void requireDynamic() const {
    if (policy_ != MappingPolicy::Dynamic)
      throw MemError(MemErrorCode::PolicyMismatch,
                     "delegation is removed under direct mapping");
  }

  void accountWorldSwitch() {
    if (ledger_) {
      ledger_->world_switch += 1;
      ledger_->tlb_flush += 1;
      ledger_->smc_calls += 1;
    }
  }

  template <class Pred>
  std::optional<GranuleIndex> findRun(u64 count, Pred pred) const {
    if (count == 0 || count > size()) return std::nullopt;
    u64 run = 0;
    for (GranuleIndex i = 0; i < size(); ++i) {
      run = pred(granules_[i]) ? run + 1 : 0;
      if (run == count) return i + 1 - count;
    }
    return std::nullopt;
  }

  std::vector<Granule> granules_;
  MappingPolicy policy_;
  CostLedger* ledger_;
  TzascConfig tzasc_;
  bool setup_phase_ = true;
  std::map<CvmId, SecureRegion> regions_;
  std::map<GranuleIndex, DelegationStatus> gst_;
};

}  // namespace tzmm
