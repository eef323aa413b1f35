#pragma once

#include <deque>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tzmm/gic.hpp"
#include "tzmm/guest.hpp"
#include "tzmm/shadow.hpp"
#include "tzmm/tmm.hpp"
#include "tzmm/virtio_ring.hpp"

namespace tzmm {

constexpr u64 kMmioWindowBytes = 64ull << 20;  // top of the IPA space
constexpr u64 kSgiDoorbellOffset = 0x10000;    // software-generated interrupts

struct HostPolicy {
  u64 quantum = 64;  // ticks per tec_enter
  MappingPolicy sync_policy = MappingPolicy::Direct;
  bool faithful_injection = true;
  std::set<u32> drop_intids;  // withheld when faithful_injection is off
};

struct HostResponder {
  u64 match_x0 = 0;
  std::array<u64, 4> results{};
};

struct ScheduledInterrupt {
  u64 at_step = 0;
  u32 intid = 0;
  u64 tec_index = 0;
  bool fired = false;
};

struct ImagePage {
  Ipa ipa = 0;
  Bytes data;  // <= 4096 bytes, zero padded
};

struct VirtioDeviceConfig {
  enum class Kind { Blk, Net } kind = Kind::Blk;
  u32 queue = 0;       // blk: single queue; net: queue and queue+1 (rx)
  Ipa vring_ipa = 0;   // chosen inside protected IPA space
  u32 intid = 40;
  u64 disk_sectors = 128;  // blk capacity
};

struct ExitEvent {
  u64 seq = 0;
  TecId tec = 0;
  std::string reason;
  std::string host_action;
};

struct RunReport {
  u64 steps = 0;
  u64 enters = 0;
  bool deadlock = false;
  bool system_off = false;
  std::map<std::string, u64> exit_counts;
  std::vector<std::string> events;
};

struct BootError : std::runtime_error {
  TmiStatus status;
  BootError(TmiStatus st, const std::string& what)
      : std::runtime_error(what), status(st) {}
};

/// The untrusted-host model: lifecycle orchestration, scheduling,
/// interrupt emulation with the FIQ-to-IRQ report conversion, PSCI
/// servicing, and the virtio device backends. It only ever touches
/// normal-world memory; every physical access is audited.
class HostSim {
 public:
  HostSim(Tmm& tmm, PhysicalMemory& mem, Gic& gic, CostLedger& ledger,
          ShadowSync& shadow, HostPolicy policy = {})
      : tmm_(tmm),
        mem_(mem),
        gic_(gic),
        ledger_(ledger),
        shadow_(shadow),
        policy_(policy) {}

  std::vector<std::string>& eventLog() { return events_; }
  const std::vector<ExitEvent>& exitEvents() const { return exit_events_; }
  u64 hostAccessFaults() const { return host_access_faults_; }
  HostPolicy& policy() { return policy_; }

  void addResponder(HostResponder r) { responders_.push_back(r); }
  void setMmioReadValue(Ipa ipa, u64 v) { mmio_read_values_[ipa] = v; }
  void scheduleInterrupt(u64 at_step, u32 intid, u64 tec_index) {
    schedule_.push_back({at_step, intid, tec_index, false});
  }

  // ---- lifecycle orchestration ----

  CvmId bootCvm(const CVmParams& params, u64 vcpus,
                const std::vector<ImagePage>& image,
                const std::vector<GuestProgram>& scripts, u64 granule_count,
                const std::vector<VirtioDeviceConfig>& devices = {}) {
    // step 1: create the cVM
    GranuleIndex pg = claimStagingGranule();
    Bytes enc = params.encode();
    hostWrite(pg, 0, enc.data(), enc.size());
    // under the dynamic policy the monitor allocates only from granules the
    // host has delegated; hand over a pool sized for the whole cVM
    if (mem_.policy() == MappingPolicy::Dynamic) {
      u64 delegated = 0;
      for (GranuleIndex g = 0; g < mem_.size() && delegated < granule_count;
           ++g) {
        if (mem_.granule(g).state == GranuleState::NsFree &&
            !staging_.count(g)) {
          mem_.delegate(g);
          ++delegated;
        }
      }
    }
    auto create = tmm_.createCvm(pg, granule_count);
    if (create.status != TmiStatus::Success)
      throw BootError(create.status, "create_cvm failed");
    CvmId id = create.results[0];
    events_.push_back("step1:create_cvm");

    try {
      // step 2: one execution context per vCPU
      std::vector<TecId> tec_ids;
      for (u64 v = 0; v < vcpus; ++v) {
        auto tc = tmm_.tecCreate(id, TecParams{0, v});
        if (tc.status != TmiStatus::Success)
          throw BootError(tc.status, "tec_create failed");
        tec_ids.push_back(tc.results[0]);
        if (v < scripts.size())
          tmm_.attachGuestProgram(tc.results[0], scripts[v]);
      }
      tecs_[id] = tec_ids;
      events_.push_back("step2:create_tecs");

      // step 3: pre-map stage-2 tables and load the full image
      for (const auto& page : image) mapTablesFor(id, page.ipa);
      loadImage(id, image);
      for (const auto& dev : devices) setupDevice(id, params, dev);
      events_.push_back("step3:load_image");

      // step 4: activate after the last vCPU exists
      auto act = tmm_.activateCvm(id);
      if (act.status != TmiStatus::Success)
        throw BootError(act.status, "activate failed");
      events_.push_back("step4:activate");
    } catch (const BootError&) {
      tmm_.destroyCvm(id);  // partial boots are torn down and zeroed
      throw;
    }
    return id;
  }

  /// Create the table chain so a level-3 entry exists for this IPA.
  void mapTablesFor(CvmId id, Ipa ipa) {
    for (u64 level = 1; level <= 3; ++level) {
      auto r = tmm_.createTtt(id, ipa, level);
      if (r.status != TmiStatus::Success && r.status != TmiStatus::ErrorInput)
        throw BootError(r.status, "create_ttt failed");
      // ErrorInput here means the table already exists; harmless
    }
  }

  void loadImage(CvmId id, const std::vector<ImagePage>& image) {
    // contiguous ascending runs load through the block interface
    std::vector<ImagePage> sorted = image;
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.ipa < b.ipa; });
    std::size_t i = 0;
    while (i < sorted.size()) {
      std::size_t j = i + 1;
      while (j < sorted.size() &&
             sorted[j].ipa == sorted[j - 1].ipa + kGranuleBytes)
        ++j;
      u64 run = j - i;
      std::vector<GranuleIndex> srcs;
      for (std::size_t k = i; k < j; ++k) {
        GranuleIndex sg = claimStagingGranule();
        hostWrite(sg, 0, sorted[k].data.data(), sorted[k].data.size());
        srcs.push_back(sg);
      }
      bool contiguous_src = true;
      for (std::size_t k = 1; k < srcs.size(); ++k)
        if (srcs[k] != srcs[k - 1] + 1) contiguous_src = false;
      if (run > 1 && contiguous_src) {
        auto r = tmm_.dataBlockCreate(id, sorted[i].ipa, run, srcs[0]);
        if (r.status != TmiStatus::Success)
          throw BootError(r.status, "data_block_create failed");
      } else {
        for (std::size_t k = i; k < j; ++k) {
          auto r = tmm_.dataCreate(id, sorted[k].ipa, srcs[k - i]);
          if (r.status != TmiStatus::Success)
            throw BootError(r.status, "data_create failed");
        }
      }
      i = j;
    }
  }

  void setupDevice(CvmId id, const CVmParams& params,
                   const VirtioDeviceConfig& cfg) {
    Ipa mmio_base = (u64{1} << params.ipa_width) - kMmioWindowBytes;
    HostDevice dev;
    dev.cvm = id;
    dev.config = cfg;
    dev.doorbell = mmio_base + 0x1000 + cfg.queue * 0x100;
    dev.disk.assign(cfg.disk_sectors * kBlkSectorBytes, 0);
    // vring pages live in protected memory; zero-filled at boot
    for (u64 p = 0; p < 3; ++p) {
      Ipa ipa = cfg.vring_ipa + p * kGranuleBytes;
      mapTablesFor(id, ipa);
      auto r = tmm_.dataCreateUnknown(id, ipa);
      if (r.status != TmiStatus::Success)
        throw BootError(r.status, "vring page create failed");
    }
    gic_.configure(cfg.intid, IrqGroup::G1NonSecure, true);
    std::vector<VirtioDeviceDesc> descs;
    descs.push_back({cfg.queue, cfg.vring_ipa, dev.doorbell, cfg.intid});
    devices_.push_back(dev);
    auto& table = device_table_[id];
    table.push_back(descs[0]);
    tmm_.setDeviceTable(id, table);
  }

  // ---- the run loop ----

  RunReport run(CvmId id, u64 max_steps) {
    RunReport report;
    auto tl = tecs_.find(id);
    if (tl == tecs_.end()) return report;
    std::vector<TecId> order = tl->second;
    std::size_t rr = 0;

    while (report.steps < max_steps) {
      fireSchedule(report.steps, order);
      ++report.steps;

      // round-robin over contexts the monitor will accept
      const Tec* chosen = nullptr;
      for (std::size_t k = 0; k < order.size(); ++k) {
        const Tec* t = tmm_.tec(order[(rr + k) % order.size()]);
        if (t && t->runnable && !blocked_.count(t->id) &&
            !(t->in_wfi && !gic_.hasInjected(t->id) &&
              !gic_.pendingFor(t->id))) {
          chosen = t;
          rr = (rr + k + 1) % order.size();
          break;
        }
      }
      if (!chosen) {
        if (hasFutureWork(report.steps, order)) continue;
        // Contexts that simply ran out of script park with runnable
        // cleared; that is normal completion. Deadlock means some
        // context is still waiting (stuck in WFI with no wake source,
        // or refused by the monitor) with nothing left to wake it.
        bool waiting = false;
        if (tmm_.cvm(id) != nullptr) {
          for (TecId tid : order) {
            const Tec* t = tmm_.tec(tid);
            if (t && (t->runnable || blocked_.count(tid))) waiting = true;
          }
        }
        report.deadlock = waiting;
        break;
      }

      TecId tec = chosen->id;
      TmiResponse resp;
      auto pr = pending_response_.find(tec);
      if (pr != pending_response_.end()) {
        resp = tmm_.tecEnterWithResponse(tec, policy_.quantum, pr->second);
        pending_response_.erase(pr);
      } else {
        resp = tmm_.tecEnter(tec, policy_.quantum);
      }
      if (resp.status != TmiStatus::Success) {
        blocked_.insert(tec);
        continue;
      }
      ++report.enters;
      auto reason = static_cast<ExitReason>(resp.results[0]);
      report.exit_counts[exitReasonName(reason)] += 1;
      std::string action = dispatchExit(id, tec, reason, resp, report);
      exit_events_.push_back(
          {seq_++, tec, exitReasonName(reason), action});
      if (reason == ExitReason::SystemOff) {
        tmm_.destroyCvm(id);
        report.system_off = true;
        report.events.push_back("cvm_reclaimed");
        break;
      }
    }
    return report;
  }

  /// The four-step interrupt flow: the monitor took the interrupt and
  /// reported IRQ; the host now writes a list register so the next entry
  /// delivers the vIRQ.
  bool emulateInterrupt(u32 intid, TecId tec) {
    ledger_.irq_emulations += 1;
    if (policy_.drop_intids.count(intid)) {
      gic_.clearPending(intid);  // spurious-withholding host
      return true;
    }
    if (!gic_.writeListRegister(tec, intid))
      return false;  // no free list register; interrupt stays pending
    gic_.clearPending(intid);
    return true;
  }

  // ---- audited physical accesses (the host never sees secure bytes) ----

  void hostWrite(GranuleIndex g, std::size_t off, const u8* p, std::size_t n) {
    if (mem_.checkAccess(Requestor::host(), g, AccessMode::Write) !=
        AccessResult::Allowed) {
      ++host_access_faults_;
      return;
    }
    auto& c = mem_.granuleMut(g).contents;
    std::memcpy(c.data() + off, p, std::min(n, c.size() - off));
  }

  bool hostRead(GranuleIndex g, std::size_t off, u8* p, std::size_t n) {
    if (mem_.checkAccess(Requestor::host(), g, AccessMode::Read) !=
        AccessResult::Allowed) {
      ++host_access_faults_;
      return false;
    }
    const auto& c = mem_.granule(g).contents;
    std::memcpy(p, c.data() + off, std::min(n, c.size() - off));
    return true;
  }

  GranuleIndex claimStagingGranule() {
    for (GranuleIndex g = 0; g < mem_.size(); ++g) {
      const Granule& gr = mem_.granule(g);
      if (gr.world == World::Normal && gr.state == GranuleState::NsFree &&
          !staging_.count(g)) {
        staging_.insert(g);
        return g;
      }
    }
    throw BootError(TmiStatus::ErrorMemory, "host out of staging memory");
  }

  const std::vector<TecId>& tecsOf(CvmId id) { return tecs_[id]; }

  const Bytes* diskContents(CvmId id, u32 queue) const {
    for (const auto& dev : devices_)
      if (dev.cvm == id && dev.config.queue == queue) return &dev.disk;
    return nullptr;
  }

  Ipa sgiDoorbell(const CVmParams& params) const {
    return (u64{1} << params.ipa_width) - kMmioWindowBytes + kSgiDoorbellOffset;
  }

 private:
  struct HostDevice {
    CvmId cvm = 0;
    VirtioDeviceConfig config;
    Ipa doorbell = 0;
    Bytes disk;
    std::map<u64, Bytes> disk_macs;  // sector -> sidecar entry (opaque)
    u16 last_avail = 0;
    u16 used_idx = 0;
    std::deque<std::pair<Bytes, std::optional<Bytes>>> net_frames;
  };

  void fireSchedule(u64 step, const std::vector<TecId>& order) {
    for (auto& s : schedule_) {
      if (!s.fired && s.at_step <= step) {
        s.fired = true;
        if (s.tec_index < order.size()) {
          gic_.configure(s.intid, IrqGroup::G1NonSecure, true);
          gic_.pend(s.intid, order[s.tec_index]);
        }
      }
    }
  }

  bool hasFutureWork(u64 /*step*/, const std::vector<TecId>& order) {
    for (const auto& s : schedule_)
      if (!s.fired) return true;
    for (TecId t : order)
      if (gic_.hasInjected(t) || gic_.pendingFor(t)) return true;
    return false;
  }

  std::string dispatchExit(CvmId id, TecId tec, ExitReason reason,
                           const TmiResponse& resp, RunReport& report) {
    switch (reason) {
      case ExitReason::HostCall: {
        const ExitInfo* e = tmm_.lastExit(tec);
        std::array<u64, 4> results{};
        for (const auto& r : responders_)
          if (e && r.match_x0 == e->host_call_args[0]) results = r.results;
        pending_response_[tec] = results;
        return "host_call_served";
      }
      case ExitReason::Psci: {
        const ExitInfo* e = tmm_.lastExit(tec);
        if (e && e->psci_function == static_cast<u32>(PsciFunction::CpuOn)) {
          tmm_.psciComplete(tec, e->psci_target, 0);
          return "psci_cpu_on_completed";
        }
        return "psci_noted";
      }
      case ExitReason::DataAbort:
        return handleAbort(id, tec, resp, report);
      case ExitReason::Irq: {
        auto intid = gic_.pendingFor(tec);
        if (intid) {
          bool ok = emulateInterrupt(*intid, tec);
          return ok ? "virq_injected" : "no_free_list_register";
        }
        return "irq_spurious";
      }
      case ExitReason::SystemOff:
        return "system_off";
      case ExitReason::Quantum:
        return "rescheduled";
    }
    return "?";
  }

  std::string handleAbort(CvmId id, TecId tec, const TmiResponse& resp,
                          RunReport& report) {
    Ipa ipa = resp.results[1];
    u64 value = resp.results[2];
    bool is_write = resp.results[3] != 0;
    for (auto& dev : devices_) {
      if (dev.cvm == id && ipa == dev.doorbell && is_write) {
        virtioServe(dev, static_cast<u32>(value));
        return "virtio_served";
      }
    }
    const CVm* vm = tmm_.cvm(id);
    if (vm) {
      Ipa mmio_base = (u64{1} << vm->params.ipa_width) - kMmioWindowBytes;
      if (ipa >= mmio_base) {
        if (ipa == mmio_base + kSgiDoorbellOffset && is_write) {
          // software-generated interrupt: value = target index << 8 | intid
          u32 intid = static_cast<u32>(value & 0xff);
          u64 target_index = value >> 8;
          auto& order = tecs_[id];
          if (target_index < order.size()) {
            gic_.configure(intid, IrqGroup::G1NonSecure, true);
            gic_.pend(intid, order[target_index]);
            ledger_.irq_emulations += 1;  // doorbell trap round trip
          }
          return "sgi_raised";
        }
        if (!is_write) {
          auto it = mmio_read_values_.find(ipa);
          pending_response_[tec] = {it == mmio_read_values_.end() ? 0
                                                                  : it->second,
                                    0, 0, 0};
        }
        return is_write ? "mmio_write_emulated" : "mmio_read_emulated";
      }
    }
    // an abort the host cannot emulate; stop scheduling the context
    blocked_.insert(tec);
    report.events.push_back("unhandled_abort:" + std::to_string(ipa));
    return "unhandled_abort";
  }

  // ---- virtio backend ----

  void virtioServe(HostDevice& dev, u32 /*queue*/) {
    CvmId id = dev.cvm;
    VringLayout ring{dev.config.vring_ipa};

    auto ring_pages = ipaPages(id, dev.config.vring_ipa, 3);
    syncPages(id, ring_pages, SyncDirection::SecureToShadow);

    u16 avail = readShadow16(id, ring.availIdx());
    while (dev.last_avail != avail) {
      u16 head = readShadow16(id, ring.availRingAt(dev.last_avail % kVringEntries));
      processChain(dev, id, ring, head);
      ++dev.last_avail;
    }

    syncPages(id, ring_pages, SyncDirection::ShadowToSecure);
    gic_.pend(dev.config.intid, interruptTargetFor(id));
  }

  void processChain(HostDevice& dev, CvmId id, const VringLayout& ring,
                    u16 head) {
    std::vector<VringDesc> chain;
    u16 cur = head;
    for (;;) {
      u8 raw[16];
      readShadowBytes(id, ring.descAt(cur), raw, 16);
      VringDesc d = decodeVringDesc(raw);
      chain.push_back(d);
      if (!(d.flags & kVringDescFlagNext)) break;
      cur = d.next;
    }

    // buffer pages travel with the request in both directions
    std::vector<GranuleIndex> buffer_pages;
    bool bad = false;
    for (const auto& d : chain) {
      auto pages = ipaPages(id, d.addr & ~u64{kGranuleBytes - 1},
                            (d.len + kGranuleBytes - 1) / kGranuleBytes);
      if (pages.empty()) bad = true;
      buffer_pages.insert(buffer_pages.end(), pages.begin(), pages.end());
    }
    u32 used_len = 0;
    if (bad) {
      writeStatus(dev, id, ring, head, kVirtioStatusIoErr, 0);
      return;
    }
    syncPages(id, buffer_pages, SyncDirection::SecureToShadow);

    if (dev.config.kind == VirtioDeviceConfig::Kind::Blk)
      used_len = serveBlk(dev, id, chain);
    else
      used_len = serveNet(dev, id, chain);

    syncPages(id, buffer_pages, SyncDirection::ShadowToSecure);
    writeStatus(dev, id, ring, head, kVirtioStatusOk, used_len);
  }

  u32 serveBlk(HostDevice& dev, CvmId id, const std::vector<VringDesc>& chain) {
    if (chain.size() < 3) return 0;
    u8 hdr_raw[16];
    readShadowBytes(id, chain[0].addr, hdr_raw, 16);
    BlkRequestHeader hdr = BlkRequestHeader::decode(hdr_raw);
    const VringDesc& data = chain[1];
    u64 off = hdr.sector * kBlkSectorBytes;
    if (off + data.len > dev.disk.size()) return 0;
    if (hdr.type == kBlkRequestWrite) {
      Bytes buf(data.len);
      readShadowBytes(id, data.addr, buf.data(), buf.size());
      std::copy(buf.begin(), buf.end(), dev.disk.begin() + off);
      stashMacs(dev, id, data, hdr.sector);
      return 0;
    }
    if (hdr.type == kBlkRequestRead) {
      writeShadowBytes(id, data.addr, dev.disk.data() + off, data.len);
      restoreMacs(dev, id, data, hdr.sector);
      return data.len;
    }
    return 0;
  }

  u32 serveNet(HostDevice& dev, CvmId id, const std::vector<VringDesc>& chain) {
    // loopback: transmitted frames feed the same device's receive buffers
    if (!chain.empty() && !(chain[0].flags & kVringDescFlagWrite)) {
      Bytes frame(chain[0].len);
      readShadowBytes(id, chain[0].addr, frame.data(), frame.size());
      auto mac = sidecarOf(id, chain[0].addr);
      dev.net_frames.push_back({frame, mac});
      return 0;
    }
    if (!chain.empty() && (chain[0].flags & kVringDescFlagWrite) &&
        !dev.net_frames.empty()) {
      auto [frame, mac] = dev.net_frames.front();
      dev.net_frames.pop_front();
      u32 n = std::min<u32>(chain[0].len, static_cast<u32>(frame.size()));
      writeShadowBytes(id, chain[0].addr, frame.data(), n);
      if (mac) restoreSidecar(id, chain[0].addr, *mac);
      return n;
    }
    return 0;
  }

  void writeStatus(HostDevice& dev, CvmId id, const VringLayout& ring,
                   u16 head, u8 status, u32 len) {
    // status byte is the last descriptor of the chain when present
    u8 raw[16];
    u16 cur = head;
    for (;;) {
      readShadowBytes(id, ring.descAt(cur), raw, 16);
      VringDesc d = decodeVringDesc(raw);
      if (!(d.flags & kVringDescFlagNext)) {
        // only the blk protocol carries a trailing status byte
        if (dev.config.kind == VirtioDeviceConfig::Kind::Blk &&
            (d.flags & kVringDescFlagWrite) && d.len >= 1) {
          auto pages = ipaPages(id, d.addr & ~u64{kGranuleBytes - 1}, 1);
          syncPages(id, pages, SyncDirection::SecureToShadow);
          writeShadowBytes(id, d.addr, &status, 1);
          syncPages(id, pages, SyncDirection::ShadowToSecure);
        }
        break;
      }
      cur = d.next;
    }
    u8 used[8];
    for (int i = 0; i < 4; ++i) used[i] = static_cast<u8>(head >> (8 * i));
    for (int i = 0; i < 4; ++i) used[4 + i] = static_cast<u8>(len >> (8 * i));
    writeShadowBytes(id, ring.usedRingAt(dev.used_idx % kVringEntries), used, 8);
    ++dev.used_idx;
    u8 idx_raw[2] = {static_cast<u8>(dev.used_idx),
                     static_cast<u8>(dev.used_idx >> 8)};
    writeShadowBytes(id, ring.usedIdx(), idx_raw, 2);
  }

  TecId interruptTargetFor(CvmId id) {
    auto& order = tecs_[id];
    return order.empty() ? 0 : order[0];
  }

  // ---- shadow-page plumbing ----

  std::vector<GranuleIndex> ipaPages(CvmId id, Ipa base, u64 count) {
    std::vector<GranuleIndex> out;
    for (u64 i = 0; i < count; ++i) {
      auto g = tmm_.resolveIpaForHost(id, base + i * kGranuleBytes);
      if (!g) return {};
      out.push_back(*g);
    }
    return out;
  }

  void syncPages(CvmId id, const std::vector<GranuleIndex>& pages,
                 SyncDirection dir) {
    for (GranuleIndex g : pages)
      shadow_.sync(dir, id, g, 1, policy_.sync_policy);
  }

  std::optional<GranuleIndex> shadowGranuleOf(CvmId id, Ipa ipa) {
    auto g = tmm_.resolveIpaForHost(id, ipa & ~u64{kGranuleBytes - 1});
    if (!g) return std::nullopt;
    try {
      return shadow_.shadowOf(id, *g);
    } catch (const SyncError&) {
      return std::nullopt;
    }
  }

  u16 readShadow16(CvmId id, Ipa ipa) {
    u8 raw[2] = {};
    readShadowBytes(id, ipa, raw, 2);
    return static_cast<u16>(raw[0] | (raw[1] << 8));
  }

  void readShadowBytes(CvmId id, Ipa ipa, u8* out, std::size_t n) {
    std::size_t done = 0;
    while (done < n) {
      auto sg = shadowGranuleOf(id, ipa + done);
      if (!sg) return;
      std::size_t off = (ipa + done) & (kGranuleBytes - 1);
      std::size_t chunk = std::min(n - done, kGranuleBytes - off);
      hostRead(*sg, off, out + done, chunk);
      done += chunk;
    }
  }

  void writeShadowBytes(CvmId id, Ipa ipa, const u8* in, std::size_t n) {
    std::size_t done = 0;
    while (done < n) {
      auto sg = shadowGranuleOf(id, ipa + done);
      if (!sg) return;
      std::size_t off = (ipa + done) & (kGranuleBytes - 1);
      std::size_t chunk = std::min(n - done, kGranuleBytes - off);
      hostWrite(*sg, off, in + done, chunk);
      done += chunk;
    }
  }

  void stashMacs(HostDevice& dev, CvmId id, const VringDesc& data,
                 u64 sector) {
    for (u64 p = 0; p * kGranuleBytes < data.len; ++p) {
      auto mac = sidecarOf(id, data.addr + p * kGranuleBytes);
      if (mac) dev.disk_macs[sector + p * (kGranuleBytes / kBlkSectorBytes)] =
          *mac;
    }
  }

  void restoreMacs(HostDevice& dev, CvmId id, const VringDesc& data,
                   u64 sector) {
    for (u64 p = 0; p * kGranuleBytes < data.len; ++p) {
      auto it =
          dev.disk_macs.find(sector + p * (kGranuleBytes / kBlkSectorBytes));
      if (it != dev.disk_macs.end())
        restoreSidecar(id, data.addr + p * kGranuleBytes, it->second);
    }
  }

  std::optional<Bytes> sidecarOf(CvmId id, Ipa ipa) {
    auto g = tmm_.resolveIpaForHost(id, ipa & ~u64{kGranuleBytes - 1});
    if (!g) return std::nullopt;
    return shadow_.protection().sidecarEntry(id, *g);
  }

  void restoreSidecar(CvmId id, Ipa ipa, const Bytes& mac) {
    auto g = tmm_.resolveIpaForHost(id, ipa & ~u64{kGranuleBytes - 1});
    if (g) shadow_.protection().setSidecarEntry(id, *g, mac);
  }

  Tmm& tmm_;
  PhysicalMemory& mem_;
  Gic& gic_;
  CostLedger& ledger_;
  ShadowSync& shadow_;
  HostPolicy policy_;
  std::vector<HostResponder> responders_;
  std::map<Ipa, u64> mmio_read_values_;
  std::vector<ScheduledInterrupt> schedule_;
  std::vector<HostDevice> devices_;
  std::map<CvmId, std::vector<VirtioDeviceDesc>> device_table_;
  std::map<CvmId, std::vector<TecId>> tecs_;
  std::map<TecId, std::array<u64, 4>> pending_response_;
  std::set<TecId> blocked_;
  std::set<GranuleIndex> staging_;
  std::vector<std::string> events_;
  std::vector<ExitEvent> exit_events_;
  u64 host_access_faults_ = 0;
  u64 seq_ = 0;
};

}  // namespace tzmm
