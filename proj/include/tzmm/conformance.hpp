#pragma once

#include <functional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "tzmm/scenario.hpp"
#include "tzmm/sim.hpp"

namespace tzmm {

struct CaseResult {
  std::string id;
  std::string category;
  bool passed = false;
  bool skipped = false;
  std::string detail;
  std::set<TmiCommand> tmis;
  std::set<TsiFunction> tsis;
};

/// Collects expectation failures; the first failing condition becomes the
/// case detail.
struct Checker {
  bool ok = true;
  std::string detail;
  void expect(bool cond, const std::string& what) {
    if (!cond && ok) {
      ok = false;
      detail = what;
    }
  }
};

namespace conf {

// ---- shared fixtures ----

inline Bytes patternPage(u8 seed) {
  Bytes b(kGranuleBytes);
  for (std::size_t i = 0; i < b.size(); ++i)
    b[i] = static_cast<u8>(seed + i * 7);
  return b;
}

inline CvmId bootOne(SimEnv& env, const std::vector<GuestProgram>& scripts,
                     const std::vector<ImagePage>& image = {},
                     const std::vector<VirtioDeviceConfig>& devices = {},
                     u64 vcpus = 1, u64 granules = 64) {
  CVmParams params;
  params.vcpu_count = static_cast<u32>(vcpus);
  return env.host.bootCvm(params, vcpus, image, scripts, granules, devices);
}

inline InsnTsiCall tsi(TsiFunction fn, std::array<u64, 7> args = {},
                       Bytes payload = {}) {
  return InsnTsiCall{static_cast<u64>(fn), args, std::move(payload)};
}

inline void finish(CaseResult& r, SimEnv& env, Checker& c) {
  r.tmis = env.tmm.invokedTmis();
  r.tsis = env.tmm.invokedTsis();
  r.passed = c.ok;
  r.detail = c.detail;
}

// ---- input-sanity ----

inline CaseResult caseSanityParams() {
  CaseResult r{"sanity-params-validation", "input-sanity"};
  SimEnv env;
  Checker c;
  auto stage = [&](CVmParams p) {
    GranuleIndex g = env.host.claimStagingGranule();
    Bytes enc = p.encode();
    env.host.hostWrite(g, 0, enc.data(), enc.size());
    return g;
  };
  CVmParams bad;
  bad.vcpu_count = 0;
  c.expect(env.tmm.createCvm(stage(bad), 16).status == TmiStatus::ErrorInput,
           "zero vcpus accepted");
  bad = {};
  bad.ipa_width = 8;
  c.expect(env.tmm.createCvm(stage(bad), 16).status == TmiStatus::ErrorInput,
           "ipa width 8 accepted");
  bad = {};
  bad.hash_algo_id = 99;
  c.expect(env.tmm.createCvm(stage(bad), 16).status == TmiStatus::ErrorInput,
           "unknown hash algorithm accepted");
  bad = {};
  bad.feature_mask = ~u64{0};  // tries to advertise more than the platform
  c.expect(env.tmm.createCvm(stage(bad), 16).status == TmiStatus::ErrorInput,
           "feature mask superset accepted");
  c.expect(env.tmm.createCvm(stage(CVmParams{}), 0).status ==
               TmiStatus::ErrorInput,
           "zero granule budget accepted");
  TmiRequest junk;
  junk.command = 0x999;
  c.expect(env.tmm.dispatch(junk).status == TmiStatus::ErrorInput,
           "unknown command id accepted");
  // a well-formed request still works afterwards
  c.expect(env.tmm.createCvm(stage(CVmParams{}), 16).status ==
               TmiStatus::Success,
           "valid create failed");
  finish(r, env, c);
  return r;
}

inline CaseResult caseSanityDataOps() {
  CaseResult r{"sanity-data-ops", "input-sanity"};
  SimEnv env;
  Checker c;
  // manual boot: the argument checks below apply to a NEW cVM
  CVmParams params;
  GranuleIndex pg = env.host.claimStagingGranule();
  Bytes enc = params.encode();
  env.host.hostWrite(pg, 0, enc.data(), enc.size());
  CvmId id = env.tmm.createCvm(pg, 64).results[0];
  env.tmm.tecCreate(id, TecParams{});
  env.host.mapTablesFor(id, 0x1000);
  GranuleIndex src = env.host.claimStagingGranule();
  Bytes page = patternPage(3);
  env.host.hostWrite(src, 0, page.data(), page.size());
  c.expect(env.tmm.dataCreate(id, 0x1000, src).status == TmiStatus::Success,
           "initial page load failed");
  c.expect(env.tmm.dataCreate(id, 0x1001, src).status == TmiStatus::ErrorInput,
           "unaligned ipa accepted");
  c.expect(env.tmm.dataCreate(id, 0x1000, src).status == TmiStatus::ErrorInput,
           "double create accepted");
  c.expect(
      env.tmm.dataCreate(id, 0x40000000, src).status == TmiStatus::ErrorInput,
      "create without table chain accepted");
  c.expect(env.tmm.activateCvm(id).status == TmiStatus::Success,
           "activate failed");
  // ACTIVE: measured loads must be refused, zero-fill repair pages allowed
  c.expect(env.tmm.dataCreate(id, 0x2000, src).status == TmiStatus::ErrorState,
           "measured data create allowed after activate");
  c.expect(env.tmm.dataCreateUnknown(id, 0x2000).status == TmiStatus::Success,
           "runtime zero-page repair refused");
  c.expect(env.tmm.dataDestroy(id, 0x2000).status == TmiStatus::Success,
           "data destroy failed");
  c.expect(env.tmm.dataDestroy(id, 0x2000).status == TmiStatus::ErrorInput,
           "destroying an unmapped page accepted");
  // protected map of a granule the cVM does not own
  GranuleIndex foreign = env.host.claimStagingGranule();
  c.expect(
      env.tmm.mapProtected(id, 0x3000, foreign).status == TmiStatus::ErrorInput,
      "mapping an unowned granule accepted");
  c.expect(env.tmm.tttSound(id), "table audit failed");
  finish(r, env, c);
  return r;
}

inline CaseResult caseSanityTecPsci() {
  CaseResult r{"sanity-tec-psci", "input-sanity"};
  SimEnv env;
  Checker c;
  // NEW cVM: enter must be refused until activation
  CVmParams params;
  GranuleIndex pg = env.host.claimStagingGranule();
  Bytes enc = params.encode();
  env.host.hostWrite(pg, 0, enc.data(), enc.size());
  auto create = env.tmm.createCvm(pg, 16);
  c.expect(create.status == TmiStatus::Success, "create failed");
  CvmId id = create.results[0];
  c.expect(env.tmm.activateCvm(id).status == TmiStatus::ErrorState,
           "activate without any TEC accepted");
  auto tc = env.tmm.tecCreate(id, TecParams{});
  c.expect(tc.status == TmiStatus::Success, "tec create failed");
  TecId tec = tc.results[0];
  c.expect(env.tmm.tecEnter(tec, 8).status == TmiStatus::ErrorState,
           "enter before activate accepted");
  c.expect(env.tmm.psciComplete(tec, tec, 0).status == TmiStatus::ErrorInput,
           "psci complete without pending accepted");
  c.expect(env.tmm.activateCvm(id).status == TmiStatus::Success,
           "activate failed");
  c.expect(env.tmm.tecCreate(id, TecParams{}).status == TmiStatus::ErrorState,
           "tec create after activate accepted");
  c.expect(env.tmm.tecDestroy(9999).status == TmiStatus::ErrorInput,
           "destroying unknown tec accepted");
  c.expect(env.tmm.tecDestroy(tec).status == TmiStatus::Success,
           "tec destroy failed");
  c.expect(env.tmm.destroyCvm(id).status == TmiStatus::Success,
           "destroy failed");
  finish(r, env, c);
  return r;
}

inline CaseResult caseSanityTsiArgs() {
  CaseResult r{"sanity-tsi-args", "input-sanity"};
  SimEnv env;
  Checker c;
  GuestProgram prog;
  prog.insns = {
      tsi(TsiFunction::Version),
      tsi(TsiFunction::CvmConfig),
      tsi(TsiFunction::MeasurementRead, {7}),          // out of range
      tsi(TsiFunction::MeasurementExtend, {0}, {1}),   // slot 0 is immutable
      tsi(TsiFunction::AttestationTokenContinue, {0x1000, 4096}),  // no init
      tsi(TsiFunction::MeasurementRead, {0}),
      tsi(TsiFunction::HostCall, {77}),
  };
  CvmId id = bootOne(env, {prog}, {{0x1000, patternPage(9)}});
  TecId tec = env.host.tecsOf(id)[0];

  auto stepAndStatus = [&](u64 n) {
    env.tmm.tecEnter(tec, n);
    return static_cast<TsiStatus>(env.tmm.tec(tec)->gprs[0]);
  };
  c.expect(stepAndStatus(1) == TsiStatus::Success, "version failed");
  c.expect(env.tmm.tec(tec)->gprs[1] == 1, "version major wrong");
  c.expect(stepAndStatus(1) == TsiStatus::Success, "config failed");
  c.expect(env.tmm.tec(tec)->gprs[1] == 40, "config ipa width wrong");
  c.expect(stepAndStatus(1) == TsiStatus::ErrorInput,
           "out-of-range measurement index accepted");
  c.expect(stepAndStatus(1) == TsiStatus::ErrorInput,
           "extend of slot 0 accepted");
  c.expect(stepAndStatus(1) == TsiStatus::ErrorState,
           "token continue without init accepted");
  c.expect(stepAndStatus(1) == TsiStatus::Success, "measurement read failed");
  auto resp = env.tmm.tecEnter(tec, 2);
  c.expect(static_cast<ExitReason>(resp.results[0]) == ExitReason::HostCall &&
               resp.results[1] == 77,
           "guest-initiated host call did not exit");
  finish(r, env, c);
  return r;
}

// ---- ttt-levels ----

inline CaseResult caseTttLevelWalk() {
  CaseResult r{"ttt-level-walk", "ttt-levels"};
  SimEnv env;
  Checker c;
  // a root entry spans 512 GiB, so a fresh level-1 table needs an IPA past
  // the first root slot; widen the protected space accordingly
  CVmParams params;
  params.ipa_width = 41;
  params.protected_ipa_limit = u64{1} << 41;
  Ipa far = u64{1} << 39;  // root slot 1: its whole table chain is fresh
  GranuleIndex pg = env.host.claimStagingGranule();
  Bytes enc = params.encode();
  env.host.hostWrite(pg, 0, enc.data(), enc.size());
  CvmId id = env.tmm.createCvm(pg, 64).results[0];
  env.tmm.tecCreate(id, TecParams{});
  c.expect(env.tmm.createTtt(id, far, 1).status == TmiStatus::Success,
           "level-1 table create failed");
  c.expect(env.tmm.createTtt(id, far, 2).status == TmiStatus::Success,
           "level-2 table create failed");
  c.expect(env.tmm.createTtt(id, far, 3).status == TmiStatus::Success,
           "level-3 table create failed");
  c.expect(env.tmm.createTtt(id, far, 3).status == TmiStatus::ErrorInput,
           "duplicate table create accepted");
  c.expect(env.tmm.dataCreateUnknown(id, far).status == TmiStatus::Success,
           "page create under fresh tables failed");
  // a populated table must not be destroyable
  c.expect(env.tmm.destroyTtt(id, far, 3).status == TmiStatus::ErrorState,
           "destroyed a live table");
  // move the page out via unmap/map (protected)
  const CVm* vm = env.tmm.cvm(id);
  auto leaf = vm->ttt->resolve(far);
  c.expect(leaf.has_value(), "mapped page does not resolve");
  GranuleIndex target = leaf ? leaf->granule : 0;
  c.expect(env.tmm.unmapProtected(id, far).status == TmiStatus::Success,
           "unmap failed");
  c.expect(env.tmm.mapProtected(id, far + kGranuleBytes, target).status ==
               TmiStatus::Success,
           "remap at sibling slot failed");
  c.expect(env.tmm.unmapProtected(id, far + kGranuleBytes).status ==
               TmiStatus::Success,
           "second unmap failed");
  env.mem.freeSecure(target);
  c.expect(env.tmm.destroyTtt(id, far, 3).status == TmiStatus::Success,
           "empty level-3 destroy failed");
  c.expect(env.tmm.destroyTtt(id, far, 2).status == TmiStatus::Success,
           "empty level-2 destroy failed");
  c.expect(env.tmm.destroyTtt(id, far, 1).status == TmiStatus::Success,
           "empty level-1 destroy failed");
  c.expect(env.tmm.tttSound(id), "table audit failed");
  finish(r, env, c);
  return r;
}

inline CaseResult caseTttBlockMapping() {
  CaseResult r{"ttt-block-mapping", "ttt-levels"};
  SimEnv env(SimConfig{.granules = 8192});
  Checker c;
  // block loads are a NEW-state operation: boot by hand, no activate yet
  CVmParams params;
  GranuleIndex pg = env.host.claimStagingGranule();
  Bytes enc = params.encode();
  env.host.hostWrite(pg, 0, enc.data(), enc.size());
  CvmId id = env.tmm.createCvm(pg, 1200).results[0];
  env.tmm.tecCreate(id, TecParams{});
  Ipa block = u64{1} << 21;  // 2 MiB aligned, level-2 slot free
  env.host.mapTablesFor(id, 0x1000);
  env.tmm.createTtt(id, block, 2);  // level-3 deliberately absent
  c.expect(env.tmm.dataBlockCreateUnknown(id, block, kPagesPerBlock2M)
                   .status == TmiStatus::Success,
           "block create failed");
  const CVm* vm = env.tmm.cvm(id);
  auto leaf = vm->ttt->resolve(block + 5 * kGranuleBytes);
  c.expect(leaf && leaf->level == 2, "inner page not served by a block entry");
  auto first = vm->ttt->resolve(block);
  c.expect(first && leaf && leaf->granule == first->granule + 5,
           "block entry not contiguous");
  c.expect(env.tmm.tttSound(id), "table audit failed");
  c.expect(env.tmm.dataBlockDestroy(id, block, kPagesPerBlock2M).status ==
               TmiStatus::Success,
           "block destroy failed");
  c.expect(!env.tmm.cvm(id)->ttt->resolve(block), "block still resolves");
  finish(r, env, c);
  return r;
}

inline CaseResult caseTttBlockVsSingle() {
  CaseResult r{"ttt-block-vs-single", "ttt-levels"};
  Checker c;
  std::set<TmiCommand> tmis;
  std::set<TsiFunction> tsis;
  for (u64 n : {u64{1}, u64{2}}) {
    SimEnv a, b;
    std::vector<ImagePage> image;
    for (u64 i = 0; i < n; ++i)
      image.push_back({0x10000 + i * kGranuleBytes,
                       patternPage(static_cast<u8>(i + 1))});
    // env a loads through the block interface (bootCvm groups runs), env b
    // through singles
    CvmId ia = bootOne(a, {GuestProgram{}}, image);
    CVmParams params;
    GranuleIndex pg = b.host.claimStagingGranule();
    Bytes enc = params.encode();
    b.host.hostWrite(pg, 0, enc.data(), enc.size());
    CvmId ib = b.tmm.createCvm(pg, 64).results[0];
    b.tmm.tecCreate(ib, TecParams{});
    for (const auto& p : image) b.host.mapTablesFor(ib, p.ipa);
    u64 tmi_before = b.ledger.tmi_calls;
    for (const auto& p : image) {
      GranuleIndex src = b.host.claimStagingGranule();
      b.host.hostWrite(src, 0, p.data.data(), p.data.size());
      c.expect(b.tmm.dataCreate(ib, p.ipa, src).status == TmiStatus::Success,
               "single-page create failed");
    }
    u64 singles_tmis = b.ledger.tmi_calls - tmi_before;
    b.tmm.activateCvm(ib);
    const CVm* va = a.tmm.cvm(ia);
    const CVm* vb = b.tmm.cvm(ib);
    c.expect(va->measurement.current() == vb->measurement.current(),
             "block vs single measurements differ at n=" + std::to_string(n));
    for (const auto& p : image) {
      auto la = va->ttt->resolve(p.ipa);
      auto lb = vb->ttt->resolve(p.ipa);
      c.expect(la && lb, "page missing");
      if (la && lb)
        c.expect(a.mem.granule(la->granule).contents ==
                     b.mem.granule(lb->granule).contents,
                 "page contents differ");
    }
    c.expect(singles_tmis == n, "single-page load TMI count wrong");
    for (auto t : a.tmm.invokedTmis()) tmis.insert(t);
    for (auto t : b.tmm.invokedTmis()) tmis.insert(t);
  }
  r.tmis = tmis;
  r.tsis = tsis;
  r.passed = c.ok;
  r.detail = c.detail;
  return r;
}

// ---- inter-world-sharing ----

inline CaseResult caseShareUnprotectedWindow() {
  CaseResult r{"share-unprotected-window", "inter-world-sharing"};
  SimEnv env;
  Checker c;
  GuestProgram prog;
  CVmParams defaults;
  Ipa shared_ipa = defaults.protected_ipa_limit;  // first unprotected page
  Bytes msg = {'h', 'e', 'l', 'l', 'o'};
  prog.insns = {InsnMemWrite{shared_ipa, msg}, InsnMemRead{shared_ipa, 5},
                InsnHalt{}};
  CvmId id = bootOne(env, {prog}, {{0x1000, patternPage(4)}});
  // host offers one of its own pages as the shared window
  GranuleIndex win = env.host.claimStagingGranule();
  env.host.mapTablesFor(id, shared_ipa);
  c.expect(env.tmm.mapUnprotected(id, shared_ipa, win).status ==
               TmiStatus::Success,
           "unprotected map failed");
  TecId tec = env.host.tecsOf(id)[0];
  env.tmm.tecEnter(tec, 1);  // the guest writes
  Bytes seen(5);
  env.host.hostRead(win, 0, seen.data(), seen.size());
  c.expect(seen == msg, "host did not observe the guest's write");
  env.tmm.tecEnter(tec, 1);  // the guest reads its own write back
  c.expect(!env.tmm.tec(tec)->guest_trace.empty(), "guest read missing");
  c.expect(env.tmm.unmapUnprotected(id, shared_ipa).status ==
               TmiStatus::Success,
           "unprotected unmap failed");
  // after unmap the same guest access faults
  Tec* t = env.tmm.tecMut(tec);
  t->pc = 1;  // rerun the read
  auto resp2 = env.tmm.tecEnter(tec, 4);
  c.expect(resp2.status == TmiStatus::Success &&
               static_cast<ExitReason>(resp2.results[0]) ==
                   ExitReason::DataAbort,
           "unmapped window access did not abort");
  finish(r, env, c);
  return r;
}

inline GuestProgram blkProgram(Ipa hdr_w, Ipa data_w, Ipa status_w, Ipa hdr_r,
                               Ipa data_r, Ipa status_r, const Bytes& payload,
                               u64 sector) {
  GuestProgram prog;
  BlkRequestHeader wh{kBlkRequestWrite, sector};
  BlkRequestHeader rh{kBlkRequestRead, sector};
  prog.insns.push_back(InsnMemWrite{data_w, payload});
  prog.insns.push_back(InsnMemWrite{hdr_w, wh.encode()});
  prog.insns.push_back(InsnVirtioSubmit{0,
                                        {{hdr_w, 16, false},
                                         {data_w, kGranuleBytes, false},
                                         {status_w, 1, true}}});
  prog.insns.push_back(InsnWfi{});
  if (data_r == data_w)  // reuse: scrub so the read-back is observable
    prog.insns.push_back(InsnMemWrite{data_w, Bytes(kGranuleBytes, 0)});
  prog.insns.push_back(InsnMemWrite{hdr_r, rh.encode()});
  prog.insns.push_back(InsnVirtioSubmit{0,
                                        {{hdr_r, 16, false},
                                         {data_r, kGranuleBytes, true},
                                         {status_r, 1, true}}});
  prog.insns.push_back(InsnWfi{});
  prog.insns.push_back(InsnMemRead{data_r, 32});
  // no halt: the script parks so the caller can inspect the guest trace
  return prog;
}

inline CaseResult caseShareVirtioBlk(bool protect_pages) {
  CaseResult r{protect_pages ? "share-virtio-blk-protected"
                             : "share-virtio-blk",
               "inter-world-sharing"};
  SimEnv env;
  Checker c;
  Ipa hdr_w = 0x10000, data_w = 0x11000, status_w = 0x12000;
  Ipa hdr_r = 0x13000, status_r = 0x15000;
  // disk encryption ties ciphertext to the page it came from, so the
  // protected variant reads back into the same (scrubbed) buffer page
  Ipa data_r = protect_pages ? data_w : 0x14000;
  Bytes payload = patternPage(protect_pages ? 0x51 : 0x21);
  std::vector<ImagePage> image;
  for (Ipa ipa : {hdr_w, data_w, status_w, hdr_r, status_r})
    image.push_back({ipa, Bytes{}});
  if (data_r != data_w) image.push_back({data_r, Bytes{}});
  VirtioDeviceConfig dev;
  dev.kind = VirtioDeviceConfig::Kind::Blk;
  dev.vring_ipa = 0x40000;
  dev.disk_sectors = 256;
  CvmId id = bootOne(env, {blkProgram(hdr_w, data_w, status_w, hdr_r, data_r,
                                      status_r, payload, 8)},
                     image, {dev}, 1, 80);
  if (protect_pages) {
    Bytes key = env.ioKey(id);
    auto g = env.tmm.resolveIpaForHost(id, data_w);
    c.expect(g.has_value(), "buffer page unresolved");
    if (g) env.shadow.protection().protect(id, *g, data_w >> kPageShift, key);
  }
  RunReport rep = env.host.run(id, 200);
  c.expect(!rep.deadlock, "run deadlocked");
  c.expect(rep.exit_counts["DATA_ABORT"] >= 2, "doorbell exits missing");
  // the guest read back exactly the bytes it wrote
  TecId tec = env.host.tecsOf(id)[0];
  const Tec* t = env.tmm.tec(tec);
  std::string want = "read:" + std::to_string(data_r) + ":" +
                     toHex(payload.data(), 32);
  bool saw = false;
  for (const auto& line : t->guest_trace) saw = saw || line == want;
  c.expect(saw, "guest read-back does not match what it wrote");
  // host-side disk: plaintext under no protection, ciphertext under it
  const Bytes* disk = env.host.diskContents(id, 0);
  c.expect(disk != nullptr, "no disk");
  if (disk) {
    Bytes stored(disk->begin() + 8 * kBlkSectorBytes,
                 disk->begin() + 8 * kBlkSectorBytes + kGranuleBytes);
    if (protect_pages)
      c.expect(stored != payload, "protected payload visible to the host");
    else
      c.expect(stored == payload, "disk does not hold the written sector");
  }
  if (protect_pages) {
    // the shadow copy the host serves from is ciphertext too
    auto g = env.tmm.resolveIpaForHost(id, data_w);
    if (g) {
      GranuleIndex sg = env.shadow.shadowOf(id, *g);
      Bytes shadow_bytes(env.mem.granule(sg).contents.begin(),
                         env.mem.granule(sg).contents.end());
      c.expect(shadow_bytes != payload, "shadow page holds plaintext");
    }
  }
  c.expect(env.host.hostAccessFaults() == 0, "host touched secure memory");
  c.expect(env.ledger.stage2_map == 0 && env.ledger.stage2_unmap == 0 &&
               env.ledger.tlb_flush == 0,
           "direct policy paid mapping costs");
  env.tmm.destroyCvm(id);
  finish(r, env, c);
  return r;
}

inline CaseResult caseShareNetLoopback() {
  CaseResult r{"share-net-loopback", "inter-world-sharing"};
  SimEnv env;
  Checker c;
  Ipa tx = 0x11000, rx = 0x12000;
  Bytes frame(600);
  for (std::size_t i = 0; i < frame.size(); ++i)
    frame[i] = static_cast<u8>(i * 3 + 1);
  GuestProgram prog;
  prog.insns = {
      InsnMemWrite{tx, frame},
      InsnVirtioSubmit{0, {{tx, 600, false}}},
      InsnWfi{},
      InsnVirtioSubmit{0, {{rx, kGranuleBytes, true}}},
      InsnWfi{},
      InsnMemRead{rx, 600},
  };
  VirtioDeviceConfig dev;
  dev.kind = VirtioDeviceConfig::Kind::Net;
  dev.vring_ipa = 0x40000;
  std::vector<ImagePage> image = {{tx, Bytes{}}, {rx, Bytes{}}};
  CvmId id = bootOne(env, {prog}, image, {dev}, 1, 80);
  RunReport rep = env.host.run(id, 200);
  c.expect(!rep.deadlock, "run deadlocked");
  const Tec* t = env.tmm.tec(env.host.tecsOf(id)[0]);
  std::string want =
      "read:" + std::to_string(rx) + ":" + toHex(frame.data(), 600);
  bool saw = false;
  for (const auto& line : t->guest_trace) saw = saw || line == want;
  c.expect(saw, "loopback frame did not round-trip");
  c.expect(env.host.hostAccessFaults() == 0, "host touched secure memory");
  finish(r, env, c);
  return r;
}

// ---- inter-cvm-isolation ----

inline CaseResult caseIsolationCrossMap() {
  CaseResult r{"isolation-cross-map", "inter-cvm-isolation"};
  SimEnv env;
  Checker c;
  CvmId a = bootOne(env, {GuestProgram{}}, {{0x1000, patternPage(1)}});
  CvmId b = bootOne(env, {GuestProgram{}}, {{0x1000, patternPage(2)}});
  const CVm* vb = env.tmm.cvm(b);
  auto leaf = vb->ttt->resolve(0x1000);
  c.expect(leaf.has_value(), "victim page unresolved");
  GranuleIndex victim = leaf ? leaf->granule : 0;
  c.expect(env.tmm.mapProtected(a, 0x9000, victim).status ==
               TmiStatus::ErrorInput,
           "cross-cVM protected map accepted");
  c.expect(env.mem.checkAccess(Requestor::cvmId(a), victim,
                               AccessMode::Read) == AccessResult::Fault,
           "cross-cVM physical access allowed");
  c.expect(env.mem.checkAccess(Requestor::host(), victim, AccessMode::Read) ==
               AccessResult::Fault,
           "host access to secure payload allowed");
  finish(r, env, c);
  return r;
}

inline CaseResult caseIsolationZeroOnDestroy() {
  CaseResult r{"isolation-zero-on-destroy", "inter-cvm-isolation"};
  SimEnv env;
  Checker c;
  CvmId id = bootOne(env, {GuestProgram{}}, {{0x1000, patternPage(0x7e)}});
  const SecureRegion* region = env.mem.regionOf(id);
  c.expect(region != nullptr, "no secure region");
  GranuleIndex base = region ? region->base : 0;
  u64 count = region ? region->count : 0;
  c.expect(!env.mem.rangeZeroed(base, count), "payload never landed");
  c.expect(env.tmm.destroyCvm(id).status == TmiStatus::Success,
           "destroy failed");
  c.expect(env.mem.rangeZeroed(base, count), "secure pages not scrubbed");
  for (u64 i = 0; i < count; ++i)
    c.expect(!env.mem.granule(base + i).owner.has_value(),
             "ownership survived destroy");
  // lifecycle log ends NULL via SYSTEM_OFF
  const auto& tr = env.tmm.transitions();
  c.expect(tr.size() >= 3 && tr[tr.size() - 2].to == CvmState::SystemOff &&
               tr.back().to == CvmState::Null,
           "teardown transitions wrong");
  finish(r, env, c);
  return r;
}

inline CaseResult caseIsolationMeasurementUnique() {
  CaseResult r{"isolation-measurement-identity", "inter-cvm-isolation"};
  SimEnv env;
  Checker c;
  CvmId a = bootOne(env, {GuestProgram{}}, {{0x1000, patternPage(1)}});
  CvmId b = bootOne(env, {GuestProgram{}}, {{0x1000, patternPage(1)}});
  CvmId d = bootOne(env, {GuestProgram{}}, {{0x1000, patternPage(2)}});
  c.expect(env.tmm.cvm(a)->measurement.current() ==
               env.tmm.cvm(b)->measurement.current(),
           "identical boots measured differently");
  c.expect(env.tmm.cvm(a)->measurement.current() !=
               env.tmm.cvm(d)->measurement.current(),
           "different images measured identically");
  finish(r, env, c);
  return r;
}

inline CaseResult caseIsolationTokenBinding() {
  CaseResult r{"isolation-token-binding", "inter-cvm-isolation"};
  SimEnv env;
  Checker c;
  CVmParams defaults;
  Ipa shared_ipa = defaults.protected_ipa_limit;
  Bytes challenge(kChallengeBytes, 0xab);
  GuestProgram prog;
  prog.insns = {
      tsi(TsiFunction::AttestationTokenInit, {}, challenge),
      tsi(TsiFunction::AttestationTokenContinue, {shared_ipa, 100}),
      tsi(TsiFunction::AttestationTokenContinue, {shared_ipa + 100, 8192}),
  };
  CvmId a = bootOne(env, {prog}, {{0x1000, patternPage(1)}});
  CvmId b = bootOne(env, {GuestProgram{}}, {{0x1000, patternPage(2)}});
  GranuleIndex win = env.host.claimStagingGranule();
  env.host.mapTablesFor(a, shared_ipa);
  c.expect(env.tmm.mapUnprotected(a, shared_ipa, win).status ==
               TmiStatus::Success,
           "shared window map failed");
  TecId tec = env.host.tecsOf(a)[0];
  env.tmm.tecEnter(tec, 1);  // init
  u64 token_size = env.tmm.tec(tec)->gprs[1];
  c.expect(token_size > 100, "token unexpectedly small");
  env.tmm.tecEnter(tec, 1);  // first chunk
  c.expect(static_cast<TsiStatus>(env.tmm.tec(tec)->gprs[0]) ==
               TsiStatus::Incomplete,
           "chunked retrieval not reported incomplete");
  env.tmm.tecEnter(tec, 1);  // rest
  c.expect(static_cast<TsiStatus>(env.tmm.tec(tec)->gprs[0]) ==
               TsiStatus::Success,
           "token retrieval did not finish");
  Bytes raw(token_size);
  env.host.hostRead(win, 0, raw.data(), raw.size());
  auto va = env.tmm.cvm(a);
  auto vbm = env.tmm.cvm(b)->measurement.current();
  c.expect(verifyToken(raw, env.keys.rakPublic(), va->measurement.current(),
                       challenge) == VerifyResult::Accept,
           "honest token rejected");
  c.expect(verifyToken(raw, env.keys.rakPublic(), vbm, challenge) ==
               VerifyResult::RejectMeasurement,
           "token accepted against another cVM's measurement");
  finish(r, env, c);
  return r;
}

// ---- multi-core ----

inline CaseResult caseMulticorePsciBoot() {
  CaseResult r{"multicore-psci-boot", "multi-core"};
  SimEnv env;
  Checker c;
  GuestProgram boot_cpu, second_cpu;
  boot_cpu.insns = {InsnPsciCall{static_cast<u32>(PsciFunction::CpuOn), 1},
                    InsnComputeTicks{4}, InsnHalt{}};
  second_cpu.insns = {InsnMemRead{0x1000, 8},
                      InsnPsciCall{static_cast<u32>(PsciFunction::CpuOff), 0}};
  CvmId id = bootOne(env, {boot_cpu, second_cpu},
                     {{0x1000, patternPage(6)}}, {}, 2);
  TecId t0 = env.host.tecsOf(id)[0];
  TecId t1 = env.host.tecsOf(id)[1];
  c.expect(!env.tmm.tec(t1)->runnable, "secondary runnable before CPU_ON");
  RunReport rep = env.host.run(id, 100);
  c.expect(rep.system_off, "primary never halted");
  (void)t0;
  c.expect(rep.exit_counts["PSCI"] >= 2, "psci exits missing");
  finish(r, env, c);
  return r;
}

inline CaseResult caseMulticoreQuantum() {
  CaseResult r{"multicore-quantum-roundrobin", "multi-core"};
  SimEnv env;
  Checker c;
  GuestProgram p0, p1;
  p0.insns = {InsnPsciCall{static_cast<u32>(PsciFunction::CpuOn), 1},
              InsnComputeTicks{300}, InsnComputeTicks{300},
              InsnHostCall{{42}}, InsnHalt{}};
  p1.insns = {InsnComputeTicks{300}, InsnComputeTicks{300},
              InsnPsciCall{static_cast<u32>(PsciFunction::CpuOff), 0}};
  CvmId id = bootOne(env, {p0, p1}, {{0x1000, patternPage(8)}}, {}, 2);
  env.host.addResponder({42, {7, 0, 0, 0}});
  RunReport rep = env.host.run(id, 200);
  c.expect(rep.system_off, "run did not complete");
  c.expect(rep.exit_counts["QUANTUM"] >= 2, "quantum preemption never fired");
  c.expect(rep.exit_counts["HOST_CALL"] == 1, "host call count wrong");
  finish(r, env, c);
  return r;
}

// ---- race ----

inline CaseResult caseRaceParallelDispatch(bool parallel) {
  CaseResult r{"race-parallel-dispatch", "race"};
  if (!parallel) {
    r.skipped = true;
    r.passed = true;
    r.detail = "requires --parallel-cpus; skipped in single-threaded mode";
    return r;
  }
  SimEnv env;
  Checker c;
  // each worker boots, loads, and destroys its own cVMs through the one
  // shared dispatcher
  auto worker = [&env](int w) {
    for (int iter = 0; iter < 10; ++iter) {
      try {
        std::vector<ImagePage> image = {
            {0x1000, patternPage(static_cast<u8>(w * 16 + iter))}};
        CvmId id = bootOne(env, {GuestProgram{}}, image);
        env.tmm.dataCreateUnknown(id, 0x2000);
        env.tmm.destroyCvm(id);
      } catch (const BootError&) {
        // transient exhaustion under contention is allowed; corruption is not
      }
    }
  };
  std::vector<std::thread> threads;
  for (int w = 0; w < 4; ++w) threads.emplace_back(worker, w);
  for (auto& t : threads) t.join();
  c.expect(env.mem.ownershipDisjoint(), "ownership overlap after race");
  c.expect(env.mem.hostFaultsOnAllSecure(), "secure world exposed after race");
  c.expect(env.tmm.cvmIds().empty(), "leaked cVMs after race");
  finish(r, env, c);
  return r;
}

inline CaseResult caseRaceEnterVsDestroy(bool parallel) {
  CaseResult r{"race-enter-vs-destroy", "race"};
  if (!parallel) {
    r.skipped = true;
    r.passed = true;
    r.detail = "requires --parallel-cpus; skipped in single-threaded mode";
    return r;
  }
  SimEnv env;
  Checker c;
  GuestProgram spin;
  for (int i = 0; i < 200; ++i) spin.insns.push_back(InsnComputeTicks{1});
  CvmId id = bootOne(env, {spin}, {{0x1000, patternPage(5)}});
  TecId tec = env.host.tecsOf(id)[0];
  std::thread enterer([&] {
    for (int i = 0; i < 50; ++i) env.tmm.tecEnter(tec, 2);
  });
  std::thread destroyer([&] { env.tmm.destroyCvm(id); });
  enterer.join();
  destroyer.join();
  c.expect(env.tmm.cvm(id) == nullptr, "destroy lost the race entirely");
  c.expect(env.tmm.tecEnter(tec, 2).status != TmiStatus::Success,
           "entering a destroyed context succeeded");
  c.expect(env.mem.ownershipDisjoint() && env.mem.hostFaultsOnAllSecure(),
           "isolation audit failed after race");
  finish(r, env, c);
  return r;
}

// ---- timer-interrupt ----

inline CaseResult caseTimerWfiWake() {
  CaseResult r{"timer-wfi-wake", "timer-interrupt"};
  SimEnv env;
  Checker c;
  GuestProgram prog;
  prog.insns = {InsnWfi{}, InsnMemRead{0x1000, 8}, InsnHalt{}};
  CvmId id = bootOne(env, {prog}, {{0x1000, patternPage(0x33)}});
  env.host.scheduleInterrupt(2, 27, 0);
  u64 lr_before = env.gic.listRegisterWrites();
  TecId tec = env.host.tecsOf(id)[0];
  RunReport rep = env.host.run(id, 50);
  (void)tec;
  c.expect(rep.system_off, "guest never woke from wfi");
  c.expect(rep.exit_counts["IRQ"] >= 1, "interrupt exit missing");
  c.expect(rep.exit_counts.count("FIQ") == 0, "an exit claimed to be FIQ");
  c.expect(env.gic.listRegisterWrites() > lr_before,
           "vIRQ delivered without a list-register write");
  finish(r, env, c);
  return r;
}

inline CaseResult caseTimerDropPolicy() {
  CaseResult r{"timer-withheld-injection", "timer-interrupt"};
  SimConfig cfg;
  cfg.host_policy.drop_intids = {27};
  SimEnv env(cfg);
  Checker c;
  GuestProgram prog;
  prog.insns = {InsnWfi{}, InsnHalt{}};
  CvmId id = bootOne(env, {prog}, {{0x1000, patternPage(0x44)}});
  env.host.scheduleInterrupt(2, 27, 0);
  RunReport rep = env.host.run(id, 50);
  c.expect(!rep.system_off, "withheld interrupt still woke the guest");
  c.expect(rep.deadlock, "deadlock not reported");
  c.expect(env.mem.hostFaultsOnAllSecure() && env.mem.ownershipDisjoint(),
           "withholding broke an isolation invariant");
  c.expect(env.tmm.tttSound(id), "table audit failed");
  finish(r, env, c);
  return r;
}

inline CaseResult caseTimerListRegisterOverflow() {
  CaseResult r{"timer-list-register-overflow", "timer-interrupt"};
  SimEnv env;
  Checker c;
  GuestProgram prog;
  prog.insns = {InsnWfi{}, InsnHalt{}};
  CvmId id = bootOne(env, {prog}, {{0x1000, patternPage(0x55)}});
  TecId tec = env.host.tecsOf(id)[0];
  for (u32 i = 0; i < kListRegisters; ++i)
    c.expect(env.gic.writeListRegister(tec, 100 + i), "list register refused");
  // all four occupied: the next injection must be refused and stay pending
  env.gic.configure(27, IrqGroup::G1NonSecure, true);
  env.gic.pend(27, tec);
  c.expect(!env.host.emulateInterrupt(27, tec),
           "fifth list-register write accepted");
  c.expect(env.gic.pendingFor(tec).has_value(), "interrupt lost, not retried");
  // guest drains one, then the retry succeeds
  c.expect(env.gic.takeInjected(tec).has_value(), "nothing to drain");
  c.expect(env.host.emulateInterrupt(27, tec), "retry failed");
  c.expect(!env.gic.pendingFor(tec).has_value(), "pending not cleared");
  finish(r, env, c);
  return r;
}

inline CaseResult caseMulticoreIpi() {
  CaseResult r{"multicore-virtual-ipi", "multi-core"};
  SimEnv env;
  Checker c;
  CVmParams defaults;
  Ipa sgi = env.host.sgiDoorbell(defaults);
  GuestProgram sender, receiver;
  sender.insns = {InsnPsciCall{static_cast<u32>(PsciFunction::CpuOn), 1},
                  InsnMmioWrite{sgi, (u64{1} << 8) | 5},  // SGI 5 to vCPU 1
                  InsnHalt{}};
  receiver.insns = {InsnWfi{},
                    InsnPsciCall{static_cast<u32>(PsciFunction::CpuOff), 0}};
  CvmId id = bootOne(env, {sender, receiver}, {{0x1000, patternPage(0x66)}},
                     {}, 2);
  u64 emul_before = env.ledger.irq_emulations;
  RunReport rep = env.host.run(id, 60);
  c.expect(rep.system_off, "ipi flow did not finish");
  c.expect(env.ledger.irq_emulations - emul_before == 2,
           "virtual ipi took " +
               std::to_string(env.ledger.irq_emulations - emul_before) +
               " interrupt-emulation round trips, wanted 2");
  finish(r, env, c);
  return r;
}

}  // namespace conf

// ---- the runner ----

struct ConformanceReport {
  std::vector<CaseResult> cases;
  bool all_passed = false;
  std::set<TmiCommand> tmis;
  std::set<TsiFunction> tsis;
  bool tmi_coverage_complete = false;
  bool tsi_coverage_complete = false;

  json toJson() const {
    json j;
    j["cases"] = json::array();
    for (const auto& c : cases) {
      json cj;
      cj["id"] = c.id;
      cj["category"] = c.category;
      cj["passed"] = c.passed;
      cj["skipped"] = c.skipped;
      cj["detail"] = c.detail;
      j["cases"].push_back(cj);
    }
    j["all_passed"] = all_passed;
    j["tmi_coverage"] = std::to_string(tmis.size()) + "/" +
                        std::to_string(allTmiCommands().size());
    j["tsi_coverage"] =
        std::to_string(tsis.size()) + "/" + std::to_string(kTsiFunctionCount);
    j["tmi_coverage_complete"] = tmi_coverage_complete;
    j["tsi_coverage_complete"] = tsi_coverage_complete;
    std::vector<std::string> missing;
    for (TmiCommand cmd : allTmiCommands())
      if (!tmis.count(cmd)) missing.push_back(tmiCommandName(cmd));
    j["missing_tmis"] = missing;
    return j;
  }
};

inline ConformanceReport runConformance(const std::string& filter = "",
                                        bool parallel = false) {
  using namespace conf;
  std::vector<std::function<CaseResult()>> all = {
      [] { return caseSanityParams(); },
      [] { return caseSanityDataOps(); },
      [] { return caseSanityTecPsci(); },
      [] { return caseSanityTsiArgs(); },
      [] { return caseTttLevelWalk(); },
      [] { return caseTttBlockMapping(); },
      [] { return caseTttBlockVsSingle(); },
      [] { return caseShareUnprotectedWindow(); },
      [] { return caseShareVirtioBlk(false); },
      [] { return caseShareVirtioBlk(true); },
      [] { return caseShareNetLoopback(); },
      [] { return caseIsolationCrossMap(); },
      [] { return caseIsolationZeroOnDestroy(); },
      [] { return caseIsolationMeasurementUnique(); },
      [] { return caseIsolationTokenBinding(); },
      [] { return caseMulticorePsciBoot(); },
      [] { return caseMulticoreQuantum(); },
      [] { return caseMulticoreIpi(); },
      [parallel] { return caseRaceParallelDispatch(parallel); },
      [parallel] { return caseRaceEnterVsDestroy(parallel); },
      [] { return caseTimerWfiWake(); },
      [] { return caseTimerDropPolicy(); },
      [] { return caseTimerListRegisterOverflow(); },
  };

  ConformanceReport rep;
  rep.all_passed = true;
  for (auto& fn : all) {
    CaseResult r;
    try {
      r = fn();
    } catch (const std::exception& e) {
      r.passed = false;
      r.detail = std::string("exception: ") + e.what();
    }
    if (!filter.empty() && r.category != filter) continue;
    rep.all_passed = rep.all_passed && r.passed;
    for (auto t : r.tmis) rep.tmis.insert(t);
    for (auto t : r.tsis) rep.tsis.insert(t);
    rep.cases.push_back(std::move(r));
  }
  if (filter.empty()) {
    rep.tmi_coverage_complete = rep.tmis.size() == allTmiCommands().size();
    rep.tsi_coverage_complete = rep.tsis.size() == kTsiFunctionCount;
    rep.all_passed =
        rep.all_passed && rep.tmi_coverage_complete && rep.tsi_coverage_complete;
  }
  return rep;
}

}  // namespace tzmm
