// Acceptance gate: ten criteria, one verdict line each, exit 0 only if
// every criterion passes. Each criterion is self-contained and pins its
// own tolerances.

#include <openssl/sha.h>

#include <chrono>
#include <cstdio>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "tzmm/bench.hpp"
#include "tzmm/conformance.hpp"
#include "tzmm/scenario.hpp"

using namespace tzmm;

namespace {

struct Verdict {
  bool ok = true;
  std::string detail;
  void require(bool cond, const std::string& why) {
    if (!cond && ok) {
      ok = false;
      detail = why;
    }
  }
};

double seconds(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

GranuleIndex stageParams(SimEnv& env, const CVmParams& p) {
  GranuleIndex g = env.host.claimStagingGranule();
  Bytes enc = p.encode();
  env.host.hostWrite(g, 0, enc.data(), enc.size());
  return g;
}

// ---- criterion 1: fuzzed command sequences ----

Verdict criterion1() {
  Verdict v;
  auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(0xC1);
  SimEnv env;
  std::vector<CvmId> live;

  for (int step = 0; step < 100000; ++step) {
    u64 pick = rng() % 10;
    if (pick == 0 && live.size() < 4) {
      CVmParams p;
      TmiResponse r = env.tmm.createCvm(stageParams(env, p), 16);
      if (r.status == TmiStatus::Success) live.push_back(r.results[0]);
    } else if (pick == 1 && !live.empty()) {
      std::size_t i = rng() % live.size();
      if (env.tmm.destroyCvm(live[i]).status == TmiStatus::Success)
        live.erase(live.begin() + i);
    } else {
      TmiRequest req;
      req.command = static_cast<u64>(allTmiCommands()[rng() % 19]);
      req.args[0] = live.empty() ? rng() % 8 : live[rng() % live.size()];
      req.args[1] = (rng() % 512) * kGranuleBytes;
      req.args[2] = rng() % env.mem.size();
      req.args[3] = rng() % 8;
      try {
        env.tmm.dispatch(req);
      } catch (const std::exception& e) {
        v.require(false, std::string("dispatch threw: ") + e.what());
        return v;
      }
    }
    if (step % 2000 == 0) {
      v.require(env.mem.ownershipDisjoint(), "ownership overlap");
      v.require(env.mem.hostFaultsOnAllSecure(), "secure leak to host");
      for (CvmId id : live)
        v.require(env.tmm.tttSound(id), "translation tree unsound");
      if (!v.ok) return v;
    }
  }
  v.require(env.mem.ownershipDisjoint(), "ownership overlap at end");
  v.require(env.mem.hostFaultsOnAllSecure(), "secure leak at end");

  // every recorded lifecycle transition must be one of the legal edges
  const std::set<std::pair<CvmState, CvmState>> legal = {
      {CvmState::Null, CvmState::New},
      {CvmState::New, CvmState::Active},
      {CvmState::New, CvmState::SystemOff},
      {CvmState::Active, CvmState::SystemOff},
      {CvmState::SystemOff, CvmState::Null},
  };
  for (const auto& t : env.tmm.transitions())
    v.require(legal.count({t.from, t.to}) == 1,
              std::string("forbidden transition ") + cvmStateName(t.from) +
                  " -> " + cvmStateName(t.to));

  double secs = seconds(t0);
  v.require(secs < 120.0, "took " + std::to_string(secs) + " s");
  if (v.ok) v.detail = "100000 commands, " + std::to_string(secs) + " s";
  return v;
}

// ---- criterion 2: measurement fidelity against an independent fold ----

Digest oracleSha(const u8* p, std::size_t n) {
  Digest d{};
  SHA256(p, n, d.data());
  return d;
}

Digest oracleFold(const Digest& cur, u8 kind, u64 ipa, const Digest& content) {
  std::vector<u8> buf(cur.begin(), cur.end());
  buf.push_back(kind);
  for (int i = 0; i < 8; ++i)
    buf.push_back(static_cast<u8>((ipa >> (8 * i)) & 0xFF));
  buf.insert(buf.end(), content.begin(), content.end());
  return oracleSha(buf.data(), buf.size());
}

Digest bootAndMeasure(const std::vector<ImagePage>& image) {
  SimEnv env;
  CVmParams p;
  CvmId id = env.tmm.createCvm(stageParams(env, p), 64).results[0];
  for (const auto& page : image) {
    env.host.mapTablesFor(id, page.ipa);
    GranuleIndex src = env.host.claimStagingGranule();
    env.host.hostWrite(src, 0, page.data.data(), page.data.size());
    if (env.tmm.dataCreate(id, page.ipa, src).status != TmiStatus::Success)
      return Digest{};
  }
  env.tmm.tecCreate(id, TecParams{});
  env.tmm.activateCvm(id);
  return env.tmm.cvm(id)->measurement.current();
}

Verdict criterion2() {
  Verdict v;
  std::mt19937_64 rng(0xC2);
  for (int trial = 0; trial < 100 && v.ok; ++trial) {
    std::vector<ImagePage> image;
    int pages = static_cast<int>(rng() % 6 + 1);
    std::set<Ipa> used;
    for (int i = 0; i < pages; ++i) {
      Ipa ipa = (rng() % 256) * kGranuleBytes;
      if (!used.insert(ipa).second) continue;
      Bytes data(kGranuleBytes);
      for (auto& b : data) b = static_cast<u8>(rng());
      image.push_back({ipa, data});
    }

    Digest got = bootAndMeasure(image);

    // independent fold of the documented encoding
    CVmParams p;
    Bytes enc = p.encode();
    Digest expect = oracleSha(enc.data(), enc.size());
    for (const auto& page : image)
      expect = oracleFold(expect, 1 /* data */, page.ipa,
                          oracleSha(page.data.data(), page.data.size()));
    TecParams tp{};
    Bytes tpe = tp.encode();
    expect = oracleFold(expect, 2 /* context */, 0,
                        oracleSha(tpe.data(), tpe.size()));
    v.require(got == expect, "fold mismatch at trial " + std::to_string(trial));

    // a single flipped image byte must change the measurement
    if (!image.empty()) {
      std::vector<ImagePage> mutated = image;
      mutated[rng() % mutated.size()].data[rng() % kGranuleBytes] ^= 1;
      v.require(bootAndMeasure(mutated) != got,
                "perturbation left the measurement unchanged");
    }
  }
  if (v.ok) v.detail = "100 images, bit-exact, perturbation-sensitive";
  return v;
}

// ---- criterion 3: block create vs page-by-page create ----

struct LoadOutcome {
  u64 tmis = 0;
  Digest measurement{};
  std::vector<std::array<u8, kGranuleBytes>> contents;
  int leaf_level = -1;
  bool ok = false;
};

LoadOutcome loadPages(bool block, u64 n) {
  SimConfig cfg;
  cfg.granules = 8192;
  SimEnv env(cfg);
  CVmParams p;
  CvmId id = env.tmm.createCvm(stageParams(env, p), n + 40).results[0];
  Ipa base = u64{1} << 21;

  // host-side source pages: a contiguous free run, deterministic fill
  GranuleIndex src = 3000;
  for (u64 i = 0; i < n; ++i) {
    Bytes data(kGranuleBytes);
    for (std::size_t j = 0; j < data.size(); ++j)
      data[j] = static_cast<u8>(i * 31 + j * 7 + 5);
    env.host.hostWrite(src + i, 0, data.data(), data.size());
  }

  env.tmm.createTtt(id, base, 1);
  env.tmm.createTtt(id, base, 2);
  if (!(block && n == kPagesPerBlock2M))
    env.tmm.createTtt(id, base, 3);  // page-level entries need a leaf table

  LoadOutcome out;
  u64 before = env.ledger.tmi_calls;
  if (block) {
    if (env.tmm.dataBlockCreate(id, base, n, src).status != TmiStatus::Success)
      return out;
  } else {
    for (u64 i = 0; i < n; ++i)
      if (env.tmm.dataCreate(id, base + i * kGranuleBytes, src + i).status !=
          TmiStatus::Success)
        return out;
  }
  out.tmis = env.ledger.tmi_calls - before;
  const CVm* vm = env.tmm.cvm(id);
  out.measurement = vm->measurement.current();
  for (u64 i = 0; i < n; ++i) {
    auto leaf = vm->ttt->resolve(base + i * kGranuleBytes);
    if (!leaf) return out;
    out.leaf_level = leaf->level;
    out.contents.push_back(env.mem.granule(leaf->granule).contents);
  }
  out.ok = true;
  return out;
}

Verdict criterion3() {
  Verdict v;
  for (u64 n : {u64{1}, u64{2}, u64{512}}) {
    LoadOutcome b = loadPages(true, n);
    LoadOutcome s = loadPages(false, n);
    v.require(b.ok && s.ok, "load failed at n=" + std::to_string(n));
    if (!v.ok) break;
    v.require(b.measurement == s.measurement,
              "measurements differ at n=" + std::to_string(n));
    v.require(b.contents == s.contents,
              "memory differs at n=" + std::to_string(n));
    v.require(b.tmis == 1, "block load was not one command");
    v.require(s.tmis == n, "single-page load command count wrong");
    if (n == kPagesPerBlock2M)
      v.require(b.leaf_level == 2, "512-page load did not map a block entry");
    else
      v.require(b.leaf_level == 3, "small block did not map page entries");
  }
  if (v.ok) v.detail = "n in {1, 2, 512}; command count n-fold reduced";
  return v;
}

// ---- criteria 4-6: latency model reproduction ----

Verdict fromBench(const char* name) {
  BenchResult r = runBench(name);
  Verdict v;
  v.ok = r.passed;
  v.detail = r.passed ? std::string(name) + " model checks hold" : r.detail;
  return v;
}

// ---- criterion 7: interrupt conversion ----

Verdict criterion7() {
  Verdict v;

  // a run with interrupts from three sources: timer schedule, virtio
  // completion, and an inter-vCPU kick
  SimEnv env;
  CVmParams defaults;
  Ipa sgi = env.host.sgiDoorbell(defaults);
  Ipa buf = 0x11000;
  GuestProgram a, b;
  a.insns = {InsnPsciCall{static_cast<u32>(PsciFunction::CpuOn), 1},
             InsnMemWrite{buf, Bytes(64, 0x66)},
             InsnVirtioSubmit{0, {{buf, 64, false}}},
             InsnWfi{},
             InsnMmioWrite{sgi, (u64{1} << 8) | 5},
             InsnWfi{}};  // park, keeping the cVM and its traces alive
  b.insns = {InsnWfi{},
             InsnPsciCall{static_cast<u32>(PsciFunction::CpuOff), 0}};
  VirtioDeviceConfig dev;
  dev.kind = VirtioDeviceConfig::Kind::Net;
  dev.vring_ipa = 0x40000;
  CvmId id = conf::bootOne(env, {a, b}, {{buf, Bytes{}}}, {dev}, 2, 80);
  env.host.scheduleInterrupt(14, 27, 0);
  env.host.run(id, 100);

  u64 virqs = 0;
  for (TecId t : env.host.tecsOf(id)) {
    const Tec* tec = env.tmm.tec(t);
    if (!tec) continue;
    for (const auto& line : tec->guest_trace)
      if (line.rfind("virq:", 0) == 0) ++virqs;
  }
  v.require(virqs >= 2, "expected several delivered vIRQs, saw " +
                            std::to_string(virqs));
  // report stream never carries a raw FIQ, only the converted IRQ exit
  for (const auto& e : env.host.exitEvents())
    v.require(e.reason.find("FIQ") == std::string::npos,
              "FIQ leaked into the exit stream");
  // every delivered vIRQ was preceded by a host list-register write
  v.require(env.gic.listRegisterWrites() >= virqs,
            "vIRQ delivered without a list-register write");

  // and the same holds across the shipped scenario
  ScenarioResult demo =
      runScenario(loadScenario(std::string(TZMM_SCENARIO_DIR) + "/demo.json"));
  v.require(demo.passed, "demo scenario failed");
  v.require(demo.report["invariants"]["no_fiq"].get<bool>(),
            "demo scenario saw a FIQ");
  if (v.ok)
    v.detail = std::to_string(virqs) + " vIRQs, all list-register mediated";
  return v;
}

// ---- criterion 8: virtio round trips and page encryption ----

Verdict criterion8() {
  Verdict v;
  for (auto* fn : {+[] { return conf::caseShareVirtioBlk(false); },
                   +[] { return conf::caseShareVirtioBlk(true); },
                   +[] { return conf::caseShareNetLoopback(); }}) {
    CaseResult r = fn();
    v.require(r.passed, r.id + ": " + r.detail);
  }

  // tweak sensitivity, checked directly on the page transform
  PageProtection prot;
  Bytes key(32, 0x3D);
  prot.protect(1, 10, 0x100, key);
  prot.protect(1, 11, 0x101, key);
  std::array<u8, kGranuleBytes> plain{}, c1{}, c2{};
  for (std::size_t i = 0; i < plain.size(); ++i)
    plain[i] = static_cast<u8>(i * 11 + 3);
  prot.transformOut(1, 10, plain.data(), c1.data());
  prot.transformOut(1, 11, plain.data(), c2.data());
  v.require(c1 != c2, "equal ciphertext across different page tweaks");
  v.require(c1 != plain, "ciphertext equals plaintext");
  if (v.ok) v.detail = "blk/net byte-exact; ciphertext tweak-bound";
  return v;
}

// ---- criterion 9: attestation end to end ----

Verdict criterion9() {
  Verdict v;
  SimEnv env;
  CvmId id = conf::bootOne(env, {GuestProgram{}},
                           {{0x1000, conf::patternPage(0x19)}});
  Bytes challenge(64, 0x5E);
  auto token = env.tmm.buildTokenFor(id, challenge);
  v.require(token.has_value(), "no token from an active cVM");
  if (!v.ok) return v;
  Bytes raw = token->encode();
  Digest meas = env.tmm.cvm(id)->measurement.current();
  v.require(verifyToken(raw, env.keys.rakPublic(), meas, challenge) ==
                VerifyResult::Accept,
            "honest token rejected");

  std::mt19937_64 rng(0xC9);
  for (int i = 0; i < 10000; ++i) {
    Bytes bad = raw;
    bad[rng() % bad.size()] ^= static_cast<u8>(1u << (rng() % 8));
    if (verifyToken(bad, env.keys.rakPublic(), meas, challenge) ==
        VerifyResult::Accept) {
      v.require(false, "bit-flipped token accepted at trial " +
                           std::to_string(i));
      return v;
    }
  }

  // sealed storage: firmware- and measurement-bound policies
  SealPolicy pol;
  pol.required_firmware_digest = env.keys.firmwareDigest();
  pol.required_measurement = meas;
  SealedBlob blob = seal(env.keys, Bytes{1, 2, 3}, pol, Bytes(12, 7));
  UnsealError err;
  v.require(unseal(env.keys, blob, meas, err).has_value(),
            "matching unseal failed");
  Digest other = meas;
  other[0] ^= 1;
  v.require(!unseal(env.keys, blob, other, err).has_value() &&
                err == UnsealError::PolicyMismatch,
            "measurement policy not enforced");
  KeyHierarchy other_fw(Bytes(32, 1), Digest{}, 1);
  v.require(!unseal(other_fw, blob, meas, err).has_value(),
            "firmware policy not enforced");
  if (v.ok) v.detail = "accept + 10000 flips rejected + policy binding";
  return v;
}

// ---- criterion 10: the conformance suite itself ----

Verdict criterion10() {
  Verdict v;
  auto t0 = std::chrono::steady_clock::now();
  ConformanceReport rep = runConformance("", 0);
  double secs = seconds(t0);
  for (const auto& c : rep.cases)
    if (!c.passed && !c.skipped)
      v.require(false, c.id + ": " + c.detail);
  v.require(rep.all_passed, "suite reported failure");
  v.require(rep.cases.size() >= 18,
            "only " + std::to_string(rep.cases.size()) + " cases");
  std::set<std::string> cats;
  for (const auto& c : rep.cases) cats.insert(c.category);
  v.require(cats.size() == 7, "category count wrong");
  v.require(rep.tmi_coverage_complete, "command coverage incomplete");
  v.require(rep.tsi_coverage_complete, "guest-service coverage incomplete");
  v.require(secs < 60.0, "took " + std::to_string(secs) + " s");
  if (v.ok)
    v.detail = std::to_string(rep.cases.size()) + " cases, " +
               std::to_string(cats.size()) + " categories, full coverage, " +
               std::to_string(secs) + " s";
  return v;
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    Verdict (*fn)();
  };
  const Criterion criteria[] = {
      {"state-machine conformance under fuzzing", criterion1},
      {"measurement fidelity vs independent fold", criterion2},
      {"block/single load equivalence", criterion3},
      {"memcpy cost-model reproduction", [] { return fromBench("memcpy"); }},
      {"hypercall latency decomposition", [] { return fromBench("hvc"); }},
      {"virtual-ipi round-trip structure", [] { return fromBench("ipi"); }},
      {"interrupt conversion and injection mediation", criterion7},
      {"virtio round trips with page encryption", criterion8},
      {"attestation and sealed storage end to end", criterion9},
      {"conformance suite coverage and runtime", criterion10},
  };

  bool all = true;
  int idx = 1;
  for (const auto& c : criteria) {
    Verdict v{};
    try {
      v = c.fn();
    } catch (const std::exception& e) {
      v.ok = false;
      v.detail = std::string("exception: ") + e.what();
    }
    std::printf("criterion %2d %-46s %s%s%s\n", idx++, c.name,
                v.ok ? "PASS" : "FAIL", v.detail.empty() ? "" : "  ",
                v.detail.c_str());
    all = all && v.ok;
  }
  std::printf("acceptance: %s\n", all ? "PASS" : "FAIL");
  return all ? 0 : 1;
}
