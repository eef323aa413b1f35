#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tzmm/sim.hpp"
#include "tzmm/trace.hpp"

namespace tzmm {

using nlohmann::json;

/// Raised with the offending field's dotted path when a scenario file is
/// rejected.
struct ParseError : std::runtime_error {
  std::string field;
  ParseError(std::string f, const std::string& what)
      : std::runtime_error(f + ": " + what), field(std::move(f)) {}
};

struct ScenarioCvm {
  CVmParams params;
  u64 granules = 64;
  std::vector<ImagePage> image;
  std::vector<GuestProgram> scripts;
  std::vector<VirtioDeviceConfig> devices;
  std::vector<Ipa> protected_ipas;  // pages under tweakable encryption
  u64 max_steps = 1000;
  bool attest = false;
};

struct Scenario {
  u64 seed = 1;
  MappingPolicy policy = MappingPolicy::Direct;
  u64 granules = 4096;
  TzascConfig tzasc;
  HostPolicy host_policy;
  std::vector<HostResponder> responders;
  std::vector<std::pair<Ipa, u64>> mmio_reads;
  std::vector<ScheduledInterrupt> interrupts;
  std::vector<ScenarioCvm> cvms;
};

// ---- parsing ----

namespace detail {

inline u64 reqU64(const json& j, const std::string& path,
                  const std::string& key) {
  if (!j.contains(key) || !j[key].is_number())
    throw ParseError(path + "." + key, "required integer missing");
  return j[key].get<u64>();
}

inline u64 optU64(const json& j, const std::string& key, u64 def) {
  return j.contains(key) ? j[key].get<u64>() : def;
}

inline Bytes pageBytes(const json& j, const std::string& path) {
  if (j.contains("hex")) return fromHex(j["hex"].get<std::string>());
  if (j.contains("fill")) {
    u64 len = optU64(j, "len", kGranuleBytes);
    if (len > kGranuleBytes) throw ParseError(path + ".len", "page too large");
    return Bytes(len, static_cast<u8>(j["fill"].get<u64>()));
  }
  throw ParseError(path, "need hex or fill");
}

inline GuestInsn parseInsn(const json& j, const std::string& path) {
  if (!j.contains("op")) throw ParseError(path + ".op", "missing");
  std::string op = j["op"].get<std::string>();
  if (op == "compute") return InsnComputeTicks{reqU64(j, path, "ticks")};
  if (op == "write") return InsnMemWrite{reqU64(j, path, "ipa"),
                                         pageBytes(j, path)};
  if (op == "read")
    return InsnMemRead{reqU64(j, path, "ipa"), reqU64(j, path, "len")};
  if (op == "tsi") {
    InsnTsiCall t{};
    static const std::map<std::string, TsiFunction> fns = {
        {"version", TsiFunction::Version},
        {"config", TsiFunction::CvmConfig},
        {"measurement_read", TsiFunction::MeasurementRead},
        {"measurement_extend", TsiFunction::MeasurementExtend},
        {"token_init", TsiFunction::AttestationTokenInit},
        {"token_continue", TsiFunction::AttestationTokenContinue},
        {"host_call", TsiFunction::HostCall},
    };
    auto it = fns.find(j.value("fn", ""));
    if (it == fns.end()) throw ParseError(path + ".fn", "unknown tsi function");
    t.function = static_cast<u64>(it->second);
    if (j.contains("args")) {
      auto a = j["args"].get<std::vector<u64>>();
      for (std::size_t i = 0; i < a.size() && i < t.args.size(); ++i)
        t.args[i] = a[i];
    }
    if (j.contains("hex")) t.payload = fromHex(j["hex"].get<std::string>());
    return t;
  }
  if (op == "host_call") {
    InsnHostCall h{};
    if (j.contains("args")) {
      auto a = j["args"].get<std::vector<u64>>();
      for (std::size_t i = 0; i < a.size() && i < h.args.size(); ++i)
        h.args[i] = a[i];
    }
    return h;
  }
  if (op == "mmio_read") return InsnMmioRead{reqU64(j, path, "ipa")};
  if (op == "mmio_write")
    return InsnMmioWrite{reqU64(j, path, "ipa"), reqU64(j, path, "value")};
  if (op == "virtio_submit") {
    InsnVirtioSubmit v{};
    v.queue = static_cast<u32>(optU64(j, "queue", 0));
    if (j.contains("desc"))
      for (const auto& d : j["desc"])
        v.descriptors.push_back({reqU64(d, path + ".desc", "ipa"),
                                 reqU64(d, path + ".desc", "len"),
                                 d.value("write", false)});
    return v;
  }
  if (op == "wfi") return InsnWfi{};
  if (op == "psci") {
    std::string fn = j.value("fn", "");
    PsciFunction f;
    if (fn == "cpu_on") f = PsciFunction::CpuOn;
    else if (fn == "cpu_off") f = PsciFunction::CpuOff;
    else if (fn == "system_off") f = PsciFunction::SystemOff;
    else throw ParseError(path + ".fn", "unknown psci function");
    return InsnPsciCall{static_cast<u32>(f), optU64(j, "target", 0)};
  }
  if (op == "halt") return InsnHalt{};
  throw ParseError(path + ".op", "unknown op '" + op + "'");
}

}  // namespace detail

inline Scenario parseScenario(const json& j) {
  using detail::optU64;
  Scenario s;
  s.seed = optU64(j, "seed", 1);
  std::string pol = j.value("policy", "direct");
  if (pol == "direct") s.policy = MappingPolicy::Direct;
  else if (pol == "dynamic") s.policy = MappingPolicy::Dynamic;
  else throw ParseError("policy", "must be direct or dynamic");

  if (j.contains("memory")) {
    const json& m = j["memory"];
    s.granules = optU64(m, "granules", 4096);
    if (m.contains("tzasc")) {
      if (m["tzasc"].size() > kTzascMaxRegions)
        throw ParseError("memory.tzasc",
                         "at most 8 address-space regions are supported");
      for (const auto& r : m["tzasc"])
        s.tzasc.regions.push_back({detail::reqU64(r, "memory.tzasc", "base"),
                                   detail::reqU64(r, "memory.tzasc", "count"),
                                   r.value("secure", false)});
    }
  }

  if (j.contains("host")) {
    const json& h = j["host"];
    s.host_policy.quantum = optU64(h, "quantum", 64);
    s.host_policy.sync_policy = s.policy;
    if (h.contains("drop_intids"))
      for (u64 v : h["drop_intids"].get<std::vector<u64>>())
        s.host_policy.drop_intids.insert(static_cast<u32>(v));
    if (h.contains("responders"))
      for (const auto& r : h["responders"]) {
        HostResponder hr;
        hr.match_x0 = detail::reqU64(r, "host.responders", "x0");
        if (r.contains("results")) {
          auto a = r["results"].get<std::vector<u64>>();
          for (std::size_t i = 0; i < a.size() && i < 4; ++i)
            hr.results[i] = a[i];
        }
        s.responders.push_back(hr);
      }
    if (h.contains("mmio_reads"))
      for (const auto& r : h["mmio_reads"])
        s.mmio_reads.push_back({detail::reqU64(r, "host.mmio_reads", "ipa"),
                                detail::reqU64(r, "host.mmio_reads", "value")});
  } else {
    s.host_policy.sync_policy = s.policy;
  }

  if (j.contains("interrupts"))
    for (const auto& i : j["interrupts"])
      s.interrupts.push_back(
          {detail::reqU64(i, "interrupts", "at_step"),
           static_cast<u32>(detail::reqU64(i, "interrupts", "intid")),
           optU64(i, "tec", 0), false});

  if (!j.contains("cvms") || j["cvms"].empty())
    throw ParseError("cvms", "at least one cVM required");
  std::size_t ci = 0;
  for (const auto& c : j["cvms"]) {
    std::string base = "cvms[" + std::to_string(ci++) + "]";
    ScenarioCvm sc;
    if (c.contains("params")) {
      const json& p = c["params"];
      sc.params.ipa_width = static_cast<u32>(optU64(p, "ipa_width", 40));
      sc.params.vcpu_count = static_cast<u32>(optU64(p, "vcpu_count", 1));
      sc.params.protected_ipa_limit =
          optU64(p, "protected_ipa_limit",
                 u64{1} << (sc.params.ipa_width - 1));
      sc.params.hash_algo_id =
          static_cast<u32>(optU64(p, "hash_algo_id", kHashAlgoSha256));
      sc.params.feature_mask = optU64(p, "feature_mask", kPlatformFeatures);
    }
    sc.granules = optU64(c, "granules", 64);
    sc.max_steps = optU64(c, "max_steps", 1000);
    sc.attest = c.value("attest", false);
    if (c.contains("image")) {
      std::size_t pi = 0;
      for (const auto& pg : c["image"]) {
        std::string ppath = base + ".image[" + std::to_string(pi++) + "]";
        sc.image.push_back({detail::reqU64(pg, ppath, "ipa"),
                            detail::pageBytes(pg, ppath)});
      }
    }
    if (c.contains("scripts")) {
      std::size_t si = 0;
      for (const auto& sj : c["scripts"]) {
        std::string spath = base + ".scripts[" + std::to_string(si++) + "]";
        GuestProgram prog;
        std::size_t ii = 0;
        for (const auto& insn : sj)
          prog.insns.push_back(detail::parseInsn(
              insn, spath + "[" + std::to_string(ii++) + "]"));
        sc.scripts.push_back(std::move(prog));
      }
    }
    if (c.contains("devices"))
      for (const auto& d : c["devices"]) {
        VirtioDeviceConfig dc;
        std::string kind = d.value("kind", "blk");
        if (kind == "blk") dc.kind = VirtioDeviceConfig::Kind::Blk;
        else if (kind == "net") dc.kind = VirtioDeviceConfig::Kind::Net;
        else throw ParseError(base + ".devices.kind", "blk or net");
        dc.queue = static_cast<u32>(optU64(d, "queue", 0));
        dc.vring_ipa = detail::reqU64(d, base + ".devices", "vring_ipa");
        dc.intid = static_cast<u32>(optU64(d, "intid", 40));
        dc.disk_sectors = optU64(d, "disk_sectors", 128);
        sc.devices.push_back(dc);
      }
    if (c.contains("protected_pages"))
      for (u64 v : c["protected_pages"].get<std::vector<u64>>())
        sc.protected_ipas.push_back(v);
    s.cvms.push_back(std::move(sc));
  }
  return s;
}

inline Scenario parseScenarioText(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("(file)", e.what());
  }
  return parseScenario(j);
}

inline Scenario loadScenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("(file)", "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parseScenarioText(ss.str());
}

// ---- execution ----

inline json ledgerJson(const CostLedger& l) {
  json j;
  j["world_switch"] = l.world_switch;
  j["tlb_flush"] = l.tlb_flush;
  j["stage2_map"] = l.stage2_map;
  j["stage2_unmap"] = l.stage2_unmap;
  j["tmi_calls"] = l.tmi_calls;
  j["smc_calls"] = l.smc_calls;
  j["bytes_copied"] = l.bytes_copied;
  j["irq_emulations"] = l.irq_emulations;
  json ex;
  const char* names[] = {"IRQ", "HOST_CALL", "PSCI", "DATA_ABORT",
                         "SYSTEM_OFF", "QUANTUM"};
  for (const auto& [r, n] : l.exits) ex[names[static_cast<int>(r)]] = n;
  j["exits"] = ex;
  return j;
}

struct ScenarioResult {
  json report;
  std::vector<std::string> trace_lines;
  bool passed = false;
};

inline ScenarioResult runScenario(const Scenario& s) {
  SimConfig cfg;
  cfg.granules = s.granules;
  cfg.tzasc = s.tzasc;
  cfg.policy = s.policy;
  cfg.seed = s.seed;
  cfg.host_policy = s.host_policy;
  SimEnv env(cfg);
  TraceRecorder trace;
  trace.attach(env.tmm);

  for (const auto& r : s.responders) env.host.addResponder(r);
  for (const auto& [ipa, v] : s.mmio_reads) env.host.setMmioReadValue(ipa, v);
  for (const auto& i : s.interrupts)
    env.host.scheduleInterrupt(i.at_step, i.intid, i.tec_index);

  ScenarioResult out;
  json& rep = out.report;
  rep["seed"] = s.seed;
  rep["policy"] = s.policy == MappingPolicy::Direct ? "direct" : "dynamic";
  rep["cvms"] = json::array();
  bool ok = true;

  for (const auto& sc : s.cvms) {
    json cj;
    try {
      CvmId id = env.host.bootCvm(sc.params, sc.params.vcpu_count, sc.image,
                                  sc.scripts, sc.granules, sc.devices);
      cj["id"] = id;
      cj["boot_events"] = env.host.eventLog();
      const CVm* vm = env.tmm.cvm(id);
      cj["initial_measurement"] = toHex(vm->measurement.current());

      Bytes io_key = env.ioKey(id);
      for (Ipa p : sc.protected_ipas) {
        auto g = env.tmm.resolveIpaForHost(id, p);
        if (g) env.shadow.protection().protect(id, *g, p >> kPageShift, io_key);
      }

      if (sc.attest) {
        Bytes challenge = SimEnv::rotSeed(s.seed ^ 0x5eedu);
        challenge.resize(kChallengeBytes, 0);
        auto tok = env.tmm.buildTokenFor(id, challenge);
        std::string verdict = "no-token";
        if (tok) {
          auto v = verifyToken(tok->encode(), env.keys.rakPublic(),
                               vm->measurement.current(), challenge);
          verdict = verifyResultName(v);
          if (v != VerifyResult::Accept) ok = false;
        } else {
          ok = false;
        }
        cj["attest"] = verdict;
      }

      RunReport rr = env.host.run(id, sc.max_steps);
      json rj;
      rj["steps"] = rr.steps;
      rj["enters"] = rr.enters;
      rj["deadlock"] = rr.deadlock;
      rj["system_off"] = rr.system_off;
      rj["exit_counts"] = rr.exit_counts;
      rj["events"] = rr.events;
      cj["run"] = rj;
      cj["ttt_sound"] = env.tmm.cvm(id) == nullptr || env.tmm.tttSound(id);
      if (env.tmm.cvm(id) != nullptr && !env.tmm.tttSound(id)) ok = false;
    } catch (const BootError& e) {
      cj["boot_error"] = e.what();
      ok = false;
    }
    rep["cvms"].push_back(cj);
  }

  // whole-run isolation audit
  json inv;
  inv["host_access_faults"] = env.host.hostAccessFaults();
  inv["host_faults_on_all_secure"] = env.mem.hostFaultsOnAllSecure();
  inv["ownership_disjoint"] = env.mem.ownershipDisjoint();
  bool no_fiq = true;  // the exit enumeration has no FIQ member at all
  inv["fiq_exits"] = 0;
  inv["no_fiq"] = no_fiq;
  rep["invariants"] = inv;
  if (env.host.hostAccessFaults() != 0 || !env.mem.hostFaultsOnAllSecure() ||
      !env.mem.ownershipDisjoint())
    ok = false;

  rep["ledger"] = ledgerJson(env.ledger);
  rep["simulated_us"] = env.ledger.simulatedUs();
  rep["passed"] = ok;
  out.trace_lines = trace.lines();
  out.passed = ok;
  return out;
}

/// Replay check: run the scenario twice from scratch; the command traces
/// (requests and responses) must match byte for byte.
inline bool replayMatches(const Scenario& s) {
  auto a = runScenario(s);
  auto b = runScenario(s);
  return a.trace_lines == b.trace_lines;
}

}  // namespace tzmm
