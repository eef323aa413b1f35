#pragma once

#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tzmm/attestation.hpp"
#include "tzmm/cost.hpp"
#include "tzmm/crypto.hpp"
#include "tzmm/gic.hpp"
#include "tzmm/guest.hpp"
#include "tzmm/measurement.hpp"
#include "tzmm/mem.hpp"
#include "tzmm/ttt.hpp"
#include "tzmm/types.hpp"

namespace tzmm {

// Architectural feature bits the platform implements; a cVM's mask can
// only suppress them, never add.
constexpr u64 kPlatformFeatures = 0x00ff00ff00ff00ffull;
constexpr u32 kHashAlgoSha256 = 1;

enum class TmiStatus : u64 {
  Success = 0,
  ErrorInput = 1,
  ErrorState = 2,
  ErrorMemory = 3,
  ErrorPolicy = 4,
};

enum class TsiStatus : u64 {
  Success = 0,
  ErrorInput = 1,
  ErrorState = 2,
  Incomplete = 3,
};

enum class TmiCommand : u64 {
  CreateCvm = 0x101,
  DestroyCvm = 0x102,
  ActivateCvm = 0x103,
  DataCreate = 0x104,
  DataCreateUnknown = 0x105,
  DataDestroy = 0x106,
  DataBlockCreate = 0x107,
  DataBlockCreateUnknown = 0x108,
  DataBlockDestroy = 0x109,
  CreateTtt = 0x10a,
  DestroyTtt = 0x10b,
  MapProtected = 0x10c,
  UnmapProtected = 0x10d,
  MapUnprotected = 0x10e,
  UnmapUnprotected = 0x10f,
  TecCreate = 0x110,
  TecDestroy = 0x111,
  TecEnter = 0x112,
  PsciComplete = 0x113,
};

inline const std::vector<TmiCommand>& allTmiCommands() {
  static const std::vector<TmiCommand> all = {
      TmiCommand::CreateCvm,      TmiCommand::DestroyCvm,
      TmiCommand::ActivateCvm,    TmiCommand::DataCreate,
      TmiCommand::DataCreateUnknown, TmiCommand::DataDestroy,
      TmiCommand::DataBlockCreate, TmiCommand::DataBlockCreateUnknown,
      TmiCommand::DataBlockDestroy, TmiCommand::CreateTtt,
      TmiCommand::DestroyTtt,     TmiCommand::MapProtected,
      TmiCommand::UnmapProtected, TmiCommand::MapUnprotected,
      TmiCommand::UnmapUnprotected, TmiCommand::TecCreate,
      TmiCommand::TecDestroy,     TmiCommand::TecEnter,
      TmiCommand::PsciComplete,
  };
  return all;
}

inline const char* tmiCommandName(TmiCommand c) {
  switch (c) {
    case TmiCommand::CreateCvm: return "tmi_create_cvm";
    case TmiCommand::DestroyCvm: return "tmi_destroy_cvm";
    case TmiCommand::ActivateCvm: return "tmi_activate_cvm";
    case TmiCommand::DataCreate: return "tmi_data_create";
    case TmiCommand::DataCreateUnknown: return "tmi_data_create_unknown";
    case TmiCommand::DataDestroy: return "tmi_data_destroy";
    case TmiCommand::DataBlockCreate: return "tmi_data_block_create";
    case TmiCommand::DataBlockCreateUnknown:
      return "tmi_data_block_create_unknown";
    case TmiCommand::DataBlockDestroy: return "tmi_data_block_destroy";
    case TmiCommand::CreateTtt: return "tmi_create_ttt";
    case TmiCommand::DestroyTtt: return "tmi_destroy_ttt";
    case TmiCommand::MapProtected: return "tmi_map_protected";
    case TmiCommand::UnmapProtected: return "tmi_unmap_protected";
    case TmiCommand::MapUnprotected: return "tmi_map_unprotected";
    case TmiCommand::UnmapUnprotected: return "tmi_unmap_unprotected";
    case TmiCommand::TecCreate: return "tmi_tec_create";
    case TmiCommand::TecDestroy: return "tmi_tec_destroy";
    case TmiCommand::TecEnter: return "tmi_tec_enter";
    case TmiCommand::PsciComplete: return "tmi_psci_complete";
  }
  return "tmi_unknown";
}

struct TmiRequest {
  u64 cpu = 0;
  u64 command = 0;
  std::array<u64, 7> args{};
};

struct TmiResponse {
  TmiStatus status = TmiStatus::Success;
  std::array<u64, 4> results{};
};

struct CVmParams {
  u32 ipa_width = 40;
  u32 vcpu_count = 1;
  u64 protected_ipa_limit = u64{1} << 39;
  u32 hash_algo_id = kHashAlgoSha256;
  u64 feature_mask = kPlatformFeatures;

  /// Documented measurement encoding: little-endian, fixed order and
  /// width: ipa_width:u32, vcpu_count:u32, protected_ipa_limit:u64,
  /// hash_algo_id:u32, feature_mask:u64.
  Bytes encode() const {
    Bytes out;
    putLe32(out, ipa_width);
    putLe32(out, vcpu_count);
    putLe64(out, protected_ipa_limit);
    putLe32(out, hash_algo_id);
    putLe64(out, feature_mask);
    return out;
  }

  static std::optional<CVmParams> decode(const u8* p, std::size_t n) {
    if (n < 28) return std::nullopt;
    CVmParams out;
    auto rd32 = [&p]() {
      u32 v = 0;
      for (int i = 0; i < 4; ++i) v |= static_cast<u32>(p[i]) << (8 * i);
      p += 4;
      return v;
    };
    auto rd64 = [&p]() {
      u64 v = 0;
      for (int i = 0; i < 8; ++i) v |= static_cast<u64>(p[i]) << (8 * i);
      p += 8;
      return v;
    };
    out.ipa_width = rd32();
    out.vcpu_count = rd32();
    out.protected_ipa_limit = rd64();
    out.hash_algo_id = rd32();
    out.feature_mask = rd64();
    return out;
  }
};

struct TecParams {
  u64 entry_pc = 0;
  u64 flags = 0;

  Bytes encode() const {
    Bytes out;
    putLe64(out, entry_pc);
    putLe64(out, flags);
    return out;
  }
};

enum class CvmState { Null, New, Active, SystemOff };

inline const char* cvmStateName(CvmState s) {
  switch (s) {
    case CvmState::Null: return "NULL";
    case CvmState::New: return "NEW";
    case CvmState::Active: return "ACTIVE";
    case CvmState::SystemOff: return "SYSTEM_OFF";
  }
  return "?";
}

enum class ExitReason : u64 {
  Irq = 0,
  HostCall = 1,
  Psci = 2,
  DataAbort = 3,
  SystemOff = 4,
  Quantum = 5,
};

inline const char* exitReasonName(ExitReason r) {
  switch (r) {
    case ExitReason::Irq: return "IRQ";
    case ExitReason::HostCall: return "HOST_CALL";
    case ExitReason::Psci: return "PSCI";
    case ExitReason::DataAbort: return "DATA_ABORT";
    case ExitReason::SystemOff: return "SYSTEM_OFF";
    case ExitReason::Quantum: return "QUANTUM";
  }
  return "?";
}

/// The sanctioned view of a cVM exit. Everything else the guest had in
/// flight stays inside the TEC; the encoding is a function of exactly
/// these fields.
struct ExitInfo {
  ExitReason reason = ExitReason::Quantum;
  u64 faulting_ipa = 0;              // DATA_ABORT
  bool abort_is_write = false;       // DATA_ABORT syndrome
  u64 abort_value = 0;               // DATA_ABORT syndrome (writes)
  std::array<u64, 7> host_call_args{};  // HOST_CALL
  u32 psci_function = 0;             // PSCI
  u64 psci_target = 0;               // PSCI

  Bytes encode() const {
    Bytes out;
    putLe64(out, static_cast<u64>(reason));
    switch (reason) {
      case ExitReason::DataAbort:
        putLe64(out, faulting_ipa);
        out.push_back(abort_is_write ? 1 : 0);
        putLe64(out, abort_value);
        break;
      case ExitReason::HostCall:
        for (u64 a : host_call_args) putLe64(out, a);
        break;
      case ExitReason::Psci:
        putLe32(out, psci_function);
        putLe64(out, psci_target);
        break;
      default:
        break;
    }
    return out;
  }
};

struct PendingPsci {
  u32 function = 0;
  u64 target = 0;  // target TEC id for CPU_ON
};

struct PendingMmio {
  bool is_read = false;
  Ipa ipa = 0;
};

struct TokenRetrieval {
  bool active = false;
  Bytes token_bytes;
  std::size_t cursor = 0;
};

struct VirtioDeviceDesc {
  u32 queue = 0;
  Ipa vring_ipa = 0;     // 3 consecutive pages: desc / avail / used
  Ipa doorbell_ipa = 0;  // in the MMIO window
  u32 intid = 0;
};

class Tmm;

/// TrustZone execution context: one vCPU's saved state.
struct Tec {
  TecId id = 0;
  CvmId cvm = 0;
  bool runnable = false;
  std::array<u64, 31> gprs{};
  u64 pc = 0;
  GuestProgram program;
  GranuleIndex granule = 0;
  bool in_wfi = false;
  u64 virqs_latched = 0;  // vIRQs delivered while the guest was not waiting
  bool pending_host_call = false;
  std::optional<PendingMmio> pending_mmio;
  std::optional<PendingPsci> pending_psci;
  TokenRetrieval token;
  std::vector<std::string> guest_trace;  // what the guest observed
  ExitInfo last_exit;
};

struct CVm {
  CvmId id = 0;
  CvmState state = CvmState::Null;
  CVmParams params;
  std::optional<SecureRegion> region;
  GranuleIndex params_granule = 0;
  std::optional<Ttt> ttt;
  MeasurementState measurement;
  std::array<Digest, kRemSlots> rem{};
  std::vector<TecId> tecs;
};

struct StateTransition {
  CvmId cvm;
  CvmState from;
  CvmState to;
  std::string cause;
};

/// The reference monitor: cVM lifecycle, stage-2 translation, execution
/// contexts, measurement, and the TMI dispatcher. One command at a time;
/// the dispatcher mutex is the single exclusive gate for all state.
class Tmm {
 public:
  Tmm(PhysicalMemory& mem, Gic& gic, CostLedger& ledger,
      const KeyHierarchy& keys)
      : mem_(mem), gic_(gic), ledger_(ledger), keys_(keys) {}

  // ---- dispatcher ----

  TmiResponse dispatch(const TmiRequest& req) {
    std::lock_guard<std::mutex> lock(gate_);
    ledger_.tmi_calls += 1;
    ledger_.smc_calls += 1;
    TmiResponse resp;
    auto cmd = static_cast<TmiCommand>(req.command);
    switch (cmd) {
      case TmiCommand::CreateCvm:
      case TmiCommand::DestroyCvm:
      case TmiCommand::ActivateCvm:
      case TmiCommand::DataCreate:
      case TmiCommand::DataCreateUnknown:
      case TmiCommand::DataDestroy:
      case TmiCommand::DataBlockCreate:
      case TmiCommand::DataBlockCreateUnknown:
      case TmiCommand::DataBlockDestroy:
      case TmiCommand::CreateTtt:
      case TmiCommand::DestroyTtt:
      case TmiCommand::MapProtected:
      case TmiCommand::UnmapProtected:
      case TmiCommand::MapUnprotected:
      case TmiCommand::UnmapUnprotected:
      case TmiCommand::TecCreate:
      case TmiCommand::TecDestroy:
      case TmiCommand::TecEnter:
      case TmiCommand::PsciComplete:
        invoked_tmis_.insert(cmd);
        resp = dispatchLocked(cmd, req.args);
        break;
      default:
        resp.status = TmiStatus::ErrorInput;  // unknown command id
        break;
    }
    if (trace_sink_) trace_sink_(req, resp);
    return resp;
  }

  /// Observer for every dispatched command (request and response), used
  /// for command-trace logs and replay checks.
  void setTraceSink(std::function<void(const TmiRequest&, const TmiResponse&)> f) {
    trace_sink_ = std::move(f);
  }

  const std::set<TmiCommand>& invokedTmis() const { return invoked_tmis_; }
  const std::set<TsiFunction>& invokedTsis() const { return invoked_tsis_; }
  const std::vector<StateTransition>& transitions() const {
    return transitions_;
  }

  // ---- direct (host-side) entry points; each takes the same gate ----

  TmiResponse createCvm(GranuleIndex params_src, u64 granule_count) {
    return dispatch(makeReq(TmiCommand::CreateCvm, {params_src, granule_count}));
  }
  TmiResponse destroyCvm(CvmId id) {
    return dispatch(makeReq(TmiCommand::DestroyCvm, {id}));
  }
  TmiResponse activateCvm(CvmId id) {
    return dispatch(makeReq(TmiCommand::ActivateCvm, {id}));
  }
  TmiResponse dataCreate(CvmId id, Ipa ipa, GranuleIndex src) {
    return dispatch(makeReq(TmiCommand::DataCreate, {id, ipa, src}));
  }
  TmiResponse dataCreateUnknown(CvmId id, Ipa ipa) {
    return dispatch(makeReq(TmiCommand::DataCreateUnknown, {id, ipa}));
  }
  TmiResponse dataDestroy(CvmId id, Ipa ipa) {
    return dispatch(makeReq(TmiCommand::DataDestroy, {id, ipa}));
  }
  TmiResponse dataBlockCreate(CvmId id, Ipa start, u64 count,
                              GranuleIndex src_start) {
    return dispatch(
        makeReq(TmiCommand::DataBlockCreate, {id, start, count, src_start}));
  }
  TmiResponse dataBlockCreateUnknown(CvmId id, Ipa start, u64 count) {
    return dispatch(
        makeReq(TmiCommand::DataBlockCreateUnknown, {id, start, count}));
  }
  TmiResponse dataBlockDestroy(CvmId id, Ipa start, u64 count) {
    return dispatch(makeReq(TmiCommand::DataBlockDestroy, {id, start, count}));
  }
  TmiResponse createTtt(CvmId id, Ipa ipa, u64 level) {
    return dispatch(makeReq(TmiCommand::CreateTtt, {id, ipa, level}));
  }
  TmiResponse destroyTtt(CvmId id, Ipa ipa, u64 level) {
    return dispatch(makeReq(TmiCommand::DestroyTtt, {id, ipa, level}));
  }
  TmiResponse mapProtected(CvmId id, Ipa ipa, GranuleIndex target) {
    return dispatch(makeReq(TmiCommand::MapProtected, {id, ipa, target}));
  }
  TmiResponse unmapProtected(CvmId id, Ipa ipa) {
    return dispatch(makeReq(TmiCommand::UnmapProtected, {id, ipa}));
  }
  TmiResponse mapUnprotected(CvmId id, Ipa ipa, GranuleIndex target) {
    return dispatch(makeReq(TmiCommand::MapUnprotected, {id, ipa, target}));
  }
  TmiResponse unmapUnprotected(CvmId id, Ipa ipa) {
    return dispatch(makeReq(TmiCommand::UnmapUnprotected, {id, ipa}));
  }
  TmiResponse tecCreate(CvmId id, const TecParams& params) {
    return dispatch(
        makeReq(TmiCommand::TecCreate, {id, params.entry_pc, params.flags}));
  }
  TmiResponse tecDestroy(TecId tec) {
    return dispatch(makeReq(TmiCommand::TecDestroy, {tec}));
  }
  TmiResponse tecEnter(TecId tec, u64 budget) {
    return dispatch(makeReq(TmiCommand::TecEnter, {tec, budget, 0}));
  }
  TmiResponse tecEnterWithResponse(TecId tec, u64 budget,
                                   const std::array<u64, 4>& response) {
    return dispatch(makeReq(
        TmiCommand::TecEnter,
        {tec, budget, 1, response[0], response[1], response[2], response[3]}));
  }
  TmiResponse psciComplete(TecId calling, TecId target, u64 outcome) {
    return dispatch(makeReq(TmiCommand::PsciComplete, {calling, target, outcome}));
  }

  // ---- host-visible queries (not TMI commands) ----

  const CVm* cvm(CvmId id) const {
    auto it = cvms_.find(id);
    return it == cvms_.end() ? nullptr : &it->second;
  }
  const Tec* tec(TecId id) const {
    auto it = tecs_.find(id);
    return it == tecs_.end() ? nullptr : &it->second;
  }
  Tec* tecMut(TecId id) {
    auto it = tecs_.find(id);
    return it == tecs_.end() ? nullptr : &it->second;
  }
  std::vector<CvmId> cvmIds() const {
    std::vector<CvmId> out;
    for (const auto& [id, _] : cvms_) out.push_back(id);
    return out;
  }

  /// Guest-visible architectural feature register: platform bits masked by
  /// the cVM's (suppress-only) feature mask.
  TmiResponse readFeatureRegister(CvmId id, u64 reg) {
    std::lock_guard<std::mutex> lock(gate_);
    TmiResponse resp;
    CVm* vm = findCvm(id);
    if (!vm || reg != 0) return fail(TmiStatus::ErrorInput);
    if (vm->state != CvmState::Active) return fail(TmiStatus::ErrorState);
    resp.results[0] = kPlatformFeatures & vm->params.feature_mask;
    return resp;
  }

  void attachGuestProgram(TecId tec, GuestProgram prog) {
    std::lock_guard<std::mutex> lock(gate_);
    auto it = tecs_.find(tec);
    if (it != tecs_.end()) it->second.program = std::move(prog);
  }

  void setDeviceTable(CvmId id, std::vector<VirtioDeviceDesc> devs) {
    std::lock_guard<std::mutex> lock(gate_);
    devices_[id] = std::move(devs);
  }

  /// IPA-to-granule lookup for the host's device backends. Direct mapping
  /// already makes the physical layout host-visible; this only saves the
  /// host from mirroring the table tree.
  std::optional<GranuleIndex> resolveIpaForHost(CvmId id, Ipa ipa) {
    std::lock_guard<std::mutex> lock(gate_);
    CVm* vm = findCvm(id);
    if (!vm || !vm->ttt) return std::nullopt;
    auto leaf = vm->ttt->resolve(ipa);
    if (!leaf) return std::nullopt;
    return leaf->granule;
  }

  const ExitInfo* lastExit(TecId tec) const {
    auto it = tecs_.find(tec);
    return it == tecs_.end() ? nullptr : &it->second.last_exit;
  }

  /// Walk every mapped IPA of the cVM; true iff protected leaves land on
  /// granules it owns and unprotected leaves on normal-world granules.
  bool tttSound(CvmId id) const {
    auto it = cvms_.find(id);
    if (it == cvms_.end() || !it->second.ttt) return true;
    for (const auto& [ipa, leaf] : it->second.ttt->allMappings()) {
      const Granule& g = mem_.granule(leaf.granule);
      if (leaf.attrs.prot) {
        if (!(g.owner && *g.owner == id)) return false;
        if (ipa >= it->second.params.protected_ipa_limit) return false;
      } else {
        if (g.world != World::Normal) return false;
      }
    }
    for (GranuleIndex tg : it->second.ttt->tableGranules()) {
      const Granule& g = mem_.granule(tg);
      if (g.state != GranuleState::Ttt || !(g.owner && *g.owner == id))
        return false;
    }
    return true;
  }

  PhysicalMemory& memory() { return mem_; }
  const KeyHierarchy& keys() const { return keys_; }

 private:
  static TmiRequest makeReq(TmiCommand cmd, std::initializer_list<u64> args) {
    TmiRequest r;
    r.command = static_cast<u64>(cmd);
    std::size_t i = 0;
    for (u64 a : args) {
      if (i >= r.args.size()) break;
      r.args[i++] = a;
    }
    return r;
  }

  static TmiResponse fail(TmiStatus st) { return TmiResponse{st, {}}; }

  CVm* findCvm(CvmId id) {
    auto it = cvms_.find(id);
    return it == cvms_.end() ? nullptr : &it->second;
  }

  void logTransition(CVm& vm, CvmState to, const char* cause) {
    transitions_.push_back({vm.id, vm.state, to, cause});
    vm.state = to;
  }

  TmiResponse dispatchLocked(TmiCommand cmd, const std::array<u64, 7>& a) {
    switch (cmd) {
      case TmiCommand::CreateCvm: return doCreateCvm(a[0], a[1]);
      case TmiCommand::DestroyCvm: return doDestroyCvm(a[0]);
      case TmiCommand::ActivateCvm: return doActivateCvm(a[0]);
      case TmiCommand::DataCreate: return doDataCreate(a[0], a[1], a[2], false);
      case TmiCommand::DataCreateUnknown:
        return doDataCreate(a[0], a[1], 0, true);
      case TmiCommand::DataDestroy: return doDataDestroy(a[0], a[1]);
      case TmiCommand::DataBlockCreate:
        return doDataBlockCreate(a[0], a[1], a[2], a[3], false);
      case TmiCommand::DataBlockCreateUnknown:
        return doDataBlockCreate(a[0], a[1], a[2], 0, true);
      case TmiCommand::DataBlockDestroy:
        return doDataBlockDestroy(a[0], a[1], a[2]);
      case TmiCommand::CreateTtt: return doCreateTtt(a[0], a[1], a[2]);
      case TmiCommand::DestroyTtt: return doDestroyTtt(a[0], a[1], a[2]);
      case TmiCommand::MapProtected: return doMap(a[0], a[1], a[2], true);
      case TmiCommand::UnmapProtected: return doUnmap(a[0], a[1], true);
      case TmiCommand::MapUnprotected: return doMap(a[0], a[1], a[2], false);
      case TmiCommand::UnmapUnprotected: return doUnmap(a[0], a[1], false);
      case TmiCommand::TecCreate: return doTecCreate(a[0], a[1], a[2]);
      case TmiCommand::TecDestroy: return doTecDestroy(a[0]);
      case TmiCommand::TecEnter: return doTecEnter(a);
      case TmiCommand::PsciComplete: return doPsciComplete(a[0], a[1], a[2]);
    }
    return fail(TmiStatus::ErrorInput);
  }

  // ---- lifecycle ----

  TmiResponse doCreateCvm(GranuleIndex params_src, u64 granule_count) {
    if (params_src >= mem_.size() ||
        mem_.granule(params_src).world != World::Normal)
      return fail(TmiStatus::ErrorInput);
    auto params = CVmParams::decode(mem_.granule(params_src).contents.data(),
                                    kGranuleBytes);
    if (!params) return fail(TmiStatus::ErrorInput);
    if (params->vcpu_count < 1) return fail(TmiStatus::ErrorInput);
    if (params->ipa_width < 16 || params->ipa_width > 48)
      return fail(TmiStatus::ErrorInput);
    if (params->ipa_width < 48 &&
        params->protected_ipa_limit > (u64{1} << params->ipa_width))
      return fail(TmiStatus::ErrorInput);
    if (params->hash_algo_id != kHashAlgoSha256)
      return fail(TmiStatus::ErrorInput);
    if ((params->feature_mask & ~kPlatformFeatures) != 0)
      return fail(TmiStatus::ErrorInput);  // masks only suppress
    if (granule_count < 2) return fail(TmiStatus::ErrorInput);

    CvmId id = next_cvm_id_++;
    CVm vm;
    vm.id = id;
    vm.params = *params;

    if (mem_.policy() == MappingPolicy::Direct) {
      try {
        vm.region = mem_.reserveSecureRegion(id, granule_count);
      } catch (const MemError&) {
        return fail(TmiStatus::ErrorMemory);
      }
    } else {
      mem_.endSetupPhase();
    }

    auto pg = mem_.allocSecure(id, GranuleState::Params);
    auto rg = mem_.allocSecure(id, GranuleState::Ttt);
    if (!pg || !rg) {
      cleanupPartial(vm);
      return fail(TmiStatus::ErrorMemory);
    }
    vm.params_granule = *pg;
    Bytes enc = params->encode();
    auto& pgc = mem_.granuleMut(*pg).contents;
    std::copy(enc.begin(), enc.end(), pgc.begin());
    vm.ttt.emplace(*rg);
    vm.measurement = MeasurementState(crypto::sha256(enc));

    transitions_.push_back({id, CvmState::Null, CvmState::New, "create"});
    vm.state = CvmState::New;
    cvms_[id] = std::move(vm);

    TmiResponse resp;
    resp.results[0] = id;
    return resp;
  }

  void cleanupPartial(CVm& vm) {
    if (vm.region) mem_.releaseSecureRegion(vm.id);
  }

  TmiResponse doActivateCvm(CvmId id) {
    CVm* vm = findCvm(id);
    if (!vm) return fail(TmiStatus::ErrorInput);
    if (vm->state != CvmState::New || vm->tecs.empty())
      return fail(TmiStatus::ErrorState);
    vm->measurement.seal();
    logTransition(*vm, CvmState::Active, "activate");
    return {};
  }

  TmiResponse doDestroyCvm(CvmId id) {
    CVm* vm = findCvm(id);
    if (!vm) return fail(TmiStatus::ErrorInput);
    // phase 1: power down; no TEC is enterable past this point
    if (vm->state != CvmState::SystemOff)
      logTransition(*vm, CvmState::SystemOff, "destroy");
    // phase 2: tear down contexts, tables, memory
    for (TecId t : vm->tecs) {
      auto it = tecs_.find(t);
      if (it != tecs_.end()) {
        mem_.freeSecure(it->second.granule);
        gic_.dropListRegisters(t);
        tecs_.erase(it);
      }
    }
    if (vm->ttt)
      for (GranuleIndex tg : vm->ttt->tableGranules()) mem_.freeSecure(tg);
    mem_.freeSecure(vm->params_granule);
    if (mem_.policy() == MappingPolicy::Direct) {
      if (vm->region) mem_.releaseSecureRegion(id);
    } else {
      for (GranuleIndex g = 0; g < mem_.size(); ++g) {
        const Granule& gr = mem_.granule(g);
        if (gr.owner && *gr.owner == id) mem_.freeSecure(g);
      }
    }
    logTransition(*vm, CvmState::Null, "reclaim");
    devices_.erase(id);
    cvms_.erase(id);
    return {};
  }

  // ---- data granules ----

  TmiResponse doDataCreate(CvmId id, Ipa ipa, GranuleIndex src, bool unknown) {
    CVm* vm = findCvm(id);
    if (!vm) return fail(TmiStatus::ErrorInput);
    if (vm->state != CvmState::New) {
      // runtime faults may be repaired with zero-filled pages
      if (!(unknown && vm->state == CvmState::Active))
        return fail(TmiStatus::ErrorState);
    }
    if ((ipa & (kGranuleBytes - 1)) != 0 ||
        ipa >= vm->params.protected_ipa_limit)
      return fail(TmiStatus::ErrorInput);
    if (vm->ttt->resolve(ipa)) return fail(TmiStatus::ErrorInput);
    auto l3 = vm->ttt->tableAt(ipa, 3);
    if (!l3) return fail(TmiStatus::ErrorInput);
    if (vm->ttt->table(*l3).entries[tttIndex(ipa, 3)].kind !=
        TttEntry::Kind::Invalid)
      return fail(TmiStatus::ErrorInput);
    if (!unknown) {
      if (src >= mem_.size() || mem_.granule(src).world != World::Normal ||
          mem_.checkAccess(Requestor::host(), src, AccessMode::Read) !=
              AccessResult::Allowed)
        return fail(TmiStatus::ErrorInput);
    }
    auto dst = mem_.allocSecure(id, GranuleState::Data);
    if (!dst) return fail(TmiStatus::ErrorMemory);
    Granule& dg = mem_.granuleMut(*dst);
    dg.owner = id;
    if (unknown)
      dg.contents.fill(0);
    else
      dg.contents = mem_.granule(src).contents;
    vm->ttt->table(*l3).entries[tttIndex(ipa, 3)] = {
        TttEntry::Kind::Page, *dst, {true, true, true}};
    vm->ttt->table(*l3).live += 1;
    if (!unknown)
      vm->measurement.extend(
          {MeasureKind::Data, ipa, crypto::sha256(dg.contents.data(),
                                                  kGranuleBytes)});
    return {};
  }

  TmiResponse doDataBlockCreate(CvmId id, Ipa start, u64 count,
                                GranuleIndex src_start, bool unknown) {
    CVm* vm = findCvm(id);
    if (!vm) return fail(TmiStatus::ErrorInput);
    if (vm->state != CvmState::New) return fail(TmiStatus::ErrorState);
    if (count == 0 || (start & (kGranuleBytes - 1)) != 0)
      return fail(TmiStatus::ErrorInput);

    // validate everything up front: any per-page failure must leave no
    // page mapped
    bool block_entry = false;
    if ((start & ((kPagesPerBlock2M << kPageShift) - 1)) == 0 &&
        count == kPagesPerBlock2M) {
      auto l2 = vm->ttt->tableAt(start, 2);
      block_entry = l2 && vm->ttt->table(*l2).entries[tttIndex(start, 2)]
                                  .kind == TttEntry::Kind::Invalid &&
                    !vm->ttt->tableAt(start, 3);
    }
    for (u64 i = 0; i < count; ++i) {
      Ipa ipa = start + (i << kPageShift);
      if (ipa >= vm->params.protected_ipa_limit)
        return fail(TmiStatus::ErrorInput);
      if (vm->ttt->resolve(ipa)) return fail(TmiStatus::ErrorInput);
      if (!block_entry) {
        auto l3 = vm->ttt->tableAt(ipa, 3);
        if (!l3 || vm->ttt->table(*l3).entries[tttIndex(ipa, 3)].kind !=
                       TttEntry::Kind::Invalid)
          return fail(TmiStatus::ErrorInput);
      }
      if (!unknown) {
        GranuleIndex src = src_start + i;
        if (src >= mem_.size() || mem_.granule(src).world != World::Normal)
          return fail(TmiStatus::ErrorInput);
      }
    }

    std::optional<GranuleIndex> base;
    std::vector<GranuleIndex> singles;
    if (block_entry) {
      base = mem_.allocSecureRun(id, count, GranuleState::Data);
      if (!base) block_entry = false;
    }
    if (!block_entry) {
      for (u64 i = 0; i < count; ++i) {
        auto g = mem_.allocSecure(id, GranuleState::Data);
        if (!g) {
          for (GranuleIndex fg : singles) mem_.freeSecure(fg);
          return fail(TmiStatus::ErrorMemory);
        }
        singles.push_back(*g);
      }
    }

    for (u64 i = 0; i < count; ++i) {
      Ipa ipa = start + (i << kPageShift);
      GranuleIndex dst = block_entry ? *base + i : singles[i];
      Granule& dg = mem_.granuleMut(dst);
      dg.owner = id;
      if (unknown)
        dg.contents.fill(0);
      else
        dg.contents = mem_.granule(src_start + i).contents;
      if (!block_entry) {
        auto l3 = vm->ttt->tableAt(ipa, 3);
        vm->ttt->table(*l3).entries[tttIndex(ipa, 3)] = {
            TttEntry::Kind::Page, dst, {true, true, true}};
        vm->ttt->table(*l3).live += 1;
      }
      if (!unknown)
        vm->measurement.extend(
            {MeasureKind::Data, ipa,
             crypto::sha256(dg.contents.data(), kGranuleBytes)});
    }
    if (block_entry) {
      auto l2 = vm->ttt->tableAt(start, 2);
      vm->ttt->table(*l2).entries[tttIndex(start, 2)] = {
          TttEntry::Kind::Block, *base, {true, true, true}};
      vm->ttt->table(*l2).live += 1;
    }
    return {};
  }

  TmiResponse doDataDestroy(CvmId id, Ipa ipa) {
    CVm* vm = findCvm(id);
    if (!vm || !vm->ttt) return fail(TmiStatus::ErrorInput);
    auto leaf = vm->ttt->resolve(ipa);
    if (!leaf || leaf->level != 3) return fail(TmiStatus::ErrorInput);
    if (mem_.granule(leaf->granule).state != GranuleState::Data)
      return fail(TmiStatus::ErrorInput);
    auto l3 = vm->ttt->tableAt(ipa, 3);
    vm->ttt->table(*l3).entries[tttIndex(ipa, 3)] = {};
    vm->ttt->table(*l3).live -= 1;
    mem_.freeSecure(leaf->granule);
    ledger_.tlb_flush += 1;
    return {};
  }

  TmiResponse doDataBlockDestroy(CvmId id, Ipa start, u64 count) {
    CVm* vm = findCvm(id);
    if (!vm || !vm->ttt || count == 0) return fail(TmiStatus::ErrorInput);
    // 2 MiB block entry case
    if ((start & ((kPagesPerBlock2M << kPageShift) - 1)) == 0 &&
        count == kPagesPerBlock2M) {
      auto l2 = vm->ttt->tableAt(start, 2);
      if (l2) {
        TttEntry& e = vm->ttt->table(*l2).entries[tttIndex(start, 2)];
        if (e.kind == TttEntry::Kind::Block) {
          for (u64 i = 0; i < count; ++i) mem_.freeSecure(e.target + i);
          e = {};
          vm->ttt->table(*l2).live -= 1;
          ledger_.tlb_flush += 1;
          return {};
        }
      }
    }
    for (u64 i = 0; i < count; ++i) {
      Ipa ipa = start + (i << kPageShift);
      auto leaf = vm->ttt->resolve(ipa);
      if (!leaf || leaf->level != 3 ||
          mem_.granule(leaf->granule).state != GranuleState::Data)
        return fail(TmiStatus::ErrorInput);
    }
    for (u64 i = 0; i < count; ++i) {
      Ipa ipa = start + (i << kPageShift);
      auto leaf = vm->ttt->resolve(ipa);
      auto l3 = vm->ttt->tableAt(ipa, 3);
      vm->ttt->table(*l3).entries[tttIndex(ipa, 3)] = {};
      vm->ttt->table(*l3).live -= 1;
      mem_.freeSecure(leaf->granule);
    }
    ledger_.tlb_flush += 1;
    return {};
  }

  // ---- translation tables ----

  TmiResponse doCreateTtt(CvmId id, Ipa ipa, u64 level) {
    CVm* vm = findCvm(id);
    if (!vm || !vm->ttt) return fail(TmiStatus::ErrorInput);
    if (level < 1 || level > 3) return fail(TmiStatus::ErrorInput);
    auto parent = vm->ttt->tableAt(ipa, static_cast<int>(level) - 1);
    if (!parent) return fail(TmiStatus::ErrorInput);
    TttEntry& pe =
        vm->ttt->table(*parent).entries[tttIndex(ipa, static_cast<int>(level) - 1)];
    if (pe.kind != TttEntry::Kind::Invalid) return fail(TmiStatus::ErrorInput);
    auto g = mem_.allocSecure(id, GranuleState::Ttt);
    if (!g) return fail(TmiStatus::ErrorMemory);
    mem_.granuleMut(*g).owner = id;
    vm->ttt->addTable(*g);
    pe = {TttEntry::Kind::Table, *g, {}};
    vm->ttt->table(*parent).live += 1;
    return {};
  }

  TmiResponse doDestroyTtt(CvmId id, Ipa ipa, u64 level) {
    CVm* vm = findCvm(id);
    if (!vm || !vm->ttt) return fail(TmiStatus::ErrorInput);
    if (level < 1 || level > 3) return fail(TmiStatus::ErrorInput);
    auto tab = vm->ttt->tableAt(ipa, static_cast<int>(level));
    if (!tab) return fail(TmiStatus::ErrorInput);
    if (vm->ttt->table(*tab).live != 0) return fail(TmiStatus::ErrorState);
    auto parent = vm->ttt->tableAt(ipa, static_cast<int>(level) - 1);
    vm->ttt->table(*parent)
        .entries[tttIndex(ipa, static_cast<int>(level) - 1)] = {};
    vm->ttt->table(*parent).live -= 1;
    vm->ttt->removeTable(*tab);
    mem_.freeSecure(*tab);
    ledger_.tlb_flush += 1;
    return {};
  }

  TmiResponse doMap(CvmId id, Ipa ipa, GranuleIndex target, bool prot) {
    CVm* vm = findCvm(id);
    if (!vm || !vm->ttt) return fail(TmiStatus::ErrorInput);
    if (prot && ipa >= vm->params.protected_ipa_limit)
      return fail(TmiStatus::ErrorInput);
    if (!prot && ipa < vm->params.protected_ipa_limit)
      return fail(TmiStatus::ErrorInput);
    if (target >= mem_.size()) return fail(TmiStatus::ErrorInput);
    const Granule& tg = mem_.granule(target);
    if (prot) {
      if (!(tg.owner && *tg.owner == id)) return fail(TmiStatus::ErrorInput);
    } else {
      if (tg.world != World::Normal) return fail(TmiStatus::ErrorInput);
    }
    if (vm->ttt->resolve(ipa)) return fail(TmiStatus::ErrorInput);
    auto l3 = vm->ttt->tableAt(ipa, 3);
    if (!l3) return fail(TmiStatus::ErrorInput);
    TttEntry& e = vm->ttt->table(*l3).entries[tttIndex(ipa, 3)];
    if (e.kind != TttEntry::Kind::Invalid) return fail(TmiStatus::ErrorInput);
    e = {TttEntry::Kind::Page, target, {prot, true, true}};
    vm->ttt->table(*l3).live += 1;
    return {};
  }

  TmiResponse doUnmap(CvmId id, Ipa ipa, bool prot) {
    CVm* vm = findCvm(id);
    if (!vm || !vm->ttt) return fail(TmiStatus::ErrorInput);
    auto leaf = vm->ttt->resolve(ipa);
    if (!leaf || leaf->level != 3 || leaf->attrs.prot != prot)
      return fail(TmiStatus::ErrorInput);
    auto l3 = vm->ttt->tableAt(ipa, 3);
    vm->ttt->table(*l3).entries[tttIndex(ipa, 3)] = {};
    vm->ttt->table(*l3).live -= 1;
    ledger_.tlb_flush += 1;
    return {};
  }

  // ---- execution contexts ----

  TmiResponse doTecCreate(CvmId id, u64 entry_pc, u64 flags) {
    CVm* vm = findCvm(id);
    if (!vm) return fail(TmiStatus::ErrorInput);
    if (vm->state != CvmState::New) return fail(TmiStatus::ErrorState);
    auto g = mem_.allocSecure(id, GranuleState::Tec);
    if (!g) return fail(TmiStatus::ErrorMemory);
    mem_.granuleMut(*g).owner = id;
    Tec t;
    t.id = next_tec_id_++;
    t.cvm = id;
    t.granule = *g;
    t.pc = entry_pc;
    t.runnable = vm->tecs.empty();  // only the boot vCPU starts runnable
    TecParams tp{entry_pc, flags};
    vm->measurement.extend({MeasureKind::Tec,
                            static_cast<u64>(vm->tecs.size()),
                            crypto::sha256(tp.encode())});
    vm->tecs.push_back(t.id);
    TmiResponse resp;
    resp.results[0] = t.id;
    tecs_[t.id] = std::move(t);
    return resp;
  }

  TmiResponse doTecDestroy(TecId tec_id) {
    auto it = tecs_.find(tec_id);
    if (it == tecs_.end()) return fail(TmiStatus::ErrorInput);
    CVm* vm = findCvm(it->second.cvm);
    if (vm)
      std::erase(vm->tecs, tec_id);
    mem_.freeSecure(it->second.granule);
    gic_.dropListRegisters(tec_id);
    tecs_.erase(it);
    return {};
  }

  TmiResponse doPsciComplete(TecId calling, TecId target, u64 outcome) {
    auto it = tecs_.find(calling);
    if (it == tecs_.end()) return fail(TmiStatus::ErrorInput);
    Tec& caller = it->second;
    if (!caller.pending_psci ||
        caller.pending_psci->function != static_cast<u32>(PsciFunction::CpuOn))
      return fail(TmiStatus::ErrorInput);
    auto tt = tecs_.find(target);
    if (tt == tecs_.end() || tt->second.cvm != caller.cvm ||
        caller.pending_psci->target != target)
      return fail(TmiStatus::ErrorInput);
    if (outcome == 0) tt->second.runnable = true;
    caller.pending_psci.reset();
    caller.gprs[0] = outcome;
    caller.pc += 1;
    return {};
  }

  // ---- entering a cVM ----

  TmiResponse doTecEnter(const std::array<u64, 7>& a) {
    TecId tec_id = a[0];
    u64 budget = a[1] == 0 ? 64 : a[1];
    bool has_response = a[2] != 0;
    std::array<u64, 4> response{a[3], a[4], a[5], a[6]};

    auto it = tecs_.find(tec_id);
    if (it == tecs_.end()) return fail(TmiStatus::ErrorInput);
    Tec& tec = it->second;
    CVm* vm = findCvm(tec.cvm);
    if (!vm || vm->state != CvmState::Active)
      return fail(TmiStatus::ErrorState);
    if (!tec.runnable) return fail(TmiStatus::ErrorState);
    if (tec.pending_psci) return fail(TmiStatus::ErrorState);

    // complete whatever the guest was blocked on before this entry
    if (tec.pending_host_call) {
      for (int i = 0; i < 4; ++i)
        tec.gprs[i] = has_response ? response[i] : 0;
      tec.pending_host_call = false;
      tec.pc += 1;
    } else if (tec.pending_mmio) {
      if (tec.pending_mmio->is_read) {
        u64 v = has_response ? response[0] : 0;
        tec.gprs[0] = v;
        tec.guest_trace.push_back("mmio_read:" + std::to_string(
                                      tec.pending_mmio->ipa) + "=" +
                                  std::to_string(v));
      }
      tec.pending_mmio.reset();
      tec.pc += 1;
    }

    ExitInfo exit = runGuest(*vm, tec, budget);
    tec.last_exit = exit;
    ledger_.world_switch += 1;
    ledger_.exits[static_cast<ExitReasonCounter>(exit.reason)] += 1;

    TmiResponse resp;
    resp.results[0] = static_cast<u64>(exit.reason);
    switch (exit.reason) {
      case ExitReason::DataAbort:
        resp.results[1] = exit.faulting_ipa;
        resp.results[2] = exit.abort_value;
        resp.results[3] = exit.abort_is_write ? 1 : 0;
        break;
      case ExitReason::HostCall:
        resp.results[1] = exit.host_call_args[0];
        resp.results[2] = exit.host_call_args[1];
        resp.results[3] = exit.host_call_args[2];
        break;
      case ExitReason::Psci:
        resp.results[1] = exit.psci_function;
        resp.results[2] = exit.psci_target;
        break;
      default:
        break;
    }
    return resp;
  }

  ExitInfo runGuest(CVm& vm, Tec& tec, u64 budget) {
    while (true) {
      // host-injected virtual interrupts arrive through list registers
      while (auto virq = gic_.takeInjected(tec.id)) {
        tec.guest_trace.push_back("virq:" + std::to_string(*virq));
        if (tec.in_wfi) {
          tec.in_wfi = false;
          tec.pc += 1;  // retire the Wfi
        } else {
          tec.virqs_latched += 1;  // a later Wfi completes immediately
        }
      }
      // a pending physical interrupt is taken to the monitor (FIQ-taken)
      // and always reported to the host as IRQ
      if (auto intid = gic_.pendingFor(tec.id)) {
        (void)intid;
        ExitInfo e;
        e.reason = ExitReason::Irq;
        return e;
      }
      if (tec.in_wfi) {
        ExitInfo e;
        e.reason = ExitReason::Quantum;
        return e;
      }
      if (budget == 0) {
        ExitInfo e;
        e.reason = ExitReason::Quantum;
        return e;
      }
      if (tec.pc >= tec.program.insns.size()) {
        // script exhausted: the vCPU parks itself
        tec.runnable = false;
        ExitInfo e;
        e.reason = ExitReason::Quantum;
        return e;
      }

      const GuestInsn& insn = tec.program.insns[tec.pc];
      std::optional<ExitInfo> exit = step(vm, tec, insn, budget);
      if (exit) return *exit;
    }
  }

  // Executes one instruction; advances pc unless the instruction stalls.
  std::optional<ExitInfo> step(CVm& vm, Tec& tec, const GuestInsn& insn,
                               u64& budget) {
    budget -= 1;
    if (auto* c = std::get_if<InsnComputeTicks>(&insn)) {
      budget -= std::min(budget, c->ticks);
      tec.pc += 1;
      return std::nullopt;
    }
    if (auto* w = std::get_if<InsnMemWrite>(&insn)) {
      if (!guestWrite(vm, tec, w->ipa, w->bytes.data(), w->bytes.size()))
        return dataAbort(w->ipa, true,
                         w->bytes.empty() ? 0 : w->bytes[0]);
      tec.pc += 1;
      return std::nullopt;
    }
    if (auto* r = std::get_if<InsnMemRead>(&insn)) {
      Bytes buf(r->len);
      if (!guestRead(vm, tec, r->ipa, buf.data(), buf.size()))
        return dataAbort(r->ipa, false, 0);
      tec.guest_trace.push_back("read:" + std::to_string(r->ipa) + ":" +
                                toHex(buf));
      tec.pc += 1;
      return std::nullopt;
    }
    if (auto* t = std::get_if<InsnTsiCall>(&insn)) {
      return stepTsi(vm, tec, *t);
    }
    if (auto* h = std::get_if<InsnHostCall>(&insn)) {
      tec.pending_host_call = true;
      ExitInfo e;
      e.reason = ExitReason::HostCall;
      e.host_call_args = h->args;
      return e;
    }
    if (auto* mr = std::get_if<InsnMmioRead>(&insn)) {
      tec.pending_mmio = PendingMmio{true, mr->ipa};
      return dataAbort(mr->ipa, false, 0);
    }
    if (auto* mw = std::get_if<InsnMmioWrite>(&insn)) {
      tec.pending_mmio = PendingMmio{false, mw->ipa};
      return dataAbort(mw->ipa, true, mw->value);
    }
    if (auto* vs = std::get_if<InsnVirtioSubmit>(&insn)) {
      return stepVirtioSubmit(vm, tec, *vs);
    }
    if (std::get_if<InsnWfi>(&insn)) {
      if (tec.virqs_latched > 0) {
        tec.virqs_latched -= 1;  // interrupt already arrived; don't sleep
        tec.pc += 1;
      } else {
        tec.in_wfi = true;  // the loop head delivers vIRQs and wakes us
      }
      return std::nullopt;
    }
    if (auto* p = std::get_if<InsnPsciCall>(&insn)) {
      switch (static_cast<PsciFunction>(p->function)) {
        case PsciFunction::CpuOn: {
          // targets are indexed by vCPU position
          if (p->target >= vm.tecs.size()) {
            tec.gprs[0] = static_cast<u64>(-2);  // INVALID_PARAMETERS
            tec.pc += 1;
            return std::nullopt;
          }
          tec.pending_psci =
              PendingPsci{p->function, vm.tecs[p->target]};
          ExitInfo e;
          e.reason = ExitReason::Psci;
          e.psci_function = p->function;
          e.psci_target = vm.tecs[p->target];
          return e;
        }
        case PsciFunction::CpuOff: {
          tec.runnable = false;
          tec.pc += 1;
          ExitInfo e;
          e.reason = ExitReason::Psci;
          e.psci_function = p->function;
          return e;
        }
        case PsciFunction::SystemOff:
          break;
      }
      logTransition(vm, CvmState::SystemOff, "guest system_off");
      ExitInfo e;
      e.reason = ExitReason::SystemOff;
      return e;
    }
    if (std::get_if<InsnHalt>(&insn)) {
      logTransition(vm, CvmState::SystemOff, "guest halt");
      ExitInfo e;
      e.reason = ExitReason::SystemOff;
      return e;
    }
    tec.pc += 1;
    return std::nullopt;
  }

  static ExitInfo dataAbort(Ipa ipa, bool is_write, u64 value) {
    ExitInfo e;
    e.reason = ExitReason::DataAbort;
    e.faulting_ipa = ipa;
    e.abort_is_write = is_write;
    e.abort_value = value;
    return e;
  }

  // guest loads/stores go through the translation tree plus the physical
  // gate; they may cross page boundaries
  bool guestAccess(CVm& vm, Tec& tec, Ipa ipa, u8* buf, std::size_t len,
                   bool write) {
    std::size_t done = 0;
    while (done < len) {
      Ipa cur = ipa + done;
      auto leaf = vm.ttt->resolve(cur);
      if (!leaf) return false;
      if (write && !leaf->attrs.writable) return false;
      if (!write && !leaf->attrs.readable) return false;
      if (mem_.checkAccess(Requestor::cvmId(tec.cvm), leaf->granule,
                           write ? AccessMode::Write : AccessMode::Read) !=
          AccessResult::Allowed)
        return false;
      std::size_t off = cur & (kGranuleBytes - 1);
      std::size_t n = std::min(len - done, kGranuleBytes - off);
      Granule& g = mem_.granuleMut(leaf->granule);
      if (write)
        std::memcpy(g.contents.data() + off, buf + done, n);
      else
        std::memcpy(buf + done, g.contents.data() + off, n);
      done += n;
    }
    return true;
  }

  bool guestWrite(CVm& vm, Tec& tec, Ipa ipa, const u8* buf, std::size_t len) {
    return guestAccess(vm, tec, ipa, const_cast<u8*>(buf), len, true);
  }
  bool guestRead(CVm& vm, Tec& tec, Ipa ipa, u8* buf, std::size_t len) {
    return guestAccess(vm, tec, ipa, buf, len, false);
  }

  // ---- TSI services ----

  std::optional<ExitInfo> stepTsi(CVm& vm, Tec& tec, const InsnTsiCall& call) {
    auto fn = static_cast<TsiFunction>(call.function);
    invoked_tsis_.insert(fn);
    auto done = [&tec](TsiStatus st) {
      tec.gprs[0] = static_cast<u64>(st);
      tec.pc += 1;
    };
    switch (fn) {
      case TsiFunction::Version:
        tec.gprs[1] = 1;  // major
        tec.gprs[2] = 0;  // minor
        done(TsiStatus::Success);
        return std::nullopt;
      case TsiFunction::CvmConfig:
        tec.gprs[1] = vm.params.ipa_width;
        tec.gprs[2] = vm.params.protected_ipa_limit;
        tec.gprs[3] = vm.params.hash_algo_id;
        tec.gprs[4] = vm.params.vcpu_count;
        done(TsiStatus::Success);
        return std::nullopt;
      case TsiFunction::MeasurementRead: {
        u64 index = call.args[0];
        if (index > kRemSlots) {
          done(TsiStatus::ErrorInput);
          return std::nullopt;
        }
        const Digest& d =
            index == 0 ? vm.measurement.current() : vm.rem[index - 1];
        for (int i = 0; i < 4; ++i) {
          u64 v = 0;
          for (int b = 0; b < 8; ++b)
            v |= static_cast<u64>(d[i * 8 + b]) << (8 * b);
          tec.gprs[1 + i] = v;
        }
        tec.guest_trace.push_back("measurement[" + std::to_string(index) +
                                  "]=" + toHex(d));
        done(TsiStatus::Success);
        return std::nullopt;
      }
      case TsiFunction::MeasurementExtend: {
        u64 index = call.args[0];
        if (index < 1 || index > kRemSlots) {
          done(TsiStatus::ErrorInput);
          return std::nullopt;
        }
        Bytes buf;
        putDigest(buf, vm.rem[index - 1]);
        putBytes(buf, call.payload.data(), call.payload.size());
        vm.rem[index - 1] = crypto::sha256(buf);
        done(TsiStatus::Success);
        return std::nullopt;
      }
      case TsiFunction::AttestationTokenInit: {
        Bytes challenge = call.payload;
        challenge.resize(kChallengeBytes, 0);
        tec.token.token_bytes = buildToken(vm, challenge).encode();
        tec.token.cursor = 0;
        tec.token.active = true;
        tec.gprs[1] = tec.token.token_bytes.size();
        done(TsiStatus::Success);
        return std::nullopt;
      }
      case TsiFunction::AttestationTokenContinue: {
        if (!tec.token.active) {
          done(TsiStatus::ErrorState);
          return std::nullopt;
        }
        Ipa buffer = call.args[0];
        u64 max_len = call.args[1];
        std::size_t n = std::min<std::size_t>(
            max_len, tec.token.token_bytes.size() - tec.token.cursor);
        if (!guestWrite(vm, tec, buffer,
                        tec.token.token_bytes.data() + tec.token.cursor, n)) {
          done(TsiStatus::ErrorInput);
          return std::nullopt;
        }
        tec.token.cursor += n;
        tec.gprs[1] = n;
        if (tec.token.cursor < tec.token.token_bytes.size()) {
          done(TsiStatus::Incomplete);
        } else {
          tec.token.active = false;
          done(TsiStatus::Success);
        }
        return std::nullopt;
      }
      case TsiFunction::HostCall: {
        tec.pending_host_call = true;
        ExitInfo e;
        e.reason = ExitReason::HostCall;
        e.host_call_args = call.args;
        return e;
      }
    }
    done(TsiStatus::ErrorInput);
    return std::nullopt;
  }

 public:
  /// Host-side token construction for an ACTIVE cVM (the attestation
  /// service the TSI path uses).
  AttestationToken buildToken(const CVm& vm, const Bytes& challenge64) const {
    AttestationToken t;
    t.challenge = challenge64;
    t.challenge.resize(kChallengeBytes, 0);
    t.cvm_measurement = vm.measurement.current();
    t.rem = vm.rem;
    t.cvm_config_digest = crypto::sha256(vm.params.encode());
    t.firmware_digest = keys_.firmwareDigest();
    const std::string info = "tzmm-platform-v1";
    t.platform_info.assign(info.begin(), info.end());
    t.aik_public = keys_.aikPublic();
    t.aik_cert = keys_.aikCert();
    t.rak_public = keys_.rakPublic();
    t.rak_cert = keys_.rakCert();
    t.signature = keys_.aik().sign(t.signedPortion());
    return t;
  }

  std::optional<AttestationToken> buildTokenFor(CvmId id,
                                                const Bytes& challenge) {
    std::lock_guard<std::mutex> lock(gate_);
    CVm* vm = findCvm(id);
    if (!vm || vm->state != CvmState::Active) return std::nullopt;
    return buildToken(*vm, challenge);
  }

 private:
  PhysicalMemory& mem_;
  Gic& gic_;
  CostLedger& ledger_;
  const KeyHierarchy& keys_;
  std::mutex gate_;
  std::map<CvmId, CVm> cvms_;
  std::map<TecId, Tec> tecs_;
  std::map<CvmId, std::vector<VirtioDeviceDesc>> devices_;
  std::vector<StateTransition> transitions_;
  std::set<TmiCommand> invoked_tmis_;
  std::set<TsiFunction> invoked_tsis_;
  CvmId next_cvm_id_ = 1;
  TecId next_tec_id_ = 1;
  std::function<void(const TmiRequest&, const TmiResponse&)> trace_sink_;

  std::optional<ExitInfo> stepVirtioSubmit(CVm& vm, Tec& tec,
                                           const InsnVirtioSubmit& vs);
};

}  // namespace tzmm

#include "tzmm/virtio_guest.hpp"
