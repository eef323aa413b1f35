#include <catch2/catch_amalgamated.hpp>

#include "tzmm/conformance.hpp"

using namespace tzmm;

TEST_CASE("the four-step boot flow produces a running, measured cVM") {
  SimEnv env;
  GuestProgram prog;
  prog.insns = {InsnComputeTicks{3}, InsnHalt{}};
  CvmId id = conf::bootOne(env, {prog}, {{0x1000, conf::patternPage(1)}});
  const CVm* vm = env.tmm.cvm(id);
  REQUIRE(vm != nullptr);
  CHECK(vm->state == CvmState::Active);
  CHECK(vm->measurement.sealed());
  auto events = env.host.eventLog();
  REQUIRE(events.size() >= 4);
  CHECK(events[0] == "step1:create_cvm");
  CHECK(events[3] == "step4:activate");
}

TEST_CASE("boot failures tear the partial cVM down") {
  SimEnv env;
  CVmParams bad;
  bad.vcpu_count = 0;
  REQUIRE_THROWS_AS(env.host.bootCvm(bad, 1, {}, {GuestProgram{}}, 16, {}),
                    BootError);
  CHECK(env.mem.ownershipDisjoint());
}

TEST_CASE("host calls resume with the responder's registers") {
  SimEnv env;
  GuestProgram prog;
  prog.insns = {InsnHostCall{0x1234, 5, 6}, InsnHalt{}};
  env.host.addResponder({0x1234, {0xAA, 0xBB, 0, 0}});
  CvmId id = conf::bootOne(env, {prog});
  RunReport rep = env.host.run(id, 20);
  CHECK(rep.system_off);
  CHECK(rep.exit_counts["HOST_CALL"] == 1);
}

TEST_CASE("a guest parked at end of script is completion, not deadlock") {
  SimEnv env;
  GuestProgram prog;
  prog.insns = {InsnComputeTicks{1}};  // no halt
  CvmId id = conf::bootOne(env, {prog});
  RunReport rep = env.host.run(id, 20);
  CHECK_FALSE(rep.deadlock);
  CHECK_FALSE(rep.system_off);
}

TEST_CASE("a guest stuck in wfi with no wake source is a deadlock") {
  SimEnv env;
  GuestProgram prog;
  prog.insns = {InsnWfi{}, InsnHalt{}};
  CvmId id = conf::bootOne(env, {prog});
  RunReport rep = env.host.run(id, 20);
  CHECK(rep.deadlock);
}

TEST_CASE("a scheduled interrupt wakes a waiting guest") {
  SimEnv env;
  GuestProgram prog;
  prog.insns = {InsnWfi{}, InsnHalt{}};
  CvmId id = conf::bootOne(env, {prog});
  env.host.scheduleInterrupt(1, 27, 0);
  RunReport rep = env.host.run(id, 30);
  CHECK_FALSE(rep.deadlock);
  CHECK(rep.system_off);
  CHECK(env.ledger.irq_emulations >= 1);
}

TEST_CASE("withholding the interrupt injection starves the guest honestly") {
  SimConfig cfg;
  cfg.host_policy.drop_intids.insert(27);
  SimEnv env(cfg);
  GuestProgram prog;
  prog.insns = {InsnWfi{}, InsnHalt{}};
  CvmId id = conf::bootOne(env, {prog});
  env.host.scheduleInterrupt(1, 27, 0);
  RunReport rep = env.host.run(id, 30);
  CHECK(rep.deadlock);
  // starving the guest never lets the host into secure memory
  CHECK(env.host.hostAccessFaults() == 0);
  CHECK(env.mem.hostFaultsOnAllSecure());
}

TEST_CASE("unknown aborts park the context instead of wedging the run") {
  SimEnv env;
  CVmParams defaults;
  // an abort outside the emulated device window: nothing can serve it
  Ipa mmio_base = (u64{1} << defaults.ipa_width) - (u64{64} << 20);
  GuestProgram prog;
  prog.insns = {InsnMmioWrite{mmio_base - 0x1000, 1}, InsnHalt{}};
  CvmId id = conf::bootOne(env, {prog});
  RunReport rep = env.host.run(id, 20);
  CHECK(rep.exit_counts["DATA_ABORT"] == 1);
  CHECK(rep.deadlock);  // the context is blocked, not finished
}

TEST_CASE("host-provided mmio read values reach the guest") {
  SimEnv env;
  CVmParams defaults;
  Ipa mmio_base = (u64{1} << defaults.ipa_width) - (u64{64} << 20);
  env.host.setMmioReadValue(mmio_base + 0x40, 0xDEAD);
  GuestProgram prog;
  prog.insns = {InsnMmioRead{mmio_base + 0x40}};  // park after the read
  CvmId id = conf::bootOne(env, {prog});
  RunReport rep = env.host.run(id, 20);
  CHECK_FALSE(rep.deadlock);
  const Tec* t = env.tmm.tec(env.host.tecsOf(id)[0]);
  REQUIRE(t != nullptr);
  bool saw = false;
  for (const auto& l : t->guest_trace)
    saw = saw || l.find("mmio_read") != std::string::npos;
  CHECK(saw);
}

TEST_CASE("secondary vCPUs come up through the power-on call") {
  SimEnv env;
  GuestProgram boss, worker;
  boss.insns = {InsnPsciCall{static_cast<u32>(PsciFunction::CpuOn), 1},
                InsnHalt{}};
  worker.insns = {InsnComputeTicks{1},
                  InsnPsciCall{static_cast<u32>(PsciFunction::CpuOff), 0}};
  CvmId id = conf::bootOne(env, {boss, worker}, {}, {}, 2);
  RunReport rep = env.host.run(id, 40);
  CHECK(rep.system_off);
  CHECK(rep.exit_counts["PSCI"] >= 2);
}

TEST_CASE("quantum exhaustion round-robins between contexts") {
  SimConfig cfg;
  cfg.host_policy.quantum = 2;
  SimEnv env(cfg);
  GuestProgram a, b;
  for (int i = 0; i < 6; ++i) {
    a.insns.push_back(InsnComputeTicks{1});
    b.insns.push_back(InsnComputeTicks{1});
  }
  a.insns.insert(a.insns.begin(),
                 InsnPsciCall{static_cast<u32>(PsciFunction::CpuOn), 1});
  a.insns.push_back(InsnHalt{});
  CvmId id = conf::bootOne(env, {a, b}, {}, {}, 2);
  RunReport rep = env.host.run(id, 60);
  CHECK(rep.system_off);
  CHECK(rep.exit_counts["QUANTUM"] >= 2);
}

TEST_CASE("host writes into secure granules are audited as faults") {
  SimEnv env;
  CvmId id = conf::bootOne(env, {GuestProgram{}},
                           {{0x1000, conf::patternPage(9)}});
  const CVm* vm = env.tmm.cvm(id);
  REQUIRE(vm->region.has_value());
  u8 byte = 0xFF;
  CHECK(env.host.hostAccessFaults() == 0);
  env.host.hostWrite(vm->region->base, 0, &byte, 1);
  CHECK(env.host.hostAccessFaults() == 1);
  // the write did not land
  CHECK(env.mem.granule(vm->region->base).contents[0] != 0xFF);
}
