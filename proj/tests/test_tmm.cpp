#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "tzmm/conformance.hpp"

using namespace tzmm;

namespace {

GranuleIndex stageParams(SimEnv& env, const CVmParams& p) {
  GranuleIndex g = env.host.claimStagingGranule();
  Bytes enc = p.encode();
  env.host.hostWrite(g, 0, enc.data(), enc.size());
  return g;
}

}  // namespace

TEST_CASE("creation parameters survive their wire encoding") {
  CVmParams p;
  p.ipa_width = 44;
  p.vcpu_count = 3;
  p.protected_ipa_limit = u64{1} << 41;
  p.hash_algo_id = kHashAlgoSha256;
  p.feature_mask = kPlatformFeatures;
  Bytes enc = p.encode();
  auto back = CVmParams::decode(enc.data(), enc.size());
  REQUIRE(back.has_value());
  CHECK(back->ipa_width == p.ipa_width);
  CHECK(back->vcpu_count == p.vcpu_count);
  CHECK(back->protected_ipa_limit == p.protected_ipa_limit);
  CHECK(back->hash_algo_id == p.hash_algo_id);
  CHECK(back->feature_mask == p.feature_mask);
  CHECK_FALSE(CVmParams::decode(enc.data(), enc.size() - 1).has_value());
}

TEST_CASE("lifecycle walks new -> active -> off -> reclaimed") {
  SimEnv env;
  CVmParams p;
  TmiResponse r = env.tmm.createCvm(stageParams(env, p), 16);
  REQUIRE(r.status == TmiStatus::Success);
  CvmId id = r.results[0];
  REQUIRE(env.tmm.cvm(id) != nullptr);
  CHECK(env.tmm.cvm(id)->state == CvmState::New);

  REQUIRE(env.tmm.tecCreate(id, TecParams{}).status == TmiStatus::Success);
  REQUIRE(env.tmm.activateCvm(id).status == TmiStatus::Success);
  CHECK(env.tmm.cvm(id)->state == CvmState::Active);
  // activation is one-way
  CHECK(env.tmm.activateCvm(id).status == TmiStatus::ErrorState);
  // measurement log is sealed at activation: loading measured data fails
  CHECK(env.tmm.dataCreate(id, 0x5000, 0).status == TmiStatus::ErrorState);

  REQUIRE(env.tmm.destroyCvm(id).status == TmiStatus::Success);
  CHECK(env.tmm.cvm(id) == nullptr);
}

TEST_CASE("commands against unknown or wrong-state targets are refused") {
  SimEnv env;
  CHECK(env.tmm.activateCvm(42).status == TmiStatus::ErrorInput);
  CHECK(env.tmm.destroyCvm(42).status == TmiStatus::ErrorInput);
  CHECK(env.tmm.tecEnter(42, 8).status == TmiStatus::ErrorInput);

  CVmParams p;
  CvmId id = env.tmm.createCvm(stageParams(env, p), 16).results[0];
  // cannot activate without any execution context
  CHECK(env.tmm.activateCvm(id).status == TmiStatus::ErrorState);
  env.tmm.destroyCvm(id);
}

TEST_CASE("destroying a cVM zeroes every granule it owned") {
  SimEnv env;
  CvmId id = conf::bootOne(env, {GuestProgram{}},
                           {{0x1000, conf::patternPage(0x7E)}});
  const CVm* vm = env.tmm.cvm(id);
  REQUIRE(vm != nullptr);
  REQUIRE(vm->region.has_value());
  SecureRegion region = *vm->region;
  REQUIRE(env.tmm.destroyCvm(id).status == TmiStatus::Success);
  for (u64 i = 0; i < region.count; ++i)
    REQUIRE(env.mem.granule(region.base + i).isZeroed());
}

TEST_CASE("block creation equals page-by-page creation, with fewer commands") {
  auto bootPages = [](bool block, u64 n) {
    auto env = std::make_unique<SimEnv>();
    CVmParams p;
    CvmId id = env->tmm.createCvm(stageParams(*env, p), 600).results[0];
    Ipa base = u64{1} << 21;
    for (u64 level = 1; level <= 3; ++level) {
      TmiResponse tr = env->tmm.createTtt(id, base, level);
      REQUIRE((tr.status == TmiStatus::Success ||
               tr.status == TmiStatus::ErrorInput));  // may pre-exist
    }
    u64 before = env->ledger.tmi_calls;
    if (block) {
      REQUIRE(env->tmm.dataBlockCreateUnknown(id, base, n).status ==
              TmiStatus::Success);
    } else {
      for (u64 i = 0; i < n; ++i)
        REQUIRE(env->tmm.dataCreateUnknown(id, base + i * kGranuleBytes)
                    .status == TmiStatus::Success);
    }
    u64 cmds = env->ledger.tmi_calls - before;
    Digest meas = env->tmm.cvm(id)->measurement.current();
    std::vector<GranuleIndex> granules;
    for (u64 i = 0; i < n; ++i)
      granules.push_back(
          env->tmm.cvm(id)->ttt->resolve(base + i * kGranuleBytes)->granule);
    return std::tuple{cmds, meas, granules, std::move(env), id};
  };

  for (u64 n : {u64{1}, u64{2}}) {
    auto [bc, bm, bg, benv, bid] = bootPages(true, n);
    auto [sc, sm, sg, senv, sid] = bootPages(false, n);
    CHECK(bc == 1);
    CHECK(sc == n);
    CHECK(bm == sm);
    // both layouts map n contiguous-IPA pages to granules the cVM owns
    REQUIRE(bg.size() == sg.size());
    for (std::size_t i = 0; i < bg.size(); ++i) {
      CHECK(benv->mem.granule(bg[i]).owner == bid);
      CHECK(senv->mem.granule(sg[i]).owner == sid);
    }
  }
}

TEST_CASE("loaded pages extend the measurement; unknown pages do not") {
  SimEnv env;
  CVmParams p;
  CvmId id = env.tmm.createCvm(stageParams(env, p), 64).results[0];
  Digest initial = env.tmm.cvm(id)->measurement.current();

  REQUIRE(env.tmm.createTtt(id, 0, 1).status == TmiStatus::Success);
  REQUIRE(env.tmm.createTtt(id, 0, 2).status == TmiStatus::Success);
  REQUIRE(env.tmm.createTtt(id, 0, 3).status == TmiStatus::Success);
  REQUIRE(env.tmm.dataCreateUnknown(id, 0x2000).status == TmiStatus::Success);
  CHECK(env.tmm.cvm(id)->measurement.current() == initial);

  GranuleIndex src = env.host.claimStagingGranule();
  Bytes page = conf::patternPage(0x11);
  env.host.hostWrite(src, 0, page.data(), page.size());
  REQUIRE(env.tmm.dataCreate(id, 0x3000, src).status == TmiStatus::Success);
  CHECK(env.tmm.cvm(id)->measurement.current() != initial);
}

TEST_CASE("fuzzed command sequences never break the memory invariants") {
  std::mt19937_64 rng(2024);
  SimEnv env;
  std::vector<CvmId> live;
  for (int step = 0; step < 3000; ++step) {
    u64 pick = rng() % 8;
    TmiRequest req;
    req.command = static_cast<u64>(allTmiCommands()[rng() % 19]);
    req.args[0] = live.empty() ? rng() % 4 : live[rng() % live.size()];
    req.args[1] = (rng() % 64) * kGranuleBytes;
    req.args[2] = rng() % env.mem.size();
    req.args[3] = rng() % 4;
    if (pick == 0 && live.size() < 4) {
      CVmParams p;
      TmiResponse r = env.tmm.createCvm(stageParams(env, p), 16);
      if (r.status == TmiStatus::Success) live.push_back(r.results[0]);
    } else if (pick == 1 && !live.empty()) {
      std::size_t i = rng() % live.size();
      if (env.tmm.destroyCvm(live[i]).status == TmiStatus::Success)
        live.erase(live.begin() + i);
    } else {
      REQUIRE_NOTHROW(env.tmm.dispatch(req));
    }
    if (step % 100 == 0) {
      REQUIRE(env.mem.ownershipDisjoint());
      REQUIRE(env.mem.hostFaultsOnAllSecure());
      for (CvmId id : live) REQUIRE(env.tmm.tttSound(id));
    }
  }
  REQUIRE(env.mem.ownershipDisjoint());
  REQUIRE(env.mem.hostFaultsOnAllSecure());
}
