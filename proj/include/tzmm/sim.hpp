#pragma once

#include "tzmm/host.hpp"

namespace tzmm {

struct SimConfig {
  u64 granules = 4096;
  TzascConfig tzasc;  // empty: default split for the policy
  MappingPolicy policy = MappingPolicy::Direct;
  u64 seed = 1;
  HostPolicy host_policy{};
};

/// One complete simulated machine: memory, interrupt controller, key
/// hierarchy, monitor, shadow-transfer engine, and host — wired together
/// and calibrated.
struct SimEnv {
  SimConfig config;
  CostLedger ledger;
  PhysicalMemory mem;
  Gic gic;
  KeyHierarchy keys;
  Tmm tmm;
  ShadowSync shadow;
  HostSim host;

  explicit SimEnv(SimConfig cfg = {})
      : config(cfg),
        mem(cfg.granules, cfg.policy, &ledger),
        keys(rotSeed(cfg.seed), firmwareDigest(), cfg.seed),
        tmm(mem, gic, ledger, keys),
        shadow(mem, ledger),
        host(tmm, mem, gic, ledger, shadow, cfg.host_policy) {
    ledger.calibrate(referenceCalibration());
    mem.configureTzasc(cfg.tzasc.regions.empty()
                           ? defaultTzasc(cfg.granules, cfg.policy)
                           : cfg.tzasc);
  }

  static Bytes rotSeed(u64 seed) {
    Bytes b;
    const std::string label = "rot-seed";
    putBytes(b, reinterpret_cast<const u8*>(label.data()), label.size());
    putLe64(b, seed);
    Digest d = crypto::sha256(b);
    return Bytes(d.begin(), d.end());
  }

  static Digest firmwareDigest() {
    const std::string fw = "tzmm-firmware-v1";
    return crypto::sha256(reinterpret_cast<const u8*>(fw.data()), fw.size());
  }

  /// Per-cVM I/O protection key (tweakable-encryption root).
  Bytes ioKey(CvmId id) const {
    Bytes salt;
    putLe64(salt, id);
    return crypto::hkdf(rotSeed(config.seed), salt, "io-key", 32);
  }

  static TzascConfig defaultTzasc(u64 granules, MappingPolicy policy) {
    TzascConfig cfg;
    if (policy == MappingPolicy::Direct) {
      // lower half normal, third quarter secure, top quarter normal
      cfg.regions.push_back({0, granules / 2, false});
      cfg.regions.push_back({granules / 2, granules / 4, true});
      cfg.regions.push_back({granules / 2 + granules / 4,
                             granules - granules / 2 - granules / 4, false});
    } else {
      // dynamic delegation starts with everything in the normal world
      cfg.regions.push_back({0, granules, false});
    }
    return cfg;
  }
};

}  // namespace tzmm
