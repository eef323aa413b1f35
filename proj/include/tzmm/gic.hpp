#pragma once

#include <array>
#include <map>
#include <optional>

#include "tzmm/types.hpp"

namespace tzmm {

enum class IrqGroup { G0Secure, G1NonSecure };

struct PhysInterrupt {
  u32 intid = 0;
  IrqGroup group = IrqGroup::G1NonSecure;
  bool enabled = true;
  bool pending = false;
  std::optional<TecId> target;  // pending toward this execution context
};

struct ListRegister {
  std::optional<u32> virtual_intid;  // occupied iff set
};

/// Interrupt-controller state shared between the monitor and the host
/// model. Physical interrupts pend here; virtual interrupts reach a guest
/// only through a list register the host wrote.
class Gic {
 public:
  void configure(u32 intid, IrqGroup group, bool enabled) {
    auto& irq = irqs_[intid];
    irq.intid = intid;
    irq.group = group;
    irq.enabled = enabled;
  }

  void pend(u32 intid, TecId target) {
    auto& irq = irqs_[intid];
    irq.intid = intid;
    irq.pending = true;
    irq.target = target;
  }

  void clearPending(u32 intid) {
    auto it = irqs_.find(intid);
    if (it != irqs_.end()) {
      it->second.pending = false;
      it->second.target.reset();
    }
  }

  /// First enabled pending interrupt aimed at this context.
  std::optional<u32> pendingFor(TecId tec) const {
    for (const auto& [id, irq] : irqs_)
      if (irq.pending && irq.enabled && irq.target && *irq.target == tec)
        return id;
    return std::nullopt;
  }

  bool anyPending() const {
    for (const auto& [id, irq] : irqs_)
      if (irq.pending && irq.enabled) return true;
    return false;
  }

  // ---- list registers (per execution context) ----

  bool writeListRegister(TecId tec, u32 virtual_intid) {
    auto& lrs = lrs_[tec];
    for (auto& lr : lrs)
      if (!lr.virtual_intid) {
        lr.virtual_intid = virtual_intid;
        ++lr_writes_;
        return true;
      }
    return false;  // NoFreeListRegister; caller retries later
  }

  std::optional<u32> takeInjected(TecId tec) {
    auto it = lrs_.find(tec);
    if (it == lrs_.end()) return std::nullopt;
    for (auto& lr : it->second)
      if (lr.virtual_intid) {
        u32 v = *lr.virtual_intid;
        lr.virtual_intid.reset();
        return v;
      }
    return std::nullopt;
  }

  bool hasInjected(TecId tec) const {
    auto it = lrs_.find(tec);
    if (it == lrs_.end()) return false;
    for (const auto& lr : it->second)
      if (lr.virtual_intid) return true;
    return false;
  }

  void dropListRegisters(TecId tec) { lrs_.erase(tec); }

  u64 listRegisterWrites() const { return lr_writes_; }

 private:
  std::map<u32, PhysInterrupt> irqs_;
  std::map<TecId, std::array<ListRegister, kListRegisters>> lrs_;
  u64 lr_writes_ = 0;
};

}  // namespace tzmm
