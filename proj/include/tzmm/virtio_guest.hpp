#pragma once

// Guest-side half of the virtio model: InsnVirtioSubmit writes a
// descriptor chain and the avail ring into the cVM's own vring pages,
// then rings the device doorbell (an MMIO store, which exits to the
// host). Included from tmm.hpp; not a standalone header.

#include "tzmm/virtio_ring.hpp"

namespace tzmm {

inline std::optional<ExitInfo> Tmm::stepVirtioSubmit(
    CVm& vm, Tec& tec, const InsnVirtioSubmit& vs) {
  const VirtioDeviceDesc* dev = nullptr;
  auto dit = devices_.find(vm.id);
  if (dit != devices_.end())
    for (const auto& d : dit->second)
      if (d.queue == vs.queue) dev = &d;
  if (!dev || vs.descriptors.empty() ||
      vs.descriptors.size() > kVringEntries) {
    tec.gprs[0] = static_cast<u64>(-1);
    tec.pc += 1;
    return std::nullopt;
  }

  VringLayout ring{dev->vring_ipa};

  // current avail.idx picks where the chain goes
  u8 idx_raw[2];
  if (!guestRead(vm, tec, ring.availIdx(), idx_raw, 2))
    return dataAbort(ring.availIdx(), false, 0);
  u16 avail_idx = static_cast<u16>(idx_raw[0] | (idx_raw[1] << 8));
  u16 head = static_cast<u16>((avail_idx * 8) % kVringEntries);

  for (std::size_t i = 0; i < vs.descriptors.size(); ++i) {
    const VqDescRequest& req = vs.descriptors[i];
    VringDesc d;
    d.addr = req.buffer_ipa;
    d.len = static_cast<u32>(req.len);
    d.flags = req.device_writes ? kVringDescFlagWrite : 0;
    if (i + 1 < vs.descriptors.size()) {
      d.flags |= kVringDescFlagNext;
      d.next = static_cast<u16>((head + i + 1) % kVringEntries);
    }
    Bytes enc = encodeVringDesc(d);
    Ipa slot = ring.descAt(static_cast<u32>((head + i) % kVringEntries));
    if (!guestWrite(vm, tec, slot, enc.data(), enc.size()))
      return dataAbort(slot, true, 0);
  }

  u8 head_raw[2] = {static_cast<u8>(head), static_cast<u8>(head >> 8)};
  Ipa slot = ring.availRingAt(avail_idx % kVringEntries);
  if (!guestWrite(vm, tec, slot, head_raw, 2))
    return dataAbort(slot, true, 0);
  u16 new_idx = static_cast<u16>(avail_idx + 1);
  u8 new_idx_raw[2] = {static_cast<u8>(new_idx), static_cast<u8>(new_idx >> 8)};
  if (!guestWrite(vm, tec, ring.availIdx(), new_idx_raw, 2))
    return dataAbort(ring.availIdx(), true, 0);

  // kick: MMIO store of the queue index to the device doorbell
  tec.pending_mmio = PendingMmio{false, dev->doorbell_ipa};
  return dataAbort(dev->doorbell_ipa, true, vs.queue);
}

}  // namespace tzmm
