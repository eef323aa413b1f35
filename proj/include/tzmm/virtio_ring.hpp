#pragma once

#include "tzmm/types.hpp"

namespace tzmm {

// Split virtqueue, 256 entries, laid out over three consecutive guest
// pages: descriptor table / avail ring / used ring.
constexpr u32 kVringEntries = 256;
constexpr u16 kVringDescFlagNext = 1;
constexpr u16 kVringDescFlagWrite = 2;

struct VringDesc {
  u64 addr = 0;  // guest IPA
  u32 len = 0;
  u16 flags = 0;
  u16 next = 0;
};

struct VringLayout {
  Ipa base;  // descriptor table page

  Ipa descAt(u32 i) const { return base + i * 16; }
  Ipa availFlags() const { return base + kGranuleBytes; }
  Ipa availIdx() const { return base + kGranuleBytes + 2; }
  Ipa availRingAt(u32 i) const { return base + kGranuleBytes + 4 + i * 2; }
  Ipa usedFlags() const { return base + 2 * kGranuleBytes; }
  Ipa usedIdx() const { return base + 2 * kGranuleBytes + 2; }
  Ipa usedRingAt(u32 i) const { return base + 2 * kGranuleBytes + 4 + i * 8; }
};

inline Bytes encodeVringDesc(const VringDesc& d) {
  Bytes out;
  putLe64(out, d.addr);
  putLe32(out, d.len);
  out.push_back(static_cast<u8>(d.flags));
  out.push_back(static_cast<u8>(d.flags >> 8));
  out.push_back(static_cast<u8>(d.next));
  out.push_back(static_cast<u8>(d.next >> 8));
  return out;
}

inline VringDesc decodeVringDesc(const u8* p) {
  VringDesc d;
  for (int i = 0; i < 8; ++i) d.addr |= static_cast<u64>(p[i]) << (8 * i);
  for (int i = 0; i < 4; ++i) d.len |= static_cast<u32>(p[8 + i]) << (8 * i);
  d.flags = static_cast<u16>(p[12] | (p[13] << 8));
  d.next = static_cast<u16>(p[14] | (p[15] << 8));
  return d;
}

// virtio-blk style request header (simplified): type + sector
constexpr u32 kBlkRequestRead = 0;
constexpr u32 kBlkRequestWrite = 1;
constexpr u64 kBlkSectorBytes = 512;

struct BlkRequestHeader {
  u32 type = 0;
  u64 sector = 0;

  Bytes encode() const {
    Bytes out;
    putLe32(out, type);
    putLe32(out, 0);
    putLe64(out, sector);
    return out;
  }

  static BlkRequestHeader decode(const u8* p) {
    BlkRequestHeader h;
    for (int i = 0; i < 4; ++i) h.type |= static_cast<u32>(p[i]) << (8 * i);
    for (int i = 0; i < 8; ++i)
      h.sector |= static_cast<u64>(p[8 + i]) << (8 * i);
    return h;
  }
};

constexpr u8 kVirtioStatusOk = 0;
constexpr u8 kVirtioStatusIoErr = 1;

}  // namespace tzmm
