#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tzmm {

using u8 = std::uint8_t;
using u16 = std::uint16_t;
using u32 = std::uint32_t;
using u64 = std::uint64_t;

using Bytes = std::vector<u8>;
using Digest = std::array<u8, 32>;

using GranuleIndex = u64;
using CvmId = u64;
using TecId = u64;
using Ipa = u64;

constexpr std::size_t kGranuleBytes = 4096;
constexpr std::size_t kTzascMaxRegions = 8;
constexpr std::size_t kRemSlots = 4;
constexpr std::size_t kChallengeBytes = 64;
constexpr std::size_t kListRegisters = 4;

enum class World { Normal, Secure };

enum class GranuleState {
  NsFree,      // normal-world, unclaimed
  NsShadow,    // normal-world, reserved as a cVM shadow page
  SecureFree,  // secure-world, not holding cVM payload
  Delegated,   // secure-world, delegated by the host (dynamic policy)
  Data,
  Ttt,
  Tec,
  Params,
};

enum class MappingPolicy { Direct, Dynamic };

enum class AccessMode { Read, Write };
enum class AccessResult { Allowed, Fault };

/// Who is touching physical memory. The physical gate cares only about
/// the world attribute and granule ownership.
struct Requestor {
  enum class Kind { Host, Tmm, CVm } kind;
  CvmId cvm = 0;

  static Requestor host() { return {Kind::Host, 0}; }
  static Requestor tmm() { return {Kind::Tmm, 0}; }
  static Requestor cvmId(CvmId id) { return {Kind::CVm, id}; }
};

inline void putLe32(Bytes& out, u32 v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<u8>(v >> (8 * i)));
}

inline void putLe64(Bytes& out, u64 v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<u8>(v >> (8 * i)));
}

inline void putBytes(Bytes& out, const u8* p, std::size_t n) {
  out.insert(out.end(), p, p + n);
}

inline void putDigest(Bytes& out, const Digest& d) {
  putBytes(out, d.data(), d.size());
}

inline std::string toHex(const u8* p, std::size_t n) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  s.reserve(n * 2);
  for (std::size_t i = 0; i < n; ++i) {
    s.push_back(digits[p[i] >> 4]);
    s.push_back(digits[p[i] & 0xf]);
  }
  return s;
}

inline std::string toHex(const Bytes& b) { return toHex(b.data(), b.size()); }
inline std::string toHex(const Digest& d) { return toHex(d.data(), d.size()); }

inline Bytes fromHex(const std::string& s) {
  if (s.size() % 2 != 0) throw std::invalid_argument("odd hex length");
  auto nib = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw std::invalid_argument("bad hex digit");
  };
  Bytes out(s.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<u8>((nib(s[2 * i]) << 4) | nib(s[2 * i + 1]));
  return out;
}

}  // namespace tzmm
