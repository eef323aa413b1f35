#include <catch2/catch_amalgamated.hpp>

#include <openssl/sha.h>

#include <random>

#include "tzmm/measurement.hpp"

using namespace tzmm;

namespace {

// Independent re-implementation of the hash-chain encoding, written
// directly against the libcrypto one-shot API rather than the library's
// own wrappers: fold(cur, ev) = SHA-256(cur || kind || ipa-le64 || digest).
Digest oracleFold(const Digest& cur, const MeasureEvent& ev) {
  std::vector<unsigned char> buf;
  buf.insert(buf.end(), cur.begin(), cur.end());
  buf.push_back(static_cast<unsigned char>(ev.kind));
  for (int i = 0; i < 8; ++i)
    buf.push_back(static_cast<unsigned char>((ev.ipa >> (8 * i)) & 0xFF));
  buf.insert(buf.end(), ev.content.begin(), ev.content.end());
  Digest out{};
  SHA256(buf.data(), buf.size(), out.data());
  return out;
}

Digest randomDigest(std::mt19937_64& rng) {
  Digest d{};
  for (auto& b : d) b = static_cast<u8>(rng());
  return d;
}

}  // namespace

TEST_CASE("hash chain matches an independent fold, bit-exact") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    Digest initial = randomDigest(rng);
    MeasurementState st(initial);
    Digest expect = initial;
    int n = static_cast<int>(rng() % 20 + 1);
    for (int i = 0; i < n; ++i) {
      MeasureEvent ev;
      ev.kind = rng() % 2 == 0 ? MeasureKind::Data : MeasureKind::Tec;
      ev.ipa = rng() & ~u64{0xFFF};
      ev.content = randomDigest(rng);
      st.extend(ev);
      expect = oracleFold(expect, ev);
    }
    REQUIRE(st.current() == expect);
    REQUIRE(st.refold() == st.current());
  }
}

TEST_CASE("any single-field perturbation changes the digest") {
  std::mt19937_64 rng(12);
  Digest initial = randomDigest(rng);
  MeasureEvent ev;
  ev.kind = MeasureKind::Data;
  ev.ipa = 0x4000;
  ev.content = randomDigest(rng);
  Digest base = MeasurementState::extendOne(initial, ev);

  MeasureEvent k = ev;
  k.kind = MeasureKind::Tec;
  CHECK(MeasurementState::extendOne(initial, k) != base);

  MeasureEvent a = ev;
  a.ipa += kGranuleBytes;
  CHECK(MeasurementState::extendOne(initial, a) != base);

  MeasureEvent c = ev;
  c.content[0] ^= 1;
  CHECK(MeasurementState::extendOne(initial, c) != base);

  Digest other = initial;
  other[31] ^= 0x80;
  CHECK(MeasurementState::extendOne(other, ev) != base);
}

TEST_CASE("event order matters") {
  std::mt19937_64 rng(13);
  Digest initial = randomDigest(rng);
  MeasureEvent a{MeasureKind::Data, 0x1000, randomDigest(rng)};
  MeasureEvent b{MeasureKind::Data, 0x2000, randomDigest(rng)};
  MeasurementState ab(initial), ba(initial);
  ab.extend(a);
  ab.extend(b);
  ba.extend(b);
  ba.extend(a);
  CHECK(ab.current() != ba.current());
}

TEST_CASE("a sealed log rejects further extension") {
  MeasurementState st(Digest{});
  st.extend({MeasureKind::Data, 0, Digest{}});
  st.seal();
  CHECK(st.sealed());
  REQUIRE_THROWS_AS(st.extend({MeasureKind::Data, 0x1000, Digest{}}),
                    SealedError);
}
