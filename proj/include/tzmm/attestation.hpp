#pragma once

#include <memory>
#include <optional>
#include <string>

#include "tzmm/crypto.hpp"
#include "tzmm/types.hpp"

namespace tzmm {

/// Platform key hierarchy. The storage and attestation roots are pure
/// functions of (RoT seed, firmware digest); the AIK is fresh per boot but
/// always certified by the same root for a fixed firmware.
class KeyHierarchy {
 public:
  KeyHierarchy(const Bytes& rot_seed, const Digest& firmware_digest,
               u64 boot_id)
      : firmware_digest_(firmware_digest), boot_id_(boot_id) {
    Bytes fw(firmware_digest.begin(), firmware_digest.end());
    root_storage_key_ = crypto::hkdf(rot_seed, fw, "storage", 32);
    rak_seed_ = crypto::hkdf(rot_seed, fw, "attest", 32);
    rak_ = std::make_unique<crypto::SigningKey>(rak_seed_);

    Bytes info;
    const std::string label = "aik";
    putBytes(info, reinterpret_cast<const u8*>(label.data()), label.size());
    putLe64(info, boot_id);
    aik_ = std::make_unique<crypto::SigningKey>(
        crypto::hkdf(rak_seed_, fw, info, 32));

    aik_cert_ = rak_->sign(certPayload("AIK-CERT", aik_->publicKey()));
    rak_cert_ = rak_->sign(certPayload("RAK-CERT", rak_->publicKey()));
  }

  const Bytes& rootStorageKey() const { return root_storage_key_; }
  const Digest& firmwareDigest() const { return firmware_digest_; }
  u64 bootId() const { return boot_id_; }

  Bytes rakPublic() const { return rak_->publicKey(); }
  Bytes aikPublic() const { return aik_->publicKey(); }
  const Bytes& aikCert() const { return aik_cert_; }
  const Bytes& rakCert() const { return rak_cert_; }
  const crypto::SigningKey& aik() const { return *aik_; }

  static Bytes certPayload(const std::string& label, const Bytes& pub) {
    Bytes p;
    putBytes(p, reinterpret_cast<const u8*>(label.data()), label.size());
    putBytes(p, pub.data(), pub.size());
    return p;
  }

 private:
  Digest firmware_digest_;
  u64 boot_id_;
  Bytes root_storage_key_;
  Bytes rak_seed_;
  std::unique_ptr<crypto::SigningKey> rak_;
  std::unique_ptr<crypto::SigningKey> aik_;
  Bytes aik_cert_;
  Bytes rak_cert_;
};

/// Signed evidence for one cVM. Canonical byte layout: fixed field order,
/// every field length-prefixed (u32 LE), signature over everything that
/// precedes it.
struct AttestationToken {
  Bytes challenge;  // 64 bytes
  Digest cvm_measurement{};
  std::array<Digest, kRemSlots> rem{};
  Digest cvm_config_digest{};
  Digest firmware_digest{};
  Bytes platform_info;
  Bytes aik_public;
  Bytes aik_cert;
  Bytes rak_public;
  Bytes rak_cert;
  Bytes signature;  // by AIK

  Bytes signedPortion() const {
    Bytes out;
    auto field = [&out](const u8* p, std::size_t n) {
      putLe32(out, static_cast<u32>(n));
      putBytes(out, p, n);
    };
    field(challenge.data(), challenge.size());
    field(cvm_measurement.data(), cvm_measurement.size());
    for (const auto& r : rem) field(r.data(), r.size());
    field(cvm_config_digest.data(), cvm_config_digest.size());
    field(firmware_digest.data(), firmware_digest.size());
    field(platform_info.data(), platform_info.size());
    field(aik_public.data(), aik_public.size());
    field(aik_cert.data(), aik_cert.size());
    field(rak_public.data(), rak_public.size());
    field(rak_cert.data(), rak_cert.size());
    return out;
  }

  Bytes encode() const {
    Bytes out = signedPortion();
    putLe32(out, static_cast<u32>(signature.size()));
    putBytes(out, signature.data(), signature.size());
    return out;
  }

  static std::optional<AttestationToken> decode(const Bytes& raw) {
    AttestationToken t;
    std::size_t pos = 0;
    auto take = [&](Bytes& into) -> bool {
      if (pos + 4 > raw.size()) return false;
      u32 n = 0;
      for (int i = 0; i < 4; ++i) n |= static_cast<u32>(raw[pos + i]) << (8 * i);
      pos += 4;
      if (pos + n > raw.size()) return false;
      into.assign(raw.begin() + pos, raw.begin() + pos + n);
      pos += n;
      return true;
    };
    auto takeDigest = [&](Digest& d) -> bool {
      Bytes b;
      if (!take(b) || b.size() != d.size()) return false;
      std::copy(b.begin(), b.end(), d.begin());
      return true;
    };
    if (!take(t.challenge)) return std::nullopt;
    if (!takeDigest(t.cvm_measurement)) return std::nullopt;
    for (auto& r : t.rem)
      if (!takeDigest(r)) return std::nullopt;
    if (!takeDigest(t.cvm_config_digest)) return std::nullopt;
    if (!takeDigest(t.firmware_digest)) return std::nullopt;
    if (!take(t.platform_info)) return std::nullopt;
    if (!take(t.aik_public)) return std::nullopt;
    if (!take(t.aik_cert)) return std::nullopt;
    if (!take(t.rak_public)) return std::nullopt;
    if (!take(t.rak_cert)) return std::nullopt;
    if (!take(t.signature)) return std::nullopt;
    if (pos != raw.size()) return std::nullopt;
    return t;
  }
};

enum class VerifyResult {
  Accept,
  RejectEncoding,
  RejectChain,
  RejectSignature,
  RejectMeasurement,
  RejectChallenge,
};

inline VerifyResult verifyToken(const Bytes& raw, const Bytes& trusted_rak_public,
                                const std::optional<Digest>& expected_measurement,
                                const std::optional<Bytes>& expected_challenge) {
  auto t = AttestationToken::decode(raw);
  if (!t) return VerifyResult::RejectEncoding;
  if (t->rak_public != trusted_rak_public) return VerifyResult::RejectChain;
  if (!crypto::verifySignature(
          t->rak_public, KeyHierarchy::certPayload("RAK-CERT", t->rak_public),
          t->rak_cert))
    return VerifyResult::RejectChain;
  if (!crypto::verifySignature(
          t->rak_public, KeyHierarchy::certPayload("AIK-CERT", t->aik_public),
          t->aik_cert))
    return VerifyResult::RejectChain;
  if (!crypto::verifySignature(t->aik_public, t->signedPortion(), t->signature))
    return VerifyResult::RejectSignature;
  if (expected_measurement) {
    if (!std::equal(expected_measurement->begin(), expected_measurement->end(),
                    t->cvm_measurement.begin()))
      return VerifyResult::RejectMeasurement;
  }
  if (expected_challenge && t->challenge != *expected_challenge)
    return VerifyResult::RejectChallenge;
  return VerifyResult::Accept;
}

inline const char* verifyResultName(VerifyResult r) {
  switch (r) {
    case VerifyResult::Accept: return "accept";
    case VerifyResult::RejectEncoding: return "reject:encoding";
    case VerifyResult::RejectChain: return "reject:chain";
    case VerifyResult::RejectSignature: return "reject:signature";
    case VerifyResult::RejectMeasurement: return "reject:measurement";
    case VerifyResult::RejectChallenge: return "reject:challenge";
  }
  return "reject:unknown";
}

// ---- policy-bound sealed storage ----

struct SealPolicy {
  std::optional<Digest> required_measurement;
  Digest required_firmware_digest{};

  Bytes encode() const {
    Bytes out;
    out.push_back(required_measurement ? 1 : 0);
    if (required_measurement) putDigest(out, *required_measurement);
    putDigest(out, required_firmware_digest);
    return out;
  }
};

struct SealedBlob {
  SealPolicy policy;
  Bytes nonce;
  Bytes ciphertext;
  Bytes tag;
};

enum class UnsealError { PolicyMismatch, TagFailure };

inline SealedBlob seal(const KeyHierarchy& keys, const Bytes& plaintext,
                       const SealPolicy& policy, const Bytes& nonce12) {
  Bytes key = crypto::hkdf(keys.rootStorageKey(), policy.encode(), "seal", 32);
  auto enc = crypto::aes256GcmEncrypt(key, nonce12, plaintext, policy.encode());
  return SealedBlob{policy, enc.nonce, enc.ciphertext, enc.tag};
}

inline std::optional<Bytes> unseal(const KeyHierarchy& keys,
                                   const SealedBlob& blob,
                                   const Digest& current_measurement,
                                   UnsealError& err) {
  if (blob.policy.required_firmware_digest != keys.firmwareDigest()) {
    err = UnsealError::PolicyMismatch;
    return std::nullopt;
  }
  if (blob.policy.required_measurement &&
      *blob.policy.required_measurement != current_measurement) {
    err = UnsealError::PolicyMismatch;
    return std::nullopt;
  }
  Bytes key =
      crypto::hkdf(keys.rootStorageKey(), blob.policy.encode(), "seal", 32);
  auto plain = crypto::aes256GcmDecrypt(
      key, {blob.nonce, blob.ciphertext, blob.tag}, blob.policy.encode());
  if (!plain) {
    err = UnsealError::TagFailure;
    return std::nullopt;
  }
  return plain;
}

}  // namespace tzmm
