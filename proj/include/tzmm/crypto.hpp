#pragma once

#include <memory>
#include <stdexcept>

#include <openssl/evp.h>
#include <openssl/hmac.h>
#include <openssl/kdf.h>
#include <openssl/sha.h>

#include "tzmm/types.hpp"

namespace tzmm::crypto {

struct CryptoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline Digest sha256(const u8* p, std::size_t n) {
  Digest d{};
  SHA256(p, n, d.data());
  return d;
}

inline Digest sha256(const Bytes& b) { return sha256(b.data(), b.size()); }

/// HKDF-SHA256 (extract+expand) with a domain-separation info label.
inline Bytes hkdf(const Bytes& ikm, const Bytes& salt, const Bytes& info,
                  std::size_t out_len) {
  std::unique_ptr<EVP_PKEY_CTX, decltype(&EVP_PKEY_CTX_free)> ctx(
      EVP_PKEY_CTX_new_id(EVP_PKEY_HKDF, nullptr), EVP_PKEY_CTX_free);
  if (!ctx || EVP_PKEY_derive_init(ctx.get()) <= 0 ||
      EVP_PKEY_CTX_set_hkdf_md(ctx.get(), EVP_sha256()) <= 0 ||
      EVP_PKEY_CTX_set1_hkdf_salt(ctx.get(), salt.data(),
                                  static_cast<int>(salt.size())) <= 0 ||
      EVP_PKEY_CTX_set1_hkdf_key(ctx.get(), ikm.data(),
                                 static_cast<int>(ikm.size())) <= 0 ||
      EVP_PKEY_CTX_add1_hkdf_info(ctx.get(), info.data(),
                                  static_cast<int>(info.size())) <= 0)
    throw CryptoError("hkdf setup failed");
  Bytes out(out_len);
  std::size_t len = out_len;
  if (EVP_PKEY_derive(ctx.get(), out.data(), &len) <= 0 || len != out_len)
    throw CryptoError("hkdf derive failed");
  return out;
}

inline Bytes hkdf(const Bytes& ikm, const Bytes& salt, const std::string& label,
                  std::size_t out_len) {
  return hkdf(ikm, salt, Bytes(label.begin(), label.end()), out_len);
}

inline Bytes hmacSha256(const Bytes& key, const u8* p, std::size_t n) {
  Bytes mac(32);
  unsigned int len = 0;
  if (!HMAC(EVP_sha256(), key.data(), static_cast<int>(key.size()), p, n,
            mac.data(), &len) ||
      len != 32)
    throw CryptoError("hmac failed");
  return mac;
}

/// Ed25519 key pair deterministically constructed from a 32-byte seed.
class SigningKey {
 public:
  explicit SigningKey(const Bytes& seed)
      : key_(EVP_PKEY_new_raw_private_key(EVP_PKEY_ED25519, nullptr,
                                          seed.data(), seed.size()),
             EVP_PKEY_free) {
    if (!key_ || seed.size() != 32) throw CryptoError("bad signing seed");
  }

  Bytes publicKey() const {
    std::size_t len = 32;
    Bytes pub(len);
    if (EVP_PKEY_get_raw_public_key(key_.get(), pub.data(), &len) <= 0)
      throw CryptoError("raw public key failed");
    pub.resize(len);
    return pub;
  }

  Bytes sign(const Bytes& msg) const {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(
        EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx ||
        EVP_DigestSignInit(ctx.get(), nullptr, nullptr, nullptr, key_.get()) <=
            0)
      throw CryptoError("sign init failed");
    std::size_t len = 64;
    Bytes sig(len);
    if (EVP_DigestSign(ctx.get(), sig.data(), &len, msg.data(), msg.size()) <=
        0)
      throw CryptoError("sign failed");
    sig.resize(len);
    return sig;
  }

 private:
  std::unique_ptr<EVP_PKEY, decltype(&EVP_PKEY_free)> key_;
};

inline bool verifySignature(const Bytes& public_key, const Bytes& msg,
                            const Bytes& sig) {
  std::unique_ptr<EVP_PKEY, decltype(&EVP_PKEY_free)> key(
      EVP_PKEY_new_raw_public_key(EVP_PKEY_ED25519, nullptr, public_key.data(),
                                  public_key.size()),
      EVP_PKEY_free);
  if (!key) return false;
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(
      EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx ||
      EVP_DigestVerifyInit(ctx.get(), nullptr, nullptr, nullptr, key.get()) <=
          0)
    return false;
  return EVP_DigestVerify(ctx.get(), sig.data(), sig.size(), msg.data(),
                          msg.size()) == 1;
}

struct GcmSealed {
  Bytes nonce;  // 12 bytes
  Bytes ciphertext;
  Bytes tag;  // 16 bytes
};

inline GcmSealed aes256GcmEncrypt(const Bytes& key, const Bytes& nonce,
                                  const Bytes& plaintext, const Bytes& aad) {
  if (key.size() != 32 || nonce.size() != 12)
    throw CryptoError("bad gcm key/nonce size");
  std::unique_ptr<EVP_CIPHER_CTX, decltype(&EVP_CIPHER_CTX_free)> ctx(
      EVP_CIPHER_CTX_new(), EVP_CIPHER_CTX_free);
  if (!ctx ||
      EVP_EncryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, key.data(),
                         nonce.data()) <= 0)
    throw CryptoError("gcm init failed");
  int len = 0;
  if (!aad.empty() &&
      EVP_EncryptUpdate(ctx.get(), nullptr, &len, aad.data(),
                        static_cast<int>(aad.size())) <= 0)
    throw CryptoError("gcm aad failed");
  GcmSealed out;
  out.nonce = nonce;
  out.ciphertext.resize(plaintext.size());
  if (EVP_EncryptUpdate(ctx.get(), out.ciphertext.data(), &len,
                        plaintext.data(),
                        static_cast<int>(plaintext.size())) <= 0)
    throw CryptoError("gcm encrypt failed");
  int fin = 0;
  if (EVP_EncryptFinal_ex(ctx.get(), out.ciphertext.data() + len, &fin) <= 0)
    throw CryptoError("gcm final failed");
  out.tag.resize(16);
  if (EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_GET_TAG, 16,
                          out.tag.data()) <= 0)
    throw CryptoError("gcm tag failed");
  return out;
}

/// Returns nullopt on tag failure.
inline std::optional<Bytes> aes256GcmDecrypt(const Bytes& key,
                                             const GcmSealed& sealed,
                                             const Bytes& aad) {
  std::unique_ptr<EVP_CIPHER_CTX, decltype(&EVP_CIPHER_CTX_free)> ctx(
      EVP_CIPHER_CTX_new(), EVP_CIPHER_CTX_free);
  if (!ctx ||
      EVP_DecryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, key.data(),
                         sealed.nonce.data()) <= 0)
    throw CryptoError("gcm init failed");
  int len = 0;
  if (!aad.empty() &&
      EVP_DecryptUpdate(ctx.get(), nullptr, &len, aad.data(),
                        static_cast<int>(aad.size())) <= 0)
    throw CryptoError("gcm aad failed");
  Bytes plain(sealed.ciphertext.size());
  if (EVP_DecryptUpdate(ctx.get(), plain.data(), &len, sealed.ciphertext.data(),
                        static_cast<int>(sealed.ciphertext.size())) <= 0)
    throw CryptoError("gcm decrypt failed");
  Bytes tag = sealed.tag;
  if (EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_TAG,
                          static_cast<int>(tag.size()), tag.data()) <= 0)
    throw CryptoError("gcm set tag failed");
  int fin = 0;
  if (EVP_DecryptFinal_ex(ctx.get(), plain.data() + len, &fin) <= 0)
    return std::nullopt;
  return plain;
}

/// AES-256-XTS over one 4 KiB page. The tweak is the IPA page index, so the
/// same plaintext on two different pages encrypts differently.
inline void xtsPage(const Bytes& key, u64 tweak, const u8* in, u8* out,
                    bool encrypt) {
  if (key.size() != 64) throw CryptoError("xts needs a 64-byte key");
  std::unique_ptr<EVP_CIPHER_CTX, decltype(&EVP_CIPHER_CTX_free)> ctx(
      EVP_CIPHER_CTX_new(), EVP_CIPHER_CTX_free);
  u8 iv[16] = {};
  for (int i = 0; i < 8; ++i) iv[i] = static_cast<u8>(tweak >> (8 * i));
  if (!ctx ||
      EVP_CipherInit_ex(ctx.get(), EVP_aes_256_xts(), nullptr, key.data(), iv,
                        encrypt ? 1 : 0) <= 0)
    throw CryptoError("xts init failed");
  int len = 0;
  if (EVP_CipherUpdate(ctx.get(), out, &len, in,
                       static_cast<int>(kGranuleBytes)) <= 0)
    throw CryptoError("xts update failed");
  int fin = 0;
  if (EVP_CipherFinal_ex(ctx.get(), out + len, &fin) <= 0)
    throw CryptoError("xts final failed");
}

}  // namespace tzmm::crypto
