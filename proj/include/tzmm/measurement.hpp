#pragma once

#include <stdexcept>
#include <vector>

#include "tzmm/crypto.hpp"
#include "tzmm/types.hpp"

namespace tzmm {

enum class MeasureKind : u8 { Data = 1, Tec = 2 };

struct MeasureEvent {
  MeasureKind kind;
  u64 ipa;  // page IPA for Data, context index for Tec
  Digest content;
};

struct SealedError : std::runtime_error {
  SealedError() : std::runtime_error("measurement log is sealed") {}
};

/// Hash-chain measurement: current = fold of the log from the initial
/// params digest. Extend order matters; the log is append-only until the
/// cVM activates.
class MeasurementState {
 public:
  MeasurementState() = default;
  explicit MeasurementState(const Digest& initial)
      : current_(initial), initial_(initial) {}

  static Digest extendOne(const Digest& current, const MeasureEvent& ev) {
    Bytes buf;
    putDigest(buf, current);
    buf.push_back(static_cast<u8>(ev.kind));
    putLe64(buf, ev.ipa);
    putDigest(buf, ev.content);
    return crypto::sha256(buf);
  }

  void extend(const MeasureEvent& ev) {
    if (sealed_) throw SealedError();
    current_ = extendOne(current_, ev);
    log_.push_back(ev);
  }

  void seal() { sealed_ = true; }
  bool sealed() const { return sealed_; }

  const Digest& current() const { return current_; }
  const Digest& initial() const { return initial_; }
  const std::vector<MeasureEvent>& log() const { return log_; }

  /// Independent re-fold of the whole log; equals current() at all times.
  Digest refold() const {
    Digest d = initial_;
    for (const auto& ev : log_) d = extendOne(d, ev);
    return d;
  }

 private:
  Digest current_{};
  Digest initial_{};
  std::vector<MeasureEvent> log_;
  bool sealed_ = false;
};

}  // namespace tzmm
