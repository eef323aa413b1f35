#pragma once

#include <array>
#include <string>
#include <variant>
#include <vector>

#include "tzmm/types.hpp"

namespace tzmm {

// Scripted guest programs stand in for the guest OS. Deterministic; the
// pc only stalls on Wfi (until a vIRQ arrives) and on faults.

struct InsnComputeTicks {
  u64 ticks;
};
struct InsnMemWrite {
  Ipa ipa;
  Bytes bytes;
};
struct InsnMemRead {
  Ipa ipa;
  u64 len;
};
struct InsnTsiCall {
  u64 function;  // TsiFunction id
  std::array<u64, 7> args{};
  Bytes payload;  // extend value / token challenge, function dependent
};
struct InsnHostCall {
  std::array<u64, 7> args{};
};
struct InsnMmioRead {
  Ipa ipa;
};
struct InsnMmioWrite {
  Ipa ipa;
  u64 value;
};
struct VqDescRequest {
  Ipa buffer_ipa;
  u64 len;
  bool device_writes;  // device fills the buffer (read request)
};
struct InsnVirtioSubmit {
  u32 queue;
  std::vector<VqDescRequest> descriptors;
};
struct InsnWfi {};
struct InsnPsciCall {
  u32 function;  // PsciFunction id
  u64 target;    // target vCPU index for CPU_ON
};
struct InsnHalt {};

using GuestInsn =
    std::variant<InsnComputeTicks, InsnMemWrite, InsnMemRead, InsnTsiCall,
                 InsnHostCall, InsnMmioRead, InsnMmioWrite, InsnVirtioSubmit,
                 InsnWfi, InsnPsciCall, InsnHalt>;

struct GuestProgram {
  std::vector<GuestInsn> insns;
};

enum class PsciFunction : u32 {
  CpuOn = 0xC4000003,
  CpuOff = 0x84000002,
  SystemOff = 0x84000008,
};

enum class TsiFunction : u64 {
  Version = 0xC4000190,
  CvmConfig = 0xC4000191,
  MeasurementRead = 0xC4000192,
  MeasurementExtend = 0xC4000193,
  AttestationTokenInit = 0xC4000194,
  AttestationTokenContinue = 0xC4000195,
  HostCall = 0xC4000196,
};

constexpr std::size_t kTsiFunctionCount = 7;

}  // namespace tzmm
