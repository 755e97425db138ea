#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "netdam/types.hpp"
#include "netdam/wire.hpp"

namespace netdam {

class Device;

// ============================================================================
// Opcode space
// ============================================================================
// 0x0000-0x00FF is reserved for base instructions; extensions register at
// 0x0100-0xFFFF. The collective steps live in the extension range and are
// registered through the same mechanism user extensions use.

namespace op {
inline constexpr uint16_t kRead = 0x0001;
inline constexpr uint16_t kWrite = 0x0002;
inline constexpr uint16_t kCas = 0x0003;
inline constexpr uint16_t kMemcopy = 0x0004;
inline constexpr uint16_t kSimdAdd = 0x0010;
inline constexpr uint16_t kSimdSub = 0x0011;
inline constexpr uint16_t kSimdMul = 0x0012;
inline constexpr uint16_t kSimdXor = 0x0013;
inline constexpr uint16_t kSimdMin = 0x0014;
inline constexpr uint16_t kSimdMax = 0x0015;
inline constexpr uint16_t kBlockHash = 0x0020;
inline constexpr uint16_t kReduceScatterStep = 0x0100;
inline constexpr uint16_t kAllGatherStep = 0x0101;
inline constexpr uint16_t kCollectiveStatus = 0x0102;
inline constexpr uint16_t kExtensionBase = 0x0100;
}  // namespace op

/// ACK status byte values.
enum class Status : uint8_t {
  kOk = 0,
  kUnsupported = 1,
  kOutOfBounds = 2,
  kBadOperands = 3,
  kAclDenied = 4,
  kHashMismatch = 5,
  kQueueFull = 6,
};

inline const char* to_string(Status s) {
  switch (s) {
    case Status::kOk: return "OK";
    case Status::kUnsupported: return "UNSUPPORTED";
    case Status::kOutOfBounds: return "OUT_OF_BOUNDS";
    case Status::kBadOperands: return "BAD_OPERANDS";
    case Status::kAclDenied: return "ACL_DENIED";
    case Status::kHashMismatch: return "HASH_MISMATCH";
    case Status::kQueueFull: return "QUEUE_FULL";
  }
  return "UNKNOWN";
}

/// A packet the device wants sent, together with its destination.
struct OutboundPacket {
  Endpoint dest;
  NetdamPacket packet;
};

/// Per-execution context handed to handlers.
struct ExecContext {
  Endpoint source;         // UDP source of the request datagram
  bool via_queue = false;  // true when drained from the request queue
};

using OpcodeHandler = std::function<std::vector<OutboundPacket>(
    Device&, const NetdamPacket&, const ExecContext&)>;

struct OpcodeEntry {
  uint16_t opcode = 0;
  std::string name;
  OpcodeHandler handler;
  bool mutates_memory = false;
  bool idempotent = false;
};

enum class IsaErrc { kDuplicateOpcode, kReservedRange };

class IsaError : public std::runtime_error {
 public:
  IsaError(IsaErrc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  IsaErrc code() const { return code_; }

 private:
  IsaErrc code_;
};

/// Opcode table. Built once at device start; lookups afterwards are const
/// and safe from any context.
class OpcodeRegistry {
 public:
  /// Registers a user/extension instruction. Extension opcodes must be
  /// >= 0x0100 and unused.
  void register_extension(OpcodeEntry entry) {
    if (entry.opcode < op::kExtensionBase)
      throw IsaError(IsaErrc::kReservedRange,
                     "opcode below 0x0100 is reserved for base instructions");
    insert(std::move(entry));
  }

  /// Registers a base instruction (device startup only).
  void register_builtin(OpcodeEntry entry) { insert(std::move(entry)); }

  const OpcodeEntry* find(uint16_t opcode) const {
    auto it = entries_.find(opcode);
    return it == entries_.end() ? nullptr : &it->second;
  }

  const std::map<uint16_t, OpcodeEntry>& entries() const { return entries_; }

 private:
  void insert(OpcodeEntry entry) {
    auto [it, inserted] = entries_.emplace(entry.opcode, std::move(entry));
    if (!inserted)
      throw IsaError(IsaErrc::kDuplicateOpcode, "opcode already registered");
  }

  std::map<uint16_t, OpcodeEntry> entries_;
};

// ============================================================================
// Request validation
// ============================================================================

enum class ValidateResult { kOk, kOutOfBounds, kBadDtype, kBadOperands };

inline bool in_bounds(uint64_t addr, uint64_t len, uint64_t mem_size) {
  return addr <= mem_size && len <= mem_size - addr;
}

/// Checks operand rules for a packet against its opcode before dispatch.
/// Guarantees that a passing operation touches only [0, mem_size).
inline ValidateResult validate(const NetdamPacket& p, const OpcodeEntry& entry,
                               uint64_t mem_size) {
  const uint64_t len = p.length;
  const size_t paylen = p.payload.size();
  auto numeric = [&] {
    return p.dtype == dtype::kInt32 || p.dtype == dtype::kFloat32;
  };
  if (!in_bounds(p.address, len, mem_size)) return ValidateResult::kOutOfBounds;

  switch (entry.opcode) {
    case op::kRead:
      if (len > kMaxPayload) return ValidateResult::kBadOperands;
      break;
    case op::kWrite:
      if (paylen != len) return ValidateResult::kBadOperands;
      break;
    case op::kCas:
      if (len != 8) return ValidateResult::kBadOperands;
      if (paylen != 16) return ValidateResult::kBadOperands;
      break;
    case op::kMemcopy: {
      if (paylen < 8) return ValidateResult::kBadOperands;
      uint64_t dst = read_u64(p.payload.data());
      if (!in_bounds(dst, len, mem_size)) return ValidateResult::kOutOfBounds;
      break;
    }
    case op::kSimdAdd:
    case op::kSimdSub:
    case op::kSimdMul:
    case op::kSimdMin:
    case op::kSimdMax:
      if (!numeric()) return ValidateResult::kBadDtype;
      [[fallthrough]];
    case op::kSimdXor:
      if (paylen != len) return ValidateResult::kBadOperands;
      if (len > kMaxPayload) return ValidateResult::kBadOperands;
      break;
    case op::kBlockHash:
      if (len > kMaxPayload) return ValidateResult::kBadOperands;
      break;
    case op::kReduceScatterStep:
      if (p.dtype != dtype::kFloat32) return ValidateResult::kBadDtype;
      if (paylen != len || len > kMaxPayload) return ValidateResult::kBadOperands;
      break;
    case op::kAllGatherStep:
      if (paylen != len || len > kMaxPayload) return ValidateResult::kBadOperands;
      break;
    case op::kCollectiveStatus:
      if (paylen != 0) return ValidateResult::kBadOperands;
      break;
    default:
      break;  // extension handlers do their own operand checks
  }
  return ValidateResult::kOk;
}

/// Maps a validation failure onto the ACK status byte. There is no
/// dtype-specific completion code, so kBadDtype reports BAD_OPERANDS.
inline Status to_status(ValidateResult v) {
  switch (v) {
    case ValidateResult::kOk: return Status::kOk;
    case ValidateResult::kOutOfBounds: return Status::kOutOfBounds;
    case ValidateResult::kBadDtype: return Status::kBadOperands;
    case ValidateResult::kBadOperands: return Status::kBadOperands;
  }
  return Status::kBadOperands;
}

}  // namespace netdam
