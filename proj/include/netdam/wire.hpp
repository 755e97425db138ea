#pragma once

#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "netdam/types.hpp"

namespace netdam {

// ============================================================================
// Packet model and binary codec
// ============================================================================
//
// One datagram carries one packet. All header integers are big-endian.
//
// ┌───────┬─────┬───────┬───────┬────────┬──────────┬────────┬───────────┐
// │ MAGIC │ VER │ FLAGS │ DTYPE │ STATUS │ SEQUENCE │ OPCODE │ SEG_COUNT │
// │  4B   │ 1B  │  1B   │  1B   │   1B   │    8B    │   2B   │    1B     │
// ├───────┴─────┴───────┴───┬───┴────────┴───┬──────┴───┬────┴──────┬────┘
// │ SEGS_LEFT │ SEGMENTS    │ ADDRESS        │ LENGTH   │ [HASH]    │
// │    1B     │ 8B each     │    8B          │   4B     │ 8B iff    │
// │           │ ip4+port2+  │                │          │ flag bit3 │
// │           │ callback2   │                │          │           │
// ├───────────┴─────────────┴────────────────┴──────────┴───────────┤
// │ PAYLOAD_LEN (4B) │ PAYLOAD (0..8192B)                           │
// └──────────────────┴──────────────────────────────────────────────┘
//
// Fixed part is 36 bytes; total = 36 + 8*seg_count + 8*[hash] + payload_len,
// at most 8364 bytes, which fits a 9000-byte jumbo datagram with room to
// spare even with a full 16-segment stack.

inline constexpr uint8_t kMagic[4] = {'N', 'D', 'A', 'M'};
inline constexpr uint8_t kProtocolVersion = 1;
inline constexpr size_t kFixedHeaderBytes = 36;
inline constexpr size_t kSegmentBytes = 8;

// Flags byte. Bits 5..7 are reserved and must be zero.
namespace flags {
inline constexpr uint8_t kAck = 0x01;
inline constexpr uint8_t kReliable = 0x02;
inline constexpr uint8_t kOrdered = 0x04;
inline constexpr uint8_t kHashPresent = 0x08;
inline constexpr uint8_t kTargetPacket = 0x10;
inline constexpr uint8_t kReservedMask = 0xE0;
}  // namespace flags

// Element type codes for SIMD-style instructions.
namespace dtype {
inline constexpr uint8_t kByte = 0;
inline constexpr uint8_t kInt32 = 1;
inline constexpr uint8_t kFloat32 = 2;
}  // namespace dtype

enum class WireErrc {
  kBadMagic,
  kBadVersion,
  kTruncated,
  kReservedFlagSet,
  kLengthMismatch,
  kBadSegments,
  kBadDtype,
  kBadLength,        // length not a multiple of 4 for int32/float32
  kPayloadTooLarge,
  kHashFlagMismatch, // HASH_PRESENT flag disagrees with hash field
};

inline const char* to_string(WireErrc e) {
  switch (e) {
    case WireErrc::kBadMagic: return "bad_magic";
    case WireErrc::kBadVersion: return "bad_version";
    case WireErrc::kTruncated: return "truncated";
    case WireErrc::kReservedFlagSet: return "reserved_flag_set";
    case WireErrc::kLengthMismatch: return "length_mismatch";
    case WireErrc::kBadSegments: return "bad_segments";
    case WireErrc::kBadDtype: return "bad_dtype";
    case WireErrc::kBadLength: return "bad_length";
    case WireErrc::kPayloadTooLarge: return "payload_too_large";
    case WireErrc::kHashFlagMismatch: return "hash_flag_mismatch";
  }
  return "unknown";
}

class WireError : public std::runtime_error {
 public:
  WireError(WireErrc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  WireErrc code() const { return code_; }

 private:
  WireErrc code_;
};

/// One hop of a segment-routing stack: where to forward and which
/// instruction the receiving hop runs.
struct Segment {
  uint32_t ip = 0;
  uint16_t port = 0;
  uint16_t callback_opcode = 0;

  bool operator==(const Segment&) const = default;
  Endpoint endpoint() const { return Endpoint{ip, port}; }
};

/// Ordered hop list. segments_left counts hops not yet consumed; the next
/// hop is segments[size - segments_left]. advance() consumes one hop, so a
/// packet arriving somewhere with segments_left == 0 is at its final hop.
struct SegmentStack {
  uint8_t segments_left = 0;
  std::vector<Segment> segments;

  bool operator==(const SegmentStack&) const = default;

  bool complete() const { return segments_left == 0; }

  Segment advance() {
    if (segments_left == 0 || segments_left > segments.size())
      throw std::logic_error("segment stack exhausted");
    Segment next = segments[segments.size() - segments_left];
    --segments_left;
    return next;
  }
};

struct NetdamPacket {
  uint8_t version = kProtocolVersion;
  uint8_t flags = 0;
  uint8_t dtype = dtype::kByte;
  uint8_t status = 0;  // 0 in requests; completion code in ACKs
  uint64_t sequence = 0;
  uint16_t opcode = 0;
  SegmentStack sr;
  uint64_t address = 0;
  uint32_t length = 0;
  std::optional<uint64_t> block_hash;
  Bytes payload;

  bool operator==(const NetdamPacket&) const = default;

  bool is_ack() const { return flags & flags::kAck; }
  size_t encoded_size() const {
    return kFixedHeaderBytes + kSegmentBytes * sr.segments.size() +
           (block_hash ? 8 : 0) + payload.size();
  }
};

// --- big-endian primitives -------------------------------------------------

inline void put_u16(Bytes& out, uint16_t v) {
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v));
}
inline void put_u32(Bytes& out, uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(uint8_t(v >> s));
}
inline void put_u64(Bytes& out, uint64_t v) {
  for (int s = 56; s >= 0; s -= 8) out.push_back(uint8_t(v >> s));
}

inline uint16_t read_u16(const uint8_t* p) {
  return uint16_t(uint16_t(p[0]) << 8 | p[1]);
}
inline uint32_t read_u32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) |
         (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}
inline uint64_t read_u64(const uint8_t* p) {
  return (uint64_t(read_u32(p)) << 32) | read_u32(p + 4);
}

// --- invariant checks shared by encoder and decoder -------------------------

inline std::optional<WireErrc> check_invariants(const NetdamPacket& p) {
  if (p.flags & flags::kReservedMask) return WireErrc::kReservedFlagSet;
  if (p.payload.size() > kMaxPayload) return WireErrc::kPayloadTooLarge;
  if (p.sr.segments.size() > kMaxSegments) return WireErrc::kBadSegments;
  if (p.sr.segments_left > p.sr.segments.size()) return WireErrc::kBadSegments;
  if (p.dtype > dtype::kFloat32) return WireErrc::kBadDtype;
  if ((p.dtype == dtype::kInt32 || p.dtype == dtype::kFloat32) &&
      p.length % 4 != 0)
    return WireErrc::kBadLength;
  bool flagged = (p.flags & flags::kHashPresent) != 0;
  if (flagged != p.block_hash.has_value()) return WireErrc::kHashFlagMismatch;
  return std::nullopt;
}

/// Canonical serialization; throws WireError if the packet violates a
/// protocol invariant.
inline Bytes encode_packet(const NetdamPacket& p) {
  if (auto bad = check_invariants(p))
    throw WireError(*bad, std::string("encode: ") + to_string(*bad));
  Bytes out;
  out.reserve(p.encoded_size());
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  out.push_back(p.version);
  out.push_back(p.flags);
  out.push_back(p.dtype);
  out.push_back(p.status);
  put_u64(out, p.sequence);
  put_u16(out, p.opcode);
  out.push_back(uint8_t(p.sr.segments.size()));
  out.push_back(p.sr.segments_left);
  for (const Segment& s : p.sr.segments) {
    put_u32(out, s.ip);
    put_u16(out, s.port);
    put_u16(out, s.callback_opcode);
  }
  put_u64(out, p.address);
  put_u32(out, p.length);
  if (p.block_hash) put_u64(out, *p.block_hash);
  put_u32(out, uint32_t(p.payload.size()));
  out.insert(out.end(), p.payload.begin(), p.payload.end());
  return out;
}

/// Strict inverse of encode_packet: accepts exactly its image, rejects
/// everything else with a coded WireError. Total over arbitrary input.
inline NetdamPacket decode_packet(std::span<const uint8_t> in) {
  size_t pos = 0;
  auto need = [&](size_t n) {
    if (in.size() - pos < n)
      throw WireError(WireErrc::kTruncated, "decode: truncated");
  };
  need(8);
  if (std::memcmp(in.data(), kMagic, 4) != 0)
    throw WireError(WireErrc::kBadMagic, "decode: bad magic");
  NetdamPacket p;
  p.version = in[4];
  if (p.version != kProtocolVersion)
    throw WireError(WireErrc::kBadVersion,
                    "decode: unsupported version " + std::to_string(in[4]));
  p.flags = in[5];
  if (p.flags & flags::kReservedMask)
    throw WireError(WireErrc::kReservedFlagSet, "decode: reserved flag set");
  p.dtype = in[6];
  p.status = in[7];
  pos = 8;
  need(12);
  p.sequence = read_u64(&in[pos]);
  pos += 8;
  p.opcode = read_u16(&in[pos]);
  pos += 2;
  uint8_t seg_count = in[pos++];
  p.sr.segments_left = in[pos++];
  if (seg_count > kMaxSegments || p.sr.segments_left > seg_count)
    throw WireError(WireErrc::kBadSegments, "decode: bad segment counts");
  need(size_t(seg_count) * kSegmentBytes);
  p.sr.segments.reserve(seg_count);
  for (unsigned i = 0; i < seg_count; ++i) {
    Segment s;
    s.ip = read_u32(&in[pos]);
    s.port = read_u16(&in[pos + 4]);
    s.callback_opcode = read_u16(&in[pos + 6]);
    pos += kSegmentBytes;
    p.sr.segments.push_back(s);
  }
  need(12);
  p.address = read_u64(&in[pos]);
  pos += 8;
  p.length = read_u32(&in[pos]);
  pos += 4;
  if (p.flags & flags::kHashPresent) {
    need(8);
    p.block_hash = read_u64(&in[pos]);
    pos += 8;
  }
  need(4);
  uint32_t payload_len = read_u32(&in[pos]);
  pos += 4;
  if (payload_len > kMaxPayload)
    throw WireError(WireErrc::kPayloadTooLarge, "decode: payload too large");
  if (in.size() - pos != payload_len)
    throw WireError(WireErrc::kLengthMismatch,
                    "decode: payload_len disagrees with remaining bytes");
  p.payload.assign(in.begin() + pos, in.end());
  if (auto bad = check_invariants(p))
    throw WireError(*bad, std::string("decode: ") + to_string(*bad));
  return p;
}

// --- block hash --------------------------------------------------------------

/// FNV-1a 64-bit over a byte block. Deterministic and position-sensitive;
/// used as the compare-before-write guard for chain-final writes, not as a
/// cryptographic digest.
inline uint64_t compute_block_hash(std::span<const uint8_t> block) {
  uint64_t h = 14695981039346656037ULL;
  for (uint8_t x : block) {
    h ^= x;
    h *= 1099511628211ULL;
  }
  return h;
}

inline uint64_t compute_block_hash(const Bytes& block) {
  return compute_block_hash(std::span<const uint8_t>(block));
}

}  // namespace netdam
