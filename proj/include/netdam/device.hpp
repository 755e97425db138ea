#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "netdam/addressing.hpp"
#include "netdam/isa.hpp"
#include "netdam/types.hpp"
#include "netdam/wire.hpp"

namespace netdam {

struct DeviceConfig {
  uint64_t mem_size = 64ull * 1024 * 1024;
  size_t queue_depth = 1024;
  bool acl_enabled = false;
  AclTable acl;
};

struct OpStats {
  uint64_t count = 0;
  uint64_t errors = 0;
  uint64_t total_ns = 0;
  uint64_t max_ns = 0;
};

struct DeviceStats {
  uint64_t packets_in = 0;
  uint64_t packets_out = 0;
  uint64_t acks_absorbed = 0;
  uint64_t decode_errors = 0;
  uint64_t acl_denied = 0;
  uint64_t unsupported = 0;
  uint64_t hash_mismatches = 0;
  uint64_t queue_full_drops = 0;
  uint64_t writes_applied = 0;  // ops that mutated the memory array
  std::map<std::string, OpStats> per_op;

  nlohmann::json to_json() const {
    nlohmann::json ops = nlohmann::json::object();
    for (const auto& [name, s] : per_op) {
      ops[name] = {{"count", s.count},
                   {"errors", s.errors},
                   {"total_ns", s.total_ns},
                   {"max_ns", s.max_ns}};
    }
    return {{"packets_in", packets_in},
            {"packets_out", packets_out},
            {"acks_absorbed", acks_absorbed},
            {"decode_errors", decode_errors},
            {"acl_denied", acl_denied},
            {"unsupported", unsupported},
            {"hash_mismatches", hash_mismatches},
            {"queue_full_drops", queue_full_drops},
            {"writes_applied", writes_applied},
            {"per_op", ops}};
  }
};

namespace detail {

inline float nan_propagating_min(float a, float b) {
  if (std::isnan(a) || std::isnan(b))
    return std::numeric_limits<float>::quiet_NaN();
  return a < b ? a : b;
}
inline float nan_propagating_max(float a, float b) {
  if (std::isnan(a) || std::isnan(b))
    return std::numeric_limits<float>::quiet_NaN();
  return a > b ? a : b;
}

// int32 arithmetic wraps (two's complement); elements are little-endian in
// memory and payload.
template <typename F>
void apply_i32(uint8_t* mem, const uint8_t* pay, size_t len, F f) {
  for (size_t i = 0; i < len; i += 4) {
    uint32_t a, b;
    std::memcpy(&a, mem + i, 4);
    std::memcpy(&b, pay + i, 4);
    uint32_t r = f(a, b);
    std::memcpy(mem + i, &r, 4);
  }
}

template <typename F>
void apply_f32(uint8_t* mem, const uint8_t* pay, size_t len, F f) {
  for (size_t i = 0; i < len; i += 4) {
    float a, b;
    std::memcpy(&a, mem + i, 4);
    std::memcpy(&b, pay + i, 4);
    float r = f(a, b);
    std::memcpy(mem + i, &r, 4);
  }
}

// payload := payload + memory, elementwise float32
inline void accumulate_f32(uint8_t* pay, const uint8_t* mem, size_t len) {
  for (size_t i = 0; i < len; i += 4) {
    float a, b;
    std::memcpy(&a, pay + i, 4);
    std::memcpy(&b, mem + i, 4);
    float r = a + b;
    std::memcpy(pay + i, &r, 4);
  }
}

}  // namespace detail

// ============================================================================
// Device engine
// ============================================================================
// Owns a byte-addressed memory region and executes decoded packets one at a
// time. Packets may arrive from any transport; the engine is confined to the
// single context that drives it (one pipeline per device). All failures turn
// into ACKs with a nonzero status byte; handlers never throw across the
// pipeline boundary.

class Device {
 public:
  Device(Endpoint self, DeviceConfig config = {})
      : self_(self), config_(std::move(config)), memory_(config_.mem_size, 0) {
    install_base_ops();
    install_collective_ops();
  }

  const Endpoint& endpoint() const { return self_; }
  uint64_t mem_size() const { return memory_.size(); }
  std::span<const uint8_t> memory() const { return memory_; }
  const DeviceStats& stats() const { return stats_; }
  const OpcodeRegistry& registry() const { return registry_; }
  size_t request_queue_depth() const { return request_q_.size(); }
  size_t complete_queue_depth() const { return complete_q_.size(); }

  void register_extension(OpcodeEntry entry) {
    registry_.register_extension(std::move(entry));
  }

  /// Test hook: raw memory poke without going through the wire.
  void poke(uint64_t addr, std::span<const uint8_t> data) {
    if (!in_bounds(addr, data.size(), memory_.size()))
      throw std::out_of_range("poke out of bounds");
    std::memcpy(memory_.data() + addr, data.data(), data.size());
  }

  /// Entry point for a raw datagram: decode, execute, then drain any
  /// queue-submitted work. Undecodable frames are counted and dropped.
  std::vector<OutboundPacket> on_datagram(const Endpoint& source,
                                          std::span<const uint8_t> frame) {
    std::vector<OutboundPacket> out;
    try {
      NetdamPacket p = decode_packet(frame);
      out = execute(source, p);
    } catch (const WireError&) {
      ++stats_.decode_errors;
    }
    auto queued = drain_request_queue();
    out.insert(out.end(), queued.begin(), queued.end());
    stats_.packets_out += out.size();
    return out;
  }

  /// Executes one decoded packet: ACL check, opcode lookup, operand
  /// validation, then dispatch. Atomic with respect to device memory.
  std::vector<OutboundPacket> execute(const Endpoint& source,
                                      const NetdamPacket& p) {
    ++stats_.packets_in;
    ExecContext ctx{source, false};
    return execute_with_context(p, ctx);
  }

  /// Pops and executes up to `limit` queued requests. ACK outputs go to the
  /// complete queue; forwarded packets are returned for network send.
  std::vector<OutboundPacket> drain_request_queue(size_t limit = SIZE_MAX) {
    std::vector<OutboundPacket> network_out;
    for (size_t i = 0; i < limit && !request_q_.empty(); ++i) {
      Bytes frame = std::move(request_q_.front());
      request_q_.pop_front();
      try {
        NetdamPacket p = decode_packet(frame);
        ExecContext ctx{self_, true};
        for (auto& o : execute_with_context(p, ctx)) {
          if (o.packet.is_ack()) {
            if (complete_q_.size() >= config_.queue_depth) {
              ++stats_.queue_full_drops;
            } else {
              complete_q_.push_back(encode_packet(o.packet));
            }
          } else {
            network_out.push_back(std::move(o));
          }
        }
      } catch (const WireError&) {
        ++stats_.decode_errors;
      }
    }
    return network_out;
  }

  nlohmann::json stats_json() const {
    auto j = stats_.to_json();
    j["endpoint"] = self_.to_string();
    j["mem_size"] = memory_.size();
    return j;
  }

 private:
  std::vector<OutboundPacket> execute_with_context(const NetdamPacket& p,
                                                   const ExecContext& ctx) {
    if (p.is_ack()) {
      ++stats_.acks_absorbed;
      return {};
    }
    // Network ingress ACL; queue-local submissions are trusted.
    if (config_.acl_enabled && !ctx.via_queue &&
        !config_.acl.check(ctx.source.ip, p.opcode, p.address, p.length)) {
      ++stats_.acl_denied;
      return {make_ack(p, ctx, Status::kAclDenied)};
    }
    const OpcodeEntry* entry = registry_.find(p.opcode);
    if (!entry) {
      ++stats_.unsupported;
      return {make_ack(p, ctx, Status::kUnsupported)};
    }
    ValidateResult v = validate(p, *entry, memory_.size());
    auto t0 = std::chrono::steady_clock::now();
    std::vector<OutboundPacket> out;
    if (v != ValidateResult::kOk) {
      out.push_back(make_ack(p, ctx, to_status(v)));
      record_op(entry->name, t0, true);
      return out;
    }
    out = entry->handler(*this, p, ctx);
    record_op(entry->name, t0, false);
    return out;
  }

  void record_op(const std::string& name,
                 std::chrono::steady_clock::time_point t0, bool error) {
    auto ns = uint64_t(std::chrono::duration_cast<std::chrono::nanoseconds>(
                           std::chrono::steady_clock::now() - t0)
                           .count());
    OpStats& s = stats_.per_op[name];
    ++s.count;
    if (error) ++s.errors;
    s.total_ns += ns;
    s.max_ns = std::max(s.max_ns, ns);
  }

  OutboundPacket make_ack(const NetdamPacket& req, const ExecContext& ctx,
                          Status status, Bytes payload = {}) const {
    NetdamPacket ack;
    ack.flags = flags::kAck;
    ack.dtype = req.dtype;
    ack.status = uint8_t(status);
    ack.sequence = req.sequence;
    ack.opcode = req.opcode;
    ack.address = req.address;
    ack.length = req.length;
    ack.payload = std::move(payload);
    return OutboundPacket{ctx.source, std::move(ack)};
  }

  /// Consumes the next SR hop: rewrites the opcode to the hop's callback and
  /// addresses the packet to the hop's endpoint.
  static OutboundPacket forward_chain(NetdamPacket p) {
    Segment next = p.sr.advance();
    p.opcode = next.callback_opcode;
    return OutboundPacket{next.endpoint(), std::move(p)};
  }

  // --- base instruction handlers -------------------------------------------

  std::vector<OutboundPacket> op_read(const NetdamPacket& p,
                                      const ExecContext& ctx) {
    if (p.address == kCompleteQueueAddr && p.address < memory_.size()) {
      Bytes frame;
      if (!complete_q_.empty()) {
        frame = std::move(complete_q_.front());
        complete_q_.pop_front();
      }
      return {make_ack(p, ctx, Status::kOk, std::move(frame))};
    }
    Bytes data(memory_.begin() + p.address,
               memory_.begin() + p.address + p.length);
    return {make_ack(p, ctx, Status::kOk, std::move(data))};
  }

  std::vector<OutboundPacket> op_write(const NetdamPacket& p,
                                       const ExecContext& ctx) {
    if (p.address == kRequestQueueAddr && !p.payload.empty()) {
      if (request_q_.size() >= config_.queue_depth) {
        ++stats_.queue_full_drops;
        return {make_ack(p, ctx, Status::kQueueFull)};
      }
      request_q_.push_back(p.payload);
      return {make_ack(p, ctx, Status::kOk)};
    }
    std::memcpy(memory_.data() + p.address, p.payload.data(),
                p.payload.size());
    ++stats_.writes_applied;
    return {make_ack(p, ctx, Status::kOk)};
  }

  std::vector<OutboundPacket> op_cas(const NetdamPacket& p,
                                     const ExecContext& ctx) {
    uint64_t old_value = read_u64(memory_.data() + p.address);
    uint64_t compare = read_u64(p.payload.data());
    uint64_t swap = read_u64(p.payload.data() + 8);
    if (old_value == compare) {
      Bytes word;
      put_u64(word, swap);
      std::memcpy(memory_.data() + p.address, word.data(), 8);
      ++stats_.writes_applied;
    }
    Bytes reply;
    put_u64(reply, old_value);
    return {make_ack(p, ctx, Status::kOk, std::move(reply))};
  }

  std::vector<OutboundPacket> op_memcopy(const NetdamPacket& p,
                                         const ExecContext& ctx) {
    uint64_t dst = read_u64(p.payload.data());
    // copy-from-snapshot semantics: overlap-safe
    Bytes snapshot(memory_.begin() + p.address,
                   memory_.begin() + p.address + p.length);
    std::memcpy(memory_.data() + dst, snapshot.data(), snapshot.size());
    if (p.length > 0) ++stats_.writes_applied;
    return {make_ack(p, ctx, Status::kOk)};
  }

  std::vector<OutboundPacket> op_simd(const NetdamPacket& p,
                                      const ExecContext& ctx) {
    // Operate on a scratch copy of the memory operand, then either store it
    // back (accumulate mode) or ship it as the payload (TARGET_PACKET mode).
    Bytes result(memory_.begin() + p.address,
                 memory_.begin() + p.address + p.length);
    apply_simd(p.opcode, p.dtype, result.data(), p.payload.data(), p.length);
    if (p.flags & flags::kTargetPacket) {
      NetdamPacket chained = p;
      chained.payload = std::move(result);
      if (!chained.sr.complete()) return {forward_chain(std::move(chained))};
      Bytes payload = std::move(chained.payload);
      return {make_ack(p, ctx, Status::kOk, std::move(payload))};
    }
    std::memcpy(memory_.data() + p.address, result.data(), result.size());
    if (p.length > 0) ++stats_.writes_applied;
    return {make_ack(p, ctx, Status::kOk)};
  }

  static void apply_simd(uint16_t opcode, uint8_t dt, uint8_t* mem,
                         const uint8_t* pay, size_t len) {
    using namespace detail;
    switch (opcode) {
      case op::kSimdXor:
        for (size_t i = 0; i < len; ++i) mem[i] ^= pay[i];
        return;
      case op::kSimdAdd:
        if (dt == dtype::kInt32)
          apply_i32(mem, pay, len, [](uint32_t a, uint32_t b) { return a + b; });
        else
          apply_f32(mem, pay, len, [](float a, float b) { return a + b; });
        return;
      case op::kSimdSub:
        if (dt == dtype::kInt32)
          apply_i32(mem, pay, len, [](uint32_t a, uint32_t b) { return a - b; });
        else
          apply_f32(mem, pay, len, [](float a, float b) { return a - b; });
        return;
      case op::kSimdMul:
        if (dt == dtype::kInt32)
          apply_i32(mem, pay, len, [](uint32_t a, uint32_t b) { return a * b; });
        else
          apply_f32(mem, pay, len, [](float a, float b) { return a * b; });
        return;
      case op::kSimdMin:
        if (dt == dtype::kInt32)
          apply_i32(mem, pay, len, [](uint32_t a, uint32_t b) {
            return uint32_t(std::min(int32_t(a), int32_t(b)));
          });
        else
          apply_f32(mem, pay, len, nan_propagating_min);
        return;
      case op::kSimdMax:
        if (dt == dtype::kInt32)
          apply_i32(mem, pay, len, [](uint32_t a, uint32_t b) {
            return uint32_t(std::max(int32_t(a), int32_t(b)));
          });
        else
          apply_f32(mem, pay, len, nan_propagating_max);
        return;
      default:
        return;
    }
  }

  std::vector<OutboundPacket> op_block_hash(const NetdamPacket& p,
                                            const ExecContext& ctx) {
    uint64_t h = compute_block_hash(
        std::span<const uint8_t>(memory_.data() + p.address, p.length));
    Bytes reply;
    put_u64(reply, h);
    return {make_ack(p, ctx, Status::kOk, std::move(reply))};
  }

  // --- collective steps ------------------------------------------------------

  // Interim hops fold their memory block into the packet payload and forward;
  // no local memory writes. The final hop adds its own block into the payload
  // and stores the result, guarded by the block hash carried in the packet:
  // a matching hash certifies the block is still the original input, so the
  // write happens at most once no matter how often the chain is replayed.
  std::vector<OutboundPacket> op_reduce_scatter_step(const NetdamPacket& p,
                                                     const ExecContext& ctx) {
    if (!p.sr.complete()) {
      NetdamPacket chained = p;
      detail::accumulate_f32(chained.payload.data(),
                             memory_.data() + p.address, p.length);
      return {forward_chain(std::move(chained))};
    }
    if (!p.block_hash)
      return {make_ack(p, ctx, Status::kBadOperands)};
    uint64_t h = compute_block_hash(
        std::span<const uint8_t>(memory_.data() + p.address, p.length));
    if (h != *p.block_hash) {
      ++stats_.hash_mismatches;
      return {make_ack(p, ctx, Status::kHashMismatch)};
    }
    detail::apply_f32(memory_.data() + p.address, p.payload.data(), p.length,
                      [](float a, float b) { return a + b; });
    if (p.length > 0) ++stats_.writes_applied;
    step_table_[p.address] = StepRecord{p.length, p.sequence};
    return {make_ack(p, ctx, Status::kOk)};
  }

  // Every hop stores the payload; replays rewrite the same bytes.
  std::vector<OutboundPacket> op_allgather_step(const NetdamPacket& p,
                                                const ExecContext& ctx) {
    std::memcpy(memory_.data() + p.address, p.payload.data(),
                p.payload.size());
    if (p.length > 0) ++stats_.writes_applied;
    if (!p.sr.complete()) {
      return {forward_chain(p)};
    }
    step_table_[p.address] = StepRecord{p.length, p.sequence};
    return {make_ack(p, ctx, Status::kOk)};
  }

  // Read-only completion probe: reports the sequence of the last collective
  // step that wrote (address, length), 0 if none. Lets a controller detect
  // chain completion idempotently even when the guarded write did not change
  // the block content.
  std::vector<OutboundPacket> op_collective_status(const NetdamPacket& p,
                                                   const ExecContext& ctx) {
    uint64_t seq = 0;
    auto it = step_table_.find(p.address);
    if (it != step_table_.end() && it->second.length == p.length)
      seq = it->second.sequence;
    Bytes reply;
    put_u64(reply, seq);
    return {make_ack(p, ctx, Status::kOk, std::move(reply))};
  }

  void install_base_ops() {
    auto add = [&](uint16_t code, const char* name, bool mutates,
                   bool idempotent,
                   std::vector<OutboundPacket> (Device::*fn)(
                       const NetdamPacket&, const ExecContext&)) {
      registry_.register_builtin(OpcodeEntry{
          code, name,
          [fn](Device& d, const NetdamPacket& p, const ExecContext& ctx) {
            return (d.*fn)(p, ctx);
          },
          mutates, idempotent});
    };
    add(op::kRead, "READ", false, true, &Device::op_read);
    add(op::kWrite, "WRITE", true, true, &Device::op_write);
    add(op::kCas, "CAS", true, true, &Device::op_cas);
    add(op::kMemcopy, "MEMCOPY", true, false, &Device::op_memcopy);
    add(op::kSimdAdd, "SIMD_ADD", true, false, &Device::op_simd);
    add(op::kSimdSub, "SIMD_SUB", true, false, &Device::op_simd);
    add(op::kSimdMul, "SIMD_MUL", true, false, &Device::op_simd);
    add(op::kSimdXor, "SIMD_XOR", true, false, &Device::op_simd);
    add(op::kSimdMin, "SIMD_MIN", true, true, &Device::op_simd);
    add(op::kSimdMax, "SIMD_MAX", true, true, &Device::op_simd);
    add(op::kBlockHash, "BLOCK_HASH", false, true, &Device::op_block_hash);
  }

  void install_collective_ops() {
    auto add = [&](uint16_t code, const char* name, bool mutates,
                   bool idempotent,
                   std::vector<OutboundPacket> (Device::*fn)(
                       const NetdamPacket&, const ExecContext&)) {
      registry_.register_extension(OpcodeEntry{
          code, name,
          [fn](Device& d, const NetdamPacket& p, const ExecContext& ctx) {
            return (d.*fn)(p, ctx);
          },
          mutates, idempotent});
    };
    add(op::kReduceScatterStep, "REDUCE_SCATTER_STEP", true, true,
        &Device::op_reduce_scatter_step);
    add(op::kAllGatherStep, "ALL_GATHER_STEP", true, true,
        &Device::op_allgather_step);
    add(op::kCollectiveStatus, "COLLECTIVE_STATUS", false, true,
        &Device::op_collective_status);
  }

  struct StepRecord {
    uint32_t length = 0;
    uint64_t sequence = 0;
  };

  Endpoint self_;
  DeviceConfig config_;
  Bytes memory_;
  std::deque<Bytes> request_q_;
  std::deque<Bytes> complete_q_;
  OpcodeRegistry registry_;
  DeviceStats stats_;
  std::unordered_map<uint64_t, StepRecord> step_table_;
};

}  // namespace netdam
