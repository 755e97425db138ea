#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "netdam/addressing.hpp"
#include "netdam/isa.hpp"
#include "netdam/transport.hpp"
#include "netdam/types.hpp"
#include "netdam/wire.hpp"

namespace netdam {

// ============================================================================
// Retransmitting requester
// ============================================================================
// At-least-once delivery on top of an unreliable carrier. Callers only send
// idempotent-safe instructions through it (WRITE, READ, CAS, BLOCK_HASH,
// ALL_GATHER_STEP, hash-guarded REDUCE_SCATTER_STEP chains) unless they
// explicitly know better; combined with those semantics the effect is
// exactly-once. Replies match on sequence; sequences are unique per
// requester.

struct RetransmitOptions {
  Micros timeout{200'000};  // 50 ms is the usual choice on the simulator
  int max_attempts = 8;
};

class Requester {
 public:
  explicit Requester(Carrier& carrier, RetransmitOptions defaults = {})
      : carrier_(carrier), defaults_(defaults) {}

  Carrier& carrier() { return carrier_; }
  uint64_t next_sequence() { return next_sequence_++; }

  /// Sends and tracks a request. packet.sequence must be nonzero and unique;
  /// pass 0 to have one assigned. Returns the sequence.
  uint64_t submit(const Endpoint& dst, NetdamPacket packet,
                  std::optional<RetransmitOptions> opts = std::nullopt) {
    if (packet.sequence == 0) packet.sequence = next_sequence();
    RetransmitOptions o = opts.value_or(defaults_);
    Pending p;
    p.dst = dst;
    p.frame = encode_packet(packet);
    p.deadline = carrier_.now() + o.timeout;
    p.opts = o;
    uint64_t seq = packet.sequence;
    carrier_.send(dst, p.frame);
    pending_.emplace(seq, std::move(p));
    return seq;
  }

  /// One scheduling round: receive for up to `quantum`, dispatch any ACK,
  /// then fire overdue retransmissions.
  void pump(Micros quantum = Micros(1000)) {
    if (auto dgram = carrier_.recv(quantum)) {
      try {
        NetdamPacket p = decode_packet(dgram->frame);
        if (p.is_ack()) {
          auto it = pending_.find(p.sequence);
          if (it != pending_.end() && !it->second.reply) {
            it->second.reply = std::move(p);
          } else {
            ++stray_acks_;
          }
        } else {
          ++stray_packets_;
        }
      } catch (const WireError&) {
        ++decode_errors_;
      }
    }
    Micros now = carrier_.now();
    for (auto& [seq, p] : pending_) {
      if (p.reply || p.exhausted || now < p.deadline) continue;
      if (p.attempts >= p.opts.max_attempts) {
        p.exhausted = true;
        continue;
      }
      ++p.attempts;
      ++retransmits_;
      carrier_.send(p.dst, p.frame);
      p.deadline = now + p.opts.timeout;
    }
  }

  bool has_reply(uint64_t seq) const {
    auto it = pending_.find(seq);
    return it != pending_.end() && it->second.reply.has_value();
  }

  bool exhausted(uint64_t seq) const {
    auto it = pending_.find(seq);
    return it != pending_.end() && it->second.exhausted;
  }

  int attempts(uint64_t seq) const {
    auto it = pending_.find(seq);
    return it == pending_.end() ? 0 : it->second.attempts;
  }

  /// Removes the entry and returns its reply, if any arrived.
  std::optional<NetdamPacket> take(uint64_t seq) {
    auto it = pending_.find(seq);
    if (it == pending_.end() || !it->second.reply) return std::nullopt;
    auto reply = std::move(it->second.reply);
    pending_.erase(it);
    return reply;
  }

  void cancel(uint64_t seq) { pending_.erase(seq); }
  size_t in_flight() const { return pending_.size(); }
  uint64_t retransmits() const { return retransmits_; }
  uint64_t stray_acks() const { return stray_acks_; }

 private:
  struct Pending {
    Endpoint dst;
    Bytes frame;
    Micros deadline{};
    RetransmitOptions opts;
    int attempts = 1;
    std::optional<NetdamPacket> reply;
    bool exhausted = false;
  };

  Carrier& carrier_;
  RetransmitOptions defaults_;
  uint64_t next_sequence_ = 1;
  std::map<uint64_t, Pending> pending_;
  uint64_t retransmits_ = 0;
  uint64_t stray_acks_ = 0;
  uint64_t stray_packets_ = 0;
  uint64_t decode_errors_ = 0;
};

/// Synchronous request/response: retransmits on timeout and returns the
/// first matching ACK. Throws TransportError(kExhausted) when attempts run
/// out.
inline NetdamPacket reliable_request(
    Requester& rq, const Endpoint& dst, NetdamPacket packet,
    std::optional<RetransmitOptions> opts = std::nullopt) {
  uint64_t seq = rq.submit(dst, std::move(packet), opts);
  while (true) {
    if (auto reply = rq.take(seq)) return *reply;
    if (rq.exhausted(seq)) {
      rq.cancel(seq);
      throw TransportError(TransportErrc::kExhausted,
                           "no ACK after max attempts");
    }
    rq.pump();
  }
}

// ============================================================================
// Reorder buffer
// ============================================================================
// For flows carrying the ORDERED flag: releases packets in strictly
// increasing sequence, holding back early arrivals. A gap stalls the flow
// until filled; exceeding capacity aborts the flow (counted) rather than
// releasing out of order.

class ReorderBuffer {
 public:
  explicit ReorderBuffer(uint64_t first_sequence = 1, size_t capacity = 64)
      : expected_(first_sequence), capacity_(capacity) {}

  std::vector<NetdamPacket> deliver(NetdamPacket p) {
    std::vector<NetdamPacket> released;
    if (p.sequence < expected_ || holdback_.count(p.sequence)) {
      ++duplicates_dropped_;
      return released;
    }
    if (p.sequence == expected_) {
      released.push_back(std::move(p));
      ++expected_;
      auto it = holdback_.begin();
      while (it != holdback_.end() && it->first == expected_) {
        released.push_back(std::move(it->second));
        it = holdback_.erase(it);
        ++expected_;
      }
      return released;
    }
    if (holdback_.size() >= capacity_) {
      ++capacity_evictions_;
      holdback_.clear();
      throw TransportError(TransportErrc::kCapacityExceeded,
                           "reorder holdback full; flow dropped");
    }
    holdback_.emplace(p.sequence, std::move(p));
    return released;
  }

  uint64_t expected() const { return expected_; }
  size_t held() const { return holdback_.size(); }
  uint64_t duplicates_dropped() const { return duplicates_dropped_; }
  uint64_t capacity_evictions() const { return capacity_evictions_; }

 private:
  uint64_t expected_;
  size_t capacity_;
  std::map<uint64_t, NetdamPacket> holdback_;
  uint64_t duplicates_dropped_ = 0;
  uint64_t capacity_evictions_ = 0;
};

// ============================================================================
// Rate-limited pull reads
// ============================================================================

/// Token bucket: in any window of w seconds at most rate*w + burst takes.
class TokenBucket {
 public:
  TokenBucket(double rate_per_sec, double burst, Micros start)
      : rate_(rate_per_sec), burst_(burst), tokens_(burst), last_(start) {}

  bool try_take(Micros now) {
    refill(now);
    if (tokens_ >= 1.0) {
      tokens_ -= 1.0;
      return true;
    }
    return false;
  }

  double tokens(Micros now) {
    refill(now);
    return tokens_;
  }

 private:
  void refill(Micros now) {
    if (now <= last_) return;
    double dt = double((now - last_).count()) * 1e-6;
    tokens_ = std::min(burst_, tokens_ + rate_ * dt);
    last_ = now;
  }

  double rate_;
  double burst_;
  double tokens_;
  Micros last_;
};

struct PullTraceEntry {
  uint64_t t_us = 0;
  size_t device = 0;
  uint64_t sequence = 0;
  bool issue = true;  // false = completion
};

/// Receiver-driven incast avoidance: issues per-block READs through a token
/// bucket, keeps at most `burst` outstanding, reassembles replies by global
/// offset so completion order does not matter.
class PullScheduler {
 public:
  PullScheduler(Requester& rq, const PoolLayout& layout, uint64_t g,
                uint64_t length, double rate_per_sec, double burst,
                std::optional<RetransmitOptions> opts = std::nullopt)
      : rq_(rq),
        layout_(layout),
        base_(g),
        bucket_(rate_per_sec, burst, rq.carrier().now()),
        inflight_cap_(size_t(burst) > 0 ? size_t(burst) : 1),
        opts_(opts),
        pieces_(plan_interleaved(layout, g, length)),
        result_(length, 0) {}

  /// Non-blocking scheduling step; call repeatedly (interleaved with
  /// Requester::pump) until done() or failed().
  void poll() {
    // reap completions
    for (auto it = inflight_.begin(); it != inflight_.end();) {
      uint64_t seq = it->first;
      size_t idx = it->second;
      if (rq_.has_reply(seq)) {
        auto reply = rq_.take(seq);
        const PoolPiece& piece = pieces_[idx];
        if (reply->status != uint8_t(Status::kOk) ||
            reply->payload.size() != piece.length) {
          failed_ = true;
        } else {
          std::copy(reply->payload.begin(), reply->payload.end(),
                    result_.begin() + (piece.global - base_));
        }
        trace_.push_back(PullTraceEntry{uint64_t(rq_.carrier().now().count()),
                                        piece.device, seq, false});
        it = inflight_.erase(it);
        continue;
      }
      if (rq_.exhausted(seq)) {
        rq_.cancel(seq);
        failed_ = true;
        it = inflight_.erase(it);
        continue;
      }
      ++it;
    }
    // issue next reads through the bucket
    while (!failed_ && next_piece_ < pieces_.size() &&
           inflight_.size() < inflight_cap_ &&
           bucket_.try_take(rq_.carrier().now())) {
      const PoolPiece& piece = pieces_[next_piece_];
      NetdamPacket read;
      read.opcode = op::kRead;
      read.flags = flags::kReliable;
      read.address = PoolLayout::pool_base_address() + piece.local;
      read.length = piece.length;
      uint64_t seq =
          rq_.submit(layout_.devices()[piece.device], std::move(read), opts_);
      inflight_.emplace(seq, next_piece_);
      trace_.push_back(PullTraceEntry{uint64_t(rq_.carrier().now().count()),
                                      piece.device, seq, true});
      ++next_piece_;
    }
  }

  bool done() const {
    return !failed_ && next_piece_ == pieces_.size() && inflight_.empty();
  }
  bool failed() const { return failed_; }
  const Bytes& result() const { return result_; }
  const std::vector<PullTraceEntry>& trace() const { return trace_; }

 private:
  Requester& rq_;
  const PoolLayout& layout_;
  uint64_t base_;
  TokenBucket bucket_;
  size_t inflight_cap_;
  std::optional<RetransmitOptions> opts_;
  std::vector<PoolPiece> pieces_;
  size_t next_piece_ = 0;
  std::map<uint64_t, size_t> inflight_;
  Bytes result_;
  std::vector<PullTraceEntry> trace_;
  bool failed_ = false;
};

/// Drives a single rate-limited pull to completion and returns the bytes.
inline Bytes pull_read(Requester& rq, const PoolLayout& layout, uint64_t g,
                       uint64_t length, double rate_per_sec, double burst,
                       std::optional<RetransmitOptions> opts = std::nullopt) {
  PullScheduler pull(rq, layout, g, length, rate_per_sec, burst, opts);
  while (!pull.done()) {
    if (pull.failed())
      throw TransportError(TransportErrc::kExhausted,
                           "pull_read lost a block permanently");
    pull.poll();
    if (!pull.done()) rq.pump();
  }
  return pull.result();
}

// ============================================================================
// Interleaved pool client
// ============================================================================

/// Reliable window-pipelined reads/writes over an interleaved pool. Wire
/// addresses sit above the reserved queue window.
class PoolClient {
 public:
  PoolClient(Requester& rq, PoolLayout layout, size_t window = 64,
             std::optional<RetransmitOptions> opts = std::nullopt)
      : rq_(rq), layout_(std::move(layout)), window_(window), opts_(opts) {}

  const PoolLayout& layout() const { return layout_; }

  void write(uint64_t g, std::span<const uint8_t> data) {
    auto pieces = plan_interleaved(layout_, g, data.size());
    run(pieces, [&](const PoolPiece& piece) {
      NetdamPacket p;
      p.opcode = op::kWrite;
      p.flags = flags::kReliable;
      p.address = PoolLayout::pool_base_address() + piece.local;
      p.length = piece.length;
      p.payload.assign(data.begin() + (piece.global - g),
                       data.begin() + (piece.global - g) + piece.length);
      return p;
    });
  }

  Bytes read(uint64_t g, uint64_t length) {
    Bytes out(length, 0);
    auto pieces = plan_interleaved(layout_, g, length);
    run(pieces, [&](const PoolPiece& piece) {
      NetdamPacket p;
      p.opcode = op::kRead;
      p.flags = flags::kReliable;
      p.address = PoolLayout::pool_base_address() + piece.local;
      p.length = piece.length;
      return p;
    },
        [&](const PoolPiece& piece, const NetdamPacket& reply) {
          std::copy(reply.payload.begin(), reply.payload.end(),
                    out.begin() + (piece.global - g));
        });
    return out;
  }

 private:
  template <typename MakeFn>
  void run(const std::vector<PoolPiece>& pieces, MakeFn make) {
    run(pieces, make, [](const PoolPiece&, const NetdamPacket&) {});
  }

  template <typename MakeFn, typename OnReply>
  void run(const std::vector<PoolPiece>& pieces, MakeFn make,
           OnReply on_reply) {
    size_t next = 0;
    std::map<uint64_t, size_t> inflight;
    while (next < pieces.size() || !inflight.empty()) {
      while (next < pieces.size() && inflight.size() < window_) {
        uint64_t seq = rq_.submit(layout_.devices()[pieces[next].device],
                                  make(pieces[next]), opts_);
        inflight.emplace(seq, next);
        ++next;
      }
      rq_.pump();
      for (auto it = inflight.begin(); it != inflight.end();) {
        uint64_t seq = it->first;
        size_t idx = it->second;
        if (rq_.has_reply(seq)) {
          auto reply = rq_.take(seq);
          if (reply->status != uint8_t(Status::kOk))
            throw PoolError(PoolErrc::kOutOfPool,
                            std::string("device replied ") +
                                to_string(Status(reply->status)));
          if (reply->opcode == op::kRead &&
              reply->payload.size() != pieces[idx].length)
            throw PoolError(PoolErrc::kOutOfPool, "short read");
          on_reply(pieces[idx], *reply);
          it = inflight.erase(it);
        } else if (rq_.exhausted(seq)) {
          rq_.cancel(seq);
          throw TransportError(TransportErrc::kExhausted,
                               "pool transfer lost a piece permanently");
        } else {
          ++it;
        }
      }
    }
  }

  Requester& rq_;
  PoolLayout layout_;
  size_t window_;
  std::optional<RetransmitOptions> opts_;
};

}  // namespace netdam
