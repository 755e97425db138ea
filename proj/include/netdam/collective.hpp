#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "netdam/isa.hpp"
#include "netdam/reliability.hpp"
#include "netdam/transport.hpp"
#include "netdam/types.hpp"
#include "netdam/wire.hpp"

namespace netdam {

// ============================================================================
// Ring collectives
// ============================================================================
// Reduce-scatter sends each chunk along the ring as a self-routing chain:
// interim hops fold their block into the packet and forward, the final hop
// performs the hash-guarded add-and-store. All-gather replicates each reduced
// chunk with plain chained writes. Chains are replay-safe end to end, so the
// controller retransmits whole chains on timeout and detects completion with
// the idempotent COLLECTIVE_STATUS probe (plus the final ACK itself when the
// chain has a single hop and the ACK lands back on the controller socket).

enum class CollectiveErrc { kBadParams, kExhausted, kChunkFailed };

class CollectiveError : public std::runtime_error {
 public:
  CollectiveError(CollectiveErrc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  CollectiveErrc code() const { return code_; }

 private:
  CollectiveErrc code_;
};

struct ChunkPlan {
  uint32_t id = 0;
  uint64_t address = 0;  // same device-local offset on every node
  uint32_t elems = 0;
  size_t origin = 0;    // contributes the initial payload
  size_t rs_final = 0;  // ends the reduce-scatter chain, owns the sum
  size_t ag_final = 0;  // ends the all-gather chain
  SegmentStack rs_stack;
  SegmentStack ag_stack;
  uint64_t expected_hash = 0;  // guard hash fetched before emission

  uint32_t bytes() const { return elems * 4; }
};

struct CollectivePlan {
  std::vector<Endpoint> nodes;
  uint32_t vector_length = 0;
  uint32_t chunk_elems = 0;
  uint64_t base_address = 0;
  std::vector<ChunkPlan> chunks;
};

/// Standard ring schedule: chunk c originates at node c mod n and its chain
/// visits the remaining n-1 nodes in ring order.
inline CollectivePlan plan_ring(std::vector<Endpoint> nodes,
                                uint32_t vector_length, uint32_t chunk_elems,
                                uint64_t base_address = kReservedWindow) {
  const size_t n = nodes.size();
  if (n < 2 || vector_length < 1 || chunk_elems < 1 ||
      chunk_elems > kMaxPayload / 4)
    throw CollectiveError(CollectiveErrc::kBadParams,
                          "need >=2 nodes, length >=1, chunk in [1,2048]");
  CollectivePlan plan;
  plan.nodes = std::move(nodes);
  plan.vector_length = vector_length;
  plan.chunk_elems = chunk_elems;
  plan.base_address = base_address;
  uint32_t nchunks = (vector_length + chunk_elems - 1) / chunk_elems;
  plan.chunks.reserve(nchunks);
  for (uint32_t c = 0; c < nchunks; ++c) {
    ChunkPlan chunk;
    chunk.id = c;
    chunk.address = base_address + uint64_t(c) * chunk_elems * 4;
    chunk.elems = std::min(chunk_elems, vector_length - c * chunk_elems);
    chunk.origin = c % n;
    chunk.rs_final = (chunk.origin + n - 1) % n;
    chunk.ag_final = (chunk.rs_final + n - 1) % n;
    for (size_t k = 1; k < n; ++k) {
      chunk.rs_stack.segments.push_back(
          Segment{plan.nodes[(chunk.origin + k) % n].ip,
                  plan.nodes[(chunk.origin + k) % n].port,
                  op::kReduceScatterStep});
      chunk.ag_stack.segments.push_back(
          Segment{plan.nodes[(chunk.rs_final + k) % n].ip,
                  plan.nodes[(chunk.rs_final + k) % n].port,
                  op::kAllGatherStep});
    }
    chunk.rs_stack.segments_left = uint8_t(n - 1);
    chunk.ag_stack.segments_left = uint8_t(n - 1);
    plan.chunks.push_back(std::move(chunk));
  }
  return plan;
}

struct CollectiveOptions {
  int chain_attempts = 8;             // chain emissions per chunk
  Micros chain_timeout{50'000};       // re-emit interval
  Micros status_poll_interval{25'000};
  RetransmitOptions rpc{Micros(50'000), 8};  // hash/read/status requests
  size_t window = 256;                // chunks in flight
};

struct ChunkOutcome {
  bool ok = false;
  bool exhausted = false;  // gave up at the transport level
  Status last_status = Status::kOk;
  int chain_attempts = 0;
};

struct CollectiveResult {
  std::vector<ChunkOutcome> chunks;
  bool success = false;
  Micros elapsed{0};
  uint64_t bytes = 0;
  uint64_t total_retries = 0;

  double bandwidth_bytes_per_sec() const {
    return elapsed.count() > 0 ? double(bytes) * 1e6 / double(elapsed.count())
                               : 0.0;
  }

  nlohmann::json to_json() const {
    nlohmann::json per_chunk = nlohmann::json::array();
    for (const auto& c : chunks)
      per_chunk.push_back({{"ok", c.ok},
                           {"status", to_string(c.last_status)},
                           {"chain_attempts", c.chain_attempts}});
    return {{"success", success},
            {"elapsed_us", elapsed.count()},
            {"bytes", bytes},
            {"bandwidth_bytes_per_s", bandwidth_bytes_per_sec()},
            {"total_retries", total_retries},
            {"chunks", per_chunk}};
  }
};

namespace detail {

enum class CollPhase { kReduceScatter, kAllGather };

struct ChunkRun {
  enum class St { kIdle, kFetch, kEmitted, kDone, kFailed };
  St state = St::kIdle;
  uint64_t chain_seq = 0;
  uint64_t hash_req = 0;    // BLOCK_HASH rpc (reduce-scatter only)
  uint64_t data_req = 0;    // READ rpc
  uint64_t status_req = 0;  // outstanding COLLECTIVE_STATUS probe
  Micros next_poll{0};
  std::optional<uint64_t> guard_hash;
  std::optional<Bytes> data;
  bool chain_gone = false;  // chain entry removed from the requester
  bool final_probe = false; // last probe after chain exhaustion
  bool exhausted = false;
  int attempts_used = 1;
  Status last_status = Status::kOk;
};

class PhaseDriver {
 public:
  PhaseDriver(Requester& rq, CollectivePlan& plan,
              const CollectiveOptions& opts, CollPhase phase)
      : rq_(rq), plan_(plan), opts_(opts), phase_(phase),
        runs_(plan.chunks.size()) {}

  CollectiveResult run() {
    Micros t0 = rq_.carrier().now();
    // Chain sequences are assigned up front in chunk order so the values a
    // run stores in device state do not depend on network timing.
    for (auto& r : runs_) r.chain_seq = rq_.next_sequence();
    size_t launched = 0;
    while (true) {
      while (launched < runs_.size() && active_ < opts_.window) {
        start_fetch(launched);
        ++launched;
      }
      bool all_terminal = launched == runs_.size();
      for (size_t i = 0; i < launched; ++i) {
        step(i);
        auto st = runs_[i].state;
        if (st != ChunkRun::St::kDone && st != ChunkRun::St::kFailed)
          all_terminal = false;
      }
      if (all_terminal) break;
      rq_.pump();
    }
    CollectiveResult result;
    result.chunks.reserve(runs_.size());
    result.success = true;
    for (const auto& r : runs_) {
      ChunkOutcome o;
      o.ok = r.state == ChunkRun::St::kDone;
      o.exhausted = r.exhausted;
      o.last_status = r.last_status;
      o.chain_attempts = r.attempts_used;
      result.total_retries += uint64_t(std::max(0, r.attempts_used - 1));
      result.success = result.success && o.ok;
      result.chunks.push_back(o);
    }
    result.bytes = uint64_t(plan_.vector_length) * 4;
    result.elapsed = rq_.carrier().now() - t0;
    return result;
  }

 private:
  const ChunkPlan& chunk(size_t i) const { return plan_.chunks[i]; }
  Endpoint node(size_t idx) const { return plan_.nodes[idx]; }
  size_t final_node(size_t i) const {
    return phase_ == CollPhase::kReduceScatter ? chunk(i).rs_final
                                               : chunk(i).ag_final;
  }
  size_t data_node(size_t i) const {
    return phase_ == CollPhase::kReduceScatter ? chunk(i).origin
                                               : chunk(i).rs_final;
  }

  void start_fetch(size_t i) {
    ChunkRun& r = runs_[i];
    r.state = ChunkRun::St::kFetch;
    ++active_;
    NetdamPacket read;
    read.opcode = op::kRead;
    read.flags = flags::kReliable;
    read.address = chunk(i).address;
    read.length = chunk(i).bytes();
    r.data_req = rq_.submit(node(data_node(i)), std::move(read), opts_.rpc);
    if (phase_ == CollPhase::kReduceScatter) {
      NetdamPacket hash;
      hash.opcode = op::kBlockHash;
      hash.flags = flags::kReliable;
      hash.address = chunk(i).address;
      hash.length = chunk(i).bytes();
      r.hash_req = rq_.submit(node(chunk(i).rs_final), std::move(hash),
                              opts_.rpc);
    }
  }

  void fail(size_t i, Status status) {
    ChunkRun& r = runs_[i];
    if (r.data_req) rq_.cancel(r.data_req), r.data_req = 0;
    if (r.hash_req) rq_.cancel(r.hash_req), r.hash_req = 0;
    if (r.status_req) rq_.cancel(r.status_req), r.status_req = 0;
    if (r.chain_seq && !r.chain_gone) rq_.cancel(r.chain_seq);
    r.chain_gone = true;
    r.last_status = status;
    r.state = ChunkRun::St::kFailed;
    --active_;
  }

  void complete(size_t i) {
    ChunkRun& r = runs_[i];
    if (r.status_req) rq_.cancel(r.status_req), r.status_req = 0;
    if (!r.chain_gone) rq_.cancel(r.chain_seq), r.chain_gone = true;
    r.state = ChunkRun::St::kDone;
    --active_;
  }

  /// Takes a completed rpc; returns the reply if it arrived, nullopt while
  /// still pending. Exhaustion fails the chunk at the transport level.
  std::optional<NetdamPacket> reap(size_t i, uint64_t& handle) {
    if (!handle) return std::nullopt;
    if (rq_.has_reply(handle)) {
      auto reply = rq_.take(handle);
      handle = 0;
      return reply;
    }
    if (rq_.exhausted(handle)) {
      rq_.cancel(handle);
      handle = 0;
      runs_[i].exhausted = true;
      fail(i, runs_[i].last_status);
    }
    return std::nullopt;
  }

  void emit_chain(size_t i) {
    ChunkRun& r = runs_[i];
    const ChunkPlan& c = chunk(i);
    NetdamPacket p;
    p.sequence = r.chain_seq;
    p.dtype = dtype::kFloat32;
    p.flags = flags::kReliable;
    p.address = c.address;
    p.length = c.bytes();
    p.payload = std::move(*r.data);
    r.data.reset();
    if (phase_ == CollPhase::kReduceScatter) {
      p.flags |= flags::kHashPresent;
      p.block_hash = r.guard_hash;
      p.sr = c.rs_stack;
    } else {
      p.sr = c.ag_stack;
    }
    Segment first = p.sr.advance();
    p.opcode = first.callback_opcode;
    rq_.submit(first.endpoint(), std::move(p),
               RetransmitOptions{opts_.chain_timeout, opts_.chain_attempts});
    r.state = ChunkRun::St::kEmitted;
    r.next_poll = rq_.carrier().now() + opts_.status_poll_interval;
  }

  void step(size_t i) {
    ChunkRun& r = runs_[i];
    switch (r.state) {
      case ChunkRun::St::kFetch: {
        if (auto reply = reap(i, r.data_req)) {
          if (reply->status != uint8_t(Status::kOk))
            return fail(i, Status(reply->status));
          r.data = std::move(reply->payload);
        }
        if (r.state != ChunkRun::St::kFetch) return;
        if (phase_ == CollPhase::kReduceScatter) {
          if (auto reply = reap(i, r.hash_req)) {
            if (reply->status != uint8_t(Status::kOk) ||
                reply->payload.size() != 8)
              return fail(i, Status(reply->status));
            r.guard_hash = read_u64(reply->payload.data());
            plan_.chunks[i].expected_hash = *r.guard_hash;
          }
        }
        if (r.state != ChunkRun::St::kFetch) return;
        bool ready = r.data.has_value() &&
                     (phase_ == CollPhase::kAllGather ||
                      r.guard_hash.has_value());
        if (ready) emit_chain(i);
        return;
      }
      case ChunkRun::St::kEmitted: {
        // direct ACK (single-hop chains land it on our socket)
        if (!r.chain_gone && rq_.has_reply(r.chain_seq)) {
          r.attempts_used = rq_.attempts(r.chain_seq);
          auto reply = rq_.take(r.chain_seq);
          r.chain_gone = true;
          Status st = Status(reply->status);
          r.last_status = st;
          if (st == Status::kOk) return complete(i);
          if (st != Status::kHashMismatch) return fail(i, st);
          // mismatch: our write almost certainly landed already; let the
          // status probe confirm
        }
        if (!r.chain_gone && rq_.exhausted(r.chain_seq)) {
          r.attempts_used = rq_.attempts(r.chain_seq);
          rq_.cancel(r.chain_seq);
          r.chain_gone = true;
          r.final_probe = true;
        }
        if (!r.chain_gone) {
          int a = rq_.attempts(r.chain_seq);
          if (a > r.attempts_used) r.attempts_used = a;
        }
        // completion probe; a lost probe only re-arms the next poll while
        // the chain is still being retransmitted
        if (r.status_req && rq_.exhausted(r.status_req)) {
          rq_.cancel(r.status_req);
          r.status_req = 0;
          if (r.final_probe && r.chain_gone) {
            r.exhausted = true;
            return fail(i, r.last_status);
          }
        }
        if (r.status_req && rq_.has_reply(r.status_req)) {
          auto reply = rq_.take(r.status_req);
          r.status_req = 0;
          if (reply->status == uint8_t(Status::kOk) &&
              reply->payload.size() == 8 &&
              read_u64(reply->payload.data()) == r.chain_seq)
            return complete(i);
          if (r.final_probe && r.chain_gone) {
            r.exhausted = true;
            return fail(i, r.last_status);
          }
        }
        if (r.state != ChunkRun::St::kEmitted) return;
        if (r.status_req == 0 &&
            (r.final_probe || rq_.carrier().now() >= r.next_poll)) {
          NetdamPacket probe;
          probe.opcode = op::kCollectiveStatus;
          probe.flags = flags::kReliable;
          probe.address = chunk(i).address;
          probe.length = chunk(i).bytes();
          r.status_req =
              rq_.submit(node(final_node(i)), std::move(probe), opts_.rpc);
          r.next_poll = rq_.carrier().now() + opts_.status_poll_interval;
        }
        return;
      }
      default:
        return;
    }
  }

  Requester& rq_;
  CollectivePlan& plan_;
  const CollectiveOptions& opts_;
  CollPhase phase_;
  std::vector<ChunkRun> runs_;
  size_t active_ = 0;
};

}  // namespace detail

/// Reduce-scatter phase: on success, node rs_final of each chunk holds that
/// chunk's full ring-order sum. Requires every node's input vector to be in
/// place at the planned addresses.
inline CollectiveResult run_reduce_scatter(Requester& rq, CollectivePlan& plan,
                                           const CollectiveOptions& opts = {}) {
  return detail::PhaseDriver(rq, plan, opts,
                             detail::CollPhase::kReduceScatter)
      .run();
}

/// All-gather phase: replicates each reduced chunk to every node.
inline CollectiveResult run_allgather(Requester& rq, CollectivePlan& plan,
                                      const CollectiveOptions& opts = {}) {
  return detail::PhaseDriver(rq, plan, opts, detail::CollPhase::kAllGather)
      .run();
}

/// Reduce-scatter followed by all-gather: every node ends with the full
/// elementwise sum, bit-identical to a ring-order scalar reduction.
inline CollectiveResult allreduce(Requester& rq,
                                  const std::vector<Endpoint>& nodes,
                                  uint32_t vector_length, uint32_t chunk_elems,
                                  const CollectiveOptions& opts = {},
                                  uint64_t base_address = kReservedWindow) {
  CollectivePlan plan =
      plan_ring(nodes, vector_length, chunk_elems, base_address);
  CollectiveResult rs = run_reduce_scatter(rq, plan, opts);
  if (!rs.success) {
    throw CollectiveError(CollectiveErrc::kChunkFailed,
                          "reduce-scatter phase failed");
  }
  CollectiveResult ag = run_allgather(rq, plan, opts);
  CollectiveResult merged;
  merged.chunks.reserve(plan.chunks.size());
  for (size_t i = 0; i < plan.chunks.size(); ++i) {
    ChunkOutcome o;
    o.ok = rs.chunks[i].ok && ag.chunks[i].ok;
    o.last_status = ag.chunks[i].ok ? rs.chunks[i].last_status
                                    : ag.chunks[i].last_status;
    o.chain_attempts = rs.chunks[i].chain_attempts + ag.chunks[i].chain_attempts;
    merged.chunks.push_back(o);
  }
  merged.success = rs.success && ag.success;
  merged.bytes = uint64_t(vector_length) * 4;
  merged.elapsed = rs.elapsed + ag.elapsed;
  merged.total_retries = rs.total_retries + ag.total_retries;
  return merged;
}

}  // namespace netdam
