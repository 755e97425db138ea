#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "netdam/isa.hpp"
#include "netdam/reliability.hpp"
#include "netdam/transport.hpp"

namespace netdam {

/// Latency distribution over a batch of requests. Percentiles are
/// nearest-rank, so p50 <= p99 <= max by construction.
struct BenchReport {
  uint64_t op_count = 0;
  double mean_us = 0;
  double p50_us = 0;
  double p99_us = 0;
  double max_us = 0;
  double jitter_us = 0;  // standard deviation
  uint64_t losses = 0;
  double bandwidth_bytes_per_sec = 0;

  nlohmann::json to_json() const {
    return {{"op_count", op_count},
            {"mean_us", mean_us},
            {"p50_us", p50_us},
            {"p99_us", p99_us},
            {"max_us", max_us},
            {"jitter_us", jitter_us},
            {"losses", losses},
            {"bandwidth_bytes_per_s", bandwidth_bytes_per_sec}};
  }
};

inline BenchReport summarize_latencies(std::vector<double> samples_us,
                                       uint64_t losses, uint64_t total_bytes,
                                       double elapsed_us) {
  BenchReport r;
  r.op_count = samples_us.size();
  r.losses = losses;
  if (samples_us.empty()) return r;
  std::sort(samples_us.begin(), samples_us.end());
  double sum = 0;
  for (double s : samples_us) sum += s;
  r.mean_us = sum / double(samples_us.size());
  auto rank = [&](double p) {
    size_t idx = size_t(std::ceil(p * double(samples_us.size())));
    return samples_us[std::min(idx == 0 ? 0 : idx - 1, samples_us.size() - 1)];
  };
  r.p50_us = rank(0.50);
  r.p99_us = rank(0.99);
  r.max_us = samples_us.back();
  double var = 0;
  for (double s : samples_us) var += (s - r.mean_us) * (s - r.mean_us);
  r.jitter_us = std::sqrt(var / double(samples_us.size()));
  if (elapsed_us > 0)
    r.bandwidth_bytes_per_sec = double(total_bytes) * 1e6 / elapsed_us;
  return r;
}

/// Sequential request latency probe. The default 128-byte READ matches a
/// 32 x float32 fetch.
inline BenchReport bench_latency(Requester& rq, const Endpoint& target,
                                 uint16_t opcode = op::kRead,
                                 uint32_t size = 128, uint32_t count = 1000,
                                 uint64_t address = kReservedWindow) {
  std::vector<double> samples;
  samples.reserve(count);
  uint64_t losses = 0;
  uint64_t bytes = 0;
  Micros t0 = rq.carrier().now();
  for (uint32_t i = 0; i < count; ++i) {
    NetdamPacket p;
    p.opcode = opcode;
    p.flags = flags::kReliable;
    p.address = address;
    p.length = size;
    if (opcode == op::kWrite) p.payload.assign(size, uint8_t(i));
    Micros start = rq.carrier().now();
    try {
      NetdamPacket ack = reliable_request(rq, target, std::move(p));
      samples.push_back(double((rq.carrier().now() - start).count()));
      bytes += size + ack.payload.size();
    } catch (const TransportError&) {
      ++losses;
    }
  }
  double elapsed = double((rq.carrier().now() - t0).count());
  return summarize_latencies(std::move(samples), losses, bytes, elapsed);
}

}  // namespace netdam
