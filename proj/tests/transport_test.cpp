#include "netdam/transport.hpp"

#include <gtest/gtest.h>

#include <random>
#include <thread>

#include "netdam/bench.hpp"
#include "netdam/reliability.hpp"
#include "test_util.hpp"

using namespace netdam;

namespace {

const Endpoint kA = Endpoint::from_octets(10, 0, 0, 50, 5000);
const Endpoint kB = Endpoint::from_octets(10, 0, 0, 51, 5001);

Bytes small_frame(uint64_t seq) {
  NetdamPacket p;
  p.sequence = seq;
  p.opcode = op::kRead;
  return encode_packet(p);
}

TEST(SimNet, LossZeroDeliversExactlyOnce) {
  SimNet net;
  auto a = net.attach(kA);
  auto b = net.attach(kB);
  for (uint64_t i = 0; i < 100; ++i) a.send(kB, small_frame(i));
  for (uint64_t i = 0; i < 100; ++i) {
    auto d = b.recv(Micros(10'000));
    ASSERT_TRUE(d.has_value());
    EXPECT_EQ(d->source, kA);
    EXPECT_EQ(decode_packet(d->frame).sequence, i);
  }
  EXPECT_FALSE(b.recv(Micros(10'000)).has_value());
}

TEST(SimNet, LossOneDeliversNothing) {
  SimNetConfig cfg;
  cfg.loss = 1.0;
  SimNet net(cfg);
  auto a = net.attach(kA);
  auto b = net.attach(kB);
  for (uint64_t i = 0; i < 50; ++i) a.send(kB, small_frame(i));
  EXPECT_FALSE(b.recv(Micros(100'000)).has_value());
  EXPECT_EQ(net.dropped(), 50u);
}

TEST(SimNet, SeededTraceIsReproducible) {
  auto run = [](uint64_t seed) {
    SimNetConfig cfg;
    cfg.loss = 0.2;
    cfg.duplicate = 0.2;
    cfg.reorder = 0.3;
    cfg.delay_jitter_us = 500;
    cfg.seed = seed;
    cfg.record_trace = true;
    SimNet net(cfg);
    auto a = net.attach(kA);
    auto b = net.attach(kB);
    for (uint64_t i = 0; i < 200; ++i) a.send(kB, small_frame(i));
    while (b.recv(Micros(50'000)).has_value()) {
    }
    std::ostringstream os;
    net.dump_trace_jsonl(os);
    return os.str();
  };
  std::string t1 = run(99), t2 = run(99), t3 = run(100);
  EXPECT_EQ(t1, t2);
  EXPECT_NE(t1, t3);
  EXPECT_FALSE(t1.empty());
}

TEST(SimNet, OversizeDatagramRejected) {
  SimNet net;
  auto a = net.attach(kA);
  Bytes big(kMaxDatagram + 1, 0);
  EXPECT_THROW(a.send(kB, big), TransportError);
}

TEST(Reliable, WriteCompletesUnderLoss) {
  SimNetConfig cfg;
  cfg.loss = 0.3;
  cfg.seed = 7;
  testutil::SimWorld world(1, cfg, DeviceConfig{.mem_size = 1 << 20});
  auto carrier = world.controller();
  Requester rq(carrier, RetransmitOptions{Micros(50'000), 16});

  std::mt19937_64 rng(71);
  Bytes data = testutil::random_bytes(rng, 1024);
  NetdamPacket w;
  w.opcode = op::kWrite;
  w.flags = flags::kReliable;
  w.address = kReservedWindow;
  w.length = uint32_t(data.size());
  w.payload = data;
  auto ack = reliable_request(rq, world.devices[0]->endpoint(), w);
  EXPECT_EQ(Status(ack.status), Status::kOk);

  NetdamPacket r;
  r.opcode = op::kRead;
  r.flags = flags::kReliable;
  r.address = kReservedWindow;
  r.length = uint32_t(data.size());
  auto readback = reliable_request(rq, world.devices[0]->endpoint(), r);
  EXPECT_EQ(readback.payload, data);
}

TEST(Reliable, DuplicateHeavyNetworkSingleEffect) {
  SimNetConfig cfg;
  cfg.duplicate = 0.5;
  cfg.seed = 8;
  testutil::SimWorld world(1, cfg, DeviceConfig{.mem_size = 1 << 20});
  auto carrier = world.controller();
  Requester rq(carrier, RetransmitOptions{Micros(50'000), 16});

  Bytes expected(1 << 16, 0);
  std::mt19937_64 rng(73);
  for (int i = 0; i < 32; ++i) {
    uint64_t addr = uint64_t(i) * 1024;  // disjoint targets
    Bytes data = testutil::random_bytes(rng, 512);
    std::copy(data.begin(), data.end(), expected.begin() + addr);
    NetdamPacket w;
    w.opcode = op::kWrite;
    w.address = addr;
    w.length = 512;
    w.payload = data;
    // the same idempotent write issued repeatedly: single application
    for (int k = 0; k < 3; ++k) {
      w.sequence = 0;
      reliable_request(rq, world.devices[0]->endpoint(), w);
    }
  }
  EXPECT_TRUE(std::equal(expected.begin(), expected.end(),
                         world.devices[0]->memory().begin()));
}

// At-least-once delivery composed with idempotent instructions gives
// exactly-once effects: a fixed schedule of idempotent-safe ops run under
// loss=0.5, dup=0.5 must leave the device bitwise identical to the
// loss-free run.
TEST(Reliable, IdempotentOpsExactlyOnceUnderLossAndDup) {
  auto run = [&](double loss, double dup) {
    SimNetConfig cfg;
    cfg.loss = loss;
    cfg.duplicate = dup;
    cfg.seed = 17;
    testutil::SimWorld world(1, cfg, DeviceConfig{.mem_size = 1 << 20});
    auto carrier = world.controller();
    Requester rq(carrier, RetransmitOptions{Micros(50'000), 64});
    Endpoint dev = world.devices[0]->endpoint();
    std::mt19937_64 rng(91);

    // idempotent writes to disjoint ranges
    for (int i = 0; i < 8; ++i) {
      NetdamPacket w;
      w.opcode = op::kWrite;
      w.address = kReservedWindow + 1024u * i;
      w.length = 256;
      w.payload = testutil::random_bytes(rng, 256);
      EXPECT_EQ(reliable_request(rq, dev, w).status, uint8_t(Status::kOk));
    }
    // one CAS per distinct word (zero-initialized, so the swap applies)
    for (int i = 0; i < 4; ++i) {
      NetdamPacket c;
      c.opcode = op::kCas;
      c.address = kReservedWindow + 32768u + 8u * i;
      c.length = 8;
      put_u64(c.payload, 0);
      put_u64(c.payload, 1000u + i);
      EXPECT_EQ(reliable_request(rq, dev, c).status, uint8_t(Status::kOk));
    }
    // single-hop all-gather step: an idempotent chained write
    {
      NetdamPacket ag;
      ag.opcode = op::kAllGatherStep;
      ag.dtype = dtype::kFloat32;
      ag.address = kReservedWindow + 65536;
      ag.length = 64;
      ag.payload = testutil::floats_to_bytes(std::vector<float>(16, 2.5f));
      EXPECT_EQ(reliable_request(rq, dev, ag).status, uint8_t(Status::kOk));
    }
    // hash-guarded final reduce-scatter hop: replay-safe by the guard
    {
      Bytes block = testutil::floats_to_bytes(std::vector<float>(16, 1.0f));
      NetdamPacket w;
      w.opcode = op::kWrite;
      w.address = kReservedWindow + 131072;
      w.length = uint32_t(block.size());
      w.payload = block;
      reliable_request(rq, dev, w);
      NetdamPacket rs;
      rs.opcode = op::kReduceScatterStep;
      rs.dtype = dtype::kFloat32;
      rs.flags = flags::kHashPresent;
      rs.block_hash = compute_block_hash(block);
      rs.address = kReservedWindow + 131072;
      rs.length = uint32_t(block.size());
      rs.payload = testutil::floats_to_bytes(std::vector<float>(16, 3.0f));
      auto ack = reliable_request(rq, dev, rs);
      // under duplication the first copy may win and the retransmit see a
      // mismatch; both outcomes leave the same memory
      EXPECT_TRUE(ack.status == uint8_t(Status::kOk) ||
                  ack.status == uint8_t(Status::kHashMismatch));
    }
    // reads and hashes have no effect but must still complete
    {
      NetdamPacket r;
      r.opcode = op::kBlockHash;
      r.address = kReservedWindow;
      r.length = 256;
      reliable_request(rq, dev, r);
    }
    return Bytes(world.devices[0]->memory().begin(),
                 world.devices[0]->memory().end());
  };

  Bytes clean = run(0.0, 0.0);
  Bytes faulty = run(0.5, 0.5);
  ASSERT_EQ(clean, faulty);
}

TEST(Bench, SummaryPercentilesMonotone) {
  std::mt19937_64 rng(93);
  std::vector<double> samples;
  for (int i = 0; i < 997; ++i) samples.push_back(double(rng() % 100000));
  auto r = summarize_latencies(samples, 3, 1 << 20, 1e6);
  EXPECT_EQ(r.op_count, 997u);
  EXPECT_LE(r.mean_us, r.max_us);
  EXPECT_LE(r.p50_us, r.p99_us);
  EXPECT_LE(r.p99_us, r.max_us);
  EXPECT_EQ(r.losses, 3u);
  EXPECT_GT(r.bandwidth_bytes_per_sec, 0);
  auto empty = summarize_latencies({}, 5, 0, 0);
  EXPECT_EQ(empty.op_count, 0u);
  EXPECT_EQ(empty.losses, 5u);
}

TEST(Bench, LatencyProbeOverSim) {
  testutil::SimWorld world(1);
  auto carrier = world.controller();
  Requester rq(carrier, RetransmitOptions{Micros(50'000), 8});
  auto report =
      bench_latency(rq, world.devices[0]->endpoint(), op::kRead, 128, 200);
  EXPECT_EQ(report.op_count, 200u);
  EXPECT_EQ(report.losses, 0u);
  EXPECT_LE(report.p50_us, report.p99_us);
  EXPECT_LE(report.p99_us, report.max_us);
  EXPECT_GT(report.mean_us, 0);
}

TEST(Reliable, TotalLossExhaustsAfterMaxAttempts) {
  SimNetConfig cfg;
  cfg.loss = 1.0;
  testutil::SimWorld world(1, cfg);
  auto carrier = world.controller();
  const int attempts = 5;
  const Micros timeout(40'000);
  Requester rq(carrier, RetransmitOptions{timeout, attempts});
  Micros t0 = carrier.now();
  NetdamPacket r;
  r.opcode = op::kRead;
  r.length = 4;
  try {
    reliable_request(rq, world.devices[0]->endpoint(), r);
    FAIL() << "expected Exhausted";
  } catch (const TransportError& e) {
    EXPECT_EQ(e.code(), TransportErrc::kExhausted);
  }
  Micros elapsed = carrier.now() - t0;
  EXPECT_GE(elapsed.count(), attempts * timeout.count());
  EXPECT_LE(elapsed.count(), (attempts + 2) * timeout.count());
}

TEST(Reorder, ReleasesInOrder) {
  ReorderBuffer rb(1);
  NetdamPacket p;
  p.sequence = 2;
  EXPECT_TRUE(rb.deliver(p).empty());
  p.sequence = 1;
  auto released = rb.deliver(p);
  ASSERT_EQ(released.size(), 2u);
  EXPECT_EQ(released[0].sequence, 1u);
  EXPECT_EQ(released[1].sequence, 2u);
}

TEST(Reorder, GapStallsUntilFilled) {
  ReorderBuffer rb(1);
  NetdamPacket p;
  p.sequence = 1;
  EXPECT_EQ(rb.deliver(p).size(), 1u);
  p.sequence = 3;
  EXPECT_TRUE(rb.deliver(p).empty());
  p.sequence = 2;
  auto released = rb.deliver(p);
  ASSERT_EQ(released.size(), 2u);
  EXPECT_EQ(released[0].sequence, 2u);
  EXPECT_EQ(released[1].sequence, 3u);
}

TEST(Reorder, DuplicateDroppedAndCounted) {
  ReorderBuffer rb(1);
  NetdamPacket p;
  p.sequence = 1;
  rb.deliver(p);
  EXPECT_TRUE(rb.deliver(p).empty());  // already released
  EXPECT_EQ(rb.duplicates_dropped(), 1u);
  p.sequence = 5;
  rb.deliver(p);
  EXPECT_TRUE(rb.deliver(p).empty());  // already held back
  EXPECT_EQ(rb.duplicates_dropped(), 2u);
}

TEST(Reorder, CapacityEvictionDropsFlow) {
  ReorderBuffer rb(1, 4);
  NetdamPacket p;
  for (uint64_t s = 2; s <= 5; ++s) {
    p.sequence = s;
    rb.deliver(p);
  }
  p.sequence = 7;
  EXPECT_THROW(rb.deliver(p), TransportError);
  EXPECT_EQ(rb.capacity_evictions(), 1u);
  // strictly increasing release is never violated
  EXPECT_EQ(rb.held(), 0u);
}

TEST(Reorder, OutputStrictlyIncreasingUnderRandomArrivals) {
  std::mt19937_64 rng(79);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<uint64_t> seqs;
    for (uint64_t s = 1; s <= 64; ++s) {
      seqs.push_back(s);
      if (rng() % 4 == 0) seqs.push_back(s);  // duplicates
    }
    std::shuffle(seqs.begin(), seqs.end(), rng);
    ReorderBuffer rb(1, 64);
    uint64_t last = 0;
    size_t released = 0;
    for (uint64_t s : seqs) {
      NetdamPacket p;
      p.sequence = s;
      for (auto& out : rb.deliver(p)) {
        EXPECT_GT(out.sequence, last);
        last = out.sequence;
        ++released;
      }
    }
    EXPECT_EQ(released, 64u);
  }
}

TEST(TokenBucket, BurstThenRate) {
  TokenBucket bucket(100.0, 5.0, Micros(0));
  int immediate = 0;
  while (bucket.try_take(Micros(0))) ++immediate;
  EXPECT_EQ(immediate, 5);
  // 10 ms refills exactly one token at 100/s
  EXPECT_FALSE(bucket.try_take(Micros(5'000)));
  EXPECT_TRUE(bucket.try_take(Micros(10'000)));
  EXPECT_FALSE(bucket.try_take(Micros(10'000)));
}

TEST(PullRead, RateLimitedAndCorrectUnderReorder) {
  SimNetConfig cfg;
  cfg.reorder = 0.8;
  cfg.delay_jitter_us = 2000;
  cfg.seed = 12;
  testutil::SimWorld world(4, cfg, DeviceConfig{.mem_size = 1 << 20});
  auto carrier = world.controller();
  Requester rq(carrier, RetransmitOptions{Micros(100'000), 8});

  PoolLayout layout(world.endpoints(), 1024, 64);
  // seed pool content through the devices directly
  std::mt19937_64 rng(83);
  Bytes content = testutil::random_bytes(rng, 50 * 1024);
  for (const auto& piece : plan_interleaved(layout, 0, content.size()))
    world.devices[piece.device]->poke(
        PoolLayout::pool_base_address() + piece.local,
        std::span<const uint8_t>(content.data() + (piece.global - 0),
                                 piece.length));

  const double rate = 100.0, burst = 5.0;
  PullScheduler pull(rq, layout, 0, content.size(), rate, burst);
  while (!pull.done() && !pull.failed()) {
    pull.poll();
    if (!pull.done()) rq.pump();
  }
  ASSERT_TRUE(pull.done());
  EXPECT_EQ(pull.result(), content);

  std::vector<uint64_t> issue_times;
  for (const auto& e : pull.trace())
    if (e.issue) issue_times.push_back(e.t_us);
  EXPECT_EQ(issue_times.size(), 50u);
  EXPECT_TRUE(testutil::bucket_trace_ok(issue_times, rate, burst));
  // 50 blocks at 100/s with burst 5: issue span at least (50-5)/100 s
  EXPECT_GE(issue_times.back() - issue_times.front(), 440'000u);
}

TEST(Udp, LoopbackRoundTrip) {
  UdpCarrier dev_carrier(Endpoint::from_octets(127, 0, 0, 1, 0));
  Device dev_bound(dev_carrier.local(), DeviceConfig{.mem_size = 1 << 20});
  UdpNode node(dev_bound, dev_carrier);
  std::thread server([&] { node.serve(); });

  UdpCarrier client(Endpoint::from_octets(127, 0, 0, 1, 0));
  Requester rq(client, RetransmitOptions{Micros(200'000), 8});
  NetdamPacket w;
  w.opcode = op::kWrite;
  w.address = 128;
  w.length = 4;
  w.payload = {1, 2, 3, 4};
  auto ack = reliable_request(rq, dev_carrier.local(), w);
  EXPECT_EQ(Status(ack.status), Status::kOk);
  NetdamPacket r;
  r.opcode = op::kRead;
  r.address = 128;
  r.length = 4;
  auto rb = reliable_request(rq, dev_carrier.local(), r);
  EXPECT_EQ(rb.payload, (Bytes{1, 2, 3, 4}));

  node.stop();
  server.join();
}

TEST(Udp, DoubleBindFails) {
  UdpCarrier first(Endpoint::from_octets(127, 0, 0, 1, 0));
  try {
    UdpCarrier second(first.local());
    FAIL() << "expected BindFailure";
  } catch (const TransportError& e) {
    EXPECT_EQ(e.code(), TransportErrc::kBindFailure);
  }
}

}  // namespace
