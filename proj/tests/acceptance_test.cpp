// Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

#include <gtest/gtest.h>

#include <chrono>
#include <random>
#include <sstream>

#include "netdam/netdam.hpp"
#include "test_util.hpp"

using namespace netdam;

namespace {

struct Verdict {
  const char* id;
  const char* name;
  std::chrono::steady_clock::time_point t0 =
      std::chrono::steady_clock::now();
  ~Verdict() {
    double secs = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    bool failed = ::testing::Test::HasFailure();
    std::printf("[ACCEPTANCE] %s %s: %s (%.2fs)\n", id, name,
                failed ? "FAIL" : "PASS", secs);
    std::fflush(stdout);
  }
  double elapsed() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         t0)
        .count();
  }
};

CollectiveOptions sim_options(int attempts = 8) {
  CollectiveOptions opts;
  opts.chain_attempts = attempts;
  opts.chain_timeout = Micros(50'000);
  opts.status_poll_interval = Micros(25'000);
  opts.rpc = RetransmitOptions{Micros(50'000), std::max(attempts, 8)};
  return opts;
}

// Criterion 1: 1e5 randomized encode/decode round-trips plus 1e5 arbitrary
// <=9000-byte decoder inputs, no crashes, under a minute.
TEST(Acceptance, C1_CodecSoundness) {
  Verdict v{"C1", "codec-soundness"};
  std::mt19937_64 rng(101);
  for (int i = 0; i < 100000; ++i) {
    NetdamPacket p = testutil::random_packet(rng, i % 97 == 0 ? 8192 : 256);
    ASSERT_EQ(decode_packet(encode_packet(p)), p);
  }
  size_t rejected = 0;
  for (int i = 0; i < 100000; ++i) {
    Bytes frame;
    if (i % 2 == 0) {
      frame = testutil::random_bytes(rng, rng() % (kMaxDatagram + 1));
    } else {
      frame = encode_packet(testutil::random_packet(rng, 128));
      for (size_t f = 0, n = 1 + rng() % 6; f < n; ++f)
        frame[rng() % frame.size()] = uint8_t(rng());
    }
    try {
      (void)decode_packet(frame);
    } catch (const WireError&) {
      ++rejected;
    }
  }
  EXPECT_GT(rejected, 0u);
  EXPECT_LT(v.elapsed(), 60.0);
}

// Criterion 2: every SIMD opcode x dtype combination, 1e3 randomized cases
// each, results identical to an independent scalar loop (bit-exact for
// float32 with the same operand order).
TEST(Acceptance, C2_IsaOracleEquivalence) {
  Verdict v{"C2", "isa-oracle-equivalence"};
  const Endpoint client = Endpoint::from_octets(10, 0, 0, 100, 7000);
  struct Combo {
    uint16_t opcode;
    uint8_t dt;
  };
  std::vector<Combo> combos;
  for (uint16_t opc : {op::kSimdAdd, op::kSimdSub, op::kSimdMul, op::kSimdMin,
                       op::kSimdMax})
    for (uint8_t dt : {dtype::kInt32, dtype::kFloat32})
      combos.push_back({opc, dt});
  for (uint8_t dt : {dtype::kByte, dtype::kInt32, dtype::kFloat32})
    combos.push_back({op::kSimdXor, dt});

  std::mt19937_64 rng(202);
  Device dev(Endpoint::from_octets(10, 0, 0, 1, 9000),
             DeviceConfig{.mem_size = 1 << 16});
  for (const Combo& combo : combos) {
    for (int iter = 0; iter < 1000; ++iter) {
      size_t lanes = 1 + rng() % 32;
      size_t len = combo.dt == dtype::kByte ? lanes : lanes * 4;
      Bytes mem_bytes, pay_bytes;
      bool arithmetic_f32 =
          combo.dt == dtype::kFloat32 &&
          (combo.opcode == op::kSimdAdd || combo.opcode == op::kSimdSub ||
           combo.opcode == op::kSimdMul);
      if (arithmetic_f32) {
        std::vector<float> m(lanes), q(lanes);
        for (auto& x : m) x = testutil::seeded_float(rng) * 1e4f;
        for (auto& x : q) x = testutil::seeded_float(rng) * 1e4f;
        mem_bytes = testutil::floats_to_bytes(m);
        pay_bytes = testutil::floats_to_bytes(q);
      } else {
        mem_bytes = testutil::random_bytes(rng, len);
        pay_bytes = testutil::random_bytes(rng, len);
      }
      dev.poke(0, mem_bytes);
      NetdamPacket p;
      p.opcode = combo.opcode;
      p.dtype = combo.dt;
      p.length = uint32_t(len);
      p.payload = pay_bytes;
      auto out = dev.execute(client, p);
      ASSERT_EQ(Status(out[0].packet.status), Status::kOk);
      Bytes expected = mem_bytes;
      testutil::simd_scalar_reference(combo.opcode, combo.dt, expected,
                                      pay_bytes);
      ASSERT_TRUE(std::equal(expected.begin(), expected.end(),
                             dev.memory().begin()))
          << "opcode " << combo.opcode << " dtype " << int(combo.dt);
    }
  }
  EXPECT_LT(v.elapsed(), 60.0);
}

// Criterion 3: map_global is a bijection for (B=8,N=3,total=96) and
// (B=8192,N=4,total=2^20), checked exhaustively, plus 1e4 random inverse
// round-trips.
TEST(Acceptance, C3_InterleaveBijection) {
  Verdict v{"C3", "interleave-bijection"};
  auto devices = [](size_t n) {
    std::vector<Endpoint> out;
    for (size_t i = 0; i < n; ++i)
      out.push_back(Endpoint::from_octets(10, 0, 0, uint8_t(i + 1), 9000));
    return out;
  };
  struct Config {
    uint64_t block;
    size_t n;
    uint64_t blocks_per_device;
  };
  for (const Config& c :
       {Config{8, 3, 4}, Config{8192, 4, (1 << 20) / (8192 * 4)}}) {
    PoolLayout layout(devices(c.n), c.block, c.blocks_per_device);
    uint64_t total = layout.total_size();
    std::vector<uint8_t> seen(total, 0);
    for (uint64_t g = 0; g < total; ++g) {
      LocalRef ref = layout.map_global(g);
      ASSERT_LT(ref.device, c.n);
      ASSERT_LT(ref.local, layout.device_span());
      uint64_t key = uint64_t(ref.device) * layout.device_span() + ref.local;
      ASSERT_EQ(seen[key], 0) << "collision at g=" << g;
      seen[key] = 1;
    }
    // onto: every (device, local) hit exactly once
    for (uint64_t k = 0; k < total; ++k) ASSERT_EQ(seen[k], 1);
  }
  PoolLayout layout(devices(4), 8192, (1 << 20) / (8192 * 4));
  std::mt19937_64 rng(303);
  for (int i = 0; i < 10000; ++i) {
    uint64_t g = rng() % layout.total_size();
    LocalRef ref = layout.map_global(g);
    ASSERT_EQ(layout.inverse_map(ref.device, ref.local), g);
  }
}

// Criterion 4: 1 MiB write then read-back through the interleaved pool over
// 4 simulated devices (loss 0) is byte-identical.
TEST(Acceptance, C4_EndToEndPool) {
  Verdict v{"C4", "end-to-end-pool"};
  testutil::SimWorld world(4, SimNetConfig{},
                           DeviceConfig{.mem_size = 1 << 20});
  auto carrier = world.controller();
  Requester rq(carrier, RetransmitOptions{Micros(50'000), 8});
  PoolLayout layout(world.endpoints(), 8192, 32);  // 1 MiB pool
  PoolClient pool(rq, layout);

  std::mt19937_64 rng(404);
  Bytes data = testutil::random_bytes(rng, 1 << 20);
  pool.write(0, data);
  Bytes readback = pool.read(0, data.size());
  ASSERT_EQ(readback, data);
}

// Criterion 5: 4 devices, 2^20 float32, chunk 2048: output equals the
// ring-order oracle with exact float32 equality, in under 30 s of wall time.
TEST(Acceptance, C5_AllreduceCorrectness) {
  Verdict v{"C5", "allreduce-correctness"};
  const size_t len = 1 << 20;
  const uint32_t chunk = 2048;
  testutil::SimWorld world(4, SimNetConfig{},
                           DeviceConfig{.mem_size = 8ull << 20});
  std::vector<std::vector<float>> inputs;
  for (size_t i = 0; i < 4; ++i) {
    inputs.push_back(testutil::seeded_vector(505 + i, len));
    world.devices[i]->poke(kReservedWindow,
                           testutil::floats_to_bytes(inputs[i]));
  }
  auto expected = testutil::ring_allreduce_oracle(inputs, chunk);

  auto carrier = world.controller();
  Requester rq(carrier, sim_options().rpc);
  auto result = allreduce(rq, world.endpoints(), len, chunk, sim_options());
  ASSERT_TRUE(result.success);
  for (auto& dev : world.devices) {
    auto got = testutil::bytes_to_floats(std::span<const uint8_t>(
        dev->memory().data() + kReservedWindow, len * 4));
    for (size_t i = 0; i < len; ++i) {
      ASSERT_EQ(std::memcmp(&got[i], &expected[i], 4), 0) << "elem " << i;
    }
  }
  EXPECT_LT(v.elapsed(), 30.0);
}

// Criterion 6: delivering every packet k times (k in {2,5}) leaves final
// memory bitwise identical to single delivery, and interim nodes never
// mutate during reduce-scatter.
TEST(Acceptance, C6_IdempotencyGuard) {
  Verdict v{"C6", "idempotency-guard"};
  const size_t len = 1 << 15;
  const uint32_t chunk = 2048;

  struct RunResult {
    std::vector<Bytes> after_rs;
    std::vector<Bytes> final_mem;
  };
  auto run = [&](int copies) {
    SimNetConfig cfg;
    cfg.force_duplicates = copies - 1;
    testutil::SimWorld world(4, cfg, DeviceConfig{.mem_size = 1 << 20});
    for (size_t i = 0; i < 4; ++i)
      world.devices[i]->poke(
          kReservedWindow,
          testutil::floats_to_bytes(testutil::seeded_vector(606 + i, len)));
    std::vector<Bytes> before;
    for (auto& dev : world.devices)
      before.emplace_back(dev->memory().begin(), dev->memory().end());

    auto carrier = world.controller();
    Requester rq(carrier, sim_options().rpc);
    CollectivePlan plan = plan_ring(world.endpoints(), len, chunk);
    EXPECT_TRUE(run_reduce_scatter(rq, plan, sim_options()).success);

    RunResult rr;
    for (size_t d = 0; d < 4; ++d) {
      rr.after_rs.emplace_back(world.devices[d]->memory().begin(),
                               world.devices[d]->memory().end());
      // interim purity: only owned chunk blocks may differ from the shadow
      for (const ChunkPlan& c : plan.chunks) {
        if (c.rs_final == d) continue;
        EXPECT_TRUE(std::equal(
            rr.after_rs[d].begin() + c.address,
            rr.after_rs[d].begin() + c.address + c.bytes(),
            before[d].begin() + c.address))
            << "interim mutation: dev " << d << " chunk " << c.id
            << " copies=" << copies;
      }
    }
    EXPECT_TRUE(run_allgather(rq, plan, sim_options()).success);
    for (auto& dev : world.devices)
      rr.final_mem.emplace_back(dev->memory().begin(), dev->memory().end());
    return rr;
  };

  RunResult once = run(1);
  for (int k : {2, 5}) {
    RunResult multi = run(k);
    for (size_t d = 0; d < 4; ++d) {
      ASSERT_EQ(multi.after_rs[d], once.after_rs[d])
          << "post-reduce-scatter memory differs, k=" << k << " dev " << d;
      ASSERT_EQ(multi.final_mem[d], once.final_mem[d])
          << "final memory differs, k=" << k << " dev " << d;
    }
  }
}

// Criterion 7: loss=0.3, dup=0.3, reorder=0.3: allreduce over 4 devices and
// 2^16 floats completes, matches the oracle, and two runs with the same seed
// are identical (memories and packet traces).
TEST(Acceptance, C7_LossResilience) {
  Verdict v{"C7", "loss-resilience"};
  const size_t len = 1 << 16;
  const uint32_t chunk = 2048;

  struct RunOut {
    std::vector<Bytes> memories;
    std::string trace;
    bool success;
  };
  auto run = [&] {
    SimNetConfig cfg;
    cfg.loss = 0.3;
    cfg.duplicate = 0.3;
    cfg.reorder = 0.3;
    cfg.delay_jitter_us = 300;
    cfg.seed = 777;
    cfg.record_trace = true;
    testutil::SimWorld world(4, cfg, DeviceConfig{.mem_size = 1 << 20});
    for (size_t i = 0; i < 4; ++i)
      world.devices[i]->poke(
          kReservedWindow,
          testutil::floats_to_bytes(testutil::seeded_vector(707 + i, len)));
    auto carrier = world.controller();
    Requester rq(carrier, sim_options(64).rpc);
    RunOut out;
    out.success =
        allreduce(rq, world.endpoints(), len, chunk, sim_options(64)).success;
    for (auto& dev : world.devices)
      out.memories.emplace_back(dev->memory().begin(), dev->memory().end());
    std::ostringstream os;
    world.net.dump_trace_jsonl(os);
    out.trace = os.str();
    return out;
  };

  RunOut first = run();
  ASSERT_TRUE(first.success);

  std::vector<std::vector<float>> inputs;
  for (size_t i = 0; i < 4; ++i)
    inputs.push_back(testutil::seeded_vector(707 + i, len));
  auto expected = testutil::ring_allreduce_oracle(inputs, chunk);
  for (auto& mem : first.memories) {
    auto got = testutil::bytes_to_floats(
        std::span<const uint8_t>(mem.data() + kReservedWindow, len * 4));
    for (size_t i = 0; i < len; ++i)
      ASSERT_EQ(std::memcmp(&got[i], &expected[i], 4), 0) << "elem " << i;
  }

  RunOut second = run();
  ASSERT_TRUE(second.success);
  ASSERT_EQ(first.memories, second.memories);
  ASSERT_EQ(first.trace, second.trace);
  ASSERT_FALSE(first.trace.empty());
}

// Criterion 8: 8 concurrent pull_read clients against a 4-device pool at
// rate=200/s, burst=16: every recorded issue trace satisfies the
// token-bucket inequality; zero violations.
TEST(Acceptance, C8_IncastBound) {
  Verdict v{"C8", "incast-bound"};
  testutil::SimWorld world(4, SimNetConfig{},
                           DeviceConfig{.mem_size = 1 << 20});
  auto carrier = world.controller();
  Requester rq(carrier, RetransmitOptions{Micros(100'000), 8});
  PoolLayout layout(world.endpoints(), 4096, 128);  // 2 MiB pool

  std::mt19937_64 rng(808);
  Bytes content = testutil::random_bytes(rng, layout.total_size());
  for (const auto& piece : plan_interleaved(layout, 0, content.size()))
    world.devices[piece.device]->poke(
        PoolLayout::pool_base_address() + piece.local,
        std::span<const uint8_t>(content.data() + piece.global, piece.length));

  const double rate = 200.0, burst = 16.0;
  const uint64_t span = 60 * 4096;  // 60 blocks per puller
  std::vector<std::unique_ptr<PullScheduler>> pullers;
  for (int p = 0; p < 8; ++p)
    pullers.push_back(std::make_unique<PullScheduler>(
        rq, layout, uint64_t(p) * span, span, rate, burst));

  auto all_done = [&] {
    for (auto& p : pullers)
      if (!p->done() && !p->failed()) return false;
    return true;
  };
  while (!all_done()) {
    for (auto& p : pullers) p->poll();
    rq.pump();
  }

  int violations = 0;
  for (int p = 0; p < 8; ++p) {
    ASSERT_TRUE(pullers[p]->done()) << "puller " << p;
    ASSERT_TRUE(std::equal(pullers[p]->result().begin(),
                           pullers[p]->result().end(),
                           content.begin() + uint64_t(p) * span));
    std::vector<uint64_t> issues;
    std::map<size_t, int> outstanding;
    for (const auto& e : pullers[p]->trace()) {
      if (e.issue) {
        issues.push_back(e.t_us);
        if (++outstanding[e.device] > int(burst)) ++violations;
      } else {
        --outstanding[e.device];
      }
    }
    ASSERT_EQ(issues.size(), 60u);
    if (!testutil::bucket_trace_ok(issues, rate, burst)) ++violations;
  }
  ASSERT_EQ(violations, 0);
}

// Criterion 9: with an empty ACL and enforcement on, every randomized
// request is denied; adding a permit rule flips exactly the matching subset.
TEST(Acceptance, C9_AclDefaultDeny) {
  Verdict v{"C9", "acl-default-deny"};
  const uint16_t opcodes[] = {op::kRead,      op::kWrite, op::kBlockHash,
                              op::kSimdXor,   op::kCas,   0x0FFF,
                              op::kCollectiveStatus};
  std::mt19937_64 rng(909);

  auto random_request = [&](uint64_t mem) {
    NetdamPacket p;
    p.opcode = opcodes[rng() % std::size(opcodes)];
    p.flags = flags::kReliable;
    p.address = rng() % mem;
    p.length = uint32_t(rng() % 512);
    if (p.opcode == op::kWrite || p.opcode == op::kSimdXor)
      p.payload = testutil::random_bytes(rng, p.length);
    if (p.opcode == op::kCas) {
      p.length = 8;
      p.payload = testutil::random_bytes(rng, 16);
    }
    return p;
  };

  {
    DeviceConfig cfg;
    cfg.mem_size = 2 << 20;
    cfg.acl_enabled = true;  // empty table
    testutil::SimWorld world(0);
    auto dev = std::make_unique<Device>(
        Endpoint::from_octets(10, 0, 0, 1, 9000), cfg);
    world.net.attach_device(*dev);
    auto carrier = world.controller();
    Requester rq(carrier, RetransmitOptions{Micros(50'000), 8});
    for (int i = 0; i < 500; ++i) {
      auto ack = reliable_request(rq, dev->endpoint(), random_request(2 << 20));
      ASSERT_EQ(Status(ack.status), Status::kAclDenied);
    }
  }

  {
    std::istringstream rules("10.0.0.0/8 0x0..0x100000 READ\n");
    DeviceConfig cfg;
    cfg.mem_size = 2 << 20;
    cfg.acl_enabled = true;
    cfg.acl = AclTable::parse(rules);
    testutil::SimWorld world(0);
    auto dev = std::make_unique<Device>(
        Endpoint::from_octets(10, 0, 0, 1, 9000), cfg);
    world.net.attach_device(*dev);

    // one source inside the permitted prefix, one outside
    auto inside = world.net.attach(Endpoint::from_octets(10, 1, 2, 3, 7000));
    auto outside =
        world.net.attach(Endpoint::from_octets(192, 168, 1, 5, 7000));
    Requester rq_in(inside, RetransmitOptions{Micros(50'000), 8});
    Requester rq_out(outside, RetransmitOptions{Micros(50'000), 8});

    int allowed = 0, denied = 0;
    for (int i = 0; i < 500; ++i) {
      bool use_inside = rng() % 2 == 0;
      NetdamPacket p = random_request(2 << 20);
      bool predicted_allow = use_inside && p.opcode == op::kRead &&
                             p.address + p.length <= (1 << 20);
      auto ack = reliable_request(use_inside ? rq_in : rq_out,
                                  dev->endpoint(), p);
      if (predicted_allow) {
        ASSERT_NE(Status(ack.status), Status::kAclDenied);
        ++allowed;
      } else {
        ASSERT_EQ(Status(ack.status), Status::kAclDenied);
        ++denied;
      }
    }
    EXPECT_GT(allowed, 0);
    EXPECT_GT(denied, 0);
  }
}

}  // namespace
