// netdam: operator CLI for NetDAM devices.
//
// Subcommands: daemon, client (read|write|cas|memcopy|simd|hash), pool
// (read|write), bench latency, allreduce. Every error path exits nonzero
// with a one-line `error: <code>: <detail>` on stderr.

#include <atomic>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "netdam/netdam.hpp"

using namespace netdam;
using nlohmann::json;

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

struct CliExit {
  int code;
};

// Prints one machine-parsable line and unwinds to main (so RAII cleanup,
// e.g. trace dumps, still runs).
[[noreturn]] void die(const std::string& code, const std::string& detail,
                      int exit_code = 1) {
  std::cerr << "error: " << code << ": " << detail << "\n";
  throw CliExit{exit_code};
}

Endpoint parse_endpoint_or_die(const std::string& text) {
  auto ep = Endpoint::parse(text);
  if (!ep) die("bad_endpoint", "cannot parse `" + text + "`");
  return *ep;
}

std::vector<Endpoint> parse_nodes_or_die(const std::string& text) {
  std::vector<Endpoint> nodes;
  std::istringstream in(text);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    if (!tok.empty()) nodes.push_back(parse_endpoint_or_die(tok));
  }
  if (nodes.empty()) die("bad_endpoint", "empty node list");
  return nodes;
}

Bytes parse_hex_or_die(const std::string& hex) {
  if (hex.size() % 2 != 0) die("bad_hex", "odd digit count");
  Bytes out;
  out.reserve(hex.size() / 2);
  auto nib = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  for (size_t i = 0; i < hex.size(); i += 2) {
    int hi = nib(hex[i]), lo = nib(hex[i + 1]);
    if (hi < 0 || lo < 0) die("bad_hex", "non-hex digit");
    out.push_back(uint8_t(hi << 4 | lo));
  }
  return out;
}

std::string to_hex(std::span<const uint8_t> data) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(data.size() * 2);
  for (uint8_t b : data) {
    out.push_back(digits[b >> 4]);
    out.push_back(digits[b & 0xF]);
  }
  return out;
}

// `key = value` per line; later values win over flags (config overrides).
void apply_config_overrides(const std::string& path,
                            std::map<std::string, std::string>& kv) {
  std::ifstream f(path);
  if (!f) die("bad_config", "cannot open " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      if (line.find_first_not_of(" \t\r") != std::string::npos)
        die("bad_config", path + " line " + std::to_string(lineno) +
                              ": expected key = value");
      continue;
    }
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t\r");
      size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string{} : s.substr(a, b - a + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
}

// ---------------------------------------------------------------------------
// daemon
// ---------------------------------------------------------------------------

struct DaemonConfig {
  std::string endpoint = "0.0.0.0:9000";
  uint64_t mem_size = 64ull * 1024 * 1024;
  size_t queue_depth = 1024;
  std::string acl_path;
  std::string stats_dump;
  std::string config_path;
};

int cmd_daemon(DaemonConfig cfg) {
  if (!cfg.config_path.empty()) {
    std::map<std::string, std::string> kv;
    apply_config_overrides(cfg.config_path, kv);
    if (kv.count("endpoint")) cfg.endpoint = kv["endpoint"];
    if (kv.count("mem_size")) cfg.mem_size = std::stoull(kv["mem_size"]);
    if (kv.count("queue_depth")) cfg.queue_depth = std::stoul(kv["queue_depth"]);
    if (kv.count("acl")) cfg.acl_path = kv["acl"];
    if (kv.count("stats_dump")) cfg.stats_dump = kv["stats_dump"];
  }
  if (cfg.mem_size < kReservedWindow + 8192)
    die("bad_config", "mem-size must be at least 64 KiB + one block");
  Endpoint listen = parse_endpoint_or_die(cfg.endpoint);

  DeviceConfig dev_cfg;
  dev_cfg.mem_size = cfg.mem_size;
  dev_cfg.queue_depth = cfg.queue_depth;
  if (!cfg.acl_path.empty()) {
    try {
      dev_cfg.acl = AclTable::load(cfg.acl_path);
      dev_cfg.acl_enabled = true;
    } catch (const AclParseError& e) {
      die("bad_config", e.what());
    }
  }

  try {
    UdpCarrier carrier(listen);
    Device device(carrier.local(), dev_cfg);
    UdpNode node(device, carrier);
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::cout << "netdam daemon listening on " << carrier.local().to_string()
              << " mem=" << cfg.mem_size << " queue=" << cfg.queue_depth
              << (dev_cfg.acl_enabled ? " acl=on" : " acl=off") << std::endl;
    std::thread server([&] { node.serve(); });
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(50));
    node.stop();
    server.join();
    std::string report = device.stats_json().dump(2);
    if (!cfg.stats_dump.empty()) {
      std::ofstream out(cfg.stats_dump);
      out << report << "\n";
    } else {
      std::cout << report << std::endl;
    }
    return 0;
  } catch (const TransportError& e) {
    if (e.code() == TransportErrc::kBindFailure)
      die("bind_failure", e.what(), 2);
    die("transport", e.what());
  }
}

// ---------------------------------------------------------------------------
// client
// ---------------------------------------------------------------------------

struct ClientArgs {
  std::string endpoint;
  uint64_t addr = 0;
  uint64_t len = 0;
  std::string data_hex;
  uint64_t compare = 0, swap_value = 0;
  uint64_t src = 0, dst = 0;
  std::string simd_op = "add";
  std::string dtype_name = "float32";
  bool target_packet = false;
  uint64_t timeout_ms = 200;
  int attempts = 8;
  bool json_out = false;
};

NetdamPacket run_client_request(const ClientArgs& args, NetdamPacket request,
                                double& latency_us) {
  UdpCarrier carrier(Endpoint::from_octets(0, 0, 0, 0, 0));
  Requester rq(carrier, RetransmitOptions{Micros(args.timeout_ms * 1000),
                                          args.attempts});
  Endpoint target = parse_endpoint_or_die(args.endpoint);
  Micros t0 = carrier.now();
  NetdamPacket ack = reliable_request(rq, target, std::move(request));
  latency_us = double((carrier.now() - t0).count());
  return ack;
}

int finish_client(const ClientArgs& args, const NetdamPacket& ack,
                  double latency_us) {
  Status st = Status(ack.status);
  if (args.json_out) {
    json j{{"status", to_string(st)},
           {"status_code", ack.status},
           {"latency_us", latency_us},
           {"payload_hex", to_hex(ack.payload)}};
    std::cout << j.dump() << std::endl;
  } else {
    std::cout << "status=" << to_string(st) << " latency_us=" << latency_us;
    if (!ack.payload.empty()) std::cout << " payload=" << to_hex(ack.payload);
    std::cout << std::endl;
  }
  if (st != Status::kOk) {
    std::cerr << "error: device_status: " << to_string(st) << "\n";
    return 3;
  }
  return 0;
}

int cmd_client(const std::string& verb, const ClientArgs& args) {
  NetdamPacket p;
  p.flags = flags::kReliable;
  if (verb == "read") {
    p.opcode = op::kRead;
    p.address = args.addr;
    p.length = uint32_t(args.len);
  } else if (verb == "write") {
    p.opcode = op::kWrite;
    p.address = args.addr;
    p.payload = parse_hex_or_die(args.data_hex);
    p.length = uint32_t(p.payload.size());
  } else if (verb == "cas") {
    p.opcode = op::kCas;
    p.address = args.addr;
    p.length = 8;
    put_u64(p.payload, args.compare);
    put_u64(p.payload, args.swap_value);
  } else if (verb == "memcopy") {
    p.opcode = op::kMemcopy;
    p.address = args.src;
    p.length = uint32_t(args.len);
    put_u64(p.payload, args.dst);
  } else if (verb == "simd") {
    static const std::map<std::string, uint16_t> ops = {
        {"add", op::kSimdAdd}, {"sub", op::kSimdSub}, {"mul", op::kSimdMul},
        {"xor", op::kSimdXor}, {"min", op::kSimdMin}, {"max", op::kSimdMax}};
    static const std::map<std::string, uint8_t> dts = {
        {"byte", dtype::kByte},
        {"int32", dtype::kInt32},
        {"float32", dtype::kFloat32}};
    if (!ops.count(args.simd_op)) die("bad_args", "unknown simd op");
    if (!dts.count(args.dtype_name)) die("bad_args", "unknown dtype");
    p.opcode = ops.at(args.simd_op);
    p.dtype = dts.at(args.dtype_name);
    p.address = args.addr;
    p.payload = parse_hex_or_die(args.data_hex);
    p.length = uint32_t(p.payload.size());
    if (args.target_packet) p.flags |= flags::kTargetPacket;
  } else if (verb == "hash") {
    p.opcode = op::kBlockHash;
    p.address = args.addr;
    p.length = uint32_t(args.len);
  } else {
    die("bad_args", "unknown client verb " + verb);
  }
  try {
    double latency_us = 0;
    NetdamPacket ack = run_client_request(args, std::move(p), latency_us);
    return finish_client(args, ack, latency_us);
  } catch (const TransportError& e) {
    die("exhausted", e.what(), 4);
  } catch (const WireError& e) {
    die("wire", e.what());
  }
}

// ---------------------------------------------------------------------------
// pool
// ---------------------------------------------------------------------------

struct PoolArgs {
  std::string nodes;
  uint64_t block_size = 8192;
  uint64_t blocks_per_device = 1024;
  uint64_t global = 0;
  uint64_t len = 0;
  std::string data_hex;
  std::string out_file;
  uint64_t timeout_ms = 200;
  int attempts = 8;
  bool json_out = false;
  std::string config_path;
};

int cmd_pool(const std::string& verb, PoolArgs args) {
  if (!args.config_path.empty()) {
    std::map<std::string, std::string> kv;
    apply_config_overrides(args.config_path, kv);
    if (kv.count("nodes")) args.nodes = kv["nodes"];
    if (kv.count("block_size")) args.block_size = std::stoull(kv["block_size"]);
    if (kv.count("blocks_per_device"))
      args.blocks_per_device = std::stoull(kv["blocks_per_device"]);
    if (kv.count("timeout_ms")) args.timeout_ms = std::stoull(kv["timeout_ms"]);
    if (kv.count("attempts")) args.attempts = std::stoi(kv["attempts"]);
  }
  auto nodes = parse_nodes_or_die(args.nodes);
  try {
    PoolLayout layout(nodes, args.block_size, args.blocks_per_device);
    UdpCarrier carrier(Endpoint::from_octets(0, 0, 0, 0, 0));
    Requester rq(carrier, RetransmitOptions{Micros(args.timeout_ms * 1000),
                                            args.attempts});
    PoolClient pool(rq, layout);
    if (verb == "write") {
      Bytes data = parse_hex_or_die(args.data_hex);
      pool.write(args.global, data);
      json j{{"written", data.size()}, {"global", args.global}};
      std::cout << (args.json_out ? j.dump() : "wrote " +
                    std::to_string(data.size()) + " bytes at g=" +
                    std::to_string(args.global))
                << std::endl;
    } else {
      Bytes data = pool.read(args.global, args.len);
      if (!args.out_file.empty()) {
        std::ofstream out(args.out_file, std::ios::binary);
        out.write(reinterpret_cast<const char*>(data.data()),
                  std::streamsize(data.size()));
      } else if (args.json_out) {
        std::cout << json{{"payload_hex", to_hex(data)}}.dump() << std::endl;
      } else {
        std::cout << to_hex(data) << std::endl;
      }
    }
    return 0;
  } catch (const PoolError& e) {
    die("pool", e.what());
  } catch (const TransportError& e) {
    die("exhausted", e.what(), 4);
  }
}

// ---------------------------------------------------------------------------
// bench latency
// ---------------------------------------------------------------------------

int cmd_bench(const std::string& endpoint, uint32_t size, uint32_t count,
              uint64_t addr, uint64_t timeout_ms, int attempts,
              bool json_out) {
  try {
    UdpCarrier carrier(Endpoint::from_octets(0, 0, 0, 0, 0));
    Requester rq(carrier,
                 RetransmitOptions{Micros(timeout_ms * 1000), attempts});
    BenchReport report = bench_latency(rq, parse_endpoint_or_die(endpoint),
                                       op::kRead, size, count, addr);
    if (json_out) {
      std::cout << report.to_json().dump() << std::endl;
    } else {
      std::printf(
          "ops=%llu mean=%.1fus p50=%.1fus p99=%.1fus max=%.1fus "
          "jitter=%.1fus losses=%llu bw=%.0fB/s\n",
          (unsigned long long)report.op_count, report.mean_us, report.p50_us,
          report.p99_us, report.max_us, report.jitter_us,
          (unsigned long long)report.losses, report.bandwidth_bytes_per_sec);
    }
    if (report.op_count == 0) die("exhausted", "no request completed", 4);
    return 0;
  } catch (const TransportError& e) {
    die("transport", e.what());
  }
}

// ---------------------------------------------------------------------------
// allreduce
// ---------------------------------------------------------------------------

struct AllreduceArgs {
  std::string nodes;
  uint64_t len = 1 << 20;
  uint32_t chunk = 2048;
  uint64_t seed = 42;
  uint64_t base = kReservedWindow;
  double sim_loss = 0, sim_dup = 0, sim_reorder = 0;
  bool force_sim = false;
  uint64_t timeout_ms = 50;
  int attempts = 16;
  bool json_out = false;
  std::string trace_path;
  std::string config_path;

  void apply_config() {
    if (config_path.empty()) return;
    std::map<std::string, std::string> kv;
    apply_config_overrides(config_path, kv);
    if (kv.count("nodes")) nodes = kv["nodes"];
    if (kv.count("len")) len = std::stoull(kv["len"]);
    if (kv.count("chunk")) chunk = uint32_t(std::stoul(kv["chunk"]));
    if (kv.count("seed")) seed = std::stoull(kv["seed"]);
    if (kv.count("base_addr")) base = std::stoull(kv["base_addr"]);
    if (kv.count("sim_loss")) sim_loss = std::stod(kv["sim_loss"]);
    if (kv.count("sim_dup")) sim_dup = std::stod(kv["sim_dup"]);
    if (kv.count("sim_reorder")) sim_reorder = std::stod(kv["sim_reorder"]);
    if (kv.count("timeout_ms")) timeout_ms = std::stoull(kv["timeout_ms"]);
    if (kv.count("attempts")) attempts = std::stoi(kv["attempts"]);
    if (kv.count("trace")) trace_path = kv["trace"];
  }
};

// Deterministic per-node vectors: node i uses seed base+i.
std::vector<float> node_vector(const AllreduceArgs& args, size_t node,
                               size_t len) {
  std::mt19937_64 rng(args.seed + node);
  std::vector<float> v(len);
  for (auto& x : v) {
    uint32_t u = uint32_t(rng() >> 40);
    x = float(u) * (1.0f / 8388608.0f) - 1.0f;
  }
  return v;
}

int run_allreduce_against(Requester& rq, const std::vector<Endpoint>& nodes,
                          const AllreduceArgs& args,
                          const std::function<void()>& load_vectors) {
  load_vectors();

  CollectiveOptions opts;
  opts.chain_attempts = args.attempts;
  opts.chain_timeout = Micros(args.timeout_ms * 1000);
  opts.status_poll_interval = Micros(args.timeout_ms * 500);
  opts.rpc = RetransmitOptions{Micros(args.timeout_ms * 1000), args.attempts};

  CollectiveResult result;
  try {
    result = allreduce(rq, nodes, uint32_t(args.len), args.chunk, opts,
                       args.base);
  } catch (const CollectiveError& e) {
    die("collective", e.what(), 4);
  }

  // oracle verification: ring-order scalar sums computed locally
  std::vector<std::vector<float>> inputs;
  for (size_t i = 0; i < nodes.size(); ++i)
    inputs.push_back(node_vector(args, i, args.len));
  std::vector<float> expected(args.len);
  size_t n = nodes.size();
  size_t nchunks = (args.len + args.chunk - 1) / args.chunk;
  for (size_t c = 0; c < nchunks; ++c) {
    size_t origin = c % n;
    size_t begin = c * args.chunk;
    size_t end = std::min<size_t>(args.len, begin + args.chunk);
    for (size_t i = begin; i < end; ++i) {
      float acc = inputs[origin][i];
      for (size_t k = 1; k < n; ++k) acc += inputs[(origin + k) % n][i];
      expected[i] = acc;
    }
  }

  bool verified = result.success;
  for (size_t i = 0; verified && i < nodes.size(); ++i) {
    // read back the full vector in payload-sized strides
    std::vector<float> got(args.len);
    uint64_t remaining = args.len * 4;
    uint64_t offset = 0;
    while (remaining > 0) {
      uint32_t take = uint32_t(std::min<uint64_t>(remaining, kMaxPayload));
      NetdamPacket r;
      r.opcode = op::kRead;
      r.flags = flags::kReliable;
      r.address = args.base + offset;
      r.length = take;
      NetdamPacket ack;
      try {
        ack = reliable_request(rq, nodes[i], std::move(r));
      } catch (const TransportError& e) {
        die("exhausted", e.what(), 4);
      }
      if (Status(ack.status) != Status::kOk)
        die("device_status", to_string(Status(ack.status)), 3);
      std::memcpy(reinterpret_cast<uint8_t*>(got.data()) + offset,
                  ack.payload.data(), take);
      offset += take;
      remaining -= take;
    }
    for (size_t e = 0; e < args.len; ++e) {
      if (std::memcmp(&got[e], &expected[e], 4) != 0) {
        verified = false;
        break;
      }
    }
  }

  json j = result.to_json();
  j["verified"] = verified;
  j["vector_length"] = args.len;
  j["chunk_elems"] = args.chunk;
  j["nodes"] = nodes.size();
  j["seed"] = args.seed;
  if (args.json_out) {
    std::cout << j.dump() << std::endl;
  } else {
    std::cout << (verified ? "PASS" : "FAIL") << " len=" << args.len
              << " chunk=" << args.chunk << " nodes=" << nodes.size()
              << " elapsed_us=" << result.elapsed.count()
              << " retries=" << result.total_retries
              << " bw=" << uint64_t(result.bandwidth_bytes_per_sec()) << "B/s"
              << std::endl;
  }
  if (!verified) die("verification_failed", "output differs from oracle", 5);
  return 0;
}

int cmd_allreduce(AllreduceArgs args) {
  args.apply_config();
  bool harness = args.force_sim || args.sim_loss > 0 || args.sim_dup > 0 ||
                 args.sim_reorder > 0;
  if (harness) {
    // self-contained simulated ring
    SimNetConfig cfg;
    cfg.loss = args.sim_loss;
    cfg.duplicate = args.sim_dup;
    cfg.reorder = args.sim_reorder;
    cfg.seed = args.seed;
    cfg.delay_fixed_us = 100;
    cfg.record_trace = !args.trace_path.empty();
    SimNet net(cfg);
    size_t n = args.nodes.empty() ? 4 : parse_nodes_or_die(args.nodes).size();
    uint64_t need = args.base + args.len * 4;
    DeviceConfig dev_cfg;
    dev_cfg.mem_size = std::max<uint64_t>(need, 1 << 20);
    std::vector<std::unique_ptr<Device>> devices;
    std::vector<Endpoint> endpoints;
    for (size_t i = 0; i < n; ++i) {
      devices.push_back(std::make_unique<Device>(
          Endpoint::from_octets(10, 0, 0, uint8_t(i + 1), 9000), dev_cfg));
      net.attach_device(*devices.back());
      endpoints.push_back(devices.back()->endpoint());
    }
    SimCarrier carrier = net.attach(Endpoint::from_octets(10, 0, 0, 200, 7000));
    Requester rq(carrier, RetransmitOptions{Micros(args.timeout_ms * 1000),
                                            args.attempts});
    struct TraceDump {
      SimNet& net;
      std::string path;
      ~TraceDump() {
        if (path.empty()) return;
        std::ofstream out(path);
        net.dump_trace_jsonl(out);
      }
    } trace_dump{net, args.trace_path};
    return run_allreduce_against(rq, endpoints, args, [&] {
      for (size_t i = 0; i < n; ++i) {
        auto v = node_vector(args, i, args.len);
        Bytes bytes(v.size() * 4);
        std::memcpy(bytes.data(), v.data(), bytes.size());
        devices[i]->poke(args.base, bytes);
      }
    });
  }

  // UDP mode against running daemons
  auto nodes = parse_nodes_or_die(args.nodes);
  if (nodes.size() < 2) die("bad_args", "need at least 2 nodes");
  try {
    UdpCarrier carrier(Endpoint::from_octets(0, 0, 0, 0, 0));
    Requester rq(carrier, RetransmitOptions{Micros(args.timeout_ms * 1000),
                                            args.attempts});
    return run_allreduce_against(rq, nodes, args, [&] {
      // load vectors with reliable writes in payload-sized strides
      for (size_t i = 0; i < nodes.size(); ++i) {
        auto v = node_vector(args, i, args.len);
        uint64_t total = v.size() * 4;
        uint64_t offset = 0;
        while (offset < total) {
          uint32_t take = uint32_t(std::min<uint64_t>(total - offset,
                                                      kMaxPayload));
          NetdamPacket w;
          w.opcode = op::kWrite;
          w.flags = flags::kReliable;
          w.address = args.base + offset;
          w.length = take;
          w.payload.assign(
              reinterpret_cast<const uint8_t*>(v.data()) + offset,
              reinterpret_cast<const uint8_t*>(v.data()) + offset + take);
          auto ack = reliable_request(rq, nodes[i], std::move(w));
          if (Status(ack.status) != Status::kOk)
            die("device_status", to_string(Status(ack.status)), 3);
          offset += take;
        }
      }
    });
  } catch (const TransportError& e) {
    die("transport", e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NetDAM: programmable network-attached memory over UDP"};
  app.require_subcommand(1);

  // daemon
  DaemonConfig daemon_cfg;
  auto* daemon = app.add_subcommand("daemon", "run a device daemon");
  daemon->add_option("--endpoint", daemon_cfg.endpoint, "listen ip:port")
      ->envname("NETDAM_ENDPOINT");
  daemon->add_option("--mem-size", daemon_cfg.mem_size, "memory bytes")
      ->envname("NETDAM_MEM_SIZE");
  daemon->add_option("--queue-depth", daemon_cfg.queue_depth, "queue depth");
  daemon->add_option("--acl", daemon_cfg.acl_path, "ACL rule file");
  daemon->add_option("--stats-dump", daemon_cfg.stats_dump,
                     "write stats JSON here on shutdown");
  daemon->add_option("--config", daemon_cfg.config_path,
                     "key=value file; overrides flags");

  // client
  std::string client_verb;
  ClientArgs cl;
  auto* client = app.add_subcommand("client", "issue one instruction");
  client->add_option("verb", client_verb,
                     "read|write|cas|memcopy|simd|hash")->required();
  client->add_option("--endpoint", cl.endpoint, "device ip:port")
      ->required()
      ->envname("NETDAM_ENDPOINT");
  client->add_option("--addr", cl.addr, "device-local address");
  client->add_option("--len", cl.len, "byte count");
  client->add_option("--data", cl.data_hex, "payload hex");
  client->add_option("--compare", cl.compare, "cas compare value");
  client->add_option("--swap", cl.swap_value, "cas swap value");
  client->add_option("--src", cl.src, "memcopy source address");
  client->add_option("--dst", cl.dst, "memcopy destination address");
  client->add_option("--op", cl.simd_op, "simd op: add|sub|mul|xor|min|max");
  client->add_option("--dtype", cl.dtype_name, "byte|int32|float32");
  client->add_flag("--target-packet", cl.target_packet,
                   "simd chain mode: result into packet");
  client->add_option("--timeout-ms", cl.timeout_ms, "per-attempt timeout");
  client->add_option("--attempts", cl.attempts,
                     "max attempts; retransmission can repeat non-idempotent "
                     "ops (memcopy, simd accumulate), use 1 for at-most-once");
  client->add_flag("--json", cl.json_out, "JSON output");

  // pool
  std::string pool_verb;
  PoolArgs pool_args;
  auto* pool = app.add_subcommand("pool", "interleaved pool transfer");
  pool->add_option("verb", pool_verb, "read|write")->required();
  pool->add_option("--nodes", pool_args.nodes, "comma list of ip:port")
      ->envname("NETDAM_NODES");
  pool->add_option("--block-size", pool_args.block_size, "interleave block");
  pool->add_option("--blocks-per-device", pool_args.blocks_per_device,
                   "pool span per device in blocks");
  pool->add_option("--global", pool_args.global, "global byte offset");
  pool->add_option("--len", pool_args.len, "read length");
  pool->add_option("--data", pool_args.data_hex, "write payload hex");
  pool->add_option("--out", pool_args.out_file, "write read bytes here");
  pool->add_option("--timeout-ms", pool_args.timeout_ms, "");
  pool->add_option("--attempts", pool_args.attempts, "");
  pool->add_flag("--json", pool_args.json_out, "JSON output");
  pool->add_option("--config", pool_args.config_path,
                   "key=value file; overrides flags");

  // bench
  std::string bench_endpoint;
  uint32_t bench_size = 128, bench_count = 1000;
  uint64_t bench_addr = kReservedWindow, bench_timeout = 200;
  int bench_attempts = 8;
  bool bench_json = false;
  auto* bench = app.add_subcommand("bench", "benchmarks");
  auto* bench_lat = bench->add_subcommand("latency", "request latency probe");
  bench_lat->add_option("--endpoint", bench_endpoint, "device ip:port")
      ->required()
      ->envname("NETDAM_ENDPOINT");
  bench_lat->add_option("--size", bench_size,
                        "read size in bytes (default 128 = 32 x float32)");
  bench_lat->add_option("--count", bench_count, "request count");
  bench_lat->add_option("--addr", bench_addr, "read address");
  bench_lat->add_option("--timeout-ms", bench_timeout, "");
  bench_lat->add_option("--attempts", bench_attempts, "");
  bench_lat->add_flag("--json", bench_json, "JSON output");

  // allreduce
  AllreduceArgs ar;
  auto* allred = app.add_subcommand("allreduce",
                                    "ring allreduce across devices");
  allred->add_option("--nodes", ar.nodes, "comma list of ip:port")
      ->envname("NETDAM_NODES");
  allred->add_option("--len", ar.len, "vector length in float32 elements");
  allred->add_option("--chunk", ar.chunk, "chunk elements (max 2048)");
  allred->add_option("--seed", ar.seed, "vector seed (node i uses seed+i)");
  allred->add_option("--base-addr", ar.base, "vector base address");
  allred->add_option("--sim-loss", ar.sim_loss, "harness mode: loss prob");
  allred->add_option("--sim-dup", ar.sim_dup, "harness mode: dup prob");
  allred->add_option("--sim-reorder", ar.sim_reorder,
                     "harness mode: reorder prob");
  allred->add_flag("--sim", ar.force_sim, "harness mode with loss 0");
  allred->add_option("--timeout-ms", ar.timeout_ms, "chain re-emit timeout");
  allred->add_option("--attempts", ar.attempts, "chain attempts");
  allred->add_flag("--json", ar.json_out, "JSON output");
  allred->add_option("--trace", ar.trace_path,
                     "harness mode: dump the packet trace as JSON-lines");
  allred->add_option("--config", ar.config_path,
                     "key=value file; overrides flags");

  CLI11_PARSE(app, argc, argv);

  try {
    if (daemon->parsed()) return cmd_daemon(daemon_cfg);
    if (client->parsed()) return cmd_client(client_verb, cl);
    if (pool->parsed()) return cmd_pool(pool_verb, pool_args);
    if (bench->parsed())
      return cmd_bench(bench_endpoint, bench_size, bench_count, bench_addr,
                       bench_timeout, bench_attempts, bench_json);
    if (allred->parsed()) return cmd_allreduce(ar);
    std::cerr << "error: bad_args: no subcommand\n";
    return 1;
  } catch (const CliExit& e) {
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
}
