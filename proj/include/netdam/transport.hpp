#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "netdam/device.hpp"
#include "netdam/types.hpp"
#include "netdam/wire.hpp"

namespace netdam {

using Micros = std::chrono::microseconds;

enum class TransportErrc {
  kTooBig,
  kBindFailure,
  kSocket,
  kExhausted,
  kCapacityExceeded,
};

class TransportError : public std::runtime_error {
 public:
  TransportError(TransportErrc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  TransportErrc code() const { return code_; }

 private:
  TransportErrc code_;
};

struct Datagram {
  Endpoint source;
  Bytes frame;
};

/// Unreliable, unordered, at-most-once datagram transport. A carrier never
/// duplicates on its own; duplication comes from retransmission above it or
/// from configured simulation.
class Carrier {
 public:
  virtual ~Carrier() = default;
  virtual Endpoint local() const = 0;
  virtual void send(const Endpoint& dst, std::span<const uint8_t> frame) = 0;
  virtual std::optional<Datagram> recv(Micros timeout) = 0;
  virtual Micros now() = 0;
};

// ============================================================================
// Deterministic in-process network simulator
// ============================================================================
// Single-threaded. Virtual time advances only through recv() waits and
// explicit pumps; identical seeds and send schedules yield identical delivery
// traces. Devices attach as inline handlers executed at delivery time; client
// endpoints get mailboxes drained through SimCarrier::recv.

struct SimNetConfig {
  double loss = 0.0;
  double reorder = 0.0;
  double duplicate = 0.0;
  uint64_t delay_fixed_us = 100;
  uint64_t delay_jitter_us = 0;
  uint64_t seed = 1;
  int force_duplicates = 0;  // extra copies of every delivered packet
  bool record_trace = false;
};

struct TraceEvent {
  uint64_t t_us = 0;
  const char* kind = "";  // send | deliver | drop | dup
  Endpoint src;
  Endpoint dst;
  size_t size = 0;
  uint64_t frame_hash = 0;

  nlohmann::json to_json() const {
    return {{"t_us", t_us},         {"kind", kind},
            {"src", src.to_string()}, {"dst", dst.to_string()},
            {"size", size},         {"frame_hash", frame_hash}};
  }
};

class SimNet;

class SimCarrier : public Carrier {
 public:
  SimCarrier(SimNet& net, Endpoint self) : net_(&net), self_(self) {}
  Endpoint local() const override { return self_; }
  void send(const Endpoint& dst, std::span<const uint8_t> frame) override;
  std::optional<Datagram> recv(Micros timeout) override;
  Micros now() override;

 private:
  SimNet* net_;
  Endpoint self_;
};

class SimNet {
 public:
  explicit SimNet(SimNetConfig config = {})
      : config_(config), rng_(config.seed) {}

  SimNetConfig& config() { return config_; }
  Micros now() const { return Micros(now_us_); }

  /// Creates a mailbox-backed carrier for a client endpoint.
  SimCarrier attach(Endpoint e) {
    mailboxes_.try_emplace(e);
    return SimCarrier(*this, e);
  }

  /// Wires a device as an inline packet handler: deliveries execute the
  /// device pipeline immediately and its outputs re-enter the network.
  void attach_device(Device& dev) {
    Endpoint self = dev.endpoint();
    handlers_[self] = [this, &dev, self](const Endpoint& src,
                                         const Bytes& frame) {
      for (auto& out : dev.on_datagram(src, frame))
        send(self, out.dest, encode_packet(out.packet));
    };
  }

  void send(const Endpoint& src, const Endpoint& dst,
            std::span<const uint8_t> frame) {
    if (frame.size() > kMaxDatagram)
      throw TransportError(TransportErrc::kTooBig,
                           "datagram exceeds 9000 bytes");
    trace("send", src, dst, frame);
    if (chance(config_.loss)) {
      ++dropped_;
      trace("drop", src, dst, frame);
      return;
    }
    schedule(src, dst, frame);
    for (int i = 0; i < config_.force_duplicates; ++i) {
      trace("dup", src, dst, frame);
      schedule(src, dst, frame);
    }
    if (chance(config_.duplicate)) {
      trace("dup", src, dst, frame);
      schedule(src, dst, frame);
    }
  }

  /// Processes all deliveries due at or before `t`, then sets now = t.
  void pump_until(uint64_t t_us) {
    while (!events_.empty()) {
      auto it = events_.begin();
      if (it->first.first > t_us) break;
      Event ev = std::move(it->second);
      now_us_ = std::max(now_us_, it->first.first);
      events_.erase(it);
      deliver(ev);
    }
    now_us_ = std::max(now_us_, t_us);
  }

  /// Runs the event loop until the predicate holds or virtual `deadline_us`
  /// passes. Returns whether the predicate held.
  bool run_until(uint64_t deadline_us, const std::function<bool()>& pred) {
    while (true) {
      if (pred()) return true;
      if (events_.empty()) {
        now_us_ = std::max(now_us_, deadline_us);
        return pred();
      }
      uint64_t next = events_.begin()->first.first;
      if (next > deadline_us) {
        now_us_ = deadline_us;
        return pred();
      }
      pump_until(next);
    }
  }

  std::optional<Datagram> recv_mailbox(const Endpoint& self, Micros timeout) {
    uint64_t deadline = now_us_ + uint64_t(timeout.count());
    auto& box = mailboxes_[self];
    run_until(deadline, [&] { return !box.empty(); });
    if (box.empty()) return std::nullopt;
    Datagram d = std::move(box.front());
    box.pop_front();
    return d;
  }

  uint64_t dropped() const { return dropped_; }
  const std::vector<TraceEvent>& trace_events() const { return trace_; }

  void dump_trace_jsonl(std::ostream& os) const {
    for (const auto& ev : trace_) os << ev.to_json().dump() << "\n";
  }

 private:
  struct Event {
    Endpoint src;
    Endpoint dst;
    Bytes frame;
  };

  void schedule(const Endpoint& src, const Endpoint& dst,
                std::span<const uint8_t> frame) {
    uint64_t delay = config_.delay_fixed_us + draw(config_.delay_jitter_us);
    if (chance(config_.reorder))
      delay += 1 + draw(4 * (config_.delay_fixed_us + config_.delay_jitter_us) +
                        1000);
    events_.emplace(std::make_pair(now_us_ + delay, next_event_id_++),
                    Event{src, dst, Bytes(frame.begin(), frame.end())});
  }

  void deliver(const Event& ev) {
    trace("deliver", ev.src, ev.dst, ev.frame);
    if (auto h = handlers_.find(ev.dst); h != handlers_.end()) {
      h->second(ev.src, ev.frame);
      return;
    }
    if (auto m = mailboxes_.find(ev.dst); m != mailboxes_.end()) {
      m->second.push_back(Datagram{ev.src, ev.frame});
      return;
    }
    ++dropped_;  // nobody home
  }

  bool chance(double p) {
    if (p <= 0.0) return false;
    if (p >= 1.0) return true;
    return double(rng_() >> 11) * 0x1.0p-53 < p;
  }

  uint64_t draw(uint64_t upper_inclusive) {
    if (upper_inclusive == 0) return 0;
    return rng_() % (upper_inclusive + 1);
  }

  void trace(const char* kind, const Endpoint& src, const Endpoint& dst,
             std::span<const uint8_t> frame) {
    if (!config_.record_trace) return;
    trace_.push_back(TraceEvent{now_us_, kind, src, dst, frame.size(),
                                compute_block_hash(frame)});
  }

  SimNetConfig config_;
  std::mt19937_64 rng_;
  uint64_t now_us_ = 0;
  uint64_t next_event_id_ = 0;
  uint64_t dropped_ = 0;
  std::map<std::pair<uint64_t, uint64_t>, Event> events_;
  std::unordered_map<Endpoint, std::deque<Datagram>, EndpointHash> mailboxes_;
  std::unordered_map<Endpoint, std::function<void(const Endpoint&, const Bytes&)>,
                     EndpointHash>
      handlers_;
  std::vector<TraceEvent> trace_;
};

inline void SimCarrier::send(const Endpoint& dst,
                             std::span<const uint8_t> frame) {
  net_->send(self_, dst, frame);
}
inline std::optional<Datagram> SimCarrier::recv(Micros timeout) {
  return net_->recv_mailbox(self_, timeout);
}
inline Micros SimCarrier::now() { return net_->now(); }

// ============================================================================
// UDP carrier
// ============================================================================

class UdpCarrier : public Carrier {
 public:
  /// Binds the endpoint; port 0 picks an ephemeral port.
  explicit UdpCarrier(Endpoint bind_to) {
    fd_ = ::socket(AF_INET, SOCK_DGRAM, 0);
    if (fd_ < 0)
      throw TransportError(TransportErrc::kSocket, "socket() failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(bind_to.ip);
    addr.sin_port = htons(bind_to.port);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw TransportError(TransportErrc::kBindFailure,
                           "cannot bind " + bind_to.to_string());
    }
    sockaddr_in bound{};
    socklen_t len = sizeof(bound);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&bound), &len);
    local_ = Endpoint{ntohl(bound.sin_addr.s_addr), ntohs(bound.sin_port)};
  }

  UdpCarrier(const UdpCarrier&) = delete;
  UdpCarrier& operator=(const UdpCarrier&) = delete;
  ~UdpCarrier() override {
    if (fd_ >= 0) ::close(fd_);
  }

  Endpoint local() const override { return local_; }

  void send(const Endpoint& dst, std::span<const uint8_t> frame) override {
    if (frame.size() > kMaxDatagram)
      throw TransportError(TransportErrc::kTooBig,
                           "datagram exceeds 9000 bytes");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(dst.ip);
    addr.sin_port = htons(dst.port);
    ::sendto(fd_, frame.data(), frame.size(), 0,
             reinterpret_cast<sockaddr*>(&addr), sizeof(addr));
  }

  std::optional<Datagram> recv(Micros timeout) override {
    pollfd pfd{fd_, POLLIN, 0};
    int ms = int(std::chrono::duration_cast<std::chrono::milliseconds>(timeout)
                     .count());
    int rc = ::poll(&pfd, 1, std::max(ms, 0));
    if (rc <= 0) return std::nullopt;
    Bytes buf(kMaxDatagram);
    sockaddr_in from{};
    socklen_t fromlen = sizeof(from);
    ssize_t n = ::recvfrom(fd_, buf.data(), buf.size(), 0,
                           reinterpret_cast<sockaddr*>(&from), &fromlen);
    if (n < 0) return std::nullopt;
    buf.resize(size_t(n));
    return Datagram{Endpoint{ntohl(from.sin_addr.s_addr), ntohs(from.sin_port)},
                    std::move(buf)};
  }

  Micros now() override {
    return std::chrono::duration_cast<Micros>(
        std::chrono::steady_clock::now().time_since_epoch());
  }

 private:
  int fd_ = -1;
  Endpoint local_;
};

/// Blocking receive-execute-reply loop binding a Device to a UdpCarrier.
/// One thread per node; the device pipeline stays single-context.
class UdpNode {
 public:
  UdpNode(Device& device, UdpCarrier& carrier)
      : device_(device), carrier_(carrier) {}

  void serve() {
    running_ = true;
    while (running_) {
      auto dgram = carrier_.recv(Micros(100'000));
      if (!dgram) continue;
      for (auto& out : device_.on_datagram(dgram->source, dgram->frame))
        carrier_.send(out.dest, encode_packet(out.packet));
    }
  }

  void stop() { running_ = false; }

 private:
  Device& device_;
  UdpCarrier& carrier_;
  volatile bool running_ = false;
};

}  // namespace netdam
