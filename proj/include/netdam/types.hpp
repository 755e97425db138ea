#pragma once

#include <charconv>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace netdam {

using Bytes = std::vector<uint8_t>;

/// IPv4/UDP endpoint, address in host byte order.
struct Endpoint {
  uint32_t ip = 0;
  uint16_t port = 0;

  auto operator<=>(const Endpoint&) const = default;

  static constexpr Endpoint from_octets(uint8_t a, uint8_t b, uint8_t c,
                                        uint8_t d, uint16_t port) {
    return Endpoint{(uint32_t(a) << 24) | (uint32_t(b) << 16) |
                        (uint32_t(c) << 8) | uint32_t(d),
                    port};
  }

  // "a.b.c.d:port"
  static std::optional<Endpoint> parse(std::string_view text) {
    auto colon = text.rfind(':');
    if (colon == std::string_view::npos) return std::nullopt;
    auto ip = parse_ipv4(text.substr(0, colon));
    if (!ip) return std::nullopt;
    uint16_t port = 0;
    auto ps = text.substr(colon + 1);
    auto [end, ec] = std::from_chars(ps.data(), ps.data() + ps.size(), port);
    if (ec != std::errc{} || end != ps.data() + ps.size()) return std::nullopt;
    return Endpoint{*ip, port};
  }

  static std::optional<uint32_t> parse_ipv4(std::string_view text) {
    uint32_t ip = 0;
    size_t pos = 0;
    for (int i = 0; i < 4; ++i) {
      if (i > 0) {
        if (pos >= text.size() || text[pos] != '.') return std::nullopt;
        ++pos;
      }
      unsigned octet = 0;
      auto [end, ec] =
          std::from_chars(text.data() + pos, text.data() + text.size(), octet);
      if (ec != std::errc{} || octet > 255 || end == text.data() + pos)
        return std::nullopt;
      pos = end - text.data();
      ip = (ip << 8) | octet;
    }
    if (pos != text.size()) return std::nullopt;
    return ip;
  }

  std::string to_string() const {
    return std::to_string((ip >> 24) & 0xFF) + "." +
           std::to_string((ip >> 16) & 0xFF) + "." +
           std::to_string((ip >> 8) & 0xFF) + "." + std::to_string(ip & 0xFF) +
           ":" + std::to_string(port);
  }
};

struct EndpointHash {
  size_t operator()(const Endpoint& e) const {
    return std::hash<uint64_t>{}((uint64_t(e.ip) << 16) | e.port);
  }
};

// Frame and memory layout constants.
inline constexpr size_t kMaxDatagram = 9000;
inline constexpr size_t kMaxPayload = 8192;  // 2048 x float32
inline constexpr size_t kMaxSegments = 16;
inline constexpr uint64_t kReservedWindow = 64 * 1024;
inline constexpr uint64_t kRequestQueueAddr = 0xE000;
inline constexpr uint64_t kCompleteQueueAddr = 0xF000;

}  // namespace netdam
