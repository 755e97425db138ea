#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "netdam/isa.hpp"
#include "netdam/types.hpp"

namespace netdam {

// ============================================================================
// Block-interleaved global pool
// ============================================================================

enum class PoolErrc { kOutOfPool, kOutOfMemoryPool, kUnknownRegion, kDoubleFree,
                      kBadParams };

class PoolError : public std::runtime_error {
 public:
  PoolError(PoolErrc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  PoolErrc code() const { return code_; }

 private:
  PoolErrc code_;
};

/// Where a global address lands: device index + pool-relative local offset.
struct LocalRef {
  size_t device = 0;
  uint64_t local = 0;
  bool operator==(const LocalRef&) const = default;
};

/// Round-robin block interleave of a global address space over an ordered
/// device list. Local offsets are pool-relative; on the wire they sit above
/// the reserved queue window (see pool_base_address).
class PoolLayout {
 public:
  PoolLayout(std::vector<Endpoint> devices, uint64_t block_size,
             uint64_t blocks_per_device)
      : devices_(std::move(devices)),
        block_size_(block_size),
        span_(block_size * blocks_per_device) {
    if (devices_.empty() || block_size_ == 0 || block_size_ % 4 != 0 ||
        blocks_per_device == 0)
      throw PoolError(PoolErrc::kBadParams, "bad pool layout parameters");
  }

  const std::vector<Endpoint>& devices() const { return devices_; }
  uint64_t block_size() const { return block_size_; }
  uint64_t device_span() const { return span_; }
  uint64_t total_size() const { return span_ * devices_.size(); }

  LocalRef map_global(uint64_t g) const {
    if (g >= total_size())
      throw PoolError(PoolErrc::kOutOfPool, "global address out of pool");
    const uint64_t b = block_size_;
    const uint64_t n = devices_.size();
    return LocalRef{size_t((g / b) % n), (g / (b * n)) * b + g % b};
  }

  uint64_t inverse_map(size_t device, uint64_t local) const {
    if (device >= devices_.size() || local >= span_)
      throw PoolError(PoolErrc::kOutOfPool, "local address out of pool");
    const uint64_t b = block_size_;
    const uint64_t n = devices_.size();
    return (local / b) * (b * n) + device * b + local % b;
  }

  /// First device-local byte address usable by the pool.
  static constexpr uint64_t pool_base_address() { return kReservedWindow; }

 private:
  std::vector<Endpoint> devices_;
  uint64_t block_size_;
  uint64_t span_;
};

/// One wire request worth of an interleaved transfer.
struct PoolPiece {
  size_t device = 0;
  uint64_t local = 0;       // pool-relative
  uint64_t global = 0;      // first global byte covered
  uint32_t length = 0;
  bool operator==(const PoolPiece&) const = default;
};

/// Splits [g, g+length) at block boundaries and merges locally-contiguous
/// runs per device, capping each piece at the payload limit. Pieces come out
/// in global-address order, which is also reassembly order for reads.
inline std::vector<PoolPiece> plan_interleaved(const PoolLayout& layout,
                                               uint64_t g, uint64_t length) {
  if (length > layout.total_size() || g > layout.total_size() - length)
    throw PoolError(PoolErrc::kOutOfPool, "range out of pool");
  std::vector<PoolPiece> pieces;
  uint64_t pos = g;
  uint64_t remaining = length;
  while (remaining > 0) {
    LocalRef ref = layout.map_global(pos);
    uint64_t in_block = layout.block_size() - pos % layout.block_size();
    uint64_t take = std::min({remaining, in_block, uint64_t(kMaxPayload)});
    if (!pieces.empty() && pieces.back().device == ref.device &&
        pieces.back().local + pieces.back().length == ref.local &&
        pieces.back().length + take <= kMaxPayload) {
      pieces.back().length += uint32_t(take);
    } else {
      pieces.push_back(PoolPiece{ref.device, ref.local, pos, uint32_t(take)});
    }
    pos += take;
    remaining -= take;
  }
  return pieces;
}

// ============================================================================
// Controller-side allocation map
// ============================================================================

struct Region {
  uint64_t offset = 0;
  uint64_t size = 0;
  std::string owner;
};

/// First-fit allocator over the global pool at block granularity. Free
/// coalesces adjacent spans. Single-writer: callers serialize access.
class AllocationMap {
 public:
  AllocationMap(uint64_t pool_size, uint64_t block_size)
      : pool_size_(pool_size), block_size_(block_size) {
    free_.emplace(0, pool_size);
  }

  uint64_t allocate(uint64_t size, std::string owner = {}) {
    if (size == 0)
      throw PoolError(PoolErrc::kBadParams, "alloc of zero bytes");
    uint64_t rounded = (size + block_size_ - 1) / block_size_ * block_size_;
    for (auto it = free_.begin(); it != free_.end(); ++it) {
      if (it->second >= rounded) {
        uint64_t offset = it->first;
        uint64_t rest = it->second - rounded;
        free_.erase(it);
        if (rest > 0) free_.emplace(offset + rounded, rest);
        uint64_t id = next_id_++;
        regions_.emplace(id, Region{offset, rounded, std::move(owner)});
        return id;
      }
    }
    throw PoolError(PoolErrc::kOutOfMemoryPool, "pool exhausted");
  }

  void release(uint64_t id) {
    auto it = regions_.find(id);
    if (it == regions_.end()) {
      if (freed_.count(id))
        throw PoolError(PoolErrc::kDoubleFree, "region already freed");
      throw PoolError(PoolErrc::kUnknownRegion, "unknown region id");
    }
    uint64_t offset = it->second.offset;
    uint64_t size = it->second.size;
    regions_.erase(it);
    freed_.insert(id);
    auto [pos, ok] = free_.emplace(offset, size);
    (void)ok;
    // coalesce with successor, then predecessor
    auto next = std::next(pos);
    if (next != free_.end() && pos->first + pos->second == next->first) {
      pos->second += next->second;
      free_.erase(next);
    }
    if (pos != free_.begin()) {
      auto prev = std::prev(pos);
      if (prev->first + prev->second == pos->first) {
        prev->second += pos->second;
        free_.erase(pos);
      }
    }
  }

  const Region* region(uint64_t id) const {
    auto it = regions_.find(id);
    return it == regions_.end() ? nullptr : &it->second;
  }
  const std::map<uint64_t, uint64_t>& free_spans() const { return free_; }
  size_t live_regions() const { return regions_.size(); }

 private:
  uint64_t pool_size_;
  uint64_t block_size_;
  uint64_t next_id_ = 1;
  std::map<uint64_t, Region> regions_;       // id -> region
  std::map<uint64_t, uint64_t> free_;        // offset -> size
  std::set<uint64_t> freed_;
};

// ============================================================================
// Access control
// ============================================================================

struct AclRule {
  uint32_t prefix = 0;     // network address, host order
  uint8_t prefix_len = 0;  // 0..32
  uint64_t addr_lo = 0;
  uint64_t addr_hi = 0;    // exclusive
  std::vector<uint16_t> opcodes;

  bool matches_source(uint32_t ip) const {
    if (prefix_len == 0) return true;
    uint32_t mask = prefix_len >= 32 ? 0xFFFFFFFFu
                                     : ~((1u << (32 - prefix_len)) - 1);
    return (ip & mask) == (prefix & mask);
  }
};

class AclParseError : public std::runtime_error {
 public:
  AclParseError(int line, const std::string& what)
      : std::runtime_error("acl line " + std::to_string(line) + ": " + what),
        line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

/// Permit-rule table, default deny, first full match wins.
class AclTable {
 public:
  AclTable() = default;
  explicit AclTable(std::vector<AclRule> rules) : rules_(std::move(rules)) {}

  /// allow iff some rule matches the source prefix AND [addr, addr+length)
  /// is contained in the rule's range AND the opcode is in the rule's set.
  bool check(uint32_t source_ip, uint16_t opcode, uint64_t addr,
             uint64_t length) const {
    uint64_t hi;
    if (__builtin_add_overflow(addr, length, &hi)) return false;
    for (const AclRule& r : rules_) {
      if (!r.matches_source(source_ip)) continue;
      if (addr < r.addr_lo || hi > r.addr_hi) continue;
      if (std::find(r.opcodes.begin(), r.opcodes.end(), opcode) ==
          r.opcodes.end())
        continue;
      return true;
    }
    return false;
  }

  const std::vector<AclRule>& rules() const { return rules_; }

  /// One rule per line: `<cidr> <lo_hex>..<hi_hex> <op,op,...>`.
  /// '#' starts a comment; blank lines are skipped.
  static AclTable parse(std::istream& in) {
    std::vector<AclRule> rules;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      std::istringstream ls(line);
      std::string cidr, range, ops;
      if (!(ls >> cidr)) continue;  // blank
      if (!(ls >> range >> ops))
        throw AclParseError(lineno, "expected `<cidr> <lo>..<hi> <ops>`");
      std::string extra;
      if (ls >> extra) throw AclParseError(lineno, "trailing tokens");
      rules.push_back(parse_rule(cidr, range, ops, lineno));
    }
    return AclTable(std::move(rules));
  }

  static AclTable load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw AclParseError(0, "cannot open " + path);
    return parse(f);
  }

  static std::optional<uint16_t> opcode_by_name(const std::string& name) {
    static const std::map<std::string, uint16_t> table = {
        {"READ", op::kRead},
        {"WRITE", op::kWrite},
        {"CAS", op::kCas},
        {"MEMCOPY", op::kMemcopy},
        {"SIMD_ADD", op::kSimdAdd},
        {"SIMD_SUB", op::kSimdSub},
        {"SIMD_MUL", op::kSimdMul},
        {"SIMD_XOR", op::kSimdXor},
        {"SIMD_MIN", op::kSimdMin},
        {"SIMD_MAX", op::kSimdMax},
        {"BLOCK_HASH", op::kBlockHash},
        {"REDUCE_SCATTER_STEP", op::kReduceScatterStep},
        {"ALL_GATHER_STEP", op::kAllGatherStep},
        {"COLLECTIVE_STATUS", op::kCollectiveStatus},
    };
    auto it = table.find(name);
    if (it != table.end()) return it->second;
    if (name.rfind("0x", 0) == 0 || name.rfind("0X", 0) == 0) {
      try {
        unsigned long v = std::stoul(name.substr(2), nullptr, 16);
        if (v <= 0xFFFF) return uint16_t(v);
      } catch (const std::exception&) {
      }
    }
    return std::nullopt;
  }

 private:
  static AclRule parse_rule(const std::string& cidr, const std::string& range,
                            const std::string& ops, int lineno) {
    AclRule r;
    auto slash = cidr.find('/');
    std::string ip_part = slash == std::string::npos ? cidr
                                                     : cidr.substr(0, slash);
    auto ip = Endpoint::parse_ipv4(ip_part);
    if (!ip) throw AclParseError(lineno, "bad IPv4 address `" + ip_part + "`");
    r.prefix = *ip;
    if (slash == std::string::npos) {
      r.prefix_len = 32;
    } else {
      try {
        int len = std::stoi(cidr.substr(slash + 1));
        if (len < 0 || len > 32) throw std::out_of_range("len");
        r.prefix_len = uint8_t(len);
      } catch (const std::exception&) {
        throw AclParseError(lineno, "bad prefix length in `" + cidr + "`");
      }
    }
    auto dots = range.find("..");
    if (dots == std::string::npos)
      throw AclParseError(lineno, "range must be `<lo_hex>..<hi_hex>`");
    auto hex = [&](std::string s) -> uint64_t {
      if (s.rfind("0x", 0) == 0 || s.rfind("0X", 0) == 0) s.erase(0, 2);
      if (s.empty()) throw AclParseError(lineno, "empty hex value");
      try {
        return std::stoull(s, nullptr, 16);
      } catch (const std::exception&) {
        throw AclParseError(lineno, "bad hex value `" + s + "`");
      }
    };
    r.addr_lo = hex(range.substr(0, dots));
    r.addr_hi = hex(range.substr(dots + 2));
    if (r.addr_lo > r.addr_hi)
      throw AclParseError(lineno, "range lo > hi");
    std::istringstream os(ops);
    std::string tok;
    while (std::getline(os, tok, ',')) {
      auto code = opcode_by_name(tok);
      if (!code) throw AclParseError(lineno, "unknown opcode `" + tok + "`");
      r.opcodes.push_back(*code);
    }
    if (r.opcodes.empty()) throw AclParseError(lineno, "empty opcode list");
    return r;
  }

  std::vector<AclRule> rules_;
};

}  // namespace netdam
