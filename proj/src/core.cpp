#include "mobtool/core.hpp"

#include <arpa/inet.h>

#include <algorithm>
#include <charconv>

namespace mobtool {

std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::MALFORMED: return "MALFORMED";
    case Errc::DUPLICATE_REGISTRATION: return "DUPLICATE_REGISTRATION";
    case Errc::UNKNOWN_HANDLE: return "UNKNOWN_HANDLE";
    case Errc::INVALID_TRANSITION: return "INVALID_TRANSITION";
    case Errc::UNSUPPORTED_QUERY: return "UNSUPPORTED_QUERY";
    case Errc::NO_COMMON_TOOL: return "NO_COMMON_TOOL";
    case Errc::MANDATORY_FEATURE_UNAVAILABLE: return "MANDATORY_FEATURE_UNAVAILABLE";
    case Errc::ALREADY_INITIALIZED: return "ALREADY_INITIALIZED";
    case Errc::BAD_CONFIG: return "BAD_CONFIG";
    case Errc::NOT_INITIALIZED: return "NOT_INITIALIZED";
    case Errc::NO_SECURITY_ASSOC: return "NO_SECURITY_ASSOC";
    case Errc::EMPTY_TYPES: return "EMPTY_TYPES";
    case Errc::UNKNOWN_TRANSFER: return "UNKNOWN_TRANSFER";
    case Errc::BAD_STATE: return "BAD_STATE";
    case Errc::REJECTED_TYPES: return "REJECTED_TYPES";
    case Errc::DUPLICATE_CTYPE: return "DUPLICATE_CTYPE";
    case Errc::BAD_MAGIC: return "BAD_MAGIC";
    case Errc::BAD_VERSION: return "BAD_VERSION";
    case Errc::TRUNCATED: return "TRUNCATED";
    case Errc::TLV_OVERRUN: return "TLV_OVERRUN";
    case Errc::PARSE_ERROR: return "PARSE_ERROR";
    case Errc::UNKNOWN_NODE_REF: return "UNKNOWN_NODE_REF";
    case Errc::NEGATIVE_TIME: return "NEGATIVE_TIME";
    case Errc::TIME_LIMIT_EXCEEDED: return "TIME_LIMIT_EXCEEDED";
  }
  return "UNKNOWN";
}

std::string to_string(const NodeId& id) {
  if (id.instance == 0) return id.name;
  return id.name + "#" + std::to_string(id.instance);
}

// ---------------------------------------------------------------------------

std::string_view to_string(AddressFamily f) noexcept { return f == AddressFamily::V4 ? "V4" : "V6"; }

std::optional<AddressFamily> family_from_string(std::string_view s) noexcept {
  if (s == "V4" || s == "v4") return AddressFamily::V4;
  if (s == "V6" || s == "v6") return AddressFamily::V6;
  return std::nullopt;
}

Locator Locator::v4(std::array<std::uint8_t, 4> addr, std::uint16_t port) {
  Locator l;
  l.family_ = AddressFamily::V4;
  std::copy(addr.begin(), addr.end(), l.addr_.begin());
  l.port_ = port;
  return l;
}

Locator Locator::v6(std::array<std::uint8_t, 16> addr, std::uint16_t port) {
  Locator l;
  l.family_ = AddressFamily::V6;
  l.addr_ = addr;
  l.port_ = port;
  return l;
}

bool Locator::address_is_unspecified() const {
  return std::all_of(addr_.begin(), addr_.end(), [](std::uint8_t b) { return b == 0; });
}

Locator parse_locator(std::string_view text) {
  auto bad = [&](const char* why) { return Error(Errc::MALFORMED, std::string(why) + ": '" + std::string(text) + "'"); };
  if (text.size() < 3 || text[2] != ':') throw bad("missing family prefix");
  auto family = family_from_string(text.substr(0, 2));
  if (!family) throw bad("unknown family");
  auto rest = text.substr(3);
  auto colon = rest.rfind(':');
  if (colon == std::string_view::npos) throw bad("missing port");
  auto addr_text = std::string(rest.substr(0, colon));
  auto port_text = rest.substr(colon + 1);

  unsigned long port = 0;
  auto [ptr, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
  if (port_text.empty() || ec != std::errc{} || ptr != port_text.data() + port_text.size() || port > 65535)
    throw bad("bad port");

  if (*family == AddressFamily::V4) {
    std::array<std::uint8_t, 4> a{};
    if (inet_pton(AF_INET, addr_text.c_str(), a.data()) != 1) throw bad("bad IPv4 address");
    return Locator::v4(a, static_cast<std::uint16_t>(port));
  }
  std::array<std::uint8_t, 16> a{};
  if (inet_pton(AF_INET6, addr_text.c_str(), a.data()) != 1) throw bad("bad IPv6 address");
  return Locator::v6(a, static_cast<std::uint16_t>(port));
}

std::string format_locator(const Locator& loc) {
  char buf[INET6_ADDRSTRLEN] = {};
  const bool v4 = loc.family() == AddressFamily::V4;
  inet_ntop(v4 ? AF_INET : AF_INET6, loc.address().data(), buf, sizeof buf);
  return std::string(v4 ? "v4:" : "v6:") + buf + ":" + std::to_string(loc.port());
}

void encode_locator(ByteWriter& w, const Locator& loc) {
  w.u8(loc.family() == AddressFamily::V4 ? 4 : 6);
  w.raw(loc.address());
  w.u16(loc.port());
}

Locator decode_locator(ByteReader& r) {
  const auto at = r.offset();
  const auto fam = r.u8();
  if (fam == 4) {
    std::array<std::uint8_t, 4> a{};
    auto bytes = r.take(4);
    std::copy(bytes.begin(), bytes.end(), a.begin());
    return Locator::v4(a, r.u16());
  }
  if (fam == 6) {
    std::array<std::uint8_t, 16> a{};
    auto bytes = r.take(16);
    std::copy(bytes.begin(), bytes.end(), a.begin());
    return Locator::v6(a, r.u16());
  }
  throw Error(Errc::MALFORMED, "locator family byte " + std::to_string(fam), at);
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::array<std::string_view, 10> kToolNames = {
    "MIPv4", "MIPv6", "FMIPv6", "HMIPv6", "PMIP", "HIP", "SIP", "SCTP", "TCP_MIGRATE", "STM"};

constexpr std::array<std::string_view, 15> kFeatureNames = {
    "ROUTE_OPT",    "IPSEC_PROT",       "FW_TRAVERSAL",      "DUAL_STACK",      "HA_RELIABILITY",
    "MULTI_COA",    "NEMO",             "DYNAMIC_HA",        "MULTIHOMING",     "BUILTIN_SECURITY",
    "MAKE_BEFORE_BREAK", "PROXY_SIGNALING", "FOREIGN_AGENT", "MIH_SERVICES", "STATE_TRANSFER"};

constexpr std::array<std::string_view, 4> kAppClassNames = {"GENERIC", "SIP_P2P", "REALTIME", "BULK"};

template <typename E, std::size_t N>
E lookup(const std::array<std::string_view, N>& names, std::string_view s, const char* what) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == s) return static_cast<E>(i);
  throw Error(Errc::MALFORMED, std::string("unknown ") + what + " '" + std::string(s) + "'");
}

}  // namespace

std::string_view to_string(Tool t) noexcept { return kToolNames[static_cast<std::size_t>(t)]; }
std::string_view to_string(FeatureId f) noexcept { return kFeatureNames[static_cast<std::size_t>(f)]; }
std::string_view to_string(AppClass a) noexcept { return kAppClassNames[static_cast<std::size_t>(a)]; }

Tool parse_tool(std::string_view s) { return lookup<Tool>(kToolNames, s, "tool"); }
FeatureId parse_feature(std::string_view s) { return lookup<FeatureId>(kFeatureNames, s, "feature"); }
AppClass parse_app_class(std::string_view s) { return lookup<AppClass>(kAppClassNames, s, "application class"); }

AddressFamily parse_stack(std::string_view s) {
  auto f = family_from_string(s);
  if (!f) throw Error(Errc::MALFORMED, "unknown stack '" + std::string(s) + "'");
  return *f;
}

std::string to_string(Version v) { return std::to_string(v.major) + "." + std::to_string(v.minor); }

std::string to_string(const ToolDescriptor& d) {
  std::string out = std::string(to_string(d.tool)) + " " + to_string(d.version);
  auto join = [&](const char* key, const auto& items) {
    if (items.empty()) return;
    out += std::string(" ") + key + "=";
    bool first = true;
    for (auto item : items) {
      if (!first) out += ",";
      out += to_string(item);
      first = false;
    }
  };
  join("stacks", d.stacks.items());
  join("features", d.features.items());
  join("apps", d.app_classes.items());
  return out;
}

// ---------------------------------------------------------------------------

std::string to_string(ContextTypeId t) {
  switch (t.code) {
    case 1: return "FIREWALL_STATE";
    case 2: return "HEADER_COMPRESSION";
    case 3: return "QOS";
    case 4: return "AAA";
    default: return "CTYPE_" + std::to_string(t.code);
  }
}

void encode_block(ByteWriter& w, const ContextBlock& block) {
  if (block.payload.size() > kMaxBlockPayload)
    throw Error(Errc::MALFORMED, "context payload exceeds 65535 bytes");
  w.u16(block.ctype.code);
  w.u8(block.flags);
  w.u8(0);
  w.u16(static_cast<std::uint16_t>(block.payload.size()));
  w.raw(block.payload);
}

Bytes encode_block(const ContextBlock& block) {
  Bytes out;
  ByteWriter w(out);
  encode_block(w, block);
  return out;
}

ContextBlock decode_block(ByteReader& r) {
  ContextBlock b;
  b.ctype.code = r.u16();
  b.flags = r.u8();
  r.u8();  // reserved
  const auto len = r.u16();
  auto payload = r.take(len);
  b.payload.assign(payload.begin(), payload.end());
  return b;
}

// ---------------------------------------------------------------------------

std::string_view to_string(Proto p) noexcept { return p == Proto::UDP ? "UDP" : "TCP"; }

bool pinhole_matches(const PinholeRule& rule, const PacketHeader& packet) {
  if (rule.proto != packet.proto) return false;
  if (rule.dst != packet.dst) return false;
  if (!rule.src.address_is_unspecified() && !rule.src.same_address(packet.src)) return false;
  if (rule.src.address_is_unspecified() && rule.src.family() != packet.src.family()) return false;
  return rule.src.port() == 0 || rule.src.port() == packet.src.port();
}

Bytes encode_pinholes(const std::vector<PinholeRule>& rules) {
  if (rules.size() > 0xFFFF) throw Error(Errc::MALFORMED, "too many pinhole rules");
  Bytes out;
  ByteWriter w(out);
  w.u16(static_cast<std::uint16_t>(rules.size()));
  for (const auto& rule : rules) {
    w.u8(static_cast<std::uint8_t>(rule.proto));
    encode_locator(w, rule.src);
    encode_locator(w, rule.dst);
    w.u64(static_cast<std::uint64_t>(rule.expiry));
  }
  return out;
}

std::vector<PinholeRule> decode_pinholes(ByteView payload) {
  ByteReader r(payload, 0, Errc::MALFORMED);
  std::vector<PinholeRule> rules(r.u16());
  for (auto& rule : rules) {
    const auto at = r.offset();
    const auto proto = r.u8();
    if (proto != 17 && proto != 6) throw Error(Errc::MALFORMED, "pinhole protocol " + std::to_string(proto), at);
    rule.proto = static_cast<Proto>(proto);
    rule.src = decode_locator(r);
    rule.dst = decode_locator(r);
    rule.expiry = static_cast<SimTime>(r.u64());
    if (rule.dst.port() == 0) throw Error(Errc::MALFORMED, "pinhole destination port 0", at);
  }
  if (!r.empty()) throw Error(Errc::MALFORMED, "trailing bytes after pinhole list", r.offset());
  return rules;
}

// ---------------------------------------------------------------------------

std::string_view to_string(TriggerKind k) noexcept {
  switch (k) {
    case TriggerKind::LOCATOR_CHANGE: return "LOCATOR_CHANGE";
    case TriggerKind::INTERFACE_UP: return "INTERFACE_UP";
    case TriggerKind::INTERFACE_DOWN: return "INTERFACE_DOWN";
    case TriggerKind::HANDOVER_IMMINENT: return "HANDOVER_IMMINENT";
    case TriggerKind::HANDOVER_DONE: return "HANDOVER_DONE";
    case TriggerKind::CUSTOM: return "CUSTOM";
  }
  return "CUSTOM";
}

std::string to_string(const TriggerChannel& ch) {
  return ch.is_common() ? std::string("MTI-common") : "MTI-" + *ch.tool;
}

}  // namespace mobtool
