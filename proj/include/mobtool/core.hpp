#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "mobtool/bytes.hpp"
#include "mobtool/error.hpp"

namespace mobtool {

/// Simulation time in integer milliseconds.
using SimTime = std::int64_t;

// ---------------------------------------------------------------------------
// Small closed-enum set backed by a bitmask. Iteration follows enum order.

template <typename E>
class EnumSet {
  static_assert(std::is_enum_v<E>);
  using Mask = std::uint32_t;

 public:
  constexpr EnumSet() = default;
  constexpr EnumSet(std::initializer_list<E> items) {
    for (E e : items) insert(e);
  }
  static constexpr EnumSet from_mask(Mask m) {
    EnumSet s;
    s.mask_ = m;
    return s;
  }

  constexpr void insert(E e) { mask_ |= bit(e); }
  constexpr void erase(E e) { mask_ &= ~bit(e); }
  constexpr bool contains(E e) const { return (mask_ & bit(e)) != 0; }
  constexpr bool empty() const { return mask_ == 0; }
  constexpr Mask mask() const { return mask_; }
  constexpr std::size_t size() const { return static_cast<std::size_t>(__builtin_popcount(mask_)); }

  constexpr bool subset_of(EnumSet other) const { return (mask_ & ~other.mask_) == 0; }
  constexpr EnumSet operator&(EnumSet o) const { return from_mask(mask_ & o.mask_); }
  constexpr EnumSet operator|(EnumSet o) const { return from_mask(mask_ | o.mask_); }
  constexpr EnumSet operator-(EnumSet o) const { return from_mask(mask_ & ~o.mask_); }

  std::vector<E> items() const {
    std::vector<E> out;
    for (unsigned i = 0; i < 32; ++i)
      if (mask_ & (Mask{1} << i)) out.push_back(static_cast<E>(i));
    return out;
  }

  constexpr auto operator<=>(const EnumSet&) const = default;

 private:
  static constexpr Mask bit(E e) { return Mask{1} << static_cast<unsigned>(e); }
  Mask mask_ = 0;
};

// ---------------------------------------------------------------------------
// Identities and locators

/// Stand-in for an AN-style node name: printable name plus a disambiguator.
struct NodeId {
  std::string name;
  std::uint32_t instance = 0;

  auto operator<=>(const NodeId&) const = default;
};

std::string to_string(const NodeId& id);

enum class AddressFamily : std::uint8_t { V4, V6 };
using StackSet = EnumSet<AddressFamily>;

std::string_view to_string(AddressFamily f) noexcept;
std::optional<AddressFamily> family_from_string(std::string_view s) noexcept;

/// An IPv4 or IPv6 address plus port. Port 0 means unspecified.
class Locator {
 public:
  Locator() = default;
  static Locator v4(std::array<std::uint8_t, 4> addr, std::uint16_t port);
  static Locator v6(std::array<std::uint8_t, 16> addr, std::uint16_t port);

  AddressFamily family() const { return family_; }
  std::uint16_t port() const { return port_; }
  ByteView address() const { return ByteView{addr_.data(), family_ == AddressFamily::V4 ? 4u : 16u}; }
  bool address_is_unspecified() const;
  bool same_address(const Locator& other) const { return family_ == other.family_ && addr_ == other.addr_; }
  Locator with_port(std::uint16_t port) const {
    Locator l = *this;
    l.port_ = port;
    return l;
  }

  auto operator<=>(const Locator&) const = default;

 private:
  AddressFamily family_ = AddressFamily::V4;
  std::array<std::uint8_t, 16> addr_{};  // V4 uses the first four bytes; the rest stay zero.
  std::uint16_t port_ = 0;
};

/// Grammar: `v4:<dotted-quad>:<port>` or `v6:<rfc4291 text>:<port>`.
Locator parse_locator(std::string_view text);
std::string format_locator(const Locator& loc);

void encode_locator(ByteWriter& w, const Locator& loc);
Locator decode_locator(ByteReader& r);

// ---------------------------------------------------------------------------
// Tools, features, application classes

enum class Tool : std::uint8_t {
  MIPv4,
  MIPv6,
  FMIPv6,
  HMIPv6,
  PMIP,
  HIP,
  SIP,
  SCTP,
  TCP_MIGRATE,
  STM,
};

enum class FeatureId : std::uint8_t {
  ROUTE_OPT,
  IPSEC_PROT,
  FW_TRAVERSAL,
  DUAL_STACK,
  HA_RELIABILITY,
  MULTI_COA,
  NEMO,
  DYNAMIC_HA,
  MULTIHOMING,
  BUILTIN_SECURITY,
  MAKE_BEFORE_BREAK,
  PROXY_SIGNALING,
  FOREIGN_AGENT,
  MIH_SERVICES,
  STATE_TRANSFER,
};

enum class AppClass : std::uint8_t { GENERIC, SIP_P2P, REALTIME, BULK };

using FeatureSet = EnumSet<FeatureId>;
using AppClassSet = EnumSet<AppClass>;

std::string_view to_string(Tool t) noexcept;
std::string_view to_string(FeatureId f) noexcept;
std::string_view to_string(AppClass a) noexcept;
// Unknown names are rejected with MALFORMED.
Tool parse_tool(std::string_view s);
FeatureId parse_feature(std::string_view s);
AppClass parse_app_class(std::string_view s);
AddressFamily parse_stack(std::string_view s);

struct Version {
  std::uint16_t major = 1;
  std::uint16_t minor = 0;
  auto operator<=>(const Version&) const = default;
};

std::string to_string(Version v);

struct ToolDescriptor {
  Tool tool = Tool::MIPv4;
  Version version;
  StackSet stacks;
  FeatureSet features;
  AppClassSet app_classes;

  auto operator<=>(const ToolDescriptor&) const = default;
};

std::string to_string(const ToolDescriptor& d);

// ---------------------------------------------------------------------------
// Context blocks

struct ContextTypeId {
  std::uint16_t code = 0;

  constexpr bool valid() const { return code != 0 && code <= 32767; }
  constexpr bool reserved() const { return code >= 1 && code <= 4; }
  auto operator<=>(const ContextTypeId&) const = default;
};

inline constexpr ContextTypeId kFirewallState{1};
inline constexpr ContextTypeId kHeaderCompression{2};
inline constexpr ContextTypeId kQos{3};
inline constexpr ContextTypeId kAaa{4};

std::string to_string(ContextTypeId t);

inline constexpr std::uint8_t kBlockMandatory = 0x01;
inline constexpr std::size_t kMaxBlockPayload = 65535;
inline constexpr std::size_t kBlockHeaderSize = 6;

struct ContextBlock {
  ContextTypeId ctype;
  std::uint8_t flags = 0;
  Bytes payload;

  bool mandatory() const { return (flags & kBlockMandatory) != 0; }
  bool operator==(const ContextBlock&) const = default;
};

/// Layout: ctype u16, flags u8, reserved u8 (=0), length u16, payload.
void encode_block(ByteWriter& w, const ContextBlock& block);
Bytes encode_block(const ContextBlock& block);
ContextBlock decode_block(ByteReader& r);

// ---------------------------------------------------------------------------
// Firewall pinholes

enum class Proto : std::uint8_t { UDP = 17, TCP = 6 };

std::string_view to_string(Proto p) noexcept;

struct PinholeRule {
  Proto proto = Proto::UDP;
  Locator src;  // unspecified address and/or port 0 act as wildcards
  Locator dst;  // exact; port must be non-zero
  SimTime expiry = 0;  // 0 = no expiry

  bool operator==(const PinholeRule&) const = default;
};

struct PacketHeader {
  Proto proto = Proto::UDP;
  Locator src;
  Locator dst;
};

bool pinhole_matches(const PinholeRule& rule, const PacketHeader& packet);

/// FIREWALL_STATE payload: count u16, then per rule proto u8, src, dst, expiry u64.
Bytes encode_pinholes(const std::vector<PinholeRule>& rules);
std::vector<PinholeRule> decode_pinholes(ByteView payload);

// ---------------------------------------------------------------------------
// Triggers

enum class TriggerKind : std::uint8_t {
  LOCATOR_CHANGE = 1,
  INTERFACE_UP = 2,
  INTERFACE_DOWN = 3,
  HANDOVER_IMMINENT = 4,
  HANDOVER_DONE = 5,
  CUSTOM = 255,
};

std::string_view to_string(TriggerKind k) noexcept;

/// MTI-common or MTI-<tool>.
struct TriggerChannel {
  std::optional<std::string> tool;  // nullopt = COMMON

  static TriggerChannel common() { return {}; }
  static TriggerChannel for_tool(std::string name) { return TriggerChannel{std::move(name)}; }
  bool is_common() const { return !tool.has_value(); }
  bool operator==(const TriggerChannel&) const = default;
};

std::string to_string(const TriggerChannel& ch);

struct Trigger {
  TriggerChannel channel;
  TriggerKind kind = TriggerKind::CUSTOM;
  std::uint16_t custom_code = 0;
  Bytes payload;
  SimTime ts = 0;
};

}  // namespace mobtool
