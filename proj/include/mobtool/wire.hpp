#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mobtool/core.hpp"

namespace mobtool::wire {

// Header, all integers big-endian:
//   magic "STM1" | version u8 | msg_type u8 | flags u16 | transfer_id u64 | body_len u32
// followed by body_len bytes of TLVs: type u16 | length u16 | value.

inline constexpr std::array<std::uint8_t, 4> kMagic = {'S', 'T', 'M', '1'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 20;

enum class MsgType : std::uint8_t {
  CTX_REQUEST = 1,
  CTX_RESPONSE = 2,
  CTX_DATA = 3,
  INSTALL_ACK = 4,
  ERROR = 5,
  CONTROL = 6,
};

inline constexpr std::array<MsgType, 6> kAllMsgTypes = {MsgType::CTX_REQUEST, MsgType::CTX_RESPONSE,
                                                        MsgType::CTX_DATA,    MsgType::INSTALL_ACK,
                                                        MsgType::ERROR,       MsgType::CONTROL};

std::string_view to_string(MsgType t) noexcept;

namespace flag {
inline constexpr std::uint16_t EXPEDITED = 0x0001;
inline constexpr std::uint16_t FINAL_FRAGMENT = 0x0002;
inline constexpr std::uint16_t PULL = 0x0004;  // CTX_REQUEST direction; clear = PUSH
}  // namespace flag

namespace tlv {
inline constexpr std::uint16_t NODE_ID = 1;       // mobile node: name bytes + instance u32
inline constexpr std::uint16_t PREV_LOCATOR = 2;  // previous-access locator
inline constexpr std::uint16_t CTX_TYPES = 3;     // n x u16
inline constexpr std::uint16_t CTX_BLOCK = 4;     // ContextBlock layout
inline constexpr std::uint16_t AVAIL_MASK = 5;    // u32, bit i = i-th requested type
inline constexpr std::uint16_t ERROR = 6;         // code u16 + text
inline constexpr std::uint16_t CONTROL = 7;       // op u8 + offset u64
inline constexpr std::uint16_t PRIORITY = 8;      // u8, 0-7
inline constexpr std::uint16_t FRAGMENT = 9;      // offset u32 + total u32 within one block payload
}  // namespace tlv

std::string tlv_name(std::uint16_t type);

enum class ErrorCode : std::uint16_t {
  RETRANSMIT_REQUEST = 1,
  UNKNOWN_TRANSFER = 2,
  BAD_STATE = 3,
  INSTALL_FAILED = 4,
  RETRIES_EXHAUSTED = 5,
  REJECTED = 6,
};

std::string_view to_string(ErrorCode c) noexcept;

enum class ControlOp : std::uint8_t { PAUSE = 1, RESUME = 2, ABORT = 3 };

std::string_view to_string(ControlOp op) noexcept;

struct Tlv {
  std::uint16_t type = 0;
  Bytes value;
  bool operator==(const Tlv&) const = default;
};

struct Message {
  MsgType type = MsgType::CTX_REQUEST;
  std::uint16_t flags = 0;
  std::uint64_t transfer_id = 0;
  std::vector<Tlv> tlvs;  // kept in wire order, unknown types included

  bool has_flag(std::uint16_t f) const { return (flags & f) != 0; }
  const Tlv* find(std::uint16_t type) const;
  std::vector<const Tlv*> find_all(std::uint16_t type) const;
  bool operator==(const Message&) const = default;
};

Bytes serialize(const Message& msg);

/// Parses exactly one message occupying all of `bytes`.
/// Errors: BAD_MAGIC, BAD_VERSION, TRUNCATED, TLV_OVERRUN, MALFORMED (unknown
/// msg_type, trailing bytes), each with the byte offset where parsing stopped.
Message parse(ByteView bytes);

/// Total frame size announced by a complete header, or nullopt if fewer than
/// kHeaderSize bytes are available. Validates magic and version.
std::optional<std::size_t> frame_size(ByteView bytes);

/// Reassembles back-to-back messages from a byte stream.
class StreamFramer {
 public:
  void feed(ByteView bytes) { buffer_.insert(buffer_.end(), bytes.begin(), bytes.end()); }
  std::optional<Message> next();
  std::size_t buffered() const { return buffer_.size(); }

 private:
  Bytes buffer_;
};

// ---------------------------------------------------------------------------
// Typed TLV builders and readers. Readers throw MALFORMED on bad contents.

Tlv make_node_id(const NodeId& id);
NodeId read_node_id(const Tlv& t);
Tlv make_prev_locator(const Locator& loc);
Locator read_locator(const Tlv& t);
Tlv make_ctx_types(const std::vector<ContextTypeId>& types);
std::vector<ContextTypeId> read_ctx_types(const Tlv& t);
Tlv make_block(const ContextBlock& block);
ContextBlock read_block(const Tlv& t);
Tlv make_mask(std::uint32_t mask);
std::uint32_t read_mask(const Tlv& t);
Tlv make_error(ErrorCode code, std::string_view text);
std::pair<std::uint16_t, std::string> read_error(const Tlv& t);
Tlv make_control(ControlOp op, std::uint64_t offset);
std::pair<ControlOp, std::uint64_t> read_control(const Tlv& t);
Tlv make_priority(std::uint8_t priority);
std::uint8_t read_priority(const Tlv& t);

struct FragmentPos {
  std::uint32_t offset = 0;
  std::uint32_t total = 0;
};
Tlv make_fragment(FragmentPos pos);
FragmentPos read_fragment(const Tlv& t);

/// Multi-line human-readable dump naming the header fields and every TLV.
std::string describe(const Message& msg);

std::string to_hex(ByteView bytes);
/// Accepts whitespace between digit pairs; throws MALFORMED otherwise.
Bytes from_hex(std::string_view text);

}  // namespace mobtool::wire
