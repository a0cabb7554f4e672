#include "mobtool/wire.hpp"

#include <algorithm>
#include <sstream>

namespace mobtool::wire {

std::string_view to_string(MsgType t) noexcept {
  switch (t) {
    case MsgType::CTX_REQUEST: return "CTX_REQUEST";
    case MsgType::CTX_RESPONSE: return "CTX_RESPONSE";
    case MsgType::CTX_DATA: return "CTX_DATA";
    case MsgType::INSTALL_ACK: return "INSTALL_ACK";
    case MsgType::ERROR: return "ERROR";
    case MsgType::CONTROL: return "CONTROL";
  }
  return "?";
}

std::string tlv_name(std::uint16_t type) {
  switch (type) {
    case tlv::NODE_ID: return "NODE_ID";
    case tlv::PREV_LOCATOR: return "PREV_LOCATOR";
    case tlv::CTX_TYPES: return "CTX_TYPES";
    case tlv::CTX_BLOCK: return "CTX_BLOCK";
    case tlv::AVAIL_MASK: return "AVAIL_MASK";
    case tlv::ERROR: return "ERROR";
    case tlv::CONTROL: return "CONTROL";
    case tlv::PRIORITY: return "PRIORITY";
    case tlv::FRAGMENT: return "FRAGMENT";
    default: return "UNKNOWN_" + std::to_string(type);
  }
}

std::string_view to_string(ErrorCode c) noexcept {
  switch (c) {
    case ErrorCode::RETRANSMIT_REQUEST: return "RETRANSMIT_REQUEST";
    case ErrorCode::UNKNOWN_TRANSFER: return "UNKNOWN_TRANSFER";
    case ErrorCode::BAD_STATE: return "BAD_STATE";
    case ErrorCode::INSTALL_FAILED: return "INSTALL_FAILED";
    case ErrorCode::RETRIES_EXHAUSTED: return "RETRIES_EXHAUSTED";
    case ErrorCode::REJECTED: return "REJECTED";
  }
  return "?";
}

std::string_view to_string(ControlOp op) noexcept {
  switch (op) {
    case ControlOp::PAUSE: return "PAUSE";
    case ControlOp::RESUME: return "RESUME";
    case ControlOp::ABORT: return "ABORT";
  }
  return "?";
}

const Tlv* Message::find(std::uint16_t type) const {
  auto it = std::find_if(tlvs.begin(), tlvs.end(), [&](const Tlv& t) { return t.type == type; });
  return it == tlvs.end() ? nullptr : &*it;
}

std::vector<const Tlv*> Message::find_all(std::uint16_t type) const {
  std::vector<const Tlv*> out;
  for (const auto& t : tlvs)
    if (t.type == type) out.push_back(&t);
  return out;
}

Bytes serialize(const Message& msg) {
  Bytes out;
  ByteWriter w(out);
  w.raw(ByteView{kMagic});
  w.u8(kVersion);
  w.u8(static_cast<std::uint8_t>(msg.type));
  w.u16(msg.flags);
  w.u64(msg.transfer_id);
  const auto len_at = w.size();
  w.u32(0);
  for (const auto& t : msg.tlvs) {
    if (t.value.size() > 0xFFFF) throw Error(Errc::MALFORMED, "TLV " + tlv_name(t.type) + " longer than 65535");
    w.u16(t.type);
    w.u16(static_cast<std::uint16_t>(t.value.size()));
    w.raw(t.value);
  }
  w.patch_u32(len_at, static_cast<std::uint32_t>(out.size() - kHeaderSize));
  return out;
}

namespace {

// Validates whatever prefix of the fixed header is present.
void check_header_prefix(ByteView bytes) {
  const auto n = std::min(bytes.size(), kMagic.size());
  for (std::size_t i = 0; i < n; ++i)
    if (bytes[i] != kMagic[i]) throw Error(Errc::BAD_MAGIC, "expected \"STM1\"", i);
  if (bytes.size() > 4 && bytes[4] != kVersion)
    throw Error(Errc::BAD_VERSION, "version " + std::to_string(bytes[4]), 4);
  if (bytes.size() > 5 && (bytes[5] < 1 || bytes[5] > 6))
    throw Error(Errc::MALFORMED, "msg_type " + std::to_string(bytes[5]), 5);
}

}  // namespace

Message parse(ByteView bytes) {
  check_header_prefix(bytes);
  if (bytes.size() < kHeaderSize) throw Error(Errc::TRUNCATED, "short header", bytes.size());

  ByteReader r(bytes);
  r.take(5);
  Message msg;
  msg.type = static_cast<MsgType>(r.u8());
  msg.flags = r.u16();
  msg.transfer_id = r.u64();
  const std::uint32_t body_len = r.u32();
  if (r.remaining() < body_len) throw Error(Errc::TRUNCATED, "body shorter than body_len", bytes.size());
  if (r.remaining() > body_len)
    throw Error(Errc::MALFORMED, "trailing bytes after body", kHeaderSize + body_len);

  ByteReader body(r.take(body_len), kHeaderSize, Errc::TLV_OVERRUN);
  while (!body.empty()) {
    Tlv t;
    t.type = body.u16();
    const auto len = body.u16();
    auto value = body.take(len);
    t.value.assign(value.begin(), value.end());
    msg.tlvs.push_back(std::move(t));
  }
  return msg;
}

std::optional<std::size_t> frame_size(ByteView bytes) {
  check_header_prefix(bytes);
  if (bytes.size() < kHeaderSize) return std::nullopt;
  ByteReader r(bytes.subspan(16, 4));
  return kHeaderSize + r.u32();
}

std::optional<Message> StreamFramer::next() {
  auto size = frame_size(buffer_);
  if (!size || buffer_.size() < *size) return std::nullopt;
  auto msg = parse(ByteView{buffer_.data(), *size});
  buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(*size));
  return msg;
}

// ---------------------------------------------------------------------------

namespace {

ByteReader value_reader(const Tlv& t) { return ByteReader(t.value, 0, Errc::MALFORMED); }

void expect_done(const ByteReader& r, const Tlv& t) {
  if (!r.empty()) throw Error(Errc::MALFORMED, "trailing bytes in TLV " + tlv_name(t.type), r.offset());
}

Tlv build(std::uint16_t type, auto&& fill) {
  Tlv t{type, {}};
  ByteWriter w(t.value);
  fill(w);
  return t;
}

}  // namespace

Tlv make_node_id(const NodeId& id) {
  return build(tlv::NODE_ID, [&](ByteWriter& w) {
    w.raw(id.name);
    w.u32(id.instance);
  });
}

NodeId read_node_id(const Tlv& t) {
  if (t.value.size() < 5) throw Error(Errc::MALFORMED, "NODE_ID shorter than 5 bytes");
  NodeId id;
  id.name.assign(t.value.begin(), t.value.end() - 4);
  ByteReader r(ByteView{t.value}.subspan(t.value.size() - 4));
  id.instance = r.u32();
  return id;
}

Tlv make_prev_locator(const Locator& loc) {
  return build(tlv::PREV_LOCATOR, [&](ByteWriter& w) { encode_locator(w, loc); });
}

Locator read_locator(const Tlv& t) {
  auto r = value_reader(t);
  auto loc = decode_locator(r);
  expect_done(r, t);
  return loc;
}

Tlv make_ctx_types(const std::vector<ContextTypeId>& types) {
  return build(tlv::CTX_TYPES, [&](ByteWriter& w) {
    for (auto c : types) w.u16(c.code);
  });
}

std::vector<ContextTypeId> read_ctx_types(const Tlv& t) {
  if (t.value.size() % 2 != 0) throw Error(Errc::MALFORMED, "CTX_TYPES length is odd");
  auto r = value_reader(t);
  std::vector<ContextTypeId> out;
  while (!r.empty()) out.push_back(ContextTypeId{r.u16()});
  return out;
}

Tlv make_block(const ContextBlock& block) {
  return build(tlv::CTX_BLOCK, [&](ByteWriter& w) { encode_block(w, block); });
}

ContextBlock read_block(const Tlv& t) {
  auto r = value_reader(t);
  auto b = decode_block(r);
  expect_done(r, t);
  return b;
}

Tlv make_mask(std::uint32_t mask) {
  return build(tlv::AVAIL_MASK, [&](ByteWriter& w) { w.u32(mask); });
}

std::uint32_t read_mask(const Tlv& t) {
  auto r = value_reader(t);
  auto m = r.u32();
  expect_done(r, t);
  return m;
}

Tlv make_error(ErrorCode code, std::string_view text) {
  return build(tlv::ERROR, [&](ByteWriter& w) {
    w.u16(static_cast<std::uint16_t>(code));
    w.raw(text);
  });
}

std::pair<std::uint16_t, std::string> read_error(const Tlv& t) {
  auto r = value_reader(t);
  auto code = r.u16();
  auto rest = r.rest();
  return {code, std::string(rest.begin(), rest.end())};
}

Tlv make_control(ControlOp op, std::uint64_t offset) {
  return build(tlv::CONTROL, [&](ByteWriter& w) {
    w.u8(static_cast<std::uint8_t>(op));
    w.u64(offset);
  });
}

std::pair<ControlOp, std::uint64_t> read_control(const Tlv& t) {
  auto r = value_reader(t);
  auto op = r.u8();
  if (op < 1 || op > 3) throw Error(Errc::MALFORMED, "control op " + std::to_string(op));
  auto offset = r.u64();
  expect_done(r, t);
  return {static_cast<ControlOp>(op), offset};
}

Tlv make_priority(std::uint8_t priority) {
  return build(tlv::PRIORITY, [&](ByteWriter& w) { w.u8(priority); });
}

std::uint8_t read_priority(const Tlv& t) {
  auto r = value_reader(t);
  auto p = r.u8();
  expect_done(r, t);
  if (p > 7) throw Error(Errc::MALFORMED, "priority " + std::to_string(p));
  return p;
}

Tlv make_fragment(FragmentPos pos) {
  return build(tlv::FRAGMENT, [&](ByteWriter& w) {
    w.u32(pos.offset);
    w.u32(pos.total);
  });
}

FragmentPos read_fragment(const Tlv& t) {
  auto r = value_reader(t);
  FragmentPos pos{r.u32(), r.u32()};
  expect_done(r, t);
  return pos;
}

// ---------------------------------------------------------------------------

std::string to_hex(ByteView bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (auto b : bytes) {
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 0xF]);
  }
  return out;
}

Bytes from_hex(std::string_view text) {
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  Bytes out;
  int high = -1;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == ' ' || c == '\n' || c == '\r' || c == '\t') {
      if (high >= 0) throw Error(Errc::MALFORMED, "odd hex digit", i);
      continue;
    }
    const int v = nibble(c);
    if (v < 0) throw Error(Errc::MALFORMED, std::string("bad hex character '") + c + "'", i);
    if (high < 0) {
      high = v;
    } else {
      out.push_back(static_cast<std::uint8_t>(high << 4 | v));
      high = -1;
    }
  }
  if (high >= 0) throw Error(Errc::MALFORMED, "odd number of hex digits", text.size());
  return out;
}

std::string describe(const Message& msg) {
  std::ostringstream os;
  os << "msg_type=" << to_string(msg.type) << " flags=0x" << std::hex << msg.flags << std::dec;
  if (msg.has_flag(flag::EXPEDITED)) os << " EXPEDITED";
  if (msg.has_flag(flag::FINAL_FRAGMENT)) os << " FINAL_FRAGMENT";
  if (msg.has_flag(flag::PULL)) os << " PULL";
  os << " transfer_id=0x" << std::hex << msg.transfer_id << std::dec << " tlvs=" << msg.tlvs.size() << "\n";
  for (const auto& t : msg.tlvs) {
    os << "  " << tlv_name(t.type) << " len=" << t.value.size() << ": ";
    try {
      switch (t.type) {
        case tlv::NODE_ID: os << to_string(read_node_id(t)); break;
        case tlv::PREV_LOCATOR: os << format_locator(read_locator(t)); break;
        case tlv::CTX_TYPES: {
          bool first = true;
          for (auto c : read_ctx_types(t)) {
            os << (first ? "" : ",") << to_string(c);
            first = false;
          }
          break;
        }
        case tlv::CTX_BLOCK: {
          auto b = read_block(t);
          os << to_string(b.ctype) << " flags=" << int(b.flags) << " payload=" << b.payload.size() << "B";
          break;
        }
        case tlv::AVAIL_MASK: os << "0x" << std::hex << read_mask(t) << std::dec; break;
        case tlv::ERROR: {
          auto [code, text] = read_error(t);
          os << to_string(static_cast<ErrorCode>(code)) << " (" << code << ") " << text;
          break;
        }
        case tlv::CONTROL: {
          auto [op, offset] = read_control(t);
          os << to_string(op) << " offset=" << offset;
          break;
        }
        case tlv::PRIORITY: os << int(read_priority(t)); break;
        case tlv::FRAGMENT: {
          auto pos = read_fragment(t);
          os << "offset=" << pos.offset << " total=" << pos.total;
          break;
        }
        default: os << to_hex(t.value); break;
      }
    } catch (const Error& e) {
      os << "<" << e.what() << "> " << to_hex(t.value);
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace mobtool::wire
