#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "mobtool/error.hpp"

namespace mobtool {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

/// Appends big-endian integers and raw bytes to a buffer.
class ByteWriter {
 public:
  explicit ByteWriter(Bytes& out) : out_(out) {}

  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void raw(ByteView bytes) { out_.insert(out_.end(), bytes.begin(), bytes.end()); }
  void raw(std::string_view text) { out_.insert(out_.end(), text.begin(), text.end()); }

  std::size_t size() const { return out_.size(); }

  /// Overwrites a previously written u16/u32 slot (used for length back-patching).
  void patch_u16(std::size_t at, std::uint16_t v) {
    out_[at] = static_cast<std::uint8_t>(v >> 8);
    out_[at + 1] = static_cast<std::uint8_t>(v);
  }
  void patch_u32(std::size_t at, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_[at + i] = static_cast<std::uint8_t>(v >> (8 * (3 - i)));
  }

 private:
  void put(std::uint64_t v, int width) {
    for (int i = width - 1; i >= 0; --i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  Bytes& out_;
};

/// Bounds-checked big-endian reader. Reads past the end throw TRUNCATED with
/// the absolute offset (`base` lets nested readers report outer positions).
class ByteReader {
 public:
  explicit ByteReader(ByteView data, std::size_t base = 0, Errc on_short = Errc::TRUNCATED)
      : data_(data), base_(base), on_short_(on_short) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }

  ByteView take(std::size_t n) {
    need(n);
    auto view = data_.subspan(pos_, n);
    pos_ += n;
    return view;
  }
  ByteView rest() { return take(remaining()); }

  std::size_t remaining() const { return data_.size() - pos_; }
  bool empty() const { return remaining() == 0; }
  std::size_t offset() const { return base_ + pos_; }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw Error(on_short_, "need " + std::to_string(n) + " bytes", offset());
  }
  std::uint64_t get(std::size_t width) {
    need(width);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v = (v << 8) | data_[pos_ + i];
    pos_ += width;
    return v;
  }

  ByteView data_;
  std::size_t base_;
  Errc on_short_;
  std::size_t pos_ = 0;
};

}  // namespace mobtool
