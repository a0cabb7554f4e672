#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mobtool {

enum class Errc {
  // core
  MALFORMED,
  // toolbox
  DUPLICATE_REGISTRATION,
  UNKNOWN_HANDLE,
  INVALID_TRANSITION,
  UNSUPPORTED_QUERY,
  // selection
  NO_COMMON_TOOL,
  MANDATORY_FEATURE_UNAVAILABLE,
  // stm
  ALREADY_INITIALIZED,
  BAD_CONFIG,
  NOT_INITIALIZED,
  NO_SECURITY_ASSOC,
  EMPTY_TYPES,
  UNKNOWN_TRANSFER,
  BAD_STATE,
  REJECTED_TYPES,
  DUPLICATE_CTYPE,
  // wire codec
  BAD_MAGIC,
  BAD_VERSION,
  TRUNCATED,
  TLV_OVERRUN,
  // simnet
  PARSE_ERROR,
  UNKNOWN_NODE_REF,
  NEGATIVE_TIME,
  TIME_LIMIT_EXCEEDED,
};

std::string_view to_string(Errc code) noexcept;

/// Every failure raised by the library. `position()` is a byte offset for
/// codec errors and a 1-based line number for text-format errors.
class Error : public std::runtime_error {
 public:
  Error(Errc code, std::string detail, std::optional<std::size_t> position = std::nullopt)
      : std::runtime_error(compose(code, detail, position)),
        code_(code),
        detail_(std::move(detail)),
        position_(position) {}

  Errc code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }
  std::optional<std::size_t> position() const noexcept { return position_; }

 private:
  static std::string compose(Errc code, const std::string& detail,
                             std::optional<std::size_t> position) {
    std::string out{to_string(code)};
    if (position) out += " at " + std::to_string(*position);
    if (!detail.empty()) out += ": " + detail;
    return out;
  }

  Errc code_;
  std::string detail_;
  std::optional<std::size_t> position_;
};

}  // namespace mobtool
