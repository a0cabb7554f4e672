#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "mobtool/core.hpp"

namespace mobtool {

// ---------------------------------------------------------------------------
// Modes

enum class ToolMode : std::uint8_t { UNINITIALIZED, READY, RUNNING, FROZEN, PAUSED, TERMINATED };
enum class ModeCommand : std::uint8_t { INIT, RUN, FREEZE, THAW, PAUSE, CONT, TERMINATE };

inline constexpr std::array<ToolMode, 6> kAllToolModes = {
    ToolMode::UNINITIALIZED, ToolMode::READY,  ToolMode::RUNNING,
    ToolMode::FROZEN,        ToolMode::PAUSED, ToolMode::TERMINATED};
inline constexpr std::array<ModeCommand, 7> kAllModeCommands = {
    ModeCommand::INIT,  ModeCommand::RUN,  ModeCommand::FREEZE,   ModeCommand::THAW,
    ModeCommand::PAUSE, ModeCommand::CONT, ModeCommand::TERMINATE};

std::string_view to_string(ToolMode m) noexcept;
std::string_view to_string(ModeCommand c) noexcept;

/// The mode table. nullopt means the command is not valid from `current`.
std::optional<ToolMode> next_mode(ToolMode current, ModeCommand command) noexcept;

// ---------------------------------------------------------------------------
// Notifications

enum class NotificationDirection : std::uint8_t { TOOLBOX_TO_TOOL = 1, TOOL_TO_TOOLBOX = 2 };

/// Notification kind codes. 1-5 mirror TriggerKind; 0x01xx are STM primitives.
namespace notify {
inline constexpr std::uint16_t LOCATOR_CHANGE = 1;
inline constexpr std::uint16_t INTERFACE_UP = 2;
inline constexpr std::uint16_t INTERFACE_DOWN = 3;
inline constexpr std::uint16_t HANDOVER_IMMINENT = 4;
inline constexpr std::uint16_t HANDOVER_DONE = 5;
inline constexpr std::uint16_t STM_PUSH = 0x0101;
inline constexpr std::uint16_t STM_PULL = 0x0102;
inline constexpr std::uint16_t STM_ACCEPT = 0x0103;
inline constexpr std::uint16_t STM_START = 0x0104;
inline constexpr std::uint16_t STM_ACK = 0x0105;
inline constexpr std::uint16_t STM_ERROR = 0x0106;
inline constexpr std::uint16_t STM_ABORT = 0x0107;
inline constexpr std::uint16_t STM_PAUSE = 0x0108;
inline constexpr std::uint16_t STM_CONT = 0x0109;
}  // namespace notify

std::string notify_kind_name(std::uint16_t kind);
/// Kinds a FROZEN tool must record and ignore.
bool is_state_changing(std::uint16_t kind) noexcept;

struct NotificationHeader {
  std::string tool;
  std::uint16_t kind = 0;
  SimTime ts = 0;
  bool operator==(const NotificationHeader&) const = default;
};

/// Common header plus a tool-specific opaque body.
struct Notification {
  NotificationDirection direction = NotificationDirection::TOOLBOX_TO_TOOL;
  NotificationHeader header;
  Bytes body;
  bool operator==(const Notification&) const = default;
};

/// Layout: direction u8, name length u8, name, kind u16, ts u64, body.
Bytes encode_notification(const Notification& n);
Notification decode_notification(ByteView bytes);
/// Reads only the header; the body may be anything.
NotificationHeader peek_notification_header(ByteView bytes);

// ---------------------------------------------------------------------------
// Tool endpoints

using StatusValue = std::variant<std::int64_t, std::string>;

/// What a tool plugin implements to be driven through the MTI.
class ToolSink {
 public:
  virtual ~ToolSink() = default;
  virtual void on_trigger(const Trigger& trigger) = 0;
  virtual void on_notification(const Notification& notification) = 0;
  virtual void on_mode(ModeCommand command, ToolMode new_mode) = 0;
  /// Throws Error(UNSUPPORTED_QUERY) for keys the tool does not understand.
  virtual StatusValue on_query(std::string_view key) = 0;
};

using ToolHandle = std::uint64_t;

struct ToolRegistration {
  ToolHandle handle = 0;
  ToolDescriptor descriptor;
  std::shared_ptr<ToolSink> endpoint;
};

/// Channel name a tool listens on besides MTI-common.
std::string tool_channel_name(const ToolDescriptor& d);

// ---------------------------------------------------------------------------

/// The HOLM coordinator: registry, trigger channels and the MTI operations.
///
/// All operations are serialized by one recursive lock, so calls from
/// several threads execute in lock-acquisition order. A sink that publishes
/// a trigger while a delivery is in progress has it queued and delivered
/// after the current one completes.
class Toolbox {
 public:
  using TraceHook = std::function<void(std::string_view kind, const std::string& detail)>;
  using ReportHook = std::function<void(ToolHandle, const Notification&)>;

  ToolRegistration register_tool(const ToolDescriptor& descriptor, std::shared_ptr<ToolSink> endpoint);
  void deregister_tool(ToolHandle handle);

  /// Returns the number of sinks invoked. Returns 0 for a publish deferred
  /// behind an in-progress delivery.
  std::size_t publish_trigger(const Trigger& trigger);

  void notify_change(ToolHandle handle, const Notification& notification);
  void report_change(ToolHandle handle, const Notification& notification);
  ToolMode set_mode(ToolHandle handle, ModeCommand command);
  ToolMode get_mode(ToolHandle handle) const;
  StatusValue query_status(ToolHandle handle, std::string_view key);

  std::vector<Notification> reports() const;
  std::vector<std::string> warnings() const;
  std::vector<std::string> subscriptions(ToolHandle handle) const;
  std::optional<ToolHandle> find(Tool tool) const;
  std::size_t live_count() const;

  void set_trace_hook(TraceHook hook);
  void set_report_hook(ReportHook hook);

 private:
  struct Entry {
    ToolRegistration reg;
    ToolMode mode = ToolMode::UNINITIALIZED;
    std::string channel;
  };

  Entry& live(ToolHandle handle);
  const Entry& live(ToolHandle handle) const;
  std::size_t deliver(const Trigger& trigger);
  void warn(std::string_view kind, std::string detail);

  mutable std::recursive_mutex mu_;
  ToolHandle next_handle_ = 1;
  std::map<ToolHandle, Entry> entries_;  // ordered by handle = registration order
  std::vector<Notification> reports_;
  std::vector<std::string> warnings_;
  std::deque<Trigger> deferred_;
  bool dispatching_ = false;
  TraceHook trace_;
  ReportHook report_hook_;
};

// ---------------------------------------------------------------------------

/// A protocol plugin stand-in. It records what it receives, tracks a locator
/// updated by LOCATOR_CHANGE notifications (body = locator text), and
/// answers `attached_hosts` when its descriptor carries NEMO.
class StubTool : public ToolSink {
 public:
  explicit StubTool(ToolDescriptor descriptor, std::int64_t attached_hosts = 0)
      : descriptor_(descriptor), attached_hosts_(attached_hosts) {}

  void on_trigger(const Trigger& trigger) override { triggers_.push_back(trigger); }
  void on_notification(const Notification& notification) override;
  void on_mode(ModeCommand command, ToolMode new_mode) override;
  StatusValue on_query(std::string_view key) override;

  const ToolDescriptor& descriptor() const { return descriptor_; }
  ToolMode mode() const { return mode_; }
  const std::optional<Locator>& locator() const { return locator_; }
  std::size_t ignored() const { return ignored_; }
  const std::vector<Trigger>& triggers() const { return triggers_; }
  const std::vector<Notification>& notifications() const { return notifications_; }
  const std::vector<ModeCommand>& mode_commands() const { return mode_commands_; }

 private:
  ToolDescriptor descriptor_;
  std::int64_t attached_hosts_;
  ToolMode mode_ = ToolMode::UNINITIALIZED;
  std::optional<Locator> locator_;
  std::size_t ignored_ = 0;
  std::vector<Trigger> triggers_;
  std::vector<Notification> notifications_;
  std::vector<ModeCommand> mode_commands_;
};

}  // namespace mobtool
