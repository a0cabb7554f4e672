#include "mobtool/toolbox.hpp"

namespace mobtool {

std::string_view to_string(ToolMode m) noexcept {
  switch (m) {
    case ToolMode::UNINITIALIZED: return "UNINITIALIZED";
    case ToolMode::READY: return "READY";
    case ToolMode::RUNNING: return "RUNNING";
    case ToolMode::FROZEN: return "FROZEN";
    case ToolMode::PAUSED: return "PAUSED";
    case ToolMode::TERMINATED: return "TERMINATED";
  }
  return "?";
}

std::string_view to_string(ModeCommand c) noexcept {
  switch (c) {
    case ModeCommand::INIT: return "INIT";
    case ModeCommand::RUN: return "RUN";
    case ModeCommand::FREEZE: return "FREEZE";
    case ModeCommand::THAW: return "THAW";
    case ModeCommand::PAUSE: return "PAUSE";
    case ModeCommand::CONT: return "CONT";
    case ModeCommand::TERMINATE: return "TERMINATE";
  }
  return "?";
}

std::optional<ToolMode> next_mode(ToolMode current, ModeCommand command) noexcept {
  if (current == ToolMode::TERMINATED) return std::nullopt;
  switch (command) {
    case ModeCommand::INIT:
      if (current == ToolMode::UNINITIALIZED) return ToolMode::READY;
      break;
    case ModeCommand::RUN:
      if (current == ToolMode::READY) return ToolMode::RUNNING;
      break;
    case ModeCommand::FREEZE:
      if (current == ToolMode::RUNNING) return ToolMode::FROZEN;
      break;
    case ModeCommand::THAW:
      if (current == ToolMode::FROZEN) return ToolMode::RUNNING;
      break;
    case ModeCommand::PAUSE:
      if (current == ToolMode::RUNNING) return ToolMode::PAUSED;
      break;
    case ModeCommand::CONT:
      if (current == ToolMode::PAUSED) return ToolMode::RUNNING;
      break;
    case ModeCommand::TERMINATE:
      return ToolMode::TERMINATED;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------

std::string notify_kind_name(std::uint16_t kind) {
  switch (kind) {
    case notify::LOCATOR_CHANGE: return "LOCATOR_CHANGE";
    case notify::INTERFACE_UP: return "INTERFACE_UP";
    case notify::INTERFACE_DOWN: return "INTERFACE_DOWN";
    case notify::HANDOVER_IMMINENT: return "HANDOVER_IMMINENT";
    case notify::HANDOVER_DONE: return "HANDOVER_DONE";
    case notify::STM_PUSH: return "STM_PUSH";
    case notify::STM_PULL: return "STM_PULL";
    case notify::STM_ACCEPT: return "STM_ACCEPT";
    case notify::STM_START: return "STM_START";
    case notify::STM_ACK: return "STM_ACK";
    case notify::STM_ERROR: return "STM_ERROR";
    case notify::STM_ABORT: return "STM_ABORT";
    case notify::STM_PAUSE: return "STM_PAUSE";
    case notify::STM_CONT: return "STM_CONT";
    default: return "KIND_" + std::to_string(kind);
  }
}

bool is_state_changing(std::uint16_t kind) noexcept {
  switch (kind) {
    case notify::LOCATOR_CHANGE:
    case notify::INTERFACE_UP:
    case notify::INTERFACE_DOWN:
    case notify::HANDOVER_IMMINENT:
    case notify::HANDOVER_DONE:
    case notify::STM_PUSH:
    case notify::STM_PULL:
    case notify::STM_START:
    case notify::STM_CONT:
      return true;
    default:
      return false;
  }
}

Bytes encode_notification(const Notification& n) {
  if (n.header.tool.size() > 255) throw Error(Errc::MALFORMED, "tool name longer than 255 bytes");
  Bytes out;
  ByteWriter w(out);
  w.u8(static_cast<std::uint8_t>(n.direction));
  w.u8(static_cast<std::uint8_t>(n.header.tool.size()));
  w.raw(n.header.tool);
  w.u16(n.header.kind);
  w.u64(static_cast<std::uint64_t>(n.header.ts));
  w.raw(n.body);
  return out;
}

namespace {

NotificationHeader read_header(ByteReader& r, NotificationDirection& direction) {
  const auto dir = r.u8();
  if (dir != 1 && dir != 2) throw Error(Errc::MALFORMED, "notification direction " + std::to_string(dir), 0);
  direction = static_cast<NotificationDirection>(dir);
  NotificationHeader h;
  auto name = r.take(r.u8());
  h.tool.assign(name.begin(), name.end());
  h.kind = r.u16();
  h.ts = static_cast<SimTime>(r.u64());
  return h;
}

}  // namespace

Notification decode_notification(ByteView bytes) {
  ByteReader r(bytes);
  Notification n;
  n.header = read_header(r, n.direction);
  auto body = r.rest();
  n.body.assign(body.begin(), body.end());
  return n;
}

NotificationHeader peek_notification_header(ByteView bytes) {
  ByteReader r(bytes);
  NotificationDirection ignored{};
  return read_header(r, ignored);
}

std::string tool_channel_name(const ToolDescriptor& d) { return std::string(to_string(d.tool)); }

// ---------------------------------------------------------------------------

ToolRegistration Toolbox::register_tool(const ToolDescriptor& descriptor, std::shared_ptr<ToolSink> endpoint) {
  std::lock_guard lock(mu_);
  if (!endpoint) throw Error(Errc::MALFORMED, "null tool endpoint");
  for (const auto& [h, e] : entries_) {
    if (e.reg.descriptor.tool == descriptor.tool && e.reg.descriptor.version == descriptor.version)
      throw Error(Errc::DUPLICATE_REGISTRATION, to_string(descriptor));
  }
  Entry entry;
  entry.reg = ToolRegistration{next_handle_++, descriptor, std::move(endpoint)};
  entry.channel = tool_channel_name(descriptor);
  const auto handle = entry.reg.handle;
  auto reg = entry.reg;
  entries_.emplace(handle, std::move(entry));
  if (trace_) trace_("TOOL_REGISTERED", to_string(descriptor) + " handle=" + std::to_string(handle));
  return reg;
}

void Toolbox::deregister_tool(ToolHandle handle) {
  std::lock_guard lock(mu_);
  auto it = entries_.find(handle);
  if (it == entries_.end()) throw Error(Errc::UNKNOWN_HANDLE, std::to_string(handle));
  const std::string channel = it->second.channel;
  entries_.erase(it);

  bool channel_still_live = false;
  for (const auto& [h, e] : entries_) channel_still_live |= (e.channel == channel);
  if (!channel_still_live) {
    std::size_t dropped = 0;
    std::erase_if(deferred_, [&](const Trigger& t) {
      const bool hit = !t.channel.is_common() && *t.channel.tool == channel;
      dropped += hit;
      return hit;
    });
    if (dropped > 0)
      warn("PENDING_TRIGGERS_DROPPED", "channel=MTI-" + channel + " count=" + std::to_string(dropped));
  }
  if (trace_) trace_("TOOL_DEREGISTERED", "handle=" + std::to_string(handle));
}

std::size_t Toolbox::publish_trigger(const Trigger& trigger) {
  std::lock_guard lock(mu_);
  if (dispatching_) {
    deferred_.push_back(trigger);
    return 0;
  }
  dispatching_ = true;
  struct Reset {
    bool& flag;
    ~Reset() { flag = false; }
  } reset{dispatching_};

  const auto delivered = deliver(trigger);
  while (!deferred_.empty()) {
    auto next = std::move(deferred_.front());
    deferred_.pop_front();
    deliver(next);
  }
  return delivered;
}

std::size_t Toolbox::deliver(const Trigger& trigger) {
  std::vector<ToolHandle> targets;
  for (const auto& [h, e] : entries_) {
    if (trigger.channel.is_common() || e.channel == *trigger.channel.tool) targets.push_back(h);
  }
  std::size_t delivered = 0;
  for (auto h : targets) {
    auto it = entries_.find(h);
    if (it == entries_.end()) continue;  // deregistered by an earlier sink in this turn
    auto sink = it->second.reg.endpoint;
    sink->on_trigger(trigger);
    ++delivered;
  }
  if (delivered == 0)
    warn("ZERO_DELIVERY", "channel=" + to_string(trigger.channel) + " kind=" + std::string(to_string(trigger.kind)));
  return delivered;
}

void Toolbox::notify_change(ToolHandle handle, const Notification& notification) {
  std::lock_guard lock(mu_);
  auto sink = live(handle).reg.endpoint;
  if (notification.direction != NotificationDirection::TOOLBOX_TO_TOOL)
    throw Error(Errc::MALFORMED, "notify_change requires TOOLBOX_TO_TOOL");
  sink->on_notification(notification);
}

void Toolbox::report_change(ToolHandle handle, const Notification& notification) {
  std::lock_guard lock(mu_);
  live(handle);
  if (notification.direction != NotificationDirection::TOOL_TO_TOOLBOX)
    throw Error(Errc::MALFORMED, "report_change requires TOOL_TO_TOOLBOX");
  reports_.push_back(notification);
  if (report_hook_) report_hook_(handle, notification);
}

ToolMode Toolbox::set_mode(ToolHandle handle, ModeCommand command) {
  std::lock_guard lock(mu_);
  auto& entry = live(handle);
  auto next = next_mode(entry.mode, command);
  if (!next)
    throw Error(Errc::INVALID_TRANSITION,
                std::string(to_string(command)) + " from " + std::string(to_string(entry.mode)));
  entry.mode = *next;
  auto sink = entry.reg.endpoint;
  sink->on_mode(command, *next);
  return *next;
}

ToolMode Toolbox::get_mode(ToolHandle handle) const {
  std::lock_guard lock(mu_);
  return live(handle).mode;
}

StatusValue Toolbox::query_status(ToolHandle handle, std::string_view key) {
  std::lock_guard lock(mu_);
  auto sink = live(handle).reg.endpoint;
  return sink->on_query(key);
}

std::vector<Notification> Toolbox::reports() const {
  std::lock_guard lock(mu_);
  return reports_;
}

std::vector<std::string> Toolbox::warnings() const {
  std::lock_guard lock(mu_);
  return warnings_;
}

std::vector<std::string> Toolbox::subscriptions(ToolHandle handle) const {
  std::lock_guard lock(mu_);
  return {"MTI-common", "MTI-" + live(handle).channel};
}

std::optional<ToolHandle> Toolbox::find(Tool tool) const {
  std::lock_guard lock(mu_);
  for (const auto& [h, e] : entries_)
    if (e.reg.descriptor.tool == tool) return h;
  return std::nullopt;
}

std::size_t Toolbox::live_count() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

void Toolbox::set_trace_hook(TraceHook hook) {
  std::lock_guard lock(mu_);
  trace_ = std::move(hook);
}

void Toolbox::set_report_hook(ReportHook hook) {
  std::lock_guard lock(mu_);
  report_hook_ = std::move(hook);
}

Toolbox::Entry& Toolbox::live(ToolHandle handle) {
  auto it = entries_.find(handle);
  if (it == entries_.end()) throw Error(Errc::UNKNOWN_HANDLE, std::to_string(handle));
  return it->second;
}

const Toolbox::Entry& Toolbox::live(ToolHandle handle) const {
  auto it = entries_.find(handle);
  if (it == entries_.end()) throw Error(Errc::UNKNOWN_HANDLE, std::to_string(handle));
  return it->second;
}

void Toolbox::warn(std::string_view kind, std::string detail) {
  warnings_.push_back(std::string(kind) + " " + detail);
  if (trace_) trace_(kind, detail);
}

// ---------------------------------------------------------------------------

void StubTool::on_notification(const Notification& notification) {
  notifications_.push_back(notification);
  if (mode_ == ToolMode::FROZEN && is_state_changing(notification.header.kind)) {
    ++ignored_;
    return;
  }
  if (notification.header.kind == notify::LOCATOR_CHANGE) {
    std::string text(notification.body.begin(), notification.body.end());
    locator_ = parse_locator(text);
  }
}

void StubTool::on_mode(ModeCommand command, ToolMode new_mode) {
  mode_commands_.push_back(command);
  mode_ = new_mode;
}

StatusValue StubTool::on_query(std::string_view key) {
  if (key == "attached_hosts" && descriptor_.features.contains(FeatureId::NEMO)) return attached_hosts_;
  if (key == "mode") return std::string(to_string(mode_));
  throw Error(Errc::UNSUPPORTED_QUERY, std::string(key) + " on " + std::string(to_string(descriptor_.tool)));
}

}  // namespace mobtool
