#include "mobtool/stm.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace mobtool::stm {

using wire::ControlOp;
using wire::ErrorCode;
using wire::Message;
using wire::MsgType;

namespace {

constexpr std::uint16_t kBodyPeerNode = 0x8001;
constexpr std::uint16_t kBodyPeerLocator = 0x8002;
constexpr std::uint16_t kBodyExpedited = 0x8003;
constexpr std::size_t kMaxTypes = 32;

std::uint32_t full_mask(std::size_t n) { return n >= 32 ? 0xFFFF'FFFFu : ((std::uint32_t{1} << n) - 1); }

void put_tlv(ByteWriter& w, const wire::Tlv& t) {
  w.u16(t.type);
  w.u16(static_cast<std::uint16_t>(t.value.size()));
  w.raw(t.value);
}

std::vector<wire::Tlv> read_tlvs(ByteView body) {
  std::vector<wire::Tlv> out;
  ByteReader r(body, 0, Errc::MALFORMED);
  while (!r.empty()) {
    wire::Tlv t;
    t.type = r.u16();
    auto len = r.u16();
    auto v = r.take(len);
    t.value.assign(v.begin(), v.end());
    out.push_back(std::move(t));
  }
  return out;
}

Error stm_error(Errc code, std::string detail) { return Error(code, std::move(detail)); }

}  // namespace

void validate(const StmConfig& c) {
  if (c.listen_port == 0) throw stm_error(Errc::BAD_CONFIG, "listen_port must be non-zero");
  if (c.retransmit_timeout_ms < 1) throw stm_error(Errc::BAD_CONFIG, "retransmit_timeout_ms must be >= 1");
  if (c.install_timeout_ms < 1) throw stm_error(Errc::BAD_CONFIG, "install_timeout_ms must be >= 1");
  if (c.fragment_size < 1 || c.fragment_size > kMaxBlockPayload)
    throw stm_error(Errc::BAD_CONFIG, "fragment_size must be in 1..65535");
  if (c.fragment_interval_ms < 0) throw stm_error(Errc::BAD_CONFIG, "fragment_interval_ms must be >= 0");
}

std::uint16_t node_tag(const NodeId& id) {
  // FNV-1a over the printable form, folded to 16 bits.
  std::uint32_t h = 2166136261u;
  for (unsigned char c : to_string(id)) {
    h ^= c;
    h *= 16777619u;
  }
  return static_cast<std::uint16_t>((h >> 16) ^ (h & 0xFFFF));
}

std::string to_string(TransferId id) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(id.value));
  return buf;
}

std::string_view to_string(StmState s) noexcept {
  switch (s) {
    case StmState::IDLE: return "IDLE";
    case StmState::PROPOSED: return "PROPOSED";
    case StmState::ACCEPTED: return "ACCEPTED";
    case StmState::TRANSFERRING: return "TRANSFERRING";
    case StmState::AWAIT_INSTALL_ACK: return "AWAIT_INSTALL_ACK";
    case StmState::COMPLETED: return "COMPLETED";
    case StmState::PAUSED: return "PAUSED";
    case StmState::ABORTED: return "ABORTED";
    case StmState::FAILED: return "FAILED";
  }
  return "?";
}

bool is_terminal(StmState s) noexcept {
  return s == StmState::COMPLETED || s == StmState::ABORTED || s == StmState::FAILED;
}

std::string_view to_string(StmEvent e) noexcept {
  switch (e) {
    case StmEvent::BEGIN: return "BEGIN";
    case StmEvent::RECV_REQUEST: return "RECV_REQUEST";
    case StmEvent::RECV_RESPONSE: return "RECV_RESPONSE";
    case StmEvent::START: return "START";
    case StmEvent::ALL_SENT: return "ALL_SENT";
    case StmEvent::RECV_DATA: return "RECV_DATA";
    case StmEvent::DATA_COMPLETE: return "DATA_COMPLETE";
    case StmEvent::RECV_INSTALL_ACK: return "RECV_INSTALL_ACK";
    case StmEvent::PAUSE: return "PAUSE";
    case StmEvent::RESUME: return "RESUME";
    case StmEvent::ABORT: return "ABORT";
    case StmEvent::RETRANSMIT: return "RETRANSMIT";
    case StmEvent::FAIL: return "FAIL";
  }
  return "?";
}

std::optional<StmState> next_state(StmState s, StmEvent e) noexcept {
  using S = StmState;
  using E = StmEvent;
  const bool live = !is_terminal(s) && s != S::IDLE;
  if (live && e == E::ABORT) return S::ABORTED;
  if (live && e == E::FAIL) return S::FAILED;
  switch (s) {
    case S::IDLE:
      if (e == E::BEGIN) return S::PROPOSED;
      if (e == E::RECV_REQUEST) return S::ACCEPTED;
      break;
    case S::PROPOSED:
      if (e == E::RECV_RESPONSE) return S::ACCEPTED;
      if (e == E::RETRANSMIT) return S::PROPOSED;
      break;
    case S::ACCEPTED:
      if (e == E::RECV_REQUEST || e == E::RECV_RESPONSE) return S::ACCEPTED;
      if (e == E::START || e == E::RECV_DATA) return S::TRANSFERRING;
      break;
    case S::TRANSFERRING:
      if (e == E::RECV_REQUEST || e == E::RECV_RESPONSE || e == E::RECV_DATA || e == E::RETRANSMIT)
        return S::TRANSFERRING;
      if (e == E::ALL_SENT) return S::AWAIT_INSTALL_ACK;
      if (e == E::DATA_COMPLETE || e == E::RECV_INSTALL_ACK) return S::COMPLETED;
      if (e == E::PAUSE) return S::PAUSED;
      break;
    case S::AWAIT_INSTALL_ACK:
      if (e == E::RECV_REQUEST || e == E::RECV_RESPONSE || e == E::RETRANSMIT) return S::AWAIT_INSTALL_ACK;
      if (e == E::RECV_INSTALL_ACK) return S::COMPLETED;
      break;
    case S::PAUSED:
      if (e == E::RECV_REQUEST || e == E::RECV_RESPONSE || e == E::RECV_DATA) return S::PAUSED;
      if (e == E::RESUME) return S::TRANSFERRING;
      if (e == E::DATA_COMPLETE) return S::COMPLETED;
      break;
    case S::COMPLETED:
      if (e == E::RECV_REQUEST || e == E::RECV_RESPONSE || e == E::RECV_DATA || e == E::RECV_INSTALL_ACK)
        return S::COMPLETED;
      break;
    case S::ABORTED:
    case S::FAILED: break;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// MTI bodies

Bytes encode_request_body(const TransferRequest& req) {
  Bytes out;
  ByteWriter w(out);
  put_tlv(w, wire::make_node_id(req.mobile));
  if (req.previous_access) put_tlv(w, wire::make_prev_locator(*req.previous_access));
  put_tlv(w, wire::make_ctx_types(req.types));
  put_tlv(w, wire::make_priority(req.priority));
  auto peer = wire::make_node_id(req.peer.node);
  peer.type = kBodyPeerNode;
  put_tlv(w, peer);
  auto loc = wire::make_prev_locator(req.peer.locator);
  loc.type = kBodyPeerLocator;
  put_tlv(w, loc);
  put_tlv(w, wire::Tlv{kBodyExpedited, Bytes{static_cast<std::uint8_t>(req.expedited ? 1 : 0)}});
  return out;
}

TransferRequest decode_request_body(ByteView body) {
  TransferRequest req;
  bool have_peer = false;
  bool have_loc = false;
  for (const auto& t : read_tlvs(body)) {
    switch (t.type) {
      case wire::tlv::NODE_ID: req.mobile = wire::read_node_id(t); break;
      case wire::tlv::PREV_LOCATOR: req.previous_access = wire::read_locator(t); break;
      case wire::tlv::CTX_TYPES: req.types = wire::read_ctx_types(t); break;
      case wire::tlv::PRIORITY: req.priority = wire::read_priority(t); break;
      case kBodyPeerNode:
        req.peer.node = wire::read_node_id(t);
        have_peer = true;
        break;
      case kBodyPeerLocator:
        req.peer.locator = wire::read_locator(t);
        have_loc = true;
        break;
      case kBodyExpedited:
        if (t.value.size() != 1) throw Error(Errc::MALFORMED, "expedited flag must be one byte");
        req.expedited = t.value[0] != 0;
        break;
      default: break;
    }
  }
  if (!have_peer || !have_loc) throw Error(Errc::MALFORMED, "request body without peer");
  return req;
}

Bytes encode_id_body(TransferId id) {
  Bytes out;
  ByteWriter(out).u64(id.value);
  return out;
}

TransferId decode_id_body(ByteView body) {
  ByteReader r(body, 0, Errc::MALFORMED);
  TransferId id{r.u64()};
  return id;
}

AcceptReport decode_accept_report(ByteView body) {
  ByteReader r(body, 0, Errc::MALFORMED);
  AcceptReport a;
  a.id.value = r.u64();
  a.accepted = r.u32();
  while (!r.empty()) a.requested.push_back(ContextTypeId{r.u16()});
  return a;
}

ErrorReport decode_error_report(ByteView body) {
  ByteReader r(body, 0, Errc::MALFORMED);
  ErrorReport e;
  e.id.value = r.u64();
  e.code = static_cast<ErrorCode>(r.u16());
  auto text = r.rest();
  e.text.assign(text.begin(), text.end());
  return e;
}

// ---------------------------------------------------------------------------

namespace {

struct Fragment {
  std::size_t block = 0;
  std::uint32_t offset = 0;  // within the block payload
  std::uint32_t length = 0;
  std::uint64_t start = 0;  // within the whole transfer
};

struct Reassembly {
  Bytes data;
  std::vector<bool> have;
  std::uint32_t filled = 0;
  bool known = false;
  std::uint8_t flags = 0;
  bool installed = false;

  std::uint32_t total() const { return static_cast<std::uint32_t>(data.size()); }
  std::uint32_t prefix() const {
    std::uint32_t n = 0;
    while (n < have.size() && have[n]) ++n;
    return n;
  }
};

}  // namespace

struct Stm::Session {
  SessionInfo info;
  bool expedited = false;
  std::optional<Locator> previous_access;

  // data holder
  std::vector<ContextBlock> outgoing;
  std::vector<Fragment> fragments;
  std::size_t next_fragment = 0;
  bool data_in_response = false;

  // receiver
  std::map<ContextTypeId, Reassembly> incoming;
  bool data_seen = false;

  std::optional<Message> last_request;  // initiator
  std::optional<Message> cached_response;  // responder

  std::optional<StmHost::TimerId> retransmit_timer;
  std::optional<StmHost::TimerId> watchdog_timer;
  std::optional<StmHost::TimerId> pump_timer;

  std::vector<ContextTypeId> accepted_types() const {
    std::vector<ContextTypeId> out;
    for (std::size_t i = 0; i < info.requested.size(); ++i)
      if (info.accepted & (std::uint32_t{1} << i)) out.push_back(info.requested[i]);
    return out;
  }
  bool accepts(ContextTypeId t) const {
    for (std::size_t i = 0; i < info.requested.size(); ++i)
      if (info.requested[i] == t && (info.accepted & (std::uint32_t{1} << i))) return true;
    return false;
  }
  std::uint64_t sent_offset() const {
    if (next_fragment == 0) return 0;
    const auto& f = fragments[next_fragment - 1];
    return f.start + f.length;
  }
};

/// The STM's face towards the toolbox.
class Stm::Adapter : public ToolSink {
 public:
  explicit Adapter(Stm& stm) : stm_(stm) {}

  void on_trigger(const Trigger&) override { ++triggers_; }

  void on_notification(const Notification& n) override {
    std::lock_guard lock(stm_.mu_);
    if (stm_.mode_ == ToolMode::FROZEN && is_state_changing(n.header.kind)) {
      ++ignored_;
      return;
    }
    switch (n.header.kind) {
      case notify::STM_PUSH: stm_.begin_push(decode_request_body(n.body)); break;
      case notify::STM_PULL: stm_.begin_pull(decode_request_body(n.body)); break;
      case notify::STM_START: stm_.start(decode_id_body(n.body)); break;
      case notify::STM_ABORT: stm_.abort(decode_id_body(n.body)); break;
      case notify::STM_PAUSE: stm_.pause(decode_id_body(n.body)); break;
      case notify::STM_CONT: stm_.resume(decode_id_body(n.body)); break;
      default: ++ignored_; break;
    }
  }

  void on_mode(ModeCommand command, ToolMode new_mode) override {
    std::lock_guard lock(stm_.mu_);
    if (command == ModeCommand::TERMINATE) {
      stm_.terminate();
      return;
    }
    stm_.mode_ = new_mode;
  }

  StatusValue on_query(std::string_view key) override {
    std::lock_guard lock(stm_.mu_);
    if (key == "mode") return std::string(to_string(stm_.mode_));
    if (key == "sessions") return static_cast<std::int64_t>(stm_.sessions_.size());
    if (key == "live_sessions") return static_cast<std::int64_t>(stm_.live_sessions());
    throw Error(Errc::UNSUPPORTED_QUERY, std::string(key));
  }

  std::size_t ignored() const { return ignored_; }

 private:
  Stm& stm_;
  std::size_t triggers_ = 0;
  std::size_t ignored_ = 0;
};

Stm::Stm(NodeId self, StmHost& host) : self_(std::move(self)), host_(host), tag_(node_tag(self_)) {}

Stm::~Stm() {
  std::lock_guard lock(mu_);
  for (auto& [id, s] : sessions_) cancel_timers(*s);
  if (toolbox_) {
    try {
      toolbox_->deregister_tool(handle_);
    } catch (const Error&) {
    }
  }
}

ToolHandle Stm::attach(Toolbox& toolbox) {
  std::lock_guard lock(mu_);
  if (toolbox_) throw Error(Errc::DUPLICATE_REGISTRATION, "STM already attached");
  ToolDescriptor d;
  d.tool = Tool::STM;
  d.stacks = {AddressFamily::V4, AddressFamily::V6};
  d.features = {FeatureId::STATE_TRANSFER};
  d.app_classes = {AppClass::GENERIC};
  adapter_ = std::make_shared<Adapter>(*this);
  auto reg = toolbox.register_tool(d, adapter_);
  toolbox_ = &toolbox;
  handle_ = reg.handle;
  return handle_;
}

void Stm::init(const StmConfig& config) {
  std::lock_guard lock(mu_);
  if (mode_ != ToolMode::UNINITIALIZED) throw Error(Errc::ALREADY_INITIALIZED, to_string(self_));
  validate(config);
  config_ = config;
  if (toolbox_)
    toolbox_->set_mode(handle_, ModeCommand::INIT);
  else
    mode_ = ToolMode::READY;
}

ToolMode Stm::mode() const {
  std::lock_guard lock(mu_);
  return mode_;
}

void Stm::set_security_association(const NodeId& peer, bool established) {
  std::lock_guard lock(mu_);
  security_[peer] = established;
}

void Stm::register_context_endpoint(ContextEndpoint endpoint) {
  std::lock_guard lock(mu_);
  if (!endpoint.ctype.valid()) throw Error(Errc::BAD_CONFIG, "invalid context type " + to_string(endpoint.ctype));
  if (endpoints_.count(endpoint.ctype.code)) throw Error(Errc::DUPLICATE_CTYPE, to_string(endpoint.ctype));
  endpoints_.emplace(endpoint.ctype.code, std::move(endpoint));
}

const SessionInfo& Stm::session(TransferId id) const {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw Error(Errc::UNKNOWN_TRANSFER, to_string(id));
  return it->second->info;
}

std::vector<TransferId> Stm::sessions() const {
  std::lock_guard lock(mu_);
  std::vector<TransferId> out;
  for (const auto& [id, s] : sessions_) out.push_back(id);
  return out;
}

std::size_t Stm::live_sessions() const {
  std::lock_guard lock(mu_);
  return static_cast<std::size_t>(std::count_if(sessions_.begin(), sessions_.end(),
                                                [](const auto& kv) { return !is_terminal(kv.second->info.state); }));
}

std::size_t Stm::ignored_notifications() const {
  std::lock_guard lock(mu_);
  return adapter_ ? adapter_->ignored() : 0;
}

// ---------------------------------------------------------------------------
// Session bookkeeping

Stm::Session* Stm::lookup(TransferId id) {
  auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second.get();
}

Stm::Session& Stm::find(TransferId id) {
  auto* s = lookup(id);
  if (!s) throw Error(Errc::UNKNOWN_TRANSFER, to_string(id));
  return *s;
}

void Stm::require_active() const {
  if (mode_ == ToolMode::UNINITIALIZED || mode_ == ToolMode::TERMINATED)
    throw Error(Errc::NOT_INITIALIZED, "STM is " + std::string(to_string(mode_)));
}

bool Stm::can(const Session& s, StmEvent event) const { return next_state(s.info.state, event).has_value(); }

void Stm::move(Session& s, StmEvent event) {
  auto next = next_state(s.info.state, event);
  if (!next)
    throw Error(Errc::BAD_STATE, std::string(to_string(event)) + " in " + std::string(to_string(s.info.state)));
  const auto previous = s.info.state;
  s.info.state = *next;
  if (previous == *next) return;
  host_.trace("STM_STATE", "id=" + to_string(s.info.id) + " from=" + std::string(to_string(previous)) +
                               " to=" + std::string(to_string(*next)) + " event=" + std::string(to_string(event)));
  if (observer_) observer_(s.info, previous);
}

TransferId Stm::begin(const TransferRequest& req, Direction direction) {
  require_active();
  if (mode_ != ToolMode::READY && mode_ != ToolMode::RUNNING)
    throw Error(Errc::BAD_STATE, "STM is " + std::string(to_string(mode_)));
  if (req.types.empty()) throw Error(Errc::EMPTY_TYPES, "no context types requested");
  if (req.types.size() > kMaxTypes) throw Error(Errc::BAD_CONFIG, "at most 32 context types per transfer");
  for (auto t : req.types)
    if (!t.valid()) throw Error(Errc::BAD_CONFIG, "invalid context type " + to_string(t));
  if (req.priority > 7) throw Error(Errc::BAD_CONFIG, "priority must be 0-7");
  auto sa = security_.find(req.peer.node);
  if (sa == security_.end() || !sa->second) throw Error(Errc::NO_SECURITY_ASSOC, to_string(req.peer.node));

  auto s = std::make_unique<Session>();
  s->info.id = TransferId::make(tag_, next_seq_++);
  s->info.role = Role::INITIATOR;
  s->info.direction = direction;
  s->info.peer = req.peer;
  s->info.mobile = req.mobile;
  s->info.requested = req.types;
  s->info.priority = req.priority;
  s->info.security_assoc = true;
  s->expedited = direction == Direction::PULL && req.expedited;
  s->previous_access = req.previous_access;

  Message m;
  m.type = MsgType::CTX_REQUEST;
  m.transfer_id = s->info.id.value;
  if (direction == Direction::PULL) m.flags |= wire::flag::PULL;
  if (s->expedited) m.flags |= wire::flag::EXPEDITED;
  m.tlvs.push_back(wire::make_node_id(req.mobile));
  if (req.previous_access) m.tlvs.push_back(wire::make_prev_locator(*req.previous_access));
  m.tlvs.push_back(wire::make_ctx_types(req.types));
  m.tlvs.push_back(wire::make_priority(req.priority));
  s->last_request = m;

  auto id = s->info.id;
  auto& ref = *s;
  sessions_.emplace(id, std::move(s));
  move(ref, StmEvent::BEGIN);
  send(ref, m);
  arm_retransmit(ref);
  return id;
}

TransferId Stm::begin_push(const TransferRequest& request) {
  std::lock_guard lock(mu_);
  return begin(request, Direction::PUSH);
}

TransferId Stm::begin_pull(const TransferRequest& request) {
  std::lock_guard lock(mu_);
  return begin(request, Direction::PULL);
}

// ---------------------------------------------------------------------------
// Output

void Stm::send_raw(const Locator& to, const Message& msg) { host_.send(to, wire::serialize(msg)); }

void Stm::send(Session& s, Message msg) {
  msg.transfer_id = s.info.id.value;
  send_raw(s.info.peer.locator, msg);
}

void Stm::reply_error(const Message& to_msg, const Locator& from, ErrorCode code, std::string text) {
  Message e;
  e.type = MsgType::ERROR;
  e.transfer_id = to_msg.transfer_id;
  e.tlvs.push_back(wire::make_error(code, text));
  host_.trace("STM_REJECT", "id=" + to_string(TransferId{to_msg.transfer_id}) + " code=" +
                                std::string(wire::to_string(code)) + " reason=" + text);
  send_raw(from, e);
}

void Stm::report(std::uint16_t kind, Bytes body) {
  Notification n;
  n.direction = NotificationDirection::TOOL_TO_TOOLBOX;
  n.header = NotificationHeader{"STM", kind, host_.now()};
  n.body = std::move(body);
  reports_.push_back(n);
  if (toolbox_ && !terminating_) toolbox_->report_change(handle_, n);
}

void Stm::report_error(const Session& s, ErrorCode code, const std::string& text) {
  Bytes body;
  ByteWriter w(body);
  w.u64(s.info.id.value);
  w.u16(static_cast<std::uint16_t>(code));
  w.raw(text);
  report(notify::STM_ERROR, std::move(body));
}

// ---------------------------------------------------------------------------
// Timers

void Stm::arm_retransmit(Session& s) {
  if (s.retransmit_timer) host_.cancel(*s.retransmit_timer);
  std::weak_ptr<int> alive = alive_;
  auto id = s.info.id;
  s.retransmit_timer = host_.schedule(config_.retransmit_timeout_ms, [this, alive, id] {
    if (alive.expired()) return;
    on_retransmit_timer(id);
  });
}

void Stm::arm_watchdog(Session& s) {
  if (s.watchdog_timer) host_.cancel(*s.watchdog_timer);
  std::weak_ptr<int> alive = alive_;
  auto id = s.info.id;
  s.watchdog_timer = host_.schedule(config_.install_timeout_ms, [this, alive, id] {
    if (alive.expired()) return;
    on_watchdog(id);
  });
}

void Stm::cancel_timers(Session& s) {
  for (auto* t : {&s.retransmit_timer, &s.watchdog_timer, &s.pump_timer}) {
    if (*t) host_.cancel(**t);
    t->reset();
  }
}

void Stm::on_retransmit_timer(TransferId id) {
  std::lock_guard lock(mu_);
  auto* s = lookup(id);
  if (!s) return;
  s->retransmit_timer.reset();
  if (is_terminal(s->info.state)) return;
  retransmit(*s, std::nullopt);
}

void Stm::on_watchdog(TransferId id) {
  std::lock_guard lock(mu_);
  auto* s = lookup(id);
  if (!s) return;
  s->watchdog_timer.reset();
  if (is_terminal(s->info.state)) return;
  if (s->info.is_data_holder())
    fail(*s, ErrorCode::REJECTED, "start timeout", true);
  else
    fail(*s, ErrorCode::INSTALL_FAILED, "install timeout", true);
}

// ---------------------------------------------------------------------------
// Sending data

void Stm::prepare_outgoing(Session& s) {
  s.fragments.clear();
  s.next_fragment = 0;
  std::uint64_t start = 0;
  for (std::size_t b = 0; b < s.outgoing.size(); ++b) {
    const auto size = static_cast<std::uint32_t>(s.outgoing[b].payload.size());
    std::uint32_t off = 0;
    do {
      const auto len = std::min(config_.fragment_size, size - off);
      s.fragments.push_back(Fragment{b, off, len, start});
      off += len;
      start += len;
    } while (off < size);
  }
  s.info.total = start;
}

void Stm::send_fragment(Session& s, std::size_t index) {
  const auto& f = s.fragments[index];
  const auto& block = s.outgoing[f.block];
  ContextBlock slice{block.ctype, block.flags,
                     Bytes(block.payload.begin() + f.offset, block.payload.begin() + f.offset + f.length)};
  Message m;
  m.type = MsgType::CTX_DATA;
  if (index + 1 == s.fragments.size()) m.flags |= wire::flag::FINAL_FRAGMENT;
  m.tlvs.push_back(wire::make_block(slice));
  m.tlvs.push_back(wire::make_fragment({f.offset, static_cast<std::uint32_t>(block.payload.size())}));
  send(s, std::move(m));
}

void Stm::pump(TransferId id) {
  auto* s = lookup(id);
  if (!s) return;
  s->pump_timer.reset();
  if (s->info.state != StmState::TRANSFERRING || !s->info.is_data_holder()) return;
  if (s->next_fragment < s->fragments.size()) {
    send_fragment(*s, s->next_fragment++);
    s->info.offset = s->sent_offset();
    if (s->info.state != StmState::TRANSFERRING) return;  // the host paused or aborted from inside send()
  }
  if (s->next_fragment >= s->fragments.size()) {
    move(*s, StmEvent::ALL_SENT);
    arm_retransmit(*s);
    return;
  }
  std::weak_ptr<int> alive = alive_;
  s->pump_timer = host_.schedule(config_.fragment_interval_ms, [this, alive, id] {
    if (alive.expired()) return;
    std::lock_guard lock(mu_);
    pump(id);
  });
}

// Rewinds to the fragment covering `offset`. In burst mode everything from
// there on goes out at once (used once the holder has already sent it all).
void Stm::send_from(Session& s, std::uint64_t offset, bool burst) {
  std::size_t k = s.fragments.size();
  for (std::size_t i = 0; i < s.fragments.size(); ++i) {
    const auto& f = s.fragments[i];
    if (f.start + f.length > offset || (f.length == 0 && f.start >= offset)) {
      k = i;
      break;
    }
  }
  if (burst) {
    if (k == s.fragments.size() && !s.fragments.empty()) k = s.fragments.size() - 1;
    for (std::size_t i = k; i < s.fragments.size(); ++i) send_fragment(s, i);
    return;
  }
  if (s.pump_timer) {
    host_.cancel(*s.pump_timer);
    s.pump_timer.reset();
  }
  s.next_fragment = k;
  pump(s.info.id);
}

void Stm::internal_start(Session& s) {
  move(s, StmEvent::START);
  if (s.info.is_data_holder()) {
    s.outgoing.clear();
    for (auto t : s.accepted_types()) {
      auto it = endpoints_.find(t.code);
      std::optional<ContextBlock> block;
      if (it != endpoints_.end() && it->second.provider) block = it->second.provider(s.info.mobile);
      if (!block) block = ContextBlock{t, 0, {}};
      block->ctype = t;
      s.outgoing.push_back(std::move(*block));
    }
    prepare_outgoing(s);
    pump(s.info.id);
  } else {
    Message m;
    m.type = MsgType::CONTROL;
    m.tlvs.push_back(wire::make_control(ControlOp::RESUME, 0));
    send(s, std::move(m));
    arm_retransmit(s);
  }
}

void Stm::retransmit(Session& s, std::optional<std::uint64_t> from_offset) {
  if (!can(s, StmEvent::RETRANSMIT)) {
    host_.trace("STM_DISCARD", "id=" + to_string(s.info.id) + " reason=no retransmit in " +
                                   std::string(to_string(s.info.state)));
    return;
  }
  if (s.info.retransmissions >= config_.max_retries) {
    fail(s, ErrorCode::RETRIES_EXHAUSTED, "retries exhausted", true);
    return;
  }
  ++s.info.retransmissions;
  move(s, StmEvent::RETRANSMIT);
  host_.trace("STM_RETRANSMIT", "id=" + to_string(s.info.id) + " n=" + std::to_string(s.info.retransmissions));
  switch (s.info.state) {
    case StmState::PROPOSED: send(s, *s.last_request); break;
    case StmState::AWAIT_INSTALL_ACK:
      if (s.data_in_response)
        send(s, *s.cached_response);
      else
        send_from(s, from_offset.value_or(0), true);
      break;
    case StmState::TRANSFERRING:
      if (s.info.is_data_holder()) {
        send_from(s, from_offset.value_or(0), false);
        return;  // the pump re-arms as needed
      } else {
        Message m;
        m.type = MsgType::CONTROL;
        m.tlvs.push_back(wire::make_control(ControlOp::RESUME, contiguous_offset(s)));
        send(s, std::move(m));
      }
      break;
    default: break;
  }
  arm_retransmit(s);
}

// ---------------------------------------------------------------------------
// Receiving data

void Stm::accept_block(Session& s, const ContextBlock& block, std::optional<wire::FragmentPos> pos) {
  if (!s.accepts(block.ctype)) {
    host_.trace("STM_DISCARD", "id=" + to_string(s.info.id) + " reason=unaccepted ctype " + to_string(block.ctype));
    return;
  }
  auto& r = s.incoming[block.ctype];
  if (r.installed) return;
  if (!pos) pos = wire::FragmentPos{0, static_cast<std::uint32_t>(block.payload.size())};
  if (!r.known) {
    r.data.assign(pos->total, 0);
    r.have.assign(pos->total, false);
    r.known = true;
    r.flags = block.flags;
    s.info.total += pos->total;
  }
  if (pos->total != r.total() || std::uint64_t{pos->offset} + block.payload.size() > r.total()) {
    host_.trace("STM_DISCARD", "id=" + to_string(s.info.id) + " reason=fragment outside block");
    return;
  }
  for (std::size_t i = 0; i < block.payload.size(); ++i) {
    const auto at = pos->offset + i;
    if (!r.have[at]) {
      r.have[at] = true;
      r.data[at] = block.payload[i];
      ++r.filled;
    }
  }
  s.info.offset = contiguous_offset(s);
  if (r.filled < r.total()) return;

  ContextBlock whole{block.ctype, r.flags, r.data};
  auto it = endpoints_.find(block.ctype.code);
  const bool ok = it != endpoints_.end() && it->second.consumer && it->second.consumer(s.info.mobile, whole);
  if (!ok) {
    fail(s, ErrorCode::INSTALL_FAILED, "consumer refused " + to_string(block.ctype), true);
    return;
  }
  r.installed = true;
  s.info.installed.push_back(std::move(whole));
  host_.trace("STM_INSTALLED", "id=" + to_string(s.info.id) + " ctype=" + to_string(block.ctype) +
                                   " bytes=" + std::to_string(r.total()));
}

bool Stm::receive_complete(const Session& s) const {
  for (auto t : s.accepted_types()) {
    auto it = s.incoming.find(t);
    if (it == s.incoming.end() || !it->second.installed) return false;
  }
  return true;
}

std::uint64_t Stm::contiguous_offset(const Session& s) const {
  std::uint64_t off = 0;
  for (auto t : s.accepted_types()) {
    auto it = s.incoming.find(t);
    if (it == s.incoming.end() || !it->second.known) break;
    const auto p = it->second.prefix();
    off += p;
    if (p < it->second.total()) break;
  }
  return off;
}

void Stm::finish_receive(Session& s) {
  cancel_timers(s);
  s.info.offset = s.info.total;
  move(s, StmEvent::DATA_COMPLETE);
  Message ack;
  ack.type = MsgType::INSTALL_ACK;
  send(s, std::move(ack));
}

void Stm::rollback(Session& s) {
  for (auto it = s.info.installed.rbegin(); it != s.info.installed.rend(); ++it) {
    auto ep = endpoints_.find(it->ctype.code);
    if (ep != endpoints_.end() && ep->second.uninstall) ep->second.uninstall(s.info.mobile, it->ctype);
    host_.trace("STM_ROLLBACK", "id=" + to_string(s.info.id) + " ctype=" + to_string(it->ctype));
  }
  s.info.installed.clear();
  s.incoming.clear();
}

void Stm::fail(Session& s, ErrorCode code, const std::string& text, bool tell_peer) {
  if (is_terminal(s.info.state)) return;
  cancel_timers(s);
  if (!s.info.is_data_holder()) rollback(s);
  move(s, StmEvent::FAIL);
  if (tell_peer) {
    Message e;
    e.type = MsgType::ERROR;
    e.tlvs.push_back(wire::make_error(code, text));
    send(s, std::move(e));
  }
  report_error(s, code, text);
}

// ---------------------------------------------------------------------------
// Local primitives

void Stm::start(TransferId id) {
  std::lock_guard lock(mu_);
  require_active();
  auto& s = find(id);
  if (s.info.role != Role::INITIATOR || s.info.state != StmState::ACCEPTED)
    throw Error(Errc::BAD_STATE, "start in " + std::string(to_string(s.info.state)));
  if (s.info.accepted == 0) throw Error(Errc::REJECTED_TYPES, "peer supports none of the requested types");
  internal_start(s);
}

void Stm::pause(TransferId id) {
  std::lock_guard lock(mu_);
  require_active();
  auto& s = find(id);
  if (s.info.state != StmState::TRANSFERRING)
    throw Error(Errc::BAD_STATE, "pause in " + std::string(to_string(s.info.state)));
  cancel_timers(s);
  move(s, StmEvent::PAUSE);
  s.info.offset = s.info.is_data_holder() ? s.sent_offset() : contiguous_offset(s);
  Message m;
  m.type = MsgType::CONTROL;
  m.tlvs.push_back(wire::make_control(ControlOp::PAUSE, s.info.offset));
  send(s, std::move(m));
}

void Stm::resume(TransferId id) {
  std::lock_guard lock(mu_);
  require_active();
  auto& s = find(id);
  if (s.info.state != StmState::PAUSED)
    throw Error(Errc::BAD_STATE, "resume in " + std::string(to_string(s.info.state)));
  move(s, StmEvent::RESUME);
  if (!s.info.is_data_holder()) s.info.offset = contiguous_offset(s);
  Message m;
  m.type = MsgType::CONTROL;
  m.tlvs.push_back(wire::make_control(ControlOp::RESUME, s.info.offset));
  send(s, std::move(m));
  if (s.info.is_data_holder())
    send_from(s, s.info.offset, false);
  else if (s.data_seen)
    arm_watchdog(s);
  else
    arm_retransmit(s);
}

void Stm::abort(TransferId id) {
  std::lock_guard lock(mu_);
  require_active();
  auto& s = find(id);
  if (is_terminal(s.info.state)) throw Error(Errc::BAD_STATE, "abort in " + std::string(to_string(s.info.state)));
  cancel_timers(s);
  if (!s.info.is_data_holder()) rollback(s);
  move(s, StmEvent::ABORT);
  Message m;
  m.type = MsgType::CONTROL;
  m.tlvs.push_back(wire::make_control(ControlOp::ABORT, s.info.offset));
  send(s, std::move(m));
}

void Stm::terminate() {
  std::lock_guard lock(mu_);
  if (mode_ == ToolMode::TERMINATED || terminating_) return;
  if (mode_ == ToolMode::UNINITIALIZED) {
    mode_ = ToolMode::TERMINATED;
    return;
  }
  terminating_ = true;
  for (auto& [id, s] : sessions_)
    if (!is_terminal(s->info.state)) abort(id);
  mode_ = ToolMode::TERMINATED;
  framers_.clear();
  if (toolbox_ && toolbox_->get_mode(handle_) != ToolMode::TERMINATED) toolbox_->set_mode(handle_, ModeCommand::TERMINATE);
  terminating_ = false;
}

// ---------------------------------------------------------------------------
// Inbound

void Stm::handle_bytes(ByteView bytes, const Locator& from) {
  std::lock_guard lock(mu_);
  if (mode_ == ToolMode::UNINITIALIZED || mode_ == ToolMode::TERMINATED) return;
  if (config_.transport == Transport::DATAGRAM) {
    try {
      auto msg = wire::parse(bytes);
      handle_wire(msg, from);
    } catch (const Error& e) {
      host_.trace("STM_DISCARD", std::string("reason=") + e.what());
    }
    return;
  }
  auto& framer = framers_[from];
  framer.feed(bytes);
  while (true) {
    std::optional<Message> msg;
    try {
      msg = framer.next();
    } catch (const Error& e) {
      host_.trace("STM_DISCARD", std::string("reason=") + e.what());
      framers_.erase(from);
      return;
    }
    if (!msg) return;
    handle_wire(*msg, from);
    if (mode_ == ToolMode::TERMINATED) return;
  }
}

void Stm::handle_wire(const Message& msg, const Locator& from) {
  std::lock_guard lock(mu_);
  if (mode_ == ToolMode::UNINITIALIZED || mode_ == ToolMode::TERMINATED) return;
  const TransferId id{msg.transfer_id};
  try {
    if (msg.type == MsgType::CTX_REQUEST) {
      on_request(msg, from);
      return;
    }
    auto* s = lookup(id);
    if (!s) {
      if (msg.type != MsgType::ERROR) reply_error(msg, from, ErrorCode::UNKNOWN_TRANSFER, "unknown transfer");
      return;
    }
    if (s->info.peer.locator != from) {
      if (msg.type != MsgType::ERROR) reply_error(msg, from, ErrorCode::BAD_STATE, "transfer belongs to another peer");
      return;
    }
    switch (msg.type) {
      case MsgType::CTX_RESPONSE: on_response(*s, msg); break;
      case MsgType::CTX_DATA: on_data(*s, msg); break;
      case MsgType::INSTALL_ACK: on_install_ack(*s, msg); break;
      case MsgType::ERROR: on_error(*s, msg); break;
      case MsgType::CONTROL: on_control(*s, msg); break;
      case MsgType::CTX_REQUEST: break;
    }
  } catch (const Error& e) {
    // Bad TLV contents in an otherwise well-framed message.
    if (msg.type != MsgType::ERROR) reply_error(msg, from, ErrorCode::REJECTED, e.what());
  }
}

void Stm::on_request(const Message& msg, const Locator& from) {
  const TransferId id{msg.transfer_id};
  if (auto* s = lookup(id)) {
    if (s->info.peer.locator != from || s->info.role != Role::RESPONDER) {
      reply_error(msg, from, ErrorCode::BAD_STATE, "transfer id in use");
      return;
    }
    if (!can(*s, StmEvent::RECV_REQUEST)) {
      reply_error(msg, from, ErrorCode::BAD_STATE, "request in " + std::string(to_string(s->info.state)));
      return;
    }
    move(*s, StmEvent::RECV_REQUEST);
    if (s->cached_response) send(*s, *s->cached_response);
    return;
  }
  if (id.value == 0) {
    reply_error(msg, from, ErrorCode::REJECTED, "transfer id 0");
    return;
  }
  const auto* types_tlv = msg.find(wire::tlv::CTX_TYPES);
  const auto* node_tlv = msg.find(wire::tlv::NODE_ID);
  if (!types_tlv || !node_tlv) {
    reply_error(msg, from, ErrorCode::REJECTED, "request without NODE_ID or CTX_TYPES");
    return;
  }
  auto types = wire::read_ctx_types(*types_tlv);
  if (types.empty() || types.size() > kMaxTypes) {
    reply_error(msg, from, ErrorCode::REJECTED, "request needs 1-32 context types");
    return;
  }

  auto owned = std::make_unique<Session>();
  auto& s = *owned;
  s.info.id = id;
  s.info.role = Role::RESPONDER;
  s.info.direction = msg.has_flag(wire::flag::PULL) ? Direction::PULL : Direction::PUSH;
  s.info.peer = Peer{NodeId{}, from};
  s.info.mobile = wire::read_node_id(*node_tlv);
  s.info.requested = types;
  if (const auto* p = msg.find(wire::tlv::PRIORITY)) s.info.priority = wire::read_priority(*p);
  if (const auto* l = msg.find(wire::tlv::PREV_LOCATOR)) s.previous_access = wire::read_locator(*l);
  s.info.security_assoc = true;
  s.expedited = msg.has_flag(wire::flag::EXPEDITED);

  std::uint32_t mask = 0;
  for (std::size_t i = 0; i < types.size(); ++i) {
    auto it = endpoints_.find(types[i].code);
    if (it == endpoints_.end()) continue;
    if (s.info.direction == Direction::PUSH) {
      if (it->second.consumer) mask |= std::uint32_t{1} << i;
    } else if (it->second.provider) {
      if (auto block = it->second.provider(s.info.mobile)) {
        block->ctype = types[i];
        s.outgoing.push_back(std::move(*block));
        mask |= std::uint32_t{1} << i;
      }
    }
  }
  s.info.accepted = mask;
  sessions_.emplace(id, std::move(owned));
  move(s, StmEvent::RECV_REQUEST);

  Message resp;
  resp.type = MsgType::CTX_RESPONSE;
  resp.transfer_id = id.value;
  resp.tlvs.push_back(wire::make_mask(mask));

  bool inline_data = s.info.direction == Direction::PULL && s.expedited && mask != 0;
  for (const auto& b : s.outgoing)
    if (b.payload.size() + kBlockHeaderSize > 0xFFFF) inline_data = false;

  if (inline_data) {
    resp.flags |= wire::flag::EXPEDITED | wire::flag::FINAL_FRAGMENT;
    for (const auto& b : s.outgoing) resp.tlvs.push_back(wire::make_block(b));
    s.data_in_response = true;
    s.cached_response = resp;
    move(s, StmEvent::START);
    prepare_outgoing(s);
    s.next_fragment = s.fragments.size();
    s.info.offset = s.info.total;
    send(s, resp);
    move(s, StmEvent::ALL_SENT);
    arm_retransmit(s);
    return;
  }
  s.cached_response = resp;
  send(s, resp);
  arm_watchdog(s);
}

void Stm::on_response(Session& s, const Message& msg) {
  if (s.info.role != Role::INITIATOR) {
    reply_error(msg, s.info.peer.locator, ErrorCode::BAD_STATE, "response at responder");
    return;
  }
  const auto blocks = msg.find_all(wire::tlv::CTX_BLOCK);
  if (s.info.state != StmState::PROPOSED) {
    if (!can(s, StmEvent::RECV_RESPONSE)) {
      reply_error(msg, s.info.peer.locator, ErrorCode::BAD_STATE,
                  "response in " + std::string(to_string(s.info.state)));
      return;
    }
    move(s, StmEvent::RECV_RESPONSE);
    if (s.info.state == StmState::COMPLETED && !blocks.empty()) {
      Message ack;
      ack.type = MsgType::INSTALL_ACK;
      send(s, std::move(ack));
    }
    return;
  }

  if (s.retransmit_timer) {
    host_.cancel(*s.retransmit_timer);
    s.retransmit_timer.reset();
  }
  std::uint32_t mask = 0;
  if (const auto* m = msg.find(wire::tlv::AVAIL_MASK)) mask = wire::read_mask(*m);
  mask &= full_mask(s.info.requested.size());
  if (s.info.direction == Direction::PULL) {
    for (std::size_t i = 0; i < s.info.requested.size(); ++i) {
      auto it = endpoints_.find(s.info.requested[i].code);
      if (it == endpoints_.end() || !it->second.consumer) mask &= ~(std::uint32_t{1} << i);
    }
  }
  s.info.accepted = mask;
  move(s, StmEvent::RECV_RESPONSE);

  Bytes body;
  ByteWriter w(body);
  w.u64(s.info.id.value);
  w.u32(mask);
  for (auto t : s.info.requested) w.u16(t.code);
  report(notify::STM_ACCEPT, std::move(body));
  if (s.info.state != StmState::ACCEPTED) return;  // the report handler may have acted

  if (s.info.direction != Direction::PULL || !s.expedited || mask == 0) return;
  if (blocks.empty()) {
    internal_start(s);
    return;
  }
  move(s, StmEvent::START);
  s.data_seen = true;
  for (const auto* t : blocks) {
    accept_block(s, wire::read_block(*t), std::nullopt);
    if (is_terminal(s.info.state)) return;
  }
  if (receive_complete(s))
    finish_receive(s);
  else
    arm_watchdog(s);
}

void Stm::on_data(Session& s, const Message& msg) {
  if (s.info.is_data_holder()) {
    reply_error(msg, s.info.peer.locator, ErrorCode::BAD_STATE, "data sent to the data holder");
    return;
  }
  if (!can(s, StmEvent::RECV_DATA)) {
    reply_error(msg, s.info.peer.locator, ErrorCode::BAD_STATE, "data in " + std::string(to_string(s.info.state)));
    return;
  }
  if (s.info.state == StmState::COMPLETED) {
    Message ack;
    ack.type = MsgType::INSTALL_ACK;
    send(s, std::move(ack));
    return;
  }
  move(s, StmEvent::RECV_DATA);
  if (!s.data_seen) {
    s.data_seen = true;
    if (s.retransmit_timer) {
      host_.cancel(*s.retransmit_timer);
      s.retransmit_timer.reset();
    }
    if (s.info.state != StmState::PAUSED) arm_watchdog(s);
  }
  const auto blocks = msg.find_all(wire::tlv::CTX_BLOCK);
  const auto* frag = msg.find(wire::tlv::FRAGMENT);
  std::optional<wire::FragmentPos> pos;
  if (frag && blocks.size() == 1) pos = wire::read_fragment(*frag);
  for (const auto* t : blocks) {
    accept_block(s, wire::read_block(*t), pos);
    if (is_terminal(s.info.state)) return;
  }
  if (receive_complete(s)) {
    finish_receive(s);
    return;
  }
  if (msg.has_flag(wire::flag::FINAL_FRAGMENT) && s.info.state == StmState::TRANSFERRING) {
    Message e;
    e.type = MsgType::ERROR;
    e.tlvs.push_back(wire::make_error(ErrorCode::RETRANSMIT_REQUEST, "gap after final fragment"));
    e.tlvs.push_back(wire::make_control(ControlOp::RESUME, contiguous_offset(s)));
    send(s, std::move(e));
  }
}

void Stm::on_install_ack(Session& s, const Message& msg) {
  if (!s.info.is_data_holder()) {
    reply_error(msg, s.info.peer.locator, ErrorCode::BAD_STATE, "INSTALL_ACK at receiver");
    return;
  }
  if (s.info.state == StmState::COMPLETED) return;
  if (!can(s, StmEvent::RECV_INSTALL_ACK)) {
    reply_error(msg, s.info.peer.locator, ErrorCode::BAD_STATE,
                "INSTALL_ACK in " + std::string(to_string(s.info.state)));
    return;
  }
  cancel_timers(s);
  s.info.offset = s.info.total;
  move(s, StmEvent::RECV_INSTALL_ACK);
  report(notify::STM_ACK, encode_id_body(s.info.id));
}

void Stm::on_error(Session& s, const Message& msg) {
  if (is_terminal(s.info.state)) return;
  const auto* t = msg.find(wire::tlv::ERROR);
  if (!t) return;
  auto [code, text] = wire::read_error(*t);
  host_.trace("STM_PEER_ERROR", "id=" + to_string(s.info.id) + " code=" +
                                    std::string(wire::to_string(static_cast<ErrorCode>(code))) + " text=" + text);
  if (code == static_cast<std::uint16_t>(ErrorCode::RETRANSMIT_REQUEST)) {
    std::optional<std::uint64_t> from;
    if (const auto* c = msg.find(wire::tlv::CONTROL)) from = wire::read_control(*c).second;
    retransmit(s, from);
    return;
  }
  fail(s, static_cast<ErrorCode>(code), text, false);
}

void Stm::on_control(Session& s, const Message& msg) {
  const auto* t = msg.find(wire::tlv::CONTROL);
  if (!t) {
    reply_error(msg, s.info.peer.locator, ErrorCode::REJECTED, "CONTROL without op");
    return;
  }
  auto [op, offset] = wire::read_control(*t);
  const auto state = s.info.state;
  const bool holder = s.info.is_data_holder();

  switch (op) {
    case ControlOp::PAUSE:
      if (state == StmState::PAUSED) return;
      if (state != StmState::TRANSFERRING) break;
      cancel_timers(s);
      move(s, StmEvent::PAUSE);
      s.info.offset = holder ? s.sent_offset() : contiguous_offset(s);
      return;

    case ControlOp::RESUME:
      if (holder && state == StmState::ACCEPTED) {
        // A pull receiver's start signal.
        if (s.watchdog_timer) {
          host_.cancel(*s.watchdog_timer);
          s.watchdog_timer.reset();
        }
        move(s, StmEvent::START);
        prepare_outgoing(s);
        send_from(s, offset, false);
        return;
      }
      if (state == StmState::PAUSED) {
        move(s, StmEvent::RESUME);
        if (holder) {
          send_from(s, offset, false);
        } else if (s.data_seen) {
          arm_watchdog(s);
        } else {
          arm_retransmit(s);
        }
        return;
      }
      if (holder && state == StmState::TRANSFERRING) {
        send_from(s, offset, false);
        return;
      }
      if (holder && state == StmState::AWAIT_INSTALL_ACK) {
        if (s.data_in_response)
          send(s, *s.cached_response);
        else
          send_from(s, offset, true);
        return;
      }
      if (state == StmState::TRANSFERRING || state == StmState::COMPLETED) return;
      break;

    case ControlOp::ABORT:
      if (is_terminal(state)) return;
      cancel_timers(s);
      if (!holder) rollback(s);
      move(s, StmEvent::ABORT);
      report_error(s, ErrorCode::REJECTED, "aborted by peer");
      return;
  }
  reply_error(msg, s.info.peer.locator, ErrorCode::BAD_STATE,
              std::string(wire::to_string(op)) + " in " + std::string(to_string(state)));
}

}  // namespace mobtool::stm
