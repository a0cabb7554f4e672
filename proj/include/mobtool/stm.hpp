#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "mobtool/core.hpp"
#include "mobtool/toolbox.hpp"
#include "mobtool/wire.hpp"

namespace mobtool::stm {

enum class Transport : std::uint8_t { DATAGRAM, STREAM };

/// Tunables. Timer values are simulated milliseconds.
struct StmConfig {
  std::uint16_t listen_port = 7777;
  SimTime retransmit_timeout_ms = 500;
  std::uint32_t max_retries = 3;
  SimTime install_timeout_ms = 2000;
  Transport transport = Transport::DATAGRAM;
  std::uint32_t fragment_size = 1024;
  SimTime fragment_interval_ms = 0;  // gap between paced CTX_DATA fragments
};

/// Throws BAD_CONFIG.
void validate(const StmConfig& config);

/// node_tag (16-bit hash of the initiator's NodeId) in the top 16 bits, a
/// 48-bit per-initiator counter below. Never 0.
struct TransferId {
  std::uint64_t value = 0;

  static TransferId make(std::uint16_t node_tag, std::uint64_t seq) {
    return TransferId{(std::uint64_t{node_tag} << 48) | (seq & 0xFFFF'FFFF'FFFFull)};
  }
  std::uint16_t node_tag() const { return static_cast<std::uint16_t>(value >> 48); }
  std::uint64_t seq() const { return value & 0xFFFF'FFFF'FFFFull; }
  auto operator<=>(const TransferId&) const = default;
};

std::uint16_t node_tag(const NodeId& id);
std::string to_string(TransferId id);

enum class StmState : std::uint8_t {
  IDLE,
  PROPOSED,
  ACCEPTED,
  TRANSFERRING,
  AWAIT_INSTALL_ACK,
  COMPLETED,
  PAUSED,
  ABORTED,
  FAILED,
};

inline constexpr std::array<StmState, 9> kAllStates = {
    StmState::IDLE,      StmState::PROPOSED, StmState::ACCEPTED, StmState::TRANSFERRING, StmState::AWAIT_INSTALL_ACK,
    StmState::COMPLETED, StmState::PAUSED,   StmState::ABORTED,  StmState::FAILED};

std::string_view to_string(StmState s) noexcept;
bool is_terminal(StmState s) noexcept;

/// Everything that can move a session. Wire messages, MTI primitives, mode
/// commands and timers are all mapped onto these before the table is consulted.
enum class StmEvent : std::uint8_t {
  BEGIN,             // STM PUSH / STM PULL
  RECV_REQUEST,      // CTX_REQUEST (new, or a duplicate for an existing session)
  RECV_RESPONSE,     // CTX_RESPONSE (first, or a duplicate)
  START,             // STM START, CONTROL RESUME at an idle data holder, expedited auto-start
  ALL_SENT,          // data holder emitted its last fragment
  RECV_DATA,         // CTX_DATA or data-bearing CTX_RESPONSE
  DATA_COMPLETE,     // receiver installed every accepted block
  RECV_INSTALL_ACK,  // INSTALL_ACK
  PAUSE,             // STM PAUSE or CONTROL PAUSE
  RESUME,            // STM CONT or CONTROL RESUME
  ABORT,             // STM ABORT, CONTROL ABORT, STM TERMINATE
  RETRANSMIT,        // retransmit timer with budget left, ERROR(RETRANSMIT_REQUEST)
  FAIL,              // retries exhausted, install timeout, fatal ERROR, install failure
};

inline constexpr std::array<StmEvent, 13> kAllEvents = {
    StmEvent::BEGIN,         StmEvent::RECV_REQUEST,     StmEvent::RECV_RESPONSE, StmEvent::START,
    StmEvent::ALL_SENT,      StmEvent::RECV_DATA,        StmEvent::DATA_COMPLETE, StmEvent::RECV_INSTALL_ACK,
    StmEvent::PAUSE,         StmEvent::RESUME,           StmEvent::ABORT,         StmEvent::RETRANSMIT,
    StmEvent::FAIL};

std::string_view to_string(StmEvent e) noexcept;

/// The session transition table. nullopt = BAD_STATE.
std::optional<StmState> next_state(StmState state, StmEvent event) noexcept;

enum class Role : std::uint8_t { INITIATOR, RESPONDER };
enum class Direction : std::uint8_t { PUSH, PULL };

struct Peer {
  NodeId node;
  Locator locator;
};

struct TransferRequest {
  Peer peer;
  NodeId mobile;
  std::vector<ContextTypeId> types;
  std::uint8_t priority = 0;
  bool expedited = false;  // PULL only: the peer may answer with data directly
  std::optional<Locator> previous_access;
};

/// An STM candidate service for one context type.
struct ContextEndpoint {
  ContextTypeId ctype;
  std::function<std::optional<ContextBlock>(const NodeId& mobile)> provider;
  std::function<bool(const NodeId& mobile, const ContextBlock& block)> consumer;
  std::function<void(const NodeId& mobile, ContextTypeId ctype)> uninstall;
};

struct SessionInfo {
  TransferId id;
  Role role = Role::INITIATOR;
  Direction direction = Direction::PUSH;
  Peer peer;
  NodeId mobile;
  std::vector<ContextTypeId> requested;
  std::uint32_t accepted = 0;  // bit i = requested[i]
  StmState state = StmState::IDLE;
  std::uint8_t priority = 0;
  std::uint64_t offset = 0;  // payload bytes transferred so far
  std::uint64_t total = 0;   // payload bytes to transfer (known once data flows)
  bool security_assoc = false;
  std::uint32_t retransmissions = 0;
  std::vector<ContextBlock> installed;

  bool is_data_holder() const { return (direction == Direction::PUSH) == (role == Role::INITIATOR); }
};

/// The environment an STM runs in: clock, timers and a datagram/stream sink.
class StmHost {
 public:
  using TimerId = std::uint64_t;
  virtual ~StmHost() = default;
  virtual SimTime now() const = 0;
  virtual void send(const Locator& to, Bytes bytes) = 0;
  virtual TimerId schedule(SimTime delay, std::function<void()> fn) = 0;
  virtual void cancel(TimerId id) = 0;
  virtual void trace(std::string_view /*kind*/, const std::string& /*detail*/) {}
};

// MTI notification bodies exchanged with the toolbox.
Bytes encode_request_body(const TransferRequest& request);
TransferRequest decode_request_body(ByteView body);
Bytes encode_id_body(TransferId id);
TransferId decode_id_body(ByteView body);

struct AcceptReport {
  TransferId id;
  std::uint32_t accepted = 0;
  std::vector<ContextTypeId> requested;
};
struct ErrorReport {
  TransferId id;
  wire::ErrorCode code = wire::ErrorCode::REJECTED;
  std::string text;
};
AcceptReport decode_accept_report(ByteView body);
ErrorReport decode_error_report(ByteView body);

class Stm {
 public:
  using StateObserver = std::function<void(const SessionInfo&, StmState previous)>;

  Stm(NodeId self, StmHost& host);
  ~Stm();
  Stm(const Stm&) = delete;
  Stm& operator=(const Stm&) = delete;

  /// Registers the STM as tool "STM" with `toolbox`. Call before init().
  ToolHandle attach(Toolbox& toolbox);
  /// Errors: ALREADY_INITIALIZED, BAD_CONFIG.
  void init(const StmConfig& config);

  void set_security_association(const NodeId& peer, bool established);
  /// Errors: DUPLICATE_CTYPE, BAD_CONFIG (invalid ctype).
  void register_context_endpoint(ContextEndpoint endpoint);

  TransferId begin_push(const TransferRequest& request);
  TransferId begin_pull(const TransferRequest& request);
  void start(TransferId id);
  void pause(TransferId id);
  void resume(TransferId id);
  void abort(TransferId id);
  void terminate();

  /// Processes one parsed message. Protocol errors are answered on the wire,
  /// never thrown.
  void handle_wire(const wire::Message& msg, const Locator& from);
  /// Feeds raw transport bytes (one datagram, or a stream chunk).
  void handle_bytes(ByteView bytes, const Locator& from);

  ToolMode mode() const;
  const StmConfig& config() const { return config_; }
  const NodeId& self() const { return self_; }
  Locator listen_locator(const Locator& address) const { return address.with_port(config_.listen_port); }

  const SessionInfo& session(TransferId id) const;
  std::vector<TransferId> sessions() const;
  std::size_t live_sessions() const;
  /// Reports sent towards the toolbox, kept even without an attached toolbox.
  const std::vector<Notification>& reports() const { return reports_; }
  std::size_t ignored_notifications() const;

  void set_state_observer(StateObserver observer) { observer_ = std::move(observer); }

 private:
  struct Session;
  class Adapter;

  Session& find(TransferId id);
  Session* lookup(TransferId id);
  void require_active() const;
  TransferId begin(const TransferRequest& request, Direction direction);
  void move(Session& s, StmEvent event);
  bool can(const Session& s, StmEvent event) const;

  void send(Session& s, wire::Message msg);
  void send_raw(const Locator& to, const wire::Message& msg);
  void reply_error(const wire::Message& to_msg, const Locator& from, wire::ErrorCode code, std::string text);
  void report(std::uint16_t kind, Bytes body);
  void report_error(const Session& s, wire::ErrorCode code, const std::string& text);

  void arm_retransmit(Session& s);
  void arm_watchdog(Session& s);
  void cancel_timers(Session& s);
  void on_retransmit_timer(TransferId id);
  void on_watchdog(TransferId id);

  void prepare_outgoing(Session& s);
  void pump(TransferId id);
  void internal_start(Session& s);
  void send_fragment(Session& s, std::size_t index);
  void send_from(Session& s, std::uint64_t offset, bool burst);
  void retransmit(Session& s, std::optional<std::uint64_t> from_offset);

  void accept_block(Session& s, const ContextBlock& block, std::optional<wire::FragmentPos> pos);
  bool receive_complete(const Session& s) const;
  std::uint64_t contiguous_offset(const Session& s) const;
  void finish_receive(Session& s);
  void rollback(Session& s);
  void fail(Session& s, wire::ErrorCode code, const std::string& text, bool tell_peer);

  void on_request(const wire::Message& msg, const Locator& from);
  void on_response(Session& s, const wire::Message& msg);
  void on_data(Session& s, const wire::Message& msg);
  void on_install_ack(Session& s, const wire::Message& msg);
  void on_error(Session& s, const wire::Message& msg);
  void on_control(Session& s, const wire::Message& msg);

  NodeId self_;
  StmHost& host_;
  StmConfig config_;
  ToolMode mode_ = ToolMode::UNINITIALIZED;
  bool terminating_ = false;
  std::uint16_t tag_;
  std::uint64_t next_seq_ = 1;
  std::map<NodeId, bool> security_;
  std::map<std::uint16_t, ContextEndpoint> endpoints_;
  std::map<TransferId, std::unique_ptr<Session>> sessions_;
  std::map<Locator, wire::StreamFramer> framers_;
  std::vector<Notification> reports_;
  StateObserver observer_;
  Toolbox* toolbox_ = nullptr;
  ToolHandle handle_ = 0;
  std::shared_ptr<Adapter> adapter_;
  std::shared_ptr<int> alive_ = std::make_shared<int>(0);  // timer callbacks hold a weak_ptr
  mutable std::recursive_mutex mu_;
};

}  // namespace mobtool::stm
