#include <gtest/gtest.h>

#include "stm_harness.hpp"

using namespace mobtool;
using namespace mobtool::stm;
using harness::Net;
using harness::pattern;

namespace {

Errc code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::MALFORMED;
}

void expect_clean(const Net::Node& n) {
  for (const auto& line : harness::bad_transitions(n)) ADD_FAILURE() << n.id.name << ": " << line;
}

std::size_t reports_of(const Stm& s, std::uint16_t kind) {
  std::size_t k = 0;
  for (const auto& r : s.reports()) k += r.header.kind == kind;
  return k;
}

}  // namespace

TEST(Config, Validation) {
  StmConfig c;
  EXPECT_NO_THROW(validate(c));
  c.listen_port = 0;
  EXPECT_EQ(code_of([&] { validate(c); }), Errc::BAD_CONFIG);
  c = {};
  c.fragment_size = 0;
  EXPECT_EQ(code_of([&] { validate(c); }), Errc::BAD_CONFIG);
  c = {};
  c.fragment_interval_ms = -1;
  EXPECT_EQ(code_of([&] { validate(c); }), Errc::BAD_CONFIG);
  c = {};
  c.retransmit_timeout_ms = 0;
  EXPECT_EQ(code_of([&] { validate(c); }), Errc::BAD_CONFIG);
}

TEST(Lifecycle, InitAndBeginErrors) {
  Net net;
  auto& a = net.add("A", 1);
  auto& b = net.add("B", 2);
  EXPECT_EQ(code_of([&] { a.stm->init({}); }), Errc::ALREADY_INITIALIZED);

  Net::Node bare;
  bare.net = &net;
  Stm fresh(NodeId{"C", 0}, bare);
  EXPECT_EQ(code_of([&] { fresh.begin_push(net.request(b)); }), Errc::NOT_INITIALIZED);

  auto r = net.request(b);
  r.peer.node = NodeId{"stranger", 0};
  EXPECT_EQ(code_of([&] { a.stm->begin_push(r); }), Errc::NO_SECURITY_ASSOC);
  EXPECT_EQ(code_of([&] { a.stm->begin_pull(net.request(b, {})); }), Errc::EMPTY_TYPES);
  r = net.request(b);
  r.priority = 8;
  EXPECT_EQ(code_of([&] { a.stm->begin_push(r); }), Errc::BAD_CONFIG);
  EXPECT_EQ(code_of([&] { a.stm->start(TransferId{12345}); }), Errc::UNKNOWN_TRANSFER);

  ContextEndpoint dup;
  dup.ctype = kFirewallState;
  EXPECT_EQ(code_of([&] { a.stm->register_context_endpoint(dup); }), Errc::DUPLICATE_CTYPE);
  dup.ctype = ContextTypeId{0};
  EXPECT_EQ(code_of([&] { a.stm->register_context_endpoint(dup); }), Errc::BAD_CONFIG);
  EXPECT_TRUE(net.log.empty());
}

TEST(Transfer, PushAwaitsStartThenCompletes) {
  Net net;
  auto& a = net.add("A", 1);
  auto& b = net.add("B", 2);
  a.provided[kFirewallState.code] = pattern(300);
  auto id = a.stm->begin_push(net.request(b));
  net.run(100);
  EXPECT_EQ(a.stm->session(id).state, StmState::ACCEPTED);
  EXPECT_EQ(a.stm->session(id).accepted, 1u);
  EXPECT_EQ(reports_of(*a.stm, notify::STM_ACCEPT), 1u);
  auto accept = decode_accept_report(a.stm->reports().front().body);
  EXPECT_EQ(accept.id, id);
  EXPECT_EQ(accept.requested, (std::vector<ContextTypeId>{kFirewallState}));

  a.stm->start(id);
  net.run();
  EXPECT_EQ(a.stm->session(id).state, StmState::COMPLETED);
  EXPECT_EQ(b.stm->session(id).state, StmState::COMPLETED);
  EXPECT_EQ(b.installed_bytes(), pattern(300));
  EXPECT_EQ(reports_of(*a.stm, notify::STM_ACK), 1u);
  EXPECT_EQ(net.log.size(), 4u);
  EXPECT_EQ(a.stm->session(id).offset, 300u);
  EXPECT_EQ(a.stm->live_sessions(), 0u);
  expect_clean(a);
  expect_clean(b);
}

TEST(Transfer, ExpeditedPullTakesThreeMessages) {
  Net net;
  auto& a = net.add("A", 1);
  auto& b = net.add("B", 2);
  b.provided[kFirewallState.code] = pattern(40);
  auto r = net.request(b);
  r.expedited = true;
  auto id = a.stm->begin_pull(r);
  net.run();
  ASSERT_EQ(net.log.size(), 3u);
  EXPECT_EQ(net.log[0].msg.type, wire::MsgType::CTX_REQUEST);
  EXPECT_EQ(net.log[1].msg.type, wire::MsgType::CTX_RESPONSE);
  EXPECT_EQ(net.log[2].msg.type, wire::MsgType::INSTALL_ACK);
  EXPECT_EQ(a.installed_bytes(), pattern(40));
  EXPECT_EQ(a.stm->session(id).state, StmState::COMPLETED);
  EXPECT_EQ(b.stm->session(id).state, StmState::COMPLETED);
  EXPECT_EQ(reports_of(*b.stm, notify::STM_ACK), 1u);
  expect_clean(a);
  expect_clean(b);
}

TEST(Transfer, PlainPullWaitsForStart) {
  Net net;
  auto& a = net.add("A", 1);
  auto& b = net.add("B", 2);
  b.provided[kFirewallState.code] = pattern(40);
  auto id = a.stm->begin_pull(net.request(b));
  net.run(100);
  EXPECT_EQ(net.log.size(), 2u);
  EXPECT_EQ(a.stm->session(id).state, StmState::ACCEPTED);
  a.stm->start(id);
  net.run();
  EXPECT_EQ(net.count(wire::MsgType::CONTROL), 1u);
  EXPECT_EQ(a.installed_bytes(), pattern(40));
  EXPECT_EQ(b.stm->session(id).state, StmState::COMPLETED);
}

TEST(Transfer, MultipleTypesInRequestOrder) {
  Net net;
  StmConfig cfg;
  cfg.fragment_size = 7;
  auto& a = net.add("A", 1, cfg, {kFirewallState, kQos, kAaa});
  auto& b = net.add("B", 2, cfg, {kFirewallState, kAaa});
  a.provided[kFirewallState.code] = pattern(20, 1);
  a.provided[kQos.code] = pattern(5, 2);
  a.provided[kAaa.code] = pattern(0, 3);
  auto id = a.stm->begin_push(net.request(b, {kAaa, kQos, kFirewallState}));
  net.run(100);
  EXPECT_EQ(a.stm->session(id).accepted, 0b101u);
  a.stm->start(id);
  net.run();
  ASSERT_EQ(b.installed.size(), 2u);
  EXPECT_EQ(b.installed[0].ctype, kAaa);
  EXPECT_TRUE(b.installed[0].payload.empty());
  EXPECT_EQ(b.installed[1].payload, pattern(20, 1));
  EXPECT_EQ(b.stm->session(id).state, StmState::COMPLETED);
}

TEST(Transfer, NothingAcceptedRefusesStart) {
  Net net;
  auto& a = net.add("A", 1);
  auto& b = net.add("B", 2, {}, {kQos});
  auto id = a.stm->begin_push(net.request(b));
  net.run(100);
  EXPECT_EQ(a.stm->session(id).accepted, 0u);
  EXPECT_EQ(code_of([&] { a.stm->start(id); }), Errc::REJECTED_TYPES);
  EXPECT_EQ(code_of([&] { b.stm->start(id); }), Errc::BAD_STATE);
}

TEST(Transfer, UnknownTransferAnsweredWithError) {
  Net net;
  auto& a = net.add("A", 1);
  auto& b = net.add("B", 2);
  wire::Message m;
  m.type = wire::MsgType::CONTROL;
  m.transfer_id = 0xdead;
  m.tlvs = {wire::make_control(wire::ControlOp::RESUME, 0)};
  b.stm->handle_wire(m, a.addr);
  ASSERT_EQ(net.log.size(), 1u);
  const auto& reply = net.log[0].msg;
  EXPECT_EQ(reply.type, wire::MsgType::ERROR);
  EXPECT_EQ(reply.transfer_id, 0xdeadu);
  ASSERT_NE(reply.find(wire::tlv::ERROR), nullptr);
  EXPECT_EQ(wire::read_error(*reply.find(wire::tlv::ERROR)).first,
            static_cast<std::uint16_t>(wire::ErrorCode::UNKNOWN_TRANSFER));
  net.run();
  EXPECT_EQ(net.log.size(), 1u);  // errors are never answered
}

TEST(Transfer, PauseAndResumeFromEitherSide) {
  for (bool from_holder : {true, false}) {
    SCOPED_TRACE(from_holder ? "holder" : "receiver");
    Net net;
    StmConfig cfg;
    cfg.fragment_size = 10;
    cfg.fragment_interval_ms = 5;
    auto& a = net.add("A", 1, cfg);
    auto& b = net.add("B", 2, cfg);
    a.provided[kFirewallState.code] = pattern(50);
    auto id = a.stm->begin_push(net.request(b));
    net.run(100);
    a.stm->start(id);
    Net::Node& actor = from_holder ? a : b;
    net.run(net.now + 7);
    actor.stm->pause(id);
    net.run(net.now + 200);
    EXPECT_EQ(a.stm->session(id).state, StmState::PAUSED);
    EXPECT_EQ(b.stm->session(id).state, StmState::PAUSED);
    EXPECT_LT(net.count(wire::MsgType::CTX_DATA), 5u);
    actor.stm->resume(id);
    net.run();
    EXPECT_EQ(b.installed_bytes(), pattern(50));
    EXPECT_EQ(a.stm->session(id).state, StmState::COMPLETED);
    EXPECT_EQ(code_of([&] { actor.stm->resume(id); }), Errc::BAD_STATE);
    expect_clean(a);
    expect_clean(b);
  }
}

TEST(Transfer, ReceiverAbortRollsBackInstalledBlocks) {
  Net net;
  StmConfig cfg;
  cfg.fragment_size = 10;
  cfg.fragment_interval_ms = 5;
  auto& a = net.add("A", 1, cfg, {kFirewallState, kQos});
  auto& b = net.add("B", 2, cfg, {kFirewallState, kQos});
  b.provided[kFirewallState.code] = pattern(10);
  b.provided[kQos.code] = pattern(30);
  auto id = a.stm->begin_pull(net.request(b, {kFirewallState, kQos}));
  net.run(100);
  a.stm->start(id);
  net.run(net.now + 8);
  ASSERT_EQ(a.installed.size(), 1u);
  a.stm->abort(id);
  net.run();
  EXPECT_TRUE(a.installed.empty());
  EXPECT_EQ(a.uninstalls, 1u);
  EXPECT_EQ(a.stm->session(id).state, StmState::ABORTED);
  EXPECT_EQ(b.stm->session(id).state, StmState::ABORTED);
  EXPECT_EQ(reports_of(*b.stm, notify::STM_ERROR), 1u);
  EXPECT_EQ(code_of([&] { a.stm->abort(id); }), Errc::BAD_STATE);
}

TEST(Transfer, RetriesExhaustedFails) {
  Net net;
  auto& a = net.add("A", 1);
  auto& b = net.add("B", 2);
  net.drop = [](std::size_t, const wire::Message&) { return true; };
  auto id = a.stm->begin_pull(net.request(b));
  net.run();
  const auto& s = a.stm->session(id);
  EXPECT_EQ(s.state, StmState::FAILED);
  EXPECT_EQ(s.retransmissions, 3u);
  EXPECT_EQ(net.now, 2000);
  EXPECT_EQ(net.count(wire::MsgType::CTX_REQUEST), 4u);
  ASSERT_EQ(reports_of(*a.stm, notify::STM_ERROR), 1u);
  auto err = decode_error_report(a.stm->reports().back().body);
  EXPECT_EQ(err.id, id);
  EXPECT_EQ(err.code, wire::ErrorCode::RETRIES_EXHAUSTED);
  expect_clean(a);
}

TEST(Transfer, SingleLossRecovers) {
  for (std::size_t lost = 0; lost < 4; ++lost) {
    SCOPED_TRACE(lost);
    Net net;
    auto& a = net.add("A", 1);
    auto& b = net.add("B", 2);
    b.provided[kFirewallState.code] = pattern(25);
    net.drop = [lost](std::size_t i, const wire::Message&) { return i == lost; };
    auto r = net.request(b);
    r.expedited = true;
    auto id = a.stm->begin_pull(r);
    net.run();
    EXPECT_EQ(a.stm->session(id).state, StmState::COMPLETED);
    EXPECT_EQ(b.stm->session(id).state, StmState::COMPLETED);
    EXPECT_LE(a.stm->session(id).retransmissions, 1u);
    EXPECT_LE(b.stm->session(id).retransmissions, 1u);
    EXPECT_EQ(a.installed_bytes(), pattern(25));
    expect_clean(a);
    expect_clean(b);
  }
}

TEST(Transfer, ConsumerRefusalFailsBothEnds) {
  Net net;
  auto& a = net.add("A", 1);
  auto& b = net.add("B", 2);
  a.provided[kFirewallState.code] = pattern(8);
  b.consumer_ok = false;
  auto id = a.stm->begin_push(net.request(b));
  net.run(100);
  a.stm->start(id);
  net.run();
  EXPECT_EQ(b.stm->session(id).state, StmState::FAILED);
  EXPECT_EQ(a.stm->session(id).state, StmState::FAILED);
  auto err = decode_error_report(a.stm->reports().back().body);
  EXPECT_EQ(err.code, wire::ErrorCode::INSTALL_FAILED);
}

TEST(Transfer, StreamTransportReassemblesChunks) {
  Net net;
  StmConfig cfg;
  cfg.transport = Transport::STREAM;
  auto& a = net.add("A", 1, cfg);
  auto& b = net.add("B", 2, cfg);
  wire::Message req;
  req.type = wire::MsgType::CTX_REQUEST;
  req.transfer_id = 77;
  req.tlvs = {wire::make_node_id({"MN", 0}), wire::make_ctx_types({kFirewallState})};
  auto bytes = wire::serialize(req);
  req.transfer_id = 78;
  auto second = wire::serialize(req);
  bytes.insert(bytes.end(), second.begin(), second.end());
  for (std::size_t i = 0; i < bytes.size(); i += 3)
    b.stm->handle_bytes(ByteView{bytes.data() + i, std::min<std::size_t>(3, bytes.size() - i)}, a.addr);
  EXPECT_EQ(net.count(wire::MsgType::CTX_RESPONSE), 2u);
  EXPECT_EQ(b.stm->sessions().size(), 2u);
}

TEST(Toolbox, DrivenThroughNotifications) {
  Toolbox tb;  // outlives the STM attached to it
  Net net;
  auto& a = net.add("A", 1);
  auto& b = net.add("B", 2);
  b.provided[kFirewallState.code] = pattern(12);

  Net::Node& host = a;
  host.stm = std::make_unique<Stm>(host.id, host);
  auto h = host.stm->attach(tb);
  host.stm->init({});
  host.stm->set_security_association(b.id, true);
  ContextEndpoint ep;
  ep.ctype = kFirewallState;
  ep.consumer = [&](const NodeId&, const ContextBlock& blk) {
    host.installed.push_back(blk);
    return true;
  };
  host.stm->register_context_endpoint(ep);
  EXPECT_EQ(tb.get_mode(h), ToolMode::READY);
  tb.set_mode(h, ModeCommand::RUN);

  Notification pull;
  pull.header = {"STM", notify::STM_PULL, 0};
  pull.body = encode_request_body(net.request(b));
  tb.notify_change(h, pull);
  net.run(100);
  ASSERT_EQ(tb.reports().size(), 1u);
  EXPECT_EQ(tb.reports()[0].header.kind, notify::STM_ACCEPT);
  auto id = decode_accept_report(tb.reports()[0].body).id;

  EXPECT_EQ(tb.set_mode(h, ModeCommand::FREEZE), ToolMode::FROZEN);
  Notification start;
  start.header = {"STM", notify::STM_START, 0};
  start.body = encode_id_body(id);
  tb.notify_change(h, start);
  net.run(200);
  EXPECT_EQ(host.stm->ignored_notifications(), 1u);
  EXPECT_EQ(host.stm->session(id).state, StmState::ACCEPTED);

  tb.set_mode(h, ModeCommand::THAW);
  tb.notify_change(h, start);
  net.run();
  EXPECT_EQ(host.installed_bytes(), pattern(12));
  EXPECT_EQ(host.stm->session(id).state, StmState::COMPLETED);
  EXPECT_EQ(std::get<std::int64_t>(tb.query_status(h, "live_sessions")), 0);

  tb.set_mode(h, ModeCommand::TERMINATE);
  EXPECT_EQ(host.stm->mode(), ToolMode::TERMINATED);
}

TEST(Table, ShapeProperties) {
  std::size_t defined = 0;
  for (auto s : kAllStates)
    for (auto e : kAllEvents) {
      auto next = next_state(s, e);
      defined += next.has_value();
      if (s == StmState::ABORTED || s == StmState::FAILED) EXPECT_FALSE(next);
      if (s == StmState::COMPLETED && next) EXPECT_EQ(*next, StmState::COMPLETED);
      if (s != StmState::IDLE && !is_terminal(s)) {
        if (e == StmEvent::ABORT) EXPECT_EQ(next, StmState::ABORTED);
        if (e == StmEvent::FAIL) EXPECT_EQ(next, StmState::FAILED);
      }
      if (next && *next == StmState::IDLE) ADD_FAILURE() << "nothing returns to IDLE";
    }
  EXPECT_EQ(defined, 39u);
  EXPECT_EQ(next_state(StmState::IDLE, StmEvent::BEGIN), StmState::PROPOSED);
  EXPECT_EQ(next_state(StmState::IDLE, StmEvent::RECV_REQUEST), StmState::ACCEPTED);
  EXPECT_FALSE(next_state(StmState::IDLE, StmEvent::ABORT));
}

TEST(Ids, TagAndSequence) {
  auto id = TransferId::make(0xBEEF, 5);
  EXPECT_EQ(id.node_tag(), 0xBEEF);
  EXPECT_EQ(id.seq(), 5u);
  EXPECT_EQ(node_tag(NodeId{"FW1", 0}), node_tag(NodeId{"FW1", 0}));
  EXPECT_NE(node_tag(NodeId{"FW1", 0}), node_tag(NodeId{"FW2", 0}));

  Net net;
  auto& a = net.add("A", 1);
  auto& b = net.add("B", 2);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 20; ++i) {
    auto t = a.stm->begin_push(net.request(b));
    EXPECT_NE(t.value, 0u);
    EXPECT_EQ(t.node_tag(), node_tag(a.id));
    EXPECT_TRUE(seen.insert(t.value).second);
  }
}

TEST(Bodies, RequestRoundTrip) {
  TransferRequest r;
  r.peer = Peer{NodeId{"FW1", 2}, parse_locator("v4:10.1.0.1:7777")};
  r.mobile = NodeId{"MN", 0};
  r.types = {kFirewallState, kQos};
  r.priority = 6;
  r.expedited = true;
  r.previous_access = parse_locator("v6:2001:db8::1:0");
  auto back = decode_request_body(encode_request_body(r));
  EXPECT_EQ(back.peer.node, r.peer.node);
  EXPECT_EQ(back.peer.locator, r.peer.locator);
  EXPECT_EQ(back.mobile, r.mobile);
  EXPECT_EQ(back.types, r.types);
  EXPECT_EQ(back.priority, 6);
  EXPECT_TRUE(back.expedited);
  EXPECT_EQ(back.previous_access, r.previous_access);
  EXPECT_EQ(decode_id_body(encode_id_body(TransferId{42})), TransferId{42});
  EXPECT_THROW(decode_id_body(Bytes{1, 2}), Error);
}
