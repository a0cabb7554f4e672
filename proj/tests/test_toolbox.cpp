#include <gtest/gtest.h>

#include <random>

#include "mobtool/toolbox.hpp"

using namespace mobtool;

namespace {

ToolDescriptor desc(Tool t, std::uint16_t major = 1, FeatureSet features = {}) {
  ToolDescriptor d;
  d.tool = t;
  d.version = {major, 0};
  d.stacks = {AddressFamily::V4};
  d.features = features;
  return d;
}

Trigger trig(TriggerChannel ch, std::uint16_t code) {
  Trigger t;
  t.channel = std::move(ch);
  t.kind = TriggerKind::CUSTOM;
  t.custom_code = code;
  return t;
}

Notification note(std::uint16_t kind, std::string body = {}) {
  Notification n;
  n.header = {"", kind, 0};
  n.body.assign(body.begin(), body.end());
  return n;
}

// Publishes one more trigger from inside its first delivery.
class Republisher : public StubTool {
 public:
  Republisher(ToolDescriptor d, Toolbox& tb) : StubTool(d), tb_(tb) {}
  void on_trigger(const Trigger& t) override {
    StubTool::on_trigger(t);
    if (!fired_) {
      fired_ = true;
      nested_ = tb_.publish_trigger(trig(TriggerChannel::common(), 999));
    }
  }
  std::size_t nested() const { return nested_; }

 private:
  Toolbox& tb_;
  bool fired_ = false;
  std::size_t nested_ = 42;
};

}  // namespace

TEST(Registry, HandlesAndDuplicates) {
  Toolbox tb;
  auto hip = tb.register_tool(desc(Tool::HIP), std::make_shared<StubTool>(desc(Tool::HIP)));
  EXPECT_EQ(hip.handle, 1u);
  EXPECT_EQ(tb.subscriptions(hip.handle), (std::vector<std::string>{"MTI-common", "MTI-HIP"}));
  try {
    tb.register_tool(desc(Tool::HIP), std::make_shared<StubTool>(desc(Tool::HIP)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DUPLICATE_REGISTRATION);
  }
  auto mip = tb.register_tool(desc(Tool::MIPv6), std::make_shared<StubTool>(desc(Tool::MIPv6)));
  EXPECT_EQ(mip.handle, 2u);
  EXPECT_EQ(tb.get_mode(mip.handle), ToolMode::UNINITIALIZED);
}

TEST(Registry, DeregisterDropsPrivateChannel) {
  Toolbox tb;
  auto hip = tb.register_tool(desc(Tool::HIP), std::make_shared<StubTool>(desc(Tool::HIP)));
  tb.deregister_tool(hip.handle);
  EXPECT_EQ(tb.publish_trigger(trig(TriggerChannel::for_tool("HIP"), 1)), 0u);
  EXPECT_FALSE(tb.warnings().empty());
  try {
    tb.deregister_tool(hip.handle);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::UNKNOWN_HANDLE);
  }
  EXPECT_THROW(tb.get_mode(hip.handle), Error);
  auto again = tb.register_tool(desc(Tool::HIP), std::make_shared<StubTool>(desc(Tool::HIP)));
  EXPECT_EQ(again.handle, 2u);
}

TEST(Triggers, CommonAndPrivateDelivery) {
  Toolbox tb;
  auto hip = std::make_shared<StubTool>(desc(Tool::HIP));
  auto mip = std::make_shared<StubTool>(desc(Tool::MIPv6));
  tb.register_tool(hip->descriptor(), hip);
  tb.register_tool(mip->descriptor(), mip);
  EXPECT_EQ(tb.publish_trigger(trig(TriggerChannel::common(), 1)), 2u);
  EXPECT_EQ(tb.publish_trigger(trig(TriggerChannel::for_tool("HIP"), 2)), 1u);
  EXPECT_EQ(hip->triggers().size(), 2u);
  EXPECT_EQ(mip->triggers().size(), 1u);
  EXPECT_EQ(tb.publish_trigger(trig(TriggerChannel::for_tool("SCTP"), 3)), 0u);
}

TEST(Triggers, ReentrantPublishIsDeferred) {
  Toolbox tb;
  auto a = std::make_shared<Republisher>(desc(Tool::HIP), tb);
  auto b = std::make_shared<StubTool>(desc(Tool::SIP));
  tb.register_tool(a->descriptor(), a);
  tb.register_tool(b->descriptor(), b);
  EXPECT_EQ(tb.publish_trigger(trig(TriggerChannel::common(), 1)), 2u);
  EXPECT_EQ(a->nested(), 0u);
  ASSERT_EQ(b->triggers().size(), 2u);
  EXPECT_EQ(b->triggers()[0].custom_code, 1);
  EXPECT_EQ(b->triggers()[1].custom_code, 999);
  EXPECT_EQ(a->triggers().size(), 2u);
}

// Exactly-once, isolation and ordering against a replayed model.
TEST(Triggers, RandomizedDeliveryMatchesModel) {
  const std::vector<Tool> tools = {Tool::HIP, Tool::MIPv6, Tool::SIP, Tool::SCTP};
  std::mt19937_64 rng(99);
  for (int round = 0; round < 1000; ++round) {
    Toolbox tb;
    std::vector<std::shared_ptr<StubTool>> sinks;
    for (auto t : tools) {
      auto s = std::make_shared<StubTool>(desc(t));
      tb.register_tool(s->descriptor(), s);
      sinks.push_back(s);
    }
    std::vector<std::vector<std::uint16_t>> want(tools.size());
    const auto n = 1 + rng() % 20;
    for (std::uint16_t k = 0; k < n; ++k) {
      const auto pick = rng() % (tools.size() + 2);  // two extra slots: common, unregistered tool
      TriggerChannel ch = pick < tools.size()    ? TriggerChannel::for_tool(std::string(to_string(tools[pick])))
                          : pick == tools.size() ? TriggerChannel::common()
                                                 : TriggerChannel::for_tool("PMIP");
      std::size_t expect = 0;
      for (std::size_t i = 0; i < tools.size(); ++i)
        if (pick == tools.size() || pick == i) {
          want[i].push_back(k);
          ++expect;
        }
      ASSERT_EQ(tb.publish_trigger(trig(ch, k)), expect);
    }
    for (std::size_t i = 0; i < tools.size(); ++i) {
      std::vector<std::uint16_t> got;
      for (const auto& t : sinks[i]->triggers()) got.push_back(t.custom_code);
      ASSERT_EQ(got, want[i]) << "round " << round << " tool " << to_string(tools[i]);
    }
  }
}

TEST(Notify, LocatorChangeAndFrozenIgnore) {
  Toolbox tb;
  auto s = std::make_shared<StubTool>(desc(Tool::MIPv6));
  auto h = tb.register_tool(s->descriptor(), s).handle;
  tb.set_mode(h, ModeCommand::INIT);
  tb.set_mode(h, ModeCommand::RUN);
  tb.notify_change(h, note(notify::LOCATOR_CHANGE, "v4:10.2.0.10:0"));
  ASSERT_TRUE(s->locator());
  EXPECT_EQ(format_locator(*s->locator()), "v4:10.2.0.10:0");

  EXPECT_EQ(tb.set_mode(h, ModeCommand::FREEZE), ToolMode::FROZEN);
  tb.notify_change(h, note(notify::LOCATOR_CHANGE, "v4:10.3.0.10:0"));
  EXPECT_EQ(format_locator(*s->locator()), "v4:10.2.0.10:0");
  EXPECT_EQ(s->ignored(), 1u);
  tb.notify_change(h, note(notify::STM_ABORT));  // not state-changing
  EXPECT_EQ(s->ignored(), 1u);
  EXPECT_EQ(s->notifications().size(), 3u);

  EXPECT_THROW(tb.notify_change(999, note(notify::LOCATOR_CHANGE)), Error);
  auto wrong = note(notify::LOCATOR_CHANGE);
  wrong.direction = NotificationDirection::TOOL_TO_TOOLBOX;
  EXPECT_THROW(tb.notify_change(h, wrong), Error);
}

TEST(Reports, LogPreservesOrder) {
  Toolbox tb;
  auto s = std::make_shared<StubTool>(desc(Tool::HIP));
  auto h = tb.register_tool(s->descriptor(), s).handle;
  std::vector<std::uint16_t> hooked;
  tb.set_report_hook([&](ToolHandle, const Notification& n) { hooked.push_back(n.header.kind); });
  for (auto k : {notify::STM_ACCEPT, notify::STM_ACK}) {
    auto n = note(k);
    n.direction = NotificationDirection::TOOL_TO_TOOLBOX;
    tb.report_change(h, n);
  }
  ASSERT_EQ(tb.reports().size(), 2u);
  EXPECT_EQ(tb.reports()[0].header.kind, notify::STM_ACCEPT);
  EXPECT_EQ(hooked, (std::vector<std::uint16_t>{notify::STM_ACCEPT, notify::STM_ACK}));
  tb.deregister_tool(h);
  auto late = note(notify::STM_ACK);
  late.direction = NotificationDirection::TOOL_TO_TOOLBOX;
  EXPECT_THROW(tb.report_change(h, late), Error);
}

TEST(Modes, TableIsTotalAndTerminatedAbsorbs) {
  std::size_t defined = 0;
  for (auto m : kAllToolModes)
    for (auto c : kAllModeCommands) {
      auto next = next_mode(m, c);
      if (m == ToolMode::TERMINATED) EXPECT_FALSE(next);
      if (c == ModeCommand::TERMINATE && m != ToolMode::TERMINATED) EXPECT_EQ(next, ToolMode::TERMINATED);
      defined += next.has_value();
    }
  EXPECT_EQ(next_mode(ToolMode::UNINITIALIZED, ModeCommand::INIT), ToolMode::READY);
  EXPECT_EQ(next_mode(ToolMode::RUNNING, ModeCommand::FREEZE), ToolMode::FROZEN);
  EXPECT_EQ(defined, 6u + 5u);
}

TEST(Modes, SetModeInformsSinkAndRejectsInvalid) {
  Toolbox tb;
  auto s = std::make_shared<StubTool>(desc(Tool::HIP));
  auto h = tb.register_tool(s->descriptor(), s).handle;
  EXPECT_EQ(tb.set_mode(h, ModeCommand::INIT), ToolMode::READY);
  EXPECT_EQ(s->mode(), ToolMode::READY);
  tb.set_mode(h, ModeCommand::TERMINATE);
  try {
    tb.set_mode(h, ModeCommand::INIT);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::INVALID_TRANSITION);
  }
  EXPECT_EQ(s->mode_commands(), (std::vector<ModeCommand>{ModeCommand::INIT, ModeCommand::TERMINATE}));
}

TEST(Query, AttachedHostsOnNemoOnly) {
  Toolbox tb;
  auto nemo = std::make_shared<StubTool>(desc(Tool::MIPv6, 1, {FeatureId::NEMO}), 3);
  auto hip = std::make_shared<StubTool>(desc(Tool::HIP));
  auto hn = tb.register_tool(nemo->descriptor(), nemo).handle;
  auto hh = tb.register_tool(hip->descriptor(), hip).handle;
  EXPECT_EQ(std::get<std::int64_t>(tb.query_status(hn, "attached_hosts")), 3);
  try {
    tb.query_status(hh, "attached_hosts");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::UNSUPPORTED_QUERY);
  }
  EXPECT_THROW(tb.query_status(77, "mode"), Error);
  EXPECT_EQ(tb.find(Tool::HIP), hh);
  EXPECT_FALSE(tb.find(Tool::SCTP));
}
