#include <gtest/gtest.h>

#include "mobtool/scenario.hpp"

using namespace mobtool;
using namespace mobtool::sim;

namespace {

const char* kMinimal = R"(
[nodes]
A = kind=CORRESPONDENT addr=v4:192.0.2.1:0
B = kind=CORRESPONDENT addr=v4:192.0.2.2:0
[links]
A-B = latency=4 drop=1,5-7
)";

Error load_error(const std::string& doc) {
  try {
    load_scenario(doc);
  } catch (const Error& e) {
    return e;
  }
  ADD_FAILURE() << "scenario loaded";
  return Error(Errc::MALFORMED, "");
}

}  // namespace

TEST(Scenario, MinimalDocumentDefaults) {
  auto s = load_scenario(kMinimal);
  EXPECT_TRUE(s.stm_enabled);
  EXPECT_EQ(s.time_limit_ms, 60000);
  ASSERT_EQ(s.links.size(), 1u);
  EXPECT_EQ(s.links[0].latency, 4);
  EXPECT_EQ(s.links[0].drops, (std::set<std::uint64_t>{1, 5, 6, 7}));
  ASSERT_NE(s.node("B"), nullptr);
  EXPECT_EQ(s.node("C"), nullptr);
}

TEST(Scenario, BundledFig2) {
  auto s = load_scenario_file(std::string(MOBTOOL_SCENARIO_DIR) + "/fig2.scn");
  EXPECT_EQ(s.name, "fig2");
  EXPECT_EQ(s.nodes.size(), 8u);
  EXPECT_EQ(s.links.size(), 11u);
  ASSERT_EQ(s.flows.size(), 2u);
  EXPECT_EQ(s.flows[1].port, 5006);
  ASSERT_EQ(s.handovers.size(), 1u);
  EXPECT_EQ(s.handovers[0].at, 1000);
  EXPECT_EQ(s.node("RAN2")->firewall, "FW2");
  EXPECT_EQ(s.node("MN")->ran_addrs.size(), 2u);
  EXPECT_EQ(s.alg_delay_ms, 200);
}

TEST(Scenario, StmSectionAppliesDefaultsThenOverrides) {
  auto s = load_scenario(std::string(kMinimal) + R"(
[stm]
retransmit_timeout_ms = 100
B.max_retries = 1
B.transport = STREAM
)");
  EXPECT_EQ(s.stm_for("A").retransmit_timeout_ms, 100);
  EXPECT_EQ(s.stm_for("A").max_retries, 3u);
  EXPECT_EQ(s.stm_for("B").retransmit_timeout_ms, 100);
  EXPECT_EQ(s.stm_for("B").max_retries, 1u);
  EXPECT_EQ(s.stm_for("B").transport, stm::Transport::STREAM);
}

TEST(Scenario, ErrorsNameTheFirstLine) {
  auto e = load_error("[nodes]\nA = kind=CORRESPONDENT addr=v4:1.2.3.4:0\nB = kind=TOASTER\n");
  EXPECT_EQ(e.code(), Errc::PARSE_ERROR);
  EXPECT_EQ(e.position(), std::optional<std::size_t>(3));
  EXPECT_NE(e.detail().find("TOASTER"), std::string::npos);
}

TEST(Scenario, EveryProblemIsListed) {
  auto e = load_error("[nodes]\nA = kind=CORRESPONDENT addr=v4:1.2.3.4:0\n[links]\nA-B = latency=1\nA-A = latency=1\n");
  EXPECT_EQ(e.position(), std::optional<std::size_t>(4));
  EXPECT_NE(e.detail().find("line 4"), std::string::npos);
  EXPECT_NE(e.detail().find("line 5"), std::string::npos);
}

TEST(Scenario, UnknownNodeReference) {
  auto e = load_error(std::string(kMinimal) + "[flows]\nf = src=A dst=Z port=9\n");
  EXPECT_EQ(e.code(), Errc::UNKNOWN_NODE_REF);
  EXPECT_EQ(e.position(), std::optional<std::size_t>(8));
}

TEST(Scenario, NegativeTimes) {
  EXPECT_EQ(load_error(std::string(kMinimal) + "[scenario]\nalg_delay_ms = -5\n").code(), Errc::NEGATIVE_TIME);
  EXPECT_EQ(load_error("[nodes]\nA = kind=CORRESPONDENT addr=v4:1.2.3.4:0\nB = kind=CORRESPONDENT addr=v4:1.2.3.5:0\n"
                       "[links]\nA-B = latency=-1\n")
                .code(),
            Errc::NEGATIVE_TIME);
}

TEST(Scenario, MalformedDocuments) {
  for (const char* doc : {"", "# only a comment\n", "[nodes\nA = kind=MOBILE\n", "A = kind=MOBILE\n", "[teleport]\nx = 1\n",
                          "[nodes]\nA kind=MOBILE\n", "[nodes]\nA = kind=CORRESPONDENT\nA = kind=CORRESPONDENT\n",
                          "[scenario]\nname = x\n"}) {
    SCOPED_TRACE(doc);
    EXPECT_EQ(load_error(doc).code(), Errc::PARSE_ERROR);
  }
}

TEST(Scenario, MissingFile) {
  try {
    load_scenario_file("/nonexistent/nope.scn");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::PARSE_ERROR);
    EXPECT_NE(e.detail().find("nope.scn"), std::string::npos);
  }
}
