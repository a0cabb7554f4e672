#include <gtest/gtest.h>

#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "mobtool/simnet.hpp"

using namespace mobtool;
using namespace mobtool::sim;

namespace {

std::string fig2_text() {
  std::ifstream in(std::string(MOBTOOL_SCENARIO_DIR) + "/fig2.scn");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void replace(std::string& doc, const std::string& from, const std::string& to) {
  auto at = doc.find(from);
  ASSERT_NE(at, std::string::npos) << from;
  doc.replace(at, from.size(), to);
}

struct Variant {
  SimTime alg = 200;
  SimTime ff = 10;  // FW1-FW2 latency
  SimTime handover = 1000;
  bool stm = true;
};

Scenario fig2_variant(const Variant& v) {
  auto doc = fig2_text();
  replace(doc, "alg_delay_ms = 200", "alg_delay_ms = " + std::to_string(v.alg));
  replace(doc, "FW1-FW2  = latency=10", "FW1-FW2  = latency=" + std::to_string(v.ff));
  replace(doc, "handover = at=1000", "handover = at=" + std::to_string(v.handover));
  replace(doc, "stm_enabled = true", v.stm ? "stm_enabled = true" : "stm_enabled = false");
  return load_scenario(doc);
}

// Closed-form expectation for the two-correspondent topology. Latencies:
// mobile-router mr, router-firewall rf, correspondent-firewall fc. A packet
// sent at t before the correspondent learns the new address (R) takes the old
// path and is lost if it reaches the mobile after the handover H; later ones
// reach FW2 at t + fc and are dropped there before the pinholes exist (P).
Metrics oracle(const Variant& v) {
  const SimTime mr = 5, rf = 5, fc = 20, H = v.handover, ff = v.ff;
  const SimTime R = v.stm ? H + 2 * (mr + rf) + 2 * ff + (mr + rf + fc) : H + mr + rf + fc;
  const SimTime P = v.stm ? H + (mr + rf) + 2 * ff : H + mr + rf + v.alg;
  Metrics m;
  m.stm_messages = v.stm ? 3 : 0;
  for (SimTime start : {3, 13}) {
    std::optional<SimTime> first;
    for (SimTime t = start; t < 2000; t += 20) {
      ++m.rtp_sent;
      SimTime arrival;
      if (t < R) {
        arrival = t + fc + rf + mr;
        if (arrival > H) {
          ++m.rtp_dropped_total;
          continue;
        }
      } else {
        if (t + fc < P) {
          ++m.rtp_dropped_total;
          continue;
        }
        arrival = t + fc + rf + mr;
      }
      if (arrival > H && !first) first = arrival;
    }
    m.restore_time_ms = std::max<std::int64_t>(m.restore_time_ms, first ? *first - H : -1);
  }
  return m;
}

std::vector<std::uint64_t> recv_seqs(const Trace& t, const std::string& flow) {
  std::vector<std::uint64_t> out;
  for (const auto& r : t.records())
    if (r.kind == "RTP_RECV" && r.get("flow") == flow) out.push_back(std::stoull(r.get("seq")));
  return out;
}

}  // namespace

TEST(Fig2, FrozenMetrics) {
  auto on = run(fig2_variant({}));
  EXPECT_EQ(format_metrics(on.metrics),
            "rtp_sent=200 rtp_dropped_total=10 rtp_dropped_after_install=0 restore_time_ms=113 stm_messages=3");
  auto off = run(fig2_variant({.stm = false}));
  EXPECT_EQ(format_metrics(off.metrics),
            "rtp_sent=200 rtp_dropped_total=22 rtp_dropped_after_install=0 restore_time_ms=233 stm_messages=0");
  EXPECT_EQ(on.failures, 0u);
}

TEST(Fig2, MatchesClosedFormAcrossParameters) {
  for (SimTime alg : {100, 200, 350})
    for (SimTime ff : {10, 25})
      for (SimTime h : {1000, 1250, 1437})
        for (bool stm : {true, false}) {
          Variant v{alg, ff, h, stm};
          SCOPED_TRACE("alg=" + std::to_string(alg) + " ff=" + std::to_string(ff) + " H=" + std::to_string(h) +
                       (stm ? " stm" : " nostm"));
          EXPECT_EQ(run(fig2_variant(v)).metrics, oracle(v));
        }
}

TEST(Fig2, CausalOrderOfTheHandover) {
  auto r = run(fig2_variant({}));
  std::map<std::string, std::size_t> at;
  const auto& rs = r.trace.records();
  for (std::size_t i = 0; i < rs.size(); ++i) {
    std::string key = rs[i].node + ":" + rs[i].kind;
    if (rs[i].kind == "STM_SEND") key += ":" + rs[i].get("type");
    at.emplace(key, i);
  }
  const std::vector<std::string> chain = {
      "MN:HANDOVER",         "MN:TRIGGER_SEND",           "FW2:TRIGGER",        "FW2:STM_SEND:CTX_REQUEST",
      "FW1:STM_RECV",        "FW1:STM_SEND:CTX_RESPONSE", "FW2:PINHOLES_INSTALLED", "FW2:CTX_READY_SEND",
      "MN:CTX_READY",        "MN:SIP_REINVITE",           "CN1:REDIRECT"};
  for (std::size_t k = 0; k < chain.size(); ++k) {
    ASSERT_TRUE(at.count(chain[k])) << chain[k];
    if (k) EXPECT_LT(at[chain[k - 1]], at[chain[k]]) << chain[k - 1] << " before " << chain[k];
  }
  for (std::size_t i = 1; i < rs.size(); ++i) ASSERT_LE(rs[i - 1].ts, rs[i].ts);
}

TEST(Run, DeterministicAndSeeded) {
  auto s = fig2_variant({});
  const auto a = run(s).trace.to_text();
  EXPECT_EQ(run(s).trace.to_text(), a);
  s.jitter_ms = 4;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SCOPED_TRACE(seed);
    const auto x = run(s, seed);
    EXPECT_EQ(run(s, seed).trace.to_text(), x.trace.to_text());
    for (const char* flow : {"rtp1", "rtp2"}) {
      auto seqs = recv_seqs(x.trace, flow);
      EXPECT_TRUE(std::is_sorted(seqs.begin(), seqs.end())) << flow;
    }
    EXPECT_EQ(x.metrics.rtp_dropped_after_install, 0u);
  }
}

TEST(Run, TimeLimitWithUnboundedFlows) {
  auto doc = fig2_text();
  replace(doc, "stop=2000\nrtp2", "stop=0\nrtp2");
  replace(doc, "alg_delay_ms = 200", "alg_delay_ms = 200\ntime_limit_ms = 3000");
  Simulator sim(load_scenario(doc));
  try {
    sim.run();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::TIME_LIMIT_EXCEEDED);
  }
  ASSERT_GT(sim.trace().size(), 0u);
  EXPECT_EQ(sim.trace().records().back().kind, "TIME_LIMIT");
  EXPECT_LE(sim.now(), 3000);
}

TEST(Run, SimulatorExposesState) {
  Simulator sim(fig2_variant({}));
  sim.run();
  EXPECT_EQ(sim.pinholes("FW2").size(), 2u);
  ASSERT_NE(sim.stm("FW1"), nullptr);
  EXPECT_EQ(sim.stm("MN"), nullptr);
  EXPECT_EQ(sim.stm("FW1")->live_sessions(), 0u);
  EXPECT_NE(sim.toolbox("MN"), nullptr);
}

TEST(Trace, TextAndJsonExports) {
  auto r = run(fig2_variant({}));
  const auto text = r.trace.to_text();
  const auto back = parse_trace_text(text);
  EXPECT_EQ(back.to_text(), text);
  EXPECT_EQ(compute_metrics(back), r.metrics);

  auto doc = nlohmann::json::parse(r.trace.to_json());
  ASSERT_EQ(doc["records"].size(), r.trace.size());
  const auto& first = doc["records"][0];
  EXPECT_EQ(first["t"], 0);
  EXPECT_EQ(first["node"], "FW1");
  EXPECT_EQ(first["kind"], "FW_PRESET");

  EXPECT_THROW(parse_trace_text("t=1 node=A kind=X\nbogus line\n"), Error);
}

TEST(Metrics, FromSyntheticTrace) {
  Trace t;
  t.add(0, "C", "RTP_SEND", {{"flow", "f"}, {"seq", "0"}, {"to", "M"}});
  t.add(5, "M", "RTP_RECV", {{"flow", "f"}, {"seq", "0"}});
  t.add(10, "M", "HANDOVER");
  t.add(11, "C", "RTP_SEND", {{"flow", "f"}, {"seq", "1"}, {"to", "M"}});
  t.add(12, "F", "DROP", {{"reason", "FIREWALL"}, {"msg", "RTP"}});
  t.add(14, "F", "PINHOLES_INSTALLED");
  t.add(15, "F", "DROP", {{"reason", "FIREWALL"}, {"msg", "RTP"}});
  t.add(16, "F", "DROP", {{"reason", "NO_ROUTE"}, {"msg", "RTP"}});
  t.add(17, "F", "DROP", {{"reason", "FIREWALL"}, {"msg", "STM"}});
  t.add(18, "F", "STM_SEND", {{"type", "CTX_REQUEST"}});
  t.add(40, "M", "RTP_RECV", {{"flow", "f"}, {"seq", "2"}});
  auto m = compute_metrics(t);
  EXPECT_EQ(m.rtp_sent, 2u);
  EXPECT_EQ(m.rtp_dropped_total, 3u);
  EXPECT_EQ(m.rtp_dropped_after_install, 1u);
  EXPECT_EQ(m.restore_time_ms, 30);
  EXPECT_EQ(m.stm_messages, 1u);

  Trace lost;
  lost.add(0, "M", "HANDOVER");
  lost.add(1, "C", "RTP_SEND", {{"flow", "f"}, {"to", "M"}});
  EXPECT_EQ(compute_metrics(lost).restore_time_ms, -1);
  EXPECT_EQ(compute_metrics(Trace{}), Metrics{});
}

TEST(Selection, BundledScenarioOutcomes) {
  struct Case {
    const char* file;
    const char* expect;
    std::size_t failures;
  };
  for (auto c : {Case{"scenario1-a.scn", "chosen=MIPv4", 0}, Case{"scenario1-b.scn", "chosen=HIP", 0},
                 Case{"scenario1-c.scn", "chosen=SIP", 0}, Case{"scenario1-d.scn", "chosen=SCTP", 0},
                 Case{"scenario1-e.scn", "chosen=MIPv6 version=1.0", 0},
                 Case{"scenario1-none.scn", "negotiation failed: NO_COMMON_TOOL", 1},
                 Case{"scenario2.scn", "agreed=", 0}, Case{"scenario3.scn", "activate service=FOREIGN_AGENT tool=MIPv4", 0}}) {
    SCOPED_TRACE(c.file);
    auto r = run(load_scenario_file(std::string(MOBTOOL_SCENARIO_DIR) + "/" + c.file));
    EXPECT_EQ(r.failures, c.failures);
    bool found = false;
    for (const auto& line : r.outcomes) found |= line.rfind(c.expect, 0) == 0;
    EXPECT_TRUE(found);
  }
}
