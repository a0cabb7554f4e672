#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

using std::string;

namespace {

struct Result {
  int rc = -1;
  string out;
  string err;
};

string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Result cli(const string& args) {
  const auto dir = std::filesystem::temp_directory_path();
  const auto out = dir / ("mobtool_cli_out_" + std::to_string(::getpid()));
  const auto err = dir / ("mobtool_cli_err_" + std::to_string(::getpid()));
  const string cmd = string("\"") + MOBTOOL_CLI + "\" " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  std::filesystem::remove(out);
  std::filesystem::remove(err);
  return r;
}

string scn(const string& name) { return string(MOBTOOL_SCENARIO_DIR) + "/" + name; }
string prof(const string& name) { return string(MOBTOOL_PROFILE_DIR) + "/" + name; }

}  // namespace

TEST(Cli, RunPrintsMetrics) {
  auto r = cli("run " + scn("fig2.scn"));
  EXPECT_EQ(r.rc, 0) << r.err;
  EXPECT_NE(r.out.find("rtp_dropped_after_install=0"), string::npos);
  auto off = cli("run " + scn("fig2.scn") + " --stm off");
  EXPECT_NE(off.out.find("rtp_dropped_total=22"), string::npos);
}

TEST(Cli, TraceToStdoutInBothFormats) {
  auto text = cli("run " + scn("fig2.scn") + " --trace-out -");
  EXPECT_EQ(text.rc, 0);
  EXPECT_EQ(text.out.rfind("t=0 node=FW1 kind=FW_PRESET", 0), 0u);
  auto json = cli("run " + scn("fig2.scn") + " --trace-out - --format structured");
  EXPECT_EQ(json.rc, 0);
  EXPECT_NE(json.out.find("\"records\""), string::npos);
  EXPECT_EQ(cli("run " + scn("fig2.scn") + " --format xml").rc, 2);
}

TEST(Cli, MissingScenarioNamesTheFile) {
  auto r = cli("run /nonexistent/nope.scn");
  EXPECT_EQ(r.rc, 2);
  EXPECT_NE(r.err.find("nope.scn"), string::npos);
}

TEST(Cli, MalformedScenarioIsUsageError) {
  const auto path = std::filesystem::temp_directory_path() / "mobtool_bad.scn";
  std::ofstream(path) << "[nodes]\nA = kind=TOASTER\n";
  auto r = cli("run " + path.string());
  std::filesystem::remove(path);
  EXPECT_EQ(r.rc, 2);
  EXPECT_NE(r.err.find("line 2"), string::npos);
}

TEST(Cli, NegotiateProfiles) {
  auto r = cli("negotiate " + prof("s1b.prof") + " " + prof("s1b.prof") + " " + prof("s1b.pol"));
  EXPECT_EQ(r.rc, 0) << r.err;
  EXPECT_EQ(r.out.rfind("chosen=HIP", 0), 0u);
  EXPECT_NE(r.out.find("rationale:"), string::npos);
  auto none = cli("negotiate " + prof("hip-only.prof") + " " + prof("sip-only.prof") + " " + prof("empty.pol"));
  EXPECT_EQ(none.rc, 1);
  EXPECT_NE(none.err.find("NO_COMMON_TOOL"), string::npos);
}

TEST(Cli, NegotiationFailureInScenarioIsDomainFailure) {
  EXPECT_EQ(cli("run " + scn("scenario1-none.scn")).rc, 1);
  auto ok = cli("run " + scn("scenario3.scn") + " --verbose");
  EXPECT_EQ(ok.rc, 0);
  EXPECT_NE(ok.out.find("activate service=STATE_TRANSFER tool=STM"), string::npos);
}

TEST(Cli, DecodeNamesEveryTlv) {
  const auto path = std::filesystem::temp_directory_path() / "mobtool_msg.hex";
  std::ofstream(path) << "53544d31 01 01 0005 0001000000000001 00000015 0001 0006 4d4e 00000000 0003 0002 0001 0008 "
                         "0001 03\n";
  auto r = cli("decode " + path.string());
  EXPECT_EQ(r.rc, 0) << r.err;
  for (const char* name : {"CTX_REQUEST", "NODE_ID", "CTX_TYPES", "PRIORITY"}) EXPECT_NE(r.out.find(name), string::npos);
  std::ofstream(path) << "53544d31 01\n";
  auto bad = cli("decode " + path.string());
  std::filesystem::remove(path);
  EXPECT_EQ(bad.rc, 2);
  EXPECT_NE(bad.err.find("TRUNCATED"), string::npos);
}

TEST(Cli, SelftestAndUsage) {
  auto r = cli("selftest");
  EXPECT_EQ(r.rc, 0) << r.out;
  EXPECT_NE(r.out.find("golden traces match"), string::npos);
  EXPECT_EQ(cli("").rc, 2);
  EXPECT_EQ(cli("frobnicate").rc, 2);
  EXPECT_EQ(cli("--help").rc, 0);
}
