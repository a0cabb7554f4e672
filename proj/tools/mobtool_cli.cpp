#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mobtool/scenario.hpp"
#include "mobtool/selection.hpp"
#include "mobtool/simnet.hpp"
#include "mobtool/wire.hpp"

using namespace mobtool;

namespace {

constexpr int kOk = 0;
constexpr int kDomainFailure = 1;
constexpr int kUsage = 2;

struct InputError {
  std::string path;
  std::string what;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError{path, "cannot open file"};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool is_domain_failure(Errc c) {
  return c == Errc::NO_COMMON_TOOL || c == Errc::MANDATORY_FEATURE_UNAVAILABLE || c == Errc::TIME_LIMIT_EXCEEDED;
}

void write_trace(const sim::Trace& trace, const std::string& path, const std::string& format) {
  const auto body = format == "structured" ? trace.to_json() : trace.to_text();
  if (path == "-") {
    std::cout << body;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError{path, "cannot write file"};
  out << body;
}

int cmd_run(const std::string& path, std::uint64_t seed, const std::string& trace_out, const std::string& format,
            const std::string& stm, bool verbose) {
  sim::Scenario scenario;
  try {
    scenario = sim::load_scenario_file(path);
  } catch (const Error& e) {
    std::cerr << path << ": " << e.what() << "\n";
    return kUsage;
  }
  if (stm == "on") scenario.stm_enabled = true;
  if (stm == "off") scenario.stm_enabled = false;

  sim::Simulator simulator(scenario, seed);
  int rc = kOk;
  try {
    simulator.run();
  } catch (const Error& e) {
    std::cerr << path << ": " << e.what() << "\n";
    rc = is_domain_failure(e.code()) ? kDomainFailure : kUsage;
  }
  if (verbose)
    for (const auto& line : simulator.outcomes()) std::cout << line << "\n";
  if (!trace_out.empty()) write_trace(simulator.trace(), trace_out, format);
  std::cout << sim::format_metrics(simulator.metrics()) << "\n";
  if (rc == kOk && simulator.failures() > 0) rc = kDomainFailure;
  return rc;
}

int cmd_negotiate(const std::string& a, const std::string& b, const std::string& policy_path) {
  CapabilityProfile local, remote;
  PolicySet policy;
  for (auto [path, fn] : {std::pair<const std::string*, int>{&a, 0}, {&b, 1}, {&policy_path, 2}}) {
    const auto doc = read_file(*path);
    try {
      if (fn == 0) local = parse_profile(doc);
      if (fn == 1) remote = parse_profile(doc);
      if (fn == 2) policy = parse_policy(doc);
    } catch (const Error& e) {
      std::cerr << *path << ": " << e.what() << "\n";
      return kUsage;
    }
  }
  try {
    std::cout << format_selection(negotiate_peer_protocol(local, remote, policy));
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return is_domain_failure(e.code()) ? kDomainFailure : kUsage;
  }
  return kOk;
}

int cmd_decode(const std::string& path) {
  const auto doc = read_file(path);
  try {
    std::cout << wire::describe(wire::parse(wire::from_hex(doc))) << "\n";
  } catch (const Error& e) {
    std::cerr << path << ": " << e.what() << "\n";
    return kUsage;
  }
  return kOk;
}

// Re-runs every bundled scenario that has a golden trace and compares the
// text export byte for byte.
int cmd_selftest(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<fs::path> scenarios;
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(dir, ec))
    if (entry.path().extension() == ".scn") scenarios.push_back(entry.path());
  if (ec) throw InputError{dir, "cannot list directory"};
  std::sort(scenarios.begin(), scenarios.end());

  int checked = 0;
  int failed = 0;
  for (const auto& path : scenarios) {
    const auto golden = fs::path(dir) / "golden" / (path.stem().string() + ".trace");
    if (!fs::exists(golden)) continue;
    ++checked;
    sim::Simulator simulator(sim::load_scenario_file(path.string()));
    try {
      simulator.run();
    } catch (const Error& e) {
      if (!is_domain_failure(e.code())) throw;
    }
    const bool ok = simulator.trace().to_text() == read_file(golden.string());
    std::cout << (ok ? "ok   " : "FAIL ") << path.filename().string() << "\n";
    if (!ok) ++failed;
  }
  if (checked == 0) {
    std::cerr << dir << ": no golden traces found\n";
    return kUsage;
  }
  std::cout << (checked - failed) << "/" << checked << " golden traces match\n";
  return failed ? kDomainFailure : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mobility toolbox, state transfer and handover simulator"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::string trace_out;
  std::string format = "text";
  std::string stm = "scenario";
  bool verbose = false;

  std::string scenario_path;
  auto* run = app.add_subcommand("run", "Simulate a scenario and print the metrics line");
  run->add_option("scenario", scenario_path, "Scenario file")->required();
  run->add_option("--seed", seed, "Jitter seed");
  run->add_option("--trace-out", trace_out, "Write the trace here ('-' for stdout)");
  run->add_option("--format", format, "Trace format")->check(CLI::IsMember({"text", "structured"}));
  run->add_option("--stm", stm, "Override the scenario's STM switch")->check(CLI::IsMember({"on", "off"}));
  run->add_flag("--verbose", verbose, "Print negotiation outcomes");

  std::string prof_a, prof_b, policy;
  auto* neg = app.add_subcommand("negotiate", "Select a peer protocol for two capability profiles");
  neg->add_option("local", prof_a, "Local profile")->required();
  neg->add_option("remote", prof_b, "Remote profile")->required();
  neg->add_option("policy", policy, "Policy file")->required();

  std::string hexfile;
  auto* dec = app.add_subcommand("decode", "Decode a hex-encoded STM message");
  dec->add_option("hexfile", hexfile, "File holding hex text")->required();

  std::string golden_dir = MOBTOOL_SCENARIO_DIR;
  auto* self = app.add_subcommand("selftest", "Re-run bundled scenarios against their golden traces");
  self->add_option("--dir", golden_dir, "Scenario directory holding golden/");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*run) return cmd_run(scenario_path, seed, trace_out, format, stm, verbose);
    if (*neg) return cmd_negotiate(prof_a, prof_b, policy);
    if (*dec) return cmd_decode(hexfile);
    if (*self) return cmd_selftest(golden_dir);
  } catch (const InputError& e) {
    std::cerr << e.path << ": " << e.what << "\n";
    return kUsage;
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
