#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "mobtool/scenario.hpp"
#include "mobtool/stm.hpp"
#include "mobtool/toolbox.hpp"
#include "mobtool/trace.hpp"

namespace mobtool::sim {

struct Metrics {
  std::uint64_t rtp_sent = 0;
  std::uint64_t rtp_dropped_total = 0;
  // Firewall drops at or after the first pinhole install that follows the
  // handover. Drops addressed to a stale locator are not firewall drops.
  std::uint64_t rtp_dropped_after_install = 0;
  // Worst flow: first packet received after the handover minus handover
  // time. 0 without a handover, -1 if some flow never recovers.
  std::int64_t restore_time_ms = 0;
  std::uint64_t stm_messages = 0;

  bool operator==(const Metrics&) const = default;
};

/// Derives the metrics from trace records alone.
Metrics compute_metrics(const Trace& trace);
/// Stable `key=value` pairs on one line.
std::string format_metrics(const Metrics& m);

/// One simulation run. Single-threaded; all toolbox and STM instances live
/// inside the event loop.
class Simulator {
 public:
  Simulator(Scenario scenario, std::uint64_t seed = 0);
  ~Simulator();
  Simulator(const Simulator&) = delete;
  Simulator& operator=(const Simulator&) = delete;

  /// Runs to quiescence. Throws TIME_LIMIT_EXCEEDED if events remain past
  /// the scenario's time limit; the trace up to that point stays readable.
  void run();

  const Trace& trace() const;
  Metrics metrics() const { return compute_metrics(trace()); }
  /// Human-readable selection/feature/plan outcomes, one per line.
  const std::vector<std::string>& outcomes() const;
  /// Number of failed negotiations (NO_COMMON_TOOL and the like).
  std::size_t failures() const;

  SimTime now() const;
  const Scenario& scenario() const;
  const stm::Stm* stm(std::string_view node) const;
  const Toolbox* toolbox(std::string_view node) const;
  std::vector<PinholeRule> pinholes(std::string_view node) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct RunResult {
  Trace trace;
  Metrics metrics;
  std::vector<std::string> outcomes;
  std::size_t failures = 0;
};

RunResult run(const Scenario& scenario, std::uint64_t seed = 0);

}  // namespace mobtool::sim
