#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mobtool/core.hpp"
#include "mobtool/selection.hpp"
#include "mobtool/stm.hpp"

namespace mobtool::sim {

enum class NodeKind : std::uint8_t { MOBILE, CORRESPONDENT, FIREWALL, ACCESS_ROUTER, SIP_SERVER };

std::string_view to_string(NodeKind k) noexcept;

struct NodeSpec {
  std::string name;
  NodeKind kind = NodeKind::CORRESPONDENT;
  std::optional<Locator> addr;               // fixed nodes
  std::map<std::string, Locator> ran_addrs;  // mobile: access router name -> address there
  std::string attach;                        // mobile: initial access router
  std::string firewall;                      // access router: the firewall in front of it
  CapabilityProfile capability;
  std::vector<ServiceNeed> needs;
  std::vector<AdvertisedService> advertised;
  FeatureSet offered;
  std::size_t line = 0;
};

struct LinkSpec {
  std::string a;
  std::string b;
  SimTime latency = 0;
  std::set<std::uint64_t> drops;  // indices of messages sent onto the link
  std::size_t line = 0;
};

struct FlowSpec {
  std::string name;
  std::string src;
  std::string dst;
  std::uint16_t port = 0;
  SimTime interval = 20;
  SimTime start = 0;
  SimTime stop = 0;  // first send time not emitted; 0 = until the time limit
  std::string tag;
};

struct HandoverEvent {
  SimTime at = 0;
  std::string mobile;
  std::string from;
  std::string to;
};

struct PolicySpec {
  std::optional<std::pair<std::string, std::string>> negotiate;  // local, remote
  PolicySet policy;
  std::optional<std::pair<std::string, std::string>> features;  // client, provider
  std::vector<std::pair<FeatureId, Hardness>> requests;
  std::optional<std::pair<std::string, std::string>> plan;  // client, access
};

struct Scenario {
  std::string name;
  bool stm_enabled = true;
  SimTime time_limit_ms = 60000;
  SimTime alg_delay_ms = 200;
  SimTime sip_processing_ms = 0;
  SimTime ctx_ready_timeout_ms = 1000;
  SimTime pinhole_expiry_ms = 0;
  SimTime jitter_ms = 0;

  std::vector<NodeSpec> nodes;
  std::vector<LinkSpec> links;
  std::vector<FlowSpec> flows;
  std::vector<HandoverEvent> handovers;
  PolicySpec policy;
  stm::StmConfig stm_defaults;
  std::map<std::string, stm::StmConfig> stm_config;  // per node, defaults applied first

  const NodeSpec* node(std::string_view name) const;
  stm::StmConfig stm_for(const std::string& node) const;
};

/// Errors: PARSE_ERROR, UNKNOWN_NODE_REF, NEGATIVE_TIME. Every problem found
/// is listed in the detail; position() is the first offending line.
Scenario load_scenario(std::string_view document);
Scenario load_scenario_file(const std::string& path);

}  // namespace mobtool::sim
