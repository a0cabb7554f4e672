#pragma once

#include <map>
#include <set>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "mobtool/core.hpp"

namespace mobtool {

struct CapabilityProfile {
  NodeId node;
  std::vector<ToolDescriptor> tools;
  StackSet stacks;
};

/// Throws MALFORMED when a descriptor's stacks exceed the profile's stacks
/// or a (tool, version) pair repeats.
void validate_profile(const CapabilityProfile& profile);

enum class CriterionKind : std::uint8_t { REQUIRE_FEATURE, REQUIRE_APP_CLASS, REQUIRE_STACK, PREFER_TOOL, PREFER_FEATURE };
enum class Hardness : std::uint8_t { HARD, SOFT };

std::string_view to_string(CriterionKind k) noexcept;
std::string_view to_string(Hardness h) noexcept;

struct Criterion {
  CriterionKind kind = CriterionKind::PREFER_TOOL;
  std::variant<FeatureId, AppClass, AddressFamily, Tool> argument;
  Hardness hardness = Hardness::SOFT;

  static Criterion require_feature(FeatureId f, Hardness h = Hardness::HARD) { return {CriterionKind::REQUIRE_FEATURE, f, h}; }
  static Criterion require_app(AppClass a, Hardness h = Hardness::HARD) { return {CriterionKind::REQUIRE_APP_CLASS, a, h}; }
  static Criterion require_stack(AddressFamily s, Hardness h = Hardness::HARD) { return {CriterionKind::REQUIRE_STACK, s, h}; }
  static Criterion prefer_tool(Tool t, Hardness h = Hardness::SOFT) { return {CriterionKind::PREFER_TOOL, t, h}; }
  static Criterion prefer_feature(FeatureId f, Hardness h = Hardness::SOFT) { return {CriterionKind::PREFER_FEATURE, f, h}; }

  bool operator==(const Criterion&) const = default;
};

std::string to_string(const Criterion& c);
bool satisfies(const ToolDescriptor& d, const Criterion& c);

/// Criteria in precedence order.
struct PolicySet {
  std::vector<Criterion> criteria;
};

struct RationaleStep {
  std::string criterion;  // "candidates", a criterion, or "tie-break"
  std::size_t surviving = 0;
  bool operator==(const RationaleStep&) const = default;
};

struct SelectionResult {
  ToolDescriptor chosen;
  std::vector<RationaleStep> rationale;
};

/// Candidates pair each local descriptor with every remote descriptor of the
/// same tool and major version. The negotiated descriptor takes the lower
/// version and intersects stacks (with both profile stack sets), features and
/// application classes; pairs with no common stack are discarded.
std::vector<ToolDescriptor> common_candidates(const CapabilityProfile& local, const CapabilityProfile& remote);

/// Stable multi-key order: each criterion in policy order (satisfying sorts
/// first), then tool name ascending, then higher version first. Remaining
/// ties fall back to feature/app/stack masks so the order is total.
std::vector<ToolDescriptor> rank_candidates(std::vector<ToolDescriptor> candidates, const PolicySet& policy);

/// Throws NO_COMMON_TOOL when nothing survives the HARD criteria.
SelectionResult negotiate_peer_protocol(const CapabilityProfile& local, const CapabilityProfile& remote,
                                        const PolicySet& policy);

// ---------------------------------------------------------------------------

enum class RejectReason : std::uint8_t { NOT_OFFERED };

struct FeatureAgreement {
  FeatureSet agreed;
  std::vector<std::pair<FeatureId, RejectReason>> rejected;
};

/// Throws MANDATORY_FEATURE_UNAVAILABLE naming every missing HARD feature.
FeatureAgreement negotiate_provider_features(const std::vector<std::pair<FeatureId, Hardness>>& requested,
                                             FeatureSet offered);

// ---------------------------------------------------------------------------

using Parameters = std::map<std::string, std::string>;

struct ServiceNeed {
  FeatureId feature;
  Parameters params;
};

struct AdvertisedService {
  FeatureId feature;
  std::optional<Tool> tool;  // the access-side tool realizing the service
  Parameters params;
};

struct ClientNeeds {
  std::vector<ServiceNeed> needs;
  std::set<Tool> tools;  // what the client host can run
};

struct Activation {
  FeatureId service;
  std::optional<Tool> tool;
  Parameters params;
  bool operator==(const Activation&) const = default;
};

struct ActivationPlan {
  std::vector<Activation> activations;
  std::vector<FeatureId> unmet;
};

/// One activation per need the access network advertises, with advertised
/// parameters overridden by the client's. An advertised FOREIGN_AGENT also
/// activates MIPv4 when the client runs it, even if not asked for.
ActivationPlan plan_access_tools(const ClientNeeds& client, const std::vector<AdvertisedService>& access);

// ---------------------------------------------------------------------------
// Text forms (profiles, policies, needs, advertisements).
//
//   profile:  node = <name>          stacks = V4,V6
//             tool = <TOOL> <major.minor> [stacks=..] [features=..] [apps=..]
//   policy:   criterion = HARD|SOFT <KIND> <ARG>
//
// '#' starts a comment. Errors carry 1-based line numbers.

ToolDescriptor parse_tool_descriptor(std::string_view text);
CapabilityProfile parse_profile(std::string_view text);
Criterion parse_criterion(std::string_view text);
PolicySet parse_policy(std::string_view text);
/// `<FEATURE> [k=v ...]`
ServiceNeed parse_need(std::string_view text);
/// `<FEATURE> [tool=<TOOL>] [k=v ...]`
AdvertisedService parse_advertised(std::string_view text);
/// `HARD|SOFT <FEATURE>`
std::pair<FeatureId, Hardness> parse_feature_request(std::string_view text);

std::string format_selection(const SelectionResult& result);
std::string format_plan(const ActivationPlan& plan);

}  // namespace mobtool
