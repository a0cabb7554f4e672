#include "mobtool/selection.hpp"

#include <algorithm>

namespace mobtool {

std::string_view to_string(CriterionKind k) noexcept {
  switch (k) {
    case CriterionKind::REQUIRE_FEATURE: return "REQUIRE_FEATURE";
    case CriterionKind::REQUIRE_APP_CLASS: return "REQUIRE_APP_CLASS";
    case CriterionKind::REQUIRE_STACK: return "REQUIRE_STACK";
    case CriterionKind::PREFER_TOOL: return "PREFER_TOOL";
    case CriterionKind::PREFER_FEATURE: return "PREFER_FEATURE";
  }
  return "?";
}

std::string_view to_string(Hardness h) noexcept { return h == Hardness::HARD ? "HARD" : "SOFT"; }

std::string to_string(const Criterion& c) {
  std::string arg = std::visit([](auto v) { return std::string(to_string(v)); }, c.argument);
  return std::string(to_string(c.hardness)) + " " + std::string(to_string(c.kind)) + "(" + arg + ")";
}

bool satisfies(const ToolDescriptor& d, const Criterion& c) {
  switch (c.kind) {
    case CriterionKind::REQUIRE_FEATURE:
    case CriterionKind::PREFER_FEATURE: {
      auto f = std::get_if<FeatureId>(&c.argument);
      return f && d.features.contains(*f);
    }
    case CriterionKind::REQUIRE_APP_CLASS: {
      auto a = std::get_if<AppClass>(&c.argument);
      return a && d.app_classes.contains(*a);
    }
    case CriterionKind::REQUIRE_STACK: {
      auto s = std::get_if<AddressFamily>(&c.argument);
      return s && d.stacks.contains(*s);
    }
    case CriterionKind::PREFER_TOOL: {
      auto t = std::get_if<Tool>(&c.argument);
      return t && d.tool == *t;
    }
  }
  return false;
}

void validate_profile(const CapabilityProfile& profile) {
  for (std::size_t i = 0; i < profile.tools.size(); ++i) {
    const auto& d = profile.tools[i];
    if (d.stacks.empty()) throw Error(Errc::MALFORMED, to_string(d) + ": no stacks");
    if (!d.stacks.subset_of(profile.stacks))
      throw Error(Errc::MALFORMED, to_string(d) + ": stacks outside the profile's stacks");
    for (std::size_t j = 0; j < i; ++j) {
      if (profile.tools[j].tool == d.tool && profile.tools[j].version == d.version)
        throw Error(Errc::MALFORMED, to_string(d) + ": duplicate (tool, version)");
    }
  }
}

std::vector<ToolDescriptor> common_candidates(const CapabilityProfile& local, const CapabilityProfile& remote) {
  const StackSet shared_stacks = local.stacks & remote.stacks;
  std::vector<ToolDescriptor> out;
  for (const auto& l : local.tools) {
    for (const auto& r : remote.tools) {
      if (l.tool != r.tool || l.version.major != r.version.major) continue;
      ToolDescriptor d;
      d.tool = l.tool;
      d.version = std::min(l.version, r.version);
      d.stacks = l.stacks & r.stacks & shared_stacks;
      d.features = l.features & r.features;
      d.app_classes = l.app_classes & r.app_classes;
      if (d.stacks.empty()) continue;
      if (std::find(out.begin(), out.end(), d) == out.end()) out.push_back(d);
    }
  }
  return out;
}

namespace {

// Terminal order: name ascending, higher version first, then richer masks first.
bool terminal_less(const ToolDescriptor& a, const ToolDescriptor& b) {
  const auto an = to_string(a.tool), bn = to_string(b.tool);
  if (an != bn) return an < bn;
  if (a.version != b.version) return a.version > b.version;
  if (a.features != b.features) return a.features.mask() > b.features.mask();
  if (a.app_classes != b.app_classes) return a.app_classes.mask() > b.app_classes.mask();
  return a.stacks.mask() > b.stacks.mask();
}

}  // namespace

std::vector<ToolDescriptor> rank_candidates(std::vector<ToolDescriptor> candidates, const PolicySet& policy) {
  std::stable_sort(candidates.begin(), candidates.end(), [&](const ToolDescriptor& a, const ToolDescriptor& b) {
    for (const auto& c : policy.criteria) {
      const bool sa = satisfies(a, c), sb = satisfies(b, c);
      if (sa != sb) return sa;
    }
    return terminal_less(a, b);
  });
  return candidates;
}

SelectionResult negotiate_peer_protocol(const CapabilityProfile& local, const CapabilityProfile& remote,
                                        const PolicySet& policy) {
  auto candidates = common_candidates(local, remote);
  SelectionResult result;
  result.rationale.push_back({"candidates", candidates.size()});

  for (const auto& c : policy.criteria) {
    if (c.hardness == Hardness::HARD) {
      std::erase_if(candidates, [&](const ToolDescriptor& d) { return !satisfies(d, c); });
      result.rationale.push_back({to_string(c), candidates.size()});
    } else {
      auto n = std::count_if(candidates.begin(), candidates.end(), [&](const ToolDescriptor& d) { return satisfies(d, c); });
      result.rationale.push_back({to_string(c), static_cast<std::size_t>(n)});
    }
  }
  if (candidates.empty())
    throw Error(Errc::NO_COMMON_TOOL, to_string(local.node) + " / " + to_string(remote.node));

  auto ranked = rank_candidates(std::move(candidates), policy);
  result.chosen = ranked.front();
  // How many candidates tied with the winner on every policy key.
  auto tied = std::count_if(ranked.begin(), ranked.end(), [&](const ToolDescriptor& d) {
    return std::all_of(policy.criteria.begin(), policy.criteria.end(),
                       [&](const Criterion& c) { return satisfies(d, c) == satisfies(result.chosen, c); });
  });
  result.rationale.push_back({"tie-break", static_cast<std::size_t>(tied)});
  return result;
}

// ---------------------------------------------------------------------------

FeatureAgreement negotiate_provider_features(const std::vector<std::pair<FeatureId, Hardness>>& requested,
                                             FeatureSet offered) {
  FeatureAgreement out;
  std::string missing;
  for (const auto& [feature, hardness] : requested) {
    if (offered.contains(feature)) {
      out.agreed.insert(feature);
      continue;
    }
    if (hardness == Hardness::HARD) {
      if (!missing.empty()) missing += ",";
      missing += to_string(feature);
    } else if (std::none_of(out.rejected.begin(), out.rejected.end(), [&](const auto& r) { return r.first == feature; })) {
      out.rejected.emplace_back(feature, RejectReason::NOT_OFFERED);
    }
  }
  if (!missing.empty()) throw Error(Errc::MANDATORY_FEATURE_UNAVAILABLE, missing);
  return out;
}

// ---------------------------------------------------------------------------

ActivationPlan plan_access_tools(const ClientNeeds& client, const std::vector<AdvertisedService>& access) {
  ActivationPlan plan;
  auto planned = [&](FeatureId f) {
    return std::any_of(plan.activations.begin(), plan.activations.end(),
                       [&](const Activation& a) { return a.service == f; });
  };

  for (const auto& need : client.needs) {
    auto ad = std::find_if(access.begin(), access.end(), [&](const AdvertisedService& s) { return s.feature == need.feature; });
    if (ad == access.end()) {
      plan.unmet.push_back(need.feature);
      continue;
    }
    Activation act{need.feature, ad->tool, ad->params};
    for (const auto& [k, v] : need.params) act.params[k] = v;
    plan.activations.push_back(std::move(act));
  }

  for (const auto& ad : access) {
    if (ad.feature != FeatureId::FOREIGN_AGENT || planned(FeatureId::FOREIGN_AGENT)) continue;
    if (client.tools.count(Tool::MIPv4) == 0) continue;
    plan.activations.push_back(Activation{FeatureId::FOREIGN_AGENT, Tool::MIPv4, ad.params});
  }
  return plan;
}

}  // namespace mobtool
