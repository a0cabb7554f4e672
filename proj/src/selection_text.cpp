#include <sstream>

#include "mobtool/selection.hpp"
#include "mobtool/text.hpp"

namespace mobtool {

namespace {

Version parse_version(std::string_view s) {
  auto parts = text::split(s, '.');
  if (parts.size() != 2) throw Error(Errc::MALFORMED, "bad version '" + std::string(s) + "'");
  auto major = text::to_int<std::uint16_t>(parts[0]);
  auto minor = text::to_int<std::uint16_t>(parts[1]);
  if (!major || !minor) throw Error(Errc::MALFORMED, "bad version '" + std::string(s) + "'");
  return {*major, *minor};
}

template <typename Set, typename Parse>
Set parse_list(std::string_view s, Parse parse) {
  Set out;
  for (auto item : text::split(s, ','))
    if (!item.empty()) out.insert(parse(item));
  return out;
}

// Runs `fn` on every non-blank line, rethrowing errors with the line number.
template <typename Fn>
void for_each_line(std::string_view doc, Fn fn) {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= doc.size()) {
    auto end = doc.find('\n', start);
    if (end == std::string_view::npos) end = doc.size();
    ++line_no;
    auto line = text::trim(text::strip_comment(doc.substr(start, end - start)));
    if (!line.empty()) {
      try {
        fn(line);
      } catch (const Error& e) {
        if (e.position()) throw;
        throw Error(e.code(), e.detail(), line_no);
      }
    }
    start = end + 1;
  }
}

Parameters parse_params(const std::vector<std::string_view>& ws, std::size_t from) {
  Parameters p;
  for (std::size_t i = from; i < ws.size(); ++i) {
    auto kv = text::key_value(ws[i]);
    if (!kv) throw Error(Errc::MALFORMED, "expected key=value, got '" + std::string(ws[i]) + "'");
    p[std::string(kv->first)] = std::string(kv->second);
  }
  return p;
}

Hardness parse_hardness(std::string_view s) {
  if (s == "HARD") return Hardness::HARD;
  if (s == "SOFT") return Hardness::SOFT;
  throw Error(Errc::MALFORMED, "expected HARD or SOFT, got '" + std::string(s) + "'");
}

}  // namespace

ToolDescriptor parse_tool_descriptor(std::string_view line) {
  auto ws = text::words(line);
  if (ws.size() < 2) throw Error(Errc::MALFORMED, "tool needs a name and version");
  ToolDescriptor d;
  d.tool = parse_tool(ws[0]);
  d.version = parse_version(ws[1]);
  for (std::size_t i = 2; i < ws.size(); ++i) {
    auto kv = text::key_value(ws[i]);
    if (!kv) throw Error(Errc::MALFORMED, "expected key=value, got '" + std::string(ws[i]) + "'");
    if (kv->first == "stacks")
      d.stacks = parse_list<StackSet>(kv->second, parse_stack);
    else if (kv->first == "features")
      d.features = parse_list<FeatureSet>(kv->second, parse_feature);
    else if (kv->first == "apps")
      d.app_classes = parse_list<AppClassSet>(kv->second, parse_app_class);
    else
      throw Error(Errc::MALFORMED, "unknown tool attribute '" + std::string(kv->first) + "'");
  }
  if (d.stacks.empty()) throw Error(Errc::MALFORMED, "tool without stacks");
  return d;
}

CapabilityProfile parse_profile(std::string_view doc) {
  CapabilityProfile p;
  for_each_line(doc, [&](std::string_view line) {
    auto kv = text::key_value(line);
    if (!kv) throw Error(Errc::MALFORMED, "expected key = value");
    if (kv->first == "node")
      p.node = NodeId{std::string(kv->second), 0};
    else if (kv->first == "stacks")
      p.stacks = parse_list<StackSet>(kv->second, parse_stack);
    else if (kv->first == "tool")
      p.tools.push_back(parse_tool_descriptor(kv->second));
    else
      throw Error(Errc::MALFORMED, "unknown profile key '" + std::string(kv->first) + "'");
  });
  if (p.node.name.empty()) throw Error(Errc::MALFORMED, "profile without node");
  validate_profile(p);
  return p;
}

Criterion parse_criterion(std::string_view line) {
  auto ws = text::words(line);
  if (ws.size() != 3) throw Error(Errc::MALFORMED, "criterion is '<HARD|SOFT> <KIND> <ARG>'");
  Criterion c;
  c.hardness = parse_hardness(ws[0]);
  const auto kind = ws[1];
  if (kind == "REQUIRE_FEATURE") {
    c.kind = CriterionKind::REQUIRE_FEATURE;
    c.argument = parse_feature(ws[2]);
  } else if (kind == "PREFER_FEATURE") {
    c.kind = CriterionKind::PREFER_FEATURE;
    c.argument = parse_feature(ws[2]);
  } else if (kind == "REQUIRE_APP_CLASS") {
    c.kind = CriterionKind::REQUIRE_APP_CLASS;
    c.argument = parse_app_class(ws[2]);
  } else if (kind == "REQUIRE_STACK") {
    c.kind = CriterionKind::REQUIRE_STACK;
    c.argument = parse_stack(ws[2]);
  } else if (kind == "PREFER_TOOL") {
    c.kind = CriterionKind::PREFER_TOOL;
    c.argument = parse_tool(ws[2]);
  } else {
    throw Error(Errc::MALFORMED, "unknown criterion kind '" + std::string(kind) + "'");
  }
  return c;
}

PolicySet parse_policy(std::string_view doc) {
  PolicySet p;
  for_each_line(doc, [&](std::string_view line) {
    auto kv = text::key_value(line);
    if (!kv || kv->first != "criterion") throw Error(Errc::MALFORMED, "expected 'criterion = ...'");
    p.criteria.push_back(parse_criterion(kv->second));
  });
  return p;
}

ServiceNeed parse_need(std::string_view line) {
  auto ws = text::words(line);
  if (ws.empty()) throw Error(Errc::MALFORMED, "empty need");
  return ServiceNeed{parse_feature(ws[0]), parse_params(ws, 1)};
}

AdvertisedService parse_advertised(std::string_view line) {
  auto ws = text::words(line);
  if (ws.empty()) throw Error(Errc::MALFORMED, "empty advertisement");
  AdvertisedService s{parse_feature(ws[0]), std::nullopt, parse_params(ws, 1)};
  if (auto it = s.params.find("tool"); it != s.params.end()) {
    s.tool = parse_tool(it->second);
    s.params.erase(it);
  }
  return s;
}

std::pair<FeatureId, Hardness> parse_feature_request(std::string_view line) {
  auto ws = text::words(line);
  if (ws.size() != 2) throw Error(Errc::MALFORMED, "feature request is '<HARD|SOFT> <FEATURE>'");
  return {parse_feature(ws[1]), parse_hardness(ws[0])};
}

std::string format_selection(const SelectionResult& result) {
  std::ostringstream os;
  os << "chosen=" << to_string(result.chosen.tool) << " version=" << to_string(result.chosen.version) << "\n";
  os << "descriptor=" << to_string(result.chosen) << "\n";
  for (const auto& step : result.rationale) os << "rationale: " << step.criterion << " -> " << step.surviving << "\n";
  return os.str();
}

std::string format_plan(const ActivationPlan& plan) {
  std::ostringstream os;
  for (const auto& a : plan.activations) {
    os << "activate service=" << to_string(a.service);
    if (a.tool) os << " tool=" << to_string(*a.tool);
    for (const auto& [k, v] : a.params) os << " " << k << "=" << v;
    os << "\n";
  }
  for (auto f : plan.unmet) os << "unmet service=" << to_string(f) << "\n";
  return os.str();
}

}  // namespace mobtool
