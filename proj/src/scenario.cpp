#include "mobtool/scenario.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "mobtool/text.hpp"

namespace mobtool::sim {

std::string_view to_string(NodeKind k) noexcept {
  switch (k) {
    case NodeKind::MOBILE: return "MOBILE";
    case NodeKind::CORRESPONDENT: return "CORRESPONDENT";
    case NodeKind::FIREWALL: return "FIREWALL";
    case NodeKind::ACCESS_ROUTER: return "ACCESS_ROUTER";
    case NodeKind::SIP_SERVER: return "SIP_SERVER";
  }
  return "?";
}

const NodeSpec* Scenario::node(std::string_view name) const {
  for (const auto& n : nodes)
    if (n.name == name) return &n;
  return nullptr;
}

stm::StmConfig Scenario::stm_for(const std::string& node) const {
  auto it = stm_config.find(node);
  return it == stm_config.end() ? stm_defaults : it->second;
}

namespace {

struct Problem {
  Errc code;
  std::size_t line;
  std::string message;
};

class Loader {
 public:
  Scenario run(std::string_view doc);

 private:
  void entry(std::string_view section, std::string_view key, std::string_view value);
  void scenario_key(std::string_view key, std::string_view value);
  void node_line(std::string_view key, std::string_view value);
  void link_line(std::string_view key, std::string_view value);
  void flow_line(std::string_view key, std::string_view value);
  void event_line(std::string_view key, std::string_view value);
  void policy_line(std::string_view key, std::string_view value);
  void stm_line(std::string_view key, std::string_view value);
  void check_references();

  void problem(Errc code, std::string message, std::size_t line = 0) {
    problems_.push_back({code, line ? line : line_, std::move(message)});
  }
  SimTime time_value(std::string_view key, std::string_view v);
  NodeSpec* find(std::string_view name) {
    for (auto& n : s_.nodes)
      if (n.name == name) return &n;
    return nullptr;
  }
  void require_node(std::string_view name, std::size_t line, std::string_view what) {
    if (!find(name)) problem(Errc::UNKNOWN_NODE_REF, std::string(what) + " names undefined node '" + std::string(name) + "'", line);
  }

  Scenario s_;
  std::size_t line_ = 0;
  std::vector<Problem> problems_;
  std::map<std::string, std::size_t> stm_lines_;
  std::vector<std::pair<std::pair<std::string, std::string>, std::size_t>> policy_refs_;
  std::vector<std::pair<HandoverEvent, std::size_t>> event_lines_;
  std::vector<std::pair<FlowSpec, std::size_t>> flow_lines_;
  std::map<std::string, std::size_t> stack_lines_;
};

std::pair<std::string, std::string> two_names(std::string_view value) {
  auto ws = text::words(value);
  if (ws.size() != 2) throw Error(Errc::PARSE_ERROR, "expected two node names");
  return {std::string(ws[0]), std::string(ws[1])};
}

std::map<std::string, std::string> attributes(std::string_view value) {
  std::map<std::string, std::string> out;
  for (auto w : text::words(value)) {
    auto kv = text::key_value(w);
    if (!kv || kv->first.empty()) throw Error(Errc::PARSE_ERROR, "expected key=value, got '" + std::string(w) + "'");
    if (!out.emplace(std::string(kv->first), std::string(kv->second)).second)
      throw Error(Errc::PARSE_ERROR, "repeated attribute '" + std::string(kv->first) + "'");
  }
  return out;
}

NodeKind parse_kind(std::string_view s) {
  if (s == "MOBILE") return NodeKind::MOBILE;
  if (s == "CORRESPONDENT") return NodeKind::CORRESPONDENT;
  if (s == "FIREWALL") return NodeKind::FIREWALL;
  if (s == "ACCESS_ROUTER") return NodeKind::ACCESS_ROUTER;
  if (s == "SIP_SERVER") return NodeKind::SIP_SERVER;
  throw Error(Errc::PARSE_ERROR, "unknown node kind '" + std::string(s) + "'");
}

std::set<std::uint64_t> parse_drops(std::string_view s) {
  std::set<std::uint64_t> out;
  for (auto item : text::split(s, ',')) {
    if (item.empty()) continue;
    auto dash = item.find('-');
    if (dash == std::string_view::npos) {
      auto v = text::to_int<std::uint64_t>(item);
      if (!v) throw Error(Errc::PARSE_ERROR, "bad drop index '" + std::string(item) + "'");
      out.insert(*v);
      continue;
    }
    auto lo = text::to_int<std::uint64_t>(item.substr(0, dash));
    auto hi = text::to_int<std::uint64_t>(item.substr(dash + 1));
    if (!lo || !hi || *hi < *lo || *hi - *lo > 100000)
      throw Error(Errc::PARSE_ERROR, "bad drop range '" + std::string(item) + "'");
    for (auto i = *lo; i <= *hi; ++i) out.insert(i);
  }
  return out;
}

template <typename Set, typename Parse>
Set parse_list(std::string_view s, Parse parse) {
  Set out;
  for (auto item : text::split(s, ','))
    if (!item.empty()) out.insert(parse(item));
  return out;
}

}  // namespace

SimTime Loader::time_value(std::string_view key, std::string_view v) {
  auto n = text::to_int<SimTime>(v);
  if (!n) throw Error(Errc::PARSE_ERROR, std::string(key) + " needs an integer, got '" + std::string(v) + "'");
  if (*n < 0) throw Error(Errc::NEGATIVE_TIME, std::string(key) + " = " + std::string(v));
  return *n;
}

Scenario Loader::run(std::string_view doc) {
  std::string section;
  std::size_t start = 0;
  bool any_entry = false;
  while (start <= doc.size()) {
    auto end = doc.find('\n', start);
    if (end == std::string_view::npos) end = doc.size();
    ++line_;
    auto line = text::trim(text::strip_comment(doc.substr(start, end - start)));
    start = end + 1;
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        problem(Errc::PARSE_ERROR, "unterminated section header");
        continue;
      }
      section = std::string(text::trim(line.substr(1, line.size() - 2)));
      static const std::set<std::string> known = {"scenario", "nodes", "links", "flows", "events", "policy", "stm"};
      if (!known.count(section)) problem(Errc::PARSE_ERROR, "unknown section [" + section + "]");
      continue;
    }
    auto kv = text::key_value(line);
    if (!kv || kv->first.empty()) {
      problem(Errc::PARSE_ERROR, "expected 'key = value'");
      continue;
    }
    if (section.empty()) {
      problem(Errc::PARSE_ERROR, "entry outside any section");
      continue;
    }
    any_entry = true;
    try {
      entry(section, kv->first, kv->second);
    } catch (const Error& e) {
      const auto code = e.code() == Errc::NEGATIVE_TIME || e.code() == Errc::UNKNOWN_NODE_REF ? e.code() : Errc::PARSE_ERROR;
      problem(code, e.detail());
    }
  }
  if (!any_entry) problem(Errc::PARSE_ERROR, "empty scenario", 1);
  else if (s_.nodes.empty()) problem(Errc::PARSE_ERROR, "scenario defines no nodes", 1);
  check_references();

  if (!problems_.empty()) {
    std::stable_sort(problems_.begin(), problems_.end(), [](const auto& a, const auto& b) { return a.line < b.line; });
    std::string detail;
    for (const auto& p : problems_) {
      if (!detail.empty()) detail += "; ";
      detail += "line " + std::to_string(p.line) + ": " + p.message;
    }
    throw Error(problems_.front().code, detail, problems_.front().line);
  }
  return std::move(s_);
}

void Loader::entry(std::string_view section, std::string_view key, std::string_view value) {
  if (section == "scenario") scenario_key(key, value);
  else if (section == "nodes") node_line(key, value);
  else if (section == "links") link_line(key, value);
  else if (section == "flows") flow_line(key, value);
  else if (section == "events") event_line(key, value);
  else if (section == "policy") policy_line(key, value);
  else if (section == "stm") stm_line(key, value);
}

void Loader::scenario_key(std::string_view key, std::string_view value) {
  if (key == "name") {
    s_.name = std::string(value);
  } else if (key == "stm_enabled") {
    auto b = text::to_bool(value);
    if (!b) throw Error(Errc::PARSE_ERROR, "stm_enabled needs true/false");
    s_.stm_enabled = *b;
  } else if (key == "time_limit_ms") {
    s_.time_limit_ms = time_value(key, value);
  } else if (key == "alg_delay_ms") {
    s_.alg_delay_ms = time_value(key, value);
  } else if (key == "sip_processing_ms") {
    s_.sip_processing_ms = time_value(key, value);
  } else if (key == "ctx_ready_timeout_ms") {
    s_.ctx_ready_timeout_ms = time_value(key, value);
  } else if (key == "pinhole_expiry_ms") {
    s_.pinhole_expiry_ms = time_value(key, value);
  } else if (key == "jitter_ms") {
    s_.jitter_ms = time_value(key, value);
  } else {
    throw Error(Errc::PARSE_ERROR, "unknown scenario key '" + std::string(key) + "'");
  }
}

void Loader::node_line(std::string_view key, std::string_view value) {
  auto dot = key.find('.');
  if (dot != std::string_view::npos) {
    auto name = key.substr(0, dot);
    auto attr = key.substr(dot + 1);
    auto* n = find(name);
    if (!n) throw Error(Errc::UNKNOWN_NODE_REF, "attribute for undefined node '" + std::string(name) + "'");
    if (attr == "stacks") {
      n->capability.stacks = parse_list<StackSet>(value, parse_stack);
      stack_lines_[n->name] = line_;
    } else if (attr == "tool") {
      n->capability.tools.push_back(parse_tool_descriptor(value));
    } else if (attr == "need") {
      n->needs.push_back(parse_need(value));
    } else if (attr == "advertise") {
      n->advertised.push_back(parse_advertised(value));
    } else if (attr == "offer") {
      n->offered = n->offered | parse_list<FeatureSet>(value, parse_feature);
    } else {
      throw Error(Errc::PARSE_ERROR, "unknown node attribute '" + std::string(attr) + "'");
    }
    return;
  }
  if (key.find_first_of(" -\t") != std::string_view::npos)
    throw Error(Errc::PARSE_ERROR, "node names may not contain spaces or '-'");
  if (find(key)) throw Error(Errc::PARSE_ERROR, "node '" + std::string(key) + "' defined twice");
  NodeSpec n;
  n.name = std::string(key);
  n.line = line_;
  n.capability.node = NodeId{n.name, 0};
  auto attrs = attributes(value);
  auto kind = attrs.find("kind");
  if (kind == attrs.end()) throw Error(Errc::PARSE_ERROR, "node needs kind=");
  n.kind = parse_kind(kind->second);
  for (const auto& [k, v] : attrs) {
    if (k == "kind") continue;
    if (k == "addr") n.addr = parse_locator(v);
    else if (k.rfind("addr.", 0) == 0) n.ran_addrs[k.substr(5)] = parse_locator(v);
    else if (k == "attach") n.attach = v;
    else if (k == "firewall") n.firewall = v;
    else throw Error(Errc::PARSE_ERROR, "unknown node attribute '" + k + "'");
  }
  if (n.kind == NodeKind::MOBILE) {
    if (n.addr) throw Error(Errc::PARSE_ERROR, "mobile nodes use addr.<ACCESS_ROUTER>=, not addr=");
  } else if (!n.ran_addrs.empty() || !n.attach.empty()) {
    throw Error(Errc::PARSE_ERROR, "only mobile nodes take addr.<router> and attach");
  }
  if (!n.firewall.empty() && n.kind != NodeKind::ACCESS_ROUTER)
    throw Error(Errc::PARSE_ERROR, "only access routers take firewall=");
  s_.nodes.push_back(std::move(n));
}

void Loader::link_line(std::string_view key, std::string_view value) {
  auto dash = key.find('-');
  if (dash == std::string_view::npos) throw Error(Errc::PARSE_ERROR, "link key is '<A>-<B>'");
  LinkSpec l;
  l.a = std::string(text::trim(key.substr(0, dash)));
  l.b = std::string(text::trim(key.substr(dash + 1)));
  l.line = line_;
  if (l.a == l.b) throw Error(Errc::PARSE_ERROR, "link to itself");
  bool have_latency = false;
  for (const auto& [k, v] : attributes(value)) {
    if (k == "latency") {
      l.latency = time_value("latency", v);
      have_latency = true;
    } else if (k == "drop") {
      l.drops = parse_drops(v);
    } else {
      throw Error(Errc::PARSE_ERROR, "unknown link attribute '" + k + "'");
    }
  }
  if (!have_latency) throw Error(Errc::PARSE_ERROR, "link needs latency=");
  for (const auto& other : s_.links)
    if ((other.a == l.a && other.b == l.b) || (other.a == l.b && other.b == l.a))
      throw Error(Errc::PARSE_ERROR, "link " + l.a + "-" + l.b + " defined twice");
  s_.links.push_back(std::move(l));
}

void Loader::flow_line(std::string_view key, std::string_view value) {
  FlowSpec f;
  f.name = std::string(key);
  f.tag = f.name;
  for (const auto& [k, v] : attributes(value)) {
    if (k == "src") f.src = v;
    else if (k == "dst") f.dst = v;
    else if (k == "port") {
      auto p = text::to_int<std::uint16_t>(v);
      if (!p || *p == 0) throw Error(Errc::PARSE_ERROR, "port must be 1-65535");
      f.port = *p;
    } else if (k == "interval") {
      f.interval = time_value("interval", v);
      if (f.interval == 0) throw Error(Errc::PARSE_ERROR, "interval must be positive");
    } else if (k == "start") f.start = time_value("start", v);
    else if (k == "stop") f.stop = time_value("stop", v);
    else if (k == "tag") f.tag = v;
    else throw Error(Errc::PARSE_ERROR, "unknown flow attribute '" + k + "'");
  }
  if (f.src.empty() || f.dst.empty() || f.port == 0) throw Error(Errc::PARSE_ERROR, "flow needs src=, dst= and port=");
  for (const auto& [other, line] : flow_lines_)
    if (other.name == f.name) throw Error(Errc::PARSE_ERROR, "flow '" + f.name + "' defined twice");
  flow_lines_.emplace_back(f, line_);
  s_.flows.push_back(std::move(f));
}

void Loader::event_line(std::string_view key, std::string_view value) {
  if (key != "handover") throw Error(Errc::PARSE_ERROR, "unknown event '" + std::string(key) + "'");
  HandoverEvent e;
  bool have_at = false;
  for (const auto& [k, v] : attributes(value)) {
    if (k == "at") {
      e.at = time_value("at", v);
      have_at = true;
    } else if (k == "mobile") e.mobile = v;
    else if (k == "from") e.from = v;
    else if (k == "to") e.to = v;
    else throw Error(Errc::PARSE_ERROR, "unknown handover attribute '" + k + "'");
  }
  if (!have_at || e.mobile.empty() || e.from.empty() || e.to.empty())
    throw Error(Errc::PARSE_ERROR, "handover needs at=, mobile=, from= and to=");
  if (!s_.handovers.empty() && e.at < s_.handovers.back().at)
    throw Error(Errc::PARSE_ERROR, "event times must be non-decreasing");
  event_lines_.emplace_back(e, line_);
  s_.handovers.push_back(std::move(e));
}

void Loader::policy_line(std::string_view key, std::string_view value) {
  if (key == "negotiate") {
    s_.policy.negotiate = two_names(value);
    policy_refs_.emplace_back(*s_.policy.negotiate, line_);
  } else if (key == "criterion") {
    s_.policy.policy.criteria.push_back(parse_criterion(value));
  } else if (key == "features") {
    s_.policy.features = two_names(value);
    policy_refs_.emplace_back(*s_.policy.features, line_);
  } else if (key == "request") {
    s_.policy.requests.push_back(parse_feature_request(value));
  } else if (key == "plan") {
    s_.policy.plan = two_names(value);
    policy_refs_.emplace_back(*s_.policy.plan, line_);
  } else {
    throw Error(Errc::PARSE_ERROR, "unknown policy key '" + std::string(key) + "'");
  }
}

void Loader::stm_line(std::string_view key, std::string_view value) {
  std::string node;
  auto param = key;
  if (auto dot = key.find('.'); dot != std::string_view::npos) {
    node = std::string(key.substr(0, dot));
    param = key.substr(dot + 1);
    stm_lines_.emplace(node, line_);
  }
  auto& c = node.empty() ? s_.stm_defaults : s_.stm_config.try_emplace(node, s_.stm_defaults).first->second;
  auto number = [&](auto& field) {
    using T = std::remove_reference_t<decltype(field)>;
    auto v = text::to_int<T>(value);
    if (!v) throw Error(Errc::PARSE_ERROR, std::string(param) + " needs an integer");
    if constexpr (std::is_signed_v<T>)
      if (*v < 0) throw Error(Errc::NEGATIVE_TIME, std::string(param) + " = " + std::string(value));
    field = *v;
  };
  if (param == "listen_port") number(c.listen_port);
  else if (param == "retransmit_timeout_ms") number(c.retransmit_timeout_ms);
  else if (param == "max_retries") number(c.max_retries);
  else if (param == "install_timeout_ms") number(c.install_timeout_ms);
  else if (param == "fragment_size") number(c.fragment_size);
  else if (param == "fragment_interval_ms") number(c.fragment_interval_ms);
  else if (param == "transport") {
    if (value == "DATAGRAM") c.transport = stm::Transport::DATAGRAM;
    else if (value == "STREAM") c.transport = stm::Transport::STREAM;
    else throw Error(Errc::PARSE_ERROR, "transport is DATAGRAM or STREAM");
  } else {
    throw Error(Errc::PARSE_ERROR, "unknown stm key '" + std::string(param) + "'");
  }
  try {
    stm::validate(c);
  } catch (const Error& e) {
    throw Error(Errc::PARSE_ERROR, e.detail());
  }
}

void Loader::check_references() {
  for (auto& n : s_.nodes) {
    if (n.kind == NodeKind::MOBILE) {
      for (const auto& [ran, loc] : n.ran_addrs) {
        require_node(ran, n.line, "mobile address");
        if (const auto* r = find(ran); r && r->kind != NodeKind::ACCESS_ROUTER)
          problem(Errc::PARSE_ERROR, "addr." + ran + " must name an access router", n.line);
      }
      if (!n.attach.empty()) {
        require_node(n.attach, n.line, "attach");
        if (!n.ran_addrs.count(n.attach)) problem(Errc::PARSE_ERROR, "no address for attach=" + n.attach, n.line);
      }
    }
    if (!n.firewall.empty()) {
      require_node(n.firewall, n.line, "firewall");
      if (const auto* f = find(n.firewall); f && f->kind != NodeKind::FIREWALL)
        problem(Errc::PARSE_ERROR, "firewall=" + n.firewall + " is not a firewall", n.line);
    }
    if (n.capability.stacks.empty())
      for (const auto& t : n.capability.tools) n.capability.stacks = n.capability.stacks | t.stacks;
    try {
      validate_profile(n.capability);
    } catch (const Error& e) {
      auto it = stack_lines_.find(n.name);
      problem(Errc::PARSE_ERROR, n.name + ": " + e.detail(), it == stack_lines_.end() ? n.line : it->second);
    }
  }
  for (const auto& l : s_.links) {
    require_node(l.a, l.line, "link");
    require_node(l.b, l.line, "link");
  }
  for (const auto& [f, line] : flow_lines_) {
    require_node(f.src, line, "flow src");
    require_node(f.dst, line, "flow dst");
    for (const auto& name : {f.src, f.dst})
      if (const auto* n = find(name); n && !n->addr && n->ran_addrs.empty())
        problem(Errc::PARSE_ERROR, "flow endpoint " + name + " has no address", line);
    if (f.stop != 0 && f.stop < f.start) problem(Errc::PARSE_ERROR, "flow stops before it starts", line);
  }
  for (const auto& [e, line] : event_lines_) {
    require_node(e.mobile, line, "handover mobile");
    require_node(e.from, line, "handover from");
    require_node(e.to, line, "handover to");
    if (const auto* m = find(e.mobile); m && (m->kind != NodeKind::MOBILE || !m->ran_addrs.count(e.to)))
      problem(Errc::PARSE_ERROR, "handover target " + e.to + " has no address for " + e.mobile, line);
  }
  for (const auto& [pair, line] : policy_refs_) {
    require_node(pair.first, line, "policy");
    require_node(pair.second, line, "policy");
  }
  for (const auto& [node, line] : stm_lines_) require_node(node, line, "stm");
}

Scenario load_scenario(std::string_view document) { return Loader{}.run(document); }

Scenario load_scenario_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::PARSE_ERROR, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  auto s = load_scenario(ss.str());
  if (s.name.empty()) {
    auto slash = path.find_last_of('/');
    auto base = path.substr(slash == std::string::npos ? 0 : slash + 1);
    s.name = base.substr(0, base.rfind('.'));
  }
  return s;
}

}  // namespace mobtool::sim
