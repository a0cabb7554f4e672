#include "mobtool/simnet.hpp"

#include <algorithm>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <random>
#include <set>
#include <tuple>

#include "mobtool/text.hpp"

namespace mobtool::sim {

namespace {

constexpr std::uint16_t kSipPort = 5060;
constexpr std::uint16_t kTriggerPort = 7000;
constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

enum class PacketKind : std::uint8_t { RTP, SIP, STM, TRIGGER, CTX_READY };

std::string_view to_string(PacketKind k) {
  switch (k) {
    case PacketKind::RTP: return "RTP";
    case PacketKind::SIP: return "SIP";
    case PacketKind::STM: return "STM";
    case PacketKind::TRIGGER: return "TRIGGER";
    case PacketKind::CTX_READY: return "CTX_READY";
  }
  return "?";
}

struct Packet {
  PacketKind kind = PacketKind::RTP;
  Proto proto = Proto::UDP;
  Locator src;
  Locator dst;
  Bytes payload;     // STM
  std::string flow;  // RTP
  std::uint64_t seq = 0;
  SimTime sent_at = 0;
  std::map<std::string, std::string> attrs;  // SIP, TRIGGER, CTX_READY
};

struct Event {
  SimTime t;
  std::uint64_t seq;
  std::function<void()> fn;
};

struct Later {
  bool operator()(const Event& a, const Event& b) const { return std::tie(a.t, a.seq) > std::tie(b.t, b.seq); }
};

struct InstalledRule {
  PinholeRule rule;
  std::string mobile;  // set for rules that came with a transferred context
};

struct LinkState {
  const LinkSpec* spec = nullptr;
  std::size_t a = 0;
  std::size_t b = 0;
  bool radio = false;
  bool up = true;
  std::uint64_t epoch = 0;
  std::uint64_t count = 0;
  SimTime last_arrival[2] = {0, 0};
};

std::string join_ports(const std::vector<PinholeRule>& rules) {
  std::string out;
  for (const auto& r : rules) {
    if (!out.empty()) out += ",";
    out += std::to_string(r.dst.port());
  }
  return out;
}

}  // namespace

struct Simulator::Impl {
  class NodeHost;

  struct Node {
    const NodeSpec* spec = nullptr;
    std::size_t index = 0;
    std::size_t attached = kNone;  // mobile: access router index
    std::vector<InstalledRule> rules;
    std::map<std::string, Locator> mobile_locators;  // firewall: mobile -> locator learned from its trigger
    bool sip_pending = false;                          // mobile: waiting for CTX_READY
    std::optional<std::uint64_t> ctx_timer;
    std::vector<std::shared_ptr<StubTool>> tools;
    std::unique_ptr<Toolbox> toolbox;
    std::unique_ptr<NodeHost> host;
    std::unique_ptr<stm::Stm> stm;
    ToolHandle stm_handle = 0;
  };

  struct Flow {
    const FlowSpec* spec = nullptr;
    std::size_t src = 0;
    std::size_t dst = 0;
    Locator dst_loc;
    std::uint64_t next_seq = 0;
  };

  Scenario scenario;
  std::mt19937_64 rng;
  Trace trace;
  std::vector<std::string> outcomes;
  std::size_t failures = 0;
  SimTime now = 0;
  std::uint64_t next_event = 0;
  std::priority_queue<Event, std::vector<Event>, Later> queue;
  std::set<std::uint64_t> cancelled;
  std::vector<Node> nodes;
  std::vector<LinkState> links;
  std::vector<Flow> flows;
  std::vector<std::vector<std::size_t>> next_hop;  // wired routing: [from][to] -> link index
  std::map<Locator, std::pair<std::size_t, std::size_t>> owners;  // address -> (owner, anchor)
  bool ran = false;

  Impl(Scenario s, std::uint64_t seed);
  ~Impl();

  // event loop
  std::uint64_t schedule(SimTime delay, std::function<void()> fn) {
    auto id = next_event++;
    queue.push(Event{now + delay, id, std::move(fn)});
    return id;
  }
  void cancel(std::uint64_t id) { cancelled.insert(id); }
  void record(const Node& n, std::string kind, Fields fields = {}) {
    trace.add(now, n.spec->name, std::move(kind), std::move(fields));
  }
  void run();

  // topology
  std::size_t index_of(std::string_view name) const {
    for (const auto& n : nodes)
      if (n.spec->name == name) return n.index;
    throw Error(Errc::UNKNOWN_NODE_REF, std::string(name));
  }
  std::size_t link_between(std::size_t a, std::size_t b) const {
    for (std::size_t i = 0; i < links.size(); ++i)
      if ((links[i].a == a && links[i].b == b) || (links[i].a == b && links[i].b == a)) return i;
    return kNone;
  }
  std::optional<Locator> locator_of(const Node& n) const;
  std::string name_of(const Locator& loc) const;
  void build_routes();

  // packets
  void send(std::size_t from, Packet p);
  void forward(std::size_t at, Packet p);
  void transmit(std::size_t link, std::size_t from, std::size_t to, Packet p);
  void arrive(std::size_t at, std::size_t link, std::uint64_t epoch, Packet p);
  void deliver(std::size_t at, Packet p);
  void drop(std::size_t at, const Packet& p, std::string_view reason);
  Fields describe(const Packet& p) const;

  // firewall
  void prune(Node& fw);
  bool admits(Node& fw, const Packet& p);
  bool add_rule(Node& fw, InstalledRule r);
  void observe_sip(Node& fw, const Packet& p);

  // behaviours
  void setup();
  void negotiate();
  void preset_pinholes();
  void start_flow(std::size_t f);
  void emit_rtp(std::size_t f);
  void handover(const HandoverEvent& e);
  void send_sip(std::size_t mobile);
  void on_trigger(std::size_t fw, const Packet& p);
  void on_report(std::size_t node, const Notification& n);
  void on_stm_state(std::size_t node, const stm::SessionInfo& info, stm::StmState previous);
  void send_stm(std::size_t node, const Locator& to, Bytes bytes);
};

class Simulator::Impl::NodeHost : public stm::StmHost {
 public:
  NodeHost(Simulator::Impl& sim, std::size_t node) : sim_(sim), node_(node) {}
  SimTime now() const override { return sim_.now; }
  void send(const Locator& to, Bytes bytes) override { sim_.send_stm(node_, to, std::move(bytes)); }
  TimerId schedule(SimTime delay, std::function<void()> fn) override { return sim_.schedule(delay, std::move(fn)); }
  void cancel(TimerId id) override { sim_.cancel(id); }
  void trace(std::string_view kind, const std::string& detail) override {
    sim_.record(sim_.nodes[node_], std::string(kind), parse_fields(detail));
  }

 private:
  Simulator::Impl& sim_;
  std::size_t node_;
};

Simulator::Impl::Impl(Scenario s, std::uint64_t seed) : scenario(std::move(s)), rng(seed) {}

Simulator::Impl::~Impl() {
  // STM instances deregister from their toolbox on destruction.
  for (auto& n : nodes) n.stm.reset();
}

std::optional<Locator> Simulator::Impl::locator_of(const Node& n) const {
  if (n.spec->kind != NodeKind::MOBILE) return n.spec->addr;
  if (n.attached == kNone) return std::nullopt;
  return n.spec->ran_addrs.at(nodes[n.attached].spec->name);
}

std::string Simulator::Impl::name_of(const Locator& loc) const {
  auto it = owners.find(loc.with_port(0));
  return it == owners.end() ? format_locator(loc) : nodes[it->second.first].spec->name;
}

void Simulator::Impl::build_routes() {
  const auto n = nodes.size();
  next_hop.assign(n, std::vector<std::size_t>(n, kNone));
  for (std::size_t src = 0; src < n; ++src) {
    std::vector<SimTime> dist(n, std::numeric_limits<SimTime>::max());
    std::vector<std::size_t> first(n, kNone);
    using Item = std::pair<SimTime, std::size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    dist[src] = 0;
    pq.push({0, src});
    while (!pq.empty()) {
      auto [d, u] = pq.top();
      pq.pop();
      if (d != dist[u]) continue;
      for (std::size_t li = 0; li < links.size(); ++li) {
        const auto& l = links[li];
        if (l.radio || (l.a != u && l.b != u)) continue;
        const auto v = l.a == u ? l.b : l.a;
        const auto nd = d + l.spec->latency;
        if (nd < dist[v]) {
          dist[v] = nd;
          first[v] = u == src ? li : first[u];
          pq.push({nd, v});
        }
      }
    }
    next_hop[src] = first;
  }
}

// ---------------------------------------------------------------------------
// Setup

void Simulator::Impl::setup() {
  for (std::size_t i = 0; i < scenario.nodes.size(); ++i) {
    Node n;
    n.spec = &scenario.nodes[i];
    n.index = i;
    nodes.push_back(std::move(n));
  }
  for (const auto& spec : scenario.links) {
    LinkState l;
    l.spec = &spec;
    l.a = index_of(spec.a);
    l.b = index_of(spec.b);
    const bool a_mobile = nodes[l.a].spec->kind == NodeKind::MOBILE;
    const bool b_mobile = nodes[l.b].spec->kind == NodeKind::MOBILE;
    l.radio = a_mobile || b_mobile;
    links.push_back(l);
  }
  for (auto& n : nodes) {
    if (n.spec->kind == NodeKind::MOBILE) {
      for (const auto& [ran, loc] : n.spec->ran_addrs) owners[loc.with_port(0)] = {n.index, index_of(ran)};
      if (!n.spec->attach.empty()) n.attached = index_of(n.spec->attach);
    } else if (n.spec->addr) {
      owners[n.spec->addr->with_port(0)] = {n.index, n.index};
    }
  }
  for (auto& l : links) {
    if (!l.radio) continue;
    const auto mobile = nodes[l.a].spec->kind == NodeKind::MOBILE ? l.a : l.b;
    const auto other = mobile == l.a ? l.b : l.a;
    l.up = nodes[mobile].attached == other;
  }
  build_routes();

  for (auto& n : nodes) {
    const bool hosts_stm = scenario.stm_enabled && n.spec->kind == NodeKind::FIREWALL && n.spec->addr;
    if (n.spec->kind != NodeKind::MOBILE && !hosts_stm) continue;
    n.toolbox = std::make_unique<Toolbox>();
    const auto idx = n.index;
    n.toolbox->set_report_hook([this, idx](ToolHandle, const Notification& note) { on_report(idx, note); });
    for (const auto& d : n.spec->capability.tools) {
      auto tool = std::make_shared<StubTool>(d);
      auto reg = n.toolbox->register_tool(d, tool);
      n.toolbox->set_mode(reg.handle, ModeCommand::INIT);
      n.toolbox->set_mode(reg.handle, ModeCommand::RUN);
      n.tools.push_back(tool);
    }
    if (!hosts_stm) continue;
    n.host = std::make_unique<NodeHost>(*this, idx);
    n.stm = std::make_unique<stm::Stm>(NodeId{n.spec->name, 0}, *n.host);
    n.stm_handle = n.stm->attach(*n.toolbox);
    n.stm->init(scenario.stm_for(n.spec->name));
    n.toolbox->set_mode(n.stm_handle, ModeCommand::RUN);
    n.stm->set_state_observer(
        [this, idx](const stm::SessionInfo& info, stm::StmState previous) { on_stm_state(idx, info, previous); });

    stm::ContextEndpoint fw;
    fw.ctype = kFirewallState;
    fw.provider = [this, idx](const NodeId& mobile) -> std::optional<ContextBlock> {
      const auto* m = scenario.node(mobile.name);
      if (!m) return std::nullopt;
      prune(nodes[idx]);
      std::vector<PinholeRule> rules;
      for (const auto& r : nodes[idx].rules)
        for (const auto& [ran, loc] : m->ran_addrs)
          if (r.rule.dst.same_address(loc)) rules.push_back(r.rule);
      if (rules.empty()) return std::nullopt;
      return ContextBlock{kFirewallState, kBlockMandatory, encode_pinholes(rules)};
    };
    fw.consumer = [this, idx](const NodeId& mobile, const ContextBlock& block) {
      auto& self = nodes[idx];
      auto rules = decode_pinholes(block.payload);
      auto known = self.mobile_locators.find(mobile.name);
      for (auto& r : rules) {
        if (known != self.mobile_locators.end()) r.dst = known->second.with_port(r.dst.port());
        add_rule(self, InstalledRule{r, mobile.name});
      }
      record(self, "PINHOLES_INSTALLED",
             {{"mobile", mobile.name}, {"count", std::to_string(rules.size())}, {"ports", join_ports(rules)}});
      return true;
    };
    fw.uninstall = [this, idx](const NodeId& mobile, ContextTypeId) {
      auto& self = nodes[idx];
      const auto before = self.rules.size();
      std::erase_if(self.rules, [&](const InstalledRule& r) { return r.mobile == mobile.name; });
      record(self, "PINHOLES_REMOVED", {{"mobile", mobile.name}, {"count", std::to_string(before - self.rules.size())}});
    };
    n.stm->register_context_endpoint(std::move(fw));
  }
  for (auto& a : nodes) {
    if (!a.stm) continue;
    for (auto& b : nodes)
      if (b.stm && &a != &b) a.stm->set_security_association(NodeId{b.spec->name, 0}, true);
  }

  for (std::size_t i = 0; i < scenario.flows.size(); ++i) {
    Flow f;
    f.spec = &scenario.flows[i];
    f.src = index_of(f.spec->src);
    f.dst = index_of(f.spec->dst);
    if (auto loc = locator_of(nodes[f.dst])) f.dst_loc = loc->with_port(f.spec->port);
    flows.push_back(f);
  }
}

void Simulator::Impl::negotiate() {
  const auto& p = scenario.policy;
  auto node_spec = [&](const std::string& name) -> const NodeSpec& { return *scenario.node(name); };
  if (p.negotiate) {
    const auto& a = node_spec(p.negotiate->first);
    const auto& b = node_spec(p.negotiate->second);
    auto& rec_node = nodes[index_of(a.name)];
    try {
      auto result = negotiate_peer_protocol(a.capability, b.capability, p.policy);
      const auto& d = result.chosen;
      Fields f{{"peer", b.name}, {"chosen", std::string(to_string(d.tool))}, {"version", to_string(d.version)}};
      record(rec_node, "NEGOTIATE", std::move(f));
      for (const auto& step : result.rationale)
        record(rec_node, "RATIONALE", {{"surviving", std::to_string(step.surviving)}, {"step", step.criterion}});
      auto text = format_selection(result);
      for (auto line : text::split(text, '\n'))
        if (!line.empty()) outcomes.emplace_back(line);
    } catch (const Error& e) {
      record(rec_node, "NEGOTIATE_FAILED", {{"peer", b.name}, {"error", std::string(to_string(e.code()))}});
      outcomes.push_back("negotiation failed: " + std::string(to_string(e.code())));
      ++failures;
    }
  }
  if (p.features) {
    const auto& client = node_spec(p.features->first);
    const auto& provider = node_spec(p.features->second);
    auto& rec_node = nodes[index_of(client.name)];
    try {
      auto agreement = negotiate_provider_features(p.requests, provider.offered);
      std::string agreed;
      for (auto f : agreement.agreed.items()) agreed += (agreed.empty() ? "" : ",") + std::string(to_string(f));
      std::string rejected;
      for (const auto& [f, why] : agreement.rejected)
        rejected += (rejected.empty() ? "" : ",") + std::string(to_string(f));
      record(rec_node, "FEATURES", {{"provider", provider.name}, {"agreed", agreed}, {"rejected", rejected}});
      outcomes.push_back("agreed=" + agreed);
      outcomes.push_back("rejected=" + rejected);
    } catch (const Error& e) {
      record(rec_node, "FEATURES_FAILED",
             {{"provider", provider.name}, {"error", std::string(to_string(e.code()))}, {"missing", e.detail()}});
      outcomes.push_back("feature negotiation failed: " + std::string(to_string(e.code())) + " " + e.detail());
      ++failures;
    }
  }
  if (p.plan) {
    const auto& client = node_spec(p.plan->first);
    const auto& access = node_spec(p.plan->second);
    auto& rec_node = nodes[index_of(client.name)];
    ClientNeeds needs;
    needs.needs = client.needs;
    for (const auto& t : client.capability.tools) needs.tools.insert(t.tool);
    auto plan = plan_access_tools(needs, access.advertised);
    for (const auto& a : plan.activations) {
      Fields f{{"access", access.name}, {"service", std::string(to_string(a.service))}};
      if (a.tool) f.emplace_back("tool", std::string(to_string(*a.tool)));
      for (const auto& [k, v] : a.params) f.emplace_back(k, v);
      record(rec_node, "ACTIVATE", std::move(f));
    }
    for (auto u : plan.unmet) record(rec_node, "UNMET", {{"access", access.name}, {"service", std::string(to_string(u))}});
    auto text = format_plan(plan);
    for (auto line : text::split(text, '\n'))
      if (!line.empty()) outcomes.emplace_back(line);
  }
}

void Simulator::Impl::preset_pinholes() {
  for (const auto& f : flows) {
    const auto& dst = nodes[f.dst];
    auto target = locator_of(dst);
    if (!target) continue;
    auto owner = owners.find(target->with_port(0));
    if (owner == owners.end()) continue;
    const auto anchor = owner->second.second;
    auto src_loc = locator_of(nodes[f.src]);
    std::size_t at = f.src;
    if (nodes[at].spec->kind == NodeKind::MOBILE) at = nodes[at].attached;
    std::set<std::size_t> visited;
    while (at != kNone && visited.insert(at).second) {
      auto& n = nodes[at];
      if (n.spec->kind == NodeKind::FIREWALL) {
        PinholeRule r;
        r.src = src_loc ? src_loc->with_port(0) : Locator{};
        r.dst = f.dst_loc;
        r.expiry = scenario.pinhole_expiry_ms ? now + scenario.pinhole_expiry_ms : 0;
        if (add_rule(n, InstalledRule{r, ""}))
          record(n, "FW_PRESET", {{"flow", f.spec->name}, {"dst", format_locator(r.dst)}});
      }
      if (at == anchor) break;
      const auto li = next_hop[at][anchor];
      if (li == kNone) break;
      at = links[li].a == at ? links[li].b : links[li].a;
    }
  }
}

// ---------------------------------------------------------------------------
// Packets

Fields Simulator::Impl::describe(const Packet& p) const {
  Fields f{{"msg", std::string(to_string(p.kind))}};
  switch (p.kind) {
    case PacketKind::RTP:
      f.emplace_back("flow", p.flow);
      f.emplace_back("seq", std::to_string(p.seq));
      break;
    case PacketKind::SIP: f.emplace_back("method", p.attrs.at("method")); break;
    case PacketKind::STM:
      try {
        auto m = wire::parse(p.payload);
        f.emplace_back("type", std::string(wire::to_string(m.type)));
      } catch (const Error&) {
        f.emplace_back("type", "?");
      }
      break;
    default: break;
  }
  f.emplace_back("dst", format_locator(p.dst));
  return f;
}

void Simulator::Impl::drop(std::size_t at, const Packet& p, std::string_view reason) {
  auto f = describe(p);
  f.insert(f.begin(), {"reason", std::string(reason)});
  record(nodes[at], "DROP", std::move(f));
}

void Simulator::Impl::send(std::size_t from, Packet p) {
  p.sent_at = now;
  forward(from, std::move(p));
}

void Simulator::Impl::forward(std::size_t at, Packet p) {
  auto owner = owners.find(p.dst.with_port(0));
  if (owner == owners.end()) {
    drop(at, p, "NO_ROUTE");
    return;
  }
  const auto [dest, anchor] = owner->second;
  if (at == dest) {
    deliver(at, std::move(p));
    return;
  }
  auto& here = nodes[at];
  std::size_t li = kNone;
  if (here.spec->kind == NodeKind::MOBILE) {
    if (here.attached != kNone) li = link_between(at, here.attached);
  } else if (at == anchor) {
    li = link_between(at, dest);
    if (li != kNone && !links[li].up) li = kNone;
  } else {
    li = next_hop[at][anchor];
  }
  if (li == kNone) {
    drop(at, p, "NO_ROUTE");
    return;
  }
  const auto to = links[li].a == at ? links[li].b : links[li].a;
  transmit(li, at, to, std::move(p));
}

void Simulator::Impl::transmit(std::size_t li, std::size_t from, std::size_t to, Packet p) {
  auto& l = links[li];
  const auto index = l.count++;
  if (l.spec->drops.count(index)) {
    auto f = describe(p);
    f.insert(f.begin(), {"reason", "LINK_LOSS"});
    f.insert(f.begin() + 1, {"link", l.spec->a + "-" + l.spec->b});
    f.insert(f.begin() + 2, {"index", std::to_string(index)});
    record(nodes[from], "DROP", std::move(f));
    return;
  }
  SimTime delay = l.spec->latency;
  if (scenario.jitter_ms > 0) delay += std::uniform_int_distribution<SimTime>(0, scenario.jitter_ms)(rng);
  auto& last = l.last_arrival[from == l.a ? 0 : 1];
  delay = std::max(delay, last - now);  // keep the link FIFO
  last = now + delay;
  const auto epoch = l.epoch;
  schedule(delay, [this, to, li, epoch, p = std::move(p)]() mutable { arrive(to, li, epoch, std::move(p)); });
}

void Simulator::Impl::arrive(std::size_t at, std::size_t li, std::uint64_t epoch, Packet p) {
  if (links[li].epoch != epoch) {
    drop(at, p, "LINK_DOWN");
    return;
  }
  auto& n = nodes[at];
  if (n.spec->kind == NodeKind::FIREWALL) {
    if (p.kind == PacketKind::RTP && !admits(n, p)) {
      drop(at, p, "FIREWALL");
      return;
    }
    if (p.kind == PacketKind::SIP) observe_sip(n, p);
  }
  forward(at, std::move(p));
}

void Simulator::Impl::deliver(std::size_t at, Packet p) {
  auto& n = nodes[at];
  switch (p.kind) {
    case PacketKind::RTP:
      record(n, "RTP_RECV",
             {{"flow", p.flow}, {"seq", std::to_string(p.seq)}, {"sent", std::to_string(p.sent_at)},
              {"dst", format_locator(p.dst)}});
      return;
    case PacketKind::STM: {
      if (!n.stm) {
        drop(at, p, "NO_LISTENER");
        return;
      }
      auto f = describe(p);
      f.erase(f.begin());
      f.pop_back();
      f.emplace_back("from", name_of(p.src));
      try {
        f.emplace_back("id", stm::to_string(stm::TransferId{wire::parse(p.payload).transfer_id}));
      } catch (const Error&) {
      }
      record(n, "STM_RECV", std::move(f));
      n.stm->handle_bytes(p.payload, p.src);
      return;
    }
    case PacketKind::TRIGGER: on_trigger(at, p); return;
    case PacketKind::CTX_READY:
      record(n, "CTX_READY", {{"from", name_of(p.src)}});
      if (n.sip_pending) {
        if (n.ctx_timer) cancel(*n.ctx_timer);
        n.ctx_timer.reset();
        send_sip(at);
      }
      return;
    case PacketKind::SIP: {
      const auto method = p.attrs.at("method");
      record(n, "SIP_RECV", {{"method", method}, {"from", name_of(p.src)}});
      if (method != "REINVITE") return;
      const auto flow_name = p.attrs.at("flow");
      const auto media = parse_locator(p.attrs.at("media"));
      schedule(scenario.sip_processing_ms, [this, at, flow_name, media] {
        for (auto& f : flows) {
          if (f.spec->name != flow_name || f.src != at) continue;
          f.dst_loc = media;
          record(nodes[at], "REDIRECT", {{"flow", flow_name}, {"dst", format_locator(media)}});
        }
      });
      return;
    }
  }
}

// ---------------------------------------------------------------------------
// Firewalls

void Simulator::Impl::prune(Node& fw) {
  auto expired = [&](const InstalledRule& r) { return r.rule.expiry != 0 && now >= r.rule.expiry; };
  for (const auto& r : fw.rules)
    if (expired(r)) record(fw, "PINHOLE_EXPIRED", {{"dst", format_locator(r.rule.dst)}});
  std::erase_if(fw.rules, expired);
}

bool Simulator::Impl::admits(Node& fw, const Packet& p) {
  prune(fw);
  PacketHeader h{p.proto, p.src, p.dst};
  return std::any_of(fw.rules.begin(), fw.rules.end(), [&](const InstalledRule& r) { return pinhole_matches(r.rule, h); });
}

bool Simulator::Impl::add_rule(Node& fw, InstalledRule r) {
  for (const auto& existing : fw.rules)
    if (existing.rule.proto == r.rule.proto && existing.rule.src == r.rule.src && existing.rule.dst == r.rule.dst)
      return false;
  fw.rules.push_back(std::move(r));
  return true;
}

// The slow path: an application-layer gateway that learns media ports from
// signaling it forwards and opens them after a processing delay.
void Simulator::Impl::observe_sip(Node& fw, const Packet& p) {
  if (p.attrs.at("method") != "REINVITE") return;
  PinholeRule r;
  r.src = p.dst.with_port(0);
  r.dst = parse_locator(p.attrs.at("media"));
  const auto idx = fw.index;
  schedule(scenario.alg_delay_ms, [this, idx, r]() mutable {
    auto& n = nodes[idx];
    r.expiry = scenario.pinhole_expiry_ms ? now + scenario.pinhole_expiry_ms : 0;
    if (add_rule(n, InstalledRule{r, ""})) record(n, "PINHOLE_ALG", {{"dst", format_locator(r.dst)}});
  });
}

// ---------------------------------------------------------------------------
// Flows, handover, signaling

void Simulator::Impl::start_flow(std::size_t fi) {
  const auto& spec = *flows[fi].spec;
  queue.push(Event{spec.start, next_event++, [this, fi] { emit_rtp(fi); }});
}

void Simulator::Impl::emit_rtp(std::size_t fi) {
  auto& f = flows[fi];
  if (f.spec->stop != 0 && now >= f.spec->stop) return;
  auto src = locator_of(nodes[f.src]);
  if (src) {
    Packet p;
    p.kind = PacketKind::RTP;
    p.src = src->with_port(f.spec->port);
    p.dst = f.dst_loc;
    p.flow = f.spec->name;
    p.seq = f.next_seq++;
    record(nodes[f.src], "RTP_SEND",
           {{"flow", f.spec->name}, {"seq", std::to_string(p.seq)}, {"to", f.spec->dst}, {"dst", format_locator(p.dst)}});
    send(f.src, std::move(p));
  }
  schedule(f.spec->interval, [this, fi] { emit_rtp(fi); });
}

void Simulator::Impl::handover(const HandoverEvent& e) {
  const auto mi = index_of(e.mobile);
  auto& m = nodes[mi];
  const auto from = index_of(e.from);
  const auto to = index_of(e.to);
  if (m.attached != kNone) {
    auto li = link_between(mi, m.attached);
    if (li != kNone) {
      links[li].up = false;
      ++links[li].epoch;
    }
  }
  m.attached = to;
  if (auto li = link_between(mi, to); li != kNone) links[li].up = true;
  const auto loc = *locator_of(m);
  record(m, "HANDOVER", {{"from", e.from}, {"to", e.to}, {"locator", format_locator(loc)}});

  if (m.toolbox) {
    Trigger t;
    t.channel = TriggerChannel::common();
    t.kind = TriggerKind::HANDOVER_DONE;
    auto text = format_locator(loc);
    t.payload.assign(text.begin(), text.end());
    t.ts = now;
    const auto delivered = m.toolbox->publish_trigger(t);
    record(m, "TRIGGER_PUBLISH", {{"trigger", "HANDOVER_DONE"}, {"channel", to_string(t.channel)}, {"delivered", std::to_string(delivered)}});
    Notification note;
    note.header = NotificationHeader{"", notify::LOCATOR_CHANGE, now};
    note.body = t.payload;
    for (const auto& tool : m.tools) {
      auto h = m.toolbox->find(tool->descriptor().tool);
      if (!h) continue;
      note.header.tool = std::string(to_string(tool->descriptor().tool));
      m.toolbox->notify_change(*h, note);
    }
  }

  const auto& fw_name = nodes[to].spec->firewall;
  const Node* fw = fw_name.empty() ? nullptr : &nodes[index_of(fw_name)];
  if (scenario.stm_enabled && fw && fw->stm) {
    Packet p;
    p.kind = PacketKind::TRIGGER;
    p.src = loc.with_port(kTriggerPort);
    p.dst = fw->spec->addr->with_port(kTriggerPort);
    p.attrs["mobile"] = m.spec->name;
    const auto& prev = nodes[from].spec->addr;
    p.attrs["prev"] = prev ? format_locator(*prev) : e.from;
    p.attrs["locator"] = format_locator(loc);
    record(m, "TRIGGER_SEND", {{"to", fw->spec->name}, {"prev", p.attrs["prev"]}});
    m.sip_pending = true;
    if (m.ctx_timer) cancel(*m.ctx_timer);
    m.ctx_timer = schedule(scenario.ctx_ready_timeout_ms, [this, mi] {
      auto& self = nodes[mi];
      self.ctx_timer.reset();
      if (!self.sip_pending) return;
      record(self, "CTX_READY_TIMEOUT");
      send_sip(mi);
    });
    send(mi, std::move(p));
    return;
  }
  send_sip(mi);
}

void Simulator::Impl::send_sip(std::size_t mi) {
  auto& m = nodes[mi];
  m.sip_pending = false;
  auto loc = locator_of(m);
  if (!loc) return;
  for (const auto& f : flows) {
    if (f.dst != mi) continue;
    auto cn = locator_of(nodes[f.src]);
    if (!cn) continue;
    Packet p;
    p.kind = PacketKind::SIP;
    p.src = loc->with_port(kSipPort);
    p.dst = cn->with_port(kSipPort);
    p.attrs["method"] = "REINVITE";
    p.attrs["flow"] = f.spec->name;
    p.attrs["media"] = format_locator(loc->with_port(f.spec->port));
    record(m, "SIP_REINVITE", {{"target", f.spec->src}, {"flow", f.spec->name}, {"media", p.attrs["media"]}});
    send(mi, std::move(p));
  }
  for (const auto& n : nodes) {
    if (n.spec->kind != NodeKind::SIP_SERVER || !n.spec->addr) continue;
    Packet p;
    p.kind = PacketKind::SIP;
    p.src = loc->with_port(kSipPort);
    p.dst = n.spec->addr->with_port(kSipPort);
    p.attrs["method"] = "REGISTER";
    p.attrs["contact"] = format_locator(*loc);
    record(m, "SIP_REGISTER", {{"target", n.spec->name}, {"contact", p.attrs["contact"]}});
    send(mi, std::move(p));
    break;
  }
}

void Simulator::Impl::on_trigger(std::size_t fi, const Packet& p) {
  auto& fw = nodes[fi];
  const auto mobile = p.attrs.at("mobile");
  const auto prev = p.attrs.at("prev");
  record(fw, "TRIGGER", {{"trigger", "HANDOVER_DONE"}, {"mobile", mobile}, {"prev", prev}});
  fw.mobile_locators[mobile] = parse_locator(p.attrs.at("locator"));

  const Node* old_fw = nullptr;
  std::optional<Locator> prev_loc;
  try {
    prev_loc = parse_locator(prev);
    auto owner = owners.find(prev_loc->with_port(0));
    if (owner != owners.end()) {
      const auto& fw_name = nodes[owner->second.first].spec->firewall;
      if (!fw_name.empty()) old_fw = &nodes[index_of(fw_name)];
    }
  } catch (const Error&) {
  }
  if (!old_fw || !old_fw->stm || old_fw == &fw) {
    record(fw, "TRIGGER_IGNORED", {{"reason", "no previous firewall"}});
    return;
  }

  Trigger t;
  t.channel = TriggerChannel::common();
  t.kind = TriggerKind::HANDOVER_DONE;
  t.payload.assign(prev.begin(), prev.end());
  t.ts = now;
  fw.toolbox->publish_trigger(t);

  stm::TransferRequest req;
  req.peer = stm::Peer{NodeId{old_fw->spec->name, 0},
                       old_fw->spec->addr->with_port(scenario.stm_for(old_fw->spec->name).listen_port)};
  req.mobile = NodeId{mobile, 0};
  req.types = {kFirewallState};
  req.expedited = true;
  req.previous_access = prev_loc;
  Notification note;
  note.direction = NotificationDirection::TOOLBOX_TO_TOOL;
  note.header = NotificationHeader{"STM", notify::STM_PULL, now};
  note.body = stm::encode_request_body(req);
  try {
    fw.toolbox->notify_change(fw.stm_handle, note);
  } catch (const Error& e) {
    record(fw, "STM_REFUSED", {{"error", std::string(to_string(e.code()))}});
  }
}

void Simulator::Impl::on_report(std::size_t ni, const Notification& n) {
  auto& node = nodes[ni];
  Fields f{{"report", notify_kind_name(n.header.kind)}};
  if (n.header.kind == notify::STM_ACCEPT) {
    auto a = stm::decode_accept_report(n.body);
    f.emplace_back("id", stm::to_string(a.id));
    f.emplace_back("mask", std::to_string(a.accepted));
    record(node, "MTI_REPORT", std::move(f));
    // The toolbox's judgment on a plain ACCEPT: start what the peer can
    // serve, reject when it can serve nothing. Deferred so an expedited
    // exchange can finish first.
    const auto id = a.id;
    const auto mask = a.accepted;
    schedule(0, [this, ni, id, mask] {
      auto& self = nodes[ni];
      if (!self.stm || self.stm->session(id).state != stm::StmState::ACCEPTED) return;
      Notification cmd;
      cmd.direction = NotificationDirection::TOOLBOX_TO_TOOL;
      cmd.header = NotificationHeader{"STM", mask ? notify::STM_START : notify::STM_ABORT, now};
      cmd.body = stm::encode_id_body(id);
      self.toolbox->notify_change(self.stm_handle, cmd);
    });
    return;
  }
  if (n.header.kind == notify::STM_ERROR) {
    auto e = stm::decode_error_report(n.body);
    f.emplace_back("id", stm::to_string(e.id));
    f.emplace_back("code", std::string(wire::to_string(e.code)));
  } else if (n.header.kind == notify::STM_ACK) {
    f.emplace_back("id", stm::to_string(stm::decode_id_body(n.body)));
  }
  record(node, "MTI_REPORT", std::move(f));
}

void Simulator::Impl::on_stm_state(std::size_t ni, const stm::SessionInfo& info, stm::StmState) {
  if (info.state != stm::StmState::COMPLETED || info.role != stm::Role::INITIATOR ||
      info.direction != stm::Direction::PULL)
    return;
  auto& fw = nodes[ni];
  auto it = fw.mobile_locators.find(info.mobile.name);
  if (it == fw.mobile_locators.end()) return;
  Packet p;
  p.kind = PacketKind::CTX_READY;
  p.src = fw.spec->addr->with_port(kTriggerPort);
  p.dst = it->second.with_port(kTriggerPort);
  record(fw, "CTX_READY_SEND", {{"to", info.mobile.name}});
  send(ni, std::move(p));
}

void Simulator::Impl::send_stm(std::size_t ni, const Locator& to, Bytes bytes) {
  auto& n = nodes[ni];
  Packet p;
  p.kind = PacketKind::STM;
  p.src = n.spec->addr->with_port(n.stm->config().listen_port);
  p.dst = to;
  p.payload = std::move(bytes);
  auto f = describe(p);
  f.erase(f.begin());
  f.pop_back();
  f.emplace_back("to", name_of(to));
  try {
    auto m = wire::parse(p.payload);
    f.emplace_back("id", stm::to_string(stm::TransferId{m.transfer_id}));
    f.emplace_back("bytes", std::to_string(p.payload.size()));
  } catch (const Error&) {
  }
  record(n, "STM_SEND", std::move(f));
  send(ni, std::move(p));
}

void Simulator::Impl::run() {
  if (ran) throw Error(Errc::BAD_STATE, "simulator already ran");
  ran = true;
  setup();
  negotiate();
  preset_pinholes();
  for (std::size_t i = 0; i < flows.size(); ++i) start_flow(i);
  for (const auto& e : scenario.handovers) queue.push(Event{e.at, next_event++, [this, &e] { handover(e); }});

  while (!queue.empty()) {
    auto ev = queue.top();
    queue.pop();
    if (cancelled.erase(ev.seq)) continue;
    if (ev.t > scenario.time_limit_ms) {
      now = scenario.time_limit_ms;
      trace.add(now, "-", "TIME_LIMIT", {{"pending", std::to_string(queue.size() + 1)}});
      throw Error(Errc::TIME_LIMIT_EXCEEDED, "events remain after " + std::to_string(scenario.time_limit_ms) + " ms");
    }
    now = ev.t;
    ev.fn();
  }
}

// ---------------------------------------------------------------------------

Simulator::Simulator(Scenario scenario, std::uint64_t seed) : impl_(std::make_unique<Impl>(std::move(scenario), seed)) {}
Simulator::~Simulator() = default;

void Simulator::run() { impl_->run(); }
const Trace& Simulator::trace() const { return impl_->trace; }
const std::vector<std::string>& Simulator::outcomes() const { return impl_->outcomes; }
std::size_t Simulator::failures() const { return impl_->failures; }
SimTime Simulator::now() const { return impl_->now; }
const Scenario& Simulator::scenario() const { return impl_->scenario; }

const stm::Stm* Simulator::stm(std::string_view node) const {
  for (const auto& n : impl_->nodes)
    if (n.spec->name == node) return n.stm.get();
  return nullptr;
}

const Toolbox* Simulator::toolbox(std::string_view node) const {
  for (const auto& n : impl_->nodes)
    if (n.spec->name == node) return n.toolbox.get();
  return nullptr;
}

std::vector<PinholeRule> Simulator::pinholes(std::string_view node) const {
  std::vector<PinholeRule> out;
  for (const auto& n : impl_->nodes)
    if (n.spec->name == node)
      for (const auto& r : n.rules) out.push_back(r.rule);
  return out;
}

RunResult run(const Scenario& scenario, std::uint64_t seed) {
  Simulator sim(scenario, seed);
  sim.run();
  return RunResult{sim.trace(), sim.metrics(), sim.outcomes(), sim.failures()};
}

// ---------------------------------------------------------------------------

Metrics compute_metrics(const Trace& trace) {
  Metrics m;
  const auto& rs = trace.records();
  std::optional<std::size_t> handover;
  for (std::size_t i = 0; i < rs.size(); ++i)
    if (rs[i].kind == "HANDOVER") {
      handover = i;
      break;
    }
  std::optional<SimTime> install;
  if (handover)
    for (std::size_t i = *handover; i < rs.size(); ++i)
      if (rs[i].kind == "PINHOLES_INSTALLED" || rs[i].kind == "PINHOLE_ALG") {
        install = rs[i].ts;
        break;
      }

  std::set<std::string> flows_to_mobile;
  std::map<std::string, SimTime> first_after;
  for (std::size_t i = 0; i < rs.size(); ++i) {
    const auto& r = rs[i];
    if (r.kind == "RTP_SEND") {
      ++m.rtp_sent;
      if (handover && r.get("to") == rs[*handover].node) flows_to_mobile.insert(r.get("flow"));
    } else if (r.kind == "DROP" && r.get("msg") == "RTP") {
      ++m.rtp_dropped_total;
      if (handover && r.get("reason") == "FIREWALL" && i > *handover && r.ts >= install.value_or(rs[*handover].ts))
        ++m.rtp_dropped_after_install;
    } else if (r.kind == "STM_SEND") {
      ++m.stm_messages;
    } else if (r.kind == "RTP_RECV" && handover && i > *handover && r.node == rs[*handover].node) {
      first_after.emplace(r.get("flow"), r.ts);
    }
  }
  if (handover) {
    const auto t0 = rs[*handover].ts;
    for (const auto& f : flows_to_mobile) {
      auto it = first_after.find(f);
      if (it == first_after.end()) {
        m.restore_time_ms = -1;
        break;
      }
      m.restore_time_ms = std::max<std::int64_t>(m.restore_time_ms, it->second - t0);
    }
  }
  return m;
}

std::string format_metrics(const Metrics& m) {
  return "rtp_sent=" + std::to_string(m.rtp_sent) + " rtp_dropped_total=" + std::to_string(m.rtp_dropped_total) +
         " rtp_dropped_after_install=" + std::to_string(m.rtp_dropped_after_install) +
         " restore_time_ms=" + std::to_string(m.restore_time_ms) + " stm_messages=" + std::to_string(m.stm_messages);
}

}  // namespace mobtool::sim
