#include "gfm/scenario.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <initializer_list>
#include <sstream>

namespace gfm {
namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& ptr, const std::string& what) {
  throw SchemaError(ptr, what);
}

void require_object(const json& j, const std::string& ptr) {
  if (!j.is_object()) fail(ptr, "expected an object");
}

void require_array(const json& j, const std::string& ptr) {
  if (!j.is_array()) fail(ptr, "expected an array");
}

/// Strictness lives here: any key outside `allowed` is a schema violation.
void check_keys(const json& j, const std::string& ptr,
                std::initializer_list<const char*> allowed) {
  require_object(j, ptr);
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) {
          return key == a;
        }) == allowed.end()) {
      fail(ptr + "/" + key, "unknown key");
    }
  }
}

double get_number(const json& j, const std::string& ptr, const char* key,
                  std::optional<double> fallback = std::nullopt) {
  if (!j.contains(key)) {
    if (fallback) return *fallback;
    fail(ptr + "/" + key, "missing required number");
  }
  const json& v = j.at(key);
  if (!v.is_number()) fail(ptr + "/" + key, "expected a number");
  return v.get<double>();
}

int get_int(const json& j, const std::string& ptr, const char* key,
            std::optional<int> fallback = std::nullopt) {
  if (!j.contains(key)) {
    if (fallback) return *fallback;
    fail(ptr + "/" + key, "missing required integer");
  }
  const json& v = j.at(key);
  if (!v.is_number_integer()) fail(ptr + "/" + key, "expected an integer");
  return v.get<int>();
}

std::string get_string(const json& j, const std::string& ptr, const char* key,
                       std::optional<std::string> fallback = std::nullopt) {
  if (!j.contains(key)) {
    if (fallback) return *fallback;
    fail(ptr + "/" + key, "missing required string");
  }
  const json& v = j.at(key);
  if (!v.is_string()) fail(ptr + "/" + key, "expected a string");
  return v.get<std::string>();
}

bool get_bool(const json& j, const std::string& ptr, const char* key,
              bool fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_boolean()) fail(ptr + "/" + key, "expected a boolean");
  return v.get<bool>();
}

WeightKind parse_channel(const std::string& s, const std::string& ptr) {
  if (s == "a") return WeightKind::A;
  if (s == "b") return WeightKind::B;
  if (s == "e") return WeightKind::E;
  if (s == "f") return WeightKind::F;
  fail(ptr, "channel must be one of a, b, e, f");
}

Scenario parse(const json& root) {
  check_keys(root, "", {"name", "network", "inverters", "graph", "controller",
                        "events", "sim", "agents"});
  Scenario s;
  if (root.contains("name")) s.name = get_string(root, "", "name");

  if (!root.contains("network")) fail("/network", "missing required section");
  const json& net = root.at("network");
  check_keys(net, "/network",
             {"v_nom_v", "omega_nom_rad_s", "buses", "lines", "loads"});
  s.v_nom = get_number(net, "/network", "v_nom_v");
  s.omega_nom = get_number(net, "/network", "omega_nom_rad_s",
                           2.0 * M_PI * 60.0);
  s.n_buses = get_int(net, "/network", "buses");

  if (net.contains("lines")) {
    const json& lines = net.at("lines");
    require_array(lines, "/network/lines");
    for (size_t k = 0; k < lines.size(); ++k) {
      std::string ptr = "/network/lines/" + std::to_string(k);
      const json& jl = lines[k];
      check_keys(jl, ptr, {"from", "to", "r_ohm", "x_ohm"});
      Line l;
      l.from = get_int(jl, ptr, "from");
      l.to = get_int(jl, ptr, "to");
      l.z = cplx(get_number(jl, ptr, "r_ohm", 0.0),
                 get_number(jl, ptr, "x_ohm"));
      s.lines.push_back(l);
    }
  }
  if (net.contains("loads")) {
    const json& loads = net.at("loads");
    require_array(loads, "/network/loads");
    for (size_t k = 0; k < loads.size(); ++k) {
      std::string ptr = "/network/loads/" + std::to_string(k);
      const json& jl = loads[k];
      check_keys(jl, ptr, {"bus", "p_w", "q_var"});
      LoadSpec l;
      l.bus = get_int(jl, ptr, "bus");
      l.p_w = get_number(jl, ptr, "p_w", 0.0);
      l.q_var = get_number(jl, ptr, "q_var", 0.0);
      s.loads.push_back(l);
    }
  }

  if (!root.contains("inverters"))
    fail("/inverters", "missing required section");
  const json& invs = root.at("inverters");
  require_array(invs, "/inverters");
  if (invs.empty()) fail("/inverters", "at least one inverter is required");
  for (size_t k = 0; k < invs.size(); ++k) {
    std::string ptr = "/inverters/" + std::to_string(k);
    const json& ji = invs[k];
    check_keys(ji, ptr,
               {"id", "kind", "bus", "coupling_r_ohm", "coupling_x_ohm",
                "s_max_va", "p_set_w", "q_set_var", "m_pu", "n_pu",
                "m_omega_s", "tau_v_s", "k_i_s", "kappa_i_s", "xi",
                "e_capacity_ws"});
    InverterParams p;
    p.id = get_string(ji, ptr, "id");
    std::string kind = get_string(ji, ptr, "kind");
    if (kind == "droop") {
      p.kind = InverterKind::Droop;
    } else if (kind == "vsm") {
      p.kind = InverterKind::Vsm;
    } else {
      fail(ptr + "/kind", "kind must be droop or vsm");
    }
    p.s_max = get_number(ji, ptr, "s_max_va");
    p.p_set = get_number(ji, ptr, "p_set_w");
    p.q_set = get_number(ji, ptr, "q_set_var");
    p.v_nom = s.v_nom;
    p.omega_nom = s.omega_nom;
    p.m_pu = get_number(ji, ptr, "m_pu");
    p.n_pu = get_number(ji, ptr, "n_pu");
    p.m_omega = get_number(ji, ptr, "m_omega_s",
                           p.kind == InverterKind::Vsm ? std::nullopt
                                                       : std::optional(0.0));
    p.tau_v = get_number(ji, ptr, "tau_v_s",
                         p.kind == InverterKind::Vsm ? std::nullopt
                                                     : std::optional(0.0));
    p.k_i = get_number(ji, ptr, "k_i_s");
    p.kappa_i = get_number(ji, ptr, "kappa_i_s");
    p.xi = get_number(ji, ptr, "xi");
    p.e_capacity = get_number(ji, ptr, "e_capacity_ws", 3600.0 * p.s_max);
    s.inverters.push_back(p);
    s.inverter_bus.push_back(get_int(ji, ptr, "bus"));
    s.coupling_z.push_back(cplx(get_number(ji, ptr, "coupling_r_ohm", 0.0),
                                get_number(ji, ptr, "coupling_x_ohm", 0.0)));
  }

  if (!root.contains("graph")) fail("/graph", "missing required section");
  const json& graph = root.at("graph");
  check_keys(graph, "/graph", {"edges"});
  if (!graph.contains("edges")) fail("/graph/edges", "missing required array");
  const json& edges = graph.at("edges");
  require_array(edges, "/graph/edges");
  for (size_t k = 0; k < edges.size(); ++k) {
    std::string ptr = "/graph/edges/" + std::to_string(k);
    const json& je = edges[k];
    check_keys(je, ptr, {"i", "j", "a", "b", "e", "f"});
    CommEdge e;
    e.i = get_int(je, ptr, "i");
    e.j = get_int(je, ptr, "j");
    e.a = get_number(je, ptr, "a", 0.0);
    e.b = get_number(je, ptr, "b", 0.0);
    e.e = get_number(je, ptr, "e", 0.0);
    e.f = get_number(je, ptr, "f", 0.0);
    s.edges.push_back(e);
  }

  if (root.contains("controller")) {
    const json& ctl = root.at("controller");
    check_keys(ctl, "/controller",
               {"lpf_cutoff_rad_s", "coupling", "comm_interval_s"});
    s.lpf_cutoff = get_number(ctl, "/controller", "lpf_cutoff_rad_s", 50.0);
    std::string coupling =
        get_string(ctl, "/controller", "coupling", "continuous");
    if (coupling == "continuous") {
      s.coupling = Scenario::Coupling::Continuous;
    } else if (coupling == "sampled") {
      s.coupling = Scenario::Coupling::Sampled;
    } else {
      fail("/controller/coupling", "coupling must be continuous or sampled");
    }
    s.comm_interval_s = get_number(ctl, "/controller", "comm_interval_s", 0.01);
  }

  if (root.contains("events")) {
    const json& events = root.at("events");
    require_array(events, "/events");
    for (size_t k = 0; k < events.size(); ++k) {
      std::string ptr = "/events/" + std::to_string(k);
      const json& je = events[k];
      SimEvent ev;
      std::string kind = get_string(je, ptr, "kind");
      ev.t_s = get_number(je, ptr, "t_s");
      if (kind == "load_step") {
        check_keys(je, ptr, {"t_s", "kind", "bus", "dp_w", "dq_var"});
        ev.kind = SimEvent::Kind::LoadStep;
        ev.bus = get_int(je, ptr, "bus");
        ev.dp_w = get_number(je, ptr, "dp_w", 0.0);
        ev.dq_var = get_number(je, ptr, "dq_var", 0.0);
      } else if (kind == "load_pickup_ramp") {
        check_keys(je, ptr, {"t_s", "kind", "bus", "p_w", "q_var", "ramp_s",
                             "v_start_frac"});
        ev.kind = SimEvent::Kind::LoadPickupRamp;
        ev.bus = get_int(je, ptr, "bus");
        ev.p_w = get_number(je, ptr, "p_w", 0.0);
        ev.q_var = get_number(je, ptr, "q_var", 0.0);
        ev.ramp_s = get_number(je, ptr, "ramp_s");
        ev.v_start_frac = get_number(je, ptr, "v_start_frac", 1.0);
      } else if (kind == "gain_change") {
        check_keys(je, ptr, {"t_s", "kind", "channel", "value"});
        ev.kind = SimEvent::Kind::GainChange;
        ev.channel = parse_channel(get_string(je, ptr, "channel"),
                                   ptr + "/channel");
        ev.value = get_number(je, ptr, "value");
      } else {
        fail(ptr + "/kind",
             "kind must be load_step, load_pickup_ramp or gain_change");
      }
      s.events.push_back(ev);
    }
  }

  if (root.contains("sim")) {
    const json& sim = root.at("sim");
    check_keys(sim, "/sim", {"duration_s", "dt_s", "decimation_s"});
    s.duration_s = get_number(sim, "/sim", "duration_s", 120.0);
    s.dt_s = get_number(sim, "/sim", "dt_s", 1e-3);
    s.decimation_s = get_number(sim, "/sim", "decimation_s", 1e-2);
  }

  if (root.contains("agents")) {
    const json& ag = root.at("agents");
    check_keys(ag, "/agents",
               {"tick_s", "transport", "delay_ms", "jitter_ms", "loss", "host",
                "base_port", "realtime"});
    s.agents.tick_s = get_number(ag, "/agents", "tick_s", s.comm_interval_s);
    std::string transport = get_string(ag, "/agents", "transport", "memory");
    if (transport == "memory") {
      s.agents.transport = Scenario::AgentsConfig::Transport::Memory;
    } else if (transport == "udp") {
      s.agents.transport = Scenario::AgentsConfig::Transport::Udp;
    } else {
      fail("/agents/transport", "transport must be memory or udp");
    }
    s.agents.delay_ms = get_number(ag, "/agents", "delay_ms", 0.0);
    s.agents.jitter_ms = get_number(ag, "/agents", "jitter_ms", 0.0);
    s.agents.loss = get_number(ag, "/agents", "loss", 0.0);
    s.agents.host = get_string(ag, "/agents", "host", "127.0.0.1");
    s.agents.base_port = get_int(ag, "/agents", "base_port", 47620);
    s.agents.realtime = get_bool(ag, "/agents", "realtime", false);
  } else {
    s.agents.tick_s = s.comm_interval_s;
  }

  s.validate();
  return s;
}

}  // namespace

void Scenario::validate() const {
  auto bad = [](const std::string& what) {
    throw std::invalid_argument("scenario: " + what);
  };
  if (n_buses < 1) bad("bus count must be positive");
  if (v_nom <= 0.0) bad("nominal voltage must be positive");
  if (omega_nom <= 0.0) bad("nominal frequency must be positive");
  if (inverters.empty()) bad("at least one inverter is required");
  if (inverter_bus.size() != inverters.size() ||
      coupling_z.size() != inverters.size())
    bad("inverter bus and coupling lists must match the fleet size");
  for (size_t k = 0; k < inverters.size(); ++k) {
    inverters[k].validate();
    if (inverter_bus[k] < 0 || inverter_bus[k] >= n_buses)
      bad("inverter '" + inverters[k].id + "' taps bus " +
          std::to_string(inverter_bus[k]) + " outside the network");
  }
  for (const Line& l : lines) {
    if (l.from < 0 || l.from >= n_buses || l.to < 0 || l.to >= n_buses)
      bad("line endpoint outside the network");
  }
  for (const LoadSpec& l : loads) {
    if (l.bus < 0 || l.bus >= n_buses) bad("load bus outside the network");
  }
  for (const CommEdge& e : edges) {
    int n = static_cast<int>(inverters.size());
    if (e.i < 0 || e.i >= n || e.j < 0 || e.j >= n)
      bad("comm edge endpoint outside the fleet");
  }
  if (duration_s <= 0.0) bad("duration must be positive");
  if (dt_s <= 0.0) bad("time step must be positive");
  if (decimation_s + 1e-12 < dt_s)
    bad("decimation interval must not be finer than the time step");
  if (comm_interval_s + 1e-12 < dt_s)
    bad("comm interval must not be finer than the time step");
  double ticks = comm_interval_s / dt_s;
  if (std::abs(ticks - std::round(ticks)) > 1e-6)
    bad("comm interval must be a whole number of time steps");
  if (agents.loss < 0.0 || agents.loss >= 1.0)
    bad("loss probability must lie in [0, 1)");
  if (agents.delay_ms < 0.0 || agents.jitter_ms < 0.0)
    bad("delay and jitter must be non-negative");

  double prev = -std::numeric_limits<double>::infinity();
  int ramps = 0;
  for (const SimEvent& ev : events) {
    if (ev.t_s < prev) bad("events must be sorted by time");
    prev = ev.t_s;
    if (ev.t_s < 0.0 || ev.t_s > duration_s)
      bad("event time outside the run window");
    switch (ev.kind) {
      case SimEvent::Kind::LoadStep:
        if (ev.bus < 0 || ev.bus >= n_buses)
          bad("load step bus outside the network");
        break;
      case SimEvent::Kind::LoadPickupRamp:
        if (ev.bus < 0 || ev.bus >= n_buses)
          bad("pickup ramp bus outside the network");
        if (ev.ramp_s <= 0.0) bad("pickup ramp duration must be positive");
        if (ev.v_start_frac <= 0.0 || ev.v_start_frac > 1.0)
          bad("pickup ramp voltage start fraction must lie in (0, 1]");
        if (++ramps > 1) bad("at most one pickup ramp per scenario");
        break;
      case SimEvent::Kind::GainChange:
        if (ev.value < 0.0) bad("gain change value must be non-negative");
        break;
    }
  }
}

PhasorNetwork Scenario::build_network() const {
  std::vector<InverterTap> taps;
  taps.reserve(inverters.size());
  for (size_t k = 0; k < inverters.size(); ++k)
    taps.push_back({inverter_bus[k], coupling_z[k]});
  PhasorNetwork net(n_buses, lines, taps, v_nom);
  for (const LoadSpec& l : loads) net.add_load_power(l.bus, l.p_w, l.q_var);
  return net;
}

CommGraph Scenario::build_graph() const {
  return CommGraph(inverters.size(), edges);
}

Scenario parse_scenario(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& ex) {
    throw SchemaError("", std::string("not valid JSON: ") + ex.what());
  }
  return parse(root);
}

Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_scenario(buf.str());
}

std::string apply_overrides(const std::string& json_text,
                            const std::vector<std::string>& overrides) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& ex) {
    throw SchemaError("", std::string("not valid JSON: ") + ex.what());
  }
  for (const std::string& ov : overrides) {
    auto eq = ov.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("override must look like key.path=value: " +
                                  ov);
    std::string path = ov.substr(0, eq);
    std::string value = ov.substr(eq + 1);
    std::string ptr = "/";
    for (char c : path) ptr += (c == '.') ? '/' : c;
    json parsed;
    try {
      parsed = json::parse(value);
    } catch (const json::parse_error&) {
      parsed = value;  // bare strings are fine ("kind=droop")
    }
    try {
      root[json::json_pointer(ptr)] = parsed;
    } catch (const json::exception& ex) {
      throw std::invalid_argument("override path " + path +
                                  " cannot be applied: " + ex.what());
    }
  }
  return root.dump(2);
}

std::string scenario_to_json(const Scenario& s) {
  json root;
  if (!s.name.empty()) root["name"] = s.name;

  json net;
  net["v_nom_v"] = s.v_nom;
  net["omega_nom_rad_s"] = s.omega_nom;
  net["buses"] = s.n_buses;
  net["lines"] = json::array();
  for (const Line& l : s.lines)
    net["lines"].push_back({{"from", l.from},
                            {"to", l.to},
                            {"r_ohm", l.z.real()},
                            {"x_ohm", l.z.imag()}});
  net["loads"] = json::array();
  for (const LoadSpec& l : s.loads)
    net["loads"].push_back({{"bus", l.bus}, {"p_w", l.p_w}, {"q_var", l.q_var}});
  root["network"] = net;

  root["inverters"] = json::array();
  for (size_t k = 0; k < s.inverters.size(); ++k) {
    const InverterParams& p = s.inverters[k];
    json ji;
    ji["id"] = p.id;
    ji["kind"] = p.kind == InverterKind::Droop ? "droop" : "vsm";
    ji["bus"] = s.inverter_bus[k];
    ji["coupling_r_ohm"] = s.coupling_z[k].real();
    ji["coupling_x_ohm"] = s.coupling_z[k].imag();
    ji["s_max_va"] = p.s_max;
    ji["p_set_w"] = p.p_set;
    ji["q_set_var"] = p.q_set;
    ji["m_pu"] = p.m_pu;
    ji["n_pu"] = p.n_pu;
    ji["m_omega_s"] = p.m_omega;
    ji["tau_v_s"] = p.tau_v;
    ji["k_i_s"] = p.k_i;
    ji["kappa_i_s"] = p.kappa_i;
    ji["xi"] = p.xi;
    ji["e_capacity_ws"] = p.e_capacity;
    root["inverters"].push_back(ji);
  }

  root["graph"]["edges"] = json::array();
  for (const CommEdge& e : s.edges)
    root["graph"]["edges"].push_back({{"i", e.i},
                                      {"j", e.j},
                                      {"a", e.a},
                                      {"b", e.b},
                                      {"e", e.e},
                                      {"f", e.f}});

  root["controller"] = {
      {"lpf_cutoff_rad_s", s.lpf_cutoff},
      {"coupling",
       s.coupling == Scenario::Coupling::Continuous ? "continuous" : "sampled"},
      {"comm_interval_s", s.comm_interval_s}};

  root["events"] = json::array();
  for (const SimEvent& ev : s.events) {
    json je;
    je["t_s"] = ev.t_s;
    switch (ev.kind) {
      case SimEvent::Kind::LoadStep:
        je["kind"] = "load_step";
        je["bus"] = ev.bus;
        je["dp_w"] = ev.dp_w;
        je["dq_var"] = ev.dq_var;
        break;
      case SimEvent::Kind::LoadPickupRamp:
        je["kind"] = "load_pickup_ramp";
        je["bus"] = ev.bus;
        je["p_w"] = ev.p_w;
        je["q_var"] = ev.q_var;
        je["ramp_s"] = ev.ramp_s;
        je["v_start_frac"] = ev.v_start_frac;
        break;
      case SimEvent::Kind::GainChange: {
        je["kind"] = "gain_change";
        const char* names[] = {"a", "b", "e", "f"};
        je["channel"] = names[static_cast<int>(ev.channel)];
        je["value"] = ev.value;
        break;
      }
    }
    root["events"].push_back(je);
  }

  root["sim"] = {{"duration_s", s.duration_s},
                 {"dt_s", s.dt_s},
                 {"decimation_s", s.decimation_s}};

  root["agents"] = {
      {"tick_s", s.agents.tick_s},
      {"transport",
       s.agents.transport == Scenario::AgentsConfig::Transport::Memory
           ? "memory"
           : "udp"},
      {"delay_ms", s.agents.delay_ms},
      {"jitter_ms", s.agents.jitter_ms},
      {"loss", s.agents.loss},
      {"host", s.agents.host},
      {"base_port", s.agents.base_port},
      {"realtime", s.agents.realtime}};

  return root.dump(2);
}

}  // namespace gfm
