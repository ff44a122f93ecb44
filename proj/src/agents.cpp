#include "gfm/agents.hpp"

#include "gfm/secondary.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <random>
#include <thread>

namespace gfm {
namespace {

std::string fmt(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, end);
}

std::vector<std::string_view> split_fields(std::string_view line) {
  while (!line.empty() && (line.back() == '\n' || line.back() == '\r'))
    line.remove_suffix(1);
  std::vector<std::string_view> out;
  size_t start = 0;
  while (true) {
    size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

template <typename T>
T parse_field(const std::vector<std::string_view>& f, size_t idx,
              const char* name) {
  if (idx >= f.size())
    throw CodecError(static_cast<int>(f.size()),
                     std::string("truncated record: field ") + name +
                         " is missing");
  std::string_view s = f[idx];
  T v{};
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size())
    throw CodecError(static_cast<int>(idx), std::string("field ") + name +
                                                " is not numeric: '" +
                                                std::string(s) + "'");
  return v;
}

void check_extra(const std::vector<std::string_view>& f, size_t expected) {
  if (f.size() > expected)
    throw CodecError(static_cast<int>(expected),
                     "unexpected extra field '" + std::string(f[expected]) +
                         "'");
}

}  // namespace

CodecError::CodecError(int field_index, const std::string& what)
    : std::runtime_error("field " + std::to_string(field_index) + ": " + what),
      field(field_index) {}

std::string encode(const ConsensusMsg& m) {
  return "DAPI," + std::to_string(m.sender) + ',' + std::to_string(m.seq) +
         ',' + fmt(m.t) + ',' + fmt(m.omega_cons) + ',' + fmt(m.q_ratio) +
         ',' + fmt(m.m_dE) + ',' + fmt(m.n_dF) + '\n';
}

std::string encode(const MeasRecord& m) {
  return "MEAS," + std::to_string(m.inv) + ',' + fmt(m.p) + ',' + fmt(m.q) +
         '\n';
}

std::string encode(const ActRecord& m) {
  return "ACT," + std::to_string(m.inv) + ',' + fmt(m.omega_cons) + ',' +
         fmt(m.e_cons) + '\n';
}

std::string encode(const InitRecord& m) {
  return "INIT," + std::to_string(m.inv) + ',' + fmt(m.omega_cons) + ',' +
         fmt(m.e_cons) + ',' + fmt(m.p0) + ',' + fmt(m.q0) + '\n';
}

WireRecord decode(std::string_view line) {
  auto f = split_fields(line);
  if (f.empty() || f[0].empty()) throw CodecError(0, "empty record");
  std::string_view tag = f[0];
  if (tag == "DAPI") {
    ConsensusMsg m;
    m.sender = parse_field<int>(f, 1, "sender");
    m.seq = parse_field<long>(f, 2, "seq");
    m.t = parse_field<double>(f, 3, "t");
    m.omega_cons = parse_field<double>(f, 4, "omega_cons");
    m.q_ratio = parse_field<double>(f, 5, "q_ratio");
    m.m_dE = parse_field<double>(f, 6, "m_dE");
    m.n_dF = parse_field<double>(f, 7, "n_dF");
    check_extra(f, 8);
    return m;
  }
  if (tag == "MEAS") {
    MeasRecord m;
    m.inv = parse_field<int>(f, 1, "inv");
    m.p = parse_field<double>(f, 2, "P");
    m.q = parse_field<double>(f, 3, "Q");
    check_extra(f, 4);
    return m;
  }
  if (tag == "ACT") {
    ActRecord m;
    m.inv = parse_field<int>(f, 1, "inv");
    m.omega_cons = parse_field<double>(f, 2, "omega");
    m.e_cons = parse_field<double>(f, 3, "V");
    check_extra(f, 4);
    return m;
  }
  if (tag == "INIT") {
    InitRecord m;
    m.inv = parse_field<int>(f, 1, "inv");
    m.omega_cons = parse_field<double>(f, 2, "omega_cons");
    m.e_cons = parse_field<double>(f, 3, "e_cons");
    m.p0 = parse_field<double>(f, 4, "P0");
    m.q0 = parse_field<double>(f, 5, "Q0");
    check_extra(f, 6);
    return m;
  }
  throw CodecError(0, "unknown record tag '" + std::string(tag) + "'");
}

void FrameBuffer::feed(std::string_view bytes) { buf_.append(bytes); }

std::optional<std::string> FrameBuffer::next() {
  size_t pos = buf_.find('\n');
  if (pos == std::string::npos) return std::nullopt;
  std::string line = buf_.substr(0, pos);
  buf_.erase(0, pos + 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

// ---------------------------------------------------------------------------
// Shared agent plumbing
// ---------------------------------------------------------------------------

namespace {

struct Link {
  int peer = 0;
  double a = 0, b = 0, e = 0, f = 0;
};

// Adjacency lists in graph edge order, so consensus sums accumulate in the
// same order as the monolithic sampled loop.
std::vector<std::vector<Link>> adjacency(const CommGraph& g) {
  std::vector<std::vector<Link>> adj(g.size());
  for (const CommEdge& e : g.edges()) {
    adj[e.i].push_back({e.j, e.a, e.b, e.e, e.f});
    adj[e.j].push_back({e.i, e.a, e.b, e.e, e.f});
  }
  return adj;
}

void reject_gain_events(const Scenario& sc) {
  for (const SimEvent& ev : sc.events)
    if (ev.kind == SimEvent::Kind::GainChange)
      throw std::invalid_argument(
          "gain change events are not supported by the distributed runtime; "
          "edge weights are fixed per agent at startup");
}

NeighborValues to_values(const ConsensusMsg& m) {
  return {m.omega_cons, m.q_ratio, m.m_dE, m.n_dF, m.t, m.seq};
}

// Equilibrium snapshot of what inverter `who` would broadcast, used to warm
// start peer tables so the first delayed ticks do not run with missing
// consensus terms. Sequence 0 loses to any live message.
ConsensusMsg seed_msg(const Scenario& sc, const Equilibrium& eq, int who) {
  const InverterParams& p = sc.inverters[static_cast<size_t>(who)];
  return {who, 0, 0.0, eq.omega_cons, eq.q[static_cast<size_t>(who)] / p.q_set,
          0.0, 0.0};
}

// Delay/jitter/loss queue for the in-memory transport. Deterministic for a
// fixed seed and send order.
class MemoryTransport {
 public:
  MemoryTransport(int nodes, double delay_s, double jitter_s, double loss,
                  std::uint64_t seed)
      : inbox_(nodes), delay_(delay_s), jitter_(jitter_s), loss_(loss),
        rng_(seed) {}

  void send(int to, std::string payload, double now) {
    // Both draws happen on every send so the stream stays aligned no matter
    // which messages are dropped.
    double jitter = jitter_ > 0.0 ? uniform_(rng_) * jitter_ : 0.0;
    double drop = uniform_(rng_);
    if (drop < loss_) return;
    inbox_[to].push_back({now + delay_ + jitter, order_++, std::move(payload)});
  }

  std::vector<std::string> drain(int node, double now) {
    auto& box = inbox_[node];
    std::stable_sort(box.begin(), box.end(), [](const auto& x, const auto& y) {
      return x.due < y.due || (x.due == y.due && x.order < y.order);
    });
    std::vector<std::string> out;
    size_t k = 0;
    for (; k < box.size() && box[k].due <= now + 1e-12; ++k)
      out.push_back(std::move(box[k].payload));
    box.erase(box.begin(), box.begin() + static_cast<long>(k));
    return out;
  }

 private:
  struct Pending {
    double due;
    long order;
    std::string payload;
  };
  std::vector<std::vector<Pending>> inbox_;
  double delay_, jitter_, loss_;
  long order_ = 0;
  std::mt19937_64 rng_;
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

TraceRecord compose(double t, const std::vector<PlantModel::Readout>& ro,
                    const std::vector<SecondaryTickState>& sec) {
  TraceRecord rec;
  rec.t = t;
  rec.inv.resize(ro.size());
  for (size_t k = 0; k < ro.size(); ++k) {
    auto& r = rec.inv[k];
    r.p = ro[k].p;
    r.q = ro[k].q;
    r.omega = ro[k].omega;
    r.v = ro[k].v;
    r.omega_cons = sec[k].omega_cons;
    r.e_cons = sec[k].e_cons;
    r.dE = sec[k].reserve.dE;
    r.dF = sec[k].reserve.dF;
    r.E = sec[k].reserve.e_unused;
    r.F = sec[k].reserve.f_unused;
  }
  return rec;
}

std::vector<SecondaryTickState> initial_secondary(const Scenario& sc,
                                                  const Equilibrium& eq) {
  std::vector<SecondaryTickState> sec(sc.inverters.size());
  for (size_t k = 0; k < sc.inverters.size(); ++k) {
    sec[k].omega_cons = eq.omega_cons;
    sec[k].e_cons = eq.e_cons[k];
    sec[k].reserve = make_reserve_state(sc.inverters[k].e_capacity,
                                        eq.p[k] - sc.inverters[k].p_set,
                                        eq.q[k] - sc.inverters[k].q_set);
  }
  return sec;
}

DistributedResult run_lockstep(const Scenario& sc,
                               const DistributedOptions& opt) {
  reject_gain_events(sc);
  DistributedResult out;
  PlantModel plant(sc);
  CommGraph graph = sc.build_graph();
  int n = plant.fleet_size();
  auto adj = adjacency(graph);
  std::vector<bool> silenced(n, false);
  for (int id : opt.silenced)
    if (id >= 0 && id < n) silenced[static_cast<size_t>(id)] = true;

  double tick = sc.agents.tick_s;
  long long steps = llround(sc.duration_s / sc.dt_s);
  long long per_tick = llround(tick / sc.dt_s);
  if (per_tick < 1 || std::abs(per_tick * sc.dt_s - tick) > 1e-9 * tick)
    throw std::invalid_argument(
        "agent tick must be a whole number of plant steps");
  long long decim = std::max<long long>(1, llround(sc.decimation_s / sc.dt_s));

  std::vector<SecondaryTickState> sec =
      initial_secondary(sc, plant.equilibrium());
  std::vector<long> seq(n, 0);
  // latest[i][j]: last values agent i holds for peer j, warm started from the
  // equilibrium so delayed transports never integrate with absent terms.
  std::vector<std::vector<std::optional<NeighborValues>>> latest(
      n, std::vector<std::optional<NeighborValues>>(n));
  for (int i = 0; i < n; ++i)
    for (const Link& l : adj[i])
      latest[i][l.peer] = to_values(seed_msg(sc, plant.equilibrium(), l.peer));
  std::vector<std::vector<bool>> heard(n, std::vector<bool>(n, false));
  out.telemetry.resize(n);
  for (int i = 0; i < n; ++i) out.telemetry[i].id = i;

  MemoryTransport tx(n, sc.agents.delay_ms * 1e-3, sc.agents.jitter_ms * 1e-3,
                     sc.agents.loss, opt.seed);

  out.run.trace.push_back(compose(0.0, plant.readout(), sec));

  auto wall_start = std::chrono::steady_clock::now();
  long long done = 0;
  long tick_no = 0;
  bool ok = true;
  while (done < steps && ok) {
    double t = plant.time();
    auto meas = plant.measure();

    std::vector<TickEmit> emits(n);
    for (int i = 0; i < n; ++i)
      emits[i] = secondary_tick_begin(sc.inverters[i], sec[i], meas[i].p,
                                      meas[i].q, tick);
    for (int i = 0; i < n; ++i) {
      if (silenced[i]) continue;
      ConsensusMsg msg{i, ++seq[i], t, emits[i].omega_cons, emits[i].q_ratio,
                       emits[i].m_dE, emits[i].n_dF};
      std::string bytes = encode(msg);
      for (const Link& l : adj[i]) {
        tx.send(l.peer, bytes, t);
        ++out.telemetry[i].msgs_sent;
      }
    }
    for (int i = 0; i < n; ++i) {
      for (std::string& bytes : tx.drain(i, t)) {
        ++out.telemetry[i].msgs_received;
        if (silenced[i]) continue;  // deaf as well as mute
        ConsensusMsg m = std::get<ConsensusMsg>(decode(bytes));
        auto& slot = latest[i][m.sender];
        if (!slot || m.seq > slot->seq) {
          slot = to_values(m);
          heard[i][m.sender] = true;
        }
      }
    }

    std::vector<PlantModel::Actuation> act(n);
    std::vector<NeighborTerm> terms;
    for (int i = 0; i < n; ++i) {
      terms.clear();
      for (const Link& l : adj[i])
        if (latest[i][l.peer])
          terms.push_back({l.a, l.b, l.e, l.f, *latest[i][l.peer]});
      if (terms.size() < adj[i].size())
        ++out.telemetry[i].ticks_missing_neighbors;
      act[i] = {emits[i].omega_cons, emits[i].e_cons};
      secondary_tick_integrate(sc.inverters[i], sec[i], meas[i].p, meas[i].q,
                               terms, tick);
      ++out.telemetry[i].ticks;
    }

    long long chunk = std::min(per_tick, steps - done);
    ok = plant.advance(act, static_cast<int>(chunk), [&](long long g) {
      if (g % decim == 0 || g == steps)
        out.run.trace.push_back(
            compose(static_cast<double>(g) * sc.dt_s, plant.readout(), sec));
    });
    done += chunk;
    ++tick_no;

    if (sc.agents.realtime) {
      auto deadline = wall_start + std::chrono::duration_cast<
                                       std::chrono::steady_clock::duration>(
                                       std::chrono::duration<double>(
                                           tick * static_cast<double>(tick_no)));
      if (std::chrono::steady_clock::now() > deadline) {
        ++out.overruns;
      } else {
        std::this_thread::sleep_until(deadline);
      }
    }
  }
  if (!ok) {
    out.run.aborted = true;
    out.run.diagnostic = plant.diagnostic();
  }
  for (int i = 0; i < n; ++i) {
    for (const Link& l : adj[i])
      if (!heard[i][l.peer]) out.telemetry[i].degraded = true;
  }
  out.run.metrics = compute_metrics(sc, out.run.trace);
  out.run.metrics.steps = done;
  out.run.metrics.runtime_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                    wall_start)
          .count();
  return out;
}

// ---------------------------------------------------------------------------
// UDP plumbing
// ---------------------------------------------------------------------------

sockaddr_in make_addr(const std::string& host, int port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<uint16_t>(port));
  if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
    throw BindError("not an IPv4 address: " + host);
  return addr;
}

class UdpSocket {
 public:
  UdpSocket() {
    fd_ = ::socket(AF_INET, SOCK_DGRAM, 0);
    if (fd_ < 0)
      throw BindError(std::string("cannot create udp socket: ") +
                      std::strerror(errno));
  }
  ~UdpSocket() {
    if (fd_ >= 0) ::close(fd_);
  }
  UdpSocket(const UdpSocket&) = delete;
  UdpSocket& operator=(const UdpSocket&) = delete;

  void bind(const std::string& host, int port) {
    sockaddr_in addr = make_addr(host, port);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
      throw BindError("cannot bind udp " + host + ":" + std::to_string(port) +
                      ": " + std::strerror(errno));
  }

  void send_to(const sockaddr_in& to, std::string_view bytes) {
    ::sendto(fd_, bytes.data(), bytes.size(), 0,
             reinterpret_cast<const sockaddr*>(&to), sizeof to);
  }

  std::optional<std::string> recv(int timeout_ms) {
    pollfd pf{fd_, POLLIN, 0};
    int r = ::poll(&pf, 1, timeout_ms);
    if (r <= 0) return std::nullopt;
    char buf[2048];
    ssize_t got = ::recv(fd_, buf, sizeof buf, 0);
    if (got <= 0) return std::nullopt;
    return std::string(buf, static_cast<size_t>(got));
  }

 private:
  int fd_ = -1;
};

}  // namespace

int plant_port(const Scenario& sc) { return sc.agents.base_port; }
int agent_port(const Scenario& sc, int id) {
  return sc.agents.base_port + 1 + id;
}

DistributedResult serve_plant(const Scenario& sc, const ServiceHooks& hooks) {
  reject_gain_events(sc);
  DistributedResult out;
  PlantModel plant(sc);
  int n = plant.fleet_size();
  const Equilibrium& eq = plant.equilibrium();

  UdpSocket sock;
  sock.bind(sc.agents.host, plant_port(sc));
  std::vector<sockaddr_in> agents;
  for (int k = 0; k < n; ++k)
    agents.push_back(make_addr(sc.agents.host, agent_port(sc, k)));
  auto adj = adjacency(sc.build_graph());

  // The plant mirrors the reserve bookkeeping from its own measurements so
  // the trace carries the energy columns; Omega and e come from ACTs.
  std::vector<SecondaryTickState> shadow = initial_secondary(sc, eq);
  std::vector<PlantModel::Actuation> act(n);
  for (int k = 0; k < n; ++k) act[k] = {eq.omega_cons, eq.e_cons[k]};

  // Warm start: each agent gets its own integrator state plus a sequence-0
  // snapshot of every neighbor, so early ticks have complete consensus sums.
  auto send_warm_start = [&] {
    for (int k = 0; k < n; ++k) {
      sock.send_to(agents[k],
                   encode(InitRecord{k, eq.omega_cons, eq.e_cons[k], eq.p[k],
                                     eq.q[k]}));
      for (const Link& l : adj[k])
        sock.send_to(agents[k], encode(seed_msg(sc, eq, l.peer)));
    }
  };
  send_warm_start();

  double tick = sc.agents.tick_s;
  long long steps = llround(sc.duration_s / sc.dt_s);
  long long per_tick = std::max<long long>(1, llround(tick / sc.dt_s));
  long long decim = std::max<long long>(1, llround(sc.decimation_s / sc.dt_s));
  out.run.trace.push_back(compose(0.0, plant.readout(), shadow));

  std::vector<int> misses(n, 0);
  auto wall_start = std::chrono::steady_clock::now();
  long long done = 0;
  long tick_no = 0;
  bool ok = true;
  while (done < steps && ok && !(hooks.stop && hooks.stop->load())) {
    auto meas = plant.measure();
    // Repeat the warm start a few times in case an agent bound late.
    if (tick_no < 5) send_warm_start();
    for (int k = 0; k < n; ++k) {
      secondary_tick_begin(sc.inverters[k], shadow[k], meas[k].p, meas[k].q,
                           tick);
      sock.send_to(agents[k], encode(MeasRecord{k, meas[k].p, meas[k].q}));
    }

    std::vector<bool> got(n, false);
    int want = 0;
    for (int k = 0; k < n; ++k)
      if (misses[k] <= 5) ++want;
    int have = 0;
    auto deadline = std::chrono::steady_clock::now() +
                    std::chrono::milliseconds(
                        sc.agents.realtime
                            ? std::max(1, static_cast<int>(tick * 1e3))
                            : 50);
    while (have < want && std::chrono::steady_clock::now() < deadline) {
      auto bytes = sock.recv(1);
      if (!bytes) continue;
      try {
        WireRecord rec = decode(*bytes);
        if (auto* ar = std::get_if<ActRecord>(&rec)) {
          if (ar->inv >= 0 && ar->inv < n) {
            act[ar->inv] = {ar->omega_cons, ar->e_cons};
            if (!got[ar->inv]) {
              got[ar->inv] = true;
              ++have;
            }
          }
        }
      } catch (const CodecError&) {
        // Corrupt datagram; the next tick resends fresh state anyway.
      }
    }
    for (int k = 0; k < n; ++k) {
      if (got[k]) {
        misses[k] = 0;
      } else {
        ++misses[k];
        ++out.overruns;
      }
      shadow[k].omega_cons = act[k].omega_cons;
      shadow[k].e_cons = act[k].e_cons;
    }

    long long chunk = std::min(per_tick, steps - done);
    ok = plant.advance(act, static_cast<int>(chunk), [&](long long g) {
      if (g % decim == 0 || g == steps)
        out.run.trace.push_back(compose(static_cast<double>(g) * sc.dt_s,
                                        plant.readout(), shadow));
    });
    done += chunk;
    ++tick_no;

    if (sc.agents.realtime) {
      auto pace = wall_start + std::chrono::duration_cast<
                                   std::chrono::steady_clock::duration>(
                                   std::chrono::duration<double>(
                                       tick * static_cast<double>(tick_no)));
      if (std::chrono::steady_clock::now() > pace)
        ++out.overruns;
      else
        std::this_thread::sleep_until(pace);
    }
  }
  if (!ok) {
    out.run.aborted = true;
    out.run.diagnostic = plant.diagnostic();
  }
  out.run.metrics = compute_metrics(sc, out.run.trace);
  out.run.metrics.steps = done;
  out.run.metrics.runtime_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                    wall_start)
          .count();
  return out;
}

AgentTelemetry serve_agent(const Scenario& sc, int id,
                           const ServiceHooks& hooks) {
  int n = static_cast<int>(sc.inverters.size());
  if (id < 0 || id >= n)
    throw std::invalid_argument("agent id " + std::to_string(id) +
                                " outside the fleet of " + std::to_string(n));
  CommGraph graph = sc.build_graph();
  auto adj = adjacency(graph);

  UdpSocket sock;
  sock.bind(sc.agents.host, agent_port(sc, id));
  sockaddr_in plant_addr = make_addr(sc.agents.host, plant_port(sc));
  std::vector<sockaddr_in> peer_addr;
  for (const Link& l : adj[id])
    peer_addr.push_back(make_addr(sc.agents.host, agent_port(sc, l.peer)));

  const InverterParams& params = sc.inverters[id];
  SecondaryTickState sec;
  sec.reserve = make_reserve_state(params.e_capacity);
  bool initialized = false;

  std::vector<std::optional<NeighborValues>> latest(n);
  std::vector<bool> heard(n, false);
  AgentTelemetry tel;
  tel.id = id;

  double tick = sc.agents.tick_s;
  long ticks_total = lround(sc.duration_s / tick);
  long seq = 0;
  auto last_heard = std::chrono::steady_clock::now();

  auto accept = [&](const ConsensusMsg& m) {
    if (m.sender < 0 || m.sender >= n || m.sender == id) return;
    auto& slot = latest[m.sender];
    if (!slot || m.seq > slot->seq) slot = to_values(m);
    // Warm-start seeds (seq 0) do not count as hearing a live peer.
    if (m.seq > 0) heard[m.sender] = true;
    ++tel.msgs_received;
  };

  while (seq < ticks_total && !(hooks.stop && hooks.stop->load())) {
    auto bytes = sock.recv(100);
    if (!bytes) {
      if (std::chrono::steady_clock::now() - last_heard >
          std::chrono::seconds(3))
        break;  // plant gone; shut down instead of hanging
      continue;
    }
    last_heard = std::chrono::steady_clock::now();
    WireRecord rec;
    try {
      rec = decode(*bytes);
    } catch (const CodecError&) {
      continue;
    }
    if (auto* init = std::get_if<InitRecord>(&rec)) {
      if (init->inv == id && !initialized) {
        sec.omega_cons = init->omega_cons;
        sec.e_cons = init->e_cons;
        sec.reserve = make_reserve_state(params.e_capacity,
                                         init->p0 - params.p_set,
                                         init->q0 - params.q_set);
        initialized = true;
      }
      continue;
    }
    if (auto* cm = std::get_if<ConsensusMsg>(&rec)) {
      accept(*cm);
      continue;
    }
    auto* ms = std::get_if<MeasRecord>(&rec);
    if (!ms || ms->inv != id) continue;

    ++seq;
    double t = (static_cast<double>(seq) - 1.0) * tick;
    TickEmit emit = secondary_tick_begin(params, sec, ms->p, ms->q, tick);
    ConsensusMsg out_msg{id, seq, t, emit.omega_cons, emit.q_ratio, emit.m_dE,
                         emit.n_dF};
    std::string out_bytes = encode(out_msg);
    for (const sockaddr_in& addr : peer_addr) {
      sock.send_to(addr, out_bytes);
      ++tel.msgs_sent;
    }
    sock.send_to(plant_addr, encode(ActRecord{id, emit.omega_cons,
                                              emit.e_cons}));

    // Give this tick's peer messages a short window to arrive.
    auto deadline = std::chrono::steady_clock::now() +
                    std::chrono::milliseconds(
                        std::max(1, static_cast<int>(tick * 500)));
    auto all_current = [&]() {
      for (const Link& l : adj[id])
        if (!latest[l.peer] || latest[l.peer]->seq < seq) return false;
      return true;
    };
    while (!all_current() && std::chrono::steady_clock::now() < deadline) {
      auto more = sock.recv(1);
      if (!more) continue;
      try {
        WireRecord r2 = decode(*more);
        if (auto* cm = std::get_if<ConsensusMsg>(&r2)) accept(*cm);
      } catch (const CodecError&) {
      }
    }

    std::vector<NeighborTerm> terms;
    for (const Link& l : adj[id])
      if (latest[l.peer])
        terms.push_back({l.a, l.b, l.e, l.f, *latest[l.peer]});
    if (terms.size() < adj[id].size()) ++tel.ticks_missing_neighbors;
    secondary_tick_integrate(params, sec, ms->p, ms->q, terms, tick);
    ++tel.ticks;
  }

  for (const Link& l : adj[id])
    if (!heard[l.peer]) tel.degraded = true;
  if (!initialized) tel.degraded = true;
  return tel;
}

DistributedResult run_distributed(const Scenario& sc,
                                  const DistributedOptions& opt) {
  if (sc.agents.transport == Scenario::AgentsConfig::Transport::Memory)
    return run_lockstep(sc, opt);

  // Loopback datagram mode: the real services on threads.
  int n = static_cast<int>(sc.inverters.size());
  std::vector<std::thread> threads;
  std::vector<AgentTelemetry> tel(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<bool> stop{false};
  ServiceHooks agent_hooks{&stop};
  for (int k = 0; k < n; ++k) {
    threads.emplace_back([&, k] {
      try {
        tel[k] = serve_agent(sc, k, agent_hooks);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    });
  }
  // Let the agents bind before the warm start goes out.
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  DistributedResult out;
  std::exception_ptr plant_error;
  try {
    out = serve_plant(sc);
  } catch (...) {
    plant_error = std::current_exception();
  }
  stop.store(true);
  for (auto& th : threads) th.join();
  if (plant_error) std::rethrow_exception(plant_error);
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);
  out.telemetry = std::move(tel);
  return out;
}

}  // namespace gfm
