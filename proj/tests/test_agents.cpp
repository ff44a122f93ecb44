#include <doctest.h>

#include "gfm/agents.hpp"
#include "gfm/scenario.hpp"
#include "gfm/sim.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

using namespace gfm;

namespace {

Scenario load_config(const std::string& name,
                     const std::vector<std::string>& overrides = {}) {
  std::string path = std::string(GFM_CONFIG_DIR) + "/" + name;
  std::ifstream in(path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_scenario(apply_overrides(buf.str(), overrides));
}

double worst_trace_gap_pu(const RunResult& a, const RunResult& b,
                          const Scenario& sc) {
  REQUIRE(a.trace.size() == b.trace.size());
  double worst = 0.0;
  for (size_t r = 0; r < a.trace.size(); ++r) {
    const TraceRecord& ra = a.trace[r];
    const TraceRecord& rb = b.trace[r];
    REQUIRE(ra.t == rb.t);
    for (size_t k = 0; k < ra.inv.size(); ++k) {
      double s = sc.inverters[k].s_max;
      worst = std::max(worst, std::abs(ra.inv[k].p - rb.inv[k].p) / s);
      worst = std::max(worst, std::abs(ra.inv[k].q - rb.inv[k].q) / s);
      worst = std::max(worst, std::abs(ra.inv[k].omega - rb.inv[k].omega) /
                                  sc.omega_nom);
      worst = std::max(worst, std::abs(ra.inv[k].v - rb.inv[k].v) / sc.v_nom);
      worst = std::max(worst,
                       std::abs(ra.inv[k].omega_cons - rb.inv[k].omega_cons) /
                           sc.omega_nom);
      worst = std::max(worst, std::abs(ra.inv[k].e_cons - rb.inv[k].e_cons) /
                                  sc.v_nom);
      worst = std::max(worst, std::abs(ra.inv[k].dE - rb.inv[k].dE) / s);
      worst = std::max(worst, std::abs(ra.inv[k].dF - rb.inv[k].dF) / s);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("wire records decode back to the exact struct they encode") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> mag(-1e7, 1e7);
  std::uniform_int_distribution<int> expo(-300, 300);
  auto rnd = [&] { return mag(rng) * std::pow(2.0, expo(rng) / 12); };

  for (int k = 0; k < 10000; ++k) {
    ConsensusMsg c{static_cast<int>(rng() % 64),
                   static_cast<long>(rng() % 100000),
                   rnd(), rnd(), rnd(), rnd(), rnd()};
    CHECK(std::get<ConsensusMsg>(decode(encode(c))) == c);
    MeasRecord m{static_cast<int>(rng() % 64), rnd(), rnd()};
    CHECK(std::get<MeasRecord>(decode(encode(m))) == m);
    ActRecord a{static_cast<int>(rng() % 64), rnd(), rnd()};
    CHECK(std::get<ActRecord>(decode(encode(a))) == a);
    InitRecord i{static_cast<int>(rng() % 64), rnd(), rnd(), rnd(), rnd()};
    CHECK(std::get<InitRecord>(decode(encode(i))) == i);
  }
}

TEST_CASE("documented record layout decodes field by field") {
  WireRecord rec = decode("DAPI,2,17,1.250,0.001,1.0,0.0,0.0\n");
  const ConsensusMsg& m = std::get<ConsensusMsg>(rec);
  CHECK(m.sender == 2);
  CHECK(m.seq == 17);
  CHECK(m.t == 1.25);
  CHECK(m.omega_cons == 0.001);
  CHECK(m.q_ratio == 1.0);
  CHECK(m.m_dE == 0.0);
  CHECK(m.n_dF == 0.0);

  CHECK(encode(ActRecord{1, -0.5, 2.25}) == "ACT,1,-0.5,2.25\n");
  CHECK(encode(MeasRecord{0, 1.2e6, 6e5}) == "MEAS,0,1200000,6e+05\n");
}

TEST_CASE("codec errors carry the zero-based field index") {
  auto field_of = [](const std::string& line) {
    try {
      decode(line);
    } catch (const CodecError& e) {
      return e.field;
    }
    return -1;
  };
  CHECK(field_of("") == 0);
  CHECK(field_of("NOPE,1,2,3") == 0);
  CHECK(field_of("ACT,x,0.0,0.0") == 1);
  CHECK(field_of("ACT,1,zero,0.0") == 2);
  CHECK(field_of("ACT,1,0.0") == 3);  // truncated: index is the missing slot
  CHECK(field_of("ACT,1,0.0,0.0,extra") == 4);
  CHECK(field_of("DAPI,2,17,1.0,0.0,1.0,0.0") == 7);
  CHECK_THROWS_WITH_AS(decode("ACT,1,0.0"),
                       "field 3: truncated record: field V is missing",
                       CodecError);
  CHECK_THROWS_WITH_AS(decode("ACT,1,zero,0.0"),
                       "field 2: field omega is not numeric: 'zero'",
                       CodecError);
  CHECK_THROWS_WITH_AS(decode("NOPE,1,2,3"),
                       "field 0: unknown record tag 'NOPE'", CodecError);
}

TEST_CASE("frame buffer holds partial lines until completed") {
  FrameBuffer fb;
  fb.feed("ACT,1,0.5,");
  CHECK_FALSE(fb.next().has_value());
  fb.feed("1.5\nMEAS,0,");
  auto first = fb.next();
  REQUIRE(first.has_value());
  CHECK(std::get<ActRecord>(decode(*first)) == ActRecord{1, 0.5, 1.5});
  CHECK_FALSE(fb.next().has_value());
  fb.feed("1.0,2.0\r\n");
  auto second = fb.next();
  REQUIRE(second.has_value());
  CHECK(std::get<MeasRecord>(decode(*second)) == MeasRecord{0, 1.0, 2.0});
}

TEST_CASE("lock-step transport with no impairments reproduces the monolithic "
          "sampled trace") {
  Scenario sc = load_config("scenario1_droop_active.json",
                            {"controller.coupling=sampled",
                             "sim.duration_s=30.0"});
  RunResult mono = run(sc);
  REQUIRE_FALSE(mono.aborted);
  DistributedResult dist = run_distributed(sc);
  REQUIRE_FALSE(dist.run.aborted);
  CHECK(worst_trace_gap_pu(mono, dist.run, sc) <= 1e-6);
  for (const AgentTelemetry& tel : dist.telemetry) {
    CHECK(tel.ticks == 3000);
    CHECK(tel.ticks_missing_neighbors == 0);
    CHECK_FALSE(tel.degraded);
  }
}

TEST_CASE("50 ms delay leaves frequency restoration intact") {
  Scenario sc = load_config("scenario1_droop_active.json",
                            {"agents.delay_ms=50"});
  DistributedResult dist = run_distributed(sc);
  REQUIRE_FALSE(dist.run.aborted);
  REQUIRE_FALSE(dist.run.metrics.windows.empty());
  for (const EventWindow& w : dist.run.metrics.windows)
    CHECK(w.band_end < 1e-3);
  CHECK(dist.run.metrics.final_max_abs_domega < 1e-3);
}

TEST_CASE("a silenced agent degrades its peers but not the quiescent fleet") {
  // Reserve weights are zeroed: a mute agent's reserve snapshot freezes at
  // zero while real reserves keep integrating, which would turn that edge
  // into an absolute drag. With pure state consensus the frozen equilibrium
  // snapshot is exactly right, so the fleet must hold its operating point.
  Scenario sc = load_config("scenario1_droop_active.json",
                            {"events=[]", "sim.duration_s=20.0",
                             "graph.edges.0.e=0.0", "graph.edges.1.e=0.0",
                             "graph.edges.2.e=0.0"});
  DistributedOptions opt;
  opt.silenced = {1};
  DistributedResult dist = run_distributed(sc, opt);
  REQUIRE_FALSE(dist.run.aborted);

  CHECK(dist.telemetry[1].msgs_sent == 0);
  // Peers never hear agent 1 live; agent 1 ignores everyone.
  CHECK(dist.telemetry[0].degraded);
  CHECK(dist.telemetry[1].degraded);
  CHECK(dist.telemetry[2].degraded);
  // Warm-start seeds keep the consensus sums complete even so.
  for (const AgentTelemetry& tel : dist.telemetry)
    CHECK(tel.ticks_missing_neighbors == 0);

  // Nothing disturbs the operating point, so the frozen links hold it.
  CHECK(dist.run.metrics.final_max_abs_domega < 1e-6);
}

TEST_CASE("heavy loss degrades throughput but never crashes the loop") {
  Scenario sc = load_config("scenario1_droop_active.json",
                            {"agents.loss=0.9", "sim.duration_s=20.0"});
  DistributedOptions opt;
  opt.seed = 42;
  DistributedResult dist = run_distributed(sc, opt);
  CHECK_FALSE(dist.run.aborted);
  long sent = 0, received = 0;
  for (const AgentTelemetry& tel : dist.telemetry) {
    sent += tel.msgs_sent;
    received += tel.msgs_received;
  }
  CHECK(sent == 3 * 2 * 2000);
  CHECK(received > 0);
  CHECK(received < sent / 2);
  // Each link still delivers hundreds of live messages over 2000 ticks.
  for (const AgentTelemetry& tel : dist.telemetry)
    CHECK_FALSE(tel.degraded);
}

TEST_CASE("impaired runs are reproducible for a fixed seed") {
  Scenario sc = load_config("scenario1_droop_active.json",
                            {"agents.loss=0.5", "agents.jitter_ms=5",
                             "sim.duration_s=10.0"});
  DistributedOptions opt;
  opt.seed = 1234;
  DistributedResult a = run_distributed(sc, opt);
  DistributedResult b = run_distributed(sc, opt);
  CHECK(worst_trace_gap_pu(a.run, b.run, sc) == 0.0);
  for (size_t k = 0; k < a.telemetry.size(); ++k)
    CHECK(a.telemetry[k].msgs_received == b.telemetry[k].msgs_received);
}

TEST_CASE("gain change events are rejected by the distributed runtime") {
  Scenario sc = load_config(
      "scenario1_droop_active.json",
      {"events=[{\"t_s\": 5.0, \"kind\": \"gain_change\", \"channel\": \"e\", "
       "\"value\": 0.0}]"});
  CHECK_THROWS_WITH_AS(run_distributed(sc),
                       "gain change events are not supported by the "
                       "distributed runtime; edge weights are fixed per agent "
                       "at startup",
                       std::invalid_argument);
}

TEST_CASE("udp loopback services close the loop end to end") {
  Scenario sc = load_config("scenario1_droop_active.json",
                            {"agents.transport=udp", "agents.base_port=47901",
                             "sim.duration_s=2.0", "events=[]"});
  DistributedResult dist = run_distributed(sc);
  REQUIRE_FALSE(dist.run.aborted);
  CHECK(dist.run.metrics.steps == 2000);
  // At equilibrium with live agents the loop holds the operating point.
  CHECK(dist.run.metrics.final_max_abs_domega < 1e-4);
  for (const AgentTelemetry& tel : dist.telemetry) {
    CHECK(tel.ticks > 0);
    CHECK_FALSE(tel.degraded);
  }
}

TEST_CASE("binding the same agent role twice fails with BindError") {
  Scenario sc = load_config("scenario1_droop_active.json",
                            {"agents.transport=udp",
                             "agents.base_port=47951"});
  std::atomic<bool> stop{false};
  ServiceHooks hooks{&stop};
  std::atomic<bool> holder_bound{false};
  std::thread holder([&] {
    try {
      holder_bound = true;
      serve_agent(sc, 0, hooks);
    } catch (...) {
    }
  });
  while (!holder_bound)
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  // Give the holder time to actually take the port before the duplicate.
  std::this_thread::sleep_for(std::chrono::milliseconds(100));
  CHECK_THROWS_AS(serve_agent(sc, 0, hooks), BindError);
  stop = true;
  holder.join();
}
