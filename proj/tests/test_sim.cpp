#include <doctest.h>

#include "gfm/scenario.hpp"
#include "gfm/sim.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

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

// Worst per-unit deviation of any plant quantity from its first sample.
// F is excluded: reactive headroom accrues by design even at equilibrium.
double worst_drift_pu(const RunResult& res, const Scenario& sc) {
  double worst = 0.0;
  const TraceRecord& first = res.trace.front();
  for (const TraceRecord& rec : res.trace) {
    for (size_t k = 0; k < rec.inv.size(); ++k) {
      double s = sc.inverters[k].s_max;
      worst = std::max(worst, std::abs(rec.inv[k].p - first.inv[k].p) / s);
      worst = std::max(worst, std::abs(rec.inv[k].q - first.inv[k].q) / s);
      worst = std::max(worst, std::abs(rec.inv[k].omega - first.inv[k].omega) /
                                  sc.omega_nom);
      worst = std::max(worst,
                       std::abs(rec.inv[k].v - first.inv[k].v) / sc.v_nom);
    }
  }
  return worst;
}

// Distance between two runs' terminal records, normalized per field.
double terminal_distance(const RunResult& a, const RunResult& b,
                         const Scenario& sc) {
  const TraceRecord& ra = a.trace.back();
  const TraceRecord& rb = b.trace.back();
  REQUIRE(ra.t == rb.t);
  double d = 0.0;
  for (size_t k = 0; k < ra.inv.size(); ++k) {
    double s = sc.inverters[k].s_max;
    d = std::max(d, std::abs(ra.inv[k].p - rb.inv[k].p) / s);
    d = std::max(d, std::abs(ra.inv[k].q - rb.inv[k].q) / s);
    d = std::max(d,
                 std::abs(ra.inv[k].omega - rb.inv[k].omega) / sc.omega_nom);
    d = std::max(d, std::abs(ra.inv[k].v - rb.inv[k].v) / sc.v_nom);
    d = std::max(d, std::abs(ra.inv[k].omega_cons - rb.inv[k].omega_cons));
    d = std::max(d, std::abs(ra.inv[k].e_cons - rb.inv[k].e_cons) / sc.v_nom);
    d = std::max(d, std::abs(ra.inv[k].dE - rb.inv[k].dE) / s);
    d = std::max(d, std::abs(ra.inv[k].dF - rb.inv[k].dF) / s);
  }
  return d;
}

}  // namespace

TEST_CASE("flat scenario stays at its equilibrium for the whole window") {
  Scenario sc = load_config("equilibrium_flat.json",
                            {"sim.duration_s=20.0"});
  RunResult res = run(sc);
  REQUIRE_FALSE(res.aborted);
  CHECK(worst_drift_pu(res, sc) < 1e-6);
  CHECK(res.metrics.final_max_abs_domega < 1e-9);

  SUBCASE("under sampled coupling as well") {
    sc.coupling = Scenario::Coupling::Sampled;
    RunResult samp = run(sc);
    REQUIRE_FALSE(samp.aborted);
    CHECK(worst_drift_pu(samp, sc) < 1e-6);
  }
}

TEST_CASE("equilibrium satisfies the droop laws it was solved from") {
  Scenario sc = load_config("scenario1_droop_active.json");
  PhasorNetwork net = sc.build_network();
  CommGraph graph = sc.build_graph();
  Equilibrium eq = solve_equilibrium(net, sc.inverters, graph, sc.v_nom);

  CHECK(eq.residual < 1e-8);
  for (size_t k = 0; k < sc.inverters.size(); ++k) {
    const InverterParams& p = sc.inverters[k];
    // Frequency restored: the common correction offsets the droop pull.
    CHECK(std::abs(p.m_si() * (eq.p[k] - p.p_set) - eq.omega_cons) <
          1e-8 * sc.omega_nom);
    // Commanded magnitude composes reference, droop and correction exactly.
    CHECK(eq.v[k] ==
          doctest::Approx(sc.v_nom - p.n_si() * (eq.q[k] - p.q_set) +
                          eq.e_cons[k])
              .epsilon(1e-12));
  }
}

TEST_CASE("with no voltage-deviation feedback the correction level is zero") {
  // xi = 0 leaves the voltage consensus loop with a conserved weighted sum
  // of corrections; the equilibrium must sit on the level the loop actually
  // holds, which is zero for integrators started at rest.
  Scenario sc = load_config("scenario2_vsm_reactive_active.json");
  PhasorNetwork net = sc.build_network();
  CommGraph graph = sc.build_graph();
  Equilibrium eq = solve_equilibrium(net, sc.inverters, graph, sc.v_nom);
  double level = 0.0;
  for (size_t k = 0; k < sc.inverters.size(); ++k)
    level += sc.inverters[k].kappa_i * eq.e_cons[k];
  CHECK(std::abs(level) < 1e-6);
}

TEST_CASE("trace CSV is byte-identical across repeated runs") {
  Scenario sc = load_config("equilibrium_flat.json", {"sim.duration_s=2.0"});
  std::ostringstream a, b;
  write_trace_csv(a, run(sc).trace, sc.inverters);
  write_trace_csv(b, run(sc).trace, sc.inverters);
  CHECK(a.str() == b.str());
  CHECK(a.str().substr(0, a.str().find('\n')) ==
        "t,inv,P,Q,omega,V,Omega,e_cons,dE,dF,E,F");
}

TEST_CASE("step halving converges at fourth order on a smooth transient") {
  // A load step at t = 0 lands before the first integrator step, so the
  // trajectory on (0, T] is smooth and the asymptotic order is observable.
  std::vector<std::string> base = {
      "events=[{\"t_s\": 0.0, \"kind\": \"load_step\", \"bus\": 3, "
      "\"dp_w\": 800000.0, \"dq_var\": 200000.0}]",
      "sim.duration_s=2.0", "sim.decimation_s=0.5",
      "controller.comm_interval_s=0.04"};
  auto run_at = [&](double dt) {
    std::vector<std::string> ov = base;
    ov.push_back("sim.dt_s=" + std::to_string(dt));
    Scenario sc = load_config("scenario1_droop_active.json", ov);
    RunResult r = run(sc);
    REQUIRE_FALSE(r.aborted);
    return r;
  };
  Scenario ref = load_config("scenario1_droop_active.json", base);
  RunResult r1 = run_at(4e-3);
  RunResult r2 = run_at(2e-3);
  RunResult r3 = run_at(1e-3);
  double e1 = terminal_distance(r1, r2, ref);
  double e2 = terminal_distance(r2, r3, ref);
  REQUIRE(e2 > 0.0);
  double order = std::log2(e1 / e2);
  CHECK(order >= 3.5);
  CHECK(order <= 4.6);
}

TEST_CASE("consensus error channels compute signed pairwise mismatches") {
  std::vector<InverterParams> inv(3);
  for (int k = 0; k < 3; ++k) {
    inv[k].s_max = 2.5e6;
    inv[k].omega_nom = 2.0 * M_PI * 60.0;
    inv[k].v_nom = 391.9183588453085;
    inv[k].m_pu = 0.015625;
    inv[k].n_pu = 0.1275776282431797;
    inv[k].p_set = 1.2e6;
  }
  double m = inv[0].m_si();
  double n = inv[0].n_si();

  TraceRecord rec;
  rec.t = 1.0;
  rec.inv.resize(3);
  rec.inv[0].dE = 100.0;
  rec.inv[1].dE = 70.0;
  rec.inv[2].dE = -30.0;
  rec.inv[0].dF = 40.0;
  rec.inv[1].dF = 10.0;
  rec.inv[2].dF = 25.0;
  rec.inv[0].p = 1.3e6;
  rec.inv[1].p = 1.25e6;
  rec.inv[2].p = 1.2e6;
  std::vector<TraceRecord> trace = {rec};

  ConsensusSeries fe = consensus_error(trace, inv, "freq_energy");
  REQUIRE(fe.pairs.size() == 3);
  CHECK(fe.pairs[0] == std::pair<int, int>(0, 1));
  CHECK(fe.values(0, 0) == doctest::Approx(m * 30.0));
  CHECK(fe.values(0, 1) == doctest::Approx(m * 130.0));
  CHECK(fe.values(0, 2) == doctest::Approx(m * 100.0));
  CHECK(fe.max_abs()[0] == doctest::Approx(m * 130.0));

  ConsensusSeries ve = consensus_error(trace, inv, "volt_energy");
  CHECK(ve.values(0, 0) == doctest::Approx(n * 30.0));
  CHECK(ve.values(0, 2) == doctest::Approx(n * -15.0));

  ConsensusSeries ps = consensus_error(trace, inv, "power_sharing");
  CHECK(ps.values(0, 0) == doctest::Approx(m * 0.05e6));
  CHECK(ps.values(0, 1) == doctest::Approx(m * 0.1e6));

  SUBCASE("antisymmetric under relabeling") {
    std::swap(trace[0].inv[0], trace[0].inv[1]);
    ConsensusSeries swapped = consensus_error(trace, inv, "freq_energy");
    CHECK(swapped.values(0, 0) == doctest::Approx(-fe.values(0, 0)));
  }

  CHECK_THROWS_WITH_AS(consensus_error(trace, inv, "reserve"),
                       "unknown consensus channel 'reserve' (expected "
                       "freq_energy, volt_energy or power_sharing)",
                       std::invalid_argument);
}

TEST_CASE("metrics windows split at events and report settle times") {
  Scenario sc = load_config("equilibrium_flat.json", {"sim.duration_s=3.0"});
  SimEvent ev;
  ev.kind = SimEvent::Kind::LoadStep;
  ev.t_s = 1.0;
  ev.bus = 0;
  sc.events = {ev};

  double w = sc.omega_nom;
  auto at = [&](double t, double domega) {
    TraceRecord rec;
    rec.t = t;
    rec.inv.resize(3);
    for (auto& i : rec.inv) {
      i.omega = w + domega;
      i.p = 1.2e6;
    }
    return rec;
  };
  std::vector<TraceRecord> trace = {
      at(0.0, 0.0),   at(0.5, 0.0),    at(1.0, 0.01), at(1.5, 0.002),
      at(2.0, 5e-4),  at(2.5, 1e-4),   at(3.0, 0.0)};

  Metrics m = compute_metrics(sc, trace);
  REQUIRE(m.windows.size() == 1);
  CHECK(m.windows[0].t_event == 1.0);
  CHECK(m.windows[0].settle_s == doctest::Approx(0.5));
  CHECK(m.windows[0].band_end == 0.0);
  CHECK(m.windows[0].omega_max == doctest::Approx(w + 0.01));
  CHECK(m.final_max_abs_domega == 0.0);
  CHECK(m.omega_peak == doctest::Approx(w + 0.01));
}

TEST_CASE("a numerically unstable time step aborts the run with a diagnostic") {
  // dt = 0.5 s puts the 50 rad/s measurement filter far outside the RK4
  // stability region, so the state blows up to non-finite within seconds.
  // Loads are constant admittance, which keeps the network solve feasible
  // under any load event; divergence of the integrator is the abort path
  // a config can actually reach.
  Scenario sc = load_config("scenario1_droop_active.json",
                            {"events=[]", "sim.duration_s=60.0",
                             "sim.dt_s=0.5", "sim.decimation_s=0.5",
                             "controller.comm_interval_s=0.5"});
  RunResult res = run(sc);
  CHECK(res.aborted);
  REQUIRE_FALSE(res.diagnostic.empty());
  CHECK(res.diagnostic.find("non-finite") != std::string::npos);
  // Everything up to the failure is preserved.
  CHECK(res.trace.size() >= 4);
  CHECK(res.trace.front().t == 0.0);
  CHECK(res.trace.back().t < 60.0);
}
