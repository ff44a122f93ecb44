#include <doctest.h>

#include "gfm/secondary.hpp"
#include "test_util.hpp"

#include <cmath>
#include <thread>
#include <vector>

using namespace gfm;

TEST_CASE("trapezoidal energy accumulation") {
  ReserveState r = make_reserve_state(9.0e9, 100.0, 50.0);
  r = energy_update(r, 200.0, 100.0, 0.1);
  CHECK(r.dE == doctest::Approx(15.0).epsilon(1e-15));
  CHECK(r.dF == doctest::Approx(7.5).epsilon(1e-15));
  CHECK(r.e_unused == doctest::Approx(9.0e9 - 15.0));
  CHECK(r.prev_dp == 200.0);

  // A symmetric excursion integrates back to zero.
  r = energy_update(r, -200.0, -100.0, 0.1);
  r = energy_update(r, 100.0, 50.0, 0.1);
  CHECK(r.dE == doctest::Approx(10.0).epsilon(1e-12));
}

TEST_CASE("reactive headroom accumulates the unused rating circle") {
  // sqrt(2.5e6^2 - 1.5e6^2) = 2e6, minus 0.6e6 of reactive output.
  double fc = reactive_headroom(0.0, 2.5e6, 1.5e6, 0.6e6, 0.01);
  CHECK(fc == doctest::Approx(14000.0).epsilon(1e-15));

  // No headroom when the unit is at or beyond its rating.
  CHECK(reactive_headroom(5.0, 2.5e6, 2.6e6, 0.0, 0.01) == 5.0);
  CHECK(reactive_headroom(5.0, 2.5e6, 1.5e6, 2.1e6, 0.01) == 5.0);
}

TEST_CASE("frequency consensus rate sums neighbor disagreements") {
  const InverterParams p = test::reference_inverter();

  NeighborTerm n1;
  n1.a = 1.0;
  n1.e = 0.5;
  n1.v.omega_cons = 0.04;
  n1.v.m_dE = 0.002;
  NeighborTerm n2;
  n2.a = 2.0;
  n2.e = 0.0;
  n2.v.omega_cons = 0.10;
  const std::vector<NeighborTerm> nbs{n1, n2};

  // k dOmega/dt = -d_omega - 1*(0.06-0.04) - 2*(0.06-0.10) - 0.5*(0.005-0.002)
  const double rate = dapi_freq_rate(p, -0.01, 0.06, 0.005, nbs);
  CHECK(rate == doctest::Approx((0.01 - 0.02 + 0.08 - 0.0015) / 0.05).epsilon(1e-13));
}

TEST_CASE("voltage consensus rate weighs regulation against sharing") {
  const InverterParams p = test::reference_inverter();

  NeighborTerm nb;
  nb.b = 1.0;
  nb.f = 0.05;
  nb.v.q_ratio = 0.9;
  nb.v.n_dF = 0.01;
  const std::vector<NeighborTerm> nbs{nb};

  // kappa de/dt = -xi*dv - b*(qr - qr_j) - f*(ndF - ndF_j)
  const double rate = dapi_volt_rate(p, 2.0, 1.1, 0.03, nbs);
  CHECK(rate == doctest::Approx((-0.1 * 2.0 - 0.2 - 0.05 * 0.02) / 0.05).epsilon(1e-13));
}

TEST_CASE("restored equilibrium carries equal shares") {
  std::vector<InverterParams> fleet{test::reference_inverter("a"), test::reference_inverter("b"),
                                    test::reference_inverter("c")};
  auto pred = steady_state_predict(fleet, 3e5);
  CHECK(pred.omega_bar == fleet[0].omega_nom);
  CHECK(pred.c == doctest::Approx(1e5).epsilon(1e-15));
  // Omega settles at m * c once frequency is back at nominal.
  for (double w : pred.omega_cons_bar)
    CHECK(w == doctest::Approx(0.2356194490192345).epsilon(1e-12));

  fleet[1].m_pu *= 2.0;
  CHECK_THROWS_AS(steady_state_predict(fleet, 3e5), std::invalid_argument);
}

TEST_CASE("consensus rates vanish on the agreement manifold") {
  // Equal corrections, zero deviations, equal scaled reserves: every rate is
  // exactly zero, which is what makes the restored point an equilibrium.
  const InverterParams p = test::reference_inverter();
  NeighborTerm nb;
  nb.a = nb.b = 1.0;
  nb.e = 0.5;
  nb.f = 0.05;
  nb.v.omega_cons = 0.3;
  nb.v.q_ratio = 1.2;
  nb.v.m_dE = 0.07;
  nb.v.n_dF = 0.04;
  const std::vector<NeighborTerm> nbs{nb, nb};

  CHECK(dapi_freq_rate(p, 0.0, 0.3, 0.07, nbs) == 0.0);
  CHECK(dapi_volt_rate(p, 0.0, 1.2, 0.04, nbs) == 0.0);
}

TEST_CASE("neighbor view keeps the freshest message per sender") {
  NeighborView view({"inv2", "inv3"});

  NeighborValues v;
  v.omega_cons = 0.1;
  v.seq = 5;
  CHECK(view.accept("inv2", v));
  CHECK_FALSE(view.accept("inv9", v));  // unknown sender

  NeighborValues stale;
  stale.omega_cons = 0.2;
  stale.seq = 4;
  CHECK_FALSE(view.accept("inv2", stale));
  CHECK(view.latest("inv2")->omega_cons == 0.1);

  NeighborValues fresh;
  fresh.omega_cons = 0.3;
  fresh.seq = 6;
  CHECK(view.accept("inv2", fresh));
  CHECK(view.latest("inv2")->omega_cons == 0.3);

  CHECK_FALSE(view.latest("inv3").has_value());
  CHECK(view.snapshot().size() == 1);
}

TEST_CASE("neighbor view tolerates concurrent senders") {
  NeighborView view({"a", "b"});
  auto feed = [&view](const std::string& id) {
    for (long s = 0; s < 2000; ++s) {
      NeighborValues v;
      v.omega_cons = double(s);
      v.seq = s;
      view.accept(id, v);
    }
  };
  std::thread ta(feed, "a");
  std::thread tb(feed, "b");
  ta.join();
  tb.join();
  CHECK(view.latest("a")->seq == 1999);
  CHECK(view.latest("b")->seq == 1999);
}

TEST_CASE("tick kernel: begin publishes tick-start values and folds reserves") {
  const InverterParams p = test::reference_inverter();
  SecondaryTickState s;
  s.omega_cons = 0.12;
  s.e_cons = -1.5;
  s.reserve = make_reserve_state(p.e_capacity, 1e5, -2e4);

  TickEmit e = secondary_tick_begin(p, s, p.p_set + 1e5, p.q_set - 2e4, 0.001);
  CHECK(e.omega_cons == 0.12);  // published before integration
  CHECK(e.e_cons == -1.5);
  CHECK(s.reserve.dE == doctest::Approx(100.0).epsilon(1e-13));  // trapezoid of a flat 1e5
  CHECK(s.reserve.dF == doctest::Approx(-20.0).epsilon(1e-13));
  CHECK(e.m_dE == doctest::Approx(p.m_si() * 100.0).epsilon(1e-13));
  CHECK(e.q_ratio == doctest::Approx((p.q_set - 2e4) / p.q_set).epsilon(1e-15));
  CHECK(s.reserve.f_capacity > 0.0);
}

TEST_CASE("tick kernel: isolated inverter steps at the frozen droop rate") {
  // The reconstructed deviation holds its tick-start value, mirroring the
  // plant's zero-order-hold actuation. With no neighbors the rate is exactly
  // constant over the tick: k dOmega/dt = m dP - Omega(t_k).
  const InverterParams p = test::reference_inverter();
  const double dp = 1e5;

  SecondaryTickState s;
  s.omega_cons = 0.0;
  s.reserve = make_reserve_state(p.e_capacity);

  const double dt = 0.001;
  secondary_tick_integrate(p, s, p.p_set + dp, p.q_set, {}, dt);
  CHECK(s.omega_cons ==
        doctest::Approx(dt * p.m_si() * dp / p.k_i).epsilon(1e-14));
}

TEST_CASE("tick kernel: neighbor coupling integrates the live correction") {
  // One neighbor with unit weight: k dOmega/dt = -d_hat - (Omega - Omega_j),
  // a linear pull toward (Omega_j - d_hat) that RK4 tracks to its order.
  const InverterParams p = test::reference_inverter();

  NeighborTerm nb;
  nb.a = 1.0;
  nb.v.omega_cons = 0.08;
  const std::vector<NeighborTerm> nbs{nb};

  SecondaryTickState s;
  s.omega_cons = 0.02;
  s.reserve = make_reserve_state(p.e_capacity);

  const double dp = 1e5;
  const double d_hat = -p.m_si() * dp + s.omega_cons;
  const double target = nb.v.omega_cons - d_hat;

  const double dt = 0.001;
  secondary_tick_integrate(p, s, p.p_set + dp, p.q_set, nbs, dt);

  const double exact = target + (0.02 - target) * std::exp(-dt / p.k_i);
  CHECK(std::abs(s.omega_cons - exact) < 1e-10);
}

TEST_CASE("tick kernel: voltage channel advances at a constant rate") {
  InverterParams p = test::reference_inverter();
  p.xi = 0.1;
  SecondaryTickState s;
  s.e_cons = 0.5;
  s.reserve = make_reserve_state(p.e_capacity);

  // dv_hat = -n*dq + e_cons = -2e-5*(-5e4) + 0.5 = 1.5
  // rate = -xi*dv_hat / kappa = -0.15/0.05 = -3 V/s
  secondary_tick_integrate(p, s, p.p_set, p.q_set - 5e4, {}, 0.01);
  CHECK(s.e_cons == doctest::Approx(0.5 - 0.03).epsilon(1e-13));
}
