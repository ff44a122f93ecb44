#include <doctest.h>

#include "gfm/primary.hpp"
#include "test_util.hpp"

#include <cmath>
#include <complex>
#include <stdexcept>

using namespace gfm;
using cplx = std::complex<double>;

TEST_CASE("droop laws with secondary corrections") {
  const InverterParams p = test::reference_inverter();

  // 100 kW above setpoint pulls frequency down by m*dP.
  DroopOutputs out = droop_outputs(p, p.p_set + 1e5, p.q_set, 0.0, 0.0);
  CHECK(out.d_omega == doctest::Approx(-0.2356194490192345).epsilon(1e-14));
  CHECK(out.v == doctest::Approx(p.v_nom).epsilon(1e-14));

  // The consensus corrections add on top of the droop terms.
  out = droop_outputs(p, p.p_set + 1e5, p.q_set - 5e4, 0.1, 2.0);
  CHECK(out.d_omega == doctest::Approx(0.1 - 0.2356194490192345).epsilon(1e-14));
  CHECK(out.v == doctest::Approx(p.v_nom + 2e-5 * 5e4 + 2.0).epsilon(1e-14));

  // A ramped reference shifts only the voltage law.
  out = droop_outputs(p, p.p_set, p.q_set, 0.0, 0.0, 0.9 * p.v_nom);
  CHECK(out.v == doctest::Approx(0.9 * p.v_nom).epsilon(1e-14));
}

TEST_CASE("virtual machine rates") {
  InverterParams p = test::reference_inverter("vsm", InverterKind::Vsm);
  p.m_omega = 1.0;
  p.tau_v = 0.5;

  InverterState s;
  s.d_omega = 0.2;
  s.v = p.v_nom + 5.0;
  s.e_cons = 2.0;
  s.omega_cons = 0.05;

  VsmRates r = vsm_derivatives(p, s, p.p_set + 1e5, p.q_set - 1e4);
  CHECK(r.d_delta == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(r.d_d_omega == doctest::Approx(-0.2 - 0.2356194490192345 + 0.05).epsilon(1e-13));
  // (-5 + 2e-5*1e4 + 2) / 0.5
  CHECK(r.d_v == doctest::Approx(-5.6).epsilon(1e-13));
}

TEST_CASE("power filter settles within 1e-6 of a step in ten time constants") {
  const double omega_c = 50.0;
  const double dt = 0.5 / omega_c;  // twenty steps cover 10/omega_c
  double y = 0.0;
  for (int k = 0; k < 20; ++k) y = lpf_step(y, 1.0, omega_c, dt);
  CHECK(std::abs(y - 1.0) < 1e-6);
  CHECK(y == doctest::Approx(1.0 - std::pow(0.5, 20)).epsilon(1e-15));
}

TEST_CASE("power filter rejects an unstable discretization") {
  CHECK_THROWS_AS(lpf_step(0.0, 1.0, 50.0, 0.04), std::invalid_argument);
  CHECK_NOTHROW(lpf_step(0.0, 1.0, 50.0, 0.039));
}

TEST_CASE("LC filter derivatives vanish at the phasor steady state") {
  LcFilterParams p{0.3e-3, 200e-6, 0.01};
  const double omega = 2.0 * M_PI * 60.0;

  // Pick grid-side conditions, then compute the converter quantities that
  // hold them: i = i_g + j*omega*C*v_g and v = v_g + (r + j*omega*L)*i.
  const cplx v_g(390.0, -12.0);
  const cplx i_g(2100.0, -800.0);
  const cplx jw(0.0, omega);
  const cplx i = i_g + jw * p.c_f * v_g;
  const cplx v = v_g + (p.r_f + jw * p.l_f) * i;

  LcFilterState s;
  s.v_gd = v_g.real();
  s.v_gq = v_g.imag();
  s.i_d = i.real();
  s.i_q = i.imag();
  s.i_gd = i_g.real();
  s.i_gq = i_g.imag();

  LcFilterRates r = lc_filter_derivatives(p, s, v.real(), v.imag(), omega);
  CHECK(std::abs(r.dv_gd) < 1e-6);
  CHECK(std::abs(r.dv_gq) < 1e-6);
  CHECK(std::abs(r.di_d) < 1e-6);
  CHECK(std::abs(r.di_q) < 1e-6);
}

TEST_CASE("LC filter equations term by term") {
  LcFilterParams p{0.5e-3, 100e-6, 0.02};
  LcFilterState s{380.0, 10.0, 1500.0, -200.0, 1450.0, -150.0};
  const double omega = 377.0;

  LcFilterRates r = lc_filter_derivatives(p, s, 385.0, 12.0, omega);
  CHECK(r.dv_gd == doctest::Approx((omega * p.c_f * s.v_gq + s.i_d - s.i_gd) / p.c_f));
  CHECK(r.dv_gq == doctest::Approx((-omega * p.c_f * s.v_gd + s.i_q - s.i_gq) / p.c_f));
  CHECK(r.di_d ==
        doctest::Approx((omega * p.l_f * s.i_q - p.r_f * s.i_d + 385.0 - s.v_gd) / p.l_f));
  CHECK(r.di_q ==
        doctest::Approx((-omega * p.l_f * s.i_d - p.r_f * s.i_q + 12.0 - s.v_gq) / p.l_f));
}
