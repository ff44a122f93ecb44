#include <doctest.h>

#include "gfm/network.hpp"

#include <cmath>
#include <random>

using namespace gfm;

namespace {
const double kVnom = 480.0 * std::sqrt(2.0 / 3.0);  // so v_nom^2 == 153600 W/S
}

TEST_CASE("constant-impedance load at nominal voltage draws its rated power") {
  PhasorNetwork net(1, {}, {{0, cplx(0.0, 0.0)}}, kVnom);
  net.add_load_power(0, 1.2e6, 0.6e6);

  const cplx vs(kVnom, 0.0);
  auto res = net.solve_injections({&vs, 1});
  REQUIRE(res.injections.size() == 1);
  CHECK(res.injections[0].p == doctest::Approx(1.2e6).epsilon(1e-12));
  CHECK(res.injections[0].q == doctest::Approx(0.6e6).epsilon(1e-12));
}

TEST_CASE("two sources across a reactance follow the power transfer law") {
  const double x = 0.003;
  PhasorNetwork net(2, {{0, 1, cplx(0.0, x)}}, {{0, {}}, {1, {}}}, kVnom);

  const double d = 0.05;
  const cplx v1 = std::polar(kVnom, d);
  const cplx v2(kVnom, 0.0);
  const cplx src[2] = {v1, v2};
  auto res = net.solve_injections(src);

  const double v2n = kVnom * kVnom;
  CHECK(res.injections[0].p == doctest::Approx(v2n * std::sin(d) / x).epsilon(1e-12));
  CHECK(res.injections[0].q == doctest::Approx(v2n * (1.0 - std::cos(d)) / x).epsilon(1e-12));
  CHECK(res.injections[1].p == doctest::Approx(-v2n * std::sin(d) / x).epsilon(1e-12));
}

TEST_CASE("coupling impedance puts the terminal behind a divider") {
  const cplx zc(0.0005, 0.0015);
  PhasorNetwork net(1, {}, {{0, zc}}, kVnom);
  const cplx yl = (1.5e6 - cplx(0, 1) * 0.3e6) / (kVnom * kVnom);
  net.add_load_admittance(0, yl);

  const cplx vs(kVnom, 0.0);
  auto res = net.solve_injections({&vs, 1});

  const cplx yc = 1.0 / zc;
  const cplx vbus = vs * yc / (yc + yl);
  const cplx s = vs * std::conj((vs - vbus) * yc);
  CHECK(res.injections[0].p == doctest::Approx(s.real()).epsilon(1e-12));
  CHECK(res.injections[0].q == doctest::Approx(s.imag()).epsilon(1e-12));
  CHECK(std::abs(res.v_node(0) - vbus) < 1e-9);
}

TEST_CASE("kron reduction reproduces the full solve at the terminals") {
  PhasorNetwork net(3,
                    {{0, 1, cplx(0.001, 0.002)}, {1, 2, cplx(0.0015, 0.004)}},
                    {{0, cplx(0.0002, 0.0008)}, {2, cplx(0.0, 0.001)}}, kVnom);
  net.add_load_power(1, 0.9e6, 0.35e6);
  net.add_load_power(2, 0.4e6, 0.1e6);

  const Eigen::MatrixXcd yr = net.kron_reduced();
  REQUIRE(yr.rows() == 2);

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> mag(0.95 * kVnom, 1.05 * kVnom);
  std::uniform_real_distribution<double> ang(-0.1, 0.1);
  for (int trial = 0; trial < 5; ++trial) {
    Eigen::Vector2cd e;
    e << std::polar(mag(rng), ang(rng)), std::polar(mag(rng), ang(rng));
    const cplx src[2] = {e(0), e(1)};
    auto res = net.solve_injections(src);

    const Eigen::Vector2cd i = yr * e;
    for (int k = 0; k < 2; ++k) {
      const cplx s = e(k) * std::conj(i(k));
      CHECK(res.injections[k].p == doctest::Approx(s.real()).epsilon(1e-10));
      CHECK(res.injections[k].q == doctest::Approx(s.imag()).epsilon(1e-10));
    }
  }
}

TEST_CASE("negated load event restores injections bit for bit") {
  PhasorNetwork net(2, {{0, 1, cplx(0.001, 0.003)}}, {{0, {}}, {1, {}}}, kVnom);
  net.add_load_power(1, 1.0e6, 0.2e6);

  const cplx src[2] = {cplx(kVnom, 0.0), std::polar(kVnom, 0.02)};
  auto before = net.solve_injections(src);

  // Both buses host ideal sources here, so the load shows up only in the
  // injection of the bus it sits on.
  const cplx step(1.7, -0.4);
  net.add_load_admittance(1, step);
  auto during = net.solve_injections(src);
  CHECK(during.injections[1].p != before.injections[1].p);

  net.add_load_admittance(1, -step);
  auto after = net.solve_injections(src);
  CHECK(after.injections[0].p == before.injections[0].p);
  CHECK(after.injections[0].q == before.injections[0].q);
  CHECK(after.injections[1].p == before.injections[1].p);
  CHECK(after.injections[1].q == before.injections[1].q);
}

TEST_CASE("scalable load interpolates between zero and its full admittance") {
  PhasorNetwork net(1, {}, {{0, {}}}, kVnom);
  const cplx y_full = (2.0e6 - cplx(0, 1) * 0.5e6) / (kVnom * kVnom);
  int slot = net.add_scalable_load(0, y_full);
  CHECK(net.load_scale(slot) == 0.0);

  const cplx vs(kVnom, 0.0);
  auto empty = net.solve_injections({&vs, 1});
  CHECK(empty.injections[0].p == doctest::Approx(0.0));

  net.set_load_scale(slot, 0.5);
  auto half = net.solve_injections({&vs, 1});
  CHECK(half.injections[0].p == doctest::Approx(1.0e6).epsilon(1e-12));
  CHECK(half.injections[0].q == doctest::Approx(0.25e6).epsilon(1e-12));

  net.set_load_scale(slot, 1.0);
  auto full = net.solve_injections({&vs, 1});
  CHECK(full.injections[0].p == doctest::Approx(2.0e6).epsilon(1e-12));
}

TEST_CASE("floating bus makes the reduced system singular") {
  PhasorNetwork net(2, {}, {{0, {}}}, kVnom);
  const cplx vs(kVnom, 0.0);
  CHECK_THROWS_AS(net.solve_injections({&vs, 1}), SolverError);
}

TEST_CASE("construction validates its inputs") {
  CHECK_THROWS_AS(PhasorNetwork(0, {}, {{0, {}}}, kVnom), std::invalid_argument);
  CHECK_THROWS_AS(PhasorNetwork(1, {}, {{0, {}}}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(PhasorNetwork(2, {{0, 2, cplx(0, 0.001)}}, {{0, {}}}, kVnom),
                  std::invalid_argument);
  CHECK_THROWS_AS(PhasorNetwork(2, {{0, 1, cplx(0, 0)}}, {{0, {}}}, kVnom),
                  std::invalid_argument);
  CHECK_THROWS_AS(PhasorNetwork(1, {}, {}, kVnom), std::invalid_argument);
  // Two ideal sources on the same node would fix one voltage twice.
  CHECK_THROWS_AS(PhasorNetwork(1, {}, {{0, {}}, {0, {}}}, kVnom), std::invalid_argument);
}

TEST_CASE("solve validates the source vector length") {
  PhasorNetwork net(1, {}, {{0, {}}}, kVnom);
  const cplx two[2] = {cplx(kVnom, 0.0), cplx(kVnom, 0.0)};
  CHECK_THROWS_AS(net.solve_injections(two), std::invalid_argument);
}
