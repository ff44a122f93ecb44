#include "gfm/stability.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace gfm {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(12);
  os << v;
  return os.str();
}

}  // namespace

ProjectionPair projection(int n) {
  if (n < 2) throw std::invalid_argument("projection needs at least two inverters");
  ProjectionPair pr;
  pr.r = Eigen::MatrixXd::Zero(n - 1, n);
  for (int k = 1; k < n; ++k) {
    const double s = 1.0 / std::sqrt(double(k) * (k + 1));
    for (int j = 0; j < k; ++j) pr.r(k - 1, j) = s;
    pr.r(k - 1, k) = -double(k) * s;
  }
  pr.pi = Eigen::MatrixXd::Identity(n, n) - Eigen::MatrixXd::Constant(n, n, 1.0 / n);
  return pr;
}

LinearizedPower linearize_power(const PhasorNetwork& net, const OperatingPoint& op) {
  if (!op.converged)
    throw std::invalid_argument("operating point did not converge (residual " +
                                fmt(op.residual) + "), refusing to linearize");
  const Eigen::MatrixXcd y_red = net.kron_reduced();
  const int n = int(y_red.rows());
  if (op.sources.size() != n)
    throw std::invalid_argument("operating point has " + std::to_string(op.sources.size()) +
                                " phasors but the network exposes " + std::to_string(n) +
                                " terminals");

  const Eigen::VectorXcd& e = op.sources;
  const Eigen::VectorXcd i_inj = y_red * e;
  const cplx jj(0.0, 1.0);

  LinearizedPower lin;
  lin.l_p.resize(n, n);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < n; ++k) {
      cplx ds;
      if (k == i) {
        ds = jj * e(i) * std::conj(i_inj(i)) - jj * e(i) * std::conj(y_red(i, i) * e(i));
      } else {
        ds = -jj * e(i) * std::conj(y_red(i, k) * e(k));
      }
      lin.l_p(i, k) = ds.real();
    }
  }

  // Susceptance-based reactive sensitivity, evaluated at the voltage
  // magnitudes of the operating point.
  const Eigen::MatrixXd y_bar = -y_red.imag();
  const Eigen::VectorXd v_bar = e.cwiseAbs();
  lin.l_q = v_bar.asDiagonal() * y_bar;
  lin.l_q += (y_bar * v_bar).asDiagonal().toDenseMatrix();

  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(n);
  const double np = lin.l_p.norm();
  const double nq = lin.l_q.norm();
  lin.l_p_rowsum_rel = np > 0 ? (lin.l_p * ones).norm() / np : 0.0;
  lin.l_q_rowsum_rel = nq > 0 ? (lin.l_q * ones).norm() / nq : 0.0;
  return lin;
}

std::array<double, 5> freq_char_poly(double lambda_a, double lambda_p, const FreqGains& g) {
  if (lambda_a <= 0.0 || lambda_p <= 0.0)
    throw std::invalid_argument("frequency mode needs positive eigenvalues, got lambda_a=" +
                                fmt(lambda_a) + " lambda_p=" + fmt(lambda_p));
  if (g.k_i <= 0.0 || g.m_omega <= 0.0 || g.m <= 0.0)
    throw std::invalid_argument("frequency gains k_i, m_omega, m must be positive");
  return {g.k_i * g.m_omega,
          g.k_i + g.m_omega * lambda_a,
          lambda_a + g.m * g.k_i * lambda_p + 1.0,
          g.m * lambda_a * lambda_p,
          g.m * g.gamma_e * lambda_a * lambda_p};
}

std::array<double, 4> volt_char_poly(double lambda_b, double lambda_q, const VoltGains& g) {
  if (lambda_b <= 0.0 || lambda_q <= 0.0)
    throw std::invalid_argument("voltage mode needs positive eigenvalues, got lambda_b=" +
                                fmt(lambda_b) + " lambda_q=" + fmt(lambda_q));
  if (g.kappa_i <= 0.0 || g.tau_v <= 0.0 || g.n <= 0.0 || g.q_star == 0.0)
    throw std::invalid_argument("voltage gains kappa_i, tau_v, n must be positive and Q* nonzero");
  return {g.kappa_i * g.tau_v,
          g.kappa_i * (1.0 + g.n * lambda_q),
          g.beta + lambda_b * lambda_q / g.q_star,
          g.n * g.gamma_f * lambda_b * lambda_q};
}

RhResult routh_hurwitz(std::span<const double> coeffs) {
  if (coeffs.empty() || coeffs.size() > 5)
    throw std::invalid_argument("routh_hurwitz handles degrees zero through four");
  if (coeffs[0] <= 0.0)
    throw std::invalid_argument("leading coefficient must be positive, got " + fmt(coeffs[0]));

  RhResult res;
  // Exact zeros at the tail are roots at the origin; split them off and judge
  // the remaining polynomial.
  size_t len = coeffs.size();
  while (len > 1 && coeffs[len - 1] == 0.0) {
    --len;
    ++res.zero_roots;
  }
  const std::span<const double> a = coeffs.subspan(0, len);

  res.reduced_stable = true;
  for (size_t i = 1; i < a.size(); ++i) {
    if (a[i] <= 0.0) {
      res.reduced_stable = false;
      res.violated = "alpha" + std::to_string(i) + " <= 0";
      break;
    }
  }
  if (res.reduced_stable) {
    if (a.size() == 4 && a[1] * a[2] <= a[0] * a[3]) {
      res.reduced_stable = false;
      res.violated = "alpha1*alpha2 <= alpha0*alpha3";
    } else if (a.size() == 5) {
      if (a[1] * a[2] <= a[0] * a[3]) {
        res.reduced_stable = false;
        res.violated = "alpha1*alpha2 <= alpha0*alpha3";
      } else if (a[1] * a[2] * a[3] <= a[1] * a[1] * a[4] + a[0] * a[3] * a[3]) {
        res.reduced_stable = false;
        res.violated = "alpha1*alpha2*alpha3 <= alpha1^2*alpha4 + alpha0*alpha3^2";
      }
    }
  }
  res.stable = res.reduced_stable && res.zero_roots == 0;
  if (res.stable == false && res.violated.empty())
    res.violated = "root at the origin (trailing zero coefficient)";
  return res;
}

std::vector<std::complex<double>> poly_roots(std::span<const double> coeffs) {
  if (coeffs.size() < 2)
    return {};
  if (coeffs[0] == 0.0)
    throw std::invalid_argument("poly_roots needs a nonzero leading coefficient");
  const int d = int(coeffs.size()) - 1;
  Eigen::MatrixXd comp = Eigen::MatrixXd::Zero(d, d);
  for (int i = 0; i < d; ++i) comp(0, i) = -coeffs[i + 1] / coeffs[0];
  for (int i = 1; i < d; ++i) comp(i, i - 1) = 1.0;
  Eigen::EigenSolver<Eigen::MatrixXd> es(comp, false);
  std::vector<std::complex<double>> roots(d);
  for (int i = 0; i < d; ++i) roots[i] = es.eigenvalues()(i);
  return roots;
}

GainBounds gain_bounds(double k_i, double m_omega, double n, double tau_v, double q_star,
                       double gamma_e, double gamma_f) {
  if (gamma_e < 0.0 || gamma_f < 0.0)
    throw std::invalid_argument("gamma ratios must be nonnegative");
  GainBounds gb;
  const double e_bound = gamma_e > 0.0 ? 1.0 / gamma_e : kInf;
  gb.k_i = {k_i, e_bound, k_i <= e_bound, e_bound - k_i};
  gb.m_omega = {m_omega, e_bound, m_omega <= e_bound, e_bound - m_omega};
  // Reactive reserve coupling: 1/Q* >= n tau_v gamma_f.
  const double lhs = 1.0 / std::abs(q_star);
  const double rhs = n * tau_v * gamma_f;
  gb.q_star = {rhs, lhs, lhs >= rhs, lhs - rhs};
  return gb;
}

namespace {

double offdiag_rel(const Eigen::MatrixXd& d, double ref) {
  Eigen::MatrixXd off = d;
  off.diagonal().setZero();
  return ref > 0 ? off.norm() / ref : off.norm();
}

}  // namespace

ModalPairs modal_pairs(const Eigen::MatrixXd& a_perp, const Eigen::MatrixXd& b_perp) {
  if (a_perp.rows() != a_perp.cols() || b_perp.rows() != b_perp.cols() ||
      a_perp.rows() != b_perp.rows())
    throw std::invalid_argument("modal_pairs needs square matrices of equal size");

  ModalPairs mp;
  const double na = a_perp.norm();
  const double nb = b_perp.norm();
  const Eigen::MatrixXd comm = a_perp * b_perp - b_perp * a_perp;
  mp.commutator_rel = (na > 0 && nb > 0) ? comm.norm() / (na * nb) : 0.0;
  if (mp.commutator_rel >= 1e-6) return mp;

  const Eigen::MatrixXd sa = 0.5 * (a_perp + a_perp.transpose());
  const Eigen::MatrixXd sb = 0.5 * (b_perp + b_perp.transpose());
  // A random-ish shift separates the spectrum of the pencil so one eigenbasis
  // diagonalizes both matrices; retry with other shifts on unlucky ties.
  for (double t : {0.6180339887498949, 0.3819660112501051, 1.0}) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sa + t * sb);
    const Eigen::MatrixXd& u = es.eigenvectors();
    const Eigen::MatrixXd da = u.transpose() * sa * u;
    const Eigen::MatrixXd db = u.transpose() * sb * u;
    if (offdiag_rel(da, na) < 1e-7 && offdiag_rel(db, nb) < 1e-7) {
      mp.commuting = true;
      const int n = int(da.rows());
      mp.pairs.reserve(n);
      for (int i = 0; i < n; ++i) mp.pairs.emplace_back(da(i, i), db(i, i));
      std::sort(mp.pairs.begin(), mp.pairs.end());
      return mp;
    }
  }
  return mp;
}

namespace {

Eigen::MatrixXd project(const Eigen::MatrixXd& m, const ProjectionPair& pr) {
  if (m.rows() != pr.r.cols() || m.cols() != pr.r.cols())
    throw std::invalid_argument("matrix size " + std::to_string(m.rows()) +
                                " does not match projection over " +
                                std::to_string(pr.r.cols()) + " inverters");
  return pr.r * m * pr.r.transpose();
}

}  // namespace

Eigen::MatrixXd assemble_freq(const Eigen::MatrixXd& l_p, const Eigen::MatrixXd& l_a,
                              const Eigen::MatrixXd& l_e, const FreqGains& g,
                              const ProjectionPair& pr) {
  if (g.k_i <= 0.0 || g.m_omega <= 0.0 || g.m <= 0.0)
    throw std::invalid_argument("frequency gains k_i, m_omega, m must be positive");
  const Eigen::MatrixXd lp = project(l_p, pr);
  const Eigen::MatrixXd la = project(l_a, pr);
  const Eigen::MatrixXd le = project(l_e, pr);
  const int w = int(pr.r.rows());
  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(w, w);

  // States per block: angle, frequency deviation, consensus correction,
  // scaled regulation energy m*dE (the scaling keeps the spectrum well
  // conditioned in SI units).
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(4 * w, 4 * w);
  a.block(0, w, w, w) = id;
  a.block(w, 0, w, w) = -(g.m / g.m_omega) * lp;
  a.block(w, w, w, w) = -(1.0 / g.m_omega) * id;
  a.block(w, 2 * w, w, w) = (1.0 / g.m_omega) * id;
  a.block(2 * w, w, w, w) = -(1.0 / g.k_i) * id;
  a.block(2 * w, 2 * w, w, w) = -(1.0 / g.k_i) * la;
  a.block(2 * w, 3 * w, w, w) = -(1.0 / g.k_i) * le;
  a.block(3 * w, 0, w, w) = g.m * lp;
  return a;
}

Eigen::MatrixXd assemble_volt(const Eigen::MatrixXd& l_q, const Eigen::MatrixXd& l_b,
                              const Eigen::MatrixXd& l_f, const VoltGains& g,
                              const ProjectionPair& pr) {
  if (g.kappa_i <= 0.0 || g.tau_v <= 0.0 || g.n <= 0.0 || g.q_star == 0.0)
    throw std::invalid_argument("voltage gains kappa_i, tau_v, n must be positive and Q* nonzero");
  const Eigen::MatrixXd lq = project(l_q, pr);
  const Eigen::MatrixXd lb = project(l_b, pr);
  const Eigen::MatrixXd lf = project(l_f, pr);
  const int w = int(pr.r.rows());
  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(w, w);

  // States per block: voltage deviation, consensus correction, scaled
  // reactive reserve n*dF.
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(3 * w, 3 * w);
  a.block(0, 0, w, w) = -(id + g.n * lq) / g.tau_v;
  a.block(0, w, w, w) = id / g.tau_v;
  a.block(w, 0, w, w) = -(g.beta * id + lb * lq / g.q_star) / g.kappa_i;
  a.block(w, 2 * w, w, w) = -lf / g.kappa_i;
  a.block(2 * w, 0, w, w) = g.n * lq;
  return a;
}

std::vector<std::complex<double>> eigenvalues(const Eigen::MatrixXd& m) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(m, false);
  std::vector<std::complex<double>> ev(m.rows());
  for (int i = 0; i < m.rows(); ++i) ev[i] = es.eigenvalues()(i);
  std::sort(ev.begin(), ev.end(), [](const auto& x, const auto& y) {
    if (x.real() != y.real()) return x.real() > y.real();
    return x.imag() > y.imag();
  });
  return ev;
}

EffectiveGains effective_gains(std::span<const InverterParams> inverters, double lpf_cutoff) {
  if (inverters.empty()) throw std::invalid_argument("no inverters given");

  auto effective = [&](const InverterParams& p) {
    EffectiveGains g;
    g.k_i = p.k_i;
    g.kappa_i = p.kappa_i;
    if (p.kind == InverterKind::Vsm) {
      g.m_omega = p.m_omega;
      g.tau_v = p.tau_v;
    } else {
      if (lpf_cutoff <= 0.0)
        throw std::invalid_argument("droop analysis needs a positive power filter cutoff");
      g.m_omega = 1.0 / lpf_cutoff;
      g.tau_v = 1.0 / lpf_cutoff;
    }
    g.m_si = p.m_si();
    g.n_si = p.n_si();
    g.beta = p.xi;
    g.q_star = p.q_set;
    return g;
  };

  const EffectiveGains ref = effective(inverters[0]);
  auto close = [](double x, double y) {
    return std::abs(x - y) <= 1e-9 * std::max({std::abs(x), std::abs(y), 1e-30});
  };
  for (size_t i = 1; i < inverters.size(); ++i) {
    const EffectiveGains g = effective(inverters[i]);
    const char* field = nullptr;
    if (!close(g.k_i, ref.k_i)) field = "k_i";
    else if (!close(g.kappa_i, ref.kappa_i)) field = "kappa_i";
    else if (!close(g.m_omega, ref.m_omega)) field = "m_omega";
    else if (!close(g.tau_v, ref.tau_v)) field = "tau_v";
    else if (!close(g.m_si, ref.m_si)) field = "m (SI droop slope)";
    else if (!close(g.n_si, ref.n_si)) field = "n (SI droop slope)";
    else if (!close(g.beta, ref.beta)) field = "xi";
    else if (!close(g.q_star, ref.q_star)) field = "Q*";
    if (field)
      throw std::invalid_argument(std::string("stability certification assumes homogeneous "
                                              "gains, but ") +
                                  field + " differs between inverter '" + inverters[0].id +
                                  "' and '" + inverters[i].id + "'");
  }
  return ref;
}

namespace {

SpectrumReport spectrum_report(const Eigen::MatrixXd& a) {
  SpectrumReport sr;
  sr.values = eigenvalues(a);
  double scale = 0.0;
  for (const auto& ev : sr.values) scale = std::max(scale, std::abs(ev));
  const double tol = 1e-9 * std::max(1.0, scale);
  sr.max_real = -kInf;
  for (const auto& ev : sr.values) {
    if (std::abs(ev) < tol) {
      ++sr.structural_zeros;
    } else {
      sr.max_real = std::max(sr.max_real, ev.real());
    }
  }
  return sr;
}

bool rh_pass(const RhResult& rh) {
  return rh.stable || (rh.zero_roots > 0 && rh.reduced_stable);
}

}  // namespace

StabilityReport build_stability_report(const PhasorNetwork& net, const OperatingPoint& op,
                                       const CommGraph& graph,
                                       std::span<const InverterParams> inverters,
                                       double lpf_cutoff) {
  const int n = int(inverters.size());
  if (graph.size() != n)
    throw std::invalid_argument("comm graph covers " + std::to_string(graph.size()) +
                                " nodes but " + std::to_string(n) + " inverters are defined");

  StabilityReport rep;
  const EffectiveGains gains = effective_gains(inverters, lpf_cutoff);
  rep.linearization = linearize_power(net, op);

  const GammaRatios ratios = graph.gamma_ratios();
  if (!ratios.gamma_e || !ratios.gamma_f)
    throw std::invalid_argument("certification needs uniform edge weight ratios e/a and f/b "
                                "across the comm graph");
  rep.gamma_e = *ratios.gamma_e;
  rep.gamma_f = *ratios.gamma_f;

  const ProjectionPair pr = projection(n);
  const Eigen::MatrixXd l_a = graph.laplacian(WeightKind::A);
  const Eigen::MatrixXd l_b = graph.laplacian(WeightKind::B);
  const Eigen::MatrixXd l_e = graph.laplacian(WeightKind::E);
  const Eigen::MatrixXd l_f = graph.laplacian(WeightKind::F);

  const FreqGains fg{gains.k_i, gains.m_omega, gains.m_si, rep.gamma_e};
  const VoltGains vg{gains.kappa_i, gains.tau_v, gains.n_si,
                     gains.q_star, gains.beta,   rep.gamma_f};

  const ModalPairs mf = modal_pairs(project(l_a, pr), project(rep.linearization.l_p, pr));
  const ModalPairs mv = modal_pairs(project(l_b, pr), project(rep.linearization.l_q, pr));
  rep.freq_commutator_rel = mf.commutator_rel;
  rep.volt_commutator_rel = mv.commutator_rel;
  rep.modal_available = mf.commuting && mv.commuting;

  if (mf.commuting) {
    for (const auto& [la, lp] : mf.pairs) {
      ModeReport mr;
      mr.lambda_graph = la;
      mr.lambda_network = lp;
      const auto a = freq_char_poly(la, lp, fg);
      mr.alpha.assign(a.begin(), a.end());
      mr.rh = routh_hurwitz(mr.alpha);
      rep.freq_modes.push_back(std::move(mr));
    }
  }
  if (mv.commuting) {
    for (const auto& [lb, lq] : mv.pairs) {
      ModeReport mr;
      mr.lambda_graph = lb;
      mr.lambda_network = lq;
      const auto a = volt_char_poly(lb, lq, vg);
      mr.alpha.assign(a.begin(), a.end());
      mr.rh = routh_hurwitz(mr.alpha);
      rep.volt_modes.push_back(std::move(mr));
    }
  }

  rep.bounds = gain_bounds(gains.k_i, gains.m_omega, gains.n_si, gains.tau_v, gains.q_star,
                           rep.gamma_e, rep.gamma_f);
  rep.freq_spectrum = spectrum_report(assemble_freq(rep.linearization.l_p, l_a, l_e, fg, pr));
  rep.volt_spectrum = spectrum_report(assemble_volt(rep.linearization.l_q, l_b, l_f, vg, pr));

  rep.all_rh_pass = rep.modal_available;
  for (const auto& m : rep.freq_modes) rep.all_rh_pass = rep.all_rh_pass && rh_pass(m.rh);
  for (const auto& m : rep.volt_modes) rep.all_rh_pass = rep.all_rh_pass && rh_pass(m.rh);
  rep.all_bounds_pass = rep.bounds.k_i.pass && rep.bounds.m_omega.pass && rep.bounds.q_star.pass;
  rep.spectra_stable = rep.freq_spectrum.max_real < 0.0 && rep.volt_spectrum.max_real < 0.0;
  return rep;
}

}  // namespace gfm
