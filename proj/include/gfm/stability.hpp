#pragma once

#include "gfm/model.hpp"
#include "gfm/network.hpp"

#include <array>
#include <complex>
#include <span>
#include <string>
#include <vector>

namespace gfm {

/// Disagreement-space projection: R stacks an orthonormal basis of the
/// subspace orthogonal to 1, Pi = I - 11^T/N. Built deterministically
/// (Helmert rows) so reports are reproducible.
struct ProjectionPair {
  Eigen::MatrixXd r;   // (N-1) x N
  Eigen::MatrixXd pi;  // N x N
};

ProjectionPair projection(int n);

/// Converged network operating point: terminal voltage phasors in tap order.
struct OperatingPoint {
  Eigen::VectorXcd sources;
  bool converged = false;
  double residual = 0.0;
};

struct LinearizedPower {
  Eigen::MatrixXd l_p;  // dP/d delta at the inverter terminals, W/rad
  Eigen::MatrixXd l_q;  // dQ/dV per [V]Y + [YV], VAR/V
  // Laplacian-likeness diagnostics: ||L 1||_2 / ||L||_F. Near zero for a
  // lossless network; grows with losses and shunt loading.
  double l_p_rowsum_rel = 0.0;
  double l_q_rowsum_rel = 0.0;
};

/// Analytic Jacobians of the injected powers on the Kron-reduced terminal
/// network at the given operating point.
LinearizedPower linearize_power(const PhasorNetwork& net, const OperatingPoint& op);

struct FreqGains {
  double k_i = 0.0;      // s
  double m_omega = 0.0;  // s (filter time constant for droop plants)
  double m = 0.0;        // rad/(W*s)
  double gamma_e = 0.0;
};

struct VoltGains {
  double kappa_i = 0.0;  // s
  double tau_v = 0.0;    // s
  double n = 0.0;        // V/VAR
  double q_star = 0.0;   // VAR
  double beta = 0.0;     // voltage regulation gain (xi)
  double gamma_f = 0.0;
};

/// Frequency-channel modal quartic, highest degree first:
///   a0 = k m_w, a1 = k + m_w l_a, a2 = l_a + m k l_p + 1,
///   a3 = m l_a l_p, a4 = m gamma_e l_a l_p.
std::array<double, 5> freq_char_poly(double lambda_a, double lambda_p, const FreqGains& g);

/// Voltage-channel modal cubic:
///   a0 = kappa tau_v, a1 = kappa (1 + n l_q),
///   a2 = beta + l_b l_q / Q*, a3 = n gamma_f l_b l_q.
std::array<double, 4> volt_char_poly(double lambda_b, double lambda_q, const VoltGains& g);

/// Routh-Hurwitz verdict for polynomials up to degree four, coefficients
/// highest degree first, leading coefficient positive. Exact zero trailing
/// coefficients are factored out as roots at the origin; `stable` demands a
/// strictly left-half-plane spectrum, `reduced_stable` judges the polynomial
/// with those origin roots removed.
struct RhResult {
  bool stable = false;
  bool reduced_stable = false;
  int zero_roots = 0;
  std::string violated;  // first failed inequality, empty if none
};

RhResult routh_hurwitz(std::span<const double> coeffs);

/// Roots via the companion matrix of the monic polynomial; the numeric oracle
/// the Routh-Hurwitz conditions are cross-checked against.
std::vector<std::complex<double>> poly_roots(std::span<const double> coeffs);

struct BoundCheck {
  double value = 0.0;
  double bound = 0.0;
  bool pass = false;
  double margin = 0.0;  // bound - value (or lhs - rhs for the Q* bound)
};

struct GainBounds {
  BoundCheck k_i;       // k_i <= 1/gamma_e
  BoundCheck m_omega;   // m_omega <= 1/gamma_e
  BoundCheck q_star;    // 1/Q* >= n tau_v gamma_f
};

GainBounds gain_bounds(double k_i, double m_omega, double n, double tau_v, double q_star,
                       double gamma_e, double gamma_f);

/// Simultaneous modal decomposition of a commuting Laplacian pair. When the
/// relative commutator exceeds 1e-6 (or no common eigenbasis is found),
/// `commuting` is false and the pairs are empty; callers then fall back to
/// the assembled eigenvalue check.
struct ModalPairs {
  bool commuting = false;
  double commutator_rel = 0.0;
  std::vector<std::pair<double, double>> pairs;  // (lambda of A, lambda of B) per mode
};

ModalPairs modal_pairs(const Eigen::MatrixXd& a_perp, const Eigen::MatrixXd& b_perp);

/// Disagreement-space state matrix of the frequency channel,
/// x = [delta, d_omega, Omega, m*dE] (each projected), dimension 4(N-1).
Eigen::MatrixXd assemble_freq(const Eigen::MatrixXd& l_p, const Eigen::MatrixXd& l_a,
                              const Eigen::MatrixXd& l_e, const FreqGains& g,
                              const ProjectionPair& pr);

/// Voltage channel, x = [dV, e, n*dF] projected, dimension 3(N-1).
Eigen::MatrixXd assemble_volt(const Eigen::MatrixXd& l_q, const Eigen::MatrixXd& l_b,
                              const Eigen::MatrixXd& l_f, const VoltGains& g,
                              const ProjectionPair& pr);

std::vector<std::complex<double>> eigenvalues(const Eigen::MatrixXd& m);

struct ModeReport {
  double lambda_graph = 0.0;    // consensus Laplacian eigenvalue
  double lambda_network = 0.0;  // L_P or L_Q eigenvalue
  std::vector<double> alpha;
  RhResult rh;
};

struct SpectrumReport {
  std::vector<std::complex<double>> values;
  double max_real = 0.0;     // excluding structural zeros
  int structural_zeros = 0;  // |lambda| below tolerance
};

/// Homogeneous controller gains extracted from a fleet; droop plants
/// substitute the power-filter time constant for m_omega/tau_v. Throws if any
/// gain differs across inverters (the certification derivation assumes
/// homogeneity).
struct EffectiveGains {
  double k_i = 0.0, kappa_i = 0.0;
  double m_omega = 0.0, tau_v = 0.0;
  double m_si = 0.0, n_si = 0.0;
  double beta = 0.0;    // = xi
  double q_star = 0.0;  // VAR
};

EffectiveGains effective_gains(std::span<const InverterParams> inverters, double lpf_cutoff);

struct StabilityReport {
  double gamma_e = 0.0;
  double gamma_f = 0.0;
  bool modal_available = false;  // gamma-uniform graph and commuting pairs
  double freq_commutator_rel = 0.0;
  double volt_commutator_rel = 0.0;
  std::vector<ModeReport> freq_modes;
  std::vector<ModeReport> volt_modes;
  GainBounds bounds;
  SpectrumReport freq_spectrum;
  SpectrumReport volt_spectrum;
  LinearizedPower linearization;
  bool all_rh_pass = false;      // every mode strictly stable modulo structural zeros
  bool all_bounds_pass = false;
  bool spectra_stable = false;   // max real parts < 0 excluding structural zeros
};

StabilityReport build_stability_report(const PhasorNetwork& net, const OperatingPoint& op,
                                       const CommGraph& graph,
                                       std::span<const InverterParams> inverters,
                                       double lpf_cutoff);

}  // namespace gfm
