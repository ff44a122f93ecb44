#pragma once

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

namespace gfm {

enum class InverterKind { Droop, Vsm };

/// Static parameters of one grid-forming battery inverter.
///
/// Droop gains are stored per-unit on the inverter's own (s_max, v_nom,
/// omega_nom) base and converted to SI at the plant boundary via m_si()/n_si().
struct InverterParams {
  std::string id;
  InverterKind kind = InverterKind::Droop;

  double s_max = 0.0;      // apparent power rating, VA
  double p_set = 0.0;      // active power setpoint, W
  double q_set = 0.0;      // reactive power setpoint, VAR
  double v_nom = 0.0;      // nominal voltage magnitude, V
  double omega_nom = 0.0;  // nominal angular frequency, rad/s

  double m_pu = 0.0;  // P-omega droop slope, per-unit
  double n_pu = 0.0;  // Q-V droop slope, per-unit

  // Virtual-machine constants. Used when kind == Vsm; for droop inverters the
  // effective lag is the power filter, so stability analysis substitutes the
  // filter time constant for both.
  double m_omega = 0.0;  // virtual inertia gain, s
  double tau_v = 0.0;    // voltage loop time constant, s

  double k_i = 0.0;      // frequency-channel consensus integral gain, s
  double kappa_i = 0.0;  // voltage-channel consensus integral gain, s
  double xi = 0.0;       // voltage regulation weight, dimensionless

  double e_capacity = 0.0;  // tertiary active-energy capacity E_c, W*s

  double m_si() const { return m_pu * omega_nom / s_max; }  // rad/(W*s)
  double n_si() const { return n_pu * v_nom / s_max; }      // V/VAR

  /// Throws std::invalid_argument on non-physical values (non-positive
  /// rating/voltage/frequency, negative gains, zero setpoint where a
  /// normalization divides by it).
  void validate() const;
};

/// Dynamic state of one inverter as the simulator tracks it. For droop
/// inverters d_omega and v are algebraic outputs recomputed each step; for
/// VSM they are integrated states.
struct InverterState {
  double delta = 0.0;       // rotor/phasor angle relative to the omega* frame, rad
  double d_omega = 0.0;     // frequency deviation from omega*, rad/s
  double v = 0.0;           // commanded voltage magnitude, V
  double omega_cons = 0.0;  // secondary frequency correction (Omega), rad/s
  double e_cons = 0.0;      // secondary voltage correction (e), V
  double p_filt = 0.0;      // filtered active power, W
  double q_filt = 0.0;      // filtered reactive power, VAR
  double dE = 0.0;          // active regulation energy spent, W*s
  double dF = 0.0;          // reactive regulation energy spent, VAR*s
  double f_capacity = 0.0;  // accumulated reactive headroom F_c, VAR*s

  bool all_finite() const;
};

/// Edge of the communication graph with per-channel weights: a (frequency
/// consensus), b (reactive-power consensus), e (active-energy consensus),
/// f (reactive-energy consensus). Nodes are inverter indices.
struct CommEdge {
  int i = 0;
  int j = 0;
  double a = 0.0;
  double b = 0.0;
  double e = 0.0;
  double f = 0.0;
};

enum class WeightKind { A, B, E, F };

/// Reserve-consensus to base-consensus weight ratios. A ratio is present only
/// when it is uniform across every edge (e_ij = gamma_e * a_ij for all edges,
/// likewise f against b); all-zero numerator channels yield ratio 0.
struct GammaRatios {
  std::optional<double> gamma_e;
  std::optional<double> gamma_f;
};

/// Undirected weighted communication graph over n inverters. Connectivity of
/// the union graph (any positive weight) is required and checked at
/// construction; a violation throws with the disconnected components named.
class CommGraph {
 public:
  /// Connectivity::Allowed skips the connectedness check. Deliberately
  /// partitioned graphs (a node taken offline) still run; consensus then
  /// settles per component.
  enum class Connectivity { Required, Allowed };

  CommGraph(int n, std::vector<CommEdge> edges,
            Connectivity policy = Connectivity::Required);

  int size() const { return n_; }
  const std::vector<CommEdge>& edges() const { return edges_; }

  /// Dense weighted Laplacian for one weight channel. Zero weights are valid
  /// (the base-DAPI configuration has an all-zero e channel and L is the zero
  /// matrix).
  Eigen::MatrixXd laplacian(WeightKind kind) const;

  GammaRatios gamma_ratios() const;

  /// Uniform scaling of one weight channel across all edges (gain-change
  /// events). The new weight replaces the old one on every edge.
  void set_uniform_weight(WeightKind kind, double value);

 private:
  int n_;
  std::vector<CommEdge> edges_;
};

double edge_weight(const CommEdge& e, WeightKind kind);

}  // namespace gfm
