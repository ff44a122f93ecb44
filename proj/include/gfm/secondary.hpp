#pragma once

#include "gfm/model.hpp"

#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace gfm {

/// Regulation-energy bookkeeping for one inverter. dE/dF accumulate the
/// inadvertent energy exchange; the unused reserves follow by identity from
/// the fixed active capacity and the accumulated reactive headroom.
struct ReserveState {
  double dE = 0.0;          // W*s
  double dF = 0.0;          // VAR*s
  double e_capacity = 0.0;  // fixed active capacity, W*s
  double e_unused = 0.0;    // e_capacity - dE
  double f_capacity = 0.0;  // accumulated reactive headroom, VAR*s
  double f_unused = 0.0;    // f_capacity - dF

  // Previous deviation samples for the trapezoidal update.
  double prev_dp = 0.0;
  double prev_dq = 0.0;
};

/// Initializes reserves at the start of a run. dp0/dq0 seed the trapezoid so
/// a signal that is already nonzero at t=0 integrates without a first-step
/// bias.
ReserveState make_reserve_state(double e_capacity, double dp0 = 0.0, double dq0 = 0.0);

/// Trapezoidal accumulation of the energy imbalances over one sample interval,
/// with the unused reserves recomputed. Integrators are never reset.
ReserveState energy_update(ReserveState r, double dp, double dq, double dt);

/// One rectangle of reactive headroom accumulation:
///   f_capacity += max(sqrt(max(s_max^2 - p^2, 0)) - |q|, 0) * dt.
/// The inner clamp covers transients that momentarily exceed the rating.
double reactive_headroom(double f_capacity, double s_max, double p_inst, double q_inst,
                         double dt);

/// Latest values heard from one neighbor.
struct NeighborValues {
  double omega_cons = 0.0;  // rad/s
  double q_ratio = 0.0;     // Q_j / Q_j*, dimensionless
  double m_dE = 0.0;        // m_j * dE_j, rad/s * s
  double n_dF = 0.0;        // n_j * dF_j, V * s
  double t = 0.0;           // sender timestamp, s
  long seq = -1;
};

/// One neighbor's contribution to the consensus sums: the edge weights toward
/// it plus its latest values. Callers omit neighbors never heard from
/// (zero-order hold applies only once a value exists).
struct NeighborTerm {
  double a = 0.0;
  double b = 0.0;
  double e = 0.0;
  double f = 0.0;
  NeighborValues v;
};

/// Frequency-channel consensus rate:
///   k_i dOmega/dt = -d_omega - sum_j a_ij (Omega_i - Omega_j)
///                           - sum_j e_ij (m_i dE_i - m_j dE_j)
double dapi_freq_rate(const InverterParams& p, double d_omega, double omega_cons, double m_dE,
                      std::span<const NeighborTerm> neighbors);

/// Voltage-channel consensus rate:
///   kappa_i de/dt = -xi_i dv - sum_j b_ij (Q_i/Q_i* - Q_j/Q_j*)
///                           - sum_j f_ij (n_i dF_i - n_j dF_j)
double dapi_volt_rate(const InverterParams& p, double dv, double q_ratio, double n_dF,
                      std::span<const NeighborTerm> neighbors);

struct SteadyStatePrediction {
  double omega_bar = 0.0;               // rad/s, equals omega_nom
  double c = 0.0;                       // common per-inverter power deviation, W
  std::vector<double> omega_cons_bar;   // rad/s per inverter
};

/// Closed-loop equilibrium under homogeneous droop gains: frequency restores
/// to nominal, every inverter carries c = total_dp / N, and the consensus
/// variables settle at c*m. Heterogeneous m is refused.
SteadyStatePrediction steady_state_predict(std::span<const InverterParams> inverters,
                                           double total_dp);

/// Thread-safe latest-value store for neighbor messages. Single writer
/// (receive path) and single reader (control step); values from senders that
/// are not declared neighbors are rejected, as are stale sequence numbers.
class NeighborView {
 public:
  explicit NeighborView(std::vector<std::string> neighbor_ids);

  bool accept(const std::string& from, const NeighborValues& v);
  std::optional<NeighborValues> latest(const std::string& id) const;
  std::unordered_map<std::string, NeighborValues> snapshot() const;

 private:
  mutable std::mutex mu_;
  std::unordered_map<std::string, std::optional<NeighborValues>> latest_;
};

// ---------------------------------------------------------------------------
// Per-tick secondary controller kernel.
//
// This is the unit of computation an agent performs once per communication
// tick, and the sampled-coupling simulator runs the identical code inline so
// a zero-impairment distributed run reproduces it exactly. A tick:
//   1. begin(): fold the fresh P/Q measurement into the reserve integrators
//      and produce the values to publish (consensus message + actuation).
//   2. deliver messages (transport-specific).
//   3. integrate(): advance (Omega, e) over the tick with every external
//      input frozen at its tick-start value.
// ---------------------------------------------------------------------------

struct SecondaryTickState {
  double omega_cons = 0.0;
  double e_cons = 0.0;
  ReserveState reserve;
};

struct TickEmit {
  double omega_cons = 0.0;  // also the actuation sent to the plant
  double e_cons = 0.0;
  double q_ratio = 0.0;
  double m_dE = 0.0;
  double n_dF = 0.0;
};

TickEmit secondary_tick_begin(const InverterParams& p, SecondaryTickState& s, double p_meas,
                              double q_meas, double dt);

void secondary_tick_integrate(const InverterParams& p, SecondaryTickState& s, double p_meas,
                              double q_meas, std::span<const NeighborTerm> neighbors, double dt);

}  // namespace gfm
