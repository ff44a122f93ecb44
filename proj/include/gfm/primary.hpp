#pragma once

#include "gfm/model.hpp"

namespace gfm {

struct DroopOutputs {
  double d_omega = 0.0;  // rad/s deviation from omega_nom
  double v = 0.0;        // commanded voltage magnitude, V
};

/// Algebraic droop laws with the secondary corrections added:
///   d_omega = -m (P - P*) + Omega,   V = V* - n (Q - Q*) + e.
/// v_star lets the caller ramp the voltage reference; pass params.v_nom for
/// nominal operation.
DroopOutputs droop_outputs(const InverterParams& p, double p_filt, double q_filt,
                           double omega_cons, double e_cons);
DroopOutputs droop_outputs(const InverterParams& p, double p_filt, double q_filt,
                           double omega_cons, double e_cons, double v_star);

struct VsmRates {
  double d_delta = 0.0;    // rad/s
  double d_d_omega = 0.0;  // rad/s^2
  double d_v = 0.0;        // V/s
};

/// Virtual-synchronous-machine dynamics with secondary corrections:
///   delta'   = d_omega
///   M d_omega' = -d_omega - m (P - P*) + Omega
///   tau v'     = -(v - V*)  - n (Q - Q*) + e
/// p/q are the powers the integral laws see (instantaneous by default in the
/// simulator; the filter choice is the caller's).
VsmRates vsm_derivatives(const InverterParams& p, const InverterState& s, double p_pow,
                         double q_pow);
VsmRates vsm_derivatives(const InverterParams& p, const InverterState& s, double p_pow,
                         double q_pow, double v_star);

/// One forward-Euler step of the power measurement filter y' = omega_c (u - y).
/// Unit DC gain by construction. Requires omega_c * dt < 2 for stability of
/// the discretization; violations throw.
double lpf_step(double y, double u, double omega_c, double dt);

// Switching-level LC output filter in the local dq frame. Only exercised by
// the single-inverter high-fidelity mode; the network simulation stays at the
// phasor level.
struct LcFilterParams {
  double l_f = 0.0;  // H
  double c_f = 0.0;  // F
  double r_f = 0.0;  // ohm, series resistance of the filter inductor
};

struct LcFilterState {
  double v_gd = 0.0;  // capacitor (grid-side) voltage, d axis, V
  double v_gq = 0.0;
  double i_d = 0.0;   // converter-side inductor current, A
  double i_q = 0.0;
  double i_gd = 0.0;  // grid-side current, supplied externally, A
  double i_gq = 0.0;
};

struct LcFilterRates {
  double dv_gd = 0.0;
  double dv_gq = 0.0;
  double di_d = 0.0;
  double di_q = 0.0;
};

/// dq dynamics of the LC filter at electrical frequency omega. The grid-side
/// currents in the state are inputs here; their own dynamics belong to
/// whatever is connected downstream.
///   C v_gd' =  omega C v_gq + i_d - i_gd
///   C v_gq' = -omega C v_gd + i_q - i_gq
///   L i_d'  =  omega L i_q - r_f i_d + v_d - v_gd
///   L i_q'  = -omega L i_d - r_f i_q + v_q - v_gq
LcFilterRates lc_filter_derivatives(const LcFilterParams& p, const LcFilterState& s, double v_d,
                                    double v_q, double omega);

}  // namespace gfm
