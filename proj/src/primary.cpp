#include "gfm/primary.hpp"

#include <stdexcept>

namespace gfm {

DroopOutputs droop_outputs(const InverterParams& p, double p_filt, double q_filt,
                           double omega_cons, double e_cons) {
  return droop_outputs(p, p_filt, q_filt, omega_cons, e_cons, p.v_nom);
}

DroopOutputs droop_outputs(const InverterParams& p, double p_filt, double q_filt,
                           double omega_cons, double e_cons, double v_star) {
  DroopOutputs out;
  out.d_omega = -p.m_si() * (p_filt - p.p_set) + omega_cons;
  out.v = v_star - p.n_si() * (q_filt - p.q_set) + e_cons;
  return out;
}

VsmRates vsm_derivatives(const InverterParams& p, const InverterState& s, double p_pow,
                         double q_pow) {
  return vsm_derivatives(p, s, p_pow, q_pow, p.v_nom);
}

VsmRates vsm_derivatives(const InverterParams& p, const InverterState& s, double p_pow,
                         double q_pow, double v_star) {
  VsmRates r;
  r.d_delta = s.d_omega;
  r.d_d_omega = (-s.d_omega - p.m_si() * (p_pow - p.p_set) + s.omega_cons) / p.m_omega;
  r.d_v = (-(s.v - v_star) - p.n_si() * (q_pow - p.q_set) + s.e_cons) / p.tau_v;
  return r;
}

double lpf_step(double y, double u, double omega_c, double dt) {
  if (omega_c <= 0.0 || dt <= 0.0) throw std::invalid_argument("lpf_step needs omega_c, dt > 0");
  if (omega_c * dt >= 2.0)
    throw std::invalid_argument("lpf_step unstable: omega_c * dt must be below 2");
  return y + omega_c * dt * (u - y);
}

LcFilterRates lc_filter_derivatives(const LcFilterParams& p, const LcFilterState& s, double v_d,
                                    double v_q, double omega) {
  if (p.c_f <= 0.0 || p.l_f <= 0.0 || p.r_f < 0.0)
    throw std::invalid_argument("lc filter params invalid");
  LcFilterRates r;
  r.dv_gd = (s.i_d - s.i_gd) / p.c_f + omega * s.v_gq;
  r.dv_gq = (s.i_q - s.i_gq) / p.c_f - omega * s.v_gd;
  r.di_d = (v_d - s.v_gd - p.r_f * s.i_d) / p.l_f + omega * s.i_q;
  r.di_q = (v_q - s.v_gq - p.r_f * s.i_q) / p.l_f - omega * s.i_d;
  return r;
}

}  // namespace gfm
