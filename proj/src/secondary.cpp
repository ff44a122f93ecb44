#include "gfm/secondary.hpp"

#include <cmath>
#include <stdexcept>

namespace gfm {

ReserveState make_reserve_state(double e_capacity, double dp0, double dq0) {
  ReserveState r;
  r.e_capacity = e_capacity;
  r.e_unused = e_capacity;
  r.prev_dp = dp0;
  r.prev_dq = dq0;
  return r;
}

ReserveState energy_update(ReserveState r, double dp, double dq, double dt) {
  if (dt <= 0.0) throw std::invalid_argument("energy_update needs dt > 0");
  r.dE += 0.5 * (r.prev_dp + dp) * dt;
  r.dF += 0.5 * (r.prev_dq + dq) * dt;
  r.prev_dp = dp;
  r.prev_dq = dq;
  r.e_unused = r.e_capacity - r.dE;
  r.f_unused = r.f_capacity - r.dF;
  return r;
}

double reactive_headroom(double f_capacity, double s_max, double p_inst, double q_inst,
                         double dt) {
  if (s_max <= 0.0 || dt <= 0.0) throw std::invalid_argument("reactive_headroom needs s_max, dt > 0");
  double room2 = std::max(s_max * s_max - p_inst * p_inst, 0.0);
  double increment = std::max(std::sqrt(room2) - std::abs(q_inst), 0.0);
  return f_capacity + increment * dt;
}

double dapi_freq_rate(const InverterParams& p, double d_omega, double omega_cons, double m_dE,
                      std::span<const NeighborTerm> neighbors) {
  double sum = -d_omega;
  for (const auto& nb : neighbors) {
    sum -= nb.a * (omega_cons - nb.v.omega_cons);
    sum -= nb.e * (m_dE - nb.v.m_dE);
  }
  return sum / p.k_i;
}

double dapi_volt_rate(const InverterParams& p, double dv, double q_ratio, double n_dF,
                      std::span<const NeighborTerm> neighbors) {
  double sum = -p.xi * dv;
  for (const auto& nb : neighbors) {
    sum -= nb.b * (q_ratio - nb.v.q_ratio);
    sum -= nb.f * (n_dF - nb.v.n_dF);
  }
  return sum / p.kappa_i;
}

SteadyStatePrediction steady_state_predict(std::span<const InverterParams> inverters,
                                           double total_dp) {
  if (inverters.empty()) throw std::invalid_argument("steady_state_predict needs inverters");
  const double m0 = inverters.front().m_si();
  const double w0 = inverters.front().omega_nom;
  for (const auto& p : inverters) {
    if (std::abs(p.m_si() - m0) > 1e-12 * std::abs(m0) || p.omega_nom != w0)
      throw std::invalid_argument(
          "steady_state_predict supports only homogeneous droop gains and nominal frequency");
  }
  SteadyStatePrediction out;
  out.omega_bar = w0;
  out.c = total_dp / static_cast<double>(inverters.size());
  out.omega_cons_bar.assign(inverters.size(), out.c * m0);
  return out;
}

NeighborView::NeighborView(std::vector<std::string> neighbor_ids) {
  for (auto& id : neighbor_ids) latest_.emplace(std::move(id), std::nullopt);
}

bool NeighborView::accept(const std::string& from, const NeighborValues& v) {
  std::lock_guard lock(mu_);
  auto it = latest_.find(from);
  if (it == latest_.end()) return false;  // not a declared neighbor
  if (it->second && v.seq <= it->second->seq) return false;  // stale or duplicate
  it->second = v;
  return true;
}

std::optional<NeighborValues> NeighborView::latest(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = latest_.find(id);
  if (it == latest_.end()) return std::nullopt;
  return it->second;
}

std::unordered_map<std::string, NeighborValues> NeighborView::snapshot() const {
  std::lock_guard lock(mu_);
  std::unordered_map<std::string, NeighborValues> out;
  for (const auto& [id, v] : latest_)
    if (v) out.emplace(id, *v);
  return out;
}

TickEmit secondary_tick_begin(const InverterParams& p, SecondaryTickState& s, double p_meas,
                              double q_meas, double dt) {
  const double dp = p_meas - p.p_set;
  const double dq = q_meas - p.q_set;
  s.reserve = energy_update(s.reserve, dp, dq, dt);
  s.reserve.f_capacity = reactive_headroom(s.reserve.f_capacity, p.s_max, p_meas, q_meas, dt);
  s.reserve.f_unused = s.reserve.f_capacity - s.reserve.dF;

  TickEmit e;
  e.omega_cons = s.omega_cons;
  e.e_cons = s.e_cons;
  e.q_ratio = q_meas / p.q_set;
  e.m_dE = p.m_si() * s.reserve.dE;
  e.n_dF = p.n_si() * s.reserve.dF;
  return e;
}

void secondary_tick_integrate(const InverterParams& p, SecondaryTickState& s, double p_meas,
                              double q_meas, std::span<const NeighborTerm> neighbors, double dt) {
  const double dp = p_meas - p.p_set;
  const double dq = q_meas - p.q_set;

  // Local deviations reconstructed through the droop laws from the frozen
  // measurement; exact for droop plants, quasi-steady for VSM. All inputs,
  // including the inverter's own reconstruction, hold their tick-start value.
  const double d_omega_hat = -p.m_si() * dp + s.omega_cons;
  const double dv_hat = -p.n_si() * dq + s.e_cons;
  const double q_ratio = q_meas / p.q_set;
  const double m_dE = p.m_si() * s.reserve.dE;
  const double n_dF = p.n_si() * s.reserve.dF;

  // With everything else frozen the voltage channel rate is constant and the
  // frequency channel is linear in Omega through its own consensus sum; a
  // classical RK4 step handles both.
  auto omega_rate = [&](double omega) {
    double sum = -d_omega_hat;
    for (const auto& nb : neighbors) {
      sum -= nb.a * (omega - nb.v.omega_cons);
      sum -= nb.e * (m_dE - nb.v.m_dE);
    }
    return sum / p.k_i;
  };
  const double k1 = omega_rate(s.omega_cons);
  const double k2 = omega_rate(s.omega_cons + 0.5 * dt * k1);
  const double k3 = omega_rate(s.omega_cons + 0.5 * dt * k2);
  const double k4 = omega_rate(s.omega_cons + dt * k3);
  s.omega_cons += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);

  double vsum = -p.xi * dv_hat;
  for (const auto& nb : neighbors) {
    vsum -= nb.b * (q_ratio - nb.v.q_ratio);
    vsum -= nb.f * (n_dF - nb.v.n_dF);
  }
  s.e_cons += dt * vsum / p.kappa_i;
}

}  // namespace gfm
