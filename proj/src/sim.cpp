#include "gfm/sim.hpp"

#include "gfm/primary.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>

namespace gfm {
namespace {

// Voltage reference and load-admittance fraction for the (at most one)
// pickup ramp. Both are continuous in t so the integrator sees a smooth
// input during the ramp.
struct RampProfile {
  bool present = false;
  double t0 = 0.0;
  double ramp_s = 1.0;
  double v_start_frac = 1.0;
  int slot = -1;

  double frac(double t) const {
    if (!present) return 0.0;
    return std::clamp((t - t0) / ramp_s, 0.0, 1.0);
  }
  double v_ref(double v_nom, double t) const {
    if (!present) return v_nom;
    return (v_start_frac + (1.0 - v_start_frac) * frac(t)) * v_nom;
  }
};

RampProfile install_ramp(const Scenario& sc, PhasorNetwork& net) {
  RampProfile r;
  for (const SimEvent& ev : sc.events) {
    if (ev.kind != SimEvent::Kind::LoadPickupRamp) continue;
    r.present = true;
    r.t0 = ev.t_s;
    r.ramp_s = ev.ramp_s;
    r.v_start_frac = ev.v_start_frac;
    cplx y_full = cplx(ev.p_w, -ev.q_var) / (sc.v_nom * sc.v_nom);
    r.slot = net.add_scalable_load(ev.bus, y_full);
  }
  return r;
}

void set_ramp_scale(PhasorNetwork& net, const RampProfile& ramp, double t,
                    double& last) {
  if (!ramp.present) return;
  double s = ramp.frac(t);
  if (s != last) {
    net.set_load_scale(ramp.slot, s);
    last = s;
  }
}

void apply_load_step(PhasorNetwork& net, const SimEvent& ev, double v_nom) {
  net.add_load_admittance(ev.bus,
                          cplx(ev.dp_w, -ev.dq_var) / (v_nom * v_nom));
}

const char* kDroopSlots[] = {"delta", "p_filt", "q_filt", "omega_cons",
                             "e_cons", "dE",     "dF",     "f_capacity"};
const char* kVsmSlots[] = {"delta", "d_omega", "v",  "omega_cons",
                           "e_cons", "dE",     "dF", "f_capacity"};
constexpr int kSlots = 8;

std::string nonfinite_diagnostic(const Scenario& sc,
                                 const std::vector<double>& x, double t) {
  for (size_t k = 0; k < sc.inverters.size(); ++k) {
    for (int s = 0; s < kSlots; ++s) {
      double v = x[kSlots * k + s];
      if (!std::isfinite(v)) {
        const char* slot = sc.inverters[k].kind == InverterKind::Droop
                               ? kDroopSlots[s]
                               : kVsmSlots[s];
        return "state went non-finite at t=" + std::to_string(t) +
               " s (inverter '" + sc.inverters[k].id + "', " + slot + ")";
      }
    }
  }
  return "state went non-finite at t=" + std::to_string(t) + " s";
}

Eigen::VectorXd channel_values(const TraceRecord& rec,
                               const std::vector<InverterParams>& inv,
                               const std::string& channel) {
  Eigen::VectorXd v(static_cast<int>(inv.size()));
  for (size_t k = 0; k < inv.size(); ++k) {
    const InverterParams& p = inv[k];
    const TraceRecord::PerInverter& r = rec.inv[k];
    if (channel == "freq_energy") {
      v[static_cast<int>(k)] = p.m_si() * r.dE;
    } else if (channel == "volt_energy") {
      v[static_cast<int>(k)] = p.n_si() * r.dF;
    } else if (channel == "power_sharing") {
      v[static_cast<int>(k)] = p.m_si() * (r.p - p.p_set);
    } else {
      throw std::invalid_argument(
          "unknown consensus channel '" + channel +
          "' (expected freq_energy, volt_energy or power_sharing)");
    }
  }
  return v;
}

std::string fmt_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, end);
}

}  // namespace

// ---------------------------------------------------------------------------
// Equilibrium
// ---------------------------------------------------------------------------

namespace {

// Residuals of the restored operating point. Unknowns: angles 1..N-1 (angle 0
// pinned), all N magnitudes, and the common frequency correction. Active side
// demands zero frequency deviation once every consensus state equals the
// common value; reactive side demands zero voltage-consensus rate. When no
// inverter regulates voltage (all xi zero) the rate conditions lose one rank
// and the mean correction is pinned to zero instead, which is the point the
// closed loop conserves from an uncorrected start.
struct EquilibriumSystem {
  PhasorNetwork& net;
  const std::vector<InverterParams>& inv;
  Eigen::MatrixXd l_b;  // reactive-consensus Laplacian
  double v_ref;
  bool any_xi = false;

  int n() const { return static_cast<int>(inv.size()); }
  int dim() const { return 2 * n(); }

  Eigen::VectorXcd sources(const Eigen::VectorXd& u) const {
    Eigen::VectorXcd s(n());
    for (int k = 0; k < n(); ++k) {
      double delta = k == 0 ? 0.0 : u[k - 1];
      double v = u[n() - 1 + k];
      s[k] = std::polar(v, delta);
    }
    return s;
  }

  Eigen::VectorXd residual(const Eigen::VectorXd& u) const {
    Eigen::VectorXcd src = sources(u);
    auto sol = net.solve_injections(
        std::span<const cplx>(src.data(), static_cast<size_t>(n())));
    double omega_bar = u[dim() - 1];

    Eigen::VectorXd qr(n()), dv(n());
    Eigen::VectorXd f(dim());
    for (int k = 0; k < n(); ++k) {
      const InverterParams& p = inv[k];
      f[k] = (p.m_si() * (sol.injections[k].p - p.p_set) - omega_bar) /
             p.omega_nom;
      qr[k] = sol.injections[k].q / p.q_set;
      dv[k] = u[n() - 1 + k] - v_ref;
    }
    Eigen::VectorXd coupling = l_b * qr;
    for (int k = 0; k < n(); ++k)
      f[n() + k] = (inv[k].xi * dv[k] + coupling[k]) / inv[k].v_nom;
    if (!any_xi) {
      // Replace the last (redundant) rate condition by the conserved mean.
      double num = 0.0, den = 0.0;
      for (int k = 0; k < n(); ++k) {
        double e_k = dv[k] + inv[k].n_si() * (sol.injections[k].q - inv[k].q_set);
        num += inv[k].kappa_i * e_k;
        den += inv[k].kappa_i;
      }
      f[dim() - 1] = num / (den * inv[0].v_nom);
    }
    return f;
  }
};

}  // namespace

Equilibrium solve_equilibrium(PhasorNetwork& net,
                              const std::vector<InverterParams>& inverters,
                              const CommGraph& graph, double v_ref) {
  if (inverters.empty())
    throw std::invalid_argument("equilibrium needs at least one inverter");
  if (static_cast<int>(inverters.size()) != graph.size())
    throw std::invalid_argument(
        "comm graph size does not match the inverter fleet");

  EquilibriumSystem sys{net, inverters, graph.laplacian(WeightKind::B), v_ref};
  for (const InverterParams& p : inverters) sys.any_xi |= p.xi > 0.0;

  int n = sys.n();
  Eigen::VectorXd u(sys.dim());
  u.setZero();
  for (int k = 0; k < n; ++k) u[n - 1 + k] = v_ref;

  Eigen::VectorXd f = sys.residual(u);
  int iter = 0;
  for (; iter < 60 && f.lpNorm<Eigen::Infinity>() > 1e-12; ++iter) {
    Eigen::MatrixXd jac(sys.dim(), sys.dim());
    for (int c = 0; c < sys.dim(); ++c) {
      double h = 1e-6 * (1.0 + std::abs(u[c]));
      Eigen::VectorXd up = u;
      up[c] += h;
      jac.col(c) = (sys.residual(up) - f) / h;
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(jac);
    if (!lu.isInvertible())
      throw SolverError(
          "equilibrium solve hit a singular Jacobian (check setpoints and "
          "voltage-regulation gains)");
    u -= lu.solve(f);
    f = sys.residual(u);
  }
  double res = f.lpNorm<Eigen::Infinity>();
  if (res > 1e-8)
    throw SolverError("equilibrium solve did not converge (residual " +
                      std::to_string(res) + " after " + std::to_string(iter) +
                      " iterations)");

  Equilibrium eq;
  eq.sources = sys.sources(u);
  eq.iterations = iter;
  eq.residual = res;
  eq.omega_cons = u[sys.dim() - 1];
  auto sol = net.solve_injections(
      std::span<const cplx>(eq.sources.data(), inverters.size()));
  eq.delta.resize(inverters.size());
  eq.v.resize(inverters.size());
  eq.e_cons.resize(inverters.size());
  eq.p.resize(inverters.size());
  eq.q.resize(inverters.size());
  for (int k = 0; k < n; ++k) {
    eq.delta[k] = k == 0 ? 0.0 : u[k - 1];
    eq.v[k] = u[n - 1 + k];
    eq.p[k] = sol.injections[k].p;
    eq.q[k] = sol.injections[k].q;
    eq.e_cons[k] = (eq.v[k] - v_ref) +
                   inverters[k].n_si() * (eq.q[k] - inverters[k].q_set);
  }
  return eq;
}

// ---------------------------------------------------------------------------
// Continuous coupling: one global ODE over plant and secondary states.
// Per-inverter slots (droop / VSM):
//   [delta, p_filt|d_omega, q_filt|v, omega_cons, e_cons, dE, dF, f_capacity]
// ---------------------------------------------------------------------------

namespace {

class ContinuousRhs {
 public:
  ContinuousRhs(const Scenario& sc, PhasorNetwork& net, const RampProfile& ramp)
      : sc_(sc), net_(net), ramp_(ramp), n_(static_cast<int>(sc.inverters.size())) {
    src_.resize(n_);
    d_omega_.resize(n_);
    v_cmd_.resize(n_);
    qr_.resize(n_);
    m_de_.resize(n_);
    n_df_.resize(n_);
    freq_sum_.resize(n_);
    volt_sum_.resize(n_);
  }

  void set_edges(const std::vector<CommEdge>& edges) { edges_ = &edges; }

  void operator()(double t, const std::vector<double>& x,
                  std::vector<double>& dx) {
    set_ramp_scale(net_, ramp_, t, last_scale_);
    double v_ref = ramp_.v_ref(sc_.v_nom, t);

    for (int k = 0; k < n_; ++k) {
      const double* s = &x[kSlots * k];
      const InverterParams& p = sc_.inverters[k];
      if (p.kind == InverterKind::Droop) {
        DroopOutputs o = droop_outputs(p, s[1], s[2], s[3], s[4], v_ref);
        d_omega_[k] = o.d_omega;
        v_cmd_[k] = o.v;
      } else {
        d_omega_[k] = s[1];
        v_cmd_[k] = s[2];
      }
      src_[k] = std::polar(v_cmd_[k], s[0]);
    }
    auto sol = net_.solve_injections(src_);

    // Deviations the controllers react to: filtered for droop, instantaneous
    // for VSM.
    for (int k = 0; k < n_; ++k) {
      const double* s = &x[kSlots * k];
      const InverterParams& p = sc_.inverters[k];
      double q_meas =
          p.kind == InverterKind::Droop ? s[2] : sol.injections[k].q;
      qr_[k] = q_meas / p.q_set;
      m_de_[k] = p.m_si() * s[5];
      n_df_[k] = p.n_si() * s[6];
      freq_sum_[k] = 0.0;
      volt_sum_[k] = 0.0;
    }
    for (const CommEdge& e : *edges_) {
      double fo = e.a * (x[kSlots * e.i + 3] - x[kSlots * e.j + 3]) +
                  e.e * (m_de_[e.i] - m_de_[e.j]);
      double vo = e.b * (qr_[e.i] - qr_[e.j]) + e.f * (n_df_[e.i] - n_df_[e.j]);
      freq_sum_[e.i] += fo;
      freq_sum_[e.j] -= fo;
      volt_sum_[e.i] += vo;
      volt_sum_[e.j] -= vo;
    }

    for (int k = 0; k < n_; ++k) {
      const double* s = &x[kSlots * k];
      double* d = &dx[kSlots * k];
      const InverterParams& p = sc_.inverters[k];
      double p_inst = sol.injections[k].p;
      double q_inst = sol.injections[k].q;
      double dp, dq, dv;
      if (p.kind == InverterKind::Droop) {
        d[0] = d_omega_[k];
        d[1] = sc_.lpf_cutoff * (p_inst - s[1]);
        d[2] = sc_.lpf_cutoff * (q_inst - s[2]);
        dp = s[1] - p.p_set;
        dq = s[2] - p.q_set;
        dv = -p.n_si() * dq + s[4];  // equals v_cmd - v_ref
      } else {
        d[0] = s[1];
        d[1] = (-s[1] - p.m_si() * (p_inst - p.p_set) + s[3]) / p.m_omega;
        d[2] = (-(s[2] - v_ref) - p.n_si() * (q_inst - p.q_set) + s[4]) / p.tau_v;
        dp = p_inst - p.p_set;
        dq = q_inst - p.q_set;
        dv = s[2] - v_ref;
      }
      d[3] = (-d_omega_[k] - freq_sum_[k]) / p.k_i;
      d[4] = (-p.xi * dv - volt_sum_[k]) / p.kappa_i;
      d[5] = dp;
      d[6] = dq;
      double p_h = p.kind == InverterKind::Droop ? s[1] : p_inst;
      double q_h = p.kind == InverterKind::Droop ? s[2] : q_inst;
      double room = p.s_max * p.s_max - p_h * p_h;
      d[7] = std::max(std::sqrt(std::max(room, 0.0)) - std::abs(q_h), 0.0);
    }
  }

  // Telemetry at the current state (one extra solve).
  void readout(double t, const std::vector<double>& x,
               TraceRecord& rec) {
    set_ramp_scale(net_, ramp_, t, last_scale_);
    double v_ref = ramp_.v_ref(sc_.v_nom, t);
    for (int k = 0; k < n_; ++k) {
      const double* s = &x[kSlots * k];
      const InverterParams& p = sc_.inverters[k];
      if (p.kind == InverterKind::Droop) {
        DroopOutputs o = droop_outputs(p, s[1], s[2], s[3], s[4], v_ref);
        d_omega_[k] = o.d_omega;
        v_cmd_[k] = o.v;
      } else {
        d_omega_[k] = s[1];
        v_cmd_[k] = s[2];
      }
      src_[k] = std::polar(v_cmd_[k], s[0]);
    }
    auto sol = net_.solve_injections(src_);
    rec.t = t;
    rec.inv.resize(n_);
    for (int k = 0; k < n_; ++k) {
      const double* s = &x[kSlots * k];
      const InverterParams& p = sc_.inverters[k];
      TraceRecord::PerInverter& r = rec.inv[k];
      r.p = sol.injections[k].p;
      r.q = sol.injections[k].q;
      r.omega = p.omega_nom + d_omega_[k];
      r.v = v_cmd_[k];
      r.omega_cons = s[3];
      r.e_cons = s[4];
      r.dE = s[5];
      r.dF = s[6];
      r.E = p.e_capacity - s[5];
      r.F = s[7] - s[6];
    }
  }

 private:
  const Scenario& sc_;
  PhasorNetwork& net_;
  const RampProfile& ramp_;
  int n_;
  const std::vector<CommEdge>* edges_ = nullptr;
  double last_scale_ = -1.0;

  std::vector<cplx> src_;
  std::vector<double> d_omega_, v_cmd_, qr_, m_de_, n_df_, freq_sum_, volt_sum_;
};

void rk4_step(ContinuousRhs& rhs, double t, double dt, std::vector<double>& x,
              std::array<std::vector<double>, 5>& work) {
  size_t n = x.size();
  auto& [k1, k2, k3, k4, xt] = work;
  rhs(t, x, k1);
  for (size_t i = 0; i < n; ++i) xt[i] = x[i] + 0.5 * dt * k1[i];
  rhs(t + 0.5 * dt, xt, k2);
  for (size_t i = 0; i < n; ++i) xt[i] = x[i] + 0.5 * dt * k2[i];
  rhs(t + 0.5 * dt, xt, k3);
  for (size_t i = 0; i < n; ++i) xt[i] = x[i] + dt * k3[i];
  rhs(t + dt, xt, k4);
  for (size_t i = 0; i < n; ++i)
    x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
}

RunResult run_continuous(const Scenario& sc) {
  RunResult out;
  PhasorNetwork net = sc.build_network();
  CommGraph graph = sc.build_graph();
  RampProfile ramp = install_ramp(sc, net);

  double v_ref0 = ramp.v_ref(sc.v_nom, 0.0);
  Equilibrium eq = solve_equilibrium(net, sc.inverters, graph, v_ref0);

  int n = static_cast<int>(sc.inverters.size());
  std::vector<double> x(static_cast<size_t>(kSlots) * n, 0.0);
  for (int k = 0; k < n; ++k) {
    double* s = &x[kSlots * k];
    s[0] = eq.delta[k];
    if (sc.inverters[k].kind == InverterKind::Droop) {
      s[1] = eq.p[k];
      s[2] = eq.q[k];
    } else {
      s[1] = 0.0;
      s[2] = eq.v[k];
    }
    s[3] = eq.omega_cons;
    s[4] = eq.e_cons[k];
    s[5] = s[6] = s[7] = 0.0;
  }

  std::vector<CommEdge> edges = graph.edges();
  ContinuousRhs rhs(sc, net, ramp);
  rhs.set_edges(edges);

  long long steps = llround(sc.duration_s / sc.dt_s);
  long long decim = std::max<long long>(1, llround(sc.decimation_s / sc.dt_s));
  std::array<std::vector<double>, 5> work;
  for (auto& w : work) w.resize(x.size());

  out.trace.emplace_back();
  rhs.readout(0.0, x, out.trace.back());

  size_t next_event = 0;
  for (long long k = 0; k < steps; ++k) {
    double t = static_cast<double>(k) * sc.dt_s;
    while (next_event < sc.events.size() &&
           llround(sc.events[next_event].t_s / sc.dt_s) <= k) {
      const SimEvent& ev = sc.events[next_event++];
      switch (ev.kind) {
        case SimEvent::Kind::LoadStep:
          apply_load_step(net, ev, sc.v_nom);
          break;
        case SimEvent::Kind::GainChange:
          graph.set_uniform_weight(ev.channel, ev.value);
          edges = graph.edges();
          break;
        case SimEvent::Kind::LoadPickupRamp:
          break;  // the continuous profile covers it
      }
    }
    try {
      rk4_step(rhs, t, sc.dt_s, x, work);
    } catch (const SolverError& e) {
      out.aborted = true;
      out.diagnostic =
          "network solve failed at t = " + fmt_double(t) + " s: " + e.what();
      break;
    }
    bool finite = true;
    for (double v : x)
      if (!std::isfinite(v)) finite = false;
    if (!finite) {
      out.aborted = true;
      out.diagnostic = nonfinite_diagnostic(sc, x, t + sc.dt_s);
      break;
    }
    if ((k + 1) % decim == 0 || k + 1 == steps) {
      out.trace.emplace_back();
      rhs.readout(static_cast<double>(k + 1) * sc.dt_s, x, out.trace.back());
    }
    out.metrics.steps = k + 1;
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Sampled coupling: plant integrates between control ticks, the secondary
// kernel runs once per tick on frozen measurements.
// ---------------------------------------------------------------------------

struct PlantModel::Impl {
  Scenario sc;
  PhasorNetwork net;
  RampProfile ramp;
  Equilibrium eq;
  int n = 0;

  // Per-inverter plant slots: droop [delta, p_filt, q_filt],
  // VSM [delta, d_omega, v].
  std::vector<double> x;
  std::vector<Actuation> act;
  long long step = 0;
  double dt = 0.0;
  size_t next_event = 0;
  double last_scale = -1.0;
  std::string diag;

  std::vector<cplx> src;
  std::vector<double> d_omega, v_cmd;

  explicit Impl(const Scenario& s)
      : sc(s), net(s.build_network()), ramp(install_ramp(sc, net)) {
    CommGraph graph = sc.build_graph();
    eq = solve_equilibrium(net, sc.inverters, graph, ramp.v_ref(sc.v_nom, 0.0));
    n = static_cast<int>(sc.inverters.size());
    dt = sc.dt_s;
    x.assign(static_cast<size_t>(3) * n, 0.0);
    act.assign(n, Actuation{});
    src.resize(n);
    d_omega.resize(n);
    v_cmd.resize(n);
    for (int k = 0; k < n; ++k) {
      double* s3 = &x[3 * k];
      s3[0] = eq.delta[k];
      if (sc.inverters[k].kind == InverterKind::Droop) {
        s3[1] = eq.p[k];
        s3[2] = eq.q[k];
      } else {
        s3[1] = 0.0;
        s3[2] = eq.v[k];
      }
      act[k] = {eq.omega_cons, eq.e_cons[k]};
    }
  }

  PhasorNetwork::SolveResult solve_at(double t, const std::vector<double>& y) {
    set_ramp_scale(net, ramp, t, last_scale);
    double v_ref = ramp.v_ref(sc.v_nom, t);
    for (int k = 0; k < n; ++k) {
      const double* s3 = &y[3 * k];
      const InverterParams& p = sc.inverters[k];
      if (p.kind == InverterKind::Droop) {
        DroopOutputs o =
            droop_outputs(p, s3[1], s3[2], act[k].omega_cons, act[k].e_cons, v_ref);
        d_omega[k] = o.d_omega;
        v_cmd[k] = o.v;
      } else {
        d_omega[k] = s3[1];
        v_cmd[k] = s3[2];
      }
      src[k] = std::polar(v_cmd[k], s3[0]);
    }
    return net.solve_injections(src);
  }

  void rhs(double t, const std::vector<double>& y, std::vector<double>& dy) {
    auto sol = solve_at(t, y);
    double v_ref = ramp.v_ref(sc.v_nom, t);
    for (int k = 0; k < n; ++k) {
      const double* s3 = &y[3 * k];
      double* d3 = &dy[3 * k];
      const InverterParams& p = sc.inverters[k];
      double p_inst = sol.injections[k].p;
      double q_inst = sol.injections[k].q;
      if (p.kind == InverterKind::Droop) {
        d3[0] = d_omega[k];
        d3[1] = sc.lpf_cutoff * (p_inst - s3[1]);
        d3[2] = sc.lpf_cutoff * (q_inst - s3[2]);
      } else {
        d3[0] = s3[1];
        d3[1] = (-s3[1] - p.m_si() * (p_inst - p.p_set) + act[k].omega_cons) /
                p.m_omega;
        d3[2] = (-(s3[2] - v_ref) - p.n_si() * (q_inst - p.q_set) +
                 act[k].e_cons) /
                p.tau_v;
      }
    }
  }
};

PlantModel::PlantModel(const Scenario& sc) : impl_(std::make_unique<Impl>(sc)) {}
PlantModel::~PlantModel() = default;
PlantModel::PlantModel(PlantModel&&) noexcept = default;

int PlantModel::fleet_size() const { return impl_->n; }
double PlantModel::time() const {
  return static_cast<double>(impl_->step) * impl_->dt;
}
const Equilibrium& PlantModel::equilibrium() const { return impl_->eq; }
const std::string& PlantModel::diagnostic() const { return impl_->diag; }

std::vector<PlantModel::Meas> PlantModel::measure() {
  Impl& im = *impl_;
  auto sol = im.solve_at(time(), im.x);
  std::vector<Meas> out(im.n);
  for (int k = 0; k < im.n; ++k) {
    if (im.sc.inverters[k].kind == InverterKind::Droop) {
      out[k] = {im.x[3 * k + 1], im.x[3 * k + 2]};
    } else {
      out[k] = {sol.injections[k].p, sol.injections[k].q};
    }
  }
  return out;
}

std::vector<PlantModel::Readout> PlantModel::readout() {
  Impl& im = *impl_;
  auto sol = im.solve_at(time(), im.x);
  std::vector<Readout> out(im.n);
  for (int k = 0; k < im.n; ++k) {
    out[k] = {sol.injections[k].p, sol.injections[k].q,
              im.sc.inverters[k].omega_nom + im.d_omega[k], im.v_cmd[k]};
  }
  return out;
}

bool PlantModel::advance(const std::vector<Actuation>& act, int n_steps,
                         const std::function<void(long long)>& on_sample) {
  Impl& im = *impl_;
  if (static_cast<int>(act.size()) != im.n)
    throw std::invalid_argument("actuation count does not match the fleet");
  im.act = act;

  static thread_local std::array<std::vector<double>, 5> work;
  for (auto& w : work) w.resize(im.x.size());
  auto& [k1, k2, k3, k4, xt] = work;

  for (int s = 0; s < n_steps; ++s) {
    double t = time();
    while (im.next_event < im.sc.events.size() &&
           llround(im.sc.events[im.next_event].t_s / im.dt) <= im.step) {
      const SimEvent& ev = im.sc.events[im.next_event++];
      if (ev.kind == SimEvent::Kind::LoadStep)
        apply_load_step(im.net, ev, im.sc.v_nom);
      // Gain changes belong to the controller side; ramps are continuous.
    }
    size_t m = im.x.size();
    try {
      im.rhs(t, im.x, k1);
      for (size_t i = 0; i < m; ++i) xt[i] = im.x[i] + 0.5 * im.dt * k1[i];
      im.rhs(t + 0.5 * im.dt, xt, k2);
      for (size_t i = 0; i < m; ++i) xt[i] = im.x[i] + 0.5 * im.dt * k2[i];
      im.rhs(t + 0.5 * im.dt, xt, k3);
      for (size_t i = 0; i < m; ++i) xt[i] = im.x[i] + im.dt * k3[i];
      im.rhs(t + im.dt, xt, k4);
      for (size_t i = 0; i < m; ++i)
        im.x[i] += im.dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    } catch (const SolverError& e) {
      im.diag =
          "network solve failed at t = " + fmt_double(t) + " s: " + e.what();
      return false;
    }
    ++im.step;

    for (size_t i = 0; i < m; ++i) {
      if (!std::isfinite(im.x[i])) {
        int inv = static_cast<int>(i) / 3;
        im.diag = "plant state went non-finite at t=" +
                  std::to_string(time()) + " s (inverter '" +
                  im.sc.inverters[inv].id + "')";
        return false;
      }
    }
    if (on_sample) on_sample(im.step);
  }
  return true;
}

namespace {

TraceRecord compose_record(double t, const std::vector<PlantModel::Readout>& ro,
                           const std::vector<SecondaryTickState>& sec,
                           const std::vector<InverterParams>& inv) {
  TraceRecord rec;
  rec.t = t;
  rec.inv.resize(ro.size());
  for (size_t k = 0; k < ro.size(); ++k) {
    TraceRecord::PerInverter& r = rec.inv[k];
    r.p = ro[k].p;
    r.q = ro[k].q;
    r.omega = ro[k].omega;
    r.v = ro[k].v;
    r.omega_cons = sec[k].omega_cons;
    r.e_cons = sec[k].e_cons;
    r.dE = sec[k].reserve.dE;
    r.dF = sec[k].reserve.dF;
    r.E = sec[k].reserve.e_unused;
    r.F = sec[k].reserve.f_unused;
    (void)inv;
  }
  return rec;
}

RunResult run_sampled(const Scenario& sc) {
  RunResult out;
  PlantModel plant(sc);
  CommGraph graph = sc.build_graph();
  int n = plant.fleet_size();
  const Equilibrium& eq = plant.equilibrium();

  std::vector<SecondaryTickState> sec(n);
  for (int k = 0; k < n; ++k) {
    sec[k].omega_cons = eq.omega_cons;
    sec[k].e_cons = eq.e_cons[k];
    sec[k].reserve = make_reserve_state(sc.inverters[k].e_capacity,
                                        eq.p[k] - sc.inverters[k].p_set,
                                        eq.q[k] - sc.inverters[k].q_set);
  }

  long long steps = llround(sc.duration_s / sc.dt_s);
  long long per_tick = llround(sc.comm_interval_s / sc.dt_s);
  long long decim = std::max<long long>(1, llround(sc.decimation_s / sc.dt_s));

  out.trace.push_back(compose_record(0.0, plant.readout(), sec, sc.inverters));

  size_t next_gain = 0;
  long long done = 0;
  bool ok = true;
  while (done < steps && ok) {
    double t = plant.time();
    // Controller-side events land on tick boundaries.
    while (next_gain < sc.events.size() &&
           sc.events[next_gain].t_s <= t + 0.5 * sc.dt_s) {
      const SimEvent& ev = sc.events[next_gain++];
      if (ev.kind == SimEvent::Kind::GainChange)
        graph.set_uniform_weight(ev.channel, ev.value);
    }

    auto meas = plant.measure();
    std::vector<TickEmit> emits(n);
    for (int k = 0; k < n; ++k)
      emits[k] = secondary_tick_begin(sc.inverters[k], sec[k], meas[k].p,
                                      meas[k].q, sc.comm_interval_s);

    std::vector<std::vector<NeighborTerm>> terms(n);
    for (const CommEdge& e : graph.edges()) {
      NeighborValues vi{emits[e.i].omega_cons, emits[e.i].q_ratio,
                        emits[e.i].m_dE, emits[e.i].n_dF, t, 0};
      NeighborValues vj{emits[e.j].omega_cons, emits[e.j].q_ratio,
                        emits[e.j].m_dE, emits[e.j].n_dF, t, 0};
      terms[e.i].push_back({e.a, e.b, e.e, e.f, vj});
      terms[e.j].push_back({e.a, e.b, e.e, e.f, vi});
    }

    std::vector<PlantModel::Actuation> act(n);
    for (int k = 0; k < n; ++k) {
      act[k] = {emits[k].omega_cons, emits[k].e_cons};
      secondary_tick_integrate(sc.inverters[k], sec[k], meas[k].p, meas[k].q,
                               terms[k], sc.comm_interval_s);
    }

    long long chunk = std::min(per_tick, steps - done);
    ok = plant.advance(act, static_cast<int>(chunk), [&](long long g) {
      if (g % decim == 0 || g == steps)
        out.trace.push_back(
            compose_record(static_cast<double>(g) * sc.dt_s, plant.readout(),
                           sec, sc.inverters));
    });
    done += chunk;
    out.metrics.steps = done;
  }
  if (!ok) {
    out.aborted = true;
    out.diagnostic = plant.diagnostic();
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Entry point, metrics, telemetry
// ---------------------------------------------------------------------------

RunResult run(const Scenario& sc) {
  sc.validate();
  auto start = std::chrono::steady_clock::now();
  RunResult out = sc.coupling == Scenario::Coupling::Continuous
                      ? run_continuous(sc)
                      : run_sampled(sc);
  Metrics m = compute_metrics(sc, out.trace);
  m.steps = out.metrics.steps;
  m.runtime_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  out.metrics = m;
  return out;
}

ConsensusSeries consensus_error(const std::vector<TraceRecord>& trace,
                                const std::vector<InverterParams>& inverters,
                                const std::string& channel) {
  ConsensusSeries cs;
  int n = static_cast<int>(inverters.size());
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) cs.pairs.emplace_back(i, j);
  cs.t.reserve(trace.size());
  cs.values.resize(static_cast<int>(trace.size()),
                   static_cast<int>(cs.pairs.size()));
  for (size_t r = 0; r < trace.size(); ++r) {
    cs.t.push_back(trace[r].t);
    Eigen::VectorXd v = channel_values(trace[r], inverters, channel);
    for (size_t c = 0; c < cs.pairs.size(); ++c)
      cs.values(static_cast<int>(r), static_cast<int>(c)) =
          v[cs.pairs[c].first] - v[cs.pairs[c].second];
  }
  return cs;
}

Eigen::VectorXd ConsensusSeries::max_abs() const {
  if (values.cols() == 0) return Eigen::VectorXd::Zero(values.rows());
  return values.cwiseAbs().rowwise().maxCoeff();
}

void write_trace_csv(std::ostream& out, const std::vector<TraceRecord>& trace,
                     const std::vector<InverterParams>& inverters) {
  out << "t,inv,P,Q,omega,V,Omega,e_cons,dE,dF,E,F\n";
  for (const TraceRecord& rec : trace) {
    for (size_t k = 0; k < rec.inv.size(); ++k) {
      const TraceRecord::PerInverter& r = rec.inv[k];
      out << fmt_double(rec.t) << ',' << inverters[k].id << ','
          << fmt_double(r.p) << ',' << fmt_double(r.q) << ','
          << fmt_double(r.omega) << ',' << fmt_double(r.v) << ','
          << fmt_double(r.omega_cons) << ',' << fmt_double(r.e_cons) << ','
          << fmt_double(r.dE) << ',' << fmt_double(r.dF) << ','
          << fmt_double(r.E) << ',' << fmt_double(r.F) << '\n';
    }
  }
}

Metrics compute_metrics(const Scenario& sc,
                        const std::vector<TraceRecord>& trace) {
  Metrics m;
  if (trace.empty()) return m;
  int n = static_cast<int>(sc.inverters.size());

  auto band = [&](const TraceRecord& rec) {
    double b = 0.0;
    for (int k = 0; k < n; ++k)
      b = std::max(b, std::abs(rec.inv[k].omega - sc.inverters[k].omega_nom));
    return b;
  };

  m.omega_nadir = std::numeric_limits<double>::infinity();
  m.omega_peak = -std::numeric_limits<double>::infinity();
  for (const TraceRecord& rec : trace) {
    for (int k = 0; k < n; ++k) {
      m.omega_nadir = std::min(m.omega_nadir, rec.inv[k].omega);
      m.omega_peak = std::max(m.omega_peak, rec.inv[k].omega);
    }
  }
  m.final_max_abs_domega = band(trace.back());

  // Restoration windows: event time to the next event (or end of run).
  std::vector<double> starts;
  if (sc.events.empty()) {
    starts.push_back(0.0);
  } else {
    for (const SimEvent& ev : sc.events) starts.push_back(ev.t_s);
  }
  for (size_t w = 0; w < starts.size(); ++w) {
    double t0 = starts[w];
    double t1 = w + 1 < starts.size() ? starts[w + 1]
                                      : std::numeric_limits<double>::infinity();
    if (t1 <= t0) continue;  // coincident events share one window
    EventWindow win;
    win.t_event = t0;
    win.omega_min = std::numeric_limits<double>::infinity();
    win.omega_max = -std::numeric_limits<double>::infinity();
    double last_bad = -1.0;
    const TraceRecord* last_rec = nullptr;
    for (const TraceRecord& rec : trace) {
      if (rec.t < t0 || rec.t >= t1) continue;
      last_rec = &rec;
      for (int k = 0; k < n; ++k) {
        win.omega_min = std::min(win.omega_min, rec.inv[k].omega);
        win.omega_max = std::max(win.omega_max, rec.inv[k].omega);
      }
      if (band(rec) >= 1e-3) last_bad = rec.t;
    }
    if (!last_rec) continue;
    win.band_end = band(*last_rec);
    if (band(*last_rec) >= 1e-3) {
      win.settle_s = -1.0;
    } else {
      win.settle_s = last_bad < 0.0 ? 0.0 : last_bad - t0;
    }
    m.windows.push_back(win);
  }

  double first_event = sc.events.empty() ? 0.0 : sc.events.front().t_s;
  auto channel_stats = [&](const std::string& ch, double& fin, double& peak) {
    ConsensusSeries cs = consensus_error(trace, sc.inverters, ch);
    Eigen::VectorXd ma = cs.max_abs();
    fin = ma.size() ? ma[ma.size() - 1] : 0.0;
    peak = 0.0;
    for (int r = 0; r < ma.size(); ++r)
      if (cs.t[static_cast<size_t>(r)] >= first_event)
        peak = std::max(peak, ma[r]);
  };
  channel_stats("freq_energy", m.freq_energy_final, m.freq_energy_peak);
  channel_stats("volt_energy", m.volt_energy_final, m.volt_energy_peak);

  Eigen::VectorXd share =
      channel_values(trace.back(), sc.inverters, "power_sharing");
  double worst = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      worst = std::max(worst, std::abs(share[i] - share[j]));
  double mean = share.cwiseAbs().mean();
  m.power_sharing_final_rel = worst / std::max(mean, 1e-15);
  return m;
}

}  // namespace gfm
