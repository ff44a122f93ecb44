#include "gfm/model.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace gfm {

void InverterParams::validate() const {
  auto fail = [this](const std::string& what) {
    throw std::invalid_argument("inverter '" + id + "': " + what);
  };
  if (s_max <= 0.0) fail("s_max must be positive");
  if (v_nom <= 0.0) fail("v_nom must be positive");
  if (omega_nom <= 0.0) fail("omega_nom must be positive");
  if (m_pu <= 0.0) fail("m_pu must be positive");
  if (n_pu <= 0.0) fail("n_pu must be positive");
  if (q_set == 0.0) fail("q_set must be nonzero (reactive consensus divides by it)");
  if (k_i <= 0.0) fail("k_i must be positive");
  if (kappa_i <= 0.0) fail("kappa_i must be positive");
  if (xi < 0.0) fail("xi must be nonnegative");
  if (e_capacity < 0.0) fail("e_capacity must be nonnegative");
  if (kind == InverterKind::Vsm) {
    if (m_omega <= 0.0) fail("m_omega must be positive for a VSM inverter");
    if (tau_v <= 0.0) fail("tau_v must be positive for a VSM inverter");
  }
  if (std::abs(p_set) > s_max) fail("p_set exceeds s_max");
  if (std::hypot(p_set, q_set) > s_max) fail("setpoint exceeds the rating circle");
}

bool InverterState::all_finite() const {
  for (double x : {delta, d_omega, v, omega_cons, e_cons, p_filt, q_filt, dE, dF, f_capacity})
    if (!std::isfinite(x)) return false;
  return true;
}

double edge_weight(const CommEdge& e, WeightKind kind) {
  switch (kind) {
    case WeightKind::A: return e.a;
    case WeightKind::B: return e.b;
    case WeightKind::E: return e.e;
    case WeightKind::F: return e.f;
  }
  return 0.0;
}

namespace {

// Union-graph connected components via label propagation; cheap at these sizes.
std::vector<int> components(int n, const std::vector<CommEdge>& edges) {
  std::vector<int> comp(n);
  for (int i = 0; i < n; ++i) comp[i] = i;
  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& e : edges) {
      if (e.a <= 0.0 && e.b <= 0.0 && e.e <= 0.0 && e.f <= 0.0) continue;
      int lo = std::min(comp[e.i], comp[e.j]);
      if (comp[e.i] != lo || comp[e.j] != lo) {
        comp[e.i] = comp[e.j] = lo;
        changed = true;
      }
    }
  }
  return comp;
}

}  // namespace

CommGraph::CommGraph(int n, std::vector<CommEdge> edges, Connectivity policy)
    : n_(n), edges_(std::move(edges)) {
  if (n_ < 1) throw std::invalid_argument("comm graph needs at least one node");
  for (auto& e : edges_) {
    if (e.i == e.j) throw std::invalid_argument("comm graph self-loop at node " + std::to_string(e.i));
    if (e.i < 0 || e.i >= n_ || e.j < 0 || e.j >= n_)
      throw std::invalid_argument("comm graph edge references a node outside [0, n)");
    if (e.a < 0.0 || e.b < 0.0 || e.e < 0.0 || e.f < 0.0)
      throw std::invalid_argument("comm graph weights must be nonnegative");
    if (e.i > e.j) std::swap(e.i, e.j);
  }
  if (policy == Connectivity::Allowed) return;

  auto comp = components(n_, edges_);
  bool connected = true;
  for (int i = 1; i < n_; ++i)
    if (comp[i] != comp[0]) connected = false;
  if (!connected) {
    // Name the components so a bad config is diagnosable.
    std::ostringstream msg;
    msg << "comm graph is disconnected: components";
    std::vector<bool> seen(n_, false);
    for (int i = 0; i < n_; ++i) {
      if (seen[i]) continue;
      msg << " {";
      bool first = true;
      for (int k = i; k < n_; ++k) {
        if (comp[k] == comp[i]) {
          seen[k] = true;
          msg << (first ? "" : ",") << k;
          first = false;
        }
      }
      msg << "}";
    }
    throw std::invalid_argument(msg.str());
  }
}

Eigen::MatrixXd CommGraph::laplacian(WeightKind kind) const {
  Eigen::MatrixXd lap = Eigen::MatrixXd::Zero(n_, n_);
  for (const auto& e : edges_) {
    double w = edge_weight(e, kind);
    lap(e.i, e.j) -= w;
    lap(e.j, e.i) -= w;
    lap(e.i, e.i) += w;
    lap(e.j, e.j) += w;
  }
  return lap;
}

namespace {

// Ratio of one channel against another, present only when uniform. Edges with
// both weights zero impose no constraint; a nonzero numerator over a zero
// denominator rules a uniform ratio out.
std::optional<double> channel_ratio(const std::vector<CommEdge>& edges, WeightKind num,
                                    WeightKind den) {
  std::optional<double> ratio;
  bool any_edge = false;
  for (const auto& e : edges) {
    double wn = edge_weight(e, num);
    double wd = edge_weight(e, den);
    if (wd == 0.0) {
      if (wn != 0.0) return std::nullopt;
      continue;
    }
    any_edge = true;
    double r = wn / wd;
    if (!ratio) {
      ratio = r;
    } else {
      double scale = std::max({std::abs(*ratio), std::abs(r), 1.0});
      if (std::abs(r - *ratio) > 1e-12 * scale) return std::nullopt;
    }
  }
  if (!any_edge) return 0.0;
  return ratio;
}

}  // namespace

GammaRatios CommGraph::gamma_ratios() const {
  return {channel_ratio(edges_, WeightKind::E, WeightKind::A),
          channel_ratio(edges_, WeightKind::F, WeightKind::B)};
}

void CommGraph::set_uniform_weight(WeightKind kind, double value) {
  if (value < 0.0) throw std::invalid_argument("comm graph weights must be nonnegative");
  for (auto& e : edges_) {
    switch (kind) {
      case WeightKind::A: e.a = value; break;
      case WeightKind::B: e.b = value; break;
      case WeightKind::E: e.e = value; break;
      case WeightKind::F: e.f = value; break;
    }
  }
}

}  // namespace gfm
