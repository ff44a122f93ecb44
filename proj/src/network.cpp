#include "gfm/network.hpp"

#include <algorithm>
#include <stdexcept>

namespace gfm {

PhasorNetwork::PhasorNetwork(int n_buses, std::vector<Line> lines, std::vector<InverterTap> taps,
                             double v_nom)
    : n_buses_(n_buses), lines_(std::move(lines)), taps_(std::move(taps)), v_nom_(v_nom) {
  if (n_buses_ < 1) throw std::invalid_argument("network needs at least one bus");
  if (v_nom_ <= 0.0) throw std::invalid_argument("network v_nom must be positive");
  for (const auto& ln : lines_) {
    if (ln.from < 0 || ln.from >= n_buses_ || ln.to < 0 || ln.to >= n_buses_ || ln.from == ln.to)
      throw std::invalid_argument("line endpoints out of range");
    if (ln.z == cplx{0.0, 0.0}) throw std::invalid_argument("line impedance must be nonzero");
  }
  if (taps_.empty()) throw std::invalid_argument("network needs at least one inverter tap");

  bus_loads_.resize(n_buses_);

  n_nodes_ = n_buses_;
  source_node_.reserve(taps_.size());
  for (const auto& tap : taps_) {
    if (tap.bus < 0 || tap.bus >= n_buses_) throw std::invalid_argument("tap bus out of range");
    if (tap.z == cplx{0.0, 0.0}) {
      for (int prior : source_node_)
        if (prior == tap.bus)
          throw std::invalid_argument("two zero-impedance taps share bus " + std::to_string(tap.bus));
      source_node_.push_back(tap.bus);
    } else {
      source_node_.push_back(n_nodes_++);  // dedicated terminal node
    }
  }

  std::vector<bool> is_source(n_nodes_, false);
  for (int s : source_node_) is_source[s] = true;
  for (int n = 0; n < n_nodes_; ++n)
    if (!is_source[n]) unknown_node_.push_back(n);
}

void PhasorNetwork::add_load_power(int bus, double p, double q) {
  add_load_admittance(bus, cplx{p, -q} / (v_nom_ * v_nom_));
}

void PhasorNetwork::add_load_admittance(int bus, cplx y) {
  if (bus < 0 || bus >= n_buses_) throw std::invalid_argument("load bus out of range");
  if (y == cplx{0.0, 0.0}) return;  // no-op event, cache stays valid
  auto& list = bus_loads_[bus];
  // An exact inverse of an earlier contribution cancels it instead of
  // stacking, so apply/revert pairs restore the admittance exactly.
  auto match = std::find_if(list.begin(), list.end(), [y](cplx prior) { return prior == -y; });
  if (match != list.end())
    list.erase(match);
  else
    list.push_back(y);
  dirty_ = true;
}

int PhasorNetwork::add_scalable_load(int bus, cplx y_full) {
  if (bus < 0 || bus >= n_buses_) throw std::invalid_argument("load bus out of range");
  scalable_.push_back({bus, y_full, 0.0});
  dirty_ = true;
  return static_cast<int>(scalable_.size()) - 1;
}

void PhasorNetwork::set_load_scale(int slot, double frac) {
  auto& s = scalable_.at(slot);
  if (s.frac != frac) {
    s.frac = frac;
    dirty_ = true;
  }
}

double PhasorNetwork::load_scale(int slot) const { return scalable_.at(slot).frac; }

cplx PhasorNetwork::load_admittance(int bus) const {
  cplx y{0.0, 0.0};
  for (cplx c : bus_loads_.at(bus)) y += c;
  for (const auto& s : scalable_)
    if (s.bus == bus) y += s.frac * s.y_full;
  return y;
}

void PhasorNetwork::rebuild_if_needed() const {
  if (!dirty_) return;

  y_full_ = Eigen::MatrixXcd::Zero(n_nodes_, n_nodes_);
  auto stamp = [this](int a, int b, cplx y) {
    y_full_(a, a) += y;
    y_full_(b, b) += y;
    y_full_(a, b) -= y;
    y_full_(b, a) -= y;
  };
  for (const auto& ln : lines_) stamp(ln.from, ln.to, 1.0 / ln.z);
  for (size_t k = 0; k < taps_.size(); ++k)
    if (taps_[k].z != cplx{0.0, 0.0}) stamp(taps_[k].bus, source_node_[k], 1.0 / taps_[k].z);
  for (int b = 0; b < n_buses_; ++b) y_full_(b, b) += load_admittance(b);

  const auto nu = static_cast<Eigen::Index>(unknown_node_.size());
  const auto ns = static_cast<Eigen::Index>(source_node_.size());
  Eigen::MatrixXcd y_uu(nu, nu);
  y_us_.resize(nu, ns);
  y_su_.resize(ns, nu);
  y_ss_.resize(ns, ns);
  for (Eigen::Index r = 0; r < nu; ++r) {
    for (Eigen::Index c = 0; c < nu; ++c) y_uu(r, c) = y_full_(unknown_node_[r], unknown_node_[c]);
    for (Eigen::Index c = 0; c < ns; ++c) y_us_(r, c) = y_full_(unknown_node_[r], source_node_[c]);
  }
  for (Eigen::Index r = 0; r < ns; ++r) {
    for (Eigen::Index c = 0; c < nu; ++c) y_su_(r, c) = y_full_(source_node_[r], unknown_node_[c]);
    for (Eigen::Index c = 0; c < ns; ++c) y_ss_(r, c) = y_full_(source_node_[r], source_node_[c]);
  }

  if (nu > 0) {
    lu_uu_.compute(y_uu);
    if (!lu_uu_.isInvertible())
      throw SolverError("network admittance is singular: an island has no source or load path");
  }
  dirty_ = false;
}

PhasorNetwork::SolveResult PhasorNetwork::solve_injections(std::span<const cplx> sources) const {
  if (static_cast<int>(sources.size()) != source_count())
    throw std::invalid_argument("source phasor count does not match tap count");
  rebuild_if_needed();

  const auto ns = static_cast<Eigen::Index>(source_node_.size());
  const auto nu = static_cast<Eigen::Index>(unknown_node_.size());
  Eigen::VectorXcd v_s(ns);
  for (Eigen::Index k = 0; k < ns; ++k) v_s(k) = sources[k];

  Eigen::VectorXcd v_u(nu);
  if (nu > 0) v_u = lu_uu_.solve(-(y_us_ * v_s));

  SolveResult out;
  out.i_source = y_su_ * v_u + y_ss_ * v_s;
  out.v_node.resize(n_nodes_);
  for (Eigen::Index r = 0; r < nu; ++r) out.v_node(unknown_node_[r]) = v_u(r);
  for (Eigen::Index k = 0; k < ns; ++k) out.v_node(source_node_[k]) = v_s(k);
  out.injections.resize(ns);
  for (Eigen::Index k = 0; k < ns; ++k) {
    cplx s = v_s(k) * std::conj(out.i_source(k));
    out.injections[k] = {s.real(), s.imag()};
  }
  return out;
}

Eigen::MatrixXcd PhasorNetwork::kron_reduced() const {
  rebuild_if_needed();
  if (unknown_node_.empty()) return y_ss_;
  return y_ss_ - y_su_ * lu_uu_.solve(y_us_);
}

}  // namespace gfm
