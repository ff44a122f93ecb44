#pragma once

#include <Eigen/Dense>

#include <complex>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gfm {

using cplx = std::complex<double>;

/// Series branch between two buses.
struct Line {
  int from = 0;
  int to = 0;
  cplx z{0.0, 0.0};  // ohm
};

/// Connection of one inverter to a bus through a coupling impedance. A zero
/// impedance makes the bus itself the inverter terminal.
struct InverterTap {
  int bus = 0;
  cplx z{0.0, 0.0};  // ohm
};

/// Quasi-static positive-sequence network. Inverters appear as ideal voltage
/// sources at their terminal nodes; everything else is linear admittance, so
/// one complex linear solve per evaluation yields the injected powers.
///
/// Loads are constant-impedance. Each bus keeps an ordered list of admittance
/// contributions; an event that is the exact negation of a prior one cancels
/// it structurally, so event/inverse-event pairs restore the original
/// admittance bit for bit.
class PhasorNetwork {
 public:
  PhasorNetwork(int n_buses, std::vector<Line> lines, std::vector<InverterTap> taps,
                double v_nom);

  int bus_count() const { return n_buses_; }
  int source_count() const { return static_cast<int>(taps_.size()); }
  double v_nom() const { return v_nom_; }
  const std::vector<Line>& lines() const { return lines_; }
  const std::vector<InverterTap>& taps() const { return taps_; }

  /// Static load addition. p/q are consumed powers at nominal voltage; the
  /// constant admittance is y = (p - jq) / v_nom^2.
  void add_load_power(int bus, double p, double q);
  void add_load_admittance(int bus, cplx y);

  /// Load whose admittance is scaled at runtime (pickup ramps). Returns a
  /// slot index for set_load_scale.
  int add_scalable_load(int bus, cplx y_full);
  void set_load_scale(int slot, double frac);
  double load_scale(int slot) const;

  /// Total constant-impedance admittance currently applied at a bus,
  /// including any scaled contribution.
  cplx load_admittance(int bus) const;

  struct Injection {
    double p = 0.0;  // W into the network at the inverter terminal
    double q = 0.0;  // VAR into the network
  };

  struct SolveResult {
    std::vector<Injection> injections;  // one per tap, tap order
    Eigen::VectorXcd v_node;            // all node voltages, buses first then internal terminals
    Eigen::VectorXcd i_source;          // current injected by each source, tap order
  };

  /// Solves the nodal equations with the given terminal voltage phasors (one
  /// per tap, tap order). Throws SolverError if the reduced admittance matrix
  /// is singular (disconnected island or degenerate loading).
  SolveResult solve_injections(std::span<const cplx> sources) const;

  /// Admittance matrix reduced to the inverter terminal nodes (loads folded
  /// in). Used by the small-signal linearization.
  Eigen::MatrixXcd kron_reduced() const;

  /// Node index of an inverter terminal (bus index, or an internal node when
  /// the coupling impedance is nonzero).
  int terminal_node(int tap) const { return source_node_[tap]; }
  int node_count() const { return n_nodes_; }

 private:
  void rebuild_if_needed() const;

  int n_buses_;
  int n_nodes_;
  std::vector<Line> lines_;
  std::vector<InverterTap> taps_;
  double v_nom_;

  std::vector<std::vector<cplx>> bus_loads_;  // ordered contributions per bus

  struct ScalableLoad {
    int bus;
    cplx y_full;
    double frac = 0.0;
  };
  std::vector<ScalableLoad> scalable_;

  std::vector<int> source_node_;  // tap -> node
  std::vector<int> unknown_node_;

  // Factorization cache; rebuilt when loads change.
  mutable bool dirty_ = true;
  mutable Eigen::MatrixXcd y_full_;
  mutable Eigen::MatrixXcd y_su_, y_ss_;
  mutable Eigen::MatrixXcd y_us_;
  mutable Eigen::FullPivLU<Eigen::MatrixXcd> lu_uu_;
};

struct SolverError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace gfm
