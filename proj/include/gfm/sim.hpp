#pragma once

#include "gfm/model.hpp"
#include "gfm/network.hpp"
#include "gfm/scenario.hpp"
#include "gfm/secondary.hpp"

#include <Eigen/Dense>

#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace gfm {

/// One decimated telemetry sample for the whole fleet. P/Q are the
/// instantaneous injected powers; omega and v are the commanded frequency and
/// magnitude; the rest are secondary-controller states.
struct TraceRecord {
  double t = 0.0;
  struct PerInverter {
    double p = 0.0;
    double q = 0.0;
    double omega = 0.0;      // absolute, rad/s
    double v = 0.0;          // V
    double omega_cons = 0.0;
    double e_cons = 0.0;
    double dE = 0.0;         // W*s
    double dF = 0.0;         // VAR*s
    double E = 0.0;          // remaining active reserve
    double F = 0.0;          // remaining reactive reserve
  };
  std::vector<PerInverter> inv;
};

/// Frequency-restoration quality over the window following one event (until
/// the next event or the end of the run).
struct EventWindow {
  double t_event = 0.0;
  double settle_s = -1.0;    // time from the event until max|omega - omega*|
                             // last leaves the 1e-3 rad/s band; -1 if it never
                             // re-enters
  double band_end = 0.0;     // max|omega - omega*| at the window's last sample
  double omega_min = 0.0;    // absolute extremes inside the window
  double omega_max = 0.0;
};

struct Metrics {
  double final_max_abs_domega = 0.0;
  double omega_nadir = 0.0;
  double omega_peak = 0.0;
  std::vector<EventWindow> windows;

  // Max pairwise consensus mismatch, final value and post-first-event peak.
  double freq_energy_final = 0.0;
  double freq_energy_peak = 0.0;
  double volt_energy_final = 0.0;
  double volt_energy_peak = 0.0;
  // Final max pairwise |m dP| mismatch relative to the mean |m dP|.
  double power_sharing_final_rel = 0.0;

  double runtime_s = 0.0;
  long long steps = 0;
};

struct RunResult {
  std::vector<TraceRecord> trace;
  Metrics metrics;
  bool aborted = false;
  std::string diagnostic;
};

/// Closed-loop operating point used as the initial condition: frequency
/// restored, consensus rates zero, reserves empty.
struct Equilibrium {
  Eigen::VectorXcd sources;      // terminal phasors at the solution
  std::vector<double> delta;     // rad, delta[0] == 0 by convention
  std::vector<double> v;         // commanded magnitudes, V
  std::vector<double> e_cons;    // recovered voltage corrections, V
  double omega_cons = 0.0;       // common frequency correction, rad/s
  std::vector<double> p, q;      // injections at the solution, W / VAR
  int iterations = 0;
  double residual = 0.0;
};

/// Newton solve for the equilibrium at reference voltage v_ref and whatever
/// load the network currently carries. Throws SolverError on non-convergence.
Equilibrium solve_equilibrium(PhasorNetwork& net,
                              const std::vector<InverterParams>& inverters,
                              const CommGraph& graph, double v_ref);

/// Full closed-loop run per the scenario's coupling mode. Never throws for
/// numerical trouble: a non-finite state aborts the run, keeps the trace up
/// to the last valid sample and reports a diagnostic.
RunResult run(const Scenario& sc);

/// Signed pairwise consensus mismatch series. Channels:
///   freq_energy:   m_i dE_i - m_j dE_j
///   volt_energy:   n_i dF_i - n_j dF_j
///   power_sharing: m_i (P_i - P_i*) - m_j (P_j - P_j*)
/// Unknown channel names throw.
struct ConsensusSeries {
  std::vector<double> t;
  std::vector<std::pair<int, int>> pairs;  // (i, j) with i < j
  Eigen::MatrixXd values;                  // rows follow t, cols follow pairs
  Eigen::VectorXd max_abs() const;
};
ConsensusSeries consensus_error(const std::vector<TraceRecord>& trace,
                                const std::vector<InverterParams>& inverters,
                                const std::string& channel);

/// CSV with one row per (sample, inverter); doubles are shortest
/// round-trippable. Header: t,inv,P,Q,omega,V,Omega,e_cons,dE,dF,E,F
void write_trace_csv(std::ostream& out, const std::vector<TraceRecord>& trace,
                     const std::vector<InverterParams>& inverters);

Metrics compute_metrics(const Scenario& sc,
                        const std::vector<TraceRecord>& trace);

/// Plant side of the sampled-coupling loop: primary dynamics stepped at dt
/// with the secondary corrections held between control ticks. The monolithic
/// sampled mode and the distributed runtime drive the same object, which is
/// what makes a zero-impairment distributed run reproduce the monolithic
/// trace.
class PlantModel {
 public:
  explicit PlantModel(const Scenario& sc);
  ~PlantModel();
  PlantModel(PlantModel&&) noexcept;

  int fleet_size() const;
  double time() const;
  const Equilibrium& equilibrium() const;

  struct Meas {
    double p = 0.0;
    double q = 0.0;
  };
  /// What the controller samples at a tick boundary: the filtered powers for
  /// droop units, instantaneous injections for VSM units.
  std::vector<Meas> measure();

  struct Actuation {
    double omega_cons = 0.0;
    double e_cons = 0.0;
  };
  /// Integrates n_steps of dt with the corrections held. Fires on_sample
  /// after every step (current absolute step index) so the driver can
  /// decimate. Returns false once the state goes non-finite; the diagnostic
  /// explains where.
  bool advance(const std::vector<Actuation>& act, int n_steps,
               const std::function<void(long long)>& on_sample = {});

  struct Readout {
    double p = 0.0;
    double q = 0.0;
    double omega = 0.0;
    double v = 0.0;
  };
  std::vector<Readout> readout();

  const std::string& diagnostic() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace gfm
