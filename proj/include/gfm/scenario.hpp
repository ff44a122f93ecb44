#pragma once

#include "gfm/model.hpp"
#include "gfm/network.hpp"

#include <optional>
#include <string>
#include <vector>

namespace gfm {

/// Config file rejection with the JSON-pointer path of the offending key.
struct SchemaError : std::runtime_error {
  SchemaError(std::string ptr, const std::string& what)
      : std::runtime_error(ptr + ": " + what), pointer(std::move(ptr)) {}
  std::string pointer;
};

struct LoadSpec {
  int bus = 0;
  double p_w = 0.0;
  double q_var = 0.0;
};

struct SimEvent {
  enum class Kind { LoadStep, LoadPickupRamp, GainChange };
  double t_s = 0.0;
  Kind kind = Kind::LoadStep;

  // LoadStep / LoadPickupRamp
  int bus = 0;
  double dp_w = 0.0;  // step deltas
  double dq_var = 0.0;
  double p_w = 0.0;  // ramp full load
  double q_var = 0.0;
  double ramp_s = 0.0;
  double v_start_frac = 1.0;

  // GainChange
  WeightKind channel = WeightKind::A;
  double value = 0.0;
};

/// Everything one closed-loop run needs. Parsed from JSON configs; tests
/// build it directly.
struct Scenario {
  std::string name;

  // Plant.
  double v_nom = 0.0;
  double omega_nom = 0.0;
  int n_buses = 0;
  std::vector<Line> lines;
  std::vector<LoadSpec> loads;

  // Fleet; inverter k taps inverter_bus[k] through coupling_z[k].
  std::vector<InverterParams> inverters;
  std::vector<int> inverter_bus;
  std::vector<cplx> coupling_z;

  std::vector<CommEdge> edges;

  // Controller.
  double lpf_cutoff = 50.0;  // rad/s, droop power filter
  enum class Coupling { Continuous, Sampled } coupling = Coupling::Continuous;
  double comm_interval_s = 0.01;

  std::vector<SimEvent> events;

  // Run control.
  double duration_s = 120.0;
  double dt_s = 1e-3;
  double decimation_s = 1e-2;

  // Distributed runtime.
  struct AgentsConfig {
    double tick_s = 0.01;
    enum class Transport { Memory, Udp } transport = Transport::Memory;
    double delay_ms = 0.0;
    double jitter_ms = 0.0;
    double loss = 0.0;
    std::string host = "127.0.0.1";
    int base_port = 47620;
    bool realtime = false;
  } agents;

  /// Throws std::invalid_argument on structural problems (unsorted events,
  /// bad time steps, rating violations, bus indices out of range).
  void validate() const;

  PhasorNetwork build_network() const;
  CommGraph build_graph() const;
};

/// Strict parse: every key must be known, types must match, cross-references
/// must resolve. Violations throw SchemaError with the JSON-pointer path.
Scenario parse_scenario(const std::string& json_text);
Scenario load_scenario(const std::string& path);

/// Applies dot-path overrides ("inverters.0.k_i_s=2.5") onto the raw JSON
/// before parsing. Values are parsed as JSON literals, falling back to
/// strings.
std::string apply_overrides(const std::string& json_text,
                            const std::vector<std::string>& overrides);

std::string scenario_to_json(const Scenario& s);

}  // namespace gfm
