#pragma once

#include "gfm/scenario.hpp"
#include "gfm/sim.hpp"

#include <atomic>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace gfm {

// ---------------------------------------------------------------------------
// Wire format. One record per line (and per datagram), comma-separated,
// UTF-8, floats printed shortest-round-trip. decode(encode(x)) == x exactly.
// ---------------------------------------------------------------------------

/// Consensus values one agent publishes per control tick:
///   DAPI,<sender>,<seq>,<t>,<omega_cons>,<q_ratio>,<m_dE>,<n_dF>
struct ConsensusMsg {
  int sender = 0;
  long seq = 0;  // strictly increasing per sender
  double t = 0.0;
  double omega_cons = 0.0;
  double q_ratio = 0.0;
  double m_dE = 0.0;
  double n_dF = 0.0;

  bool operator==(const ConsensusMsg&) const = default;
};

/// Plant measurement sample: MEAS,<inv>,<P>,<Q>
struct MeasRecord {
  int inv = 0;
  double p = 0.0;
  double q = 0.0;
  bool operator==(const MeasRecord&) const = default;
};

/// Secondary correction applied to the plant: ACT,<inv>,<omega>,<V>. The
/// fields are the consensus corrections Omega (rad/s) and e (V), not absolute
/// commands; the primary droop laws add them to their own outputs.
struct ActRecord {
  int inv = 0;
  double omega_cons = 0.0;
  double e_cons = 0.0;
  bool operator==(const ActRecord&) const = default;
};

/// Warm start sent once before the first tick so an agent begins at the
/// solved operating point: INIT,<inv>,<omega_cons>,<e_cons>,<P0>,<Q0>
struct InitRecord {
  int inv = 0;
  double omega_cons = 0.0;
  double e_cons = 0.0;
  double p0 = 0.0;
  double q0 = 0.0;
  bool operator==(const InitRecord&) const = default;
};

/// Field indices are zero-based and count the record tag as field 0.
struct CodecError : std::runtime_error {
  CodecError(int field_index, const std::string& what);
  int field = 0;
};

std::string encode(const ConsensusMsg& m);
std::string encode(const MeasRecord& m);
std::string encode(const ActRecord& m);
std::string encode(const InitRecord& m);

using WireRecord = std::variant<ConsensusMsg, MeasRecord, ActRecord, InitRecord>;

/// Parses one record (trailing newline optional). Throws CodecError naming
/// the offending field.
WireRecord decode(std::string_view line);

/// Newline framing over a byte stream. A truncated tail stays buffered until
/// more bytes arrive, so one bad or partial record never poisons the next.
class FrameBuffer {
 public:
  void feed(std::string_view bytes);
  std::optional<std::string> next();

 private:
  std::string buf_;
};

// ---------------------------------------------------------------------------
// Distributed runtime
// ---------------------------------------------------------------------------

struct DistributedOptions {
  std::uint64_t seed = 0;
  std::vector<int> silenced;  // agents that neither publish nor listen
};

struct AgentTelemetry {
  int id = 0;
  long ticks = 0;
  long msgs_sent = 0;
  long msgs_received = 0;
  /// Ticks integrated with at least one declared neighbor absent from the
  /// consensus sums (never heard, or silenced).
  long ticks_missing_neighbors = 0;
  bool degraded = false;
};

struct DistributedResult {
  RunResult run;
  std::vector<AgentTelemetry> telemetry;
  long overruns = 0;  // ticks that missed their pacing deadline / lost an ACT
};

/// Runs the closed loop with one message-passing agent per inverter.
/// transport=memory is a deterministic single-thread lock-step schedule with
/// the configured delay/jitter/loss applied by a seeded queue; transport=udp
/// spawns the UDP services below on loopback and joins them.
DistributedResult run_distributed(const Scenario& sc,
                                  const DistributedOptions& opt = {});

// ---------------------------------------------------------------------------
// UDP services (the `agents` subcommand roles)
// ---------------------------------------------------------------------------

struct BindError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ServiceHooks {
  std::atomic<bool>* stop = nullptr;
};

/// Electrical-plant service: binds the plant port, sends INIT then one MEAS
/// per inverter per tick, applies the freshest ACT per inverter, integrates
/// between ticks. Missing ACTs hold the previous correction and count as
/// overruns. Throws BindError if the port is taken.
DistributedResult serve_plant(const Scenario& sc,
                              const ServiceHooks& hooks = {});

/// One secondary-control agent: binds its own port (a duplicate role id fails
/// right here), consumes INIT/MEAS, exchanges consensus records with its
/// peers, answers with ACT. Runs until the scenario duration is covered, the
/// plant goes quiet, or hooks.stop is set.
AgentTelemetry serve_agent(const Scenario& sc, int id,
                           const ServiceHooks& hooks = {});

int plant_port(const Scenario& sc);
int agent_port(const Scenario& sc, int id);

}  // namespace gfm
