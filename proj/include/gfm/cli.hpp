#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace gfm::cli {

/// Shared command options. Exit codes across all commands:
///   0  success
///   1  failed verdict (analyze) or aborted integration (simulate)
///   2  config schema violation; the message carries the JSON-pointer path
///   3  socket bind failure
struct Options {
  std::string config_path;
  std::string out_dir = "out";
  std::vector<std::string> overrides;  // dot paths, e.g. inverters.0.k_i_s=2.5
  std::uint64_t seed = 0;
  bool distributed = false;  // simulate through the agent runtime instead
};

int cmd_simulate(const Options& opt, std::ostream& log);
int cmd_analyze(const Options& opt, std::ostream& log);

/// role is "plant" or "agent:<id>".
int cmd_agents(const Options& opt, const std::string& role, std::ostream& log);

}  // namespace gfm::cli
