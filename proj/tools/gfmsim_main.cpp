#include "gfm/cli.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"gfmsim: secondary frequency/voltage control workbench for "
               "grid-forming inverter fleets"};
  app.require_subcommand(1);

  gfm::cli::Options opt;
  std::string role;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", opt.config_path, "scenario config (JSON)")
        ->required();
    cmd->add_option("--out", opt.out_dir, "output directory")
        ->capture_default_str();
    cmd->add_option("--override", opt.overrides,
                    "config override as dot.path=value (repeatable)");
    cmd->add_option("--seed", opt.seed,
                    "seed for transport impairment sampling");
  };

  CLI::App* sim = app.add_subcommand(
      "simulate", "integrate a closed-loop scenario, write trace + summary");
  add_common(sim);
  sim->add_flag("--distributed", opt.distributed,
                "run through the message-passing agent runtime");

  CLI::App* analyze = app.add_subcommand(
      "analyze", "small-signal certification report for a scenario config");
  add_common(analyze);

  CLI::App* agents = app.add_subcommand(
      "agents", "run one distributed role against live peers");
  add_common(agents);
  agents->add_option("--role", role, "plant or agent:<id>")->required();

  CLI11_PARSE(app, argc, argv);

  if (sim->parsed()) return gfm::cli::cmd_simulate(opt, std::cout);
  if (analyze->parsed()) return gfm::cli::cmd_analyze(opt, std::cout);
  if (agents->parsed()) return gfm::cli::cmd_agents(opt, role, std::cout);
  return 0;
}
