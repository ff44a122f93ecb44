#include "gfm/cli.hpp"

#include "gfm/agents.hpp"
#include "gfm/scenario.hpp"
#include "gfm/sim.hpp"
#include "gfm/stability.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

namespace gfm::cli {
namespace {

using nlohmann::json;

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

Scenario load_with_overrides(const Options& opt) {
  std::string text = slurp(opt.config_path);
  if (!opt.overrides.empty()) text = apply_overrides(text, opt.overrides);
  return parse_scenario(text);
}

json metrics_json(const Metrics& m) {
  json j;
  j["final_max_abs_domega_rad_s"] = m.final_max_abs_domega;
  j["omega_nadir_rad_s"] = m.omega_nadir;
  j["omega_peak_rad_s"] = m.omega_peak;
  j["windows"] = json::array();
  for (const EventWindow& w : m.windows)
    j["windows"].push_back({{"t_event_s", w.t_event},
                            {"settle_s", w.settle_s},
                            {"band_end_rad_s", w.band_end},
                            {"omega_min_rad_s", w.omega_min},
                            {"omega_max_rad_s", w.omega_max}});
  j["consensus"] = {
      {"freq_energy", {{"final", m.freq_energy_final}, {"peak", m.freq_energy_peak}}},
      {"volt_energy", {{"final", m.volt_energy_final}, {"peak", m.volt_energy_peak}}},
      {"power_sharing_final_rel", m.power_sharing_final_rel}};
  j["runtime_s"] = m.runtime_s;
  j["steps"] = m.steps;
  return j;
}

json telemetry_json(const std::vector<AgentTelemetry>& tel) {
  json arr = json::array();
  for (const AgentTelemetry& t : tel)
    arr.push_back({{"id", t.id},
                   {"ticks", t.ticks},
                   {"msgs_sent", t.msgs_sent},
                   {"msgs_received", t.msgs_received},
                   {"ticks_missing_neighbors", t.ticks_missing_neighbors},
                   {"degraded", t.degraded}});
  return arr;
}

json rh_json(const RhResult& rh) {
  json j;
  j["stable"] = rh.stable;
  j["reduced_stable"] = rh.reduced_stable;
  j["zero_roots"] = rh.zero_roots;
  j["violated"] = rh.violated;
  return j;
}

json bound_json(const BoundCheck& b) {
  return {{"value", b.value}, {"bound", b.bound}, {"pass", b.pass},
          {"margin", b.margin}};
}

json spectrum_json(const SpectrumReport& s) {
  json vals = json::array();
  for (const auto& z : s.values) vals.push_back({z.real(), z.imag()});
  return {{"eigenvalues", vals},
          {"max_real", s.max_real},
          {"structural_zeros", s.structural_zeros}};
}

json modes_json(const std::vector<ModeReport>& modes) {
  json arr = json::array();
  for (const ModeReport& m : modes)
    arr.push_back({{"lambda_graph", m.lambda_graph},
                   {"lambda_network", m.lambda_network},
                   {"alpha", m.alpha},
                   {"rh", rh_json(m.rh)}});
  return arr;
}

json report_json(const StabilityReport& rep) {
  json j;
  j["energy_channels"] = {
      {"frequency_active", rep.gamma_e > 0.0},
      {"voltage_active", rep.gamma_f > 0.0},
      {"gamma_e", rep.gamma_e},
      {"gamma_f", rep.gamma_f}};
  j["modal"] = {{"available", rep.modal_available},
                {"freq_commutator_rel", rep.freq_commutator_rel},
                {"volt_commutator_rel", rep.volt_commutator_rel},
                {"freq_modes", modes_json(rep.freq_modes)},
                {"volt_modes", modes_json(rep.volt_modes)}};
  j["gain_bounds"] = {{"k_i", bound_json(rep.bounds.k_i)},
                      {"m_omega", bound_json(rep.bounds.m_omega)},
                      {"q_star", bound_json(rep.bounds.q_star)}};
  j["spectra"] = {{"frequency", spectrum_json(rep.freq_spectrum)},
                  {"voltage", spectrum_json(rep.volt_spectrum)}};
  j["linearization"] = {{"l_p_rowsum_rel", rep.linearization.l_p_rowsum_rel},
                        {"l_q_rowsum_rel", rep.linearization.l_q_rowsum_rel}};
  j["verdicts"] = {{"all_rh_pass", rep.all_rh_pass},
                   {"all_bounds_pass", rep.all_bounds_pass},
                   {"spectra_stable", rep.spectra_stable}};
  return j;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

int write_run_outputs(const Scenario& sc, const RunResult& rr,
                      const Options& opt, std::ostream& log,
                      const std::vector<AgentTelemetry>* tel, long overruns) {
  std::filesystem::create_directories(opt.out_dir);
  std::filesystem::path dir(opt.out_dir);

  std::ofstream csv(dir / "trace.csv");
  write_trace_csv(csv, rr.trace, sc.inverters);

  json summary;
  summary["scenario"] = sc.name;
  summary["aborted"] = rr.aborted;
  summary["diagnostic"] = rr.diagnostic;
  summary["metrics"] = metrics_json(rr.metrics);
  if (tel) {
    summary["agents"] = telemetry_json(*tel);
    summary["overruns"] = overruns;
  }
  write_file(dir / "summary.json", summary.dump(2) + "\n");

  if (rr.aborted) {
    log << "run aborted: " << rr.diagnostic << "\n";
    log << "partial trace (" << rr.trace.size() << " samples) kept in "
        << (dir / "trace.csv").string() << "\n";
    return 1;
  }
  log << "run complete: " << rr.trace.size() << " samples, "
      << rr.metrics.steps << " steps in " << rr.metrics.runtime_s << " s\n";
  log << "final max|omega - omega*| = " << rr.metrics.final_max_abs_domega
      << " rad/s\n";
  return 0;
}

}  // namespace

int cmd_simulate(const Options& opt, std::ostream& log) {
  try {
    Scenario sc = load_with_overrides(opt);
    if (opt.distributed) {
      DistributedResult dr = run_distributed(sc, {opt.seed, {}});
      return write_run_outputs(sc, dr.run, opt, log, &dr.telemetry,
                               dr.overruns);
    }
    RunResult rr = run(sc);
    return write_run_outputs(sc, rr, opt, log, nullptr, 0);
  } catch (const SchemaError& ex) {
    log << "config schema violation at " << ex.pointer << ": " << ex.what()
        << "\n";
    return 2;
  } catch (const std::invalid_argument& ex) {
    log << "config rejected: " << ex.what() << "\n";
    return 2;
  } catch (const BindError& ex) {
    log << "bind failure: " << ex.what() << "\n";
    return 3;
  } catch (const std::exception& ex) {
    log << "error: " << ex.what() << "\n";
    return 1;
  }
}

int cmd_analyze(const Options& opt, std::ostream& log) {
  try {
    Scenario sc = load_with_overrides(opt);
    PhasorNetwork net = sc.build_network();
    CommGraph graph = sc.build_graph();
    Equilibrium eq = solve_equilibrium(net, sc.inverters, graph, sc.v_nom);

    OperatingPoint op;
    op.sources = eq.sources;
    op.converged = true;
    op.residual = eq.residual;
    StabilityReport rep = build_stability_report(net, op, graph, sc.inverters,
                                                 sc.lpf_cutoff);

    std::filesystem::create_directories(opt.out_dir);
    write_file(std::filesystem::path(opt.out_dir) / "stability.json",
               report_json(rep).dump(2) + "\n");

    if (rep.gamma_e == 0.0 && rep.gamma_f == 0.0)
      log << "energy channels absent (gamma_e = gamma_f = 0); certifying the "
             "base consensus loops only\n";
    log << "gain bounds: "
        << (rep.bounds.k_i.pass ? "k_i ok" : "k_i VIOLATED") << ", "
        << (rep.bounds.m_omega.pass ? "m_omega ok" : "m_omega VIOLATED")
        << ", " << (rep.bounds.q_star.pass ? "Q* ok" : "Q* VIOLATED") << "\n";
    if (rep.modal_available) {
      log << "modal certificates: " << rep.freq_modes.size()
          << " frequency and " << rep.volt_modes.size() << " voltage modes, "
          << (rep.all_rh_pass ? "all stable" : "FAILURES present") << "\n";
    } else {
      log << "modal decomposition unavailable (non-commuting pair); relying "
             "on assembled spectra\n";
    }
    log << "assembled spectra: max Re(lambda) = " << rep.freq_spectrum.max_real
        << " (frequency), " << rep.volt_spectrum.max_real << " (voltage)"
        << (rep.spectra_stable ? "" : "  UNSTABLE") << "\n";

    bool pass = rep.all_rh_pass && rep.spectra_stable;
    log << (pass ? "verdict: certified stable\n"
                 : "verdict: stability certification FAILED\n");
    return pass ? 0 : 1;
  } catch (const SchemaError& ex) {
    log << "config schema violation at " << ex.pointer << ": " << ex.what()
        << "\n";
    return 2;
  } catch (const std::invalid_argument& ex) {
    log << "config rejected: " << ex.what() << "\n";
    return 2;
  } catch (const std::exception& ex) {
    log << "error: " << ex.what() << "\n";
    return 1;
  }
}

int cmd_agents(const Options& opt, const std::string& role, std::ostream& log) {
  try {
    Scenario sc = load_with_overrides(opt);
    if (role == "plant") {
      DistributedResult dr = serve_plant(sc);
      return write_run_outputs(sc, dr.run, opt, log, &dr.telemetry,
                               dr.overruns);
    }
    if (role.rfind("agent:", 0) == 0) {
      int id = -1;
      try {
        id = std::stoi(role.substr(6));
      } catch (const std::exception&) {
        log << "role must be plant or agent:<id>, got '" << role << "'\n";
        return 2;
      }
      AgentTelemetry tel = serve_agent(sc, id);
      log << telemetry_json({tel}).dump(2) << "\n";
      if (tel.degraded)
        log << "agent " << id
            << " ran degraded (missing neighbors or no warm start)\n";
      return 0;
    }
    log << "role must be plant or agent:<id>, got '" << role << "'\n";
    return 2;
  } catch (const SchemaError& ex) {
    log << "config schema violation at " << ex.pointer << ": " << ex.what()
        << "\n";
    return 2;
  } catch (const BindError& ex) {
    log << "bind failure: " << ex.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& ex) {
    log << "config rejected: " << ex.what() << "\n";
    return 2;
  } catch (const std::exception& ex) {
    log << "error: " << ex.what() << "\n";
    return 1;
  }
}

}  // namespace gfm::cli
