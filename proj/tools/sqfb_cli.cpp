// sqfb: scenario-driven predictions, simulations, spectra, lock-in tracks and fits.
//
// Exit codes: 0 success, 1 usage, 2 invalid scenario or configuration,
// 3 feedback loop unstable, 4 analysis failure, 5 file I/O failure.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "sqfb/scenario.hpp"

namespace {

enum Exit { kOk = 0, kUsage = 1, kConfig = 2, kUnstable = 3, kAnalysis = 4, kIo = 5 };

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  unsigned threads = 1;
};

sqfb::RunOptions options(const Globals& g, std::optional<std::vector<sqfb::Output>> only) {
  sqfb::RunOptions o;
  o.out_dir = g.out_dir;
  o.seed = g.seed;
  o.threads = g.threads;
  o.only = std::move(only);
  return o;
}

void print_report(const sqfb::RunReport& r) {
  for (const auto& f : r.files) std::cout << "wrote " << f.string() << '\n';
  for (const auto& n : r.notes) std::cerr << n << '\n';
}

int run_pipeline(const std::string& path, const Globals& g, std::optional<std::vector<sqfb::Output>> only) {
  const auto sc = sqfb::load_scenario(path);
  print_report(sqfb::run_scenario(sc, options(g, std::move(only))));
  return kOk;
}

const sqfb::LabeledProbe& pick_probe(const sqfb::Scenario& sc, const std::string& label) {
  return label.empty() ? sc.probes.front() : sc.probe(label);
}

/// Fits an external spectrum file using the scenario's mode and probe as the nominal model.
int fit_external(const std::string& path, const std::string& spectrum, const std::string& label, double averages,
                 const Globals& g) {
  const auto sc = sqfb::load_scenario(path);
  const auto& lp = pick_probe(sc, label);
  const auto spec = sqfb::read_spectrum_csv(spectrum, averages);
  if (!(spec.effective_averages > 0.0))
    throw sqfb::ConfigError("spectrum has no averages metadata; pass --averages");
  const double g_nom = sc.feedback.config.mode == sqfb::FeedbackMode::ideal_viscous ? sqfb::resolve_gain(sc, lp.probe)
                                                                                    : 0.0;
  const auto nominal = sqfb::SquashModel::from_physics(sc.mode, lp.probe, g_nom);
  const auto fit = sqfb::fit_spectrum(spec, nominal);
  auto kv = sqfb::fit_record(fit);
  if (fit.converged) {
    const auto eff = sqfb::effective_temperature(fit, sc.mode, lp.probe);
    kv.emplace_back("t_closed_form_k", sqfb::format_number(eff.t_closed_form));
    kv.emplace_back("t_integral_k", sqfb::format_number(eff.t_integral));
    kv.emplace_back("strength", sqfb::format_number(eff.strength));
    kv.emplace_back("implied_detected_variance", sqfb::format_number(eff.implied_vd));
  }
  std::filesystem::create_directories(g.out_dir);
  const auto out = std::filesystem::path(g.out_dir) / ("fit_" + lp.label + "_external.txt");
  std::ofstream os(out);
  if (!os) throw sqfb::IoError("cannot write " + out.string());
  sqfb::write_key_values(os, kv);
  sqfb::write_key_values(std::cout, kv);
  std::cout << "wrote " << out.string() << '\n';
  return fit.converged ? kOk : kAnalysis;
}

/// Spectra and lock-in track of a trajectory CSV written by `simulate`.
int analyze_trajectory(const std::string& file, const Globals& g, double lockin_bw) {
  const auto rec = sqfb::read_trajectory_csv(file);
  auto meta = [&](const char* k) {
    auto it = rec.meta.find(k);
    if (it == rec.meta.end()) throw sqfb::IoError(std::string("trajectory metadata lacks ") + k);
    return sqfb::parse_number(it->second);
  };
  sqfb::Trajectory tr;
  tr.t = rec.t;
  tr.x = rec.x;
  tr.v = rec.v;
  tr.y = rec.y;
  tr.f_fb = rec.f_fb;
  auto& cfg = tr.config;
  cfg.mode = sqfb::MechanicalMode::from_hz(meta("f_m_hz"), meta("linewidth_hz"), meta("mass_kg"), meta("t_bath_k"));
  cfg.sample_rate = rec.sample_rate();
  cfg.duration = static_cast<double>(tr.size()) / cfg.sample_rate;
  // the coherent shot-noise unit follows from the recorded imprecision and detected variance
  const double s_imp = meta("imprecision_psd");
  const double v_d = meta("detected_variance");
  sqfb::AnalysisSpec an;
  an.lockin_bandwidth_hz = lockin_bw;
  const auto sx = sqfb::displacement_spectrum(tr.x, cfg, an);
  auto sy = sqfb::record_spectrum(tr.y, cfg, an);
  std::filesystem::create_directories(g.out_dir);
  const std::filesystem::path dir = g.out_dir;
  auto write = [&](const std::string& name, auto&& fn) {
    std::ofstream os(dir / name, std::ios::binary);
    if (!os) throw sqfb::IoError("cannot write " + (dir / name).string());
    fn(os);
    std::cout << "wrote " << (dir / name).string() << '\n';
  };
  write("psd_x.csv", [&](std::ostream& os) { sqfb::write_spectrum_csv(os, sx); });
  write("psd_y.csv", [&](std::ostream& os) { sqfb::write_spectrum_csv(os, sy); });
  const double f_ref = sqfb::rad_to_hz(cfg.mode.omega_m);
  const double bw = lockin_bw > 0.0 ? lockin_bw : 10.0 * sqfb::rad_to_hz(cfg.mode.gamma_m);
  auto track = sqfb::lockin_demodulate(tr.x, cfg.sample_rate, f_ref, bw);
  if (s_imp > 0.0) {
    const double coherent = s_imp * 0.5 / v_d * cfg.sample_rate * sqfb::record_power_response(f_ref, cfg.sample_rate);
    sqfb::normalise(track, sqfb::shot_noise_rms(coherent, cfg.sample_rate, bw));
  }
  sqfb::discard_transient(track, static_cast<std::size_t>(std::ceil(10.0 / bw * cfg.sample_rate)));
  write("lockin.csv", [&](std::ostream& os) { sqfb::write_track_csv(os, track, 1); });
  const auto h = sqfb::marginal_histogram(track, sqfb::Axis::X, 60, 0.0);
  write("histogram_X.csv", [&](std::ostream& os) { sqfb::write_histogram_csv(os, h); });
  std::cout << "equipartition_t_k=" << sqfb::format_number(sqfb::equipartition_temperature(tr.x, cfg.mode)) << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Squeezed-light feedback cooling: predictions, simulation and analysis"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Override the scenario seed")->check(CLI::NonNegativeNumber);
  app.add_option("--out-dir", g.out_dir, "Directory for artifacts")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads for independent runs")
      ->check(CLI::Range(1u, 1024u))
      ->capture_default_str();
  app.fallthrough();

  std::string scenario;
  auto add = [&](const char* name, const char* help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("scenario", scenario, "Scenario JSON file")->required()->check(CLI::ExistingFile);
    return sub;
  };
  auto* run_cmd = add("run", "Produce every artifact listed in the scenario's outputs");
  auto* predict_cmd = add("predict", "Closed-form predictions and cooling curves");
  auto* simulate_cmd = add("simulate", "Stochastic simulation, one trajectory per probe");
  auto* analyze_cmd = app.add_subcommand("analyze", "Spectra and lock-in tracks of simulated runs");
  analyze_cmd->add_option("scenario", scenario, "Scenario JSON file")->check(CLI::ExistingFile);
  std::string trajectory;
  double lockin_bw = 0.0;
  analyze_cmd->add_option("--trajectory", trajectory, "Analyze an existing trajectory CSV instead")
      ->check(CLI::ExistingFile);
  analyze_cmd->add_option("--lockin-bandwidth", lockin_bw, "Lock-in bandwidth in Hz (default 10 linewidths)");
  auto* fit_cmd = add("fit", "Fit in-loop spectra of simulated runs, or of an external spectrum");
  std::string spectrum, label;
  double averages = 0.0;
  fit_cmd->add_option("--spectrum", spectrum, "External spectrum CSV (freq_hz, psd_m2_per_hz)")
      ->check(CLI::ExistingFile);
  fit_cmd->add_option("--probe", label, "Probe label for the nominal model (default: first)");
  fit_cmd->add_option("--averages", averages, "Averages behind the spectrum when its metadata lacks them");
  auto* sweep_cmd = add("sweep", "Sweep table over gain or squeezing");
  auto* validate_cmd = add("validate", "Check a scenario without running it");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }
  if (seed_opt->count()) g.seed = seed;

  using sqfb::Output;
  try {
    if (validate_cmd->parsed()) {
      sqfb::Scenario sc;
      const auto report = sqfb::validate_file(scenario, sc);
      std::cout << report.text();
      return report.ok() ? kOk : kConfig;
    }
    if (run_cmd->parsed()) return run_pipeline(scenario, g, std::nullopt);
    if (predict_cmd->parsed()) return run_pipeline(scenario, g, std::vector{Output::predict});
    if (simulate_cmd->parsed()) return run_pipeline(scenario, g, std::vector{Output::simulate});
    if (analyze_cmd->parsed()) {
      if (!trajectory.empty()) return analyze_trajectory(trajectory, g, lockin_bw);
      if (scenario.empty()) {
        std::cerr << "analyze: give a scenario file or --trajectory\n";
        return kUsage;
      }
      return run_pipeline(scenario, g, std::vector{Output::psd, Output::lockin});
    }
    if (fit_cmd->parsed()) {
      if (!spectrum.empty()) return fit_external(scenario, spectrum, label, averages, g);
      return run_pipeline(scenario, g, std::vector{Output::fit});
    }
    if (sweep_cmd->parsed()) return run_pipeline(scenario, g, std::vector{Output::sweep_table});
  } catch (const sqfb::InstabilityError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUnstable;
  } catch (const sqfb::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const sqfb::NoTransductionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const sqfb::IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const sqfb::AnalysisError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kAnalysis;
  }
  return kUsage;
}
