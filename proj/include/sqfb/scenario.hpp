#pragma once

// Declarative scenarios (JSON, schema version 1) and the pipeline that turns
// one into CSV artifacts plus a manifest.
//
// Schema, units at the boundary are Hz, K, kg, dB and seconds:
//
//   schema_version  1
//   name            string
//   mode            { f_m_hz, linewidth_hz, mass_kg, t_bath_k, occupancy: "high_temperature"|"bose" }
//   probes[]        { label, n_c, kappa_hz, squeezing_db (below vacuum, default 0), eta_d, eta_fb,
//                     quadrature, and exactly one coupling key:
//                     g0_hz | cooperativity | coherent_strength | coherent_minimum_k }
//   feedback        { mode: "off"|"ideal_viscous"|"realistic_chain",
//                     gain: number | "optimal" | "optimal:<label>",
//                     bandpass_center_hz, bandpass_bandwidth_hz, delay_s: number | "auto", sign }
//   sweep           { kind: "none"|"gain"|"squeezing_db", values[] or {start, stop, points},
//                     include_optimum, monte_carlo, fit, seeds }
//   sim             { sample_rate_hz, duration_s, burn_in_s, seed, integrator: "exact"|"small_step",
//                     desk_scale: { f_m_hz, linewidth_hz }, export_rows }
//   analysis        { segment_length, window: "hann"|"rectangular", overlap, lockin_bandwidth_hz,
//                     lockin_signal: "x"|"y", histogram_bins, track_rows }
//   outputs[]       subset of predict, simulate, psd, lockin, fit, sweep_table
//
// `coherent_strength` fixes C so that a coherent probe with the same eta_fb has
// cooling strength A = 8 eta n_th C / V_d equal to the given value;
// `coherent_minimum_k` does the same from a coherent minimum temperature.

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "sqfb/dsp.hpp"
#include "sqfb/io.hpp"
#include "sqfb/model.hpp"
#include "sqfb/simulate.hpp"
#include "sqfb/specfit.hpp"

namespace sqfb {

inline constexpr int kSchemaVersion = 1;

enum class Output { predict, simulate, psd, lockin, fit, sweep_table };

inline const char* to_string(Output o) {
  switch (o) {
    case Output::predict: return "predict";
    case Output::simulate: return "simulate";
    case Output::psd: return "psd";
    case Output::lockin: return "lockin";
    case Output::fit: return "fit";
    case Output::sweep_table: return "sweep_table";
  }
  return "";
}

inline std::optional<Output> output_from(std::string_view s) {
  for (auto o : {Output::predict, Output::simulate, Output::psd, Output::lockin, Output::fit, Output::sweep_table})
    if (s == to_string(o)) return o;
  return std::nullopt;
}

struct LabeledProbe {
  std::string label;
  ProbeState probe;
  double squeezing_db = 0.0;
};

struct GainSetting {
  enum class Kind { value, optimal, optimal_of } kind = Kind::value;
  double value = 0.0;
  std::string reference;  // probe label for optimal_of
};

struct FeedbackSpec {
  FeedbackConfig config;  // gain and delay are resolved per run
  GainSetting gain;
  bool auto_delay = false;
};

struct SweepSpec {
  enum class Kind { none, gain, squeezing_db } kind = Kind::none;
  std::vector<double> values;
  bool include_optimum = false;
  bool monte_carlo = false;
  bool fit = false;
  int seeds = 1;
};

struct SimSpec {
  double sample_rate_hz = 0.0;
  double duration_s = 0.0;
  double burn_in_s = -1.0;
  std::uint64_t seed = 1;
  Integrator integrator = Integrator::exact;
  std::optional<std::pair<double, double>> desk_scale;  // (f_m_hz, linewidth_hz)
  std::size_t export_rows = 20000;
};

struct AnalysisSpec {
  std::size_t segment_length = 0;  // 0 = pick from the linewidth
  Window window = Window::hann;
  double overlap = 0.5;
  double lockin_bandwidth_hz = 0.0;  // 0 = 10 linewidths
  bool lockin_true_x = true;
  std::size_t histogram_bins = 60;
  std::size_t track_rows = 20000;
};

struct Scenario {
  int schema_version = kSchemaVersion;
  std::string name;
  MechanicalMode mode;
  OccupancyModel occupancy = OccupancyModel::high_temperature;
  std::vector<LabeledProbe> probes;
  FeedbackSpec feedback;
  SweepSpec sweep;
  SimSpec sim;
  AnalysisSpec analysis;
  std::vector<Output> outputs;
  nlohmann::json source;  // the parsed document, for the manifest

  bool wants(Output o) const { return std::find(outputs.begin(), outputs.end(), o) != outputs.end(); }
  bool needs_simulation() const {
    return wants(Output::simulate) || (wants(Output::sweep_table) && sweep.monte_carlo);
  }

  const LabeledProbe& probe(std::string_view label) const {
    for (const auto& p : probes)
      if (p.label == label) return p;
    throw ConfigError("unknown probe label '" + std::string(label) + "'");
  }
};

struct ValidationReport {
  std::vector<std::string> errors;
  std::vector<std::string> warnings;

  bool ok() const { return errors.empty(); }

  std::string text() const {
    std::ostringstream os;
    if (ok()) os << "ok\n";
    for (const auto& e : errors) os << "error: " << e << '\n';
    for (const auto& w : warnings) os << "warning: " << w << '\n';
    return os.str();
  }
};

namespace detail {

using nlohmann::json;

/// Field reader that records problems against JSON paths instead of throwing.
class SchemaReader {
 public:
  explicit SchemaReader(ValidationReport& report) : report_(report) {}

  void error(const std::string& path, const std::string& msg) { report_.errors.push_back(path + ": " + msg); }
  void warn(const std::string& path, const std::string& msg) { report_.warnings.push_back(path + ": " + msg); }

  const json* object(const json& parent, const std::string& key, const std::string& path, bool required) {
    if (!parent.contains(key)) {
      if (required) error(path + "." + key, "missing required object");
      return nullptr;
    }
    const auto& v = parent.at(key);
    if (!v.is_object()) {
      error(path + "." + key, "must be an object");
      return nullptr;
    }
    return &v;
  }

  std::optional<double> number(const json& obj, const std::string& key, const std::string& path, bool required) {
    if (!obj.contains(key)) {
      if (required) error(path + "." + key, "missing required number");
      return std::nullopt;
    }
    const auto& v = obj.at(key);
    if (!v.is_number()) {
      error(path + "." + key, "must be a number");
      return std::nullopt;
    }
    const double d = v.get<double>();
    if (!std::isfinite(d)) {
      error(path + "." + key, "must be finite");
      return std::nullopt;
    }
    return d;
  }

  double number_or(const json& obj, const std::string& key, const std::string& path, double fallback) {
    return number(obj, key, path, false).value_or(fallback);
  }

  std::optional<std::string> string(const json& obj, const std::string& key, const std::string& path, bool required) {
    if (!obj.contains(key)) {
      if (required) error(path + "." + key, "missing required string");
      return std::nullopt;
    }
    const auto& v = obj.at(key);
    if (!v.is_string()) {
      error(path + "." + key, "must be a string");
      return std::nullopt;
    }
    return v.get<std::string>();
  }

  bool boolean(const json& obj, const std::string& key, const std::string& path, bool fallback) {
    if (!obj.contains(key)) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_boolean()) {
      error(path + "." + key, "must be true or false");
      return fallback;
    }
    return v.get<bool>();
  }

  void only_keys(const json& obj, const std::string& path, std::initializer_list<std::string_view> keys) {
    for (const auto& [k, v] : obj.items())
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) error(path + "." + k, "unknown field");
  }

  void positive(const std::optional<double>& v, const std::string& path) {
    if (v && !(*v > 0.0)) error(path, "must be > 0");
  }

  void unit_interval(const std::optional<double>& v, const std::string& path) {
    if (v && !(*v > 0.0 && *v <= 1.0)) error(path, "must lie in (0, 1]");
  }

 private:
  ValidationReport& report_;
};

inline MechanicalMode parse_mode(SchemaReader& r, const json& j, OccupancyModel& occ) {
  const std::string p = "$.mode";
  r.only_keys(j, p, {"f_m_hz", "linewidth_hz", "mass_kg", "t_bath_k", "occupancy"});
  const auto f = r.number(j, "f_m_hz", p, true);
  const auto lw = r.number(j, "linewidth_hz", p, true);
  const auto m = r.number(j, "mass_kg", p, true);
  const auto t = r.number(j, "t_bath_k", p, true);
  r.positive(f, p + ".f_m_hz");
  r.positive(lw, p + ".linewidth_hz");
  r.positive(m, p + ".mass_kg");
  if (t && !(*t > 0.0)) r.error(p + ".t_bath_k", "must be > 0 (the thermal occupancy enters every prediction)");
  if (f && lw && *f > 0.0 && *lw > 0.0 && !(*f / *lw > 1.0))
    r.error(p, "quality factor f_m_hz / linewidth_hz must exceed 1");
  if (auto o = r.string(j, "occupancy", p, false)) {
    if (*o == "bose")
      occ = OccupancyModel::bose;
    else if (*o != "high_temperature")
      r.error(p + ".occupancy", "must be \"high_temperature\" or \"bose\"");
  }
  return MechanicalMode::from_hz(f.value_or(0.0), lw.value_or(0.0), m.value_or(0.0), t.value_or(0.0));
}

inline LabeledProbe parse_probe(SchemaReader& r, const json& j, const std::string& p, const MechanicalMode& mode,
                                OccupancyModel occ, bool mode_ok) {
  r.only_keys(j, p,
              {"label", "n_c", "kappa_hz", "squeezing_db", "eta_d", "eta_fb", "quadrature", "g0_hz", "cooperativity",
               "coherent_strength", "coherent_minimum_k"});
  LabeledProbe out;
  out.label = r.string(j, "label", p, true).value_or("");
  if (out.label.empty() || out.label.find_first_of("/\\ ,=") != std::string::npos)
    r.error(p + ".label", "must be a non-empty name without spaces, commas, '=' or slashes");
  auto& pr = out.probe;
  const auto n_c = r.number(j, "n_c", p, true);
  const auto kappa = r.number(j, "kappa_hz", p, true);
  r.positive(n_c, p + ".n_c");
  r.positive(kappa, p + ".kappa_hz");
  pr.n_c = n_c.value_or(0.0);
  pr.kappa = hz_to_rad(kappa.value_or(0.0));
  out.squeezing_db = r.number_or(j, "squeezing_db", p, 0.0);
  if (out.squeezing_db < 0.0) r.error(p + ".squeezing_db", "is measured below vacuum and must be >= 0");
  pr.v_sq = squeezing_db_to_variance(out.squeezing_db);
  const auto eta_d = r.number(j, "eta_d", p, false);
  const auto eta_fb = r.number(j, "eta_fb", p, false);
  r.unit_interval(eta_d, p + ".eta_d");
  r.unit_interval(eta_fb, p + ".eta_fb");
  pr.eta_d = eta_d.value_or(1.0);
  pr.eta_fb = eta_fb.value_or(1.0);

  const std::string default_quad = out.squeezing_db == 0.0 ? "coherent" : "phase_squeezed";
  const auto quad = r.string(j, "quadrature", p, false).value_or(default_quad);
  if (quad == "coherent")
    pr.quadrature = Quadrature::coherent;
  else if (quad == "phase_squeezed")
    pr.quadrature = Quadrature::phase_squeezed;
  else if (quad == "amplitude_squeezed")
    pr.quadrature = Quadrature::amplitude_squeezed;
  else
    r.error(p + ".quadrature", "must be coherent, phase_squeezed or amplitude_squeezed");
  if (pr.quadrature == Quadrature::coherent && out.squeezing_db != 0.0)
    r.error(p + ".quadrature", "a coherent probe cannot carry squeezing_db != 0");

  int couplings = 0;
  for (const char* k : {"g0_hz", "cooperativity", "coherent_strength", "coherent_minimum_k"}) couplings += j.contains(k);
  if (couplings != 1) {
    r.error(p, "exactly one of g0_hz, cooperativity, coherent_strength, coherent_minimum_k is required");
    return out;
  }
  const bool can_solve = mode_ok && pr.n_c > 0.0 && pr.kappa > 0.0 && pr.eta_fb > 0.0 && pr.eta_fb <= 1.0;
  auto set_c = [&](double c) {
    if (can_solve) pr.g0 = coupling_for_cooperativity(c, pr.n_c, pr.kappa, mode.gamma_m);
  };
  if (auto g0 = r.number(j, "g0_hz", p, false)) {
    if (*g0 < 0.0) r.error(p + ".g0_hz", "must be >= 0");
    pr.g0 = hz_to_rad(*g0);
  } else if (auto c = r.number(j, "cooperativity", p, false)) {
    if (*c < 0.0) r.error(p + ".cooperativity", "must be >= 0");
    set_c(std::max(*c, 0.0));
  } else if (auto a = r.number(j, "coherent_strength", p, false)) {
    if (!(*a > 0.0)) r.error(p + ".coherent_strength", "must be > 0");
    else if (can_solve) set_c(*a * kVacuumVariance / (8.0 * pr.eta_fb * thermal_occupancy(mode, occ)));
  } else if (auto tmin = r.number(j, "coherent_minimum_k", p, false)) {
    if (!(*tmin > 0.0 && *tmin < mode.t_bath))
      r.error(p + ".coherent_minimum_k", "must lie in (0, t_bath_k)");
    else if (can_solve)
      set_c(strength_from_minimum_ratio(*tmin / mode.t_bath) * kVacuumVariance /
            (8.0 * pr.eta_fb * thermal_occupancy(mode, occ)));
  }
  return out;
}

inline std::vector<double> parse_grid(SchemaReader& r, const json& j, const std::string& p) {
  std::vector<double> out;
  if (j.contains("values")) {
    const auto& v = j.at("values");
    if (!v.is_array()) {
      r.error(p + ".values", "must be an array of numbers");
      return out;
    }
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number())
        r.error(p + ".values[" + std::to_string(i) + "]", "must be a number");
      else
        out.push_back(v[i].get<double>());
    }
    if (j.contains("start") || j.contains("stop") || j.contains("points"))
      r.error(p, "give either values or start/stop/points, not both");
    return out;
  }
  const auto start = r.number(j, "start", p, true);
  const auto stop = r.number(j, "stop", p, true);
  const auto points = r.number(j, "points", p, true);
  if (!start || !stop || !points) return out;
  if (!(*points >= 2.0) || *points != std::floor(*points) || *points > 100000) {
    r.error(p + ".points", "must be an integer in [2, 100000]");
    return out;
  }
  const auto n = static_cast<std::size_t>(*points);
  for (std::size_t i = 0; i < n; ++i) out.push_back(*start + (*stop - *start) * static_cast<double>(i) / (n - 1));
  return out;
}

}  // namespace detail

/// Parses and validates a scenario document. `out` is filled as far as parsing
/// got; it is only meaningful when the report is ok.
inline ValidationReport parse_scenario(const nlohmann::json& doc, Scenario& out) {
  using detail::json;
  ValidationReport report;
  detail::SchemaReader r(report);
  out = Scenario{};
  out.source = doc;
  if (!doc.is_object()) {
    r.error("$", "scenario must be a JSON object");
    return report;
  }
  r.only_keys(doc, "$",
              {"schema_version", "name", "description", "mode", "probes", "feedback", "sweep", "sim", "analysis",
               "outputs"});
  const auto ver = r.number(doc, "schema_version", "$", true);
  if (ver && *ver != kSchemaVersion) r.error("$.schema_version", "unsupported version (expected 1)");
  out.name = r.string(doc, "name", "$", true).value_or("");
  if (out.name.empty()) r.error("$.name", "must be a non-empty string");

  bool mode_ok = false;
  if (const json* m = r.object(doc, "mode", "$", true)) {
    const auto before = report.errors.size();
    out.mode = detail::parse_mode(r, *m, out.occupancy);
    mode_ok = report.errors.size() == before;
  }

  if (!doc.contains("probes") || !doc.at("probes").is_array() || doc.at("probes").empty()) {
    r.error("$.probes", "must be a non-empty array");
  } else {
    const auto& arr = doc.at("probes");
    std::set<std::string> labels;
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string p = "$.probes[" + std::to_string(i) + "]";
      if (!arr[i].is_object()) {
        r.error(p, "must be an object");
        continue;
      }
      auto probe = detail::parse_probe(r, arr[i], p, out.mode, out.occupancy, mode_ok);
      if (!labels.insert(probe.label).second) r.error(p + ".label", "duplicate label '" + probe.label + "'");
      out.probes.push_back(std::move(probe));
    }
    if (arr.size() > 2) r.warn("$.probes", "more than two probes; comparisons use the first as reference");
  }

  // outputs
  if (!doc.contains("outputs") || !doc.at("outputs").is_array()) {
    r.error("$.outputs", "must be an array");
  } else {
    const auto& arr = doc.at("outputs");
    if (arr.empty()) r.error("$.outputs", "is empty; request at least one artifact");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string p = "$.outputs[" + std::to_string(i) + "]";
      const auto o = arr[i].is_string() ? output_from(arr[i].get<std::string>()) : std::nullopt;
      if (!o)
        r.error(p, "unknown output (expected predict, simulate, psd, lockin, fit or sweep_table)");
      else if (!out.wants(*o))
        out.outputs.push_back(*o);
    }
    if (out.wants(Output::fit) && !out.wants(Output::psd)) r.error("$.outputs", "fit requires psd");
    if (out.wants(Output::psd) && !out.wants(Output::simulate)) r.error("$.outputs", "psd requires simulate");
    if (out.wants(Output::lockin) && !out.wants(Output::simulate)) r.error("$.outputs", "lockin requires simulate");
  }

  // feedback
  auto& fb = out.feedback;
  if (const json* f = r.object(doc, "feedback", "$", false)) {
    const std::string p = "$.feedback";
    r.only_keys(*f, p, {"mode", "gain", "bandpass_center_hz", "bandpass_bandwidth_hz", "delay_s", "sign"});
    const auto mode = r.string(*f, "mode", p, true).value_or("off");
    if (mode == "off")
      fb.config.mode = FeedbackMode::off;
    else if (mode == "ideal_viscous")
      fb.config.mode = FeedbackMode::ideal_viscous;
    else if (mode == "realistic_chain")
      fb.config.mode = FeedbackMode::realistic_chain;
    else
      r.error(p + ".mode", "must be off, ideal_viscous or realistic_chain");

    if (f->contains("gain")) {
      const auto& g = f->at("gain");
      if (g.is_number()) {
        fb.gain.value = g.get<double>();
        if (!(fb.gain.value >= 0.0)) r.error(p + ".gain", "must be >= 0");
      } else if (g.is_string() && g.get<std::string>() == "optimal") {
        fb.gain.kind = GainSetting::Kind::optimal;
      } else if (g.is_string() && g.get<std::string>().rfind("optimal:", 0) == 0) {
        fb.gain.kind = GainSetting::Kind::optimal_of;
        fb.gain.reference = g.get<std::string>().substr(8);
        if (std::none_of(out.probes.begin(), out.probes.end(),
                         [&](const auto& pr) { return pr.label == fb.gain.reference; }))
          r.error(p + ".gain", "refers to unknown probe '" + fb.gain.reference + "'");
      } else {
        r.error(p + ".gain", "must be a number, \"optimal\" or \"optimal:<probe label>\"");
      }
    }
    if (fb.config.mode == FeedbackMode::realistic_chain && fb.gain.kind != GainSetting::Kind::value)
      r.error(p + ".gain", "realistic_chain takes an electronic gain in N/m");
    fb.config.sign = static_cast<int>(r.number_or(*f, "sign", p, -1.0));
    if (fb.config.sign != 1 && fb.config.sign != -1) r.error(p + ".sign", "must be +1 or -1");
    if (fb.config.mode == FeedbackMode::realistic_chain) {
      const auto c = r.number(*f, "bandpass_center_hz", p, true);
      const auto bw = r.number(*f, "bandpass_bandwidth_hz", p, true);
      fb.config.bandpass_center_hz = c.value_or(0.0);
      fb.config.bandpass_bandwidth_hz = bw.value_or(0.0);
      r.positive(c, p + ".bandpass_center_hz");
      if (bw && c && !(*bw > 0.0 && *bw < *c))
        r.error(p + ".bandpass_bandwidth_hz", "must lie in (0, bandpass_center_hz)");
      if (f->contains("delay_s") && f->at("delay_s").is_string()) {
        if (f->at("delay_s").get<std::string>() == "auto")
          fb.auto_delay = true;
        else
          r.error(p + ".delay_s", "must be a number or \"auto\"");
      } else {
        fb.config.delay = r.number_or(*f, "delay_s", p, 0.0);
        if (fb.config.delay < 0.0) r.error(p + ".delay_s", "must be >= 0");
      }
    }
  }

  // sweep
  auto& sw = out.sweep;
  if (const json* s = r.object(doc, "sweep", "$", false)) {
    const std::string p = "$.sweep";
    r.only_keys(*s, p, {"kind", "values", "start", "stop", "points", "include_optimum", "monte_carlo", "fit", "seeds"});
    const auto kind = r.string(*s, "kind", p, true).value_or("none");
    if (kind == "gain")
      sw.kind = SweepSpec::Kind::gain;
    else if (kind == "squeezing_db")
      sw.kind = SweepSpec::Kind::squeezing_db;
    else if (kind != "none")
      r.error(p + ".kind", "must be none, gain or squeezing_db");
    if (sw.kind != SweepSpec::Kind::none) {
      sw.values = detail::parse_grid(r, *s, p);
      for (std::size_t i = 0; i < sw.values.size(); ++i) {
        if (sw.values[i] < 0.0) r.error(p + ".values[" + std::to_string(i) + "]", "must be >= 0");
        if (i > 0 && !(sw.values[i] > sw.values[i - 1])) r.error(p + ".values", "must be strictly increasing");
      }
    }
    sw.include_optimum = r.boolean(*s, "include_optimum", p, false);
    sw.monte_carlo = r.boolean(*s, "monte_carlo", p, false);
    sw.fit = r.boolean(*s, "fit", p, false);
    const double seeds = r.number_or(*s, "seeds", p, 1.0);
    if (!(seeds >= 1.0 && seeds <= 1000.0 && seeds == std::floor(seeds)))
      r.error(p + ".seeds", "must be an integer in [1, 1000]");
    sw.seeds = static_cast<int>(seeds);
    if (sw.fit && !sw.monte_carlo) r.error(p + ".fit", "requires monte_carlo");
    if (sw.kind == SweepSpec::Kind::squeezing_db && fb.config.mode == FeedbackMode::realistic_chain)
      r.error(p + ".kind", "squeezing sweeps run at the optimal viscous gain; use ideal_viscous feedback");
    if (sw.monte_carlo && fb.config.mode == FeedbackMode::off)
      r.error(p + ".monte_carlo", "needs feedback.mode ideal_viscous or realistic_chain");
    if (sw.include_optimum && fb.config.mode == FeedbackMode::realistic_chain)
      r.error(p + ".include_optimum", "has no meaning for electronic gains");
  }
  if (out.wants(Output::sweep_table) && sw.kind == SweepSpec::Kind::none)
    r.error("$.sweep", "sweep_table output requires a gain or squeezing_db sweep");

  // simulation
  auto& sim = out.sim;
  MechanicalMode sim_mode = out.mode;
  if (const json* s = r.object(doc, "sim", "$", out.needs_simulation())) {
    const std::string p = "$.sim";
    r.only_keys(*s, p,
                {"sample_rate_hz", "duration_s", "burn_in_s", "seed", "integrator", "desk_scale", "export_rows"});
    const bool need = out.needs_simulation();
    const auto fs = r.number(*s, "sample_rate_hz", p, need);
    const auto dur = r.number(*s, "duration_s", p, need);
    sim.sample_rate_hz = fs.value_or(0.0);
    sim.duration_s = dur.value_or(0.0);
    sim.burn_in_s = r.number_or(*s, "burn_in_s", p, -1.0);
    const double seed = r.number_or(*s, "seed", p, 1.0);
    if (!(seed >= 0.0 && seed == std::floor(seed) && seed < 9.007199254740992e15))
      r.error(p + ".seed", "must be a non-negative integer below 2^53");
    else
      sim.seed = static_cast<std::uint64_t>(seed);
    const auto integ = r.string(*s, "integrator", p, false).value_or("exact");
    if (integ == "small_step")
      sim.integrator = Integrator::small_step;
    else if (integ != "exact")
      r.error(p + ".integrator", "must be exact or small_step");
    const double rows = r.number_or(*s, "export_rows", p, 20000.0);
    if (!(rows >= 0.0 && rows == std::floor(rows))) r.error(p + ".export_rows", "must be a non-negative integer");
    sim.export_rows = static_cast<std::size_t>(std::max(rows, 0.0));
    if (const json* d = r.object(*s, "desk_scale", p, false)) {
      r.only_keys(*d, p + ".desk_scale", {"f_m_hz", "linewidth_hz"});
      const auto f = r.number(*d, "f_m_hz", p + ".desk_scale", true);
      const auto lw = r.number(*d, "linewidth_hz", p + ".desk_scale", true);
      r.positive(f, p + ".desk_scale.f_m_hz");
      r.positive(lw, p + ".desk_scale.linewidth_hz");
      if (f && lw && *f > 0.0 && *lw > 0.0) {
        if (!(*f / *lw > 1.0)) r.error(p + ".desk_scale", "quality factor must exceed 1");
        sim.desk_scale = {*f, *lw};
        sim_mode.omega_m = hz_to_rad(*f);
        sim_mode.gamma_m = hz_to_rad(*lw);
      }
    }
    if (need && fs && sim_mode.omega_m > 0.0 && !(*fs >= 10.0 * rad_to_hz(sim_mode.omega_m)))
      r.error(p + ".sample_rate_hz", "must be at least 10 f_m (" + format_number(10.0 * rad_to_hz(sim_mode.omega_m)) +
                                         " Hz) to resolve the oscillation");
    if (need && dur && sim_mode.gamma_m > 0.0 && !(*dur >= 20.0 / sim_mode.gamma_m))
      r.error(p + ".duration_s", "must cover at least 20 / gamma_m (" + format_number(20.0 / sim_mode.gamma_m) +
                                     " s) for stationary statistics");
    if (need && fb.config.mode == FeedbackMode::realistic_chain && fs &&
        !(fb.config.bandpass_center_hz < 0.5 * *fs))
      r.error("$.feedback.bandpass_center_hz", "must lie below the Nyquist frequency of sim.sample_rate_hz");
    if (need && fs && dur && *fs * *dur > 5e8) r.error(p, "more than 5e8 samples per run");
  }

  // analysis
  auto& an = out.analysis;
  if (const json* a = r.object(doc, "analysis", "$", false)) {
    const std::string p = "$.analysis";
    r.only_keys(*a, p,
                {"segment_length", "window", "overlap", "lockin_bandwidth_hz", "lockin_signal", "histogram_bins",
                 "track_rows"});
    const double seg = r.number_or(*a, "segment_length", p, 0.0);
    if (!(seg == 0.0 || (seg >= 16.0 && seg == std::floor(seg))))
      r.error(p + ".segment_length", "must be 0 (automatic) or an integer >= 16");
    an.segment_length = static_cast<std::size_t>(std::max(seg, 0.0));
    const auto win = r.string(*a, "window", p, false).value_or("hann");
    if (win == "rectangular")
      an.window = Window::rectangular;
    else if (win != "hann")
      r.error(p + ".window", "must be hann or rectangular");
    an.overlap = r.number_or(*a, "overlap", p, 0.5);
    if (!(an.overlap >= 0.0 && an.overlap < 1.0)) r.error(p + ".overlap", "must lie in [0, 1)");
    an.lockin_bandwidth_hz = r.number_or(*a, "lockin_bandwidth_hz", p, 0.0);
    if (an.lockin_bandwidth_hz < 0.0) r.error(p + ".lockin_bandwidth_hz", "must be >= 0 (0 = automatic)");
    if (an.lockin_bandwidth_hz > 0.0 && sim_mode.omega_m > 0.0) {
      if (!(an.lockin_bandwidth_hz < rad_to_hz(sim_mode.omega_m)))
        r.error(p + ".lockin_bandwidth_hz", "must be below the (simulated) resonance frequency");
      if (!(an.lockin_bandwidth_hz > rad_to_hz(sim_mode.gamma_m)))
        r.warn(p + ".lockin_bandwidth_hz", "does not exceed the linewidth; the envelope will be smoothed");
    }
    const auto sig = r.string(*a, "lockin_signal", p, false).value_or("x");
    if (sig == "y")
      an.lockin_true_x = false;
    else if (sig != "x")
      r.error(p + ".lockin_signal", "must be x or y");
    const double bins = r.number_or(*a, "histogram_bins", p, 60.0);
    if (!(bins >= 4.0 && bins <= 10000.0 && bins == std::floor(bins)))
      r.error(p + ".histogram_bins", "must be an integer in [4, 10000]");
    an.histogram_bins = static_cast<std::size_t>(std::max(bins, 0.0));
    const double tr = r.number_or(*a, "track_rows", p, 20000.0);
    if (!(tr >= 1.0 && tr == std::floor(tr))) r.error(p + ".track_rows", "must be a positive integer");
    an.track_rows = static_cast<std::size_t>(std::max(tr, 1.0));
  }

  // physics sanity on the assembled objects
  if (report.ok()) {
    for (std::size_t i = 0; i < out.probes.size(); ++i) {
      const auto& pr = out.probes[i].probe;
      if (!(cooperativity(pr, out.mode) > 0.0))
        r.error("$.probes[" + std::to_string(i) + "]", "no transduction: cooperativity is zero");
      for (const auto& v : pr.violations()) r.error("$.probes[" + std::to_string(i) + "]", v);
    }
    if (out.needs_simulation() && fb.config.mode == FeedbackMode::ideal_viscous && sim.sample_rate_hz > 0.0 &&
        sim_mode.gamma_m > 0.0) {
      // the largest requested viscous gain must leave the broadened line resolved
      double g_max = fb.gain.kind == GainSetting::Kind::value ? fb.gain.value : 0.0;
      if (sw.kind == SweepSpec::Kind::gain && sw.monte_carlo)
        for (double g : sw.values) g_max = std::max(g_max, g);
      if (sim_mode.gamma_m * (1.0 + g_max) > sim_mode.omega_m)
        r.warn("$.feedback.gain", "gain broadens the line beyond the resonance frequency");
    }
  }
  return report;
}

inline ValidationReport validate_file(const std::filesystem::path& path, Scenario& out) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read scenario file " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    ValidationReport r;
    r.errors.push_back(std::string("$: not valid JSON (") + e.what() + ")");
    return r;
  }
  return parse_scenario(doc, out);
}

inline Scenario load_scenario(const std::filesystem::path& path) {
  Scenario s;
  const auto report = validate_file(path, s);
  if (!report.ok()) throw ConfigError("invalid scenario " + path.string() + "\n" + report.text());
  return s;
}

// ---------------------------------------------------------------------------
// Execution

struct RunOptions {
  std::filesystem::path out_dir = "out";
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  /// Restricts the scenario's outputs (and their prerequisites) when set.
  std::optional<std::vector<Output>> only;
};

struct RunReport {
  std::vector<std::filesystem::path> files;
  std::vector<std::string> notes;
};

/// Stream-splitting hash so that per-task seeds are well separated.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers.
inline void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

/// The mode and probe the simulator actually runs: the scenario's own, or the
/// desk-scale copy with the same T_0, eta, V_d and cooling strength.
inline std::pair<MechanicalMode, ProbeState> simulated_system(const Scenario& sc, const ProbeState& probe) {
  if (!sc.sim.desk_scale) return {sc.mode, probe};
  return rescale_preserving_strength(sc.mode, probe, hz_to_rad(sc.sim.desk_scale->first),
                                     hz_to_rad(sc.sim.desk_scale->second));
}

inline double resolve_gain(const Scenario& sc, const ProbeState& probe) {
  const auto& g = sc.feedback.gain;
  switch (g.kind) {
    case GainSetting::Kind::value: return g.value;
    case GainSetting::Kind::optimal: return optimal_gain(sc.mode, probe, sc.occupancy);
    case GainSetting::Kind::optimal_of: return optimal_gain(sc.mode, sc.probe(g.reference).probe, sc.occupancy);
  }
  return 0.0;
}

/// Simulation config for one probe at a given feedback gain (G or K).
inline SimConfig make_sim_config(const Scenario& sc, const ProbeState& probe, double gain, std::uint64_t seed) {
  const auto [mode, pr] = simulated_system(sc, probe);
  SimConfig cfg;
  cfg.mode = mode;
  cfg.probe = pr;
  cfg.feedback = sc.feedback.config;
  cfg.feedback.gain = gain;
  cfg.sample_rate = sc.sim.sample_rate_hz;
  cfg.duration = sc.sim.duration_s;
  cfg.burn_in = sc.sim.burn_in_s;
  cfg.seed = seed;
  cfg.integrator = sc.sim.integrator;
  if (cfg.feedback.mode == FeedbackMode::realistic_chain && sc.feedback.auto_delay)
    cfg.feedback.delay = viscous_delay(cfg.feedback, cfg.mode, cfg.sample_rate);
  return cfg;
}

/// Viscous gain the simulated loop is expected to realise.
inline double nominal_viscous_gain(const SimConfig& cfg) {
  switch (cfg.feedback.mode) {
    case FeedbackMode::off: return 0.0;
    case FeedbackMode::ideal_viscous: return cfg.feedback.gain;
    case FeedbackMode::realistic_chain: return chain_viscous_gain(cfg.feedback, cfg.mode, cfg.sample_rate);
  }
  return 0.0;
}

/// Welch segment length: the power of two whose bin width is at most an eighth
/// of the (feedback-free) linewidth, unless configured.
inline std::size_t segment_length_for(const AnalysisSpec& an, const SimConfig& cfg) {
  if (an.segment_length) return an.segment_length;
  const double target = rad_to_hz(cfg.mode.gamma_m) / 8.0;
  std::size_t n = 256;
  while (cfg.sample_rate / static_cast<double>(n) > target) n *= 2;
  return std::min(n, std::max<std::size_t>(256, cfg.sample_count() / 16));
}

inline Spectrum record_spectrum(std::span<const double> y, const SimConfig& cfg, const AnalysisSpec& an) {
  WelchOptions wo{segment_length_for(an, cfg), an.window, an.overlap, SpectrumSource::in_loop_y};
  auto s = welch_psd(y, cfg.sample_rate, wo);
  compensate_record_kernel(s, cfg.sample_rate);
  return s;
}

inline Spectrum displacement_spectrum(std::span<const double> x, const SimConfig& cfg, const AnalysisSpec& an) {
  WelchOptions wo{segment_length_for(an, cfg), an.window, an.overlap, SpectrumSource::true_x};
  return welch_psd(x, cfg.sample_rate, wo);
}

/// Fit of the in-loop record spectrum, started from the configured physics.
inline FitResult fit_record(const Spectrum& spec, const SimConfig& cfg) {
  const auto nominal = SquashModel::from_physics(cfg.mode, cfg.probe, std::max(0.0, nominal_viscous_gain(cfg)));
  return fit_spectrum(spec, nominal);
}

/// Lock-in track of x (or y) at the simulated resonance in shot-noise units: the
/// unit is the quadrature RMS that the probe's coherent-light imprecision alone
/// would produce.
inline PhaseSpaceTrack phase_space(const Trajectory& tr, const AnalysisSpec& an) {
  const auto& cfg = tr.config;
  const double f_ref = rad_to_hz(cfg.mode.omega_m);
  const double bw = an.lockin_bandwidth_hz > 0.0 ? an.lockin_bandwidth_hz : 10.0 * rad_to_hz(cfg.mode.gamma_m);
  auto track = lockin_demodulate(an.lockin_true_x ? tr.x : tr.y, cfg.sample_rate, f_ref, bw);
  ProbeState coherent = cfg.probe;
  coherent.v_sq = kVacuumVariance;
  coherent.quadrature = Quadrature::coherent;
  const double per_sample = imprecision_psd(cfg.mode, coherent) * cfg.sample_rate *
                            record_power_response(f_ref, cfg.sample_rate);
  normalise(track, shot_noise_rms(per_sample, cfg.sample_rate, bw));
  discard_transient(track, static_cast<std::size_t>(std::ceil(10.0 / bw * cfg.sample_rate)));
  return track;
}

namespace detail {

class ArtifactWriter {
 public:
  ArtifactWriter(std::filesystem::path dir, RunReport& report) : dir_(std::move(dir)), report_(report) {
    std::filesystem::create_directories(dir_);
  }

  template <typename Fn>
  void write(const std::string& name, Fn&& fn) {
    const auto path = dir_ / name;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    fn(out);
    out.close();
    if (!out) throw IoError("write failed for " + path.string());
    std::lock_guard lock(mutex_);
    report_.files.push_back(path);
  }

 private:
  std::filesystem::path dir_;
  RunReport& report_;
  std::mutex mutex_;
};

struct SweepRow {
  double x = 0.0;  // gain or squeezing dB
  ProbeState probe;
  double gain = 0.0;  // G (ideal) or K (realistic)
  double predicted_gain = 0.0;
  double predicted_t = 0.0;
  double v_d = 0.0;
  double sim_t = 0.0, sim_t_err = 0.0;
  double fit_g = 0.0, fit_g_err = 0.0, fit_t = 0.0, fit_t_err = 0.0;
  std::size_t fits_converged = 0;
};

inline std::string csv_line(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += format_number(v[i]);
  }
  return s;
}

}  // namespace detail

/// Runs a validated scenario and writes its artifacts and manifest into
/// `opt.out_dir`. Outputs of equal inputs are byte-identical.
inline RunReport run_scenario(const Scenario& scenario, const RunOptions& opt) {
  Scenario sc = scenario;
  if (opt.only) {
    // keep only the requested artifacts and what they depend on
    std::vector<Output> keep;
    auto add = [&](Output o) {
      if (std::find(keep.begin(), keep.end(), o) == keep.end()) keep.push_back(o);
    };
    for (auto o : *opt.only) {
      add(o);
      if (o == Output::fit) add(Output::psd);
      if (o == Output::fit || o == Output::psd || o == Output::lockin) add(Output::simulate);
    }
    sc.outputs = keep;
    if (sc.wants(Output::sweep_table) && sc.sweep.kind == SweepSpec::Kind::none)
      throw ConfigError("$.sweep: sweep_table output requires a gain or squeezing_db sweep");
    if (sc.needs_simulation() && !(sc.sim.sample_rate_hz > 0.0 && sc.sim.duration_s > 0.0))
      throw ConfigError("$.sim: simulation requested but sim.sample_rate_hz / sim.duration_s are not set");
  }
  if (sc.outputs.empty()) throw ConfigError("$.outputs: is empty; request at least one artifact");
  const std::uint64_t seed = opt.seed.value_or(sc.sim.seed);

  RunReport report;
  detail::ArtifactWriter writer(opt.out_dir, report);
  const double t0 = sc.mode.t_bath;

  if (sc.wants(Output::predict)) {
    writer.write("predictions.csv", [&](std::ostream& os) {
      os << "# sqfb predictions v1\n# scenario=" << sc.name << "\n# t0_k=" << format_number(t0) << '\n';
      os << "label,squeezing_db,v_d,v_d_db,cooperativity,n_th,strength,gain_opt,t_min_k,t_min_ratio,n_min_fb,"
            "measurement_rate_rad_s,rate_ratio_vs_coherent,thermal_decoherence_rate_rad_s,coherent_floor,"
            "interaction_strength,imprecision_psd\n";
      for (const auto& p : sc.probes) {
        const auto& pr = p.probe;
        const double vd = detected_variance(pr);
        const auto best = minimum_temperature(sc.mode, pr, sc.occupancy);
        os << p.label << ','
           << detail::csv_line({p.squeezing_db, vd, variance_to_db(vd), cooperativity(pr, sc.mode),
                                thermal_occupancy(sc.mode, sc.occupancy), cooling_strength(sc.mode, pr, sc.occupancy),
                                best.gain, best.t_fb, best.t_fb / t0, best.n_fb, measurement_rate(sc.mode, pr),
                                measurement_rate_ratio(vd), thermal_decoherence_rate(sc.mode, sc.occupancy),
                                coherent_occupancy_floor(pr.eta_fb), interaction_strength(pr),
                                imprecision_psd(sc.mode, pr)})
           << '\n';
      }
    });
    for (const auto& p : sc.probes) {
      std::vector<double> gains;
      if (sc.sweep.kind == SweepSpec::Kind::gain && sc.feedback.config.mode != FeedbackMode::realistic_chain) {
        gains = sc.sweep.values;
      } else {
        const double g_opt = optimal_gain(sc.mode, p.probe, sc.occupancy);
        for (int i = 0; i <= 60; ++i) gains.push_back(3.0 * g_opt * i / 60.0);
      }
      const auto curve = cooling_curve(sc.mode, p.probe, gains, sc.occupancy);
      writer.write("curve_" + p.label + ".csv", [&](std::ostream& os) {
        os << "# sqfb cooling_curve v1\n# probe=" << p.label << "\n# t0_k=" << format_number(t0) << '\n';
        os << "gain,t_fb_k,t_ratio,n_fb\n";
        for (const auto& c : curve) os << detail::csv_line({c.gain, c.t_fb, c.t_fb / t0, c.n_fb}) << '\n';
      });
    }
  }

  if (sc.wants(Output::simulate)) {
    struct ProbeRun {
      SimConfig cfg;
      double gain = 0.0;
      double sim_t = 0.0;
      double psd_t = 0.0;
      std::optional<FitResult> fit;
      std::optional<EffectiveTemperature> eff;
      double var_x = 0.0, var_y = 0.0;
    };
    std::vector<ProbeRun> runs(sc.probes.size());
    parallel_for(sc.probes.size(), opt.threads, [&](std::size_t i) {
      const auto& p = sc.probes[i];
      auto& r = runs[i];
      r.gain = resolve_gain(sc, p.probe);
      r.cfg = make_sim_config(sc, p.probe, r.gain, derive_seed(seed, i));
      const auto tr = run(r.cfg);
      r.sim_t = equipartition_temperature(tr.x, tr.config.mode);
      writer.write("trajectory_" + p.label + ".csv",
                   [&](std::ostream& os) { write_trajectory_csv(os, tr, sc.sim.export_rows); });
      if (sc.wants(Output::psd)) {
        const auto sx = displacement_spectrum(tr.x, r.cfg, sc.analysis);
        const auto sy = record_spectrum(tr.y, r.cfg, sc.analysis);
        r.psd_t = equipartition_temperature(sx, r.cfg.mode, 0.0, sx.freq.back());
        writer.write("psd_" + p.label + "_x.csv", [&](std::ostream& os) { write_spectrum_csv(os, sx); });
        writer.write("psd_" + p.label + "_y.csv", [&](std::ostream& os) { write_spectrum_csv(os, sy); });
        if (sc.wants(Output::fit)) {
          r.fit = fit_record(sy, r.cfg);
          if (r.fit->converged) r.eff = effective_temperature(*r.fit, r.cfg.mode, r.cfg.probe);
          writer.write("fit_" + p.label + ".txt", [&](std::ostream& os) {
            auto kv = fit_record(*r.fit);
            if (r.eff) {
              kv.emplace_back("t_closed_form_k", format_number(r.eff->t_closed_form));
              kv.emplace_back("t_integral_k", format_number(r.eff->t_integral));
              kv.emplace_back("strength", format_number(r.eff->strength));
              kv.emplace_back("implied_detected_variance", format_number(r.eff->implied_vd));
              kv.emplace_back("routes_consistent", r.eff->consistent ? "1" : "0");
            }
            write_key_values(os, kv);
          });
        }
      }
      if (sc.wants(Output::lockin)) {
        const auto track = phase_space(tr, sc.analysis);
        const std::size_t stride = std::max<std::size_t>(1, track.t.size() / sc.analysis.track_rows);
        writer.write("lockin_" + p.label + ".csv", [&](std::ostream& os) { write_track_csv(os, track, stride); });
        const auto hx = marginal_histogram(track, Axis::X, sc.analysis.histogram_bins);
        const auto hy = marginal_histogram(track, Axis::Y, sc.analysis.histogram_bins);
        r.var_x = hx.variance;
        r.var_y = hy.variance;
        writer.write("histogram_" + p.label + "_X.csv", [&](std::ostream& os) { write_histogram_csv(os, hx); });
      }
    });

    writer.write("summary.csv", [&](std::ostream& os) {
      os << "# sqfb simulation_summary v1\n# scenario=" << sc.name << "\n# seed=" << seed
         << "\n# feedback_mode=" << to_string(sc.feedback.config.mode) << "\n# t0_k=" << format_number(t0) << '\n';
      os << "label,gain,nominal_viscous_gain,predicted_t_k,simulated_t_k,psd_t_k,fitted_gain,fitted_t_k\n";
      for (std::size_t i = 0; i < runs.size(); ++i) {
        const auto& r = runs[i];
        const double g_nom = nominal_viscous_gain(r.cfg);
        const double pred = predict_temperature(sc.mode, sc.probes[i].probe, std::max(0.0, g_nom), sc.occupancy).t_fb;
        const double nan = std::numeric_limits<double>::quiet_NaN();
        os << sc.probes[i].label << ','
           << detail::csv_line({r.gain, g_nom, pred, r.sim_t, sc.wants(Output::psd) ? r.psd_t : nan,
                                r.fit ? r.fit->params.g : nan, r.eff ? r.eff->t_integral : nan})
           << '\n';
      }
    });
    if (sc.wants(Output::fit)) {
      writer.write("fits.csv", [&](std::ostream& os) {
        bool header = false;
        for (std::size_t i = 0; i < runs.size(); ++i) {
          const auto kv = fit_record(*runs[i].fit);
          if (!header) {
            os << "label";
            for (const auto& [k, v] : kv)
              if (k != "message") os << ',' << k;
            os << '\n';
            header = true;
          }
          os << sc.probes[i].label;
          for (const auto& [k, v] : kv)
            if (k != "message") os << ',' << v;
          os << '\n';
        }
      });
    }
    if (sc.wants(Output::lockin)) {
      writer.write("lockin_summary.csv", [&](std::ostream& os) {
        os << "# sqfb lockin_summary v1\n# signal=" << (sc.analysis.lockin_true_x ? "x" : "y")
           << "\n# unit=shot_noise\n";
        os << "label,var_X,var_Y,xy_asymmetry,var_X_ratio_to_first\n";
        for (std::size_t i = 0; i < runs.size(); ++i) {
          const auto& r = runs[i];
          os << sc.probes[i].label << ','
             << detail::csv_line({r.var_x, r.var_y, r.var_x / r.var_y - 1.0, r.var_x / runs[0].var_x}) << '\n';
        }
      });
    }
  }

  if (sc.wants(Output::sweep_table)) {
    const bool realistic = sc.feedback.config.mode == FeedbackMode::realistic_chain;
    const bool squeezing = sc.sweep.kind == SweepSpec::Kind::squeezing_db;
    for (std::size_t pi = 0; pi < sc.probes.size(); ++pi) {
      const auto& lp = sc.probes[pi];
      std::vector<detail::SweepRow> rows;
      std::vector<double> xs = sc.sweep.values;
      if (sc.sweep.include_optimum && !squeezing) {
        xs.push_back(optimal_gain(sc.mode, lp.probe, sc.occupancy));
        std::sort(xs.begin(), xs.end());
        xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
      }
      for (double x : xs) {
        detail::SweepRow row;
        row.x = x;
        row.probe = lp.probe;
        if (squeezing) {
          row.probe.v_sq = squeezing_db_to_variance(x);
          row.probe.quadrature = x == 0.0 ? Quadrature::coherent : Quadrature::phase_squeezed;
          row.gain = optimal_gain(sc.mode, row.probe, sc.occupancy);
          row.predicted_gain = row.gain;
        } else {
          row.gain = x;
          row.predicted_gain = realistic ? nominal_viscous_gain(make_sim_config(sc, row.probe, x, 0)) : x;
        }
        row.v_d = detected_variance(row.probe);
        row.predicted_t = predict_temperature(sc.mode, row.probe, std::max(0.0, row.predicted_gain), sc.occupancy).t_fb;
        rows.push_back(row);
      }

      if (sc.sweep.monte_carlo) {
        const std::size_t seeds = static_cast<std::size_t>(sc.sweep.seeds);
        struct Cell {
          double t = 0.0, t_err = 0.0;
          std::optional<FitResult> fit;
          std::optional<EffectiveTemperature> eff;
        };
        std::vector<Cell> cells(rows.size() * seeds);
        parallel_for(cells.size(), opt.threads, [&](std::size_t k) {
          const std::size_t ri = k / seeds, si = k % seeds;
          const auto& row = rows[ri];
          const auto cfg = make_sim_config(sc, row.probe, row.gain, derive_seed(seed, 1000 + 100000 * pi + k));
          const double to_k = cfg.mode.mass_eff * cfg.mode.omega_m * cfg.mode.omega_m / kBoltzmann;
          const std::size_t batch = std::max<std::size_t>(1, cfg.sample_count() / 64);
          MomentAccumulator acc(batch);
          std::vector<double> y;
          if (sc.sweep.fit) y.reserve(cfg.sample_count());
          run_streaming(cfg, [&](const Sample& s) {
            acc.add(s.x);
            if (sc.sweep.fit) y.push_back(s.y);
          });
          auto& c = cells[k];
          c.t = acc.mean_square() * to_k;
          c.t_err = acc.standard_error() * to_k;
          if (sc.sweep.fit) {
            c.fit = fit_record(record_spectrum(y, cfg, sc.analysis), cfg);
            if (c.fit->converged) c.eff = effective_temperature(*c.fit, cfg.mode, cfg.probe);
          }
          (void)si;
        });
        for (std::size_t ri = 0; ri < rows.size(); ++ri) {
          auto& row = rows[ri];
          double st = 0.0, st2 = 0.0, se2 = 0.0, fg = 0.0, fg2 = 0.0, fge = 0.0, ft = 0.0, ft2 = 0.0, fte = 0.0;
          std::size_t nf = 0;
          for (std::size_t si = 0; si < seeds; ++si) {
            const auto& c = cells[ri * seeds + si];
            st += c.t;
            st2 += c.t * c.t;
            se2 += c.t_err * c.t_err;
            if (c.eff) {
              ++nf;
              fg += c.fit->params.g;
              fg2 += c.fit->params.g * c.fit->params.g;
              fge += c.fit->param_errors.g * c.fit->param_errors.g;
              // propagate the gain error through the fitted model
              SquashModel hi = c.fit->params, lo = c.fit->params;
              hi.g += c.fit->param_errors.g;
              lo.g = std::max(-0.99, lo.g - c.fit->param_errors.g);
              const double scale = hi.mass * hi.omega_m * hi.omega_m / kBoltzmann;
              const double dt = 0.5 * scale * std::abs(hi.true_x_variance_closed_form() - lo.true_x_variance_closed_form());
              ft += c.eff->t_integral;
              ft2 += c.eff->t_integral * c.eff->t_integral;
              fte += dt * dt;
            }
          }
          const double n = static_cast<double>(seeds);
          row.sim_t = st / n;
          // spread across seeds when available, otherwise batch means of the single run
          row.sim_t_err = seeds > 1 ? std::sqrt(std::max(0.0, st2 / n - row.sim_t * row.sim_t) / (n - 1.0))
                                    : std::sqrt(se2);
          row.fits_converged = nf;
          if (nf) {
            const double m = static_cast<double>(nf);
            row.fit_g = fg / m;
            row.fit_t = ft / m;
            row.fit_g_err = nf > 1 ? std::sqrt(std::max(0.0, fg2 / m - row.fit_g * row.fit_g) / (m - 1.0))
                                   : std::sqrt(fge);
            row.fit_t_err = nf > 1 ? std::sqrt(std::max(0.0, ft2 / m - row.fit_t * row.fit_t) / (m - 1.0))
                                   : std::sqrt(fte);
          }
        }
      }

      writer.write("sweep_" + lp.label + ".csv", [&](std::ostream& os) {
        os << "# sqfb sweep_table v1\n# scenario=" << sc.name << "\n# probe=" << lp.label
           << "\n# kind=" << (squeezing ? "squeezing_db" : "gain") << "\n# feedback_mode="
           << to_string(sc.feedback.config.mode) << "\n# t0_k=" << format_number(t0)
           << "\n# seeds=" << sc.sweep.seeds << "\n# seed=" << seed << '\n';
        os << (squeezing ? "squeezing_db" : (realistic ? "electronic_gain" : "gain"))
           << ",detected_variance,viscous_gain,predicted_t_k,predicted_ratio";
        if (sc.sweep.monte_carlo) os << ",simulated_t_k,simulated_t_err_k,simulated_ratio,simulated_vs_predicted";
        if (sc.sweep.fit)
          os << ",fitted_gain,fitted_gain_err,fitted_t_k,fitted_t_err_k,fitted_ratio,fitted_vs_predicted,fits_converged";
        os << '\n';
        for (const auto& r : rows) {
          std::vector<double> v{r.x, r.v_d, r.predicted_gain, r.predicted_t, r.predicted_t / t0};
          if (sc.sweep.monte_carlo)
            v.insert(v.end(), {r.sim_t, r.sim_t_err, r.sim_t / t0, r.sim_t / r.predicted_t});
          if (sc.sweep.fit)
            v.insert(v.end(), {r.fit_g, r.fit_g_err, r.fit_t, r.fit_t_err, r.fit_t / t0, r.fit_t / r.predicted_t,
                               static_cast<double>(r.fits_converged)});
          os << detail::csv_line(v) << '\n';
        }
      });

      if (realistic && sc.sweep.fit) {
        std::vector<CalibrationPoint> pts;
        for (const auto& r : rows)
          if (r.fits_converged) pts.push_back({r.gain, r.x == 0.0 ? 0.0 : r.fit_g, r.fit_g_err});
        if (pts.size() >= 3 && std::any_of(pts.begin(), pts.end(), [](auto& p) { return p.electronic_gain == 0.0; })) {
          const auto cal = gain_calibration(pts);
          writer.write("calibration_" + lp.label + ".txt", [&](std::ostream& os) {
            write_key_values(os, {{"slope_g_per_n_per_m", format_number(cal.slope)},
                                  {"nonlinearity_rms", format_number(cal.nonlinearity)},
                                  {"max_deviation", format_number(cal.max_deviation)},
                                  {"monotone", cal.monotone ? "1" : "0"},
                                  {"warning", cal.monotone ? "" : "fitted gain is not monotone in K"}});
          });
          if (!cal.monotone) report.notes.push_back("warning: fitted gain is not monotone in K for " + lp.label);
        } else {
          report.notes.push_back("calibration skipped for " + lp.label + ": needs >= 3 converged points including K = 0");
        }
      }
    }
  }

  // manifest, listing artifacts in name order
  std::vector<std::filesystem::path> files = report.files;
  std::sort(files.begin(), files.end());
  const std::string canonical = sc.source.dump();
  boost::crc_32_type crc;
  crc.process_bytes(canonical.data(), canonical.size());
  const auto manifest = opt.out_dir / "manifest.txt";
  {
    std::ofstream os(manifest, std::ios::binary);
    if (!os) throw IoError("cannot write " + manifest.string());
    os << "tool=sqfb\nversion=" << kVersion << "\nschema_version=" << sc.schema_version << "\nscenario=" << sc.name
       << "\nseed=" << seed << "\ninput_crc32=" << crc.checksum() << "\noutputs=";
    for (std::size_t i = 0; i < sc.outputs.size(); ++i) os << (i ? "," : "") << to_string(sc.outputs[i]);
    os << '\n';
    for (const auto& f : files)
      os << "artifact." << f.filename().string() << '=' << file_crc32(f) << ' ' << std::filesystem::file_size(f)
         << '\n';
  }
  report.files = files;
  report.files.push_back(manifest);
  return report;
}

}  // namespace sqfb
