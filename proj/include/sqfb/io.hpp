#pragma once

// CSV and key=value text formats. Metadata rides in leading "# key=value"
// comment lines; numbers are written in shortest round-trip form so that equal
// inputs produce byte-identical files.

#include <boost/crc.hpp>

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sqfb/dsp.hpp"
#include "sqfb/simulate.hpp"
#include "sqfb/specfit.hpp"

namespace sqfb {

inline constexpr std::string_view kVersion = "1.0.0";

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw IoError("format_number: conversion failed");
  return {buf, ptr};
}

inline double parse_number(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw IoError("not a number: '" + std::string(s) + "'");
  return v;
}

inline const char* to_string(SpectrumSource s) { return s == SpectrumSource::in_loop_y ? "in_loop_y" : "true_x"; }

inline SpectrumSource spectrum_source_from(std::string_view s) {
  if (s == "in_loop_y") return SpectrumSource::in_loop_y;
  if (s == "true_x") return SpectrumSource::true_x;
  throw IoError("unknown spectrum source '" + std::string(s) + "'");
}

inline const char* to_string(FeedbackMode m) {
  switch (m) {
    case FeedbackMode::off: return "off";
    case FeedbackMode::ideal_viscous: return "ideal_viscous";
    case FeedbackMode::realistic_chain: return "realistic_chain";
  }
  return "off";
}

using Metadata = std::vector<std::pair<std::string, std::string>>;

/// A parsed CSV: metadata from "# key=value" lines, a header and numeric rows.
struct CsvTable {
  std::map<std::string, std::string> meta;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> cells;  // per column, as written

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw IoError("missing column '" + std::string(name) + "'");
  }

  const std::vector<std::string>& text(std::string_view name) const { return cells[column(name)]; }

  std::vector<double> numbers(std::string_view name) const {
    const auto& col = text(name);
    std::vector<double> out;
    out.reserve(col.size());
    for (const auto& c : col) out.push_back(parse_number(c));
    return out;
  }
};

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline CsvTable read_csv(std::istream& in) {
  CsvTable t;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.front() == '#') {
      const auto eq = line.find('=');
      if (eq != std::string::npos) {
        std::string key = line.substr(1, eq - 1);
        while (!key.empty() && key.front() == ' ') key.erase(key.begin());
        t.meta[key] = line.substr(eq + 1);
      }
      continue;
    }
    if (t.header.empty()) {
      for (auto f : split(line, ',')) t.header.emplace_back(f);
      t.cells.resize(t.header.size());
      continue;
    }
    const auto fields = split(line, ',');
    if (fields.size() != t.header.size()) throw IoError("csv row has " + std::to_string(fields.size()) +
                                                        " fields, expected " + std::to_string(t.header.size()));
    for (std::size_t i = 0; i < fields.size(); ++i) t.cells[i].emplace_back(fields[i]);
  }
  if (t.header.empty()) throw IoError("csv has no header row");
  return t;
}

inline CsvTable read_csv(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  return read_csv(in);
}

inline void write_csv(std::ostream& out, std::string_view kind, const Metadata& meta,
                      const std::vector<std::string>& header, const std::vector<const std::vector<double>*>& cols) {
  out << "# sqfb " << kind << " v1\n";
  for (const auto& [k, v] : meta) out << "# " << k << '=' << v << '\n';
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  const std::size_t n = cols.empty() ? 0 : cols.front()->size();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c) out << (c ? "," : "") << format_number((*cols[c])[r]);
    out << '\n';
  }
}

inline Metadata trajectory_metadata(const Trajectory& tr) {
  const auto& c = tr.config;
  return {{"f_m_hz", format_number(rad_to_hz(c.mode.omega_m))},
          {"linewidth_hz", format_number(rad_to_hz(c.mode.gamma_m))},
          {"mass_kg", format_number(c.mode.mass_eff)},
          {"t_bath_k", format_number(c.mode.t_bath)},
          {"sample_rate_hz", format_number(c.sample_rate)},
          {"duration_s", format_number(c.duration)},
          {"burn_in_s", format_number(c.effective_burn_in())},
          {"seed", std::to_string(c.seed)},
          {"feedback_mode", to_string(c.feedback.mode)},
          {"feedback_gain", format_number(c.feedback.gain)},
          {"feedback_sign", std::to_string(c.feedback.sign)},
          {"delay_s", format_number(c.feedback.delay)},
          {"delay_samples", std::to_string(tr.delay_samples)},
          {"imprecision_psd", format_number(c.imprecision_noise ? imprecision_psd(c.mode, c.probe) : 0.0)},
          {"detected_variance", format_number(detected_variance(c.probe))}};
}

/// Writes t, x, v, y, f_fb. `max_rows` truncates long records (0 = all).
inline void write_trajectory_csv(std::ostream& out, const Trajectory& tr, std::size_t max_rows = 0) {
  const std::size_t n = max_rows ? std::min(max_rows, tr.size()) : tr.size();
  auto head = [n](const std::vector<double>& v) { return std::vector<double>(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n)); };
  const auto t = head(tr.t), x = head(tr.x), v = head(tr.v), y = head(tr.y), f = head(tr.f_fb);
  auto meta = trajectory_metadata(tr);
  meta.emplace_back("rows", std::to_string(n));
  write_csv(out, "trajectory", meta, {"t", "x", "v", "y", "f_fb"}, {&t, &x, &v, &y, &f});
}

struct TrajectoryRecord {
  std::vector<double> t, x, v, y, f_fb;
  std::map<std::string, std::string> meta;
  double sample_rate() const {
    auto it = meta.find("sample_rate_hz");
    if (it != meta.end()) return parse_number(it->second);
    if (t.size() < 2) throw IoError("trajectory: cannot infer sample rate");
    return 1.0 / (t[1] - t[0]);
  }
};

inline TrajectoryRecord read_trajectory_csv(const std::filesystem::path& p) {
  auto t = read_csv(p);
  TrajectoryRecord r;
  r.meta = t.meta;
  r.t = t.numbers("t");
  r.x = t.numbers("x");
  r.v = t.numbers("v");
  r.y = t.numbers("y");
  r.f_fb = t.numbers("f_fb");
  return r;
}

inline void write_spectrum_csv(std::ostream& out, const Spectrum& s) {
  const Metadata meta{{"source", to_string(s.source)},
                      {"resolution_bw_hz", format_number(s.resolution_bw)},
                      {"averages", std::to_string(s.averages)},
                      {"effective_averages", format_number(s.effective_averages)},
                      {"squashing_corrected", s.squashing_corrected ? "1" : "0"}};
  write_csv(out, "spectrum", meta, {"freq_hz", "psd_m2_per_hz"}, {&s.freq, &s.psd});
}

/// Reads the spectrum schema. Files from other tools may omit the metadata;
/// `default_averages` then supplies the averaging count used for fit weights.
inline Spectrum read_spectrum_csv(std::istream& in, double default_averages = 0.0) {
  auto t = read_csv(in);
  Spectrum s;
  s.freq = t.numbers("freq_hz");
  s.psd = t.numbers("psd_m2_per_hz");
  auto get = [&](const char* k) -> const std::string* {
    auto it = t.meta.find(k);
    return it == t.meta.end() ? nullptr : &it->second;
  };
  s.source = get("source") ? spectrum_source_from(*get("source")) : SpectrumSource::in_loop_y;
  s.resolution_bw = get("resolution_bw_hz") ? parse_number(*get("resolution_bw_hz")) : s.bin_width();
  s.averages = get("averages") ? static_cast<std::size_t>(parse_number(*get("averages")))
                               : static_cast<std::size_t>(default_averages);
  s.effective_averages = get("effective_averages") ? parse_number(*get("effective_averages")) : default_averages;
  s.squashing_corrected = get("squashing_corrected") && *get("squashing_corrected") == "1";
  for (std::size_t i = 1; i < s.freq.size(); ++i)
    if (!(s.freq[i] > s.freq[i - 1])) throw IoError("spectrum: frequencies must be strictly increasing");
  return s;
}

inline Spectrum read_spectrum_csv(const std::filesystem::path& p, double default_averages = 0.0) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  return read_spectrum_csv(in, default_averages);
}

/// Writes every `stride`-th sample of a phase-space track.
inline void write_track_csv(std::ostream& out, const PhaseSpaceTrack& tr, std::size_t stride = 1) {
  std::vector<double> t, x, y;
  for (std::size_t i = 0; i < tr.t.size(); i += std::max<std::size_t>(stride, 1)) {
    t.push_back(tr.t[i]);
    x.push_back(tr.X[i]);
    y.push_back(tr.Y[i]);
  }
  const bool metres = tr.scale == 1.0;
  const Metadata meta{{"lpf_bandwidth_hz", format_number(tr.lpf_bandwidth)},
                      {"unit_m", format_number(tr.scale)},
                      {"stride", std::to_string(stride)}};
  write_csv(out, "phase_space", meta, {"t_s", metres ? "X_m" : "X_shot_noise", metres ? "Y_m" : "Y_shot_noise"},
            {&t, &x, &y});
}

inline void write_histogram_csv(std::ostream& out, const Histogram& h) {
  const Metadata meta{{"mean", format_number(h.mean)},
                      {"variance", format_number(h.variance)},
                      {"bin_width", format_number(h.bin_width)},
                      {"chi2_per_bin", format_number(h.chi2_per_bin)}};
  write_csv(out, "histogram", meta, {"center", "density", "gaussian_fit"}, {&h.centers, &h.density, &h.gaussian});
}

inline Metadata fit_record(const FitResult& f) {
  const auto& p = f.params;
  const auto& e = f.param_errors;
  return {{"source", to_string(f.source)},
          {"converged", f.converged ? "1" : "0"},
          {"message", f.message},
          {"f_m_hz", format_number(rad_to_hz(p.omega_m))},
          {"f_m_err_hz", format_number(rad_to_hz(e.omega_m))},
          {"linewidth_hz", format_number(rad_to_hz(p.gamma_m))},
          {"linewidth_err_hz", format_number(rad_to_hz(e.gamma_m))},
          {"gain", format_number(p.g)},
          {"gain_err", format_number(e.g)},
          {"s_imp", format_number(p.s_imp)},
          {"s_imp_err", format_number(e.s_imp)},
          {"s_f", format_number(p.s_f)},
          {"s_f_err", format_number(e.s_f)},
          {"t_eff_k", format_number(f.t_eff)},
          {"residual_norm", format_number(f.residual_norm)},
          {"reduced_chi2", format_number(f.reduced_chi2)},
          {"gradient_norm", format_number(f.gradient_norm)},
          {"iterations", std::to_string(f.iterations)},
          {"bins", std::to_string(f.bins)},
          {"band_lo_hz", format_number(f.band_lo)},
          {"band_hi_hz", format_number(f.band_hi)}};
}

inline void write_key_values(std::ostream& out, const Metadata& kv) {
  for (const auto& [k, v] : kv) out << k << '=' << v << '\n';
}

inline std::map<std::string, std::string> read_key_values(std::istream& in) {
  std::map<std::string, std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("key=value record: malformed line '" + line + "'");
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

/// CRC-32 of a file's bytes.
inline std::uint32_t file_crc32(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  boost::crc_32_type crc;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    crc.process_bytes(buf, static_cast<std::size_t>(in.gcount()));
  }
  return crc.checksum();
}

}  // namespace sqfb
