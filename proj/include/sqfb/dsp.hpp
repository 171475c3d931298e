#pragma once

// Spectral and lock-in analysis of recorded trajectories.
//
// Conventions: every Spectrum holds a one-sided PSD in units^2/Hz, so that
// sum(psd) * df equals the variance of the record. Model spectra elsewhere in
// the library are double-sided in angular frequency, S(w) with
// <x^2> = int S dw / 2pi; the conversion is psd_one_sided(f) = 2 S(2 pi f)
// and lives in one_sided_from_angular() below.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sqfb/filters.hpp"
#include "sqfb/model.hpp"
#include "sqfb/units.hpp"

namespace sqfb {

enum class Window { hann, rectangular };
enum class SpectrumSource { in_loop_y, true_x };

inline constexpr double one_sided_from_angular(double s_angular) { return 2.0 * s_angular; }

struct Spectrum {
  std::vector<double> freq;  // Hz
  std::vector<double> psd;   // one-sided, units^2 / Hz
  double resolution_bw = 0.0;  // equivalent noise bandwidth of one bin, Hz
  std::size_t averages = 0;    // number of segments
  double effective_averages = 0.0;  // accounts for segment overlap
  SpectrumSource source = SpectrumSource::true_x;
  bool squashing_corrected = false;

  double bin_width() const { return freq.size() > 1 ? freq[1] - freq[0] : 0.0; }

  /// Integral of the PSD over [lo, hi] (bin sum times bin width).
  double band_power(double lo, double hi) const {
    const double df = bin_width();
    double sum = 0.0;
    for (std::size_t i = 0; i < freq.size(); ++i)
      if (freq[i] >= lo && freq[i] <= hi) sum += psd[i];
    return sum * df;
  }
};

namespace detail {

inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

/// Real-to-complex transform of a fixed length; plans are not thread safe to create.
class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    in_ = fftw_alloc_real(n);
    out_ = fftw_alloc_complex(n / 2 + 1);
    std::lock_guard lock(fftw_planner_mutex());
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in_, out_, FFTW_ESTIMATE);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;
  ~RealFft() {
    {
      std::lock_guard lock(fftw_planner_mutex());
      fftw_destroy_plan(plan_);
    }
    fftw_free(in_);
    fftw_free(out_);
  }

  std::span<double> input() { return {in_, n_}; }
  void execute() { fftw_execute(plan_); }
  double power(std::size_t k) const { return out_[k][0] * out_[k][0] + out_[k][1] * out_[k][1]; }

 private:
  std::size_t n_;
  double* in_ = nullptr;
  fftw_complex* out_ = nullptr;
  fftw_plan plan_ = nullptr;
};

inline std::vector<double> make_window(Window w, std::size_t n) {
  std::vector<double> out(n, 1.0);
  if (w == Window::hann && n > 1) {
    // periodic Hann, the usual choice for spectral estimation
    for (std::size_t i = 0; i < n; ++i)
      out[i] = 0.5 - 0.5 * std::cos(kTwoPi * static_cast<double>(i) / static_cast<double>(n));
  }
  return out;
}

}  // namespace detail

struct WelchOptions {
  std::size_t segment_length = 4096;
  Window window = Window::hann;
  double overlap = 0.5;  // fraction in [0, 1)
  SpectrumSource source = SpectrumSource::true_x;
};

/// Averaged modified periodogram (Welch). Deterministic for fixed input.
inline Spectrum welch_psd(std::span<const double> series, double sample_rate, const WelchOptions& opt) {
  const std::size_t n = opt.segment_length;
  if (n < 2) throw AnalysisError("welch_psd: segment_length must be >= 2");
  if (series.size() < n) throw AnalysisError("welch_psd: series shorter than one segment");
  if (!(opt.overlap >= 0.0 && opt.overlap < 1.0)) throw AnalysisError("welch_psd: overlap must be in [0, 1)");
  if (!(sample_rate > 0.0)) throw AnalysisError("welch_psd: sample_rate must be > 0");

  const auto window = detail::make_window(opt.window, n);
  const double sum_w = std::accumulate(window.begin(), window.end(), 0.0);
  const double sum_w2 = std::inner_product(window.begin(), window.end(), window.begin(), 0.0);
  const std::size_t step = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(n * (1.0 - opt.overlap))));

  detail::RealFft fft(n);
  const std::size_t bins = n / 2 + 1;
  std::vector<double> acc(bins, 0.0);
  std::size_t segments = 0;
  for (std::size_t start = 0; start + n <= series.size(); start += step) {
    auto in = fft.input();
    for (std::size_t i = 0; i < n; ++i) in[i] = series[start + i] * window[i];
    fft.execute();
    for (std::size_t k = 0; k < bins; ++k) acc[k] += fft.power(k);
    ++segments;
  }

  Spectrum s;
  s.source = opt.source;
  s.averages = segments;
  s.freq.resize(bins);
  s.psd.resize(bins);
  const double scale = 1.0 / (sample_rate * sum_w2 * static_cast<double>(segments));
  for (std::size_t k = 0; k < bins; ++k) {
    s.freq[k] = static_cast<double>(k) * sample_rate / static_cast<double>(n);
    const bool edge = k == 0 || (n % 2 == 0 && k == n / 2);
    s.psd[k] = acc[k] * scale * (edge ? 1.0 : 2.0);
  }
  s.resolution_bw = sample_rate * sum_w2 / (sum_w * sum_w);

  // Welch's correction for correlated overlapping segments
  double corr_sum = 0.0;
  for (std::size_t lag = step; lag < n; lag += step) {
    double c = 0.0;
    for (std::size_t i = 0; i + lag < n; ++i) c += window[i] * window[i + lag];
    c /= sum_w2;
    corr_sum += (1.0 - static_cast<double>(lag / step) / static_cast<double>(segments)) * c * c;
  }
  s.effective_averages = static_cast<double>(segments) / (1.0 + 2.0 * corr_sum);
  return s;
}

/// Fraction of a damped oscillator's response 1/|Omega^2 - w^2 + i Gamma w|^2
/// that falls inside [lo, hi] Hz.
inline double oscillator_weight_fraction(double f_m, double linewidth_hz, double lo, double hi) {
  auto weight = [&](double f) {
    const double d = f_m * f_m - f * f;
    return 1.0 / (d * d + linewidth_hz * linewidth_hz * f * f);
  };
  // log-spaced trapezoid on [f_m / 1000, 1000 f_m] with refinement around resonance
  const double fmin = f_m * 1e-3, fmax = f_m * 1e3;
  std::vector<double> grid;
  const std::size_t n_log = 4000;
  for (std::size_t i = 0; i <= n_log; ++i)
    grid.push_back(fmin * std::pow(fmax / fmin, static_cast<double>(i) / n_log));
  for (int i = -4000; i <= 4000; ++i) grid.push_back(f_m + linewidth_hz * 0.01 * i);
  grid.push_back(lo);
  grid.push_back(hi);
  std::sort(grid.begin(), grid.end());
  grid.erase(std::remove_if(grid.begin(), grid.end(), [&](double f) { return f < fmin || f > fmax; }),
             grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  double total = 0.0, inside = 0.0;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const double a = grid[i - 1], b = grid[i];
    const double piece = 0.5 * (weight(a) + weight(b)) * (b - a);
    total += piece;
    if (a >= lo && b <= hi) inside += piece;
  }
  return inside / total;
}

struct EquipartitionOptions {
  /// Linewidth (Hz) of the line being integrated; when set, the band must hold
  /// at least 99% of the oscillator response weight.
  std::optional<double> linewidth_hz;
  /// Accept an in-loop spectrum without squashing correction.
  bool allow_in_loop = false;
};

/// T = m Omega^2 (integral of the displacement PSD over the band) / k_B.
inline double equipartition_temperature(const Spectrum& spectrum, const MechanicalMode& mode, double band_lo,
                                        double band_hi, const EquipartitionOptions& opt = {}) {
  if (spectrum.source == SpectrumSource::in_loop_y && !spectrum.squashing_corrected && !opt.allow_in_loop)
    throw AnalysisError("in-loop spectra are biased; fit first");
  if (!(band_hi > band_lo)) throw AnalysisError("equipartition band must have hi > lo");
  if (opt.linewidth_hz) {
    const double frac = oscillator_weight_fraction(rad_to_hz(mode.omega_m), *opt.linewidth_hz, band_lo, band_hi);
    if (frac < 0.99) throw AnalysisError("equipartition band holds less than 99% of the line weight");
  }
  return mode.mass_eff * mode.omega_m * mode.omega_m * spectrum.band_power(band_lo, band_hi) / kBoltzmann;
}

/// Equipartition temperature straight from a displacement record.
inline double equipartition_temperature(std::span<const double> x, const MechanicalMode& mode) {
  double sum = 0.0;
  for (double v : x) sum += v * v;
  return mode.mass_eff * mode.omega_m * mode.omega_m * (sum / static_cast<double>(x.size())) / kBoltzmann;
}

struct PhaseSpaceTrack {
  std::vector<double> t;
  std::vector<double> X;
  std::vector<double> Y;
  double lpf_bandwidth = 0.0;  // Hz
  double scale = 1.0;          // divide raw quadratures by this (1 = metres)
};

/// Down-mixes with cos/sin at f_ref and low-passes: X = 2 LPF[y cos], Y = -2 LPF[y sin].
/// For y = a cos(2 pi f t + phi) the steady state is (a cos phi, a sin phi).
inline PhaseSpaceTrack lockin_demodulate(std::span<const double> y, double sample_rate, double f_ref,
                                         double lpf_bandwidth) {
  if (!(lpf_bandwidth > 0.0 && lpf_bandwidth < f_ref))
    throw AnalysisError("lockin: lpf_bandwidth must lie in (0, f_ref)");
  CascadedLowpass lp_i(lpf_bandwidth, sample_rate), lp_q(lpf_bandwidth, sample_rate);
  PhaseSpaceTrack tr;
  tr.lpf_bandwidth = lpf_bandwidth;
  tr.t.resize(y.size());
  tr.X.resize(y.size());
  tr.Y.resize(y.size());
  const double w = kTwoPi * f_ref / sample_rate;
  for (std::size_t k = 0; k < y.size(); ++k) {
    const double ph = w * static_cast<double>(k);
    tr.t[k] = static_cast<double>(k) / sample_rate;
    tr.X[k] = 2.0 * lp_i.process(y[k] * std::cos(ph));
    tr.Y[k] = -2.0 * lp_q.process(y[k] * std::sin(ph));
  }
  return tr;
}

/// RMS of one lock-in quadrature when fed white noise of per-sample variance
/// `noise_variance`: sqrt(2 sigma^2 sum h^2). With the imprecision of a coherent
/// probe this is the shot-noise unit for phase-space plots.
inline double shot_noise_rms(double noise_variance, double sample_rate, double lpf_bandwidth) {
  return std::sqrt(2.0 * noise_variance * CascadedLowpass(lpf_bandwidth, sample_rate).noise_gain());
}

inline void normalise(PhaseSpaceTrack& track, double unit) {
  for (auto& v : track.X) v /= unit;
  for (auto& v : track.Y) v /= unit;
  track.scale *= unit;
}

/// Drops the first `samples` points (filter settling).
inline void discard_transient(PhaseSpaceTrack& track, std::size_t samples) {
  samples = std::min(samples, track.t.size());
  track.t.erase(track.t.begin(), track.t.begin() + static_cast<std::ptrdiff_t>(samples));
  track.X.erase(track.X.begin(), track.X.begin() + static_cast<std::ptrdiff_t>(samples));
  track.Y.erase(track.Y.begin(), track.Y.begin() + static_cast<std::ptrdiff_t>(samples));
}

enum class Axis { X, Y };

struct Histogram {
  std::vector<double> centers;
  std::vector<double> density;  // integrates to 1
  std::vector<double> gaussian;  // fitted normal density at the centres
  double bin_width = 0.0;
  double mean = 0.0;
  double variance = 0.0;
  double chi2_per_bin = 0.0;  // against the Gaussian fit, per populated bin
};

inline double sample_mean(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double sample_variance(std::span<const double> v) {
  const double m = sample_mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

/// Unit-normalised marginal density with a moment-matched Gaussian.
/// `min_effective_samples` guards against too-short tracks; the effective count
/// is duration times lock-in bandwidth.
inline Histogram marginal_histogram(const PhaseSpaceTrack& track, Axis axis, std::size_t bins = 60,
                                    double min_effective_samples = 1e4) {
  const auto& data = axis == Axis::X ? track.X : track.Y;
  if (data.size() < 2) throw AnalysisError("marginal_histogram: not enough samples");
  const double duration = track.t.back() - track.t.front();
  if (duration * track.lpf_bandwidth < min_effective_samples)
    throw AnalysisError("marginal_histogram: fewer than the required effective samples");
  Histogram h;
  h.mean = sample_mean(data);
  h.variance = sample_variance(data);
  if (!(h.variance > 0.0)) throw AnalysisError("marginal_histogram: degenerate zero-variance input");
  const double sd = std::sqrt(h.variance);
  const double lo = h.mean - 5.0 * sd, hi = h.mean + 5.0 * sd;
  h.bin_width = (hi - lo) / static_cast<double>(bins);
  std::vector<double> counts(bins, 0.0);
  std::size_t inside = 0;
  for (double v : data) {
    if (v < lo || v >= hi) continue;
    counts[static_cast<std::size_t>((v - lo) / h.bin_width)] += 1.0;
    ++inside;
  }
  h.centers.resize(bins);
  h.density.resize(bins);
  h.gaussian.resize(bins);
  const double norm = 1.0 / (static_cast<double>(inside) * h.bin_width);
  double chi2 = 0.0;
  std::size_t used = 0;
  const double eff_per_sample = std::min(1.0, duration * track.lpf_bandwidth / static_cast<double>(data.size()));
  for (std::size_t i = 0; i < bins; ++i) {
    h.centers[i] = lo + (static_cast<double>(i) + 0.5) * h.bin_width;
    h.density[i] = counts[i] * norm;
    const double z = (h.centers[i] - h.mean) / sd;
    h.gaussian[i] = std::exp(-0.5 * z * z) / (sd * std::sqrt(kTwoPi));
    const double expected = h.gaussian[i] * h.bin_width * static_cast<double>(inside) * eff_per_sample;
    if (expected >= 5.0) {
      const double observed = counts[i] * eff_per_sample;
      chi2 += (observed - expected) * (observed - expected) / expected;
      ++used;
    }
  }
  h.chi2_per_bin = used ? chi2 / static_cast<double>(used) : 0.0;
  return h;
}

}  // namespace sqfb
