#pragma once

// Closed-loop spectral model with in-loop noise squashing, and a bounded
// damped Gauss-Newton fitter for it.
//
// With viscous feedback of gain G the detector record y = x + n and the true
// displacement x have (double-sided, angular) spectra
//
//   S_y(w) = [s_f + S_imp |D0|^2] / |D|^2
//   S_x(w) = [s_f + (Gamma G w)^2 S_imp] / |D|^2
//
// with D0 = Omega^2 - w^2 + i Gamma w, D = Omega^2 - w^2 + i Gamma (1 + G) w and
// s_f = S_F / m^2. The ratio s_f / (Omega Gamma)^2 / S_imp is the cooling
// strength A, so a fit of (Omega, G, S_imp) with s_f pinned by the
// bath temperature determines the effective temperature.

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sqfb/dsp.hpp"
#include "sqfb/model.hpp"
#include "sqfb/simulate.hpp"
#include "sqfb/units.hpp"

namespace sqfb {

struct SquashModel {
  double omega_m = 0.0;  // rad/s
  double gamma_m = 0.0;  // rad/s
  double g = 0.0;        // viscous gain
  double s_imp = 0.0;    // m^2 s (double-sided, angular)
  double s_f = 0.0;      // S_F / m^2
  double mass = 0.0;     // kg, not fitted

  static SquashModel from_physics(const MechanicalMode& mode, const ProbeState& probe, double gain) {
    return {mode.omega_m, mode.gamma_m, gain, imprecision_psd(mode, probe),
            thermal_force_psd(mode) / (mode.mass_eff * mode.mass_eff), mode.mass_eff};
  }

  double strength() const { return s_f / (omega_m * omega_m * gamma_m * gamma_m * s_imp); }

  /// Bath temperature encoded in s_f.
  double bath_temperature() const { return mass * s_f / (2.0 * gamma_m * kBoltzmann); }

  double in_loop(double w) const {
    const double d = omega_m * omega_m - w * w;
    const double p = d * d + gamma_m * gamma_m * w * w;
    const double q = d * d + gamma_m * gamma_m * (1.0 + g) * (1.0 + g) * w * w;
    return (s_f + s_imp * p) / q;
  }

  double true_x(double w) const {
    const double d = omega_m * omega_m - w * w;
    const double q = d * d + gamma_m * gamma_m * (1.0 + g) * (1.0 + g) * w * w;
    const double gw = gamma_m * g * w;
    return (s_f + gw * gw * s_imp) / q;
  }

  double evaluate(SpectrumSource src, double w) const {
    return src == SpectrumSource::in_loop_y ? in_loop(w) : true_x(w);
  }

  /// One-sided PSD in units^2/Hz at frequency f (Hz).
  double one_sided(SpectrumSource src, double f_hz) const {
    return one_sided_from_angular(evaluate(src, hz_to_rad(f_hz)));
  }

  /// <x^2> in closed form: s_f / (2 Gamma' Omega^2) + Gamma G^2 S_imp / (2 (1 + G)).
  double true_x_variance_closed_form() const {
    const double gp = gamma_m * (1.0 + g);
    return s_f / (2.0 * gp * omega_m * omega_m) + gamma_m * g * g * s_imp / (2.0 * (1.0 + g));
  }
};

/// <x^2> = integral of S_x dw / 2pi, by adaptive Gauss-Kronrod quadrature.
inline double true_x_variance_numeric(const SquashModel& m) {
  using boost::math::quadrature::gauss_kronrod;
  auto f = [&](double w) { return m.true_x(w); };
  const double width = m.gamma_m * std::max(1.0, 1.0 + m.g);
  const double lo = std::max(0.0, m.omega_m - 20.0 * width);
  const double hi = m.omega_m + 20.0 * width;
  double total = 0.0;
  if (lo > 0.0) total += gauss_kronrod<double, 61>::integrate(f, 0.0, lo, 15, 1e-12);
  // split the resonant region so the peak is always resolved
  const int pieces = 16;
  for (int i = 0; i < pieces; ++i) {
    const double a = lo + (hi - lo) * i / pieces, b = lo + (hi - lo) * (i + 1) / pieces;
    total += gauss_kronrod<double, 61>::integrate(f, a, b, 15, 1e-12);
  }
  total += gauss_kronrod<double, 61>::integrate(f, hi, std::numeric_limits<double>::infinity(), 15, 1e-12);
  // S_x is even in w, so the two-sided integral is twice the positive half
  return 2.0 * total / kTwoPi;
}

enum FitParam : std::size_t { kOmega = 0, kGamma = 1, kGain = 2, kImprecision = 3, kForce = 4, kParamCount = 5 };

namespace detail {

inline std::array<double, kParamCount> to_array(const SquashModel& m) {
  return {m.omega_m, m.gamma_m, m.g, m.s_imp, m.s_f};
}

inline SquashModel from_array(const std::array<double, kParamCount>& a, double mass) {
  return {a[kOmega], a[kGamma], a[kGain], a[kImprecision], a[kForce], mass};
}

/// Model value and its gradient with respect to the five parameters.
inline double model_with_gradient(const SquashModel& m, SpectrumSource src, double w,
                                  std::array<double, kParamCount>& grad) {
  const double om2 = m.omega_m * m.omega_m;
  const double d = om2 - w * w;
  const double w2 = w * w;
  const double gp = 1.0 + m.g;
  const double den = d * d + m.gamma_m * m.gamma_m * gp * gp * w2;
  std::array<double, kParamCount> dden{4.0 * m.omega_m * d, 2.0 * m.gamma_m * gp * gp * w2,
                                       2.0 * m.gamma_m * m.gamma_m * gp * w2, 0.0, 0.0};
  double num;
  std::array<double, kParamCount> dnum{};
  if (src == SpectrumSource::in_loop_y) {
    const double p = d * d + m.gamma_m * m.gamma_m * w2;
    num = m.s_f + m.s_imp * p;
    dnum = {m.s_imp * 4.0 * m.omega_m * d, m.s_imp * 2.0 * m.gamma_m * w2, 0.0, p, 1.0};
  } else {
    const double gw2 = m.gamma_m * m.gamma_m * m.g * m.g * w2;
    num = m.s_f + gw2 * m.s_imp;
    dnum = {0.0, 2.0 * m.gamma_m * m.g * m.g * w2 * m.s_imp, 2.0 * m.gamma_m * m.gamma_m * m.g * w2 * m.s_imp,
            gw2, 1.0};
  }
  for (std::size_t j = 0; j < kParamCount; ++j) grad[j] = (dnum[j] * den - num * dden[j]) / (den * den);
  return num / den;
}

}  // namespace detail

struct FitBounds {
  std::array<double, kParamCount> lower{};
  std::array<double, kParamCount> upper{};

  /// Generous bounds around an initial model.
  static FitBounds around(const SquashModel& init) {
    FitBounds b;
    b.lower = {0.5 * init.omega_m, 1e-3 * init.gamma_m, -0.99, 1e-6 * init.s_imp, 1e-6 * init.s_f};
    b.upper = {1.5 * init.omega_m, 1e3 * init.gamma_m, 1e5, 1e6 * init.s_imp, 1e6 * init.s_f};
    return b;
  }

  bool contains(const SquashModel& m) const {
    const auto a = detail::to_array(m);
    for (std::size_t j = 0; j < kParamCount; ++j)
      if (a[j] < lower[j] || a[j] > upper[j]) return false;
    return true;
  }
};

struct FitOptions {
  /// Free parameters; the default matches the three-parameter in-loop fit.
  std::array<bool, kParamCount> free{true, false, true, true, false};
  int max_iterations = 200;
  double step_tol_abs = 1e-10;
  double step_tol_rel = 1e-8;
  double gradient_tol = 1e-4;  // on the cosine between residual and each Jacobian column
  /// Fit band in Hz; defaults to f_m +- min(0.9 f_m, 10 effective linewidths).
  std::optional<double> band_lo, band_hi;
  /// Overrides the spectrum's effective averages for the weights.
  std::optional<double> averages;
};

struct FitResult {
  SquashModel params;
  SquashModel param_errors;  // 1 sigma; zero for fixed parameters
  double t_eff = 0.0;        // K, from the integrated S_x model
  bool converged = false;
  double residual_norm = 0.0;  // sqrt of the weighted chi-square
  double reduced_chi2 = 0.0;
  double gradient_norm = 0.0;
  int iterations = 0;
  std::size_t bins = 0;
  double band_lo = 0.0, band_hi = 0.0;
  SpectrumSource source = SpectrumSource::in_loop_y;
  std::string message;
};

/// Initial model per the usual recipe: resonance from the peak or dip bin
/// (whichever is more prominent), floor from the median of the outer 20% of
/// bins, gain from the floor-to-extremum ratio. Gamma, s_f and mass come from
/// `nominal`.
inline SquashModel initial_guess(const Spectrum& spec, const SquashModel& nominal, double search_lo_hz,
                                 double search_hi_hz) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < spec.freq.size(); ++i)
    if (spec.freq[i] >= search_lo_hz && spec.freq[i] <= search_hi_hz && spec.freq[i] > 0.0) idx.push_back(i);
  if (idx.size() < 10) throw AnalysisError("initial_guess: too few bins in the search window");

  std::vector<double> vals;
  for (auto i : idx) vals.push_back(spec.psd[i]);
  std::vector<double> sorted = vals;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted[sorted.size() / 2];

  // outer 10% on each side
  const std::size_t edge = std::max<std::size_t>(1, idx.size() / 10);
  std::vector<double> outer(vals.begin(), vals.begin() + static_cast<std::ptrdiff_t>(edge));
  outer.insert(outer.end(), vals.end() - static_cast<std::ptrdiff_t>(edge), vals.end());
  std::sort(outer.begin(), outer.end());
  const double floor_one_sided = outer[outer.size() / 2];

  // light smoothing before locating extrema
  auto smoothed = [&](std::size_t k) {
    double s = 0.0;
    int n = 0;
    for (int o = -2; o <= 2; ++o) {
      const auto j = static_cast<std::ptrdiff_t>(k) + o;
      if (j < 0 || j >= static_cast<std::ptrdiff_t>(vals.size())) continue;
      s += vals[static_cast<std::size_t>(j)];
      ++n;
    }
    return s / n;
  };
  std::size_t i_max = 0, i_min = 0;
  for (std::size_t k = 0; k < vals.size(); ++k) {
    if (smoothed(k) > smoothed(i_max)) i_max = k;
    if (smoothed(k) < smoothed(i_min)) i_min = k;
  }
  const double peak_prom = smoothed(i_max) / median;
  const double dip_prom = median / smoothed(i_min);
  const bool use_dip = spec.source == SpectrumSource::in_loop_y && dip_prom > peak_prom;
  const std::size_t i_ext = use_dip ? i_min : i_max;

  SquashModel m = nominal;
  m.omega_m = hz_to_rad(spec.freq[idx[i_ext]]);
  m.s_imp = std::max(floor_one_sided / 2.0, 1e-300);
  const double ext = smoothed(i_ext) / 2.0;  // double-sided angular
  const double peak_thermal = m.s_f / (m.omega_m * m.omega_m * m.gamma_m * m.gamma_m);
  double g;
  if (spec.source == SpectrumSource::in_loop_y)
    g = std::sqrt((peak_thermal + m.s_imp) / ext) - 1.0;
  else
    g = std::sqrt(peak_thermal / ext) - 1.0;
  m.g = std::max(0.0, g);
  return m;
}

/// Weighted least squares of an averaged spectrum against the squashing model.
/// Bin weights are sigma_i = model_i / sqrt(averages), refreshed between rounds.
inline FitResult fit_spectrum(const Spectrum& spec, const SquashModel& init, const FitBounds& bounds,
                              const FitOptions& opt = {}) {
  if (!bounds.contains(init)) throw AnalysisError("fit_spectrum: initial model outside bounds");
  for (double v : spec.psd)
    if (v < 0.0 || !std::isfinite(v)) throw AnalysisError("fit_spectrum: negative or non-finite PSD bin");

  const double f0 = rad_to_hz(init.omega_m);
  const double lw = rad_to_hz(init.gamma_m) * std::max(1.0, 1.0 + init.g);
  const double half = std::min(0.9 * f0, 10.0 * lw);
  const double lo = opt.band_lo.value_or(f0 - half);
  const double hi = opt.band_hi.value_or(f0 + half);
  const double g_hz = rad_to_hz(init.gamma_m);
  if (spec.freq.empty() || spec.freq.front() > f0 - 5.0 * g_hz || spec.freq.back() < f0 + 5.0 * g_hz)
    throw AnalysisError("fit_spectrum: spectrum must cover at least 10 linewidths around the resonance");

  std::vector<double> w, d;
  for (std::size_t i = 0; i < spec.freq.size(); ++i) {
    if (spec.freq[i] < lo || spec.freq[i] > hi || spec.freq[i] <= 0.0) continue;
    w.push_back(hz_to_rad(spec.freq[i]));
    d.push_back(spec.psd[i] / 2.0);  // to double-sided angular
  }
  std::vector<std::size_t> free_idx;
  for (std::size_t j = 0; j < kParamCount; ++j)
    if (opt.free[j]) free_idx.push_back(j);
  const std::size_t np = free_idx.size();
  if (np == 0) throw AnalysisError("fit_spectrum: no free parameters");
  if (w.size() <= np) throw AnalysisError("fit_spectrum: too few bins in the fit band");
  const double averages = opt.averages.value_or(spec.effective_averages > 0.0 ? spec.effective_averages
                                                                              : static_cast<double>(spec.averages));
  if (!(averages > 0.0)) throw AnalysisError("fit_spectrum: spectrum carries no averaging information");
  const double sqrt_k = std::sqrt(averages);

  // scaled coordinates q_j = p_j / scale_j
  auto p = detail::to_array(init);
  std::array<double, kParamCount> scale{};
  for (std::size_t j = 0; j < kParamCount; ++j) scale[j] = std::max(std::abs(p[j]), j == kGain ? 1.0 : 1e-300);

  const std::size_t n = w.size();
  Eigen::MatrixXd jac(n, np);
  Eigen::VectorXd res(n), weights(n);

  auto model_at = [&](const std::array<double, kParamCount>& pa) { return detail::from_array(pa, init.mass); };
  auto refresh_weights = [&](const std::array<double, kParamCount>& pa) {
    const auto m = model_at(pa);
    for (std::size_t i = 0; i < n; ++i) weights[static_cast<Eigen::Index>(i)] = m.evaluate(spec.source, w[i]);
  };
  auto cost_at = [&](const std::array<double, kParamCount>& pa) {
    const auto m = model_at(pa);
    double c = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = sqrt_k * (d[i] - m.evaluate(spec.source, w[i])) / weights[static_cast<Eigen::Index>(i)];
      c += r * r;
    }
    return c;
  };
  auto linearize = [&](const std::array<double, kParamCount>& pa) {
    const auto m = model_at(pa);
    std::array<double, kParamCount> grad{};
    for (std::size_t i = 0; i < n; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      const double mv = detail::model_with_gradient(m, spec.source, w[i], grad);
      res[ii] = sqrt_k * (d[i] - mv) / weights[ii];
      for (std::size_t k = 0; k < np; ++k)
        jac(ii, static_cast<Eigen::Index>(k)) = -sqrt_k * grad[free_idx[k]] * scale[free_idx[k]] / weights[ii];
    }
  };
  auto at_bound = [&](std::size_t j, double grad_j, const std::array<double, kParamCount>& pa) {
    // a descent direction pointing out of the box does not count against convergence
    return (pa[j] <= bounds.lower[j] && grad_j > 0.0) || (pa[j] >= bounds.upper[j] && grad_j < 0.0);
  };

  FitResult out;
  out.source = spec.source;
  out.band_lo = lo;
  out.band_hi = hi;
  out.bins = n;
  constexpr double kExactResidual = 1e-9;
  auto max_cosine = [&](const Eigen::MatrixXd& jtj, const Eigen::VectorXd& jtr, const std::array<double, kParamCount>& pa) {
    double g = 0.0;
    // a model that reproduces the data to rounding has nothing left to explain
    if (res.norm() < kExactResidual) return g;
    const double rn = res.norm();
    for (std::size_t k = 0; k < np; ++k) {
      const auto kk = static_cast<Eigen::Index>(k);
      if (at_bound(free_idx[k], jtr[kk], pa)) continue;
      g = std::max(g, std::abs(jtr[kk]) / (std::sqrt(std::max(jtj(kk, kk), 1e-300)) * rn));
    }
    return g;
  };

  // Iteratively reweighted: an inner damped Gauss-Newton run with the weights
  // held fixed, then the weights are recomputed from the new model. The outer
  // loop ends once a reweighting moves no parameter by more than a small
  // fraction of its standard error.
  const int max_rounds = 30;
  int it = 0;
  bool inner_ok = false;
  for (int round = 0; round < max_rounds; ++round) {
    refresh_weights(p);
    const auto round_start = p;
    double lambda = 1e-3;
    inner_ok = false;
    for (int inner = 0; inner < opt.max_iterations; ++inner, ++it) {
      linearize(p);
      const double cost = res.squaredNorm();
      const Eigen::MatrixXd jtj = jac.transpose() * jac;
      const Eigen::VectorXd jtr = jac.transpose() * res;
      if (max_cosine(jtj, jtr, p) < 0.1 * opt.gradient_tol) {
        inner_ok = true;
        break;
      }
      bool accepted = false, tiny = false;
      for (int attempt = 0; attempt < 40 && !accepted; ++attempt) {
        Eigen::MatrixXd a = jtj;
        for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(np); ++k) a(k, k) += lambda * std::max(jtj(k, k), 1e-30);
        const Eigen::VectorXd delta = a.ldlt().solve(-jtr);
        auto trial = p;
        tiny = true;
        for (std::size_t k = 0; k < np; ++k) {
          const std::size_t j = free_idx[k];
          const double q_old = p[j] / scale[j];
          const double q_new =
              std::clamp(q_old + delta[static_cast<Eigen::Index>(k)], bounds.lower[j] / scale[j], bounds.upper[j] / scale[j]);
          trial[j] = q_new * scale[j];
          if (std::abs(q_new - q_old) > opt.step_tol_abs + opt.step_tol_rel * std::abs(q_old)) tiny = false;
        }
        if (cost_at(trial) <= cost) {
          accepted = true;
          lambda = std::max(lambda / 3.0, 1e-12);
          p = trial;
        } else {
          lambda *= 4.0;
          if (tiny) break;
        }
      }
      if (tiny || (!accepted && lambda > 1e12)) {
        inner_ok = tiny;
        break;
      }
    }
    if (!inner_ok) break;

    // parameter movement over this round in units of the standard errors
    linearize(p);
    const Eigen::MatrixXd jtj = jac.transpose() * jac;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(jtj);
    if (ldlt.info() != Eigen::Success) break;
    const Eigen::MatrixXd cov =
        ldlt.solve(Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(np), static_cast<Eigen::Index>(np)));
    double moved = 0.0;
    for (std::size_t k = 0; k < np; ++k) {
      const std::size_t j = free_idx[k];
      const double sigma = std::sqrt(std::max(cov(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k)), 1e-300));
      moved = std::max(moved, std::abs(p[j] - round_start[j]) / scale[j] / sigma);
    }
    if (moved < 0.01) break;
    if (round == max_rounds - 1) inner_ok = moved < 0.1;
  }

  linearize(p);
  const Eigen::MatrixXd jtj = jac.transpose() * jac;
  const Eigen::VectorXd jtr = jac.transpose() * res;
  const double rnorm = res.norm();
  double gnorm = 0.0;
  for (std::size_t k = 0; k < np && rnorm >= kExactResidual; ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    if (at_bound(free_idx[k], jtr[kk], p)) continue;
    const double denom = std::sqrt(std::max(jtj(kk, kk), 1e-300)) * std::max(rnorm, 1e-300);
    gnorm = std::max(gnorm, std::abs(jtr[kk]) / denom);
  }

  out.params = model_at(p);
  out.iterations = it;
  out.residual_norm = rnorm;
  out.reduced_chi2 = rnorm * rnorm / static_cast<double>(n - np);
  out.gradient_norm = gnorm;
  out.converged = inner_ok && gnorm < opt.gradient_tol && bounds.contains(out.params);
  out.message = out.converged ? "converged" : (!inner_ok ? "no stationary point reached" : "gradient above tolerance");

  std::array<double, kParamCount> err{};
  Eigen::LDLT<Eigen::MatrixXd> ldlt(jtj);
  if (ldlt.info() == Eigen::Success) {
    const Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(np), static_cast<Eigen::Index>(np)));
    for (std::size_t k = 0; k < np; ++k) {
      const auto kk = static_cast<Eigen::Index>(k);
      err[free_idx[k]] = std::sqrt(std::max(cov(kk, kk), 0.0)) * scale[free_idx[k]];
    }
  }
  out.param_errors = detail::from_array(err, 0.0);
  if (out.params.mass > 0.0)
    out.t_eff = out.params.mass * out.params.omega_m * out.params.omega_m * true_x_variance_numeric(out.params) /
                kBoltzmann;
  return out;
}

/// Convenience: fits from the data-driven initial guess, from `nominal` and from
/// a row of resonance frequencies across the line, and keeps the converged
/// result with the smallest residual. Near the optimal gain the in-loop line is
/// almost flat and the guess alone is unreliable.
inline FitResult fit_spectrum(const Spectrum& spec, const SquashModel& nominal, const FitOptions& opt = {}) {
  const double f0 = rad_to_hz(nominal.omega_m);
  const auto guess = initial_guess(spec, nominal, 0.5 * f0, 1.5 * f0);
  const auto bounds = FitBounds::around(nominal);
  auto clamp_into = [&](SquashModel m) {
    auto a = detail::to_array(m);
    for (std::size_t j = 0; j < kParamCount; ++j) a[j] = std::clamp(a[j], bounds.lower[j], bounds.upper[j]);
    return detail::from_array(a, m.mass);
  };
  SquashModel mixed = guess;
  mixed.g = nominal.g;
  // one band for every start so the residuals are comparable
  FitOptions o = opt;
  const double lw = rad_to_hz(nominal.gamma_m) * std::max({1.0, 1.0 + nominal.g, 1.0 + guess.g});
  const double half = std::min(0.9 * f0, 10.0 * lw);
  if (!o.band_lo) o.band_lo = f0 - half;
  if (!o.band_hi) o.band_hi = f0 + half;
  std::vector<SquashModel> starts{guess, mixed, nominal};
  // the in-loop line is nearly flat at the optimal gain, which leaves several
  // local minima along the resonance frequency; scan across the line for them
  const double step = 0.5 * rad_to_hz(nominal.gamma_m) * std::max(1.0, 1.0 + nominal.g);
  for (int k = -6; k <= 6; ++k) {
    if (k == 0) continue;
    const double fk = f0 + k * step;
    if (spec.freq.empty() || fk - 5.0 * rad_to_hz(nominal.gamma_m) < spec.freq.front() ||
        fk + 5.0 * rad_to_hz(nominal.gamma_m) > spec.freq.back())
      continue;
    SquashModel s = mixed;
    s.omega_m = hz_to_rad(fk);
    starts.push_back(s);
  }
  std::optional<FitResult> best;
  for (const auto& start : starts) {
    auto r = fit_spectrum(spec, clamp_into(start), bounds, o);
    const bool better = !best || (r.converged && !best->converged) ||
                        (r.converged == best->converged && r.residual_norm < best->residual_norm);
    if (better) best = std::move(r);
  }
  return *best;
}

struct EffectiveTemperature {
  double t_closed_form = 0.0;  // T0 (1 + G^2/A) / (1 + G) with the fitted G and A
  double t_integral = 0.0;  // integrated S_x model
  double strength = 0.0;    // A implied by the fit
  double implied_vd = 0.0;  // detected variance implied by the fitted floor and the probe's eta, C
  bool consistent = false;  // the two routes agree within 1%
};

inline EffectiveTemperature effective_temperature(const FitResult& fit, const MechanicalMode& mode,
                                                  const ProbeState& probe) {
  if (!fit.converged) throw AnalysisError("effective_temperature: fit did not converge");
  EffectiveTemperature out;
  SquashModel m = fit.params;
  if (!(m.mass > 0.0)) m.mass = mode.mass_eff;
  out.strength = m.strength();
  out.t_closed_form = m.bath_temperature() * temperature_ratio(m.g, out.strength);
  out.t_integral = m.mass * m.omega_m * m.omega_m * true_x_variance_numeric(m) / kBoltzmann;
  const double c = cooperativity(probe, mode);
  out.implied_vd = 8.0 * probe.eta_fb * thermal_occupancy(mode) * c / out.strength;
  out.consistent = std::abs(out.t_integral / out.t_closed_form - 1.0) < 0.01;
  return out;
}

/// Divides a spectrum of the simulated record y by the record kernel's power
/// response so it can be compared with the continuous-time model.
inline void compensate_record_kernel(Spectrum& s, double sample_rate) {
  for (std::size_t i = 0; i < s.freq.size(); ++i) s.psd[i] /= record_power_response(s.freq[i], sample_rate);
}

/// Synthetic one-sided spectrum of the model on a frequency grid (Hz).
inline Spectrum synthesize(const SquashModel& m, SpectrumSource src, std::span<const double> freq_hz,
                           std::size_t averages = 0) {
  Spectrum s;
  s.source = src;
  s.freq.assign(freq_hz.begin(), freq_hz.end());
  s.psd.reserve(freq_hz.size());
  for (double f : freq_hz) s.psd.push_back(m.one_sided(src, f));
  s.averages = averages;
  s.effective_averages = static_cast<double>(averages);
  s.resolution_bw = freq_hz.size() > 1 ? freq_hz[1] - freq_hz[0] : 0.0;
  return s;
}

/// Multiplies each bin by an independent Gamma(K, 1/K) variate, the statistics of
/// a K-segment averaged periodogram of Gaussian data.
template <typename Rng>
void add_periodogram_noise(Spectrum& s, std::size_t averages, Rng& rng) {
  std::gamma_distribution<double> gamma(static_cast<double>(averages), 1.0 / static_cast<double>(averages));
  for (double& v : s.psd) v *= gamma(rng);
  s.averages = averages;
  s.effective_averages = static_cast<double>(averages);
}

struct CalibrationPoint {
  double electronic_gain = 0.0;  // K
  double viscous_gain = 0.0;     // fitted G
  double error = 0.0;            // 1 sigma of G, 0 if unknown
};

struct GainCalibration {
  double slope = 0.0;          // G per unit K
  double nonlinearity = 0.0;   // rms relative deviation from the line over K != 0
  double max_deviation = 0.0;  // largest relative deviation
  bool monotone = true;
};

/// Least-squares line through the origin, G = slope K.
inline GainCalibration gain_calibration(std::span<const CalibrationPoint> sweep) {
  if (sweep.size() < 3) throw AnalysisError("gain_calibration: need at least 3 sweep points");
  if (std::none_of(sweep.begin(), sweep.end(), [](const auto& p) { return p.electronic_gain == 0.0; }))
    throw AnalysisError("gain_calibration: sweep must include K = 0");
  std::vector<CalibrationPoint> pts(sweep.begin(), sweep.end());
  std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.electronic_gain < b.electronic_gain; });
  double skg = 0.0, skk = 0.0;
  for (const auto& p : pts) {
    skg += p.electronic_gain * p.viscous_gain;
    skk += p.electronic_gain * p.electronic_gain;
  }
  GainCalibration out;
  out.slope = skg / skk;
  double ss = 0.0;
  std::size_t cnt = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (i > 0 && pts[i].viscous_gain < pts[i - 1].viscous_gain) out.monotone = false;
    if (pts[i].electronic_gain == 0.0) continue;
    const double line = out.slope * pts[i].electronic_gain;
    const double rel = (pts[i].viscous_gain - line) / line;
    ss += rel * rel;
    ++cnt;
    out.max_deviation = std::max(out.max_deviation, std::abs(rel));
  }
  out.nonlinearity = cnt ? std::sqrt(ss / static_cast<double>(cnt)) : 0.0;
  return out;
}

}  // namespace sqfb
