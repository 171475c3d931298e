#pragma once

// Time-domain Monte Carlo of the in-loop experiment.
//
// The oscillator obeys m x'' + m Gamma x' + m Omega^2 x = F_th + F_fb with
// white thermal force <F_th(t) F_th(t')> = 2 m Gamma k_B T0 delta(t - t').
// The detector sees y = x + n with white imprecision <n n'> = S_imp delta.
// Record samples are y weighted by a triangular kernel two sample periods wide
// (a boxcar average applied twice). A single boxcar would fold the white
// imprecision above Nyquist back onto the resonance with weight
// 1 - sinc^2(Omega dt / 2), which fills in the squashing dip; the triangle
// suppresses that floor to ~sinc^4 of the alias frequencies.
//
// Internally time is measured in units of 1/Omega and position in units of a
// reference scale x0 (thermal amplitude), which keeps the matrix exponentials
// well conditioned. The state carried between samples is (x, u); the
// accumulators J = int (x + n) and L = int J over the step form the record.
//
//   off / realistic_chain:  x' = u,             u' = -x - g u + f_th + f_fb
//   ideal_viscous:          x' = u - g G n,     u' = -x - g (1+G) u + g (1+G) g G n + f_th
//   both:                   J' = x + n,         L' = J
//
// where g = Gamma/Omega. The ideal_viscous form is the continuous cold-damping
// loop F_fb = -m Gamma G (x' + n') rewritten with u = x' + Gamma G n, which
// removes the derivative of white noise from the equations.

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <complex>
#include <cstdint>
#include <deque>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sqfb/filters.hpp"
#include "sqfb/model.hpp"
#include "sqfb/units.hpp"

namespace sqfb {

enum class FeedbackMode { off, ideal_viscous, realistic_chain };
enum class Integrator { exact, small_step };

struct FeedbackConfig {
  FeedbackMode mode = FeedbackMode::off;
  /// Viscous gain G (ideal_viscous) or electronic gain K in N/m (realistic_chain).
  double gain = 0.0;
  double bandpass_center_hz = 0.0;
  double bandpass_bandwidth_hz = 0.0;
  double delay = 0.0;  // s, rounded to the sample grid
  int sign = -1;

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (mode == FeedbackMode::ideal_viscous && !(gain >= 0.0))
      out.emplace_back("feedback.gain must be >= 0 for ideal_viscous");
    if (mode == FeedbackMode::realistic_chain) {
      if (!(delay >= 0.0)) out.emplace_back("feedback.delay must be >= 0");
      if (!(bandpass_center_hz > 0.0)) out.emplace_back("feedback.bandpass_center must be > 0");
      if (!(bandpass_bandwidth_hz > 0.0 && bandpass_bandwidth_hz < bandpass_center_hz))
        out.emplace_back("feedback.bandpass_bandwidth must lie in (0, bandpass_center)");
      if (sign != 1 && sign != -1) out.emplace_back("feedback.sign must be +1 or -1");
    }
    return out;
  }
};

struct SimConfig {
  MechanicalMode mode;
  ProbeState probe;
  FeedbackConfig feedback;
  double sample_rate = 0.0;  // Hz
  double duration = 0.0;     // s, recorded after burn-in
  std::uint64_t seed = 0;
  double burn_in = -1.0;     // s; negative selects 10 amplitude relaxation times
  Integrator integrator = Integrator::exact;
  int substeps = 16;         // small_step only
  bool imprecision_noise = true;
  bool thermal_start = true;  // draw the initial state from the bath distribution

  double effective_burn_in() const { return burn_in >= 0.0 ? burn_in : 20.0 / mode.gamma_m; }

  std::size_t sample_count() const {
    return static_cast<std::size_t>(std::llround(duration * sample_rate));
  }

  std::size_t delay_samples() const {
    if (feedback.mode != FeedbackMode::realistic_chain) return 0;
    return static_cast<std::size_t>(std::llround(feedback.delay * sample_rate));
  }

  std::vector<std::string> violations() const {
    auto out = mode.violations();
    for (auto& v : probe.violations()) out.push_back(std::move(v));
    for (auto& v : feedback.violations()) out.push_back(std::move(v));
    if (mode.omega_m > 0.0 && !(sample_rate >= 10.0 * rad_to_hz(mode.omega_m)))
      out.emplace_back("sim.sample_rate must be at least 10 f_m");
    if (!(duration > 0.0)) out.emplace_back("sim.duration must be > 0");
    if (mode.gamma_m > 0.0 && duration > 0.0 && duration < 20.0 / mode.gamma_m)
      out.emplace_back("sim.duration must cover at least 20 / gamma_m");
    if (integrator == Integrator::small_step && substeps < 1) out.emplace_back("sim.substeps must be >= 1");
    if (feedback.mode == FeedbackMode::realistic_chain && sample_rate > 0.0 &&
        !(feedback.bandpass_center_hz < 0.5 * sample_rate))
      out.emplace_back("feedback.bandpass_center must lie below Nyquist");
    return out;
  }
};

struct Sample {
  double t = 0.0;
  double x = 0.0;
  double v = 0.0;
  double y = 0.0;
  double f_fb = 0.0;
};

struct Trajectory {
  std::vector<double> t, x, v, y, f_fb;
  SimConfig config;
  std::size_t delay_samples = 0;

  std::size_t size() const { return t.size(); }
};

/// Imprecision PSD (double-sided, angular convention) that makes the ideal loop
/// reproduce the closed-form cooling law: S_imp = V_d x_zpf^2 / (2 eta C Gamma_m) = x_zpf^2 / (4 eta mu).
inline double imprecision_psd(const MechanicalMode& mode, const ProbeState& probe) {
  const double c = cooperativity(probe, mode);
  if (!(c > 0.0)) throw NoTransductionError();
  const double xz = mode.x_zpf();
  return detected_variance(probe) * xz * xz / (2.0 * probe.eta_fb * c * mode.gamma_m);
}

/// Thermal force PSD (double-sided, angular convention): 2 m Gamma k_B T0.
inline double thermal_force_psd(const MechanicalMode& mode) {
  return 2.0 * mode.mass_eff * mode.gamma_m * kBoltzmann * mode.t_bath;
}

/// Power response of the triangular record kernel to white input, aliases
/// included: (2 + cos(2 pi f / fs)) / 3. Dividing a record spectrum by this
/// restores the continuous-time S_y near the resonance.
inline double record_power_response(double f_hz, double sample_rate) {
  return (2.0 + std::cos(kTwoPi * f_hz / sample_rate)) / 3.0;
}

/// Cold-damping force -m Gamma G v for a velocity estimate v.
inline double ideal_viscous_force(const MechanicalMode& mode, double velocity_estimate, double gain) {
  return -mode.mass_eff * mode.gamma_m * gain * velocity_estimate;
}

/// Bandpass, delay line and gain: F_k = sign K BP[y]_{k - d}. The force is held
/// over the following sample period.
class RealisticChain {
 public:
  RealisticChain(const FeedbackConfig& fb, double sample_rate)
      : filter_(fb.bandpass_center_hz, fb.bandpass_bandwidth_hz, sample_rate),
        delay_(static_cast<std::size_t>(std::llround(fb.delay * sample_rate)), 0.0),
        gain_(fb.gain * fb.sign) {}

  double force(double y) {
    double z = filter_.process(y);
    if (!delay_.empty()) {
      delay_.push_back(z);
      z = delay_.front();
      delay_.pop_front();
    }
    return gain_ * z;
  }

 private:
  BandpassBiquad filter_;
  std::deque<double> delay_;
  double gain_;
};

/// Complex open-loop factor L(w) with F = L(w) x for the realistic chain,
/// including the triangular record kernel (sinc^2, one sample of lag) and the
/// zero-order hold (sinc, half a sample).
inline std::complex<double> chain_transfer(const FeedbackConfig& fb, double sample_rate, double omega) {
  const BandpassBiquad bp(fb.bandpass_center_hz, fb.bandpass_bandwidth_hz, sample_rate);
  const double w = omega / sample_rate;
  const double d = std::llround(fb.delay * sample_rate);
  const double sinc = std::abs(w) > 1e-12 ? std::sin(0.5 * w) / (0.5 * w) : 1.0;
  return static_cast<double>(fb.sign) * fb.gain * bp.response(w) * sinc * sinc * sinc *
         std::polar(1.0, -w * (d + 1.5));
}

/// Linear-response viscous gain of the realistic chain at the mechanical resonance.
inline double chain_viscous_gain(const FeedbackConfig& fb, const MechanicalMode& mode, double sample_rate) {
  const auto l = chain_transfer(fb, sample_rate, mode.omega_m);
  // F = L x = -m Gamma G i Omega x  =>  G = -Im(L) / (m Gamma Omega)
  return -l.imag() / (mode.mass_eff * mode.gamma_m * mode.omega_m);
}

/// Delay (s, on the sample grid) that puts the chain's force in phase with -x'.
inline double viscous_delay(const FeedbackConfig& fb, const MechanicalMode& mode, double sample_rate) {
  FeedbackConfig probe = fb;
  probe.delay = 0.0;
  probe.gain = 1.0;
  const auto l0 = chain_transfer(probe, sample_rate, mode.omega_m);
  const double w = mode.omega_m / sample_rate;
  // want arg(L) = -pi/2 (L proportional to -i); each extra sample subtracts w
  double lag = std::arg(l0) + std::numbers::pi / 2.0;
  lag = std::fmod(lag, kTwoPi);
  if (lag < 0.0) lag += kTwoPi;
  return std::round(lag / w) / sample_rate;
}

namespace detail {

using Mat4 = Eigen::Matrix4d;
using Vec4 = Eigen::Vector4d;

/// Square root of a symmetric positive semi-definite matrix (columns scaled eigenvectors).
inline Mat4 psd_sqrt(const Mat4& q) {
  Eigen::SelfAdjointEigenSolver<Mat4> es(0.5 * (q + q.transpose()));
  Vec4 ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal();
}

/// Process covariance of dx = A x dt + b dW over dt with E[dW^2] = s dt (Van Loan).
inline Mat4 van_loan_covariance(const Mat4& a, const Vec4& b, double s, double dt) {
  Eigen::Matrix<double, 8, 8> m = Eigen::Matrix<double, 8, 8>::Zero();
  m.topLeftCorner<4, 4>() = -a * dt;
  m.topRightCorner<4, 4>() = (b * b.transpose()) * (s * dt);
  m.bottomRightCorner<4, 4>() = a.transpose() * dt;
  const Eigen::Matrix<double, 8, 8> e = m.exp();
  const Mat4 phi_t = e.bottomRightCorner<4, 4>();
  const Mat4 q = phi_t.transpose() * e.topRightCorner<4, 4>();
  return 0.5 * (q + q.transpose());
}

/// Dimensionless description of one sampling interval.
struct Discretization {
  double dt = 0.0;         // Omega * (1 / sample_rate)
  double x0 = 1.0;         // m
  double sigma_f = 0.0;    // thermal drive intensity
  double sigma_n = 0.0;    // imprecision intensity
  double loop_gamma = 0.0; // Gamma (1 + G) / Omega for ideal_viscous, Gamma / Omega otherwise
  Mat4 a = Mat4::Zero();
  Vec4 b_force = Vec4::Zero();
  Vec4 b_noise = Vec4::Zero();
  // exact-step quantities
  Mat4 phi = Mat4::Identity();
  Vec4 force_in = Vec4::Zero();
  Mat4 root_thermal = Mat4::Zero();
  Mat4 root_noise = Mat4::Zero();
};

inline Discretization discretize(const SimConfig& cfg) {
  const auto& mode = cfg.mode;
  Discretization d;
  d.dt = mode.omega_m / cfg.sample_rate;
  d.x0 = std::sqrt(mode.x_zpf() * mode.x_zpf() * (2.0 * thermal_occupancy(mode) + 1.0));
  const double gam = mode.gamma_m / mode.omega_m;
  const double x0sq = d.x0 * d.x0;
  const double m = mode.mass_eff;
  const double w = mode.omega_m;
  d.sigma_f = thermal_force_psd(mode) / (m * m * w * w * w * x0sq);
  d.sigma_n = cfg.imprecision_noise ? imprecision_psd(mode, cfg.probe) * w / x0sq : 0.0;

  const double g = cfg.feedback.mode == FeedbackMode::ideal_viscous ? cfg.feedback.gain : 0.0;
  d.loop_gamma = gam * (1.0 + g);
  d.a << 0.0, 1.0, 0.0, 0.0,
         -1.0, -d.loop_gamma, 0.0, 0.0,
         1.0, 0.0, 0.0, 0.0,
         0.0, 0.0, 1.0, 0.0;
  d.b_force << 0.0, 1.0, 0.0, 0.0;
  d.b_noise << -gam * g, d.loop_gamma * gam * g, 1.0, 0.0;

  if (cfg.integrator == Integrator::exact) {
    d.phi = (d.a * d.dt).exp();
    Eigen::Matrix<double, 5, 5> aug = Eigen::Matrix<double, 5, 5>::Zero();
    aug.topLeftCorner<4, 4>() = d.a * d.dt;
    aug.topRightCorner<4, 1>() = d.b_force * d.dt;
    d.force_in = aug.exp().topRightCorner<4, 1>();
    d.root_thermal = psd_sqrt(van_loan_covariance(d.a, d.b_force, d.sigma_f, d.dt));
    d.root_noise = psd_sqrt(van_loan_covariance(d.a, d.b_noise, d.sigma_n, d.dt));
  }
  return d;
}

}  // namespace detail

/// Runs the simulation and hands every recorded sample to `sink(const Sample&)`.
template <typename Sink>
std::size_t run_streaming(const SimConfig& cfg, Sink&& sink) {
  {
    auto v = cfg.violations();
    if (!v.empty()) throw ConfigError(v.front());
  }
  const auto d = detail::discretize(cfg);
  const auto& mode = cfg.mode;
  const double dt_s = 1.0 / cfg.sample_rate;
  const double force_scale = mode.mass_eff * mode.omega_m * mode.omega_m * d.x0;  // f~ -> N
  const double limit = 1e6 * std::sqrt(mode.thermal_variance()) / d.x0;

  std::seed_seq thermal_seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 1u};
  std::seed_seq noise_seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 2u};
  std::mt19937_64 rng_thermal(thermal_seq);
  std::mt19937_64 rng_noise(noise_seq);
  std::normal_distribution<double> normal_thermal(0.0, 1.0);
  std::normal_distribution<double> normal_noise(0.0, 1.0);

  double x = 0.0, u = 0.0;
  if (cfg.thermal_start && mode.t_bath > 0.0) {
    const double s = std::sqrt(mode.thermal_variance()) / d.x0;
    x = s * normal_thermal(rng_thermal);
    u = s * normal_thermal(rng_thermal);
  }

  const bool realistic = cfg.feedback.mode == FeedbackMode::realistic_chain;
  const bool ideal = cfg.feedback.mode == FeedbackMode::ideal_viscous;
  std::optional<RealisticChain> chain;
  if (realistic) chain.emplace(cfg.feedback, cfg.sample_rate);

  const std::size_t burn = static_cast<std::size_t>(std::llround(cfg.effective_burn_in() * cfg.sample_rate));
  const std::size_t total = burn + cfg.sample_count();

  double f = 0.0;       // held force, dimensionless
  double y_prev = 0.0;  // previous record sample, metres
  const int sub = cfg.substeps;
  const double h = d.dt / sub;
  const double kick_f = std::sqrt(d.sigma_f / h);
  const double kick_n = std::sqrt(d.sigma_n / h);
  const double gam = mode.gamma_m / mode.omega_m;
  const double g_ideal = ideal ? cfg.feedback.gain : 0.0;

  double carry = 0.0;  // int_{previous step} (t - t_start) y dt, dimensionless
  const double dt2 = d.dt * d.dt;
  for (std::size_t k = 0; k < total; ++k) {
    double jj = 0.0, ll = 0.0;
    if (cfg.integrator == Integrator::exact) {
      detail::Vec4 xi, zeta;
      for (int i = 0; i < 4; ++i) xi[i] = normal_thermal(rng_thermal);
      for (int i = 0; i < 4; ++i) zeta[i] = normal_noise(rng_noise);
      const detail::Vec4 s = d.phi.col(0) * x + d.phi.col(1) * u + d.force_in * f +
                             d.root_thermal * xi + d.root_noise * zeta;
      x = s[0];
      u = s[1];
      jj = s[2];
      ll = s[3];
    } else {
      for (int i = 0; i < sub; ++i) {
        const double ff = kick_f * normal_thermal(rng_thermal);
        const double nn = kick_n * normal_noise(rng_noise);
        u += h * (-x - d.loop_gamma * u + d.loop_gamma * gam * g_ideal * nn + ff + f);
        x += h * (u - gam * g_ideal * nn);
        const double j_prev = jj;
        jj += h * (x + nn);
        ll += 0.5 * h * (j_prev + jj);
      }
    }
    if (!(std::abs(x) < limit))
      throw InstabilityError("loop unstable: displacement exceeded 1e6 thermal amplitudes");

    // rising half of the triangle from the previous step, falling half from this one
    const double y = (carry + ll) / dt2 * d.x0;
    carry = d.dt * jj - ll;
    double f_out = 0.0;
    if (realistic) {
      const double force = chain->force(y);
      f = force / force_scale;
      f_out = force;
    } else if (ideal) {
      f_out = ideal_viscous_force(mode, (y - y_prev) / dt_s, cfg.feedback.gain);
    }
    y_prev = y;

    if (k >= burn) {
      const std::size_t idx = k - burn;
      // for ideal_viscous this is u = x' + Gamma G n, the velocity without the white-noise kick
      const double v_out = u * d.x0 * mode.omega_m;
      sink(Sample{static_cast<double>(idx) * dt_s, x * d.x0, v_out, y, f_out});
    }
  }
  return cfg.sample_count();
}

inline Trajectory run(const SimConfig& cfg) {
  Trajectory tr;
  const std::size_t n = cfg.sample_count();
  tr.t.reserve(n);
  tr.x.reserve(n);
  tr.v.reserve(n);
  tr.y.reserve(n);
  tr.f_fb.reserve(n);
  run_streaming(cfg, [&](const Sample& s) {
    tr.t.push_back(s.t);
    tr.x.push_back(s.x);
    tr.v.push_back(s.v);
    tr.y.push_back(s.y);
    tr.f_fb.push_back(s.f_fb);
  });
  tr.config = cfg;
  tr.delay_samples = cfg.delay_samples();
  tr.config.feedback.delay = static_cast<double>(tr.delay_samples) / cfg.sample_rate;
  if (cfg.feedback.mode != FeedbackMode::realistic_chain) tr.config.feedback.delay = cfg.feedback.delay;
  return tr;
}

/// Running sums for equipartition statistics without storing the trajectory.
struct MomentAccumulator {
  std::size_t batch_size = 1;
  std::size_t count = 0;
  double sum_sq = 0.0;
  double batch_sum = 0.0;
  std::size_t batch_fill = 0;
  std::vector<double> batch_means;

  explicit MomentAccumulator(std::size_t batch = 1) : batch_size(batch) {}

  void add(double value) {
    const double sq = value * value;
    sum_sq += sq;
    batch_sum += sq;
    ++count;
    if (++batch_fill == batch_size) {
      batch_means.push_back(batch_sum / static_cast<double>(batch_size));
      batch_sum = 0.0;
      batch_fill = 0;
    }
  }

  double mean_square() const { return sum_sq / static_cast<double>(count); }

  /// Standard error of mean_square from the spread of batch means.
  double standard_error() const {
    const std::size_t nb = batch_means.size();
    if (nb < 2) return std::numeric_limits<double>::infinity();
    double mean = 0.0;
    for (double b : batch_means) mean += b;
    mean /= static_cast<double>(nb);
    double var = 0.0;
    for (double b : batch_means) var += (b - mean) * (b - mean);
    var /= static_cast<double>(nb - 1);
    return std::sqrt(var / static_cast<double>(nb));
  }
};

}  // namespace sqfb
