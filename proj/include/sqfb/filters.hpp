#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <cstddef>

#include "sqfb/units.hpp"

namespace sqfb {

/// Second-order bandpass section (bilinear transform, unity gain at the centre).
class BandpassBiquad {
 public:
  BandpassBiquad() = default;

  BandpassBiquad(double center_hz, double bandwidth_hz, double sample_rate) {
    if (!(bandwidth_hz > 0.0 && bandwidth_hz < center_hz))
      throw ConfigError("bandpass bandwidth must be positive and below the centre frequency");
    if (!(center_hz < 0.5 * sample_rate)) throw ConfigError("bandpass centre must lie below Nyquist");
    const double w0 = kTwoPi * center_hz / sample_rate;
    const double alpha = std::sin(w0) * bandwidth_hz / (2.0 * center_hz);
    const double a0 = 1.0 + alpha;
    b0_ = alpha / a0;
    b2_ = -alpha / a0;
    a1_ = -2.0 * std::cos(w0) / a0;
    a2_ = (1.0 - alpha) / a0;
  }

  double process(double in) {
    // transposed direct form II
    const double out = b0_ * in + s1_;
    s1_ = -a1_ * out + s2_;
    s2_ = b2_ * in - a2_ * out;
    return out;
  }

  void reset() { s1_ = s2_ = 0.0; }

  /// Frequency response at digital angular frequency w (rad/sample).
  std::complex<double> response(double w) const {
    const std::complex<double> z1 = std::polar(1.0, -w);
    const std::complex<double> z2 = z1 * z1;
    return (b0_ + b2_ * z2) / (1.0 + a1_ * z1 + a2_ * z2);
  }

 private:
  double b0_ = 1.0, b2_ = 0.0, a1_ = 0.0, a2_ = 0.0;
  double s1_ = 0.0, s2_ = 0.0;
};

/// Cascade of four identical one-pole low-pass sections. `bandwidth_hz` is the
/// -3 dB point of the whole cascade, not of a single section.
class CascadedLowpass {
 public:
  static constexpr int kOrder = 4;

  CascadedLowpass() = default;

  CascadedLowpass(double bandwidth_hz, double sample_rate) {
    // each section sits at bw / sqrt(2^(1/n) - 1) so the cascade is -3 dB at bw
    const double section_hz = bandwidth_hz / std::sqrt(std::pow(2.0, 1.0 / kOrder) - 1.0);
    alpha_ = 1.0 - std::exp(-kTwoPi * section_hz / sample_rate);
  }

  double process(double in) {
    double v = in;
    for (auto& s : state_) {
      s += alpha_ * (v - s);
      v = s;
    }
    return v;
  }

  std::complex<double> response(double w) const {
    const std::complex<double> z1 = std::polar(1.0, -w);
    return std::pow(alpha_ / (1.0 - (1.0 - alpha_) * z1), kOrder);
  }

  /// Sum of the squared impulse response (noise gain for white input).
  double noise_gain() const {
    double sum = 0.0;
    CascadedLowpass probe = *this;
    probe.state_.fill(0.0);
    double h = probe.process(1.0);
    for (std::size_t i = 0; i < 1'000'000; ++i) {
      sum += h * h;
      if (i > 16 && h * h < 1e-18 * sum) break;
      h = probe.process(0.0);
    }
    return sum;
  }

 private:
  double alpha_ = 1.0;
  std::array<double, kOrder> state_{};
};

}  // namespace sqfb
