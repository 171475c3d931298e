#include <catch_amalgamated.hpp>

#include <random>

#include "sqfb/dsp.hpp"
#include "sqfb/simulate.hpp"

using namespace sqfb;
using Catch::Approx;

namespace {

std::vector<double> white_noise(std::size_t n, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, sigma);
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

Trajectory open_loop_run(double duration) {
  SimConfig cfg;
  cfg.mode = MechanicalMode::from_hz(1e5, 1e3, 1e-8, 295.0);
  cfg.probe.n_c = 5.1e4;
  cfg.probe.kappa = hz_to_rad(94e6);
  cfg.probe.g0 = 300.0;
  cfg.sample_rate = 1e6;
  cfg.duration = duration;
  cfg.seed = 3;
  return run(cfg);
}

}  // namespace

TEST_CASE("welch argument checks") {
  const auto v = white_noise(1000, 1.0, 1);
  CHECK_THROWS_AS(welch_psd(v, 1e3, {4096}), AnalysisError);
  CHECK_THROWS_AS(welch_psd(v, 1e3, {256, Window::hann, 1.0}), AnalysisError);
  CHECK_THROWS_AS(welch_psd(v, 0.0, {256}), AnalysisError);
}

TEST_CASE("welch bookkeeping") {
  const auto v = white_noise(1 << 16, 1.0, 2);
  const auto s = welch_psd(v, 1e4, {1024, Window::hann, 0.5});
  CHECK(s.freq.size() == 513);
  CHECK(s.bin_width() == Approx(1e4 / 1024));
  CHECK(s.averages == 127);
  CHECK(s.effective_averages > 100.0);
  CHECK(s.effective_averages < 127.0);
  CHECK(s.resolution_bw == Approx(1.5 * 1e4 / 1024).epsilon(1e-12));
  const auto r = welch_psd(v, 1e4, {1024, Window::rectangular, 0.0});
  CHECK(r.averages == 64);
  CHECK(r.effective_averages == Approx(64.0));
}

TEST_CASE("welch is deterministic") {
  const auto v = white_noise(1 << 15, 1.0, 3);
  const auto a = welch_psd(v, 1e3, {2048});
  const auto b = welch_psd(v, 1e3, {2048});
  CHECK(a.psd == b.psd);
}

TEST_CASE("welch preserves the variance of white noise") {
  for (auto win : {Window::hann, Window::rectangular}) {
    const double sigma = 2.5;
    const auto v = white_noise(1 << 20, sigma, 4);
    const auto s = welch_psd(v, 5e4, {4096, win, 0.5});
    CHECK(s.band_power(0.0, 2.5e4) == Approx(sigma * sigma).epsilon(0.01));
  }
}

TEST_CASE("welch recovers a tone's power") {
  const double fs = 1e4, f = 1234.5, a = 3.0;
  std::vector<double> v(1 << 18);
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = a * std::cos(kTwoPi * f * static_cast<double>(k) / fs);
  const auto s = welch_psd(v, fs, {4096});
  CHECK(s.band_power(f - 50.0, f + 50.0) == Approx(a * a / 2.0).epsilon(0.01));
}

TEST_CASE("lock-in steady state") {
  const double fs = 1e6, f = 1e5, bw = 1e3;
  for (double phi : {0.0, 0.7, -2.0}) {
    std::vector<double> v(200000);
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = 2.0 * std::cos(kTwoPi * f * static_cast<double>(k) / fs + phi);
    auto tr = lockin_demodulate(v, fs, f, bw);
    discard_transient(tr, 100000);
    CHECK(sample_mean(tr.X) == Approx(2.0 * std::cos(phi)).margin(1e-3));
    CHECK(sample_mean(tr.Y) == Approx(2.0 * std::sin(phi)).margin(1e-3));
    // the residual carrier at twice the reference sits at least 40 dB below the signal
    double ripple = 0.0;
    for (std::size_t k = 0; k < tr.X.size(); ++k)
      ripple = std::max({ripple, std::abs(tr.X[k] - 2.0 * std::cos(phi)), std::abs(tr.Y[k] - 2.0 * std::sin(phi))});
    CHECK(20.0 * std::log10(ripple / 2.0) < -40.0);
  }
  std::vector<double> v(100);
  CHECK_THROWS_AS(lockin_demodulate(v, fs, f, 2e5), AnalysisError);
}

TEST_CASE("shot-noise unit matches white-noise quadrature spread") {
  const double fs = 1e6, f = 1e5, bw = 2e3, sigma = 0.7;
  const auto v = white_noise(2000000, sigma, 5);
  auto tr = lockin_demodulate(v, fs, f, bw);
  discard_transient(tr, 10000);
  const double unit = shot_noise_rms(sigma * sigma, fs, bw);
  CHECK(std::sqrt(sample_variance(tr.X)) == Approx(unit).epsilon(0.03));
  CHECK(std::sqrt(sample_variance(tr.Y)) == Approx(unit).epsilon(0.03));
  normalise(tr, unit);
  CHECK(tr.scale == unit);
  CHECK(sample_variance(tr.X) == Approx(1.0).epsilon(0.06));
}

TEST_CASE("oscillator weight fraction") {
  CHECK(oscillator_weight_fraction(1e5, 1e3, 0.0, 1e9) == Approx(1.0).epsilon(1e-9));
  // reference values from adaptive quadrature of the same weight
  CHECK(oscillator_weight_fraction(1e5, 1e3, 1e5, 1e9) == Approx(0.48965354).epsilon(0.005));
  CHECK(oscillator_weight_fraction(1e5, 1e3, 9.9e4, 1.01e5) == Approx(0.70597872).epsilon(0.005));
}

TEST_CASE("equipartition from spectrum and from samples agree") {
  const auto tr = open_loop_run(2.0);
  const auto& cfg = tr.config;
  const double direct = equipartition_temperature(tr.x, cfg.mode);
  const auto s = welch_psd(tr.x, cfg.sample_rate, {16384});
  EquipartitionOptions o;
  o.linewidth_hz = 1e3;
  const double from_psd = equipartition_temperature(s, cfg.mode, 1e4, 1.9e5, o);
  CHECK(from_psd == Approx(direct).epsilon(0.02));
  CHECK_THROWS_AS(equipartition_temperature(s, cfg.mode, 9.9e4, 1.01e5, o), AnalysisError);
  CHECK_THROWS_AS(equipartition_temperature(s, cfg.mode, 2e5, 1e5), AnalysisError);
}

TEST_CASE("equipartition does not depend on segment length") {
  const auto tr = open_loop_run(2.0);
  const auto& cfg = tr.config;
  for (std::size_t seg : {4096u, 8192u, 16384u}) {
    const auto a = welch_psd(tr.x, cfg.sample_rate, {seg});
    const auto b = welch_psd(tr.x, cfg.sample_rate, {2 * seg});
    const double ta = equipartition_temperature(a, cfg.mode, 1e4, 1.9e5);
    const double tb = equipartition_temperature(b, cfg.mode, 1e4, 1.9e5);
    CHECK(std::abs(tb / ta - 1.0) <= 0.01);
  }
}

TEST_CASE("in-loop spectra are refused by equipartition") {
  const auto v = white_noise(1 << 14, 1.0, 6);
  const auto mode = MechanicalMode::from_hz(1e3, 10.0, 1e-8, 295.0);
  const auto s = welch_psd(v, 1e4, {1024, Window::hann, 0.5, SpectrumSource::in_loop_y});
  CHECK_THROWS_WITH(equipartition_temperature(s, mode, 500.0, 1500.0),
                    Catch::Matchers::ContainsSubstring("fit first"));
  EquipartitionOptions o;
  o.allow_in_loop = true;
  CHECK_NOTHROW(equipartition_temperature(s, mode, 500.0, 1500.0, o));
}

TEST_CASE("histogram integrates to one") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> bins_dist(10, 200);
  for (int trial = 0; trial < 20; ++trial) {
    PhaseSpaceTrack tr;
    tr.X = white_noise(50000, 1.0 + trial, 100 + trial);
    tr.Y = white_noise(50000, 1.0, 200 + trial);
    tr.lpf_bandwidth = 1e3;
    for (std::size_t k = 0; k < tr.X.size(); ++k) tr.t.push_back(static_cast<double>(k) * 1e-3);
    const auto bins = static_cast<std::size_t>(bins_dist(rng));
    const auto h = marginal_histogram(tr, Axis::X, bins);
    REQUIRE(h.centers.size() == bins);
    double total = 0.0, gauss = 0.0;
    for (std::size_t i = 0; i < bins; ++i) {
      total += h.density[i] * h.bin_width;
      gauss += h.gaussian[i] * h.bin_width;
    }
    CHECK(total == Approx(1.0).epsilon(1e-12));
    CHECK(gauss == Approx(1.0).epsilon(1e-4));
    CHECK(h.chi2_per_bin < 3.0);
  }
}

TEST_CASE("histogram refuses short or degenerate tracks") {
  PhaseSpaceTrack tr;
  tr.X.assign(100, 1.0);
  tr.Y.assign(100, 1.0);
  for (int k = 0; k < 100; ++k) tr.t.push_back(k * 1e-3);
  tr.lpf_bandwidth = 1e3;
  CHECK_THROWS_WITH(marginal_histogram(tr, Axis::X), Catch::Matchers::ContainsSubstring("effective samples"));
  CHECK_THROWS_WITH(marginal_histogram(tr, Axis::X, 60, 0.0), Catch::Matchers::ContainsSubstring("zero-variance"));
}
