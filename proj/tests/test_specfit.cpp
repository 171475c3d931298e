#include <catch_amalgamated.hpp>

#include <random>

#include "sqfb/specfit.hpp"

using namespace sqfb;
using Catch::Approx;

namespace {

// desk-scale line with strength a and gain g
SquashModel desk_model(double g, double a = 7.76) {
  const auto mode = MechanicalMode::from_hz(1e5, 1e3, 1e-8, 295.0);
  SquashModel m;
  m.omega_m = mode.omega_m;
  m.gamma_m = mode.gamma_m;
  m.g = g;
  m.mass = mode.mass_eff;
  m.s_f = thermal_force_psd(mode) / (m.mass * m.mass);
  m.s_imp = m.s_f / (m.omega_m * m.omega_m * m.gamma_m * m.gamma_m * a);
  return m;
}

std::vector<double> grid(double lo, double hi, double step) {
  std::vector<double> f;
  for (double x = lo; x <= hi; x += step) f.push_back(x);
  return f;
}

}  // namespace

TEST_CASE("squashing model at resonance") {
  for (double g : {0.0, 0.5, 2.0, 30.0}) {
    const auto m = desk_model(g);
    const double a = m.strength();
    CHECK(a == Approx(7.76).epsilon(1e-12));
    CHECK(m.in_loop(m.omega_m) == Approx(m.s_imp * (1.0 + a) / ((1.0 + g) * (1.0 + g))).epsilon(1e-12));
    CHECK(m.true_x(m.omega_m) == Approx(m.s_imp * (a + g * g) / ((1.0 + g) * (1.0 + g))).epsilon(1e-12));
  }
  CHECK(desk_model(0.0).bath_temperature() == Approx(295.0).epsilon(1e-12));
}

TEST_CASE("closed-form and integrated displacement variance agree") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> log_g(-2.0, 2.0), log_a(-1.0, 4.0);
  for (int i = 0; i < 50; ++i) {
    const auto m = desk_model(std::pow(10.0, log_g(rng)), std::pow(10.0, log_a(rng)));
    REQUIRE(true_x_variance_numeric(m) == Approx(m.true_x_variance_closed_form()).epsilon(1e-6));
    // and the variance encodes the closed-form temperature
    const double t = m.mass * m.omega_m * m.omega_m * m.true_x_variance_closed_form() / kBoltzmann;
    REQUIRE(t == Approx(295.0 * temperature_ratio(m.g, m.strength())).epsilon(1e-6));
  }
}

TEST_CASE("analytic model gradient") {
  for (auto src : {SpectrumSource::in_loop_y, SpectrumSource::true_x}) {
    const auto m = desk_model(3.0);
    for (double rel : {0.97, 1.0, 1.004, 1.05}) {
      const double w = rel * m.omega_m;
      std::array<double, kParamCount> grad{};
      const double v = detail::model_with_gradient(m, src, w, grad);
      CHECK(v == Approx(m.evaluate(src, w)).epsilon(1e-14));
      auto a = detail::to_array(m);
      for (std::size_t j = 0; j < kParamCount; ++j) {
        const double h = 1e-6 * std::max(std::abs(a[j]), 1e-3);
        auto up = a, dn = a;
        up[j] += h;
        dn[j] -= h;
        const double fd = (detail::from_array(up, m.mass).evaluate(src, w) -
                           detail::from_array(dn, m.mass).evaluate(src, w)) / (2.0 * h);
        CHECK(grad[j] == Approx(fd).epsilon(1e-5).margin(1e-7 * std::abs(v / a[j])));
      }
    }
  }
}

TEST_CASE("noiseless spectra are fitted exactly") {
  const auto f = grid(5e4, 1.5e5, 20.0);
  for (double g : {0.5, 1.9, 10.0, 30.0}) {
    const auto truth = desk_model(g);
    const auto s = synthesize(truth, SpectrumSource::in_loop_y, f, 400);
    auto start = truth;
    start.omega_m *= 1.002;
    start.g *= 1.2;
    start.s_imp *= 0.8;
    const auto r = fit_spectrum(s, start, FitBounds::around(truth));
    INFO("G = " << g << ": " << r.message);
    REQUIRE(r.converged);
    CHECK(r.params.omega_m == Approx(truth.omega_m).epsilon(1e-8));
    CHECK(r.params.g == Approx(g).epsilon(1e-6));
    CHECK(r.params.s_imp == Approx(truth.s_imp).epsilon(1e-6));
    CHECK(r.params.gamma_m == truth.gamma_m);
    CHECK(r.params.s_f == truth.s_f);
    CHECK(r.residual_norm < 1e-4);
    CHECK(r.t_eff == Approx(295.0 * temperature_ratio(g, 7.76)).epsilon(1e-6));
  }
}

TEST_CASE("the displacement spectrum can be fitted too") {
  const auto truth = desk_model(4.0);
  const auto s = synthesize(truth, SpectrumSource::true_x, grid(5e4, 1.5e5, 20.0), 400);
  auto start = truth;
  start.g = 3.0;
  FitOptions o;
  o.free = {true, false, true, false, false};
  const auto r = fit_spectrum(s, start, FitBounds::around(truth), o);
  REQUIRE(r.converged);
  CHECK(r.params.g == Approx(4.0).epsilon(1e-6));
  CHECK(r.source == SpectrumSource::true_x);
}

TEST_CASE("convenience fit from the nominal model") {
  std::mt19937_64 rng(12);
  const auto f = grid(5e4, 1.5e5, 20.0);
  for (double g : {0.5, 2.0, 8.0}) {
    const auto truth = desk_model(g);
    auto s = synthesize(truth, SpectrumSource::in_loop_y, f);
    add_periodogram_noise(s, 500, rng);
    auto nominal = truth;
    nominal.g = 1.0;
    nominal.s_imp *= 1.3;
    const auto r = fit_spectrum(s, nominal);
    REQUIRE(r.converged);
    CHECK(std::abs(r.params.g - g) < 4.0 * r.param_errors.g);
    CHECK(r.reduced_chi2 == Approx(1.0).margin(0.2));
    const auto eff = effective_temperature(r, MechanicalMode::from_hz(1e5, 1e3, 1e-8, 295.0), ProbeState{});
    CHECK(eff.consistent);
    CHECK(eff.t_closed_form == Approx(eff.t_integral).epsilon(1e-6));
  }
}

TEST_CASE("error bars cover the truth at the nominal rate") {
  std::mt19937_64 rng(13);
  const auto f = grid(7e4, 1.3e5, 50.0);
  const auto truth = desk_model(3.0);
  const int reps = 200;
  int in_g = 0, in_s = 0, in_w = 0;
  for (int i = 0; i < reps; ++i) {
    auto s = synthesize(truth, SpectrumSource::in_loop_y, f);
    add_periodogram_noise(s, 300, rng);
    const auto r = fit_spectrum(s, truth, FitBounds::around(truth));
    REQUIRE(r.converged);
    in_g += std::abs(r.params.g - truth.g) < r.param_errors.g;
    in_s += std::abs(r.params.s_imp - truth.s_imp) < r.param_errors.s_imp;
    in_w += std::abs(r.params.omega_m - truth.omega_m) < r.param_errors.omega_m;
  }
  // 1 sigma coverage of 68.3%; the binomial spread over 200 draws is 3.3%
  for (int c : {in_g, in_s, in_w}) {
    INFO("covered " << c << " of " << reps);
    CHECK(std::abs(c / static_cast<double>(reps) - 0.683) < 0.1);
  }
}

TEST_CASE("in-loop dip below the floor exactly beyond the optimal gain") {
  for (double a : {0.1, 1.0, 7.76, 100.0, 1e4}) {
    const double g_opt = optimal_gain_for_strength(a);
    for (double rel : {0.2, 0.5, 0.9, 0.99, 1.01, 1.1, 2.0, 10.0}) {
      const auto m = desk_model(rel * g_opt, a);
      REQUIRE((m.in_loop(m.omega_m) < m.s_imp) == (rel > 1.0));
    }
  }
}

TEST_CASE("fit input checks") {
  const auto truth = desk_model(2.0);
  auto s = synthesize(truth, SpectrumSource::in_loop_y, grid(5e4, 1.5e5, 20.0), 100);
  const auto bounds = FitBounds::around(truth);
  auto outside = truth;
  outside.g = -5.0;
  CHECK_THROWS_AS(fit_spectrum(s, outside, bounds), AnalysisError);
  auto noav = s;
  noav.averages = 0;
  noav.effective_averages = 0.0;
  CHECK_THROWS_WITH(fit_spectrum(noav, truth, bounds), Catch::Matchers::ContainsSubstring("averaging"));
  auto bad = s;
  bad.psd[10] = -1.0;
  CHECK_THROWS_AS(fit_spectrum(bad, truth, bounds), AnalysisError);
  auto narrow = synthesize(truth, SpectrumSource::in_loop_y, grid(9.9e4, 1.01e5, 10.0), 100);
  CHECK_THROWS_WITH(fit_spectrum(narrow, truth, bounds), Catch::Matchers::ContainsSubstring("10 linewidths"));
  FitOptions none;
  none.free = {false, false, false, false, false};
  CHECK_THROWS_AS(fit_spectrum(s, truth, bounds, none), AnalysisError);
  FitResult failed;
  CHECK_THROWS_AS(effective_temperature(failed, MechanicalMode::from_hz(1e5, 1e3, 1e-8, 295.0), ProbeState{}),
                  AnalysisError);
}

TEST_CASE("record kernel compensation") {
  Spectrum s;
  s.freq = {0.0, 2.5e5, 5e5};
  s.psd = {1.0, 1.0, 1.0};
  compensate_record_kernel(s, 1e6);
  CHECK(s.psd[0] == Approx(1.0));
  CHECK(s.psd[1] == Approx(1.5));
  CHECK(s.psd[2] == Approx(3.0));
}

TEST_CASE("periodogram noise statistics") {
  std::mt19937_64 rng(14);
  auto s = synthesize(desk_model(1.0), SpectrumSource::in_loop_y, grid(1.0, 1e5, 1.0));
  const auto clean = s.psd;
  add_periodogram_noise(s, 50, rng);
  CHECK(s.averages == 50);
  double mean = 0.0, var = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) mean += s.psd[i] / clean[i];
  mean /= static_cast<double>(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) var += std::pow(s.psd[i] / clean[i] - mean, 2);
  var /= static_cast<double>(clean.size() - 1);
  CHECK(mean == Approx(1.0).epsilon(0.002));
  CHECK(var == Approx(1.0 / 50.0).epsilon(0.03));
}

TEST_CASE("gain calibration") {
  std::vector<CalibrationPoint> line{{0.0, 0.0}, {5.0, 0.125}, {10.0, 0.25}, {20.0, 0.5}};
  const auto c = gain_calibration(line);
  CHECK(c.slope == Approx(0.025).epsilon(1e-12));
  CHECK(c.nonlinearity == Approx(0.0).margin(1e-12));
  CHECK(c.monotone);

  std::vector<CalibrationPoint> bent{{0.0, 0.0}, {10.0, 0.3}, {5.0, 0.1}, {20.0, 0.45}};
  const auto b = gain_calibration(bent);
  const double slope = (10.0 * 0.3 + 5.0 * 0.1 + 20.0 * 0.45) / (100.0 + 25.0 + 400.0);
  CHECK(b.slope == Approx(slope).epsilon(1e-12));
  CHECK(b.nonlinearity > 0.0);
  CHECK(b.max_deviation == Approx(std::abs(0.3 / (10.0 * slope) - 1.0)).epsilon(1e-12));
  CHECK(b.monotone);

  std::vector<CalibrationPoint> back{{0.0, 0.0}, {5.0, 0.2}, {10.0, 0.1}};
  CHECK_FALSE(gain_calibration(back).monotone);
  std::vector<CalibrationPoint> two{{0.0, 0.0}, {5.0, 0.2}};
  CHECK_THROWS_AS(gain_calibration(two), AnalysisError);
  std::vector<CalibrationPoint> no_zero{{1.0, 0.0}, {5.0, 0.2}, {7.0, 0.3}};
  CHECK_THROWS_WITH(gain_calibration(no_zero), Catch::Matchers::ContainsSubstring("K = 0"));
}
