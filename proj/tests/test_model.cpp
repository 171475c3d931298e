#include <catch_amalgamated.hpp>

#include <random>

#include "sqfb/model.hpp"

using namespace sqfb;
using Catch::Approx;

namespace {

MechanicalMode membrane_mode() { return MechanicalMode::from_hz(6.13e6, 13e3, 1e-8, 295.0); }

ProbeState coherent_probe(double eta_fb = 0.23) {
  ProbeState p;
  p.n_c = 5.1e4;
  p.kappa = hz_to_rad(94e6);
  p.eta_fb = eta_fb;
  return p;
}

// probe whose coherent version has cooling strength `a` on `mode`
ProbeState with_coherent_strength(const MechanicalMode& mode, ProbeState p, double a) {
  const double c = a * 0.5 / (8.0 * p.eta_fb * thermal_occupancy(mode));
  p.g0 = coupling_for_cooperativity(c, p.n_c, p.kappa, mode.gamma_m);
  return p;
}

ProbeState squeezed(ProbeState p) {
  p.v_sq = squeezing_db_to_variance(8.0);
  p.eta_d = 0.4210829;
  p.quadrature = Quadrature::phase_squeezed;
  return p;
}

}  // namespace

TEST_CASE("detected variance") {
  CHECK(detected_variance(0.5, 1.0) == 0.5);
  CHECK(detected_variance(0.0792, 0.0) == 0.5);
  const double v_sq = squeezing_db_to_variance(8.0);
  CHECK(v_sq == Approx(0.0792446596).epsilon(1e-9));
  const double v_d = detected_variance(v_sq, 0.4210829);
  CHECK(v_d == Approx(0.3228271211).epsilon(1e-9));
  CHECK(variance_to_db(v_d) == Approx(-1.9).margin(1e-6));
}

TEST_CASE("cooperativity") {
  const auto mode = membrane_mode();
  auto p = coherent_probe();
  CHECK(cooperativity(p, mode) == 0.0);

  p.g0 = hz_to_rad(55.8);
  CHECK(cooperativity(p, mode) == Approx(5.197893e-4).epsilon(1e-6));

  const double g0 = coupling_for_cooperativity(5.2e-4, p.n_c, p.kappa, mode.gamma_m);
  CHECK(g0 == Approx(350.6727825).epsilon(1e-9));
  CHECK(rad_to_hz(g0) == Approx(55.8113067).epsilon(1e-9));
  p.g0 = g0;
  CHECK(cooperativity(p, mode) == Approx(5.2e-4).epsilon(1e-10));

  auto doubled = p;
  doubled.n_c *= 2.0;
  CHECK(cooperativity(doubled, mode) == Approx(2.0 * cooperativity(p, mode)).epsilon(1e-14));
}

TEST_CASE("thermal occupancy and zero-point scale") {
  const auto mode = membrane_mode();
  CHECK(thermal_occupancy(mode) == Approx(1.0027410514e6).epsilon(1e-9));
  CHECK(mode.x_zpf() == Approx(1.17004593e-17).epsilon(1e-8));
  CHECK(thermal_occupancy(MechanicalMode::from_hz(1e5, 1e3, 1e-8, 295.0)) == Approx(6.146802645e7).epsilon(1e-9));
  // Bose occupancy differs by about -1/2 at high temperature
  CHECK(thermal_occupancy(mode, OccupancyModel::bose) - thermal_occupancy(mode) == Approx(-0.5).margin(1e-3));
  CHECK(occupancy_to_temperature(thermal_occupancy(mode), mode.omega_m) == Approx(295.0).epsilon(1e-12));
}

TEST_CASE("predict_temperature reproduces the coherent and squeezed minima") {
  const auto mode = membrane_mode();
  const double a = strength_from_minimum_ratio(149.0 / 295.0);
  CHECK(a == Approx(7.7600108).epsilon(1e-7));

  const auto coh = with_coherent_strength(mode, coherent_probe(), a);
  CHECK(cooling_strength(mode, coh) == Approx(a).epsilon(1e-12));
  CHECK(predict_temperature(mode, coh, 0.0).t_fb == Approx(295.0).epsilon(1e-15));
  const auto best = minimum_temperature(mode, coh);
  CHECK(best.t_fb == Approx(149.0).epsilon(1e-12));
  CHECK(best.gain == Approx(1.9597315436).epsilon(1e-9));
  CHECK(best.n_fb == Approx(149.0 * thermal_occupancy(mode) / 295.0).epsilon(1e-12));

  const auto sq = squeezed(coh);
  CHECK(cooling_strength(mode, sq) == Approx(12.0188337).epsilon(1e-6));
  const double t_sq = minimum_temperature(mode, sq).t_fb;
  CHECK(t_sq == Approx(128.0336906).epsilon(1e-7));
  // the reported squeezed minimum is 130 K
  CHECK(std::abs(t_sq / 130.0 - 1.0) < 0.025);
}

TEST_CASE("zero cooperativity is refused") {
  const auto mode = membrane_mode();
  auto p = coherent_probe();
  CHECK_THROWS_AS(predict_temperature(mode, p, 1.0), NoTransductionError);
  CHECK_THROWS_WITH(optimal_gain(mode, p), Catch::Matchers::ContainsSubstring("no transduction"));
}

TEST_CASE("optimal gain") {
  CHECK(optimal_gain_for_strength(0.0) == 0.0);
  // n_th = 1e4, C = 1e3, eta = 1, V_d = 1/2
  CHECK(optimal_gain_for_strength(8.0 * 1e4 * 1e3 / 0.5) == Approx(12648.11068).epsilon(1e-9));

  const auto mode = membrane_mode();
  const auto p = with_coherent_strength(mode, coherent_probe(), 7.76);
  const double g = optimal_gain(mode, p);
  const double t_opt = predict_temperature(mode, p, g).t_fb;
  CHECK(predict_temperature(mode, p, 0.9 * g).t_fb > t_opt);
  CHECK(predict_temperature(mode, p, 1.1 * g).t_fb > t_opt);
}

TEST_CASE("measurement rate") {
  const auto mode = membrane_mode();
  auto p = coherent_probe();
  p.g0 = coupling_for_cooperativity(5.2e-4, p.n_c, p.kappa, mode.gamma_m);
  CHECK(measurement_rate(mode, p) == Approx(42.47433268).epsilon(1e-9));
  CHECK(measurement_rate_ratio(0.3228271145) == Approx(1.5488166).epsilon(1e-7));

  auto lossy = squeezed(p);
  CHECK(measurement_rate(mode, lossy) / measurement_rate(mode, p) ==
        Approx(1.0 / (2.0 * detected_variance(lossy))).epsilon(1e-12));

  auto doubled = p;
  doubled.v_sq = 1.0;
  doubled.quadrature = Quadrature::amplitude_squeezed;  // anti-squeezed record quadrature, V_d = 1
  CHECK(measurement_rate(mode, doubled) == Approx(0.5 * measurement_rate(mode, p)).epsilon(1e-12));
}

TEST_CASE("thermal decoherence rate") {
  auto mode = membrane_mode();
  const double gth = thermal_decoherence_rate(mode);
  CHECK(gth == Approx(mode.gamma_m * 1.0027410514e6).epsilon(1e-9));
  auto p = coherent_probe();
  p.g0 = coupling_for_cooperativity(5.2e-4, p.n_c, p.kappa, mode.gamma_m);
  CHECK(gth / measurement_rate(mode, p) > 1e6);
  mode.t_bath = 0.0;
  CHECK(thermal_decoherence_rate(mode) == 0.0);
}

TEST_CASE("coherent occupancy floor") {
  CHECK(coherent_occupancy_floor(1.0) == 0.0);
  CHECK(coherent_occupancy_floor(0.23) == Approx(0.5425720703).epsilon(1e-9));
  CHECK(coherent_occupancy_floor(0.25) == Approx(0.5).epsilon(1e-15));
}

TEST_CASE("effective efficiency") {
  CHECK(effective_efficiency(1.0, {3.7}) == 1.0);
  const double v_c = db_to_variance(9.0);
  CHECK(v_c == Approx(3.971641174).epsilon(1e-9));
  CHECK(effective_efficiency(0.23, {v_c}) == Approx(0.7034988986).epsilon(1e-9));
  CHECK(effective_efficiency(0.23, {0.5}) == 0.23);
  CHECK(effective_efficiency(0.23, {1e12}) == Approx(1.0).epsilon(1e-9));
  CHECK(CavityVariance{0.3}.flagged());
  CHECK_FALSE(CavityVariance{3.0}.flagged());
}

TEST_CASE("interaction strength") {
  auto p = coherent_probe();
  p.n_c = 0.0;
  p.g0 = 1.0;
  CHECK(interaction_strength(p) == 0.0);
  p.n_c = 1e4;
  const double chi = interaction_strength(p);
  p.n_c = 4e4;
  CHECK(interaction_strength(p) == Approx(2.0 * chi).epsilon(1e-14));
  CHECK(interaction_strength_for_10db_mechanical_squeezing(true) == 1.0);
  CHECK(interaction_strength_for_10db_mechanical_squeezing(false) == Approx(std::sqrt(10.0)));
}

TEST_CASE("cooling curve and squeezing sweep") {
  const auto mode = membrane_mode();
  const auto p = with_coherent_strength(mode, coherent_probe(), 7.76);
  const std::vector<double> gains{0.0, 1.0, 2.0, 4.0};
  const auto curve = cooling_curve(mode, p, gains);
  REQUIRE(curve.size() == 4);
  CHECK(curve[0].t_fb == 295.0);
  for (const auto& c : curve) CHECK(c.t0 == 295.0);

  const std::vector<double> zero{0.0};
  CHECK(squeezing_sweep(mode, p, zero)[0].t_min == Approx(minimum_temperature(mode, p).t_fb).epsilon(1e-15));

  // n_th = 1e4, C = 1e3, unit efficiencies, squeezed-mode coupling 0.1
  auto m1d = mode;
  m1d.t_bath = occupancy_to_temperature(1e4, mode.omega_m);
  auto p1d = coherent_probe(1.0);
  p1d.eta_d = 0.1;
  p1d.g0 = coupling_for_cooperativity(1e3, p1d.n_c, p1d.kappa, mode.gamma_m);
  std::vector<double> db;
  for (int i = 0; i <= 40; ++i) db.push_back(0.5 * i);
  const auto sweep = squeezing_sweep(m1d, p1d, db);
  for (std::size_t i = 1; i < sweep.size(); ++i) CHECK(sweep[i].t_min < sweep[i - 1].t_min);
  CHECK(sweep.front().gain_opt == Approx(12648.11068).epsilon(1e-6));
}

TEST_CASE("rescaling keeps the cooling strength") {
  const auto mode = membrane_mode();
  const auto p = squeezed(with_coherent_strength(mode, coherent_probe(), 7.76));
  const auto [m2, p2] = rescale_preserving_strength(mode, p, hz_to_rad(1e5), hz_to_rad(1e3));
  CHECK(cooling_strength(m2, p2) == Approx(cooling_strength(mode, p)).epsilon(1e-12));
  CHECK(m2.t_bath == mode.t_bath);
  CHECK(detected_variance(p2) == detected_variance(p));
}

TEST_CASE("type invariants are reported") {
  auto mode = membrane_mode();
  CHECK(mode.violations().empty());
  mode.gamma_m = 2.0 * mode.omega_m;
  CHECK_FALSE(mode.violations().empty());
  auto p = coherent_probe();
  p.eta_fb = -0.1;
  CHECK_FALSE(p.violations().empty());
  p = coherent_probe();
  p.v_sq = 0.3;  // labelled coherent
  CHECK_FALSE(p.violations().empty());
}

// ---------------------------------------------------------------------------
// properties

TEST_CASE("minimum ratio identity over many decades of strength") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> log_a(-3.0, 9.0);
  for (int i = 0; i < 2000; ++i) {
    const double a = std::pow(10.0, log_a(rng));
    const double g = optimal_gain_for_strength(a);
    const double direct = temperature_ratio(g, a);
    const double closed = 2.0 / (std::sqrt(1.0 + a) + 1.0);
    REQUIRE(std::abs(direct / closed - 1.0) < 1e-12);
  }
}

TEST_CASE("optimal gain is the argmin on a fine grid") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> log_a(-1.0, 6.0);
  for (int trial = 0; trial < 200; ++trial) {
    const double a = std::pow(10.0, log_a(rng));
    const double g_opt = optimal_gain_for_strength(a);
    const double step = 3.0 * g_opt / 3000.0;
    double best_g = 0.0, best_t = temperature_ratio(0.0, a);
    for (int i = 1; i <= 3000; ++i) {
      const double g = step * i;
      const double t = temperature_ratio(g, a);
      if (t < best_t) {
        best_t = t;
        best_g = g;
      }
    }
    REQUIRE(std::abs(best_g - g_opt) <= step);
  }
}

TEST_CASE("measurement rate formulas agree") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const auto mode = MechanicalMode::from_hz(1e4 + 1e7 * u(rng), 1.0 + 1e3 * u(rng), 1e-12 + 1e-6 * u(rng), 300.0);
    ProbeState p;
    p.n_c = 1.0 + 1e6 * u(rng);
    p.g0 = 1.0 + 1e4 * u(rng);
    p.kappa = 1e6 + 1e9 * u(rng);
    p.v_sq = 0.01 + 2.0 * u(rng);
    p.eta_d = 0.01 + 0.99 * u(rng);
    p.quadrature = Quadrature::phase_squeezed;
    REQUIRE(std::abs(measurement_rate(mode, p) / measurement_rate_from_optics(p) - 1.0) < 1e-12);
  }
}

TEST_CASE("detected variance is affine with vacuum fixed point") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const double eta = 1e-3 + (1.0 - 1e-3) * u(rng);
    const double a = 2.0 * u(rng), b = 2.0 * u(rng), s = u(rng);
    REQUIRE(detected_variance(0.5, eta) == Approx(0.5).epsilon(1e-15));
    const double lhs = detected_variance(s * a + (1.0 - s) * b, eta);
    const double rhs = s * detected_variance(a, eta) + (1.0 - s) * detected_variance(b, eta);
    REQUIRE(lhs == Approx(rhs).epsilon(1e-13));
    const double v = detected_variance(a + 1e-3, eta);
    REQUIRE(v >= std::min(a + 1e-3, 0.5) - 1e-15);
    REQUIRE(v <= std::max(a + 1e-3, 0.5) + 1e-15);
  }
}

TEST_CASE("more squeezing always cools further at fixed gain") {
  const auto mode = membrane_mode();
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    auto p = with_coherent_strength(mode, coherent_probe(0.1 + 0.9 * u(rng)), 0.1 + 100.0 * u(rng));
    p.eta_d = 0.05 + 0.95 * u(rng);
    p.quadrature = Quadrature::phase_squeezed;
    const double gain = 1e-3 + 20.0 * u(rng);
    double last = std::numeric_limits<double>::infinity();
    for (double db = 0.0; db <= 15.0; db += 1.0) {
      p.v_sq = squeezing_db_to_variance(db);
      const double t = predict_temperature(mode, p, gain).t_fb;
      REQUIRE(t < last);
      last = t;
    }
  }
}

TEST_CASE("effective efficiency limits and monotonicity") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 500; ++i) {
    const double eta = 1e-3 + (1.0 - 1e-3) * u(rng);
    REQUIRE(effective_efficiency(eta, {0.5}) == Approx(eta).epsilon(1e-15));
    const double v1 = 0.5 + 10.0 * u(rng), v2 = v1 + 0.1 + u(rng);
    REQUIRE(effective_efficiency(eta, {v2}) > effective_efficiency(eta, {v1}));
    REQUIRE(effective_efficiency(eta, {1e15}) == Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("cooling regime up to twice the optimal gain") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> log_a(-2.0, 8.0), u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const double a = std::pow(10.0, log_a(rng));
    const double g = 2.0 * optimal_gain_for_strength(a) * u(rng);
    REQUIRE(temperature_ratio(g, a) <= 1.0 + 1e-15);
  }
  CHECK(temperature_ratio(0.0, 5.0) == 1.0);
}
