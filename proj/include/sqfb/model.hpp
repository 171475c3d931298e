#pragma once

// Closed-form cold-damping predictions for a mechanical mode read out by a
// (possibly squeezed) optical probe. Everything here is a pure function.

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "sqfb/units.hpp"

namespace sqfb {

enum class OccupancyModel {
  high_temperature,  // n_th = k_B T / (hbar Omega)
  bose,              // n_th = 1 / (exp(hbar Omega / k_B T) - 1)
};

struct MechanicalMode {
  double omega_m = 0.0;   // rad/s
  double gamma_m = 0.0;   // rad/s, energy damping (FWHM in angular units)
  double mass_eff = 0.0;  // kg
  double t_bath = 0.0;    // K

  static MechanicalMode from_hz(double f_m_hz, double linewidth_hz, double mass_kg, double t_bath_k) {
    return {hz_to_rad(f_m_hz), hz_to_rad(linewidth_hz), mass_kg, t_bath_k};
  }

  double quality() const { return omega_m / gamma_m; }

  /// Ground-state position spread sqrt(hbar / 2 m Omega).
  double x_zpf() const { return std::sqrt(kHbar / (2.0 * mass_eff * omega_m)); }

  /// Thermal position variance k_B T / (m Omega^2).
  double thermal_variance() const { return kBoltzmann * t_bath / (mass_eff * omega_m * omega_m); }

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (!(omega_m > 0.0)) out.emplace_back("mode.omega_m must be > 0");
    if (!(gamma_m > 0.0)) out.emplace_back("mode.gamma_m must be > 0");
    if (!(mass_eff > 0.0)) out.emplace_back("mode.mass_eff must be > 0");
    if (!(t_bath >= 0.0)) out.emplace_back("mode.t_bath must be >= 0");
    if (omega_m > 0.0 && gamma_m > 0.0 && !(quality() > 1.0))
      out.emplace_back("mode quality factor omega_m/gamma_m must exceed 1");
    return out;
  }
};

enum class Quadrature { phase_squeezed, amplitude_squeezed, coherent };

struct ProbeState {
  double n_c = 0.0;     // mean intracavity photon number
  double g0 = 0.0;      // rad/s
  double kappa = 0.0;   // rad/s
  double v_sq = kVacuumVariance;
  double eta_d = 1.0;   // transmission/detection efficiency of the squeezed mode
  double eta_fb = 1.0;  // signal detection efficiency of the feedback loop
  Quadrature quadrature = Quadrature::coherent;

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (!(n_c >= 0.0)) out.emplace_back("probe.n_c must be >= 0");
    if (!(g0 >= 0.0)) out.emplace_back("probe.g0 must be >= 0");
    if (!(kappa > 0.0)) out.emplace_back("probe.kappa must be > 0");
    if (!(v_sq > 0.0)) out.emplace_back("probe.v_sq must be > 0");
    if (!(eta_d > 0.0 && eta_d <= 1.0)) out.emplace_back("probe.eta_d must lie in (0, 1]");
    if (!(eta_fb > 0.0 && eta_fb <= 1.0)) out.emplace_back("probe.eta_fb must lie in (0, 1]");
    if (quadrature == Quadrature::coherent && std::abs(v_sq - kVacuumVariance) > 1e-12)
      out.emplace_back("probe.v_sq must equal 1/2 for a coherent probe");
    return out;
  }
};

/// Intra-cavity quadrature variance used by the effective-efficiency formula.
struct CavityVariance {
  double v_c = kVacuumVariance;
  /// Below-vacuum values are accepted by the formula but are not the anti-squeezed use case.
  bool flagged() const { return v_c < kVacuumVariance; }
};

struct CoolingPrediction {
  double gain = 0.0;
  double t_fb = 0.0;  // K
  double n_fb = 0.0;
  double t0 = 0.0;    // K
};

namespace detail {
inline void require_valid(const MechanicalMode& mode) {
  auto v = mode.violations();
  if (!v.empty()) throw ConfigError(v.front());
}
inline void require_valid(const ProbeState& probe) {
  auto v = probe.violations();
  if (!v.empty()) throw ConfigError(v.front());
}
}  // namespace detail

inline double detected_variance(double v_sq, double eta_d) {
  return eta_d * v_sq + (1.0 - eta_d) * kVacuumVariance;
}

inline double detected_variance(const ProbeState& probe) {
  return detected_variance(probe.v_sq, probe.eta_d);
}

inline double cooperativity(const ProbeState& probe, const MechanicalMode& mode) {
  return 4.0 * probe.g0 * probe.g0 * probe.n_c / (probe.kappa * mode.gamma_m);
}

/// Coupling rate g0 that realizes cooperativity `c` for the given photon number and rates.
inline double coupling_for_cooperativity(double c, double n_c, double kappa, double gamma_m) {
  return std::sqrt(c * kappa * gamma_m / (4.0 * n_c));
}

inline double thermal_occupancy(const MechanicalMode& mode,
                                OccupancyModel model = OccupancyModel::high_temperature) {
  if (mode.t_bath <= 0.0) return 0.0;
  const double ratio = kHbar * mode.omega_m / (kBoltzmann * mode.t_bath);
  if (model == OccupancyModel::bose) return 1.0 / std::expm1(ratio);
  return 1.0 / ratio;
}

/// Temperature equivalent of an occupancy, inverse of thermal_occupancy (high-temperature form).
inline double occupancy_to_temperature(double n, double omega_m) {
  return n * kHbar * omega_m / kBoltzmann;
}

/// Dimensionless cooling strength A = 8 eta n_th C / V_d. The cooled temperature depends on
/// the probe and the mode only through this number.
inline double cooling_strength(const MechanicalMode& mode, const ProbeState& probe,
                               OccupancyModel occ = OccupancyModel::high_temperature) {
  return 8.0 * probe.eta_fb * thermal_occupancy(mode, occ) * cooperativity(probe, mode) /
         detected_variance(probe);
}

/// T_fb / T_0 = (1 + G^2 / A) / (1 + G).
inline double temperature_ratio(double gain, double strength) {
  if (!(strength > 0.0)) throw NoTransductionError();
  return (1.0 + gain * gain / strength) / (1.0 + gain);
}

inline double optimal_gain_for_strength(double strength) {
  return std::sqrt(1.0 + strength) - 1.0;
}

/// Minimum of T_fb / T_0 over the gain: 2 / (sqrt(1 + A) + 1).
inline double minimum_temperature_ratio(double strength) {
  return 2.0 / (std::sqrt(1.0 + strength) + 1.0);
}

/// Inverse of minimum_temperature_ratio: the strength A whose optimum reaches `ratio`.
inline double strength_from_minimum_ratio(double ratio) {
  const double s = 2.0 / ratio - 1.0;
  return s * s - 1.0;
}

inline CoolingPrediction predict_temperature(const MechanicalMode& mode, const ProbeState& probe,
                                             double gain,
                                             OccupancyModel occ = OccupancyModel::high_temperature) {
  detail::require_valid(mode);
  detail::require_valid(probe);
  if (!(gain >= 0.0)) throw ConfigError("gain must be >= 0");
  if (cooperativity(probe, mode) <= 0.0) throw NoTransductionError();
  const double t_fb = temperature_ratio(gain, cooling_strength(mode, probe, occ)) * mode.t_bath;
  return {gain, t_fb, thermal_occupancy({mode.omega_m, mode.gamma_m, mode.mass_eff, t_fb}, occ),
          mode.t_bath};
}

inline double optimal_gain(const MechanicalMode& mode, const ProbeState& probe,
                           OccupancyModel occ = OccupancyModel::high_temperature) {
  detail::require_valid(mode);
  detail::require_valid(probe);
  if (cooperativity(probe, mode) <= 0.0) throw NoTransductionError();
  return optimal_gain_for_strength(cooling_strength(mode, probe, occ));
}

inline CoolingPrediction minimum_temperature(const MechanicalMode& mode, const ProbeState& probe,
                                             OccupancyModel occ = OccupancyModel::high_temperature) {
  return predict_temperature(mode, probe, optimal_gain(mode, probe, occ), occ);
}

/// Measurement rate mu = C Gamma_m / (2 V_d), rad/s.
inline double measurement_rate(const MechanicalMode& mode, const ProbeState& probe) {
  return cooperativity(probe, mode) * mode.gamma_m / (2.0 * detected_variance(probe));
}

/// Same rate written through the optical parameters: 2 N_c g0^2 / (kappa V_d).
inline double measurement_rate_from_optics(const ProbeState& probe) {
  return 2.0 * probe.n_c * probe.g0 * probe.g0 / (probe.kappa * detected_variance(probe));
}

/// Improvement of the measurement rate over a coherent probe: 1 / (2 V_d).
inline double measurement_rate_ratio(double v_d) { return 1.0 / (2.0 * v_d); }

/// Gamma_th = Gamma_m n_th, the rate at which bath phonons enter.
inline double thermal_decoherence_rate(const MechanicalMode& mode,
                                       OccupancyModel occ = OccupancyModel::high_temperature) {
  return mode.gamma_m * thermal_occupancy(mode, occ);
}

/// Lowest occupancy reachable by feedback with a coherent probe of efficiency eta.
inline double coherent_occupancy_floor(double eta_fb) {
  if (!(eta_fb > 0.0 && eta_fb <= 1.0)) throw ConfigError("eta_fb must lie in (0, 1]");
  return 1.0 / (2.0 * std::sqrt(eta_fb)) - 0.5;
}

/// Loss-mitigated efficiency with amplitude squeezing, (1 + (1 - eta) / (2 eta V_c))^-1.
inline double effective_efficiency(double eta_fb, CavityVariance cavity) {
  if (!(eta_fb > 0.0 && eta_fb <= 1.0)) throw ConfigError("eta_fb must lie in (0, 1]");
  if (!(cavity.v_c > 0.0)) throw ConfigError("v_c must be > 0");
  return 1.0 / (1.0 + (1.0 - eta_fb) / (2.0 * eta_fb * cavity.v_c));
}

/// Pulsed-interaction strength 4 g0 sqrt(N_c) / kappa.
inline double interaction_strength(const ProbeState& probe) {
  return 4.0 * probe.g0 * std::sqrt(probe.n_c) / probe.kappa;
}

/// Interaction strength quoted for 10 dB of mechanical squeezing in the pulsed
/// back-action-evading scheme. This is a lookup of two published values, not a
/// model: 1 with 10 dB of input squeezing, sqrt(10) with a coherent input.
inline double interaction_strength_for_10db_mechanical_squeezing(bool squeezed_input) {
  return squeezed_input ? 1.0 : std::sqrt(10.0);
}

/// Gain at which the in-loop spectrum at resonance drops below the imprecision
/// floor: S_y(Omega) / S_imp = (1 + A) / (1 + G)^2 < 1 for G > sqrt(1 + A) - 1.
inline double squashing_threshold_gain(double strength) { return optimal_gain_for_strength(strength); }

inline std::vector<CoolingPrediction> cooling_curve(const MechanicalMode& mode, const ProbeState& probe,
                                                    std::span<const double> gains,
                                                    OccupancyModel occ = OccupancyModel::high_temperature) {
  std::vector<CoolingPrediction> out;
  out.reserve(gains.size());
  for (double g : gains) out.push_back(predict_temperature(mode, probe, g, occ));
  return out;
}

struct SqueezingPoint {
  double squeezing_db = 0.0;  // source squeezing, dB below vacuum
  double v_d = kVacuumVariance;
  double gain_opt = 0.0;
  double t_min = 0.0;  // K
};

/// Minimum temperature versus source squeezing; losses enter through eta_d.
inline std::vector<SqueezingPoint> squeezing_sweep(const MechanicalMode& mode, const ProbeState& base_probe,
                                                   std::span<const double> squeezing_db,
                                                   OccupancyModel occ = OccupancyModel::high_temperature) {
  std::vector<SqueezingPoint> out;
  out.reserve(squeezing_db.size());
  for (double db : squeezing_db) {
    ProbeState p = base_probe;
    p.v_sq = squeezing_db_to_variance(db);
    p.quadrature = db == 0.0 ? Quadrature::coherent : Quadrature::phase_squeezed;
    const auto best = minimum_temperature(mode, p, occ);
    out.push_back({db, detected_variance(p), best.gain, best.t_fb});
  }
  return out;
}

/// Maps a mode/probe pair onto a mode with different resonance and linewidth
/// while keeping T_0, eta, V_d and the cooling strength A. Used to run the
/// stochastic simulation at desk-friendly frequencies.
inline std::pair<MechanicalMode, ProbeState> rescale_preserving_strength(const MechanicalMode& mode,
                                                                          const ProbeState& probe,
                                                                          double omega_m, double gamma_m) {
  MechanicalMode scaled = mode;
  scaled.omega_m = omega_m;
  scaled.gamma_m = gamma_m;
  const double target_c =
      cooperativity(probe, mode) * thermal_occupancy(mode) / thermal_occupancy(scaled);
  ProbeState p = probe;
  p.g0 = coupling_for_cooperativity(target_c, p.n_c, p.kappa, gamma_m);
  return {scaled, p};
}

}  // namespace sqfb
