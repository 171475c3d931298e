#pragma once

// Physical constants, unit conversions and the error types shared by every
// module. Angular frequencies are stored in rad/s everywhere; Hz only appears
// at the configuration and file boundaries.

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace sqfb {

inline constexpr double kHbar = 1.054571817e-34;       // J s
inline constexpr double kBoltzmann = 1.380649e-23;     // J / K
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Quadrature variance of the vacuum state. All variances are in these units.
inline constexpr double kVacuumVariance = 0.5;

inline constexpr double hz_to_rad(double f_hz) { return kTwoPi * f_hz; }
inline constexpr double rad_to_hz(double omega) { return omega / kTwoPi; }

/// Variance relative to vacuum in dB: 10 log10(V / 0.5). Negative = squeezed.
inline double variance_to_db(double v) { return 10.0 * std::log10(v / kVacuumVariance); }
inline double db_to_variance(double db) { return kVacuumVariance * std::pow(10.0, db / 10.0); }

/// Source squeezing given as a positive "dB below vacuum" figure.
inline double squeezing_db_to_variance(double db_below_vacuum) {
  return db_to_variance(-db_below_vacuum);
}

// Error classes. The CLI maps each to its own exit code.

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NoTransductionError : public std::domain_error {
 public:
  NoTransductionError() : std::domain_error("no transduction: cooperativity is zero") {}
};

class InstabilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AnalysisError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sqfb
