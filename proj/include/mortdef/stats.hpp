#pragma once

#include <cstdint>
#include <limits>
#include <utility>

#include <Eigen/Dense>

#include "mortdef/rng.hpp"

namespace mortdef {

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;

/// Below this overdispersion the Poisson branch is used.
inline constexpr double kPoissonThreshold = 1e-8;
/// Largest count accepted by the pmf.
inline constexpr std::int64_t kMaxCount = 1'000'000'000;

/// NB(mean, overdispersion): E[d] = mean, Var[d] = mean * (1 + overdispersion).
/// Mapped to size r = mean / overdispersion and success probability
/// 1 / (1 + overdispersion).
struct NegBinParams {
  double mean;
  double overdispersion;
};

double log_factorial(std::int64_t n);

double normal_logpdf(double x, double mean, double sd);

double poisson_logpmf(std::int64_t d, double mean);

/// log Gamma(r + d) - log Gamma(r) for integer d >= 0.
double log_rising_factorial(double r, std::int64_t d);

double negbin_logpmf(std::int64_t d, const NegBinParams& p);

/// Gamma-Poisson mixture; exact Poisson below kPoissonThreshold.
std::int64_t negbin_sample(const NegBinParams& p, Rng& rng);

/// Normal(center, scale^2) restricted to [lower, upper].
struct TruncNormalPrior {
  double center = 0.0;
  double scale = 1.0;
  double lower = -kInf;
  double upper = kInf;

  static TruncNormalPrior normal(double center, double scale) { return {center, scale, -kInf, kInf}; }
  static TruncNormalPrior positive(double center, double scale) { return {center, scale, 0.0, kInf}; }
  static TruncNormalPrior unit_interval(double center, double scale) { return {center, scale, 0.0, 1.0}; }

  bool truncated() const { return lower > -kInf || upper < kInf; }
  /// Throws std::invalid_argument if the prior is degenerate.
  void validate() const;
  /// log of the untruncated normal mass on (lower, upper).
  double log_mass() const;

  friend bool operator==(const TruncNormalPrior&, const TruncNormalPrior&) = default;
};

/// -inf outside [lower, upper]; the boundary itself has measure zero.
double truncnormal_logpdf(double x, const TruncNormalPrior& prior);

/// Draw strictly inside (lower, upper).
double truncnormal_sample(const TruncNormalPrior& prior, Rng& rng);

/// AR(1) deflator law: theta_1 ~ N(c, s^2),
/// theta_j | theta_{j-1} ~ N(c (1 - rho) + rho theta_{j-1}, s^2 (1 - rho^2)).
/// With c = -0.5 and s = 0.5 this is the deflator process of the AR models.
struct AR1DeflatorProcess {
  double rho;
  double level_mu;
  double innovation_sd;
  double initial_center;
  double initial_sd;

  static AR1DeflatorProcess from_rho(double rho, double initial_center = -0.5, double initial_sd = 0.5);
};

double ar1_logdensity(const Eigen::Ref<const Eigen::VectorXd>& theta, const AR1DeflatorProcess& proc);

/// (mean, variance) of the stationary law. For the default process this is
/// (-0.5, 0.25) for every rho in (0, 1).
std::pair<double, double> ar1_stationary_moments(const AR1DeflatorProcess& proc);

} // namespace mortdef
