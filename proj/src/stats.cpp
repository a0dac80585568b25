#include "mortdef/stats.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

#include <gsl/gsl_cdf.h>
#include <gsl/gsl_sf_gamma.h>

namespace mortdef {

namespace {

constexpr std::int64_t kFactorialTableSize = 512;
// Below this count the ratio Gamma(d + r) / Gamma(r) is expanded as a product.
constexpr std::int64_t kRisingProductLimit = 64;

const std::array<double, kFactorialTableSize>& log_factorial_table() {
  static const auto table = [] {
    std::array<double, kFactorialTableSize> t{};
    t[0] = 0.0;
    for (std::size_t i = 1; i < t.size(); ++i) t[i] = t[i - 1] + std::log(static_cast<double>(i));
    return t;
  }();
  return table;
}

} // namespace

double log_rising_factorial(double r, std::int64_t d) {
  if (d <= kRisingProductLimit) {
    // products of 8 factors stay far from overflow for any r below 1e30
    double acc = 0.0;
    std::int64_t j = 0;
    while (j < d) {
      double prod = 1.0;
      for (int k = 0; k < 8 && j < d; ++k, ++j) prod *= r + static_cast<double>(j);
      acc += std::log(prod);
    }
    return acc;
  }
  return gsl_sf_lngamma(r + static_cast<double>(d)) - gsl_sf_lngamma(r);
}

double log_factorial(std::int64_t n) {
  if (n < 0) throw std::domain_error("log_factorial of negative value");
  if (n < kFactorialTableSize) return log_factorial_table()[static_cast<std::size_t>(n)];
  return gsl_sf_lngamma(static_cast<double>(n) + 1.0);
}

double normal_logpdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -0.5 * z * z - std::log(sd) - kLogSqrt2Pi;
}

double poisson_logpmf(std::int64_t d, double mean) {
  if (d < 0) return -kInf;
  if (d > kMaxCount) throw std::domain_error("count exceeds sanity cap");
  mean = std::max(mean, 1e-300);
  return -mean + static_cast<double>(d) * std::log(mean) - log_factorial(d);
}

double negbin_logpmf(std::int64_t d, const NegBinParams& p) {
  if (d < 0) return -kInf;
  if (d > kMaxCount) throw std::domain_error("count exceeds sanity cap");
  const double mu = std::max(p.mean, 1e-300);
  const double omega = p.overdispersion;
  if (omega < kPoissonThreshold) return poisson_logpmf(d, mu);
  const double r = mu / omega;
  const double log1p_omega = std::log1p(omega);
  return log_rising_factorial(r, d) - log_factorial(d) - r * log1p_omega +
         static_cast<double>(d) * (std::log(omega) - log1p_omega);
}

std::int64_t negbin_sample(const NegBinParams& p, Rng& rng) {
  const double mu = std::max(p.mean, 1e-300);
  double rate = mu;
  if (p.overdispersion >= kPoissonThreshold) {
    std::gamma_distribution<double> gamma(mu / p.overdispersion, p.overdispersion);
    rate = std::max(gamma(rng), 1e-300);
  }
  std::poisson_distribution<std::int64_t> poisson(rate);
  return poisson(rng);
}

void TruncNormalPrior::validate() const {
  if (!(scale > 0) || !std::isfinite(scale)) throw std::invalid_argument("prior scale must be positive");
  if (!(lower < upper)) throw std::invalid_argument("prior bounds must satisfy lower < upper");
  if (!std::isfinite(log_mass())) throw std::invalid_argument("prior has no mass on its support");
}

double TruncNormalPrior::log_mass() const {
  if (!truncated()) return 0.0;
  const double a = (lower - center) / scale;
  const double b = (upper - center) / scale;
  // Difference taken on the tail that keeps precision.
  const double mass = a > 0 ? gsl_cdf_ugaussian_Q(a) - gsl_cdf_ugaussian_Q(b)
                            : gsl_cdf_ugaussian_P(b) - gsl_cdf_ugaussian_P(a);
  return std::log(mass);
}

double truncnormal_logpdf(double x, const TruncNormalPrior& prior) {
  if (std::isnan(x) || x < prior.lower || x > prior.upper) return -kInf;
  return normal_logpdf(x, prior.center, prior.scale) - prior.log_mass();
}

double truncnormal_sample(const TruncNormalPrior& prior, Rng& rng) {
  std::normal_distribution<double> normal(prior.center, prior.scale);
  if (!prior.truncated()) return normal(rng);
  const double a = (prior.lower - prior.center) / prior.scale;
  const double b = (prior.upper - prior.center) / prior.scale;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  if (std::exp(prior.log_mass()) > 0.25) {
    while (true) {
      const double x = normal(rng);
      if (x > prior.lower && x < prior.upper) return x;
    }
  }
  // Inverse CDF, on whichever tail keeps precision.
  while (true) {
    const double u = unif(rng);
    double z;
    if (a > 0) {
      const double qa = gsl_cdf_ugaussian_Q(a), qb = gsl_cdf_ugaussian_Q(b);
      z = gsl_cdf_ugaussian_Qinv(qa - u * (qa - qb));
    } else {
      const double pa = gsl_cdf_ugaussian_P(a), pb = gsl_cdf_ugaussian_P(b);
      z = gsl_cdf_ugaussian_Pinv(pa + u * (pb - pa));
    }
    const double x = prior.center + prior.scale * z;
    if (x > prior.lower && x < prior.upper) return x;
  }
}

AR1DeflatorProcess AR1DeflatorProcess::from_rho(double rho, double initial_center, double initial_sd) {
  return {rho, initial_center * (1.0 - rho), initial_sd * std::sqrt(1.0 - rho * rho), initial_center,
          initial_sd};
}

double ar1_logdensity(const Eigen::Ref<const Eigen::VectorXd>& theta, const AR1DeflatorProcess& proc) {
  if (theta.size() == 0) throw std::invalid_argument("ar1_logdensity: empty vector");
  double lp = normal_logpdf(theta[0], proc.initial_center, proc.initial_sd);
  for (Eigen::Index j = 1; j < theta.size(); ++j)
    lp += normal_logpdf(theta[j], proc.level_mu + proc.rho * theta[j - 1], proc.innovation_sd);
  return lp;
}

std::pair<double, double> ar1_stationary_moments(const AR1DeflatorProcess& proc) {
  const double one_minus_rho2 = 1.0 - proc.rho * proc.rho;
  return {proc.rho < 1.0 ? proc.level_mu / (1.0 - proc.rho) : proc.initial_center,
          one_minus_rho2 > 0 ? proc.innovation_sd * proc.innovation_sd / one_minus_rho2
                             : proc.initial_sd * proc.initial_sd};
}

} // namespace mortdef
