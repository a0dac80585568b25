#include <doctest.h>

#include <cmath>
#include <numbers>

#include <gsl/gsl_randist.h>
#include <gsl/gsl_sf_gamma.h>

#include "mortdef/stats.hpp"

using namespace mortdef;

namespace {

// log N(x; 0, S) by explicit inverse and determinant
double mvn_logpdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
  const Eigen::VectorXd r = x - mean;
  const double quad = r.dot(cov.inverse() * r);
  return -0.5 * quad - 0.5 * std::log(cov.determinant()) - 0.5 * x.size() * std::log(2 * std::numbers::pi);
}

} // namespace

TEST_CASE("negbin logpmf closed forms") {
  CHECK(negbin_logpmf(0, {1.0, 0.0}) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(negbin_logpmf(0, {2.0, 1.0}) == doctest::Approx(std::log(0.25)).epsilon(1e-14));

  double total = 0;
  for (int d = 0; d <= 500; ++d) total += std::exp(negbin_logpmf(d, {5.0, 0.3}));
  CHECK(std::abs(total - 1.0) < 1e-10);
}

TEST_CASE("negbin logpmf agrees with the GSL pmf") {
  for (double mu : {0.05, 0.7, 3.0, 12.5})
    for (double omega : {0.01, 0.2, 1.0, 4.0})
      for (unsigned d : {0u, 1u, 2u, 7u, 30u}) {
        const double r = mu / omega, p = 1.0 / (1.0 + omega);
        const double oracle = std::log(gsl_ran_negative_binomial_pdf(d, p, r));
        CHECK(negbin_logpmf(d, {mu, omega}) == doctest::Approx(oracle).epsilon(1e-10));
      }
}

TEST_CASE("negbin tends to poisson") {
  for (double mu : {0.1, 1.0, 5.0}) {
    double worst = 0;
    for (unsigned d = 0; d <= 50; ++d) {
      const double oracle = -mu + d * std::log(mu) - gsl_sf_lnfact(d);
      worst = std::max(worst, std::abs(negbin_logpmf(d, {mu, 1e-9}) - oracle));
      CHECK(poisson_logpmf(d, mu) == doctest::Approx(std::log(gsl_ran_poisson_pdf(d, mu))).epsilon(1e-12));
    }
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("log factorial via lgamma") {
  CHECK(log_factorial(0) == 0.0);
  CHECK(log_factorial(5) == doctest::Approx(std::log(120.0)).epsilon(1e-15));
  CHECK(log_factorial(10000) == doctest::Approx(gsl_sf_lnfact(10000)).epsilon(1e-14));
  CHECK(log_rising_factorial(2.5, 3) == doctest::Approx(std::log(2.5 * 3.5 * 4.5)).epsilon(1e-14));
}

TEST_CASE("negbin sampler moments and determinism") {
  Rng rng = make_rng(1, 0);
  const int n = 1'000'000;
  double sum = 0, sumsq = 0;
  for (int i = 0; i < n; ++i) {
    const double d = static_cast<double>(negbin_sample({3.0, 0.2}, rng));
    sum += d;
    sumsq += d * d;
  }
  const double mean = sum / n, var = sumsq / n - mean * mean;
  CHECK(std::abs(mean - 3.0) < 0.03);
  CHECK(std::abs(var - 3.6) < 0.03 * 3.6);

  Rng zero = make_rng(2, 0);
  for (int i = 0; i < 1000; ++i) CHECK(negbin_sample({0.0, 0.0}, zero) == 0);

  Rng a = make_rng(9, 4), b = make_rng(9, 4);
  for (int i = 0; i < 200; ++i) CHECK(negbin_sample({4.0, 0.5}, a) == negbin_sample({4.0, 0.5}, b));
}

TEST_CASE("truncated normal density") {
  CHECK(truncnormal_logpdf(0.0, TruncNormalPrior::normal(0, 1)) == doctest::Approx(-kLogSqrt2Pi).epsilon(1e-15));
  CHECK(truncnormal_logpdf(-0.1, TruncNormalPrior::positive(0, 1)) == -kInf);
  CHECK(truncnormal_logpdf(1.1, TruncNormalPrior::unit_interval(1, 1)) == -kInf);

  // midpoint rule, 10^4 nodes
  for (const auto& prior : {TruncNormalPrior::unit_interval(1, 1), TruncNormalPrior{0.3, 0.2, -0.5, 0.4}}) {
    const int n = 10000;
    const double h = (prior.upper - prior.lower) / n;
    double integral = 0;
    for (int i = 0; i < n; ++i) integral += std::exp(truncnormal_logpdf(prior.lower + (i + 0.5) * h, prior)) * h;
    CHECK(std::abs(integral - 1.0) < 1e-8);
  }
  // half line: map to (0, 1) through x = t / (1 - t)
  const auto half = TruncNormalPrior::positive(0.5, 0.5);
  const int n = 200000;
  double integral = 0;
  for (int i = 0; i < n; ++i) {
    const double t = (i + 0.5) / n, x = t / (1 - t);
    integral += std::exp(truncnormal_logpdf(x, half)) / ((1 - t) * (1 - t)) / n;
  }
  CHECK(std::abs(integral - 1.0) < 1e-8);

  CHECK_THROWS(TruncNormalPrior({0, -1, -kInf, kInf}).validate());
  CHECK_THROWS(TruncNormalPrior({0, 1, 1, 0}).validate());
}

TEST_CASE("truncated normal sampler") {
  Rng rng = make_rng(5, 1);
  const auto unit = TruncNormalPrior::unit_interval(1, 1);
  for (int i = 0; i < 100000; ++i) {
    const double x = truncnormal_sample(unit, rng);
    REQUIRE(x > 0);
    REQUIRE(x < 1);
  }
  // far tail still lands inside
  const TruncNormalPrior tail{0, 1, 8, kInf};
  for (int i = 0; i < 1000; ++i) REQUIRE(truncnormal_sample(tail, rng) > 8);

  const int n = 100000;
  double sum = 0;
  for (int i = 0; i < n; ++i) sum += truncnormal_sample(TruncNormalPrior::normal(2.0, 3.0), rng);
  CHECK(std::abs(sum / n - 2.0) < 3 * 3.0 / std::sqrt(n));

  Rng a = make_rng(7, 0), b = make_rng(7, 0);
  for (int i = 0; i < 100; ++i) CHECK(truncnormal_sample(unit, a) == truncnormal_sample(unit, b));
}

TEST_CASE("AR(1) deflator process") {
  const auto proc = AR1DeflatorProcess::from_rho(0.5);
  CHECK(proc.level_mu == -0.5 * (1 - 0.5));
  CHECK(proc.innovation_sd * proc.innovation_sd == doctest::Approx(0.25 * (1 - 0.25)).epsilon(1e-15));

  Eigen::VectorXd one(1);
  one << -0.2;
  CHECK(ar1_logdensity(one, proc) == doctest::Approx(normal_logpdf(-0.2, -0.5, 0.5)).epsilon(1e-15));

  // stationary MVN oracle, lengths 2..5
  for (int n = 2; n <= 5; ++n)
    for (double rho : {0.1, 0.5, 0.9}) {
      Eigen::MatrixXd cov(n, n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) cov(i, j) = 0.25 * std::pow(rho, std::abs(i - j));
      Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(n, -0.9, 0.3);
      const double oracle = mvn_logpdf(x, Eigen::VectorXd::Constant(n, -0.5), cov);
      CHECK(ar1_logdensity(x, AR1DeflatorProcess::from_rho(rho)) == doctest::Approx(oracle).epsilon(1e-10));
    }

  // independence limit
  Eigen::VectorXd x(4);
  x << -0.4, 0.1, -1.2, -0.5;
  double product = 0;
  for (double v : x) product += normal_logpdf(v, -0.5, 0.5);
  CHECK(std::abs(ar1_logdensity(x, AR1DeflatorProcess::from_rho(1e-12)) - product) < 1e-8);

  for (double rho : {0.01, 0.5, 0.999999}) {
    const auto [m, v] = ar1_stationary_moments(AR1DeflatorProcess::from_rho(rho));
    CHECK(m == doctest::Approx(-0.5).epsilon(1e-14));
    CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
  }
  CHECK(AR1DeflatorProcess::from_rho(1 - 1e-12).innovation_sd < 1e-5);
}

TEST_CASE("rng streams") {
  CHECK(derive_seed(1, 0) != derive_seed(1, 1));
  CHECK(derive_seed(1, 0) != derive_seed(2, 0));
  Rng a = make_rng(3, 2), b = make_rng(3, 2);
  CHECK(a() == b());
}
