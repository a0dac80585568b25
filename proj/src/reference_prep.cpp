#include "mortdef/reference_prep.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <set>

#include <gsl/gsl_multimin.h>

#include "mortdef/gp.hpp"
#include "mortdef/rng.hpp"

namespace mortdef {

GompertzCoeffs gompertz_fit(const ReferenceTable& table, int year, int age_lo, int age_hi) {
  if (age_hi - age_lo + 1 < 3) throw DataError("gompertz_fit: need at least 3 ages");
  const auto col = table.grid.year_index(year);
  const int n = age_hi - age_lo + 1;
  Eigen::MatrixXd design(n, 2);
  Vector y(n);
  for (int k = 0; k < n; ++k) {
    design(k, 0) = 1.0;
    design(k, 1) = k;
    y(k) = std::log(table.rates(table.grid.age_index(age_lo + k), col));
  }
  if (!y.allFinite()) throw DataError("gompertz_fit: non-finite log-rates");
  const Eigen::Vector2d beta = design.colPivHouseholderQr().solve(y);
  return {beta(0), beta(1), age_lo};
}

Vector gompertz_extrapolate(const GompertzCoeffs& coeffs, const std::vector<int>& ages) {
  Vector out(static_cast<Eigen::Index>(ages.size()));
  for (std::size_t i = 0; i < ages.size(); ++i) {
    if (ages[i] < coeffs.pivot_age) throw std::invalid_argument("gompertz_extrapolate: age below pivot");
    out(static_cast<Eigen::Index>(i)) = std::exp(coeffs.intercept + coeffs.slope * (ages[i] - coeffs.pivot_age));
  }
  return out;
}

ExtrapolationResult extrapolate_reference(const ReferenceTable& table, int fit_age_lo, int fit_age_hi,
                                          int last_age) {
  table.validate();
  if (last_age < table.grid.last_age()) throw DataError("extrapolate_reference: last_age inside table");
  std::vector<int> ages;
  for (int a = table.grid.first_age(); a <= last_age; ++a) ages.push_back(a);

  ExtrapolationResult out;
  out.years = table.grid.years();
  out.table.label = table.label;
  out.table.grid = AgeYearGrid(ages, table.grid.years());
  out.table.rates.resize(out.table.grid.n_ages(), out.table.grid.n_years());
  out.table.rates.topRows(table.grid.n_ages()) = table.rates;

  std::vector<int> new_ages(ages.begin() + table.grid.n_ages(), ages.end());
  for (Eigen::Index j = 0; j < table.grid.n_years(); ++j) {
    const auto coeffs = gompertz_fit(table, table.grid.years()[j], fit_age_lo, fit_age_hi);
    out.coeffs.push_back(coeffs);
    if (!new_ages.empty())
      out.table.rates.col(j).tail(static_cast<Eigen::Index>(new_ages.size())) =
          gompertz_extrapolate(coeffs, new_ages);
  }
  return out;
}

namespace {

struct SurfaceData {
  PointMatrix<double> points; // (age, year) rows
  Vector log_rates;
  Eigen::MatrixXd design; // 1, age - age0, year - year0
  int age0;
  int year0;
};

SurfaceData surface_data(const ReferenceTable& table) {
  SurfaceData s;
  s.age0 = table.grid.first_age();
  s.year0 = table.grid.first_year();
  const auto n = table.grid.n_cells();
  s.points.resize(n, 2);
  s.log_rates.resize(n);
  s.design.resize(n, 3);
  Eigen::Index k = 0;
  for (Eigen::Index j = 0; j < table.grid.n_years(); ++j)
    for (Eigen::Index i = 0; i < table.grid.n_ages(); ++i, ++k) {
      const int age = table.grid.ages()[i], year = table.grid.years()[j];
      s.points.row(k) << age, year;
      s.log_rates(k) = std::log(table.rates(i, j));
      s.design.row(k) << 1.0, age - s.age0, year - s.year0;
    }
  return s;
}

struct GlsFit {
  CholeskyFactor<double> chol;
  Eigen::Vector3d beta;
  Vector alpha; // K^{-1} (y - H beta)
  double log_likelihood;
};

GlsFit gls_fit(const SurfaceData& s, const SurfaceHyper& h) {
  const auto k = KernelSpec<double>::separable(h.process_variance, h.lengthscale_age, h.lengthscale_year);
  auto cov = build_covariance(k, s.points);
  cov.diagonal().array() += h.noise_variance;
  GlsFit fit{cholesky_with_jitter<double>(cov), {}, {}, 0.0};
  const Eigen::MatrixXd kinv_h = fit.chol.solve(s.design);
  const Eigen::Matrix3d normal = s.design.transpose() * kinv_h;
  fit.beta = normal.ldlt().solve(kinv_h.transpose() * s.log_rates);
  const Vector resid = s.log_rates - s.design * fit.beta;
  fit.alpha = fit.chol.solve(resid);
  const double n = static_cast<double>(resid.size());
  fit.log_likelihood = -0.5 * resid.dot(fit.alpha) - 0.5 * fit.chol.log_det() - n * 0.91893853320467274178;
  return fit;
}

// Search box in log space: variance, age lengthscale, year lengthscale, excess noise.
constexpr std::array<double, 4> kLogLower = {-13.8, -0.7, -0.7, -27.6};
constexpr std::array<double, 4> kLogUpper = {2.3, 4.6, 4.6, 0.0};

SurfaceHyper hyper_from_log(const double* eta, double noise_floor) {
  auto c = [&](int i) { return std::clamp(eta[i], kLogLower[i], kLogUpper[i]); };
  return {std::exp(c(0)), std::exp(c(1)), std::exp(c(2)), noise_floor + std::exp(c(3))};
}

struct Objective {
  const SurfaceData* data;
  double noise_floor;
};

double negative_ll(const gsl_vector* v, void* params) {
  const auto* obj = static_cast<const Objective*>(params);
  try {
    const double ll = gls_fit(*obj->data, hyper_from_log(v->data, obj->noise_floor)).log_likelihood;
    return std::isfinite(ll) ? -ll : 1e100;
  } catch (const std::exception&) {
    return 1e100;
  }
}

} // namespace

double surface_log_marginal_likelihood(const ReferenceTable& table, const SurfaceHyper& hyper) {
  return gls_fit(surface_data(table), hyper).log_likelihood;
}

InterpolationResult interpolate_reference_gp(const ReferenceTable& sparse, const std::vector<int>& target_years,
                                             const InterpolationOptions& options) {
  sparse.validate();
  if (sparse.grid.n_years() < 2) throw DataError("interpolate_reference_gp: need at least 2 distinct years");
  if (target_years.empty()) throw DataError("interpolate_reference_gp: no target years");
  for (int y : target_years)
    if (y < sparse.grid.first_year() - 5 || y > sparse.grid.last_year() + 5)
      throw DataError("interpolate_reference_gp: target year " + std::to_string(y) +
                      " too far outside the observed years");
  std::set<int> unique_years(target_years.begin(), target_years.end());

  const SurfaceData data = surface_data(sparse);
  InterpolationResult result;

  if (options.fixed) {
    result.hyper = *options.fixed;
  } else {
    if (options.restarts < 1) throw std::invalid_argument("interpolate_reference_gp: restarts must be >= 1");
    Objective obj{&data, options.noise_floor};
    gsl_multimin_function fn{&negative_ll, 4, &obj};
    double best_value = std::numeric_limits<double>::infinity();
    std::array<double, 4> best_eta{};
    for (int r = 0; r < options.restarts; ++r) {
      Rng rng = make_rng(options.seed, static_cast<std::uint64_t>(r));
      std::array<double, 4> eta{};
      for (int i = 0; i < 4; ++i) {
        // starts kept away from the box edges
        const double lo = kLogLower[i] + 0.2 * (kLogUpper[i] - kLogLower[i]);
        const double hi = kLogUpper[i] - 0.2 * (kLogUpper[i] - kLogLower[i]);
        eta[i] = std::uniform_real_distribution<double>(lo, hi)(rng);
      }
      gsl_vector* x = gsl_vector_alloc(4);
      gsl_vector* step = gsl_vector_alloc(4);
      for (int i = 0; i < 4; ++i) {
        gsl_vector_set(x, i, eta[i]);
        gsl_vector_set(step, i, 1.0);
      }
      result.start_log_likelihoods.push_back(-negative_ll(x, &obj));
      gsl_multimin_fminimizer* nm = gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, 4);
      gsl_multimin_fminimizer_set(nm, &fn, x, step);
      for (int iter = 0; iter < 3000; ++iter) {
        if (gsl_multimin_fminimizer_iterate(nm) != GSL_SUCCESS) break;
        if (gsl_multimin_test_size(gsl_multimin_fminimizer_size(nm), 1e-7) == GSL_SUCCESS) break;
      }
      const double value = gsl_multimin_fminimizer_minimum(nm);
      if (value < best_value) {
        best_value = value;
        result.best_restart = r;
        for (int i = 0; i < 4; ++i)
          best_eta[i] = std::clamp(gsl_vector_get(nm->x, i), kLogLower[i], kLogUpper[i]);
      }
      gsl_multimin_fminimizer_free(nm);
      gsl_vector_free(x);
      gsl_vector_free(step);
    }
    if (!(best_value < 1e100)) throw std::runtime_error("interpolate_reference_gp: optimizer failed on every restart");
    result.hyper = hyper_from_log(best_eta.data(), options.noise_floor);
  }

  const GlsFit fit = gls_fit(data, result.hyper);
  result.log_marginal_likelihood = fit.log_likelihood;
  result.mean_coefficients = fit.beta;

  const std::vector<int> years(unique_years.begin(), unique_years.end());
  result.table.label = sparse.label;
  result.table.grid = AgeYearGrid(sparse.grid.ages(), years);
  result.table.rates.resize(result.table.grid.n_ages(), result.table.grid.n_years());
  const auto k = KernelSpec<double>::separable(result.hyper.process_variance, result.hyper.lengthscale_age,
                                               result.hyper.lengthscale_year);
  PointMatrix<double> test(result.table.grid.n_ages(), 2);
  for (Eigen::Index j = 0; j < result.table.grid.n_years(); ++j) {
    Eigen::MatrixXd design(result.table.grid.n_ages(), 3);
    for (Eigen::Index i = 0; i < result.table.grid.n_ages(); ++i) {
      test.row(i) << result.table.grid.ages()[i], years[j];
      design.row(i) << 1.0, result.table.grid.ages()[i] - data.age0, years[j] - data.year0;
    }
    const Vector mean = design * fit.beta + cross_covariance(k, test, data.points) * fit.alpha;
    result.table.rates.col(j) = mean.array().exp();
  }
  return result;
}

PriorMeanCalibration calibrate_prior_means(const ReferenceTable& table, bool include_year_trend, double offset,
                                           int age_pivot, std::optional<int> year_pivot) {
  table.validate();
  if (table.grid.n_ages() < 2) throw DataError("calibrate_prior_means: need at least 2 ages");
  if (include_year_trend && table.grid.n_years() < 2)
    throw DataError("calibrate_prior_means: need at least 2 years for a year trend");
  const int y0 = year_pivot.value_or(table.grid.first_year());
  const Eigen::Index p = include_year_trend ? 3 : 2;
  Eigen::MatrixXd design(table.grid.n_cells(), p);
  Vector y(table.grid.n_cells());
  Eigen::Index k = 0;
  for (Eigen::Index j = 0; j < table.grid.n_years(); ++j)
    for (Eigen::Index i = 0; i < table.grid.n_ages(); ++i, ++k) {
      design(k, 0) = 1.0;
      design(k, 1) = table.grid.ages()[i] - age_pivot;
      if (include_year_trend) design(k, 2) = table.grid.years()[j] - y0;
      y(k) = std::log(table.rates(i, j));
    }
  const Vector beta = design.colPivHouseholderQr().solve(y);
  PriorMeanCalibration cal;
  cal.beta0_mean = beta(0) + offset;
  cal.beta_ag_mean = beta(1);
  if (include_year_trend) cal.beta_yr_mean = beta(2);
  cal.reference_label = table.label;
  return cal;
}

} // namespace mortdef
