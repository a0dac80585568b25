#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mortdef/data.hpp"

namespace mortdef {

/// log m(x) = intercept + slope * (x - pivot_age)
struct GompertzCoeffs {
  double intercept = 0;
  double slope = 0;
  int pivot_age = 0;

  bool slope_is_negative() const { return slope < 0; }
};

/// OLS of log m_{x,year} on (x - age_lo) over ages [age_lo, age_hi].
GompertzCoeffs gompertz_fit(const ReferenceTable& table, int year, int age_lo, int age_hi);

Vector gompertz_extrapolate(const GompertzCoeffs& coeffs, const std::vector<int>& ages);

struct ExtrapolationResult {
  ReferenceTable table;
  std::vector<int> years;
  std::vector<GompertzCoeffs> coeffs; // one per year
};

/// Extends every year of `table` to `last_age` with a per-year Gompertz fit on
/// [fit_age_lo, fit_age_hi]. Existing cells are kept as they are.
ExtrapolationResult extrapolate_reference(const ReferenceTable& table, int fit_age_lo, int fit_age_hi,
                                          int last_age);

/// Hyperparameters of the separable squared-exponential surface used to
/// interpolate a table across years.
struct SurfaceHyper {
  double process_variance = 0;
  double lengthscale_age = 0;
  double lengthscale_year = 0;
  double noise_variance = 0;
};

struct InterpolationOptions {
  int restarts = 8;
  std::uint64_t seed = 0;
  double noise_floor = 1e-10;
  /// Skip the likelihood search and use these hyperparameters as given.
  std::optional<SurfaceHyper> fixed;
};

struct InterpolationResult {
  ReferenceTable table;
  SurfaceHyper hyper;
  /// GLS mean (intercept, per age, per year) around (first age, first year).
  Eigen::Vector3d mean_coefficients = Eigen::Vector3d::Zero();
  double log_marginal_likelihood = 0;
  /// Log marginal likelihood at each restart's starting point.
  std::vector<double> start_log_likelihoods;
  int best_restart = -1;
};

/// Log marginal likelihood of the log-rate surface with the linear mean
/// profiled out by generalized least squares.
double surface_log_marginal_likelihood(const ReferenceTable& table, const SurfaceHyper& hyper);

/// Posterior-mean log-rate surface of a GP fitted to the observed years,
/// exponentiated on (table ages) x target_years. Hyperparameters maximize the
/// log marginal likelihood by multi-start Nelder-Mead in log space.
InterpolationResult interpolate_reference_gp(const ReferenceTable& sparse, const std::vector<int>& target_years,
                                             const InterpolationOptions& options = {});

/// Prior centers of the direct-model regression coefficients.
struct PriorMeanCalibration {
  double beta0_mean = -5.0;
  double beta_ag_mean = 0.1;
  std::optional<double> beta_yr_mean;
  std::string reference_label;
};

/// OLS of log m_{x,t} on (x - age_pivot) [and (t - year_pivot)]; the
/// intercept is shifted by `offset`.
PriorMeanCalibration calibrate_prior_means(const ReferenceTable& table, bool include_year_trend,
                                           double offset = -0.5, int age_pivot = 60,
                                           std::optional<int> year_pivot = std::nullopt);

} // namespace mortdef
