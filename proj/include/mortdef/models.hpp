#pragma once

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mortdef/data.hpp"
#include "mortdef/gp.hpp"
#include "mortdef/reference_prep.hpp"
#include "mortdef/rng.hpp"
#include "mortdef/stats.hpp"

namespace mortdef {

enum class ModelId { FD0, FD1, ADFE, ADAR, ADGP, TDAR, TDGP, GPS1, GPS2 };

inline constexpr std::array<ModelId, 9> kAllModels = {ModelId::FD0,  ModelId::FD1,  ModelId::ADFE,
                                                      ModelId::ADAR, ModelId::ADGP, ModelId::TDAR,
                                                      ModelId::TDGP, ModelId::GPS1, ModelId::GPS2};

std::string_view to_string(ModelId id);
/// Accepts the printed names ("AD-GP") case-insensitively.
ModelId parse_model_id(std::string_view name);

/// Which axis the latent block lives on.
enum class LatentAxis { None, Age, Year, AgeYear };

LatentAxis latent_axis(ModelId id);
bool is_deflator_model(ModelId id); // FD-0 .. TD-GP
bool is_direct_model(ModelId id);   // GP-S1, GP-S2
bool is_gp_model(ModelId id);
bool is_ar_model(ModelId id);

using PriorCatalog = std::map<std::string, TruncNormalPrior>;

/// Prior catalog of `id`. Direct models center beta0, beta_ag, beta_yr on the
/// calibration; the others ignore it.
PriorCatalog default_prior_catalog(ModelId id, const std::optional<PriorMeanCalibration>& calibration = {});

/// Calibration centers used when no reference table is supplied for a direct
/// model: beta0 -5.0, beta_ag 0.1, beta_yr 0.
PriorMeanCalibration default_calibration();

/// Prior mean of the deflators in every deflator model.
inline constexpr double kDeflatorPriorMean = -0.5;

struct ModelSpec {
  ModelId id = ModelId::FD1;
  std::optional<std::string> reference_label;
  AgeYearGrid grid;
  PriorCatalog priors;
  std::optional<PriorMeanCalibration> calibration;
  /// Age and year subtracted in the direct models' linear means.
  int age_pivot = 60;
  int year_pivot = 2013;

  /// Default priors; pivots at the grid's first age and year.
  static ModelSpec make(ModelId id, AgeYearGrid grid, std::optional<std::string> reference_label,
                        std::optional<PriorMeanCalibration> calibration = std::nullopt);

  void validate() const;

  /// Number of latent values (deflators or log-rates).
  Eigen::Index latent_size() const;
  /// Scalar parameter names in sampling order.
  std::vector<std::string> scalar_names() const;
  const TruncNormalPrior& prior(const std::string& name) const;
};

/// Named parameter blocks. Only the blocks of the model are populated:
/// theta (FD-1); theta_vec per age or per year (AD-FE, AD-AR, TD-AR); z, the
/// whitened latent vector (GP models).
struct ParameterVector {
  std::optional<double> theta;
  Vector theta_vec;
  Vector z;
  std::optional<double> omega;
  std::optional<double> rho;
  std::optional<double> sigma2;
  std::optional<double> phi_ag;
  std::optional<double> phi_yr;
  std::optional<double> beta0;
  std::optional<double> beta_ag;
  std::optional<double> beta_yr;

  std::optional<double> scalar(std::string_view name) const;
  void set_scalar(std::string_view name, double value);
};

/// Throws std::invalid_argument unless exactly the model's blocks are present
/// with the right sizes.
void check_blocks(const ModelSpec& spec, const ParameterVector& params);
/// Bound constraints: omega >= 0, rho in (0, 1), sigma2 > 0, phi > 0.
bool within_bounds(const ModelSpec& spec, const ParameterVector& params);

/// Cholesky factors of unit-variance correlation matrices on the grid axes,
/// keyed by lengthscale. Not thread-safe; one instance per chain.
class LatentFactorCache {
 public:
  const CholeskyFactor<double>& age(const std::vector<int>& ages, double lengthscale);
  const CholeskyFactor<double>& year(const std::vector<int>& years, double lengthscale);

 private:
  struct Entry {
    double lengthscale = -1;
    std::size_t n = 0;
    int first = 0;
    CholeskyFactor<double> factor;
  };
  struct Slot {
    std::array<Entry, 2> entries;
    int next = 0;
  };
  static const CholeskyFactor<double>& lookup(Slot& slot, const std::vector<int>& axis, double lengthscale);
  Slot age_;
  Slot year_;
};

/// Latent values from whitened coordinates for every latent model: deflators
/// per age/year (AD-*, TD-*), log-rates psi per age (GP-S1) or per cell in
/// column-major age x year order (GP-S2). Hyperparameters come from `params`.
Vector latent_from_whitened(const ModelSpec& spec, const ParameterVector& params, const Vector& w,
                            LatentFactorCache& cache);
Vector whitened_from_latent(const ModelSpec& spec, const ParameterVector& params, const Vector& latent,
                            LatentFactorCache& cache);
/// log |det d latent / d w| at the hyperparameters of `params`.
double latent_log_jacobian(const ModelSpec& spec, const ParameterVector& params, LatentFactorCache& cache);

/// Latent values of a parameter vector: theta_vec, or the materialized GP.
Vector latent_values(const ModelSpec& spec, const ParameterVector& params, LatentFactorCache& cache);
Vector latent_values(const ModelSpec& spec, const ParameterVector& params);

/// Fund log-rates implied by the parameters, [age][year] on spec.grid.
/// `ref_log_rates` is log m^ref on the same grid (ignored by direct models).
Matrix fund_log_rates(const ModelSpec& spec, const ParameterVector& params, const Matrix& ref_log_rates,
                      LatentFactorCache& cache);

struct MortalitySurface {
  AgeYearGrid grid;
  Matrix log_rates;
  /// theta_{x,t} = log m - log m^ref when a reference is available.
  std::optional<Matrix> deflators;
};

/// log mu_{x,t} = log m_{x,t} + log E_{x,t}; -inf where E = 0.
Matrix log_intensity(const ModelSpec& spec, const ParameterVector& params, const ReferenceTable* ref,
                     const Matrix& exposures);

double log_prior(const ModelSpec& spec, const ParameterVector& params);
/// Sum over cells with E > 0 (and mask true, when given).
double log_likelihood(const ModelSpec& spec, const ParameterVector& params, const FundDataset& data,
                      const ReferenceTable* ref, const CellMask* mask = nullptr);
double log_posterior(const ModelSpec& spec, const ParameterVector& params, const FundDataset& data,
                     const ReferenceTable* ref, const CellMask* mask = nullptr);

MortalitySurface deflator_surface(const ModelSpec& spec, const ParameterVector& params, const ReferenceTable* ref);

FundDataset simulate_fund(const ModelSpec& spec, const ParameterVector& params, const Matrix& exposures,
                          const ReferenceTable* ref, Rng& rng);

/// Age profile of fund exposures, the same in every year: peak/2 at the first
/// age, rising linearly to `peak` at age 70 (or the last age, if lower), then
/// falling linearly to `floor` at the last age.
Matrix exposure_profile(const AgeYearGrid& grid, double peak = 250.0, double floor = 5.0);

/// Draws every missing block from its prior: hyperparameters from their
/// priors, latents through the whitened transform with standard normal w.
ParameterVector complete_from_prior(const ModelSpec& spec, ParameterVector partial, Rng& rng);

/// Per-draw log-rate curves over spec.grid ages at `target_year` (rows =
/// draws). Out-of-grid years extend TD-AR by its AR(1) recursion, TD-GP and
/// GP-S2 by GP conditioning along the year axis, both with fresh noise drawn
/// from `rng`. Deflator models need `ref_future` to cover the target year.
Matrix predict_mortality(const ModelSpec& spec, std::span<const ParameterVector> draws, int target_year,
                         const ReferenceTable* ref_future, Rng& rng);

/// Evaluation state for one model on one dataset: precomputed observed cells
/// and a factor cache. Copy per thread.
class PosteriorModel {
 public:
  PosteriorModel(ModelSpec spec, const FundDataset& data, const ReferenceTable* ref,
                 const CellMask* mask = nullptr);

  const ModelSpec& spec() const { return spec_; }
  const Matrix& ref_log_rates() const { return ref_log_rates_; }
  /// Cells skipped because their exposure is zero.
  const std::vector<std::pair<int, int>>& zero_exposure_cells() const { return zero_exposure_; }
  Eigen::Index observed_cells() const { return static_cast<Eigen::Index>(cells_.size()); }

  double log_prior(const ParameterVector& params) const;
  double log_likelihood(const ParameterVector& params);
  /// Likelihood given the latent values directly.
  double log_likelihood_latent(const ParameterVector& params, const Vector& latent) const;
  double log_posterior(const ParameterVector& params);

  LatentFactorCache& cache() { return cache_; }

 private:
  struct Cell {
    Eigen::Index age;
    Eigen::Index year;
    double log_offset; // log E (+ log m^ref for deflator models)
    std::int64_t deaths;
    double log_factorial;
  };

  double cell_latent(const ParameterVector& params, const Vector& latent, const Cell& c) const;

  ModelSpec spec_;
  Matrix ref_log_rates_;
  std::vector<Cell> cells_;
  std::vector<std::pair<int, int>> zero_exposure_;
  LatentFactorCache cache_;
};

} // namespace mortdef
