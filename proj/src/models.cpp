#include "mortdef/models.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <stdexcept>

namespace mortdef {

namespace {

constexpr std::array<std::string_view, 9> kModelNames = {"FD-0",  "FD-1",  "AD-FE", "AD-AR", "AD-GP",
                                                         "TD-AR", "TD-GP", "GP-S1", "GP-S2"};

PointMatrix<double> axis_points(const std::vector<int>& axis) {
  PointMatrix<double> p(static_cast<Eigen::Index>(axis.size()), 1);
  for (std::size_t i = 0; i < axis.size(); ++i) p(static_cast<Eigen::Index>(i), 0) = axis[i];
  return p;
}

double require(const std::optional<double>& v, const char* name) {
  if (!v) throw std::invalid_argument(std::string("missing parameter ") + name);
  return *v;
}

// theta_init prior of the AR models, (center, scale).
std::pair<double, double> ar_initial(const ModelSpec& spec) {
  const auto& p = spec.prior("theta_init");
  return {p.center, p.scale};
}

Matrix reference_on_grid(const ModelSpec& spec, const ReferenceTable* ref) {
  if (!is_deflator_model(spec.id)) return Matrix::Zero(spec.grid.n_ages(), spec.grid.n_years());
  if (!ref) throw std::invalid_argument(std::string(to_string(spec.id)) + " needs a reference table");
  return ref->log_rates_on(spec.grid);
}

} // namespace

std::string_view to_string(ModelId id) { return kModelNames[static_cast<std::size_t>(id)]; }

ModelId parse_model_id(std::string_view name) {
  std::string upper(name);
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  for (std::size_t i = 0; i < kModelNames.size(); ++i)
    if (upper == kModelNames[i]) return kAllModels[i];
  throw std::invalid_argument("unknown model '" + std::string(name) + "'");
}

LatentAxis latent_axis(ModelId id) {
  switch (id) {
    case ModelId::FD0:
    case ModelId::FD1:
      return LatentAxis::None;
    case ModelId::ADFE:
    case ModelId::ADAR:
    case ModelId::ADGP:
    case ModelId::GPS1:
      return LatentAxis::Age;
    case ModelId::TDAR:
    case ModelId::TDGP:
      return LatentAxis::Year;
    case ModelId::GPS2:
      return LatentAxis::AgeYear;
  }
  return LatentAxis::None;
}

bool is_deflator_model(ModelId id) { return !is_direct_model(id); }
bool is_direct_model(ModelId id) { return id == ModelId::GPS1 || id == ModelId::GPS2; }
bool is_gp_model(ModelId id) {
  return id == ModelId::ADGP || id == ModelId::TDGP || id == ModelId::GPS1 || id == ModelId::GPS2;
}
bool is_ar_model(ModelId id) { return id == ModelId::ADAR || id == ModelId::TDAR; }

PriorMeanCalibration default_calibration() { return {-5.0, 0.1, 0.0, "default"}; }

PriorCatalog default_prior_catalog(ModelId id, const std::optional<PriorMeanCalibration>& calibration) {
  const auto deflator = TruncNormalPrior::normal(-0.5, 0.5);
  const auto omega = TruncNormalPrior::positive(0.0, 1.0);
  const auto rho = TruncNormalPrior::unit_interval(1.0, 1.0);
  const auto sigma2 = TruncNormalPrior::positive(0.5, 0.5);
  const auto phi = TruncNormalPrior::positive(4.0, 4.0);
  const auto cal = calibration.value_or(default_calibration());
  switch (id) {
    case ModelId::FD0:
      return {};
    case ModelId::FD1:
    case ModelId::ADFE:
      return {{"theta", deflator}, {"omega", omega}};
    case ModelId::ADAR:
    case ModelId::TDAR:
      return {{"theta_init", deflator}, {"rho", rho}, {"omega", omega}};
    case ModelId::ADGP:
      return {{"sigma2", sigma2}, {"phi_ag", phi}, {"omega", omega}};
    case ModelId::TDGP:
      return {{"sigma2", sigma2}, {"phi_yr", phi}, {"omega", omega}};
    case ModelId::GPS1:
      return {{"beta0", TruncNormalPrior::normal(cal.beta0_mean, 1.0)},
              {"beta_ag", TruncNormalPrior::normal(cal.beta_ag_mean, 0.1)},
              {"sigma2", sigma2},
              {"phi_ag", phi},
              {"omega", omega}};
    case ModelId::GPS2:
      return {{"beta0", TruncNormalPrior::normal(cal.beta0_mean, 1.0)},
              {"beta_ag", TruncNormalPrior::normal(cal.beta_ag_mean, 0.1)},
              {"beta_yr", TruncNormalPrior::normal(cal.beta_yr_mean.value_or(0.0), 0.1)},
              {"sigma2", sigma2},
              {"phi_ag", phi},
              {"phi_yr", phi},
              {"omega", omega}};
  }
  return {};
}

ModelSpec ModelSpec::make(ModelId id, AgeYearGrid grid, std::optional<std::string> reference_label,
                          std::optional<PriorMeanCalibration> calibration) {
  ModelSpec spec;
  spec.id = id;
  spec.reference_label = std::move(reference_label);
  spec.grid = std::move(grid);
  spec.calibration = std::move(calibration);
  spec.priors = default_prior_catalog(id, spec.calibration);
  spec.age_pivot = spec.grid.first_age();
  spec.year_pivot = spec.grid.first_year();
  spec.validate();
  return spec;
}

void ModelSpec::validate() const {
  grid.require_contiguous("model grid");
  const std::string name(to_string(id));
  if (is_deflator_model(id) && !reference_label) throw std::invalid_argument(name + " requires a reference population");
  if (is_direct_model(id) && reference_label) throw std::invalid_argument(name + " does not take a reference population");
  if (is_direct_model(id) && !calibration) throw std::invalid_argument(name + " requires a prior-mean calibration");

  std::set<std::string> expected;
  for (const auto& n : scalar_names()) expected.insert(n);
  if (id == ModelId::ADFE) expected.insert("theta");
  if (is_ar_model(id)) expected.insert("theta_init");
  std::set<std::string> actual;
  for (const auto& [k, prior] : priors) {
    actual.insert(k);
    prior.validate();
  }
  if (actual != expected) throw std::invalid_argument(name + ": prior catalog does not match the model's parameters");
}

Eigen::Index ModelSpec::latent_size() const {
  switch (latent_axis(id)) {
    case LatentAxis::None:
      return 0;
    case LatentAxis::Age:
      return grid.n_ages();
    case LatentAxis::Year:
      return grid.n_years();
    case LatentAxis::AgeYear:
      return grid.n_cells();
  }
  return 0;
}

std::vector<std::string> ModelSpec::scalar_names() const {
  switch (id) {
    case ModelId::FD0:
      return {};
    case ModelId::FD1:
      return {"theta", "omega"};
    case ModelId::ADFE:
      return {"omega"};
    case ModelId::ADAR:
    case ModelId::TDAR:
      return {"rho", "omega"};
    case ModelId::ADGP:
      return {"sigma2", "phi_ag", "omega"};
    case ModelId::TDGP:
      return {"sigma2", "phi_yr", "omega"};
    case ModelId::GPS1:
      return {"beta0", "beta_ag", "sigma2", "phi_ag", "omega"};
    case ModelId::GPS2:
      return {"beta0", "beta_ag", "beta_yr", "sigma2", "phi_ag", "phi_yr", "omega"};
  }
  return {};
}

const TruncNormalPrior& ModelSpec::prior(const std::string& name) const {
  auto it = priors.find(name);
  if (it == priors.end()) throw std::invalid_argument("no prior for " + name);
  return it->second;
}

std::optional<double> ParameterVector::scalar(std::string_view name) const {
  if (name == "theta") return theta;
  if (name == "omega") return omega;
  if (name == "rho") return rho;
  if (name == "sigma2") return sigma2;
  if (name == "phi_ag") return phi_ag;
  if (name == "phi_yr") return phi_yr;
  if (name == "beta0") return beta0;
  if (name == "beta_ag") return beta_ag;
  if (name == "beta_yr") return beta_yr;
  throw std::invalid_argument("unknown scalar parameter " + std::string(name));
}

void ParameterVector::set_scalar(std::string_view name, double value) {
  if (name == "theta") theta = value;
  else if (name == "omega") omega = value;
  else if (name == "rho") rho = value;
  else if (name == "sigma2") sigma2 = value;
  else if (name == "phi_ag") phi_ag = value;
  else if (name == "phi_yr") phi_yr = value;
  else if (name == "beta0") beta0 = value;
  else if (name == "beta_ag") beta_ag = value;
  else if (name == "beta_yr") beta_yr = value;
  else throw std::invalid_argument("unknown scalar parameter " + std::string(name));
}

void check_blocks(const ModelSpec& spec, const ParameterVector& params) {
  static const std::array<std::string_view, 9> all = {"theta",  "omega",  "rho",   "sigma2", "phi_ag",
                                                      "phi_yr", "beta0", "beta_ag", "beta_yr"};
  const auto names = spec.scalar_names();
  for (auto n : all) {
    const bool wanted = std::find(names.begin(), names.end(), n) != names.end();
    if (wanted != params.scalar(n).has_value())
      throw std::invalid_argument(std::string(to_string(spec.id)) + ": parameter block '" + std::string(n) +
                                  (wanted ? "' missing" : "' not part of the model"));
  }
  const bool centered_latent = spec.id == ModelId::ADFE || is_ar_model(spec.id);
  const Eigen::Index want_theta = centered_latent ? spec.latent_size() : 0;
  const Eigen::Index want_z = is_gp_model(spec.id) ? spec.latent_size() : 0;
  if (params.theta_vec.size() != want_theta)
    throw std::invalid_argument(std::string(to_string(spec.id)) + ": theta vector has wrong length");
  if (params.z.size() != want_z)
    throw std::invalid_argument(std::string(to_string(spec.id)) + ": whitened latent vector has wrong length");
}

bool within_bounds(const ModelSpec& spec, const ParameterVector& params) {
  for (const auto& n : spec.scalar_names())
    if (!std::isfinite(*params.scalar(n))) return false;
  if (!params.theta_vec.allFinite() || !params.z.allFinite()) return false;
  if (params.omega && *params.omega < 0) return false;
  if (params.rho && !(*params.rho > 0 && *params.rho < 1)) return false;
  if (params.sigma2 && !(*params.sigma2 > 0)) return false;
  if (params.phi_ag && !(*params.phi_ag > 0)) return false;
  if (params.phi_yr && !(*params.phi_yr > 0)) return false;
  return true;
}

const CholeskyFactor<double>& LatentFactorCache::lookup(Slot& slot, const std::vector<int>& axis,
                                                        double lengthscale) {
  for (auto& e : slot.entries)
    if (e.lengthscale == lengthscale && e.n == axis.size() && e.first == axis.front()) return e.factor;
  auto& e = slot.entries[static_cast<std::size_t>(slot.next)];
  slot.next = 1 - slot.next;
  e.factor = cholesky_with_jitter<double>(build_covariance(KernelSpec<double>::age(1.0, lengthscale), axis_points(axis)));
  e.lengthscale = lengthscale;
  e.n = axis.size();
  e.first = axis.front();
  return e.factor;
}

const CholeskyFactor<double>& LatentFactorCache::age(const std::vector<int>& ages, double lengthscale) {
  return lookup(age_, ages, lengthscale);
}

const CholeskyFactor<double>& LatentFactorCache::year(const std::vector<int>& years, double lengthscale) {
  return lookup(year_, years, lengthscale);
}

namespace {

// Prior mean of the latent values, in latent order.
Vector latent_prior_mean(const ModelSpec& spec, const ParameterVector& params) {
  const auto n = spec.latent_size();
  if (!is_direct_model(spec.id)) return Vector::Constant(n, kDeflatorPriorMean);
  const double b0 = require(params.beta0, "beta0");
  const double bag = require(params.beta_ag, "beta_ag");
  Vector m(n);
  const auto& ages = spec.grid.ages();
  if (spec.id == ModelId::GPS1) {
    for (Eigen::Index i = 0; i < n; ++i) m(i) = b0 + bag * (ages[i] - spec.age_pivot);
  } else {
    const double byr = require(params.beta_yr, "beta_yr");
    const auto na = spec.grid.n_ages();
    for (Eigen::Index j = 0; j < spec.grid.n_years(); ++j)
      for (Eigen::Index i = 0; i < na; ++i)
        m(i + na * j) = b0 + bag * (ages[i] - spec.age_pivot) + byr * (spec.grid.years()[j] - spec.year_pivot);
  }
  return m;
}

const CholeskyFactor<double>& gp_factor_1d(const ModelSpec& spec, const ParameterVector& params,
                                           LatentFactorCache& cache) {
  if (latent_axis(spec.id) == LatentAxis::Year) return cache.year(spec.grid.years(), require(params.phi_yr, "phi_yr"));
  return cache.age(spec.grid.ages(), require(params.phi_ag, "phi_ag"));
}

} // namespace

Vector latent_from_whitened(const ModelSpec& spec, const ParameterVector& params, const Vector& w,
                            LatentFactorCache& cache) {
  const auto n = spec.latent_size();
  if (w.size() != n) throw std::invalid_argument("latent_from_whitened: size mismatch");
  if (spec.id == ModelId::ADFE) {
    const auto& p = spec.prior("theta");
    return (p.center + p.scale * w.array()).matrix();
  }
  if (is_ar_model(spec.id)) {
    const auto [c, s] = ar_initial(spec);
    const double rho = require(params.rho, "rho");
    const double innov = s * std::sqrt(1.0 - rho * rho);
    Vector theta(n);
    theta(0) = c + s * w(0);
    for (Eigen::Index j = 1; j < n; ++j) theta(j) = c * (1.0 - rho) + rho * theta(j - 1) + innov * w(j);
    return theta;
  }
  if (!is_gp_model(spec.id)) return Vector();
  const double sd = std::sqrt(require(params.sigma2, "sigma2"));
  Vector out = latent_prior_mean(spec, params);
  if (spec.id == ModelId::GPS2) {
    const auto na = spec.grid.n_ages(), ny = spec.grid.n_years();
    const auto& la = cache.age(spec.grid.ages(), require(params.phi_ag, "phi_ag")).lower;
    const auto& ly = cache.year(spec.grid.years(), require(params.phi_yr, "phi_yr")).lower;
    const Eigen::Map<const Matrix> wm(w.data(), na, ny);
    Matrix field = la.triangularView<Eigen::Lower>() * wm;
    field = (field * ly.transpose().triangularView<Eigen::Upper>()).eval();
    out += sd * Eigen::Map<const Vector>(field.data(), na * ny);
    return out;
  }
  const Vector lw = gp_factor_1d(spec, params, cache).lower.triangularView<Eigen::Lower>() * w;
  out += sd * lw;
  return out;
}

Vector whitened_from_latent(const ModelSpec& spec, const ParameterVector& params, const Vector& latent,
                            LatentFactorCache& cache) {
  const auto n = spec.latent_size();
  if (latent.size() != n) throw std::invalid_argument("whitened_from_latent: size mismatch");
  if (spec.id == ModelId::ADFE) {
    const auto& p = spec.prior("theta");
    return ((latent.array() - p.center) / p.scale).matrix();
  }
  if (is_ar_model(spec.id)) {
    const auto [c, s] = ar_initial(spec);
    const double rho = require(params.rho, "rho");
    const double innov = s * std::sqrt(1.0 - rho * rho);
    Vector w(n);
    w(0) = (latent(0) - c) / s;
    for (Eigen::Index j = 1; j < n; ++j) w(j) = (latent(j) - c * (1.0 - rho) - rho * latent(j - 1)) / innov;
    return w;
  }
  if (!is_gp_model(spec.id)) return Vector();
  const double sd = std::sqrt(require(params.sigma2, "sigma2"));
  const Vector resid = (latent - latent_prior_mean(spec, params)) / sd;
  if (spec.id == ModelId::GPS2) {
    const auto na = spec.grid.n_ages(), ny = spec.grid.n_years();
    const auto& la = cache.age(spec.grid.ages(), require(params.phi_ag, "phi_ag")).lower;
    const auto& ly = cache.year(spec.grid.years(), require(params.phi_yr, "phi_yr")).lower;
    const Eigen::Map<const Matrix> rm(resid.data(), na, ny);
    // W = La^{-1} R Ly^{-T}
    Matrix tmp = la.triangularView<Eigen::Lower>().solve(rm);
    Matrix wm = ly.triangularView<Eigen::Lower>().solve(tmp.transpose()).transpose();
    return Eigen::Map<const Vector>(wm.data(), na * ny);
  }
  return gp_factor_1d(spec, params, cache).lower.triangularView<Eigen::Lower>().solve(resid);
}

double latent_log_jacobian(const ModelSpec& spec, const ParameterVector& params, LatentFactorCache& cache) {
  const auto n = static_cast<double>(spec.latent_size());
  if (spec.id == ModelId::ADFE) return n * std::log(spec.prior("theta").scale);
  if (is_ar_model(spec.id)) {
    const auto [c, s] = ar_initial(spec);
    const double rho = require(params.rho, "rho");
    return std::log(s) + (n - 1) * std::log(s * std::sqrt(1.0 - rho * rho));
  }
  if (!is_gp_model(spec.id)) return 0.0;
  const double half_log_var = 0.5 * std::log(require(params.sigma2, "sigma2"));
  if (spec.id == ModelId::GPS2) {
    const auto& la = cache.age(spec.grid.ages(), require(params.phi_ag, "phi_ag")).lower;
    const double log_la = la.diagonal().array().log().sum();
    const auto& ly = cache.year(spec.grid.years(), require(params.phi_yr, "phi_yr")).lower;
    const double log_ly = ly.diagonal().array().log().sum();
    return n * half_log_var + static_cast<double>(spec.grid.n_years()) * log_la +
           static_cast<double>(spec.grid.n_ages()) * log_ly;
  }
  return n * half_log_var + gp_factor_1d(spec, params, cache).lower.diagonal().array().log().sum();
}

Vector latent_values(const ModelSpec& spec, const ParameterVector& params, LatentFactorCache& cache) {
  if (is_gp_model(spec.id)) return latent_from_whitened(spec, params, params.z, cache);
  return params.theta_vec;
}

Vector latent_values(const ModelSpec& spec, const ParameterVector& params) {
  LatentFactorCache cache;
  return latent_values(spec, params, cache);
}

Matrix fund_log_rates(const ModelSpec& spec, const ParameterVector& params, const Matrix& ref_log_rates,
                      LatentFactorCache& cache) {
  const auto na = spec.grid.n_ages(), ny = spec.grid.n_years();
  Matrix out = is_deflator_model(spec.id) ? ref_log_rates : Matrix::Zero(na, ny);
  if (out.rows() != na || out.cols() != ny) throw std::invalid_argument("reference grid does not match model grid");
  if (spec.id == ModelId::FD1) out.array() += require(params.theta, "theta");
  if (spec.id == ModelId::FD0 || spec.id == ModelId::FD1) return out;
  const Vector latent = latent_values(spec, params, cache);
  switch (latent_axis(spec.id)) {
    case LatentAxis::Age:
      out.colwise() += latent;
      break;
    case LatentAxis::Year:
      out.rowwise() += latent.transpose();
      break;
    case LatentAxis::AgeYear:
      out += Eigen::Map<const Matrix>(latent.data(), na, ny);
      break;
    case LatentAxis::None:
      break;
  }
  return out;
}

Matrix log_intensity(const ModelSpec& spec, const ParameterVector& params, const ReferenceTable* ref,
                     const Matrix& exposures) {
  if (exposures.rows() != spec.grid.n_ages() || exposures.cols() != spec.grid.n_years())
    throw std::invalid_argument("log_intensity: exposure grid does not match model grid");
  LatentFactorCache cache;
  Matrix out = fund_log_rates(spec, params, reference_on_grid(spec, ref), cache);
  out.array() += exposures.array().log(); // -inf where E = 0
  return out;
}

double log_prior(const ModelSpec& spec, const ParameterVector& params) {
  check_blocks(spec, params);
  if (!within_bounds(spec, params)) return -kInf;
  double lp = 0.0;
  for (const auto& n : spec.scalar_names()) lp += truncnormal_logpdf(*params.scalar(n), spec.prior(n));
  if (spec.id == ModelId::ADFE) {
    const auto& p = spec.prior("theta");
    for (Eigen::Index i = 0; i < params.theta_vec.size(); ++i) lp += truncnormal_logpdf(params.theta_vec(i), p);
  } else if (is_ar_model(spec.id)) {
    const auto [c, s] = ar_initial(spec);
    lp += ar1_logdensity(params.theta_vec, AR1DeflatorProcess::from_rho(*params.rho, c, s));
  } else if (is_gp_model(spec.id)) {
    lp += -0.5 * params.z.squaredNorm() - static_cast<double>(params.z.size()) * kLogSqrt2Pi;
  }
  return lp;
}

double log_likelihood(const ModelSpec& spec, const ParameterVector& params, const FundDataset& data,
                      const ReferenceTable* ref, const CellMask* mask) {
  PosteriorModel model(spec, data, ref, mask);
  return model.log_likelihood(params);
}

double log_posterior(const ModelSpec& spec, const ParameterVector& params, const FundDataset& data,
                     const ReferenceTable* ref, const CellMask* mask) {
  PosteriorModel model(spec, data, ref, mask);
  return model.log_posterior(params);
}

MortalitySurface deflator_surface(const ModelSpec& spec, const ParameterVector& params, const ReferenceTable* ref) {
  check_blocks(spec, params);
  LatentFactorCache cache;
  MortalitySurface s;
  s.grid = spec.grid;
  if (is_deflator_model(spec.id)) {
    const Matrix ref_log = reference_on_grid(spec, ref);
    // deflators straight from the latents, not as a difference of log-rates
    const Matrix theta = fund_log_rates(spec, params, Matrix::Zero(ref_log.rows(), ref_log.cols()), cache);
    s.log_rates = theta + ref_log;
    s.deflators = theta;
  } else {
    s.log_rates = fund_log_rates(spec, params, Matrix(), cache);
    if (ref) s.deflators = (s.log_rates - ref->log_rates_on(spec.grid)).eval();
  }
  return s;
}

FundDataset simulate_fund(const ModelSpec& spec, const ParameterVector& params, const Matrix& exposures,
                          const ReferenceTable* ref, Rng& rng) {
  const Matrix log_mu = log_intensity(spec, params, ref, exposures);
  const double omega = params.omega.value_or(0.0);
  FundDataset out;
  out.grid = spec.grid;
  out.exposures = exposures;
  out.deaths = CountMatrix::Zero(exposures.rows(), exposures.cols());
  for (Eigen::Index j = 0; j < exposures.cols(); ++j)
    for (Eigen::Index i = 0; i < exposures.rows(); ++i)
      if (exposures(i, j) > 0) out.deaths(i, j) = negbin_sample({std::exp(log_mu(i, j)), omega}, rng);
  return out;
}

Matrix exposure_profile(const AgeYearGrid& grid, double peak, double floor) {
  if (!(peak > 0) || !(floor >= 0)) throw std::invalid_argument("exposure profile: need peak > 0 and floor >= 0");
  const int first = grid.first_age(), last = grid.last_age();
  const int top = std::clamp(70, first, last);
  Vector by_age(grid.n_ages());
  for (Eigen::Index i = 0; i < grid.n_ages(); ++i) {
    const int a = grid.ages()[i];
    if (a <= top)
      by_age(i) = top == first ? peak : peak / 2 + (peak / 2) * (a - first) / static_cast<double>(top - first);
    else
      by_age(i) = peak + (floor - peak) * (a - top) / static_cast<double>(last - top);
  }
  return by_age.replicate(1, grid.n_years());
}

ParameterVector complete_from_prior(const ModelSpec& spec, ParameterVector partial, Rng& rng) {
  for (const auto& n : spec.scalar_names())
    if (!partial.scalar(n)) partial.set_scalar(n, truncnormal_sample(spec.prior(n), rng));
  const auto n = spec.latent_size();
  std::normal_distribution<double> normal(0.0, 1.0);
  if (is_gp_model(spec.id) && partial.z.size() == 0) {
    partial.z.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) partial.z(i) = normal(rng);
  } else if ((spec.id == ModelId::ADFE || is_ar_model(spec.id)) && partial.theta_vec.size() == 0) {
    Vector w(n);
    for (Eigen::Index i = 0; i < n; ++i) w(i) = normal(rng);
    LatentFactorCache cache;
    partial.theta_vec = latent_from_whitened(spec, partial, w, cache);
  }
  check_blocks(spec, partial);
  return partial;
}

Matrix predict_mortality(const ModelSpec& spec, std::span<const ParameterVector> draws, int target_year,
                         const ReferenceTable* ref_future, Rng& rng) {
  const auto& ages = spec.grid.ages();
  const auto na = spec.grid.n_ages();
  Vector ref_col = Vector::Zero(na);
  if (is_deflator_model(spec.id)) {
    if (!ref_future) throw std::invalid_argument("predict_mortality: deflator models need a future reference table");
    ref_col = ref_future->log_rate_column(ages, target_year);
  }
  const bool in_grid = spec.grid.has_year(target_year);
  const Eigen::Index col = in_grid ? spec.grid.year_index(target_year) : -1;
  const auto& years = spec.grid.years();
  std::normal_distribution<double> normal(0.0, 1.0);
  LatentFactorCache cache;

  Matrix out(static_cast<Eigen::Index>(draws.size()), na);
  for (std::size_t s = 0; s < draws.size(); ++s) {
    const auto& p = draws[s];
    check_blocks(spec, p);
    Vector curve = ref_col;
    switch (spec.id) {
      case ModelId::FD0:
        break;
      case ModelId::FD1:
        curve.array() += *p.theta;
        break;
      case ModelId::ADFE:
      case ModelId::ADAR:
      case ModelId::ADGP:
      case ModelId::GPS1:
        curve += latent_values(spec, p, cache);
        break;
      case ModelId::TDAR: {
        double theta;
        if (in_grid) {
          theta = p.theta_vec(col);
        } else {
          // stationary Gaussian AR(1) is time-reversible, so backward steps use
          // the same recursion
          const auto [c, sd] = ar_initial(spec);
          const double rho = *p.rho;
          const double innov = sd * std::sqrt(1.0 - rho * rho);
          const bool forward = target_year > spec.grid.last_year();
          theta = forward ? p.theta_vec(p.theta_vec.size() - 1) : p.theta_vec(0);
          const int steps = forward ? target_year - spec.grid.last_year() : spec.grid.first_year() - target_year;
          for (int k = 0; k < steps; ++k) theta = c * (1.0 - rho) + rho * theta + innov * normal(rng);
        }
        curve.array() += theta;
        break;
      }
      case ModelId::TDGP: {
        const Vector theta = latent_values(spec, p, cache);
        double value;
        if (in_grid) {
          value = theta(col);
        } else {
          const auto k = KernelSpec<double>::year(*p.sigma2, *p.phi_yr);
          const MeanFunction<double> mean = [](const auto&) { return kDeflatorPriorMean; };
          PointMatrix<double> test(1, 1);
          test(0, 0) = target_year;
          const auto post = gp_condition(k, mean, axis_points(years), theta, test);
          value = post.mean(0) + std::sqrt(std::max(post.covariance(0, 0), 0.0)) * normal(rng);
        }
        curve.array() += value;
        break;
      }
      case ModelId::GPS2: {
        const Vector psi = latent_values(spec, p, cache);
        const Eigen::Map<const Matrix> field(psi.data(), na, spec.grid.n_years());
        if (in_grid) {
          curve = field.col(col);
          break;
        }
        const auto k = KernelSpec<double>::year(*p.sigma2, *p.phi_yr);
        PointMatrix<double> test(1, 1);
        test(0, 0) = target_year;
        double cond_var = 0.0;
        for (Eigen::Index i = 0; i < na; ++i) {
          const double age_term = *p.beta0 + *p.beta_ag * (ages[i] - spec.age_pivot);
          const MeanFunction<double> mean = [&](const Eigen::Matrix<double, 1, Eigen::Dynamic>& y) {
            return age_term + *p.beta_yr * (y(0) - spec.year_pivot);
          };
          const auto post = gp_condition(k, mean, axis_points(years), Vector(field.row(i).transpose()), test);
          curve(i) = post.mean(0);
          cond_var = post.covariance(0, 0);
        }
        // joint noise across ages: sqrt(conditional variance) * L_age * eps
        Vector eps(na);
        for (Eigen::Index i = 0; i < na; ++i) eps(i) = normal(rng);
        const auto& la = cache.age(ages, *p.phi_ag).lower;
        const Vector le = la.triangularView<Eigen::Lower>() * eps;
        curve += std::sqrt(std::max(cond_var, 0.0)) * le;
        break;
      }
    }
    out.row(static_cast<Eigen::Index>(s)) = curve.transpose();
  }
  return out;
}

PosteriorModel::PosteriorModel(ModelSpec spec, const FundDataset& data, const ReferenceTable* ref,
                               const CellMask* mask)
    : spec_(std::move(spec)) {
  spec_.validate();
  data.validate();
  if (!(data.grid == spec_.grid)) throw std::invalid_argument("dataset grid does not match model grid");
  if (mask && (mask->rows() != spec_.grid.n_ages() || mask->cols() != spec_.grid.n_years()))
    throw std::invalid_argument("cell mask does not match model grid");
  ref_log_rates_ = reference_on_grid(spec_, ref);
  for (Eigen::Index j = 0; j < spec_.grid.n_years(); ++j)
    for (Eigen::Index i = 0; i < spec_.grid.n_ages(); ++i) {
      if (mask && !(*mask)(i, j)) continue;
      const double e = data.exposures(i, j);
      if (e <= 0) {
        zero_exposure_.emplace_back(spec_.grid.ages()[i], spec_.grid.years()[j]);
        continue;
      }
      const auto d = data.deaths(i, j);
      cells_.push_back({i, j, std::log(e) + ref_log_rates_(i, j), d, log_factorial(d)});
    }
}

double PosteriorModel::log_prior(const ParameterVector& params) const { return mortdef::log_prior(spec_, params); }

double PosteriorModel::cell_latent(const ParameterVector& params, const Vector& latent, const Cell& c) const {
  switch (latent_axis(spec_.id)) {
    case LatentAxis::None:
      return spec_.id == ModelId::FD1 ? *params.theta : 0.0;
    case LatentAxis::Age:
      return latent(c.age);
    case LatentAxis::Year:
      return latent(c.year);
    case LatentAxis::AgeYear:
      return latent(c.age + spec_.grid.n_ages() * c.year);
  }
  return 0.0;
}

double PosteriorModel::log_likelihood_latent(const ParameterVector& params, const Vector& latent) const {
  const double omega = params.omega.value_or(0.0);
  if (!(omega >= 0)) return -kInf;
  double ll = 0.0;
  if (omega < kPoissonThreshold) {
    for (const auto& c : cells_) {
      const double log_mu = cell_latent(params, latent, c) + c.log_offset;
      ll += -std::exp(log_mu) + static_cast<double>(c.deaths) * log_mu - c.log_factorial;
    }
  } else {
    const double log1p_omega = std::log1p(omega);
    const double log_ratio = std::log(omega) - log1p_omega;
    for (const auto& c : cells_) {
      const double r = std::exp(cell_latent(params, latent, c) + c.log_offset) / omega;
      ll += log_rising_factorial(r, c.deaths) - c.log_factorial - r * log1p_omega +
            static_cast<double>(c.deaths) * log_ratio;
    }
  }
  return std::isnan(ll) ? -kInf : ll;
}

double PosteriorModel::log_likelihood(const ParameterVector& params) {
  check_blocks(spec_, params);
  if (!within_bounds(spec_, params)) return -kInf;
  return log_likelihood_latent(params, latent_values(spec_, params, cache_));
}

double PosteriorModel::log_posterior(const ParameterVector& params) {
  const double lp = log_prior(params);
  if (!std::isfinite(lp)) return -kInf;
  return lp + log_likelihood(params);
}

} // namespace mortdef
