#include "mortdef/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <gsl/gsl_cdf.h>

namespace mortdef {

double PredictivePmf::cdf_at(std::int64_t k) const {
  if (k < 0) return 0.0;
  if (k >= cdf.size()) return cdf(cdf.size() - 1);
  return cdf(k);
}

std::int64_t PredictivePmf::median() const {
  for (Eigen::Index k = 0; k < cdf.size(); ++k)
    if (cdf(k) >= 0.5) return k;
  return k_max();
}

namespace {

constexpr std::int64_t kMaxSupport = 10'000'000;

// Per-draw pmf terms up to the point where the remaining tail is below a
// tenth of the mixture budget.
std::vector<double> component_terms(const NegBinParams& p) {
  std::vector<double> terms;
  double total = 0.0;
  for (std::int64_t k = 0; k < kMaxSupport; ++k) {
    const double v = std::exp(negbin_logpmf(k, p));
    terms.push_back(v);
    total += v;
    if (static_cast<double>(k) >= p.mean && total >= 1.0 - 0.1 * kPmfTail) return terms;
  }
  throw std::runtime_error("predictive pmf: support exceeds 1e7 counts");
}

void check_aligned(std::size_t a, std::size_t b) {
  if (a != b) throw std::invalid_argument("scores: forecasts and observations differ in length");
  if (a == 0) throw std::invalid_argument("scores: no cells to score");
}

} // namespace

PredictivePmf mixture_pmf(std::span<const double> means, std::span<const double> overdispersions) {
  if (means.empty() || means.size() != overdispersions.size())
    throw std::invalid_argument("mixture_pmf: need matching, non-empty draw lists");
  std::vector<std::vector<double>> comps;
  comps.reserve(means.size());
  std::size_t k_len = 0;
  for (std::size_t s = 0; s < means.size(); ++s) {
    comps.push_back(component_terms({means[s], overdispersions[s]}));
    k_len = std::max(k_len, comps.back().size());
  }
  PredictivePmf out;
  out.mass = Vector::Zero(static_cast<Eigen::Index>(k_len));
  for (std::size_t s = 0; s < comps.size(); ++s) {
    auto& c = comps[s];
    for (std::size_t k = c.size(); k < k_len; ++k)
      c.push_back(std::exp(negbin_logpmf(static_cast<std::int64_t>(k), {means[s], overdispersions[s]})));
    out.mass += Eigen::Map<const Vector>(c.data(), static_cast<Eigen::Index>(k_len));
    out.mean += means[s];
  }
  const double n = static_cast<double>(means.size());
  out.mass /= n;
  out.mean /= n;
  out.cdf.resize(out.mass.size());
  std::partial_sum(out.mass.begin(), out.mass.end(), out.cdf.begin());
  return out;
}

std::vector<PredictivePmf> predictive_pmfs(const ModelSpec& spec, std::span<const ParameterVector> draws,
                                           const std::vector<std::pair<int, int>>& cells, const FundDataset& data,
                                           const ReferenceTable* ref) {
  if (draws.empty()) throw std::invalid_argument("predictive_pmfs: no draws");
  if (!(data.grid == spec.grid)) throw std::invalid_argument("predictive_pmfs: dataset grid does not match model grid");
  std::vector<std::pair<Eigen::Index, Eigen::Index>> idx;
  for (auto [age, year] : cells) {
    const auto i = spec.grid.age_index(age), j = spec.grid.year_index(year);
    if (!(data.exposures(i, j) > 0))
      throw std::invalid_argument("predictive_pmfs: zero exposure at (" + std::to_string(age) + "," +
                                  std::to_string(year) + ")");
    idx.emplace_back(i, j);
  }
  const Matrix ref_log = is_deflator_model(spec.id)
                             ? (ref ? ref->log_rates_on(spec.grid)
                                    : throw std::invalid_argument("predictive_pmfs: reference table required"))
                             : Matrix::Zero(spec.grid.n_ages(), spec.grid.n_years());
  const auto n_cells = static_cast<Eigen::Index>(cells.size());
  const auto n_draws = static_cast<Eigen::Index>(draws.size());
  Matrix mu(n_cells, n_draws);
  std::vector<double> omega(draws.size());
  LatentFactorCache cache;
  for (Eigen::Index s = 0; s < n_draws; ++s) {
    const auto& p = draws[static_cast<std::size_t>(s)];
    check_blocks(spec, p);
    const Matrix log_m = fund_log_rates(spec, p, ref_log, cache);
    for (Eigen::Index c = 0; c < n_cells; ++c) {
      const auto [i, j] = idx[static_cast<std::size_t>(c)];
      mu(c, s) = std::exp(log_m(i, j)) * data.exposures(i, j);
    }
    omega[static_cast<std::size_t>(s)] = p.omega.value_or(0.0);
  }
  std::vector<PredictivePmf> out;
  out.reserve(cells.size());
  for (Eigen::Index c = 0; c < n_cells; ++c) {
    const Vector row = mu.row(c).transpose();
    auto pmf = mixture_pmf(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())), omega);
    pmf.age = cells[static_cast<std::size_t>(c)].first;
    pmf.year = cells[static_cast<std::size_t>(c)].second;
    out.push_back(std::move(pmf));
  }
  return out;
}

double log_score(std::span<const PredictivePmf> pmfs, std::span<const std::int64_t> observed, int* floored) {
  check_aligned(pmfs.size(), observed.size());
  double sum = 0.0;
  int n_floored = 0;
  for (std::size_t i = 0; i < pmfs.size(); ++i) {
    const double p = pmfs[i].pmf(observed[i]);
    if (p < kLogScoreFloor) ++n_floored;
    sum += std::log(std::max(p, kLogScoreFloor));
  }
  if (floored) *floored = n_floored;
  return -sum / static_cast<double>(pmfs.size());
}

double rps(std::span<const PredictivePmf> pmfs, std::span<const std::int64_t> observed, int d_bar, bool include_k0) {
  check_aligned(pmfs.size(), observed.size());
  if (d_bar < 1) throw std::invalid_argument("rps: d_bar must be >= 1");
  double sum = 0.0;
  for (std::size_t i = 0; i < pmfs.size(); ++i)
    for (int k = include_k0 ? 0 : 1; k <= d_bar; ++k) {
      const double diff = pmfs[i].cdf_at(k) - (observed[i] <= k ? 1.0 : 0.0);
      sum += diff * diff;
    }
  return sum / static_cast<double>(pmfs.size());
}

double mae(std::span<const PredictivePmf> pmfs, std::span<const std::int64_t> observed, bool use_median) {
  check_aligned(pmfs.size(), observed.size());
  std::vector<double> point;
  for (const auto& p : pmfs) point.push_back(use_median ? static_cast<double>(p.median()) : p.mean);
  return mae(point, observed);
}

double mae(std::span<const double> point, std::span<const std::int64_t> observed) {
  check_aligned(point.size(), observed.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) sum += std::abs(point[i] - static_cast<double>(observed[i]));
  return sum / static_cast<double>(point.size());
}

double ScoreReport::mean(const std::string& split, const std::string& metric) const {
  double sum = 0.0;
  int n = 0;
  for (const auto& f : folds)
    for (const auto& s : f.splits) {
      if (s.split != split) continue;
      if (metric == "log") sum += s.log;
      else if (metric == "rps") sum += s.rps;
      else if (metric == "mae") sum += s.mae;
      else throw std::invalid_argument("unknown metric '" + metric + "'");
      ++n;
    }
  if (n == 0) throw std::invalid_argument("no scores for split '" + split + "'");
  return sum / n;
}

SplitScores score_cells(const std::string& split, std::span<const PredictivePmf> pmfs,
                        std::span<const std::int64_t> observed, const ScoreOptions& options) {
  SplitScores s;
  s.split = split;
  s.n = static_cast<Eigen::Index>(pmfs.size());
  s.log = log_score(pmfs, observed, &s.floored);
  s.rps = rps(pmfs, observed, options.d_bar, options.rps_include_k0);
  s.mae = mae(pmfs, observed, options.mae_median);
  return s;
}

ScoreReport loo_cv_by_year(const ModelSpec& spec, const FundDataset& data, const ReferenceTable* ref,
                           const McmcConfig& config, const ScoreOptions& options,
                           std::optional<std::vector<int>> fold_years) {
  const auto& years = spec.grid.years();
  if (spec.grid.n_years() - 1 < 3) throw std::invalid_argument("loo_cv_by_year: need at least 3 training years per fold");
  const std::vector<int> folds = fold_years.value_or(years);
  ScoreReport report;
  report.model = std::string(to_string(spec.id));
  report.d_bar = options.d_bar;
  report.rps_include_k0 = options.rps_include_k0;

  for (int held_out : folds) {
    const auto col = spec.grid.year_index(held_out);
    CellMask mask = CellMask::Constant(spec.grid.n_ages(), spec.grid.n_years(), true);
    mask.col(col).setConstant(false);

    std::vector<std::pair<int, int>> out_cells, in_cells;
    std::vector<std::int64_t> out_obs, in_obs;
    for (Eigen::Index j = 0; j < spec.grid.n_years(); ++j)
      for (Eigen::Index i = 0; i < spec.grid.n_ages(); ++i) {
        if (!(data.exposures(i, j) > 0)) continue;
        const std::pair<int, int> cell{spec.grid.ages()[i], years[j]};
        if (j == col) {
          out_cells.push_back(cell);
          out_obs.push_back(data.deaths(i, j));
        } else {
          in_cells.push_back(cell);
          in_obs.push_back(data.deaths(i, j));
        }
      }
    if (out_cells.empty())
      throw std::invalid_argument("loo_cv_by_year: held-out year " + std::to_string(held_out) + " has no exposure");

    McmcConfig fold_config = config;
    fold_config.seed = derive_seed(config.seed, static_cast<std::uint64_t>(col));
    const auto draws = run_mcmc(spec, data, ref, fold_config, &mask);

    FoldReport fold;
    fold.fold_year = held_out;
    const auto out_pmfs = predictive_pmfs(spec, draws.draws, out_cells, data, ref);
    fold.splits.push_back(score_cells("out", out_pmfs, out_obs, options));
    const auto in_pmfs = predictive_pmfs(spec, draws.draws, in_cells, data, ref);
    fold.splits.push_back(score_cells("in", in_pmfs, in_obs, options));
    report.folds.push_back(std::move(fold));
  }
  return report;
}

ChiSquareResult chi_square_consistency(std::span<const double> observed, std::span<const double> expected,
                                       double min_expected) {
  if (observed.size() != expected.size()) throw std::invalid_argument("chi-square: length mismatch");
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (!(expected[i] >= 0) || !std::isfinite(expected[i]))
      throw std::invalid_argument("chi-square: expected counts must be finite and non-negative");
    if (!(observed[i] >= 0)) throw std::invalid_argument("chi-square: observed counts must be non-negative");
  }
  ChiSquareResult r;
  std::vector<int> group;
  double acc = 0.0;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    group.push_back(static_cast<int>(i));
    acc += expected[i];
    if (acc >= min_expected) {
      r.pooling.push_back(group);
      group.clear();
      acc = 0.0;
    }
  }
  if (!group.empty()) {
    if (r.pooling.empty()) r.pooling.push_back(group);
    else r.pooling.back().insert(r.pooling.back().end(), group.begin(), group.end());
  }
  if (r.pooling.size() < 2) throw std::invalid_argument("chi-square: fewer than 2 cells after pooling");

  const auto g = static_cast<Eigen::Index>(r.pooling.size());
  r.observed = Vector::Zero(g);
  r.expected = Vector::Zero(g);
  for (Eigen::Index k = 0; k < g; ++k)
    for (int i : r.pooling[k]) {
      r.observed(k) += observed[i];
      r.expected(k) += expected[i];
    }
  if (!(r.expected.minCoeff() > 0)) throw std::invalid_argument("chi-square: pooled expected count is zero");
  r.statistic = ((r.observed - r.expected).array().square() / r.expected.array()).sum();
  r.dof = static_cast<int>(g) - 1;
  r.p_value = gsl_cdf_chisq_Q(r.statistic, r.dof);
  return r;
}

std::pair<double, double> ks_uniform(std::vector<double> sample) {
  if (sample.empty()) throw std::invalid_argument("ks_uniform: empty sample");
  std::sort(sample.begin(), sample.end());
  const double n = static_cast<double>(sample.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double u = std::clamp(sample[i], 0.0, 1.0);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - u, u - static_cast<double>(i) / n});
  }
  // Kolmogorov limit law with Stephens' small-sample correction
  const double sq = std::sqrt(n);
  const double x = (sq + 0.12 + 0.11 / sq) * d;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * x * x);
    p += term;
    if (std::abs(term) < 1e-16) break;
  }
  return {d, std::clamp(p, 0.0, 1.0)};
}

} // namespace mortdef
