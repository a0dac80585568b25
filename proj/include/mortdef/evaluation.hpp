#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mortdef/data.hpp"
#include "mortdef/inference.hpp"
#include "mortdef/models.hpp"

namespace mortdef {

/// Predictive mass of the count in one cell, truncated at K_max with a tail
/// of at most kPmfTail.
struct PredictivePmf {
  int age = 0;
  int year = 0;
  Vector mass; // k = 0..K_max
  Vector cdf;
  /// Exact predictive mean (mixture of the per-draw means).
  double mean = 0;

  Eigen::Index k_max() const { return mass.size() - 1; }
  double pmf(std::int64_t k) const { return k >= 0 && k < mass.size() ? mass(k) : 0.0; }
  /// P(D <= k); saturates at the retained mass beyond K_max.
  double cdf_at(std::int64_t k) const;
  /// Smallest k with P(D <= k) >= 1/2.
  std::int64_t median() const;
};

inline constexpr double kPmfTail = 1e-6;
inline constexpr double kLogScoreFloor = 1e-12;

/// Mixture of NB(mu_s, omega_s) over draws, one component per entry.
PredictivePmf mixture_pmf(std::span<const double> means, std::span<const double> overdispersions);

/// Predictive pmfs of `cells` ((age, year) pairs on spec.grid) under the
/// posterior draws. Each draw's mean is exp(log m_{x,t}) * exposure.
std::vector<PredictivePmf> predictive_pmfs(const ModelSpec& spec, std::span<const ParameterVector> draws,
                                           const std::vector<std::pair<int, int>>& cells, const FundDataset& data,
                                           const ReferenceTable* ref);

/// -(1/N) sum log max(p(d), floor). `floored` receives the number of floored terms.
double log_score(std::span<const PredictivePmf> pmfs, std::span<const std::int64_t> observed,
                 int* floored = nullptr);
/// (1/N) sum_cells sum_{k=1..d_bar} (P(k) - 1{d <= k})^2; k = 0 is included
/// when `include_k0` is set.
double rps(std::span<const PredictivePmf> pmfs, std::span<const std::int64_t> observed, int d_bar = 10,
           bool include_k0 = false);
/// (1/N) sum |point - d| with the predictive mean, or the median when asked.
double mae(std::span<const PredictivePmf> pmfs, std::span<const std::int64_t> observed, bool use_median = false);
/// Point-forecast MAE.
double mae(std::span<const double> point, std::span<const std::int64_t> observed);

struct ScoreOptions {
  int d_bar = 10;
  bool rps_include_k0 = false;
  bool mae_median = false;
};

/// Scores of one split of one fold.
struct SplitScores {
  std::string split; // "in" or "out"
  Eigen::Index n = 0;
  double log = 0;
  double rps = 0;
  double mae = 0;
  int floored = 0;
};

struct FoldReport {
  int fold_year = 0;
  std::vector<SplitScores> splits;
};

struct ScoreReport {
  std::string model;
  int d_bar = 10;
  bool rps_include_k0 = false;
  std::vector<FoldReport> folds;

  /// Mean over folds of one metric ("log", "rps" or "mae") of one split.
  double mean(const std::string& split, const std::string& metric) const;
};

SplitScores score_cells(const std::string& split, std::span<const PredictivePmf> pmfs,
                        std::span<const std::int64_t> observed, const ScoreOptions& options);

/// Leave-one-year-out cross-validation. Each fold fits on the full grid with
/// the held-out year masked out of the likelihood, using seed
/// derive_seed(config.seed, grid index of the held-out year), then scores its
/// cells (out) and the remaining cells (in). Zero-exposure cells are skipped.
ScoreReport loo_cv_by_year(const ModelSpec& spec, const FundDataset& data, const ReferenceTable* ref,
                           const McmcConfig& config, const ScoreOptions& options = {},
                           std::optional<std::vector<int>> fold_years = std::nullopt);

struct ChiSquareResult {
  double statistic = 0;
  int dof = 0;
  double p_value = 1;
  /// Input indices merged into each pooled cell.
  std::vector<std::vector<int>> pooling;
  Vector observed;
  Vector expected;
};

/// Pearson goodness of fit with adjacent cells pooled until each pooled
/// expected count reaches `min_expected`; a short last group joins the one
/// before it. Throws when fewer than 2 pooled cells remain.
ChiSquareResult chi_square_consistency(std::span<const double> observed, std::span<const double> expected,
                                       double min_expected = 5.0);

/// Kolmogorov-Smirnov distance of a sample from U(0, 1) and its asymptotic p-value.
std::pair<double, double> ks_uniform(std::vector<double> sample);

} // namespace mortdef
