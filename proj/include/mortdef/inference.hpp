#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mortdef/data.hpp"
#include "mortdef/models.hpp"
#include "mortdef/rng.hpp"

namespace mortdef {

struct McmcConfig {
  int chains = 3;
  int iterations = 10000;
  int burn_in = 2000;
  int thin = 20;
  std::uint64_t seed = 0;
  double target_acceptance = 0.30;
  /// Worker threads; 0 means MORTDEF_THREADS, else hardware concurrency.
  int threads = 0;
  /// Latent-block proposals per iteration; 0 means ceil(sqrt(latent size)).
  int latent_steps = 0;

  void validate() const;
  int retained_per_chain() const { return (iterations - burn_in) / thin; }
  int retained_total() const { return chains * retained_per_chain(); }
};

/// Adaptation record of one chain. Scales are random-walk standard deviations
/// on the unconstrained scale, one per block.
struct ChainStats {
  std::vector<std::string> blocks;
  std::vector<double> scales_at_burn_in;
  std::vector<double> final_scales;
  /// Acceptance rate of each block after burn-in.
  std::vector<double> acceptance;
  /// Number of times any scale changed after burn-in. Zero by construction.
  std::int64_t scale_changes_after_burn_in = 0;
  int init_attempts = 0;
};

struct ParameterDiagnostics {
  std::string name;
  /// NaN when every draw is identical; +inf when chains are constant but differ.
  double rhat = 0;
  double ess = 0;
};

struct PosteriorSummary {
  double mean = 0;
  double sd = 0;
  double lo50 = 0, hi50 = 0;
  double lo90 = 0, hi90 = 0;
};

struct PosteriorDraws {
  ModelSpec spec;
  McmcConfig config;
  std::vector<ParameterVector> draws;
  std::vector<int> chain;
  std::vector<int> iteration;
  /// Named scalar series, one column per name, rows aligned with `draws`.
  std::vector<std::string> names;
  Matrix values;
  std::vector<ChainStats> chain_stats;
  std::vector<ParameterDiagnostics> diagnostics;
  /// Set when diagnostics could not be computed (too few chains or draws).
  std::string diagnostics_error;

  Eigen::Index size() const { return static_cast<Eigen::Index>(draws.size()); }
  /// Column index of `name`; throws std::invalid_argument if unknown.
  Eigen::Index column(const std::string& name) const;
  Vector series(const std::string& name) const;
  /// Names excluding the whitened coordinates z[i].
  std::vector<std::string> reported_names() const;
};

/// Names of every tracked quantity of a model, in output order: scalars, then
/// latent values (theta[age], theta[year], psi[age], psi[age,year]), then the
/// whitened z[i] of GP models.
std::vector<std::string> tracked_names(const ModelSpec& spec);
/// Values in the order of tracked_names.
Vector tracked_values(const ModelSpec& spec, const ParameterVector& params, LatentFactorCache& cache);

/// Prior draw with a finite posterior; up to 100 attempts.
ParameterVector initialize_chain(PosteriorModel& model, Rng& rng, int* attempts = nullptr);

/// Adaptive blocked random-walk Metropolis. Chain c uses make_rng(seed, c).
/// Cells with mask == false are left out of the likelihood.
PosteriorDraws run_mcmc(const ModelSpec& spec, const FundDataset& data, const ReferenceTable* ref,
                        const McmcConfig& config, const CellMask* mask = nullptr);

/// Split R-hat and multi-chain ESS. Needs >= 2 chains and >= 50 draws per
/// chain; each element of `chains` is one chain's series.
ParameterDiagnostics diagnose_series(const std::string& name, const std::vector<Vector>& chains);
std::vector<ParameterDiagnostics> compute_diagnostics(const PosteriorDraws& draws);

/// Mean, sd and equal-tailed 50% / 90% intervals (linear-interpolation
/// quantiles, the R type 7 rule).
PosteriorSummary summarize(const Vector& series);
PosteriorSummary posterior_summary(const PosteriorDraws& draws, const std::string& name);
double quantile_type7(Vector values, double p);

struct Fd1GridSpec {
  double theta_lo = -3.0;
  double theta_hi = 1.0;
  double omega_lo = 0.0;
  double omega_hi = 3.0;
  int theta_nodes = 201;
  int omega_nodes = 201;
  double edge_tolerance = 1e-4;
};

struct Fd1GridPosterior {
  double theta_mean = 0;
  double omega_mean = 0;
  double theta_sd = 0;
  double omega_sd = 0;
  /// log of the trapezoidal integral of exp(log posterior).
  double log_normalizer = 0;
  /// Share of the mass on the grid edges away from the omega = 0 support edge.
  double edge_mass = 0;
};

/// Trapezoidal quadrature of the FD-1 posterior. Throws std::runtime_error
/// when edge_mass exceeds the tolerance.
Fd1GridPosterior grid_posterior_fd1(const FundDataset& data, const ReferenceTable& ref, const std::string& label,
                                    const Fd1GridSpec& grid = {}, const CellMask* mask = nullptr);

/// Long format `chain,iter,param,value`.
void write_draws_csv(const PosteriorDraws& draws, const std::filesystem::path& path);
/// Rebuilds parameter vectors from a draws file written for `spec`.
PosteriorDraws read_draws_csv(const ModelSpec& spec, const std::filesystem::path& path);

} // namespace mortdef
