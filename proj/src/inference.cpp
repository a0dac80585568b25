#include "mortdef/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "mortdef/format.hpp"

namespace mortdef {

void McmcConfig::validate() const {
  if (chains < 1) throw std::invalid_argument("mcmc: chains must be >= 1");
  if (iterations < 1) throw std::invalid_argument("mcmc: iterations must be >= 1");
  if (burn_in < 1 || burn_in >= iterations) throw std::invalid_argument("mcmc: need 1 <= burn_in < iterations");
  if (thin < 1) throw std::invalid_argument("mcmc: thin must be >= 1");
  if (!(target_acceptance > 0 && target_acceptance < 1))
    throw std::invalid_argument("mcmc: target acceptance must lie in (0, 1)");
  if (latent_steps < 0) throw std::invalid_argument("mcmc: latent_steps must be >= 0");
  if (retained_per_chain() < 1) throw std::invalid_argument("mcmc: no draws retained after burn-in and thinning");
}

Eigen::Index PosteriorDraws::column(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw std::invalid_argument("unknown parameter '" + name + "'");
  return it - names.begin();
}

Vector PosteriorDraws::series(const std::string& name) const { return values.col(column(name)); }

std::vector<std::string> PosteriorDraws::reported_names() const {
  std::vector<std::string> out;
  for (const auto& n : names)
    if (n.rfind("z[", 0) != 0) out.push_back(n);
  return out;
}

std::vector<std::string> tracked_names(const ModelSpec& spec) {
  std::vector<std::string> names = spec.scalar_names();
  const auto& ages = spec.grid.ages();
  const auto& years = spec.grid.years();
  const std::string prefix = is_direct_model(spec.id) ? "psi[" : "theta[";
  switch (latent_axis(spec.id)) {
    case LatentAxis::None:
      break;
    case LatentAxis::Age:
      for (int a : ages) names.push_back(prefix + std::to_string(a) + "]");
      break;
    case LatentAxis::Year:
      for (int y : years) names.push_back(prefix + std::to_string(y) + "]");
      break;
    case LatentAxis::AgeYear:
      for (int y : years)
        for (int a : ages) names.push_back(prefix + std::to_string(a) + "," + std::to_string(y) + "]");
      break;
  }
  if (is_gp_model(spec.id))
    for (Eigen::Index i = 0; i < spec.latent_size(); ++i) names.push_back("z[" + std::to_string(i) + "]");
  return names;
}

Vector tracked_values(const ModelSpec& spec, const ParameterVector& params, LatentFactorCache& cache) {
  const auto scalars = spec.scalar_names();
  const auto n = spec.latent_size();
  Vector out(static_cast<Eigen::Index>(scalars.size()) + n + (is_gp_model(spec.id) ? n : 0));
  Eigen::Index k = 0;
  for (const auto& s : scalars) out(k++) = *params.scalar(s);
  if (n > 0) {
    out.segment(k, n) = latent_values(spec, params, cache);
    k += n;
  }
  if (is_gp_model(spec.id)) out.segment(k, n) = params.z;
  return out;
}

namespace {

enum class Transform { Identity, Log, Logit };

Transform transform_of(const std::string& name) {
  if (name == "theta" || name.rfind("beta", 0) == 0) return Transform::Identity;
  if (name == "rho") return Transform::Logit;
  return Transform::Log;
}

double to_unconstrained(Transform t, double x) {
  switch (t) {
    case Transform::Identity:
      return x;
    case Transform::Log:
      return std::log(x);
    case Transform::Logit:
      return std::log(x) - std::log1p(-x);
  }
  return x;
}

double from_unconstrained(Transform t, double u) {
  switch (t) {
    case Transform::Identity:
      return u;
    case Transform::Log:
      return std::exp(u);
    case Transform::Logit:
      return 1.0 / (1.0 + std::exp(-u));
  }
  return u;
}

// log |dx/du|
double log_jacobian(Transform t, double u) {
  switch (t) {
    case Transform::Identity:
      return 0.0;
    case Transform::Log:
      return u;
    case Transform::Logit:
      // log(s(u)) + log(1 - s(u))
      return -std::log1p(std::exp(-u)) - std::log1p(std::exp(u));
  }
  return 0.0;
}

// Hyperparameters that enter the map from whitened to latent values.
bool shapes_latent(const ModelSpec& spec, const std::string& name) {
  if (is_ar_model(spec.id)) return name == "rho";
  if (is_gp_model(spec.id)) return name != "omega";
  return false;
}

struct Block {
  enum class Kind { Latent, Scalar, Centered } kind;
  std::string name;
  Transform transform = Transform::Identity;
  double log_scale = 0;
  std::int64_t proposed = 0;
  std::int64_t accepted = 0;
};

class Chain {
 public:
  Chain(PosteriorModel model, const McmcConfig& config, int index)
      : model_(std::move(model)), spec_(model_.spec()), config_(config), rng_(make_rng(config.seed, index)) {
    int attempts = 0;
    params_ = initialize_chain(model_, rng_, &attempts);
    stats_.init_attempts = attempts;
    latent_size_ = spec_.latent_size();
    latent_steps_ = config.latent_steps > 0
                        ? config.latent_steps
                        : static_cast<int>(std::ceil(std::sqrt(static_cast<double>(latent_size_))));
    if (latent_size_ > 0) {
      w_ = is_gp_model(spec_.id) ? params_.z : whitened_from_latent(spec_, params_, params_.theta_vec, model_.cache());
      blocks_.push_back({Block::Kind::Latent, "latent", Transform::Identity,
                         std::log(std::min(0.5, 2.38 / std::sqrt(static_cast<double>(latent_size_)))), 0, 0});
    }
    for (const auto& n : spec_.scalar_names())
      blocks_.push_back({Block::Kind::Scalar, n, transform_of(n), std::log(0.1), 0, 0});
    for (const auto& n : spec_.scalar_names())
      if (shapes_latent(spec_, n)) blocks_.push_back({Block::Kind::Centered, n + ":centered", transform_of(n), std::log(0.1), 0, 0});
    latent_ = current_latent(params_, w_);
    log_lik_ = model_.log_likelihood_latent(params_, latent_);
    scalar_lp_ = scalar_log_density(params_);
    for (const auto& b : blocks_) stats_.blocks.push_back(b.name);
  }

  void run(std::vector<ParameterVector>& kept, std::vector<int>& kept_iter) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int t = 1; t <= config_.iterations; ++t) {
      const bool adapting = t <= config_.burn_in;
      for (auto& b : blocks_) {
        const double scale = std::exp(b.log_scale);
        bool acc = false;
        switch (b.kind) {
          case Block::Kind::Latent:
            // adaptation sees the last sub-step only
            for (int k = 0; k < latent_steps_; ++k) acc = latent_move(scale, normal, unif);
            break;
          case Block::Kind::Scalar:
            acc = scalar_move(b, scale, normal, unif);
            break;
          case Block::Kind::Centered:
            acc = centered_move(b, scale, normal, unif);
            break;
        }
        if (adapting) {
          b.log_scale += std::pow(static_cast<double>(t), -0.6) * ((acc ? 1.0 : 0.0) - config_.target_acceptance);
          b.log_scale = std::clamp(b.log_scale, -20.0, 5.0);
        } else {
          ++b.proposed;
          if (acc) ++b.accepted;
        }
      }
      if (t == config_.burn_in)
        for (const auto& b : blocks_) stats_.scales_at_burn_in.push_back(std::exp(b.log_scale));
      if (t > config_.burn_in && (t - config_.burn_in) % config_.thin == 0) {
        kept.push_back(snapshot());
        kept_iter.push_back(t);
      }
    }
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const auto& b = blocks_[i];
      stats_.final_scales.push_back(std::exp(b.log_scale));
      stats_.acceptance.push_back(b.proposed > 0 ? static_cast<double>(b.accepted) / static_cast<double>(b.proposed) : 0.0);
      if (stats_.final_scales.back() != stats_.scales_at_burn_in[i]) ++stats_.scale_changes_after_burn_in;
    }
  }

  const ChainStats& stats() const { return stats_; }

 private:
  Vector current_latent(const ParameterVector& p, const Vector& w) {
    if (latent_size_ == 0) return Vector();
    return latent_from_whitened(spec_, p, w, model_.cache());
  }

  double scalar_log_density(const ParameterVector& p) const {
    double lp = 0.0;
    for (const auto& n : spec_.scalar_names()) {
      const double x = *p.scalar(n);
      const auto t = transform_of(n);
      lp += truncnormal_logpdf(x, spec_.prior(n)) + log_jacobian(t, to_unconstrained(t, x));
    }
    return lp;
  }

  template <typename N, typename U>
  bool latent_move(double scale, N& normal, U& unif) {
    Vector w_new(latent_size_);
    for (Eigen::Index i = 0; i < latent_size_; ++i) w_new(i) = w_(i) + scale * normal(rng_);
    Vector latent_new = current_latent(params_, w_new);
    const double ll_new = model_.log_likelihood_latent(params_, latent_new);
    const double log_alpha = -0.5 * (w_new.squaredNorm() - w_.squaredNorm()) + ll_new - log_lik_;
    if (accept(log_alpha, unif)) {
      w_ = std::move(w_new);
      latent_ = std::move(latent_new);
      log_lik_ = ll_new;
      return true;
    }
    return false;
  }

  template <typename N, typename U>
  bool scalar_move(const Block& b, double scale, N& normal, U& unif) {
    const std::string& name = b.name;
    ParameterVector prop = params_;
    const double u = to_unconstrained(b.transform, *params_.scalar(name));
    const double x_new = from_unconstrained(b.transform, u + scale * normal(rng_));
    prop.set_scalar(name, x_new);
    if (!within_bounds(spec_, prop)) return false;
    const double lp_new = scalar_log_density(prop);
    if (!std::isfinite(lp_new)) return false;
    Vector latent_new;
    const bool reshape = shapes_latent(spec_, name);
    if (reshape) latent_new = current_latent(prop, w_);
    const double ll_new = model_.log_likelihood_latent(prop, reshape ? latent_new : latent_);
    if (accept(lp_new - scalar_lp_ + ll_new - log_lik_, unif)) {
      params_ = std::move(prop);
      scalar_lp_ = lp_new;
      log_lik_ = ll_new;
      if (reshape) latent_ = std::move(latent_new);
      return true;
    }
    return false;
  }

  // Hyperparameter move with the latent values held fixed; the whitened
  // coordinates follow, which costs the ratio of transform determinants.
  template <typename N, typename U>
  bool centered_move(const Block& b, double scale, N& normal, U& unif) {
    const std::string name = b.name.substr(0, b.name.find(':'));
    ParameterVector prop = params_;
    const double u = to_unconstrained(b.transform, *params_.scalar(name));
    prop.set_scalar(name, from_unconstrained(b.transform, u + scale * normal(rng_)));
    if (!within_bounds(spec_, prop)) return false;
    const double lp_new = scalar_log_density(prop);
    if (!std::isfinite(lp_new)) return false;
    double log_det_old, log_det_new;
    Vector w_new;
    try {
      log_det_old = latent_log_jacobian(spec_, params_, model_.cache());
      w_new = whitened_from_latent(spec_, prop, latent_, model_.cache());
      log_det_new = latent_log_jacobian(spec_, prop, model_.cache());
    } catch (const NotPositiveDefinite&) {
      return false;
    }
    if (!w_new.allFinite()) return false;
    const double log_alpha = lp_new - scalar_lp_ - 0.5 * (w_new.squaredNorm() - w_.squaredNorm()) + log_det_old -
                             log_det_new;
    if (accept(log_alpha, unif)) {
      params_ = std::move(prop);
      scalar_lp_ = lp_new;
      w_ = std::move(w_new);
      return true;
    }
    return false;
  }

  template <typename U>
  bool accept(double log_alpha, U& unif) {
    if (std::isnan(log_alpha)) return false;
    if (log_alpha >= 0) {
      (void)unif(rng_); // keep the stream aligned across outcomes
      return true;
    }
    return std::log(unif(rng_)) < log_alpha;
  }

  ParameterVector snapshot() const {
    ParameterVector p = params_;
    if (is_gp_model(spec_.id)) p.z = w_;
    else if (latent_size_ > 0) p.theta_vec = latent_;
    return p;
  }

  PosteriorModel model_;
  const ModelSpec& spec_;
  McmcConfig config_;
  Rng rng_;
  ParameterVector params_;
  Eigen::Index latent_size_ = 0;
  int latent_steps_ = 1;
  Vector w_;
  Vector latent_;
  double log_lik_ = 0;
  double scalar_lp_ = 0;
  std::vector<Block> blocks_;
  ChainStats stats_;
};

int resolve_threads(int requested, int jobs) {
  int n = requested;
  if (n <= 0) {
    if (const char* env = std::getenv("MORTDEF_THREADS")) {
      int v = 0;
      if (parse_number(std::string_view(env), v) && v > 0) n = v;
    }
  }
  if (n <= 0) n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  return std::max(1, std::min(n, jobs));
}

double sample_variance(const Vector& x) {
  if (x.size() < 2) return 0.0;
  const double m = x.mean();
  return (x.array() - m).square().sum() / static_cast<double>(x.size() - 1);
}

} // namespace

ParameterVector initialize_chain(PosteriorModel& model, Rng& rng, int* attempts) {
  const auto& spec = model.spec();
  for (int k = 1; k <= 100; ++k) {
    ParameterVector p = complete_from_prior(spec, ParameterVector{}, rng);
    double lp = -kInf;
    try {
      lp = model.log_posterior(p);
    } catch (const NotPositiveDefinite&) {
    }
    if (std::isfinite(lp)) {
      if (attempts) *attempts = k;
      return p;
    }
  }
  throw std::runtime_error(std::string(to_string(spec.id)) +
                           ": no initial point with a finite posterior after 100 attempts");
}

PosteriorDraws run_mcmc(const ModelSpec& spec, const FundDataset& data, const ReferenceTable* ref,
                        const McmcConfig& config, const CellMask* mask) {
  config.validate();
  const PosteriorModel base(spec, data, ref, mask);

  const int n_chains = config.chains;
  std::vector<std::vector<ParameterVector>> kept(static_cast<std::size_t>(n_chains));
  std::vector<std::vector<int>> kept_iter(static_cast<std::size_t>(n_chains));
  std::vector<ChainStats> stats(static_cast<std::size_t>(n_chains));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_chains));

  auto work = [&](int c) {
    try {
      Chain chain(base, config, c);
      chain.run(kept[c], kept_iter[c]);
      stats[c] = chain.stats();
    } catch (...) {
      errors[c] = std::current_exception();
    }
  };
  const int n_threads = resolve_threads(config.threads, n_chains);
  if (n_threads == 1) {
    for (int c = 0; c < n_chains; ++c) work(c);
  } else {
    std::mutex mu;
    int next = 0;
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t)
      pool.emplace_back([&] {
        while (true) {
          int c;
          {
            std::lock_guard lock(mu);
            c = next++;
          }
          if (c >= n_chains) return;
          work(c);
        }
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  PosteriorDraws out;
  out.spec = spec;
  out.config = config;
  out.names = tracked_names(spec);
  out.chain_stats = std::move(stats);
  LatentFactorCache cache;
  const Eigen::Index total = config.retained_total();
  out.values.resize(total, static_cast<Eigen::Index>(out.names.size()));
  for (int c = 0; c < n_chains; ++c)
    for (std::size_t i = 0; i < kept[c].size(); ++i) {
      out.values.row(static_cast<Eigen::Index>(out.draws.size())) = tracked_values(spec, kept[c][i], cache).transpose();
      out.draws.push_back(std::move(kept[c][i]));
      out.chain.push_back(c);
      out.iteration.push_back(kept_iter[c][i]);
    }
  try {
    out.diagnostics = compute_diagnostics(out);
  } catch (const std::exception& e) {
    out.diagnostics_error = e.what();
  }
  return out;
}

ParameterDiagnostics diagnose_series(const std::string& name, const std::vector<Vector>& chains) {
  if (chains.size() < 2) throw std::invalid_argument("diagnostics: need at least 2 chains");
  const Eigen::Index len = chains.front().size();
  for (const auto& c : chains)
    if (c.size() != len) throw std::invalid_argument("diagnostics: chains differ in length");
  if (len < 50) throw std::invalid_argument("diagnostics: need at least 50 draws per chain");

  // split each chain in half
  const Eigen::Index n = len / 2;
  std::vector<Vector> split;
  for (const auto& c : chains) {
    split.emplace_back(c.head(n));
    split.emplace_back(c.segment(len - n, n));
  }
  const auto m = static_cast<Eigen::Index>(split.size());
  Vector means(m), vars(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    means(j) = split[j].mean();
    vars(j) = sample_variance(split[j]);
  }
  const double w = vars.mean();
  const double b_over_n = sample_variance(means);
  const double nd = static_cast<double>(n);
  const double var_plus = (nd - 1.0) / nd * w + b_over_n;

  ParameterDiagnostics d;
  d.name = name;
  if (!(w > 0)) {
    d.rhat = b_over_n > 0 ? kInf : std::numeric_limits<double>::quiet_NaN();
    d.ess = std::numeric_limits<double>::quiet_NaN();
    return d;
  }
  d.rhat = std::sqrt(var_plus / w);

  // autocovariances (biased) per split chain
  const Eigen::Index max_lag = n - 1;
  Vector mean_acov = Vector::Zero(max_lag + 1);
  for (Eigen::Index j = 0; j < m; ++j) {
    const Vector centered = split[j].array() - means(j);
    for (Eigen::Index t = 0; t <= max_lag; ++t)
      mean_acov(t) += centered.head(n - t).dot(centered.tail(n - t)) / nd;
  }
  mean_acov /= static_cast<double>(m);
  auto rho = [&](Eigen::Index t) { return 1.0 - (w - mean_acov(t)) / var_plus; };

  // Geyer's initial monotone sequence on pair sums
  double tau = -1.0;
  double prev_pair = kInf;
  for (Eigen::Index t = 0; t + 1 <= max_lag; t += 2) {
    double pair = rho(t) + rho(t + 1);
    if (!(pair > 0)) break;
    pair = std::min(pair, prev_pair);
    prev_pair = pair;
    tau += 2.0 * pair;
  }
  const double total = static_cast<double>(m) * nd;
  d.ess = tau > 0 ? std::min(total / tau, total) : total;
  return d;
}

std::vector<ParameterDiagnostics> compute_diagnostics(const PosteriorDraws& draws) {
  const int n_chains = draws.config.chains;
  std::vector<ParameterDiagnostics> out;
  for (const auto& name : draws.reported_names()) {
    const Eigen::Index col = draws.column(name);
    std::vector<Vector> chains(static_cast<std::size_t>(n_chains));
    std::vector<std::vector<double>> buf(static_cast<std::size_t>(n_chains));
    for (Eigen::Index i = 0; i < draws.size(); ++i) buf[draws.chain[i]].push_back(draws.values(i, col));
    for (int c = 0; c < n_chains; ++c)
      chains[c] = Eigen::Map<const Vector>(buf[c].data(), static_cast<Eigen::Index>(buf[c].size()));
    out.push_back(diagnose_series(name, chains));
  }
  return out;
}

double quantile_type7(Vector values, double p) {
  Vector& sorted = values;
  if (sorted.size() == 0) throw std::invalid_argument("quantile of an empty series");
  std::sort(sorted.begin(), sorted.end());
  const double h = static_cast<double>(sorted.size() - 1) * p;
  const auto lo = static_cast<Eigen::Index>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted(sorted.size() - 1);
  return sorted(lo) + (h - static_cast<double>(lo)) * (sorted(lo + 1) - sorted(lo));
}

PosteriorSummary summarize(const Vector& series) {
  if (series.size() == 0) throw std::invalid_argument("summary of an empty series");
  Vector sorted = series;
  std::sort(sorted.begin(), sorted.end());
  PosteriorSummary s;
  s.mean = series.mean();
  s.sd = std::sqrt(sample_variance(series));
  s.lo50 = quantile_type7(sorted, 0.25);
  s.hi50 = quantile_type7(sorted, 0.75);
  s.lo90 = quantile_type7(sorted, 0.05);
  s.hi90 = quantile_type7(sorted, 0.95);
  return s;
}

PosteriorSummary posterior_summary(const PosteriorDraws& draws, const std::string& name) {
  return summarize(draws.series(name));
}

Fd1GridPosterior grid_posterior_fd1(const FundDataset& data, const ReferenceTable& ref, const std::string& label,
                                    const Fd1GridSpec& grid, const CellMask* mask) {
  if (grid.theta_nodes < 3 || grid.omega_nodes < 3) throw std::invalid_argument("grid_posterior_fd1: too few nodes");
  if (!(grid.theta_lo < grid.theta_hi) || !(grid.omega_lo < grid.omega_hi) || grid.omega_lo < 0)
    throw std::invalid_argument("grid_posterior_fd1: bad grid bounds");
  PosteriorModel model(ModelSpec::make(ModelId::FD1, data.grid, label), data, &ref, mask);
  const int nt = grid.theta_nodes, no = grid.omega_nodes;
  const double ht = (grid.theta_hi - grid.theta_lo) / (nt - 1);
  const double ho = (grid.omega_hi - grid.omega_lo) / (no - 1);
  Matrix lp(nt, no);
  ParameterVector p;
  for (int i = 0; i < nt; ++i)
    for (int j = 0; j < no; ++j) {
      p.theta = grid.theta_lo + ht * i;
      p.omega = grid.omega_lo + ho * j;
      lp(i, j) = model.log_posterior(p);
    }
  const double peak = lp.maxCoeff();
  if (!std::isfinite(peak)) throw std::runtime_error("grid_posterior_fd1: posterior not finite on the grid");
  double mass = 0, edge = 0, m_t = 0, m_o = 0, s_t = 0, s_o = 0;
  for (int i = 0; i < nt; ++i)
    for (int j = 0; j < no; ++j) {
      const double wt = (i == 0 || i == nt - 1) ? 0.5 : 1.0;
      const double wo = (j == 0 || j == no - 1) ? 0.5 : 1.0;
      const double v = wt * wo * std::exp(lp(i, j) - peak);
      const double t = grid.theta_lo + ht * i, o = grid.omega_lo + ho * j;
      mass += v;
      m_t += v * t;
      m_o += v * o;
      s_t += v * t * t;
      s_o += v * o * o;
      const bool omega_support_edge = j == 0 && grid.omega_lo == 0.0;
      if (i == 0 || i == nt - 1 || j == no - 1 || (j == 0 && !omega_support_edge)) edge += v;
    }
  Fd1GridPosterior r;
  r.theta_mean = m_t / mass;
  r.omega_mean = m_o / mass;
  r.theta_sd = std::sqrt(std::max(0.0, s_t / mass - r.theta_mean * r.theta_mean));
  r.omega_sd = std::sqrt(std::max(0.0, s_o / mass - r.omega_mean * r.omega_mean));
  r.log_normalizer = peak + std::log(mass * ht * ho);
  r.edge_mass = edge / mass;
  if (r.edge_mass > grid.edge_tolerance)
    throw std::runtime_error("grid_posterior_fd1: " + format_double(r.edge_mass) +
                             " of the mass sits on the grid edges; widen the grid");
  return r;
}

namespace {

// psi[age,year] names contain a comma and are written quoted
std::string csv_field(const std::string& s) {
  return s.find(',') == std::string::npos ? s : '"' + s + '"';
}

std::vector<std::string_view> split_draw_row(std::string_view line) {
  const auto first = line.find(',');
  const auto second = first == std::string_view::npos ? first : line.find(',', first + 1);
  const auto last = line.rfind(',');
  if (second == std::string_view::npos || last <= second) return {};
  auto param = line.substr(second + 1, last - second - 1);
  if (param.size() >= 2 && param.front() == '"' && param.back() == '"') param = param.substr(1, param.size() - 2);
  return {line.substr(0, first), line.substr(first + 1, second - first - 1), param, line.substr(last + 1)};
}

} // namespace

void write_draws_csv(const PosteriorDraws& draws, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "chain,iter,param,value\n";
  for (Eigen::Index i = 0; i < draws.size(); ++i) {
    const std::string prefix = std::to_string(draws.chain[i]) + "," + std::to_string(draws.iteration[i]) + ",";
    for (std::size_t k = 0; k < draws.names.size(); ++k)
      out << prefix << csv_field(draws.names[k]) << ',' << format_double(draws.values(i, static_cast<Eigen::Index>(k))) << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

PosteriorDraws read_draws_csv(const ModelSpec& spec, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "chain,iter,param,value")
    throw DataError(path.string() + ": header must be 'chain,iter,param,value'");

  PosteriorDraws out;
  out.spec = spec;
  out.names = tracked_names(spec);
  std::map<std::string, std::size_t> index;
  for (std::size_t k = 0; k < out.names.size(); ++k) index[out.names[k]] = k;

  std::vector<std::vector<double>> rows;
  std::vector<std::vector<bool>> seen;
  long row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto f = split_draw_row(line);
    int c = 0, it = 0;
    double v = 0;
    if (f.size() != 4 || !parse_number(f[0], c) || !parse_number(f[1], it) || !parse_number(f[3], v))
      throw DataError(path.string() + ": malformed row " + std::to_string(row));
    auto found = index.find(std::string(f[2]));
    if (found == index.end())
      throw DataError(path.string() + ": parameter '" + std::string(f[2]) + "' does not belong to model " +
                      std::string(to_string(spec.id)));
    if (out.chain.empty() || out.chain.back() != c || out.iteration.back() != it) {
      out.chain.push_back(c);
      out.iteration.push_back(it);
      rows.emplace_back(out.names.size(), 0.0);
      seen.emplace_back(out.names.size(), false);
    }
    rows.back()[found->second] = v;
    seen.back()[found->second] = true;
  }
  if (rows.empty() && out.names.empty()) {
    // nothing to sample (FD-0): the posterior is one point
    out.draws.emplace_back();
    out.chain.push_back(0);
    out.iteration.push_back(0);
    out.values.resize(1, 0);
    return out;
  }
  if (rows.empty()) throw DataError(path.string() + ": no draws");

  const auto scalars = spec.scalar_names();
  const auto n_latent = spec.latent_size();
  const auto latent_offset = static_cast<Eigen::Index>(scalars.size());
  out.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(out.names.size()));
  int max_chain = 0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t k = 0; k < out.names.size(); ++k) {
      if (!seen[r][k])
        throw DataError(path.string() + ": draw (" + std::to_string(out.chain[r]) + "," +
                        std::to_string(out.iteration[r]) + ") lacks " + out.names[k]);
      out.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = rows[r][k];
    }
    ParameterVector p;
    for (std::size_t k = 0; k < scalars.size(); ++k) p.set_scalar(scalars[k], rows[r][k]);
    const Eigen::Map<const Vector> all(rows[r].data(), static_cast<Eigen::Index>(rows[r].size()));
    if (is_gp_model(spec.id)) p.z = all.segment(latent_offset + n_latent, n_latent);
    else if (n_latent > 0) p.theta_vec = all.segment(latent_offset, n_latent);
    check_blocks(spec, p);
    if (!within_bounds(spec, p)) throw DataError(path.string() + ": draw out of bounds");
    out.draws.push_back(std::move(p));
    max_chain = std::max(max_chain, out.chain[r]);
  }
  out.config.chains = max_chain + 1;
  return out;
}

} // namespace mortdef
