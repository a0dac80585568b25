#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include <gsl/gsl_cdf.h>
#include <gsl/gsl_randist.h>

#include "mortdef/evaluation.hpp"
#include "support.hpp"

using namespace mortdef;
using mortdef::testing::gompertz_table;
using mortdef::testing::grid_of;

namespace {

PredictivePmf from_mass(std::vector<double> m) {
  PredictivePmf p;
  p.mass = Eigen::Map<Vector>(m.data(), static_cast<Eigen::Index>(m.size()));
  p.cdf = p.mass;
  for (Eigen::Index k = 1; k < p.cdf.size(); ++k) p.cdf(k) += p.cdf(k - 1);
  for (Eigen::Index k = 0; k < p.mass.size(); ++k) p.mean += static_cast<double>(k) * p.mass(k);
  return p;
}

double nb_pmf(unsigned k, double mu, double omega) {
  if (omega < 1e-8) return gsl_ran_poisson_pdf(k, mu);
  return gsl_ran_negative_binomial_pdf(k, 1.0 / (1.0 + omega), mu / omega);
}

} // namespace

TEST_CASE("mixture pmf") {
  const std::vector<double> mu1{3.2}, om1{0.4};
  const auto one = mixture_pmf(mu1, om1);
  for (unsigned k = 0; k <= 20; ++k) CHECK(one.pmf(k) == doctest::Approx(nb_pmf(k, 3.2, 0.4)).epsilon(1e-12));
  CHECK(one.mean == doctest::Approx(3.2).epsilon(1e-14));

  const std::vector<double> mu2{1.5, 6.0}, om2{0.0, 0.8};
  const auto two = mixture_pmf(mu2, om2);
  for (unsigned k = 0; k <= 25; ++k)
    CHECK(two.pmf(k) == doctest::Approx(0.5 * (nb_pmf(k, 1.5, 0) + nb_pmf(k, 6.0, 0.8))).epsilon(1e-12));
  CHECK(two.mean == doctest::Approx(3.75).epsilon(1e-14));

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> mu, om;
    for (int s = 0; s < 20; ++s) {
      mu.push_back(0.01 + 40 * u(rng));
      om.push_back(u(rng) < 0.2 ? 0.0 : 3 * u(rng));
    }
    const auto p = mixture_pmf(mu, om);
    const double total = p.mass.sum();
    CHECK(total >= 1 - 1e-6);
    CHECK(total <= 1 + 1e-12);
    CHECK((p.mass.array() >= 0).all());
    CHECK(p.cdf(p.k_max()) == doctest::Approx(total).epsilon(1e-14));
    for (Eigen::Index k = 1; k <= p.k_max(); ++k) REQUIRE(p.cdf(k) >= p.cdf(k - 1));
  }
  const std::vector<double> zero{0.0}, zom{0.3};
  CHECK(mixture_pmf(zero, zom).pmf(0) == 1.0);
}

TEST_CASE("mixture matches simulate-then-count") {
  const std::vector<double> mu{2.0, 4.5, 9.0}, om{0.1, 0.6, 0.0};
  const auto p = mixture_pmf(mu, om);
  Rng rng = make_rng(3, 0);
  std::uniform_int_distribution<int> pick(0, 2);
  const int n = 200000;
  std::vector<int> hist(60, 0);
  for (int i = 0; i < n; ++i) {
    const int s = pick(rng);
    const auto d = negbin_sample({mu[s], om[s]}, rng);
    if (d < 60) ++hist[d];
  }
  for (int k = 0; k < 30; ++k) {
    const double freq = static_cast<double>(hist[k]) / n;
    const double se = std::sqrt(p.pmf(k) * (1 - p.pmf(k)) / n);
    CHECK(std::abs(freq - p.pmf(k)) <= 3 * se + 1e-9);
  }
}

TEST_CASE("log score") {
  const auto uniform = from_mass({0.25, 0.25, 0.25, 0.25});
  for (std::int64_t d = 0; d < 4; ++d) {
    const std::vector<PredictivePmf> pm{uniform};
    const std::vector<std::int64_t> obs{d};
    CHECK(std::abs(log_score(pm, obs) - std::log(4.0)) < 1e-12);
  }
  const std::vector<PredictivePmf> points{from_mass({0, 0, 1}), from_mass({1})};
  const std::vector<std::int64_t> hits{2, 0};
  CHECK(log_score(points, hits) == 0.0);

  int floored = 0;
  const std::vector<std::int64_t> miss{5, 0};
  CHECK(log_score(points, miss, &floored) == doctest::Approx(-std::log(1e-12) / 2).epsilon(1e-14));
  CHECK(floored == 1);

  // moving mass toward the observation lowers the score
  const std::vector<std::int64_t> obs{1};
  double prev = kInf;
  for (double w : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    const std::vector<PredictivePmf> pm{from_mass({1 - w, w})};
    const double s = log_score(pm, obs);
    CHECK(s < prev);
    prev = s;
  }
}

TEST_CASE("ranked probability score") {
  const std::vector<PredictivePmf> half{from_mass({0.5, 0.5})};
  const std::vector<std::int64_t> two{2};
  CHECK(std::abs(rps(half, two, 3) - 1.0) < 1e-12);

  const std::vector<PredictivePmf> point{from_mass({1})};
  const std::vector<std::int64_t> zero{0};
  CHECK(rps(point, zero) == 0.0);
  // k = 0 switch
  CHECK(rps(half, two, 3, true) == doctest::Approx(1.25).epsilon(1e-14));
  const std::vector<PredictivePmf> spread{from_mass({0.5, 0.5})};
  CHECK(rps(spread, zero) == 0.0);
  CHECK(rps(spread, zero, 10, true) == doctest::Approx(0.25).epsilon(1e-14));

  const std::vector<PredictivePmf> at3{from_mass({0, 0, 0, 1})};
  const std::vector<std::int64_t> three{3};
  CHECK(rps(at3, three) == 0.0);
}

TEST_CASE("rps is proper on random pairs") {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(0, 1);
  Rng draw = make_rng(77, 1);
  int wins = 0;
  const int pairs = 200, reps = 10000;
  for (int p = 0; p < pairs; ++p) {
    const double mu_t = 0.5 + 8 * u(rng), om_t = 1.5 * u(rng);
    const double mu_w = 0.5 + 8 * u(rng), om_w = 1.5 * u(rng);
    const std::vector<double> a{mu_t}, b{om_t}, c{mu_w}, d{om_w};
    const std::vector<PredictivePmf> truth{mixture_pmf(a, b)}, wrong{mixture_pmf(c, d)};
    double st = 0, sw = 0;
    for (int r = 0; r < reps; ++r) {
      const std::vector<std::int64_t> obs{negbin_sample({mu_t, om_t}, draw)};
      st += rps(truth, obs);
      sw += rps(wrong, obs);
    }
    if (st <= sw) ++wins;
  }
  CHECK(wins >= 0.95 * pairs);
}

TEST_CASE("mean absolute error") {
  auto p = from_mass({0.5, 0, 0, 0, 0, 0.5});
  CHECK(p.mean == 2.5);
  const std::vector<PredictivePmf> one{p};
  const std::vector<std::int64_t> obs{1};
  CHECK(mae(one, obs) == 1.5);
  CHECK(mae(one, obs, true) == 1.0); // median 0
  const std::vector<double> point{2.5};
  CHECK(mae(point, obs) == 1.5);

  // FD-0 format check: m E = 2 everywhere, 61 zero counts and 39 counts of 3
  const auto g = grid_of(60, 79, 2013, 2017);
  const ReferenceTable ref{g, Matrix::Constant(20, 5, 0.02), "r"};
  FundDataset data{g, Matrix::Constant(20, 5, 100), CountMatrix::Zero(20, 5)};
  for (Eigen::Index k = 61; k < 100; ++k) data.deaths(k) = 3;
  const auto spec = ModelSpec::make(ModelId::FD0, g, std::string("r"));
  std::vector<std::pair<int, int>> cells;
  std::vector<std::int64_t> observed;
  for (int y : g.years())
    for (int a : g.ages()) {
      cells.emplace_back(a, y);
      observed.push_back(data.deaths(g.age_index(a), g.year_index(y)));
    }
  const std::vector<ParameterVector> draws(1);
  const auto pmfs = predictive_pmfs(spec, draws, cells, data, &ref);
  CHECK(mae(pmfs, observed) == doctest::Approx(1.61).epsilon(1e-12));
}

TEST_CASE("scores do not depend on cell order") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<PredictivePmf> pmfs;
  std::vector<std::int64_t> obs;
  for (int i = 0; i < 40; ++i) {
    const std::vector<double> mu{0.5 + 6 * u(rng), 0.5 + 6 * u(rng)}, om{u(rng), 0.0};
    pmfs.push_back(mixture_pmf(mu, om));
    obs.push_back(static_cast<std::int64_t>(12 * u(rng)));
  }
  const ScoreOptions opt;
  const auto a = score_cells("out", pmfs, obs, opt);
  std::vector<int> order(40);
  for (int i = 0; i < 40; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<PredictivePmf> p2;
  std::vector<std::int64_t> o2;
  for (int i : order) {
    p2.push_back(pmfs[i]);
    o2.push_back(obs[i]);
  }
  const auto b = score_cells("out", p2, o2, opt);
  CHECK(a.n == 40);
  CHECK(a.log == doctest::Approx(b.log).epsilon(1e-13));
  CHECK(a.rps == doctest::Approx(b.rps).epsilon(1e-13));
  CHECK(a.mae == doctest::Approx(b.mae).epsilon(1e-13));
}

TEST_CASE("chi-square consistency") {
  const std::vector<double> o{12, 8}, e{10, 10};
  const auto r = chi_square_consistency(o, e);
  CHECK(r.statistic == doctest::Approx(0.8).epsilon(1e-14));
  CHECK(r.dof == 1);
  CHECK(std::abs(r.p_value - 0.371) < 1e-3);
  CHECK(r.p_value == doctest::Approx(gsl_cdf_chisq_Q(0.8, 1)).epsilon(1e-12));

  const std::vector<double> same{7, 9, 11};
  const auto exact = chi_square_consistency(same, same);
  CHECK(exact.statistic == 0.0);
  CHECK(exact.p_value == 1.0);

  // pooling: expected (2, 2, 6, 1, 8) -> {0,1,2} reaches 10, {3,4} reaches 9; O = (9, 11)
  const std::vector<double> po{1, 3, 5, 2, 9}, pe{2, 2, 6, 1, 8};
  const auto pooled = chi_square_consistency(po, pe);
  REQUIRE(pooled.pooling.size() == 2);
  CHECK(pooled.pooling[0] == std::vector<int>{0, 1, 2});
  CHECK(pooled.pooling[1] == std::vector<int>{3, 4});
  CHECK(pooled.statistic == doctest::Approx(1.0 / 10 + 4.0 / 9).epsilon(1e-14));

  // a short tail joins the group before it
  const std::vector<double> to{5, 6, 1}, te{6, 6, 1};
  const auto tail = chi_square_consistency(to, te);
  REQUIRE(tail.pooling.size() == 2);
  CHECK(tail.pooling[1] == std::vector<int>{1, 2});

  const std::vector<double> tiny{1, 1}, tiny_e{1, 2};
  CHECK_THROWS(chi_square_consistency(tiny, tiny_e));
  const std::vector<double> bad_e{10, 0};
  CHECK_THROWS(chi_square_consistency(o, bad_e));
}

TEST_CASE("chi-square p-values are uniform under the null") {
  // multinomial counts given the total, expected proportional to the probabilities
  const std::vector<double> probs{0.05, 0.1, 0.15, 0.2, 0.2, 0.15, 0.1, 0.05};
  const unsigned total = 2000;
  gsl_rng* r = gsl_rng_alloc(gsl_rng_mt19937);
  gsl_rng_set(r, 12345);
  std::vector<double> pvals;
  std::vector<unsigned> counts(probs.size());
  std::vector<double> expected;
  for (double p : probs) expected.push_back(p * total);
  for (int rep = 0; rep < 2000; ++rep) {
    gsl_ran_multinomial(r, probs.size(), total, probs.data(), counts.data());
    const std::vector<double> obs(counts.begin(), counts.end());
    pvals.push_back(chi_square_consistency(obs, expected).p_value);
  }
  gsl_rng_free(r);
  const auto [d, p] = ks_uniform(pvals);
  CHECK(p > 0.01);
  CHECK(d < 0.05);

  // the KS helper rejects a skewed sample
  std::vector<double> skewed;
  for (int i = 0; i < 500; ++i) skewed.push_back(std::pow((i + 0.5) / 500, 2));
  CHECK(ks_uniform(skewed).second < 1e-6);
}

TEST_CASE("leave-one-year-out cross-validation") {
  const auto g = grid_of(60, 89, 2013, 2019);
  const auto ref = gompertz_table(g, -5.6, 0.095, -0.01);
  const auto spec = ModelSpec::make(ModelId::FD1, g, std::string("r"));
  ParameterVector truth;
  truth.theta = -0.29;
  truth.omega = 0.1;
  Rng rng = make_rng(9, 0);
  auto data = simulate_fund(spec, truth, exposure_profile(g, 400, 8), &ref, rng);

  McmcConfig cfg;
  cfg.iterations = 2000;
  cfg.burn_in = 500;
  cfg.thin = 5;
  cfg.seed = 17;
  cfg.threads = 1;
  const auto report = loo_cv_by_year(spec, data, &ref, cfg);
  CHECK(report.folds.size() == 7);
  for (const auto& f : report.folds) {
    REQUIRE(f.splits.size() == 2);
    CHECK(f.splits[0].split == "out");
    CHECK(f.splits[0].n == 30);
    CHECK(f.splits[1].split == "in");
    CHECK(f.splits[1].n == 180);
    for (const auto& s : f.splits) {
      CHECK(std::isfinite(s.log));
      CHECK(std::isfinite(s.rps));
    }
  }
  double manual = 0;
  for (const auto& f : report.folds) manual += f.splits[0].rps;
  CHECK(report.mean("out", "rps") == doctest::Approx(manual / 7).epsilon(1e-14));

  // fold order does not change any fold
  const auto reversed = loo_cv_by_year(spec, data, &ref, cfg, {}, std::vector<int>{2019, 2015, 2013});
  for (const auto& f : reversed.folds) {
    const auto& orig = report.folds[static_cast<std::size_t>(f.fold_year - 2013)];
    CHECK(orig.fold_year == f.fold_year);
    CHECK(orig.splits[0].log == f.splits[0].log);
    CHECK(orig.splits[1].rps == f.splits[1].rps);
  }

  // identical years: held-out and in-sample scores agree up to MC error
  for (Eigen::Index j = 1; j < 7; ++j) {
    data.exposures.col(j) = data.exposures.col(0);
    data.deaths.col(j) = data.deaths.col(0);
  }
  const auto flat_ref = gompertz_table(g, -5.6, 0.095, 0.0);
  const auto same = loo_cv_by_year(spec, data, &flat_ref, cfg, {}, std::vector<int>{2016});
  CHECK(std::abs(same.folds[0].splits[0].log - same.folds[0].splits[1].log) < 0.02);
  CHECK(std::abs(same.folds[0].splits[0].rps - same.folds[0].splits[1].rps) < 0.01);

  // zero exposure in every cell of a fold
  auto empty = data;
  empty.exposures.col(3).setZero();
  empty.deaths.col(3).setZero();
  CHECK_THROWS(loo_cv_by_year(spec, empty, &ref, cfg, {}, std::vector<int>{2016}));
  // too few training years
  FundDataset tiny{grid_of(60, 89, 2013, 2015), data.exposures.leftCols(3), data.deaths.leftCols(3)};
  CHECK_THROWS(loo_cv_by_year(ModelSpec::make(ModelId::FD1, tiny.grid, std::string("r")), tiny, &ref, cfg));
}
