#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "mortdef/cli.hpp"
#include "mortdef/format.hpp"
#include "schema_check.hpp"
#include "support.hpp"

using namespace mortdef;
using mortdef::testing::json;
using mortdef::testing::load_json;
using mortdef::testing::scratch_dir;
namespace fs = std::filesystem;

namespace {

const fs::path fixtures = MORTDEF_FIXTURES;
const fs::path schemas = MORTDEF_SCHEMAS;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

void expect_valid_json(const std::string& schema, const fs::path& file) {
  INFO(file.string());
  const auto errors = mortdef::testing::validate_json_file(schemas / schema, file);
  for (const auto& e : errors) INFO(e);
  CHECK(errors.empty());
}

void expect_valid_csv(const std::string& schema, const fs::path& file) {
  const auto errors = mortdef::testing::validate_csv_file(schemas / "csv" / schema, file);
  INFO(file.string());
  CHECK(errors.size() == 0);
  if (!errors.empty()) MESSAGE(errors.front());
}

std::vector<std::string> fit_args(const std::string& model, const fs::path& out, const std::string& fund = "fund2.csv") {
  std::vector<std::string> a{"fit", "--model", model, "--fund", (fixtures / fund).string(), "--out", out.string(),
                             "--seed", "11"};
  if (model.rfind("GP-S", 0) != 0) {
    a.push_back("--reference");
    a.push_back((fixtures / "bra_like.csv").string());
  }
  return a;
}

std::vector<std::string> quick(std::vector<std::string> a) {
  for (const char* s : {"--iters", "800", "--burnin", "200", "--thin", "4"}) a.push_back(s);
  return a;
}

void set_threads(const char* v) { ::setenv("MORTDEF_THREADS", v, 1); }

json error_json(const Result& r) {
  const auto line = r.err.substr(0, r.err.find('\n'));
  return json::parse(line);
}

} // namespace

TEST_CASE("year ranges") {
  CHECK(parse_year_range("2013:2018") == YearRange{2013, 2018});
  CHECK(parse_year_range("2019") == YearRange{2019, 2019});
  CHECK_THROWS_AS(parse_year_range("2019:2013"), std::invalid_argument);
  CHECK_THROWS_AS(parse_year_range("abc"), std::invalid_argument);
  CHECK_THROWS_AS(parse_year_range("2013:"), std::invalid_argument);
}

TEST_CASE("usage errors exit with code 2 and an error json") {
  const auto dir = scratch_dir("cli_usage");
  const auto bra = (fixtures / "bra_like.csv").string();
  const auto fund = (fixtures / "fund2.csv").string();

  const auto none = run({});
  CHECK(none.code == 2);

  const auto gps1 = run({"fit", "--model", "GP-S1", "--fund", fund, "--reference", bra, "--out", (dir / "a").string()});
  CHECK(gps1.code == 2);
  CHECK(error_json(gps1)["exit_code"] == 2);
  CHECK_FALSE(fs::exists(dir / "a" / "draws.csv"));

  CHECK(run({"fit", "--model", "FD-1", "--fund", fund, "--out", (dir / "b").string()}).code == 2);
  CHECK(run({"fit", "--model", "XX-9", "--fund", fund, "--reference", bra, "--out", (dir / "c").string()}).code == 2);
  CHECK(run({"fit", "--model", "FD-1", "--fund", fund, "--reference", bra, "--train-years", "2013:2018",
             "--test-year", "2015", "--out", (dir / "d").string()})
            .code == 2);
  CHECK(run({"fit", "--model", "FD-1", "--fund", (dir / "missing.csv").string(), "--reference", bra, "--out",
             (dir / "e").string()})
            .code == 2);
  CHECK(run({"fit", "--model", "FD-1", "--fund", fund, "--reference", bra, "--burnin", "20000", "--out",
             (dir / "f").string()})
            .code == 2);
  CHECK(run({"fit", "--model", "FD-1", "--fund", fund, "--reference", bra, "--bogus", "--out", (dir / "g").string()})
            .code == 2);

  // data errors exit 1
  write_file(dir / "bad.csv", "age,year,exposure,deaths\n60,2013,-1,0\n");
  const auto bad = run({"fit", "--model", "FD-1", "--fund", (dir / "bad.csv").string(), "--reference", bra, "--out",
                        (dir / "h").string()});
  CHECK(bad.code == 1);
  CHECK(error_json(bad)["error"] == "data");
  CHECK(error_json(bad)["message"].get<std::string>().find("row 2") != std::string::npos);

  // sparse reference needs interpolation first
  const auto sparse = run({"fit", "--model", "FD-1", "--fund", fund, "--reference",
                           (fixtures / "ind_like_sparse.csv").string(), "--out", (dir / "i").string()});
  CHECK(sparse.code == 1);
  CHECK(error_json(sparse)["message"].get<std::string>().find("interpolat") != std::string::npos);
}

TEST_CASE("fit writes schema-valid artifacts and is deterministic across thread counts") {
  const auto dir = scratch_dir("cli_fit");
  set_threads("1");
  const auto a = run(fit_args("FD-1", dir / "a"));
  REQUIRE(a.code == 0);
  set_threads("3");
  const auto b = run(fit_args("FD-1", dir / "b"));
  REQUIRE(b.code == 0);
  ::unsetenv("MORTDEF_THREADS");

  const auto summary = load_json(dir / "a" / "summary.json");
  std::set<std::string> names;
  for (const auto& [k, v] : summary["parameters"].items()) {
    names.insert(k);
    CHECK(v["draws"] == 1200);
  }
  CHECK(names == std::set<std::string>{"theta", "omega"});
  CHECK(summary["draws"] == 1200);

  for (const char* f : {"draws.csv", "summary.json", "diagnostics.json", "deflators.csv"})
    CHECK_MESSAGE(slurp(dir / "a" / f) == slurp(dir / "b" / f), f);

  expect_valid_json("run.schema.json", dir / "a" / "run.json");
  expect_valid_json("summary.schema.json", dir / "a" / "summary.json");
  expect_valid_json("diagnostics.schema.json", dir / "a" / "diagnostics.json");
  expect_valid_csv("draws.json", dir / "a" / "draws.csv");
  expect_valid_csv("deflators.json", dir / "a" / "deflators.csv");
  CHECK(fs::exists(dir / "a" / "resolved_config.ini"));

  // the resolved config reproduces the run
  const auto c = run({"fit", "--config", (dir / "a" / "resolved_config.ini").string(), "--out", (dir / "c").string()});
  REQUIRE(c.code == 0);
  CHECK(slurp(dir / "a" / "draws.csv") == slurp(dir / "c" / "draws.csv"));
  CHECK(slurp(dir / "a" / "summary.json") == slurp(dir / "c" / "summary.json"));

  // a latent model with comma-bearing names also validates
  const auto s2 = run(quick(fit_args("GP-S2", dir / "s2")));
  REQUIRE(s2.code == 0);
  expect_valid_csv("draws.json", dir / "s2" / "draws.csv");
  expect_valid_json("summary.schema.json", dir / "s2" / "summary.json");
}

TEST_CASE("predict") {
  const auto dir = scratch_dir("cli_predict");
  const auto bra = (fixtures / "bra_like.csv").string();
  auto train = [&](const std::string& model, const fs::path& out) {
    auto a = quick(fit_args(model, out));
    a.push_back("--train-years");
    a.push_back("2013:2018");
    return run(a).code;
  };
  REQUIRE(train("FD-0", dir / "fd0") == 0);
  REQUIRE(train("AD-AR", dir / "adar") == 0);
  REQUIRE(train("TD-AR", dir / "tdar") == 0);

  auto predict = [&](const std::string& model, const fs::path& fit, const std::string& ref, const fs::path& out) {
    return run({"predict", "--model", model, "--fit-dir", fit.string(), "--reference", ref, "--test-year", "2019",
                "--seed", "5", "--out", out.string()});
  };

  // FD-0 reproduces the reference column
  REQUIRE(predict("FD-0", dir / "fd0", bra, dir / "p0").code == 0);
  const auto table = load_reference_csv(bra, "bra");
  {
    std::ifstream in(dir / "p0" / "curves.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "age,mean,lo50,hi50,lo90,hi90");
    int age = 60;
    while (std::getline(in, line)) {
      const auto f = mortdef::testing::csv_fields(line);
      const double expected = std::log(table.rates(table.grid.age_index(age), table.grid.year_index(2019)));
      for (std::size_t k = 1; k < 6; ++k) CHECK(std::abs(std::stod(f[k]) - expected) < 1e-12);
      ++age;
    }
    CHECK(age == 90);
  }
  expect_valid_csv("curves.json", dir / "p0" / "curves.csv");
  expect_valid_json("run.schema.json", dir / "p0" / "run.json");

  // nested intervals; a shifted future reference shifts the means
  const double c = 0.23;
  auto shifted = table;
  shifted.rates.col(table.grid.year_index(2019)) *= std::exp(c);
  write_reference_csv(shifted, dir / "shifted.csv");
  for (const char* model : {"AD-AR", "TD-AR"}) {
    const fs::path fit = dir / (model == std::string("AD-AR") ? "adar" : "tdar");
    REQUIRE(predict(model, fit, bra, dir / "base").code == 0);
    REQUIRE(predict(model, fit, (dir / "shifted.csv").string(), dir / "moved").code == 0);
    std::ifstream a(dir / "base" / "curves.csv"), b(dir / "moved" / "curves.csv");
    std::string la, lb;
    std::getline(a, la);
    std::getline(b, lb);
    while (std::getline(a, la) && std::getline(b, lb)) {
      const auto fa = mortdef::testing::csv_fields(la), fb = mortdef::testing::csv_fields(lb);
      std::vector<double> v;
      for (std::size_t k = 1; k < 6; ++k) v.push_back(std::stod(fa[k]));
      CHECK(v[3] <= v[1]); // lo90 <= lo50
      CHECK(v[1] <= v[2]);
      CHECK(v[2] <= v[4]);
      CHECK(std::abs(std::stod(fb[1]) - v[0] - c) < 1e-9);
    }
  }

  // model mismatch and missing future reference
  const auto mismatch = predict("FD-1", dir / "adar", bra, dir / "x");
  CHECK(mismatch.code != 0);
  write_reference_csv(ReferenceTable{table.grid.with_year_range(2013, 2018),
                                     table.rates.leftCols(6), "short"},
                      dir / "short.csv");
  CHECK(predict("AD-AR", dir / "adar", (dir / "short.csv").string(), dir / "y").code == 1);
}

TEST_CASE("cv table layout") {
  const auto dir = scratch_dir("cli_cv");
  auto args = quick({"cv", "--model", "FD-1", "--model", "AD-GP", "--fund", (fixtures / "fund1.csv").string(),
                     "--reference", (fixtures / "bra_like.csv").string(), "--out", (dir / "cv").string(), "--seed",
                     "2"});
  const auto r = run(args);
  REQUIRE(r.code == 0);
  const auto table = load_json(dir / "cv" / "cv_table.json");
  CHECK(table["rows"].size() == 8);
  CHECK(table["d_bar"] == 10);
  expect_valid_json("cv_table.schema.json", dir / "cv" / "cv_table.json");
  expect_valid_json("run.schema.json", dir / "cv" / "run.json");
  expect_valid_csv("scores.json", dir / "cv" / "scores.csv");
  expect_valid_csv("cv_table.json", dir / "cv" / "cv_table.csv");
  CHECK(load_json(dir / "cv" / "run.json")["valid"] == true);

  std::ifstream in(dir / "cv" / "scores.csv");
  std::string line;
  std::getline(in, line);
  int rows = 0;
  while (std::getline(in, line)) {
    const auto f = mortdef::testing::csv_fields(line);
    CHECK(f[5] == (f[2] == "out" ? "30" : "180"));
    ++rows;
  }
  CHECK(rows == 2 * 7 * 2 * 3);

  // too few years
  const auto few = run(quick({"cv", "--model", "FD-1", "--fund", (fixtures / "fund1.csv").string(), "--reference",
                              (fixtures / "bra_like.csv").string(), "--train-years", "2013:2015", "--out",
                              (dir / "few").string()}));
  CHECK(few.code != 0);
}

TEST_CASE("simulate") {
  const auto dir = scratch_dir("cli_sim");
  write_file(dir / "truth.json", R"({"theta": -0.5, "omega": 0.2})");
  auto sim = [&](const fs::path& out, const std::string& seed) {
    return run({"simulate", "--model", "FD-1", "--truth", (dir / "truth.json").string(), "--reference",
                (fixtures / "bra_like.csv").string(), "--seed", seed, "--out", out.string()});
  };
  REQUIRE(sim(dir / "a", "3").code == 0);
  REQUIRE(sim(dir / "b", "3").code == 0);
  CHECK(slurp(dir / "a" / "fund.csv") == slurp(dir / "b" / "fund.csv"));
  CHECK(slurp(dir / "a" / "truth.json") == slurp(dir / "b" / "truth.json"));
  expect_valid_csv("fund.json", dir / "a" / "fund.csv");
  expect_valid_json("truth.schema.json", dir / "a" / "truth.json");
  expect_valid_json("run.schema.json", dir / "a" / "run.json");

  const auto fund = load_fund_csv(dir / "a" / "fund.csv");
  CHECK(fund.exposures.maxCoeff() == 250.0);
  CHECK(fund.exposures.minCoeff() == 5.0);

  // total deaths against e^theta sum m E; NB variance adds omega per unit mean
  const auto ref = load_reference_csv(fixtures / "bra_like.csv", "bra");
  double mean = 0;
  for (Eigen::Index j = 0; j < fund.grid.n_years(); ++j)
    for (Eigen::Index i = 0; i < fund.grid.n_ages(); ++i)
      mean += std::exp(-0.5) * ref.rates(ref.grid.age_index(fund.grid.ages()[i]), ref.grid.year_index(fund.grid.years()[j])) *
              fund.exposures(i, j);
  const double total = static_cast<double>(fund.deaths.sum());
  CHECK(std::abs(total - mean) <= 4 * std::sqrt(mean * 1.2));

  write_file(dir / "bad.json", R"({"theta": -0.5, "omega": 0.2, "rho": 0.5})");
  const auto bad = run({"simulate", "--model", "FD-1", "--truth", (dir / "bad.json").string(), "--reference",
                        (fixtures / "bra_like.csv").string(), "--out", (dir / "c").string()});
  CHECK(bad.code == 1);
  CHECK(error_json(bad)["message"].get<std::string>().find("rho") != std::string::npos);
  write_file(dir / "oob.json", R"({"theta": -0.5, "omega": -1})");
  CHECK(run({"simulate", "--model", "FD-1", "--truth", (dir / "oob.json").string(), "--reference",
             (fixtures / "bra_like.csv").string(), "--out", (dir / "d").string()})
            .code == 1);
}

TEST_CASE("prepare reference") {
  const auto dir = scratch_dir("cli_prep");
  const auto ext = run({"prepare-reference", "--mode", "extrapolate", "--input",
                        (fixtures / "bra_like_raw.csv").string(), "--fit-ages", "60:80", "--out",
                        (dir / "ext").string()});
  REQUIRE(ext.code == 0);
  const auto t = load_reference_csv(dir / "ext" / "reference.csv", "x");
  CHECK(t.grid.first_age() == 60);
  CHECK(t.grid.last_age() == 89);
  // noiseless fixture: log m = -5.8 + 0.095 (x - 60) - 0.012 (t - 2013)
  for (int y = 2013; y <= 2020; ++y)
    for (int a = 81; a <= 89; ++a) {
      const double expected = std::exp(-5.8 + 0.095 * (a - 60) - 0.012 * (y - 2013));
      CHECK(std::abs(t.rates(t.grid.age_index(a), t.grid.year_index(y)) / expected - 1) < 1e-9);
    }
  CHECK(slurp(dir / "ext" / "reference.csv") == slurp(fixtures / "bra_like.csv"));
  expect_valid_json("provenance.schema.json", dir / "ext" / "provenance.json");
  expect_valid_csv("reference.json", dir / "ext" / "reference.csv");

  const auto in = run({"prepare-reference", "--mode", "interpolate", "--input",
                       (fixtures / "ind_like_sparse.csv").string(), "--target-years", "2010:2021", "--seed", "7",
                       "--out", (dir / "int").string()});
  REQUIRE(in.code == 0);
  const auto it = load_reference_csv(dir / "int" / "reference.csv", "x");
  std::vector<int> years;
  for (int y = 2010; y <= 2021; ++y) years.push_back(y);
  CHECK(it.grid.years() == years);
  expect_valid_json("provenance.schema.json", dir / "int" / "provenance.json");
  CHECK(slurp(dir / "int" / "reference.csv") == slurp(fixtures / "ind_like.csv"));

  // recorded hyperparameters reproduce the table bit for bit
  const auto again = run({"prepare-reference", "--mode", "interpolate", "--input",
                          (fixtures / "ind_like_sparse.csv").string(), "--target-years", "2010:2021", "--hyper-file",
                          (dir / "int" / "provenance.json").string(), "--out", (dir / "pinned").string()});
  REQUIRE(again.code == 0);
  CHECK(slurp(dir / "int" / "reference.csv") == slurp(dir / "pinned" / "reference.csv"));
  CHECK(load_json(dir / "pinned" / "provenance.json")["hyper"] == load_json(dir / "int" / "provenance.json")["hyper"]);
}

TEST_CASE("consistency test") {
  const auto dir = scratch_dir("cli_chisq");
  const auto fund = load_fund_csv(fixtures / "fund1.csv");
  const auto& g = fund.grid;
  CHECK(fund.deaths.sum() >= 300);

  // age-level empirical rates constant over years: O = E for every age
  ReferenceTable empirical{g, Matrix(g.n_ages(), g.n_years()), "emp"};
  for (Eigen::Index i = 0; i < g.n_ages(); ++i) {
    const double rate = std::max(static_cast<double>(fund.deaths.row(i).sum()), 1e-9) / fund.exposures.row(i).sum();
    empirical.rates.row(i).setConstant(rate);
  }
  write_reference_csv(empirical, dir / "emp.csv");
  auto doubled = empirical;
  doubled.rates *= 2;
  write_reference_csv(doubled, dir / "double.csv");

  auto test = [&](const fs::path& table, const fs::path& out) {
    return run({"consistency-test", "--fund", (fixtures / "fund1.csv").string(), "--table", table.string(), "--out",
                out.string()});
  };
  REQUIRE(test(dir / "emp.csv", dir / "emp").code == 0);
  const auto emp = load_json(dir / "emp" / "consistency.json");
  CHECK(emp["statistic"].get<double>() < 1e-6);
  CHECK(emp["p_value"].get<double>() > 0.999);
  REQUIRE(test(dir / "double.csv", dir / "dbl").code == 0);
  CHECK(load_json(dir / "dbl" / "consistency.json")["p_value"].get<double>() < 0.05);
  expect_valid_json("consistency.schema.json", dir / "emp" / "consistency.json");

  // model-based expected counts share the same keys
  REQUIRE(run(quick(fit_args("FD-1", dir / "fit", "fund1.csv"))).code == 0);
  REQUIRE(run({"consistency-test", "--fund", (fixtures / "fund1.csv").string(), "--fit-dir", (dir / "fit").string(),
               "--reference", (fixtures / "bra_like.csv").string(), "--out", (dir / "model").string()})
              .code == 0);
  const auto model = load_json(dir / "model" / "consistency.json");
  expect_valid_json("consistency.schema.json", dir / "model" / "consistency.json");
  std::set<std::string> ka, kb;
  for (const auto& [k, v] : emp.items()) ka.insert(k);
  for (const auto& [k, v] : model.items()) kb.insert(k);
  CHECK(ka == kb);
  CHECK(model["source"]["kind"] == "model");

  CHECK(run({"consistency-test", "--fund", (fixtures / "fund1.csv").string(), "--out", (dir / "none").string()}).code ==
        2);
}
