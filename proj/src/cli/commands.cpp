#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "mortdef/cli.hpp"
#include "mortdef/format.hpp"
#include "mortdef/reference_prep.hpp"

namespace mortdef {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

YearRange parse_year_range(const std::string& text) {
  const auto colon = text.find(':');
  int a = 0, b = 0;
  if (colon == std::string::npos) {
    if (!parse_number(std::string_view(text), a)) throw std::invalid_argument("bad year range '" + text + "'");
    return {a, a};
  }
  if (!parse_number(std::string_view(text).substr(0, colon), a) ||
      !parse_number(std::string_view(text).substr(colon + 1), b))
    throw std::invalid_argument("bad range '" + text + "', expected A:B");
  if (a > b) throw std::invalid_argument("range '" + text + "' is reversed");
  return {a, b};
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

fs::path prepare_out(const RunConfig& c) {
  if (c.out_dir.empty()) throw std::invalid_argument("--out is required");
  fs::create_directories(c.out_dir);
  return c.out_dir;
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json range_json(const YearRange& r) { return json::array({r.first, r.second}); }

json mcmc_json(const McmcConfig& m) {
  return {{"chains", m.chains},     {"iterations", m.iterations},
          {"burn_in", m.burn_in},   {"thin", m.thin},
          {"seed", m.seed},         {"target_acceptance", m.target_acceptance},
          {"latent_steps", m.latent_steps}};
}

json calibration_json(const std::optional<PriorMeanCalibration>& c) {
  if (!c) return nullptr;
  json j = {{"beta0_mean", c->beta0_mean}, {"beta_ag_mean", c->beta_ag_mean}};
  j["beta_yr_mean"] = c->beta_yr_mean ? json(*c->beta_yr_mean) : json(nullptr);
  j["reference_label"] = c->reference_label;
  return j;
}

std::optional<PriorMeanCalibration> calibration_from_json(const json& j) {
  if (j.is_null()) return std::nullopt;
  PriorMeanCalibration c;
  c.beta0_mean = j.at("beta0_mean").get<double>();
  c.beta_ag_mean = j.at("beta_ag_mean").get<double>();
  if (!j.at("beta_yr_mean").is_null()) c.beta_yr_mean = j.at("beta_yr_mean").get<double>();
  c.reference_label = j.at("reference_label").get<std::string>();
  return c;
}

std::string default_label(const std::string& path, const std::string& label) {
  return label.empty() ? fs::path(path).stem().string() : label;
}

ReferenceTable load_model_reference(const std::string& path, const std::string& label) {
  auto table = load_reference_csv(path, default_label(path, label));
  if (table.requires_interpolation())
    throw DataError(path + ": reference years are not contiguous; run prepare-reference --mode interpolate first");
  return table;
}

FundDataset load_training_fund(const RunConfig& c) {
  auto data = load_fund_csv(c.fund_path);
  if (c.train_years) data = data.slice_years(c.train_years->first, c.train_years->second);
  return data;
}

// Model definition shared by fit, simulate and cv.
struct ModelContext {
  ModelSpec spec;
  std::optional<ReferenceTable> ref;
  std::optional<ReferenceTable> comparison; // direct models: table behind the calibration
};

ModelContext build_model(const std::string& model, const AgeYearGrid& grid, const RunConfig& c) {
  const ModelId id = parse_model_id(model);
  ModelContext ctx;
  if (is_deflator_model(id)) {
    if (c.reference_path.empty()) throw std::invalid_argument(std::string(to_string(id)) + " needs --reference");
    ctx.ref = load_model_reference(c.reference_path, c.reference_label);
    ctx.spec = ModelSpec::make(id, grid, ctx.ref->label);
    return ctx;
  }
  if (!c.reference_path.empty())
    throw std::invalid_argument(std::string(to_string(id)) + " does not take --reference");
  PriorMeanCalibration cal = default_calibration();
  if (!c.prior_reference_path.empty()) {
    const auto table = load_model_reference(c.prior_reference_path, c.reference_label);
    ReferenceTable on_grid{grid, table.log_rates_on(grid).array().exp().matrix(), table.label};
    cal = calibrate_prior_means(on_grid, id == ModelId::GPS2, -0.5, grid.first_age(), grid.first_year());
    ctx.comparison = table;
  }
  ctx.spec = ModelSpec::make(id, grid, std::nullopt, cal);
  return ctx;
}

json grid_json(const AgeYearGrid& g) {
  return {{"ages", range_json({g.first_age(), g.last_age()})}, {"years", range_json({g.first_year(), g.last_year()})}};
}

AgeYearGrid grid_from_ranges(const YearRange& ages, const YearRange& years) {
  std::vector<int> a, y;
  for (int v = ages.first; v <= ages.second; ++v) a.push_back(v);
  for (int v = years.first; v <= years.second; ++v) y.push_back(v);
  return AgeYearGrid(a, y);
}

json summary_json(const PosteriorDraws& draws) {
  json params = json::object();
  for (const auto& name : draws.reported_names()) {
    const auto s = posterior_summary(draws, name);
    json p = {{"mean", s.mean}, {"sd", s.sd},     {"lo50", s.lo50}, {"hi50", s.hi50},
              {"lo90", s.lo90}, {"hi90", s.hi90}, {"draws", draws.size()}};
    for (const auto& d : draws.diagnostics)
      if (d.name == name) {
        p["rhat"] = number_or_null(d.rhat);
        p["ess"] = number_or_null(d.ess);
      }
    params[name] = p;
  }
  return {{"model", std::string(to_string(draws.spec.id))}, {"draws", draws.size()}, {"parameters", params}};
}

json diagnostics_json(const PosteriorDraws& draws) {
  json chains = json::array();
  for (std::size_t c = 0; c < draws.chain_stats.size(); ++c) {
    const auto& s = draws.chain_stats[c];
    json blocks = json::array();
    for (std::size_t b = 0; b < s.blocks.size(); ++b)
      blocks.push_back({{"block", s.blocks[b]},
                        {"scale_at_burn_in", s.scales_at_burn_in[b]},
                        {"final_scale", s.final_scales[b]},
                        {"acceptance", s.acceptance[b]}});
    chains.push_back({{"chain", c},
                      {"init_attempts", s.init_attempts},
                      {"scale_changes_after_burn_in", s.scale_changes_after_burn_in},
                      {"blocks", blocks}});
  }
  json params = json::array();
  for (const auto& d : draws.diagnostics)
    params.push_back({{"name", d.name}, {"rhat", number_or_null(d.rhat)}, {"ess", number_or_null(d.ess)}});
  return {{"model", std::string(to_string(draws.spec.id))},
          {"chains", chains},
          {"parameters", params},
          {"error", draws.diagnostics_error.empty() ? json(nullptr) : json(draws.diagnostics_error)}};
}

void write_deflator_csv(const PosteriorDraws& draws, const ReferenceTable* ref, const fs::path& path) {
  const auto& spec = draws.spec;
  const auto na = spec.grid.n_ages(), ny = spec.grid.n_years();
  Matrix log_rates = Matrix::Zero(na, ny), deflators = Matrix::Zero(na, ny);
  bool has_deflators = false;
  for (const auto& p : draws.draws) {
    const auto s = deflator_surface(spec, p, ref);
    log_rates += s.log_rates;
    if (s.deflators) {
      deflators += *s.deflators;
      has_deflators = true;
    }
  }
  const double n = static_cast<double>(draws.size());
  std::string text = "age,year,log_rate,deflator\n";
  for (Eigen::Index j = 0; j < ny; ++j)
    for (Eigen::Index i = 0; i < na; ++i) {
      text += std::to_string(spec.grid.ages()[i]) + "," + std::to_string(spec.grid.years()[j]) + "," +
              format_double(log_rates(i, j) / n) + "," + (has_deflators ? format_double(deflators(i, j) / n) : "") +
              "\n";
    }
  write_text(path, text);
}

json zero_cells_json(const ModelSpec& spec, const FundDataset& data) {
  json cells = json::array();
  for (Eigen::Index j = 0; j < spec.grid.n_years(); ++j)
    for (Eigen::Index i = 0; i < spec.grid.n_ages(); ++i)
      if (!(data.exposures(i, j) > 0)) cells.push_back({spec.grid.ages()[i], spec.grid.years()[j]});
  return cells;
}

json base_run_json(const RunConfig& c) {
  json j = {{"tool", "mortdef"}, {"format_version", 1}, {"command", c.command}};
  return j;
}

// Fitted model restored from a fit output directory.
struct FittedModel {
  json run;
  ModelSpec spec;
  PosteriorDraws draws;
};

FittedModel load_fit(const std::string& dir) {
  FittedModel f;
  f.run = read_json(fs::path(dir) / "run.json");
  if (f.run.value("command", "") != "fit") throw DataError(dir + "/run.json is not the record of a fit");
  const ModelId id = parse_model_id(f.run.at("model").get<std::string>());
  const auto ages = f.run.at("grid").at("ages");
  const auto years = f.run.at("grid").at("years");
  const auto grid = grid_from_ranges({ages[0].get<int>(), ages[1].get<int>()}, {years[0].get<int>(), years[1].get<int>()});
  std::optional<std::string> label;
  if (!f.run.at("reference").is_null()) label = f.run.at("reference").at("label").get<std::string>();
  f.spec = ModelSpec::make(id, grid, label, calibration_from_json(f.run.at("calibration")));
  f.spec.age_pivot = f.run.at("age_pivot").get<int>();
  f.spec.year_pivot = f.run.at("year_pivot").get<int>();
  f.draws = read_draws_csv(f.spec, fs::path(dir) / "draws.csv");
  return f;
}

} // namespace

void cmd_fit(const RunConfig& c) {
  if (c.models.size() != 1) throw std::invalid_argument("fit takes exactly one --model");
  const fs::path out = prepare_out(c);
  const auto data = load_training_fund(c);
  const auto ctx = build_model(c.models.front(), data.grid, c);
  const auto draws = run_mcmc(ctx.spec, data, ctx.ref ? &*ctx.ref : nullptr, c.mcmc);

  write_draws_csv(draws, out / "draws.csv");
  write_json(out / "summary.json", summary_json(draws));
  write_json(out / "diagnostics.json", diagnostics_json(draws));
  const ReferenceTable* shown = ctx.ref ? &*ctx.ref : (ctx.comparison ? &*ctx.comparison : nullptr);
  write_deflator_csv(draws, shown, out / "deflators.csv");

  json run = base_run_json(c);
  run["model"] = std::string(to_string(ctx.spec.id));
  run["fund"] = c.fund_path;
  run["reference"] = ctx.ref ? json{{"path", c.reference_path}, {"label", ctx.ref->label}} : json(nullptr);
  run["prior_reference"] = c.prior_reference_path.empty() ? json(nullptr) : json(c.prior_reference_path);
  run["grid"] = grid_json(ctx.spec.grid);
  run["test_year"] = c.test_year ? json(*c.test_year) : json(nullptr);
  run["age_pivot"] = ctx.spec.age_pivot;
  run["year_pivot"] = ctx.spec.year_pivot;
  run["calibration"] = calibration_json(ctx.spec.calibration);
  run["mcmc"] = mcmc_json(c.mcmc);
  run["retained_draws"] = draws.size();
  run["zero_exposure_cells"] = zero_cells_json(ctx.spec, data);
  run["outputs"] = {"draws.csv", "summary.json", "diagnostics.json", "deflators.csv"};
  write_json(out / "run.json", run);
}

void cmd_predict(const RunConfig& c) {
  if (c.fit_dir.empty()) throw std::invalid_argument("predict needs --fit-dir");
  if (!c.test_year) throw std::invalid_argument("predict needs --test-year");
  const fs::path out = prepare_out(c);
  const auto fit = load_fit(c.fit_dir);
  if (!c.models.empty() && parse_model_id(c.models.front()) != fit.spec.id)
    throw std::invalid_argument("--model " + c.models.front() + " does not match the fitted model " +
                                std::string(to_string(fit.spec.id)));
  std::optional<ReferenceTable> future;
  if (is_deflator_model(fit.spec.id)) {
    if (c.reference_path.empty())
      throw std::invalid_argument("predict: " + std::string(to_string(fit.spec.id)) +
                                  " needs --reference covering the test year");
    future = load_model_reference(c.reference_path, c.reference_label);
    if (!future->grid.has_year(*c.test_year))
      throw DataError("predict: reference table has no rates for " + std::to_string(*c.test_year));
  } else if (!c.reference_path.empty()) {
    throw std::invalid_argument(std::string(to_string(fit.spec.id)) + " does not take --reference");
  }
  Rng rng = make_rng(c.mcmc.seed, 0);
  const Matrix curves = predict_mortality(fit.spec, fit.draws.draws, *c.test_year, future ? &*future : nullptr, rng);

  std::string text = "age,mean,lo50,hi50,lo90,hi90\n";
  for (Eigen::Index i = 0; i < curves.cols(); ++i) {
    const auto s = summarize(curves.col(i));
    text += std::to_string(fit.spec.grid.ages()[i]) + "," + format_double(s.mean) + "," + format_double(s.lo50) + "," +
            format_double(s.hi50) + "," + format_double(s.lo90) + "," + format_double(s.hi90) + "\n";
  }
  write_text(out / "curves.csv", text);

  json run = base_run_json(c);
  run["model"] = std::string(to_string(fit.spec.id));
  run["fit_dir"] = c.fit_dir;
  run["reference"] = future ? json{{"path", c.reference_path}, {"label", future->label}} : json(nullptr);
  run["test_year"] = *c.test_year;
  run["seed"] = c.mcmc.seed;
  run["draws"] = fit.draws.size();
  run["outputs"] = {"curves.csv"};
  write_json(out / "run.json", run);
}

void cmd_cv(const RunConfig& c) {
  if (c.models.empty()) throw std::invalid_argument("cv needs at least one --model");
  const fs::path out = prepare_out(c);
  const auto data = load_training_fund(c);
  if (data.grid.n_years() < 4) throw std::invalid_argument("cv needs at least 4 years of data");

  std::vector<ScoreReport> reports;
  std::string scores = "model,fold_year,split,metric,value,N\n";
  json run = base_run_json(c);
  run["models"] = c.models;
  run["fund"] = c.fund_path;
  run["reference"] = c.reference_path.empty() ? json(nullptr) : json(c.reference_path);
  run["prior_reference"] = c.prior_reference_path.empty() ? json(nullptr) : json(c.prior_reference_path);
  run["grid"] = grid_json(data.grid);
  run["mcmc"] = mcmc_json(c.mcmc);
  run["score"] = {{"d_bar", c.score.d_bar}, {"rps_include_k0", c.score.rps_include_k0}, {"mae_median", c.score.mae_median}};
  run["outputs"] = {"scores.csv", "cv_table.csv", "cv_table.json"};

  try {
    for (const auto& m : c.models) {
      // direct models carry no reference; only their own rules apply
      RunConfig mc = c;
      if (is_direct_model(parse_model_id(m))) mc.reference_path.clear();
      const auto ctx = build_model(m, data.grid, mc);
      auto report = loo_cv_by_year(ctx.spec, data, ctx.ref ? &*ctx.ref : nullptr, c.mcmc, c.score);
      for (const auto& f : report.folds)
        for (const auto& s : f.splits) {
          const std::string prefix = report.model + "," + std::to_string(f.fold_year) + "," + s.split + ",";
          const std::string n = "," + std::to_string(s.n) + "\n";
          scores += prefix + "log," + format_double(s.log) + n;
          scores += prefix + "rps," + format_double(s.rps) + n;
          scores += prefix + "mae," + format_double(s.mae) + n;
        }
      reports.push_back(std::move(report));
    }
  } catch (...) {
    write_text(out / "scores.csv", scores);
    run["valid"] = false;
    write_json(out / "run.json", run);
    throw;
  }
  write_text(out / "scores.csv", scores);

  std::string table = "model,metric,split,value\n";
  json rows = json::array();
  for (const auto& r : reports)
    for (const std::string metric : {"rps", "log"})
      for (const std::string split : {"in", "out"}) {
        const double v = r.mean(split, metric);
        table += r.model + "," + metric + "," + split + "," + format_double(v) + "\n";
        rows.push_back({{"model", r.model}, {"metric", metric}, {"split", split}, {"value", v}});
      }
  write_text(out / "cv_table.csv", table);
  write_json(out / "cv_table.json", {{"d_bar", c.score.d_bar}, {"rows", rows}});
  run["valid"] = true;
  write_json(out / "run.json", run);
}

void cmd_simulate(const RunConfig& c) {
  if (c.models.size() != 1) throw std::invalid_argument("simulate takes exactly one --model");
  if (c.truth_path.empty()) throw std::invalid_argument("simulate needs --truth");
  const fs::path out = prepare_out(c);

  Matrix exposures;
  AgeYearGrid grid;
  if (!c.exposure_from.empty()) {
    const auto src = load_fund_csv(c.exposure_from);
    grid = src.grid;
    exposures = src.exposures;
  } else {
    grid = grid_from_ranges(c.ages, c.years);
    exposures = exposure_profile(grid, c.exposure_peak, c.exposure_floor);
  }
  const auto ctx = build_model(c.models.front(), grid, c);
  const auto& spec = ctx.spec;

  const json truth_in = read_json(c.truth_path);
  ParameterVector truth;
  const auto scalars = spec.scalar_names();
  for (const auto& [key, value] : truth_in.items()) {
    if (key == "model") {
      if (parse_model_id(value.get<std::string>()) != spec.id)
        throw DataError(c.truth_path + ": parameters are for " + value.get<std::string>());
    } else if (key == "theta_vec" || key == "z") {
      const auto v = value.get<std::vector<double>>();
      (key == "z" ? truth.z : truth.theta_vec) = Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
    } else if (std::find(scalars.begin(), scalars.end(), key) != scalars.end()) {
      if (!value.is_number()) throw DataError(c.truth_path + ": '" + key + "' must be a number");
      truth.set_scalar(key, value.get<double>());
    } else {
      throw DataError(c.truth_path + ": '" + key + "' is not a parameter of " + std::string(to_string(spec.id)));
    }
  }
  Rng rng = make_rng(c.mcmc.seed, 0);
  truth = complete_from_prior(spec, truth, rng);
  if (!within_bounds(spec, truth)) throw DataError(c.truth_path + ": parameters violate their bounds");
  const auto data = simulate_fund(spec, truth, exposures, ctx.ref ? &*ctx.ref : nullptr, rng);
  write_fund_csv(data, out / "fund.csv");

  json t = {{"model", std::string(to_string(spec.id))}};
  for (const auto& n : scalars) t[n] = *truth.scalar(n);
  if (truth.theta_vec.size()) t["theta_vec"] = std::vector<double>(truth.theta_vec.begin(), truth.theta_vec.end());
  if (truth.z.size()) t["z"] = std::vector<double>(truth.z.begin(), truth.z.end());
  write_json(out / "truth.json", t);

  json run = base_run_json(c);
  run["model"] = std::string(to_string(spec.id));
  run["truth"] = c.truth_path;
  run["reference"] = ctx.ref ? json{{"path", c.reference_path}, {"label", ctx.ref->label}} : json(nullptr);
  run["grid"] = grid_json(grid);
  run["exposure"] = c.exposure_from.empty()
                        ? json{{"profile", "triangular"}, {"peak", c.exposure_peak}, {"floor", c.exposure_floor}}
                        : json{{"from", c.exposure_from}};
  run["seed"] = c.mcmc.seed;
  run["outputs"] = {"fund.csv", "truth.json"};
  write_json(out / "run.json", run);
}

void cmd_prepare_reference(const RunConfig& c) {
  if (c.input_path.empty()) throw std::invalid_argument("prepare-reference needs --input");
  const fs::path out = prepare_out(c);
  const auto table = load_reference_csv(c.input_path, default_label(c.input_path, c.reference_label));
  json prov = {{"mode", c.mode}, {"input", c.input_path}, {"label", table.label}};

  ReferenceTable result;
  if (c.mode == "extrapolate") {
    if (table.requires_interpolation()) throw DataError("extrapolate: interpolate the sparse years first");
    const YearRange fit = c.fit_ages.value_or(YearRange{table.grid.first_age(), table.grid.last_age()});
    const auto ext = extrapolate_reference(table, fit.first, fit.second, c.last_age);
    result = ext.table;
    json coeffs = json::array();
    for (std::size_t k = 0; k < ext.years.size(); ++k)
      coeffs.push_back({{"year", ext.years[k]},
                        {"intercept", ext.coeffs[k].intercept},
                        {"slope", ext.coeffs[k].slope},
                        {"pivot_age", ext.coeffs[k].pivot_age},
                        {"negative_slope", ext.coeffs[k].slope_is_negative()}});
    prov["fit_ages"] = range_json(fit);
    prov["last_age"] = c.last_age;
    prov["coefficients"] = coeffs;
  } else if (c.mode == "interpolate") {
    if (!c.target_years) throw std::invalid_argument("interpolate needs --target-years");
    std::vector<int> years;
    for (int y = c.target_years->first; y <= c.target_years->second; ++y) years.push_back(y);
    InterpolationOptions opt;
    opt.restarts = c.restarts;
    opt.seed = c.mcmc.seed;
    if (!c.hyper_path.empty()) {
      const auto h = read_json(c.hyper_path).at("hyper");
      opt.fixed = SurfaceHyper{h.at("process_variance").get<double>(), h.at("lengthscale_age").get<double>(),
                               h.at("lengthscale_year").get<double>(), h.at("noise_variance").get<double>()};
    }
    const auto r = interpolate_reference_gp(table, years, opt);
    result = r.table;
    prov["target_years"] = range_json(*c.target_years);
    prov["restarts"] = opt.fixed ? 0 : c.restarts;
    prov["seed"] = c.mcmc.seed;
    prov["hyper"] = {{"process_variance", r.hyper.process_variance},
                     {"lengthscale_age", r.hyper.lengthscale_age},
                     {"lengthscale_year", r.hyper.lengthscale_year},
                     {"noise_variance", r.hyper.noise_variance}};
    prov["mean_coefficients"] = {r.mean_coefficients(0), r.mean_coefficients(1), r.mean_coefficients(2)};
    prov["log_marginal_likelihood"] = r.log_marginal_likelihood;
    prov["best_restart"] = r.best_restart;
    prov["hyper_source"] = opt.fixed ? json(c.hyper_path) : json("maximum likelihood");
  } else {
    throw std::invalid_argument("--mode must be 'extrapolate' or 'interpolate'");
  }
  write_reference_csv(result, out / "reference.csv");
  write_json(out / "provenance.json", prov);
  json run = base_run_json(c);
  run["mode"] = c.mode;
  run["input"] = c.input_path;
  run["outputs"] = {"reference.csv", "provenance.json"};
  write_json(out / "run.json", run);
}

void cmd_consistency_test(const RunConfig& c) {
  if (c.table_path.empty() == c.fit_dir.empty())
    throw std::invalid_argument("consistency-test needs exactly one of --table and --fit-dir");
  const fs::path out = prepare_out(c);
  auto data = load_fund_csv(c.fund_path);
  Matrix expected_cells;
  json source;
  if (!c.table_path.empty()) {
    if (c.train_years) data = data.slice_years(c.train_years->first, c.train_years->second);
    const auto table = load_reference_csv(c.table_path, default_label(c.table_path, c.reference_label));
    expected_cells = table.log_rates_on(data.grid).array().exp() * data.exposures.array();
    source = {{"kind", "table"}, {"path", c.table_path}, {"label", table.label}};
  } else {
    const auto fit = load_fit(c.fit_dir);
    data = data.slice_years(fit.spec.grid.first_year(), fit.spec.grid.last_year());
    if (!(data.grid == fit.spec.grid)) throw DataError("consistency-test: fund grid differs from the fitted grid");
    std::optional<ReferenceTable> ref;
    if (is_deflator_model(fit.spec.id)) {
      if (c.reference_path.empty())
        throw std::invalid_argument("consistency-test: " + std::string(to_string(fit.spec.id)) + " needs --reference");
      ref = load_model_reference(c.reference_path, c.reference_label);
    }
    const Matrix ref_log = ref ? ref->log_rates_on(fit.spec.grid)
                               : Matrix::Zero(fit.spec.grid.n_ages(), fit.spec.grid.n_years());
    LatentFactorCache cache;
    Matrix mean_rate = Matrix::Zero(ref_log.rows(), ref_log.cols());
    for (const auto& p : fit.draws.draws) mean_rate += fund_log_rates(fit.spec, p, ref_log, cache).array().exp().matrix();
    mean_rate /= static_cast<double>(fit.draws.size());
    expected_cells = mean_rate.array() * data.exposures.array();
    source = {{"kind", "model"}, {"path", c.fit_dir}, {"label", std::string(to_string(fit.spec.id))}};
  }
  const Vector expected = expected_cells.rowwise().sum();
  const Vector observed = data.deaths.cast<double>().rowwise().sum();
  const auto r = chi_square_consistency(std::span<const double>(observed.data(), static_cast<std::size_t>(observed.size())),
                                        std::span<const double>(expected.data(), static_cast<std::size_t>(expected.size())),
                                        c.min_expected);
  json pooling = json::array();
  for (std::size_t k = 0; k < r.pooling.size(); ++k) {
    json ages = json::array();
    for (int i : r.pooling[k]) ages.push_back(data.grid.ages()[i]);
    pooling.push_back({{"ages", ages},
                       {"observed", r.observed(static_cast<Eigen::Index>(k))},
                       {"expected", r.expected(static_cast<Eigen::Index>(k))}});
  }
  write_json(out / "consistency.json", {{"statistic", r.statistic},
                                        {"dof", r.dof},
                                        {"p_value", r.p_value},
                                        {"min_expected", c.min_expected},
                                        {"source", source},
                                        {"pooling", pooling}});
  json run = base_run_json(c);
  run["fund"] = c.fund_path;
  run["source"] = source;
  run["grid"] = grid_json(data.grid);
  run["outputs"] = {"consistency.json"};
  write_json(out / "run.json", run);
}

} // namespace mortdef
