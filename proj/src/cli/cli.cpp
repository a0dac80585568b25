#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>
#include <json.hpp>

#include "mortdef/cli.hpp"

namespace mortdef {

namespace {

struct RangeText {
  std::string train_years, ages, years, fit_ages, target_years;
};

void add_mcmc_options(CLI::App* sub, RunConfig& c) {
  sub->add_option("--chains", c.mcmc.chains, "Number of chains")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--iters", c.mcmc.iterations, "Iterations per chain, burn-in included")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  sub->add_option("--burnin", c.mcmc.burn_in, "Adaptive burn-in iterations")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  sub->add_option("--thin", c.mcmc.thin, "Keep every n-th post burn-in draw")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  sub->add_option("--latent-steps", c.mcmc.latent_steps, "Latent moves per iteration (0 = automatic)")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
}

void add_seed(CLI::App* sub, RunConfig& c) {
  sub->add_option("--seed", c.mcmc.seed, "Top-level seed")->capture_default_str();
}

void add_out(CLI::App* sub, RunConfig& c) { sub->add_option("--out", c.out_dir, "Output directory")->required(); }

void add_reference(CLI::App* sub, RunConfig& c) {
  sub->add_option("--reference", c.reference_path, "Reference mortality table CSV")->check(CLI::ExistingFile);
  sub->add_option("--reference-label", c.reference_label, "Reference label (default: file stem)");
}

void add_score_options(CLI::App* sub, RunConfig& c) {
  sub->add_option("--dbar", c.score.d_bar, "RPS truncation")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_flag("--rps-include-k0", c.score.rps_include_k0, "Add the k = 0 term to the RPS");
  sub->add_flag("--mae-median", c.score.mae_median, "MAE around the predictive median instead of the mean");
}

CLI::App* find_selected(CLI::App& app) {
  for (auto* sub : app.get_subcommands())
    if (sub->parsed()) return sub;
  return nullptr;
}

// Only the selected command's options, under its section, so the file can be
// passed back through --config.
void write_resolved_config(const CLI::App& sub, const RunConfig& c) {
  namespace fs = std::filesystem;
  std::ofstream out(fs::path(c.out_dir) / "resolved_config.ini", std::ios::binary);
  std::istringstream lines(sub.config_to_str(true, false));
  out << "[" << sub.get_name() << "]\n";
  // unset paths would fail their existence checks on reload
  for (std::string line; std::getline(lines, line);)
    if (!line.ends_with("=\"\"")) out << line << "\n";
}

std::string error_json(const std::string& kind, const std::string& message, int code) {
  nlohmann::ordered_json j = {{"error", kind}, {"message", message}, {"exit_code", code}};
  return j.dump();
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bayesian sub-population mortality: fit, predict, cross-validate, simulate", "mortdef"};
  app.set_config("--config", "", "INI file of options; command-line flags take precedence");
  app.require_subcommand(1);
  // lets --config follow the subcommand name
  app.fallthrough();

  RunConfig c;
  RangeText r;
  std::string model;

  auto* fit = app.add_subcommand("fit", "Sample the posterior of one model");
  fit->add_option("--model", model, "Model id")->required();
  fit->add_option("--fund", c.fund_path, "Fund CSV")->required()->check(CLI::ExistingFile);
  add_reference(fit, c);
  fit->add_option("--prior-reference", c.prior_reference_path, "Table calibrating direct-model priors")
      ->check(CLI::ExistingFile);
  fit->add_option("--train-years", r.train_years, "Training years A:B");
  fit->add_option("--test-year", c.test_year, "Held-back year, must lie outside the training years");
  add_mcmc_options(fit, c);
  add_seed(fit, c);
  add_out(fit, c);

  auto* predict = app.add_subcommand("predict", "Log-rate curves for one year from a fitted model");
  predict->add_option("--fit-dir", c.fit_dir, "Output directory of a fit")->required()->check(CLI::ExistingDirectory);
  predict->add_option("--model", model, "Expected model id");
  add_reference(predict, c);
  predict->add_option("--test-year", c.test_year, "Year to predict")->required();
  add_seed(predict, c);
  add_out(predict, c);

  std::vector<std::string> cv_models;
  auto* cv = app.add_subcommand("cv", "Leave-one-year-out cross-validation");
  cv->add_option("--model", cv_models, "Model ids")->required()->delimiter(',');
  cv->add_option("--fund", c.fund_path, "Fund CSV")->required()->check(CLI::ExistingFile);
  add_reference(cv, c);
  cv->add_option("--prior-reference", c.prior_reference_path, "Table calibrating direct-model priors")
      ->check(CLI::ExistingFile);
  cv->add_option("--train-years", r.train_years, "Years A:B entering the folds");
  add_mcmc_options(cv, c);
  add_score_options(cv, c);
  add_seed(cv, c);
  add_out(cv, c);

  auto* sim = app.add_subcommand("simulate", "Simulate a fund from given parameters");
  sim->add_option("--model", model, "Model id")->required();
  sim->add_option("--truth", c.truth_path, "JSON of true parameters")->required()->check(CLI::ExistingFile);
  add_reference(sim, c);
  sim->add_option("--prior-reference", c.prior_reference_path, "Table calibrating direct-model priors")
      ->check(CLI::ExistingFile);
  sim->add_option("--ages", r.ages, "Ages A:B")->capture_default_str();
  sim->add_option("--years", r.years, "Years A:B")->capture_default_str();
  sim->add_option("--exposure-peak", c.exposure_peak, "Peak exposure of the age profile")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  sim->add_option("--exposure-floor", c.exposure_floor, "Exposure at the last age")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  sim->add_option("--exposure-from", c.exposure_from, "Copy the grid and exposures of a fund CSV")
      ->check(CLI::ExistingFile);
  add_seed(sim, c);
  add_out(sim, c);

  auto* prep = app.add_subcommand("prepare-reference", "Complete a reference table");
  prep->add_option("--mode", c.mode, "extrapolate or interpolate")
      ->required()
      ->check(CLI::IsMember({"extrapolate", "interpolate"}));
  prep->add_option("--input", c.input_path, "Raw reference CSV")->required()->check(CLI::ExistingFile);
  prep->add_option("--label", c.reference_label, "Table label (default: file stem)");
  prep->add_option("--fit-ages", r.fit_ages, "Ages A:B of the Gompertz fit (default: all)");
  prep->add_option("--last-age", c.last_age, "Extend to this age")->capture_default_str();
  prep->add_option("--target-years", r.target_years, "Years A:B to produce");
  prep->add_option("--restarts", c.restarts, "Likelihood search restarts")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  prep->add_option("--hyper-file", c.hyper_path, "provenance.json whose hyperparameters are reused")
      ->check(CLI::ExistingFile);
  add_seed(prep, c);
  add_out(prep, c);

  auto* cons = app.add_subcommand("consistency-test", "Chi-square test of observed against expected deaths by age");
  cons->add_option("--fund", c.fund_path, "Fund CSV")->required()->check(CLI::ExistingFile);
  auto* table = cons->add_option("--table", c.table_path, "Mortality table CSV")->check(CLI::ExistingFile);
  auto* fitdir =
      cons->add_option("--fit-dir", c.fit_dir, "Output directory of a fit")->check(CLI::ExistingDirectory);
  table->excludes(fitdir);
  add_reference(cons, c);
  cons->add_option("--train-years", r.train_years, "Years A:B (table mode)");
  cons->add_option("--min-expected", c.min_expected, "Pool adjacent ages until this expected count")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  add_out(cons, c);

  auto fail = [&](const std::string& kind, const std::string& message, int code) {
    err << error_json(kind, message, code) << "\n";
    return code;
  };

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  auto* selected = find_selected(app);
  c.command = selected->get_name();
  try {
    if (!model.empty()) c.models = {model};
    if (selected == cv) c.models = cv_models;
    if (!r.train_years.empty()) c.train_years = parse_year_range(r.train_years);
    if (!r.ages.empty()) c.ages = parse_year_range(r.ages);
    if (!r.years.empty()) c.years = parse_year_range(r.years);
    if (!r.fit_ages.empty()) c.fit_ages = parse_year_range(r.fit_ages);
    if (!r.target_years.empty()) c.target_years = parse_year_range(r.target_years);
    if (c.test_year && c.train_years && *c.test_year >= c.train_years->first &&
        *c.test_year <= c.train_years->second)
      throw std::invalid_argument("--test-year " + std::to_string(*c.test_year) + " lies inside --train-years");
    c.mcmc.validate();
    // model/reference presence rules are checked before any work starts
    for (const auto& m : c.models) {
      const ModelId id = parse_model_id(m);
      if (selected == fit || selected == sim) {
        if (is_deflator_model(id) && c.reference_path.empty())
          throw std::invalid_argument(std::string(to_string(id)) + " needs --reference");
        if (is_direct_model(id) && !c.reference_path.empty())
          throw std::invalid_argument(std::string(to_string(id)) + " does not take --reference");
      }
      if (selected == cv && is_deflator_model(id) && c.reference_path.empty())
        throw std::invalid_argument(std::string(to_string(id)) + " needs --reference");
    }
  } catch (const std::invalid_argument& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    std::filesystem::create_directories(c.out_dir);
    write_resolved_config(*selected, c);
    if (selected == fit) cmd_fit(c);
    else if (selected == predict) cmd_predict(c);
    else if (selected == cv) cmd_cv(c);
    else if (selected == sim) cmd_simulate(c);
    else if (selected == prep) cmd_prepare_reference(c);
    else cmd_consistency_test(c);
  } catch (const std::invalid_argument& e) {
    return fail("usage", e.what(), 2);
  } catch (const DataError& e) {
    return fail("data", e.what(), 1);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 1);
  }
  return 0;
}

} // namespace mortdef
