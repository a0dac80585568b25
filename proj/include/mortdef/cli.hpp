#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mortdef/evaluation.hpp"
#include "mortdef/inference.hpp"

namespace mortdef {

using YearRange = std::pair<int, int>;

/// Resolved options of one CLI invocation.
struct RunConfig {
  std::string command;
  std::vector<std::string> models;
  std::string fund_path;
  std::string reference_path;
  std::string reference_label;
  std::string prior_reference_path;
  std::optional<YearRange> train_years;
  std::optional<int> test_year;
  McmcConfig mcmc;
  ScoreOptions score;
  std::string out_dir;

  // predict, consistency-test
  std::string fit_dir;
  std::string table_path;
  double min_expected = 5.0;

  // simulate
  std::string truth_path;
  YearRange ages{60, 89};
  YearRange years{2013, 2019};
  double exposure_peak = 250.0;
  double exposure_floor = 5.0;
  std::string exposure_from;

  // prepare-reference
  std::string mode;
  std::string input_path;
  std::optional<YearRange> fit_ages;
  int last_age = 89;
  std::optional<YearRange> target_years;
  int restarts = 8;
  std::string hyper_path;
};

/// Parses "A:B" (inclusive) or a single "A".
YearRange parse_year_range(const std::string& text);

/// Entry point of the mortdef tool. `args` excludes the program name. Returns
/// the process exit code: 0 on success, 2 on usage errors, 1 otherwise. Errors
/// are reported on `err` as a JSON object.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

void cmd_fit(const RunConfig& config);
void cmd_predict(const RunConfig& config);
void cmd_cv(const RunConfig& config);
void cmd_simulate(const RunConfig& config);
void cmd_prepare_reference(const RunConfig& config);
void cmd_consistency_test(const RunConfig& config);

} // namespace mortdef
