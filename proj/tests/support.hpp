#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include "mortdef/data.hpp"

namespace mortdef::testing {

inline AgeYearGrid grid_of(int age_lo, int age_hi, int year_lo, int year_hi) {
  return AgeYearGrid::span(age_lo, age_hi, year_lo, year_hi);
}

// log m = b0 + slope (x - first age) + trend (t - first year)
inline ReferenceTable gompertz_table(const AgeYearGrid& grid, double b0, double slope, double trend = 0.0,
                                     std::string label = "ref") {
  Matrix rates(grid.n_ages(), grid.n_years());
  for (Eigen::Index j = 0; j < grid.n_years(); ++j)
    for (Eigen::Index i = 0; i < grid.n_ages(); ++i)
      rates(i, j) = std::exp(b0 + slope * (grid.ages()[i] - grid.first_age()) +
                             trend * (grid.years()[j] - grid.first_year()));
  return {grid, rates, std::move(label)};
}

inline FundDataset empty_fund(const AgeYearGrid& grid, double exposure) {
  return {grid, Matrix::Constant(grid.n_ages(), grid.n_years(), exposure),
          CountMatrix::Zero(grid.n_ages(), grid.n_years())};
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("mortdef_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

} // namespace mortdef::testing
