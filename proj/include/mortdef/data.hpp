#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace mortdef {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using CountMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;
/// true marks a cell that enters the likelihood.
using CellMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Malformed or inconsistent input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Age x calendar-year index set. Both axes are strictly increasing and
/// non-empty. Funds require contiguous axes; a reference table may carry a
/// sparse year axis until it has been interpolated.
class AgeYearGrid {
 public:
  AgeYearGrid() = default;
  AgeYearGrid(std::vector<int> ages, std::vector<int> years);

  /// Contiguous grid [first_age, last_age] x [first_year, last_year].
  static AgeYearGrid span(int first_age, int last_age, int first_year, int last_year);

  const std::vector<int>& ages() const { return ages_; }
  const std::vector<int>& years() const { return years_; }
  Eigen::Index n_ages() const { return static_cast<Eigen::Index>(ages_.size()); }
  Eigen::Index n_years() const { return static_cast<Eigen::Index>(years_.size()); }
  Eigen::Index n_cells() const { return n_ages() * n_years(); }
  int first_age() const { return ages_.front(); }
  int last_age() const { return ages_.back(); }
  int first_year() const { return years_.front(); }
  int last_year() const { return years_.back(); }

  bool ages_contiguous() const;
  bool years_contiguous() const;
  bool is_contiguous() const { return ages_contiguous() && years_contiguous(); }
  /// Throws DataError naming `what` when either axis has gaps.
  void require_contiguous(const std::string& what) const;

  bool has_age(int age) const;
  bool has_year(int year) const;
  Eigen::Index age_index(int age) const;
  Eigen::Index year_index(int year) const;

  /// Same ages, years restricted to the closed range.
  AgeYearGrid with_year_range(int first_year, int last_year) const;

  friend bool operator==(const AgeYearGrid&, const AgeYearGrid&) = default;

 private:
  std::vector<int> ages_;
  std::vector<int> years_;
};

/// Death counts and central exposures (person-years) of a fund.
struct FundDataset {
  AgeYearGrid grid;
  Matrix exposures;   // [age][year]
  CountMatrix deaths; // [age][year]

  /// Checks shapes, non-negativity, contiguity, and deaths == 0 wherever
  /// exposure == 0.
  void validate() const;

  /// Restriction to a closed range of years.
  FundDataset slice_years(int first_year, int last_year) const;
};

/// Central mortality rates m_{x,t} of a reference population.
struct ReferenceTable {
  AgeYearGrid grid;
  Matrix rates; // [age][year], strictly positive
  std::string label;

  void validate() const;
  /// True when the year axis has gaps and the table must be interpolated
  /// before it can back a model.
  bool requires_interpolation() const { return !grid.years_contiguous(); }

  double rate(int age, int year) const;
  /// log m over `target`, which must be covered cell by cell.
  Matrix log_rates_on(const AgeYearGrid& target) const;
  /// log m at one calendar year for the given ages.
  Vector log_rate_column(const std::vector<int>& ages, int year) const;
};

struct YearTotals {
  int year;
  double exposure;
  std::int64_t deaths;
};

FundDataset load_fund_csv(const std::filesystem::path& path);
ReferenceTable load_reference_csv(const std::filesystem::path& path, std::string label = {});

void write_fund_csv(const FundDataset& data, const std::filesystem::path& path);
void write_reference_csv(const ReferenceTable& table, const std::filesystem::path& path);

std::vector<YearTotals> aggregate_totals(const FundDataset& data);

} // namespace mortdef
