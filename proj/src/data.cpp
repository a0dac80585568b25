#include "mortdef/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <utility>

#include "mortdef/format.hpp"

namespace mortdef {

namespace {

bool strictly_increasing(const std::vector<int>& v) {
  return std::adjacent_find(v.begin(), v.end(), [](int a, int b) { return b <= a; }) == v.end();
}

bool contiguous(const std::vector<int>& v) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] != v[i - 1] + 1) return false;
  return true;
}

std::vector<int> range(int first, int last) {
  std::vector<int> out;
  for (int v = first; v <= last; ++v) out.push_back(v);
  return out;
}

std::string row_msg(const std::string& what, std::size_t row) {
  return what + " at row " + std::to_string(row);
}

struct RawRow {
  int age;
  int year;
  std::vector<std::string_view> rest;
  std::size_t row;
};

// Reads a header-checked CSV into rows keyed by (age, year). Rows are numbered
// by file line, header = row 1.
template <typename OnRow>
void read_keyed_csv(const std::filesystem::path& path, const std::string& header,
                    std::size_t n_fields, OnRow&& on_row) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != header)
    throw DataError(path.string() + ": header must be exactly '" + header + "', got '" + line + "'");
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_csv(line);
    if (fields.size() != n_fields)
      throw DataError(row_msg("malformed row (expected " + std::to_string(n_fields) + " fields)", row));
    int age = 0, year = 0;
    if (!parse_number(fields[0], age)) throw DataError(row_msg("malformed age", row));
    if (!parse_number(fields[1], year)) throw DataError(row_msg("malformed year", row));
    on_row(age, year, std::vector<std::string_view>(fields.begin() + 2, fields.end()), row);
  }
}

template <typename Value>
AgeYearGrid grid_from_cells(const std::map<std::pair<int, int>, Value>& cells,
                            const std::filesystem::path& path, bool allow_sparse_years) {
  if (cells.empty()) throw DataError(path.string() + ": no data rows");
  std::vector<int> ages, years;
  for (const auto& [key, _] : cells) {
    ages.push_back(key.first);
    years.push_back(key.second);
  }
  std::sort(ages.begin(), ages.end());
  ages.erase(std::unique(ages.begin(), ages.end()), ages.end());
  std::sort(years.begin(), years.end());
  years.erase(std::unique(years.begin(), years.end()), years.end());
  if (!contiguous(ages)) throw DataError(path.string() + ": non-contiguous age axis");
  if (!allow_sparse_years && !contiguous(years))
    throw DataError(path.string() + ": non-contiguous year axis");

  std::ostringstream missing;
  std::size_t n_missing = 0;
  for (int a : ages)
    for (int y : years)
      if (!cells.count({a, y})) {
        if (n_missing < 20) missing << " (" << a << "," << y << ")";
        ++n_missing;
      }
  if (n_missing > 0)
    throw DataError(path.string() + ": " + std::to_string(n_missing) + " missing cell(s):" + missing.str());
  return AgeYearGrid(std::move(ages), std::move(years));
}

} // namespace

AgeYearGrid::AgeYearGrid(std::vector<int> ages, std::vector<int> years)
    : ages_(std::move(ages)), years_(std::move(years)) {
  if (ages_.empty() || years_.empty()) throw DataError("grid axes must be non-empty");
  if (!strictly_increasing(ages_)) throw DataError("grid ages must be strictly increasing");
  if (!strictly_increasing(years_)) throw DataError("grid years must be strictly increasing");
}

AgeYearGrid AgeYearGrid::span(int first_age, int last_age, int first_year, int last_year) {
  return AgeYearGrid(range(first_age, last_age), range(first_year, last_year));
}

bool AgeYearGrid::ages_contiguous() const { return contiguous(ages_); }
bool AgeYearGrid::years_contiguous() const { return contiguous(years_); }

void AgeYearGrid::require_contiguous(const std::string& what) const {
  if (!ages_contiguous()) throw DataError(what + ": age axis must be contiguous");
  if (!years_contiguous()) throw DataError(what + ": year axis must be contiguous (interpolate first)");
}

bool AgeYearGrid::has_age(int age) const { return std::binary_search(ages_.begin(), ages_.end(), age); }
bool AgeYearGrid::has_year(int year) const {
  return std::binary_search(years_.begin(), years_.end(), year);
}

Eigen::Index AgeYearGrid::age_index(int age) const {
  auto it = std::lower_bound(ages_.begin(), ages_.end(), age);
  if (it == ages_.end() || *it != age) throw DataError("age " + std::to_string(age) + " not in grid");
  return it - ages_.begin();
}

Eigen::Index AgeYearGrid::year_index(int year) const {
  auto it = std::lower_bound(years_.begin(), years_.end(), year);
  if (it == years_.end() || *it != year) throw DataError("year " + std::to_string(year) + " not in grid");
  return it - years_.begin();
}

AgeYearGrid AgeYearGrid::with_year_range(int first_year, int last_year) const {
  std::vector<int> ys;
  for (int y : years_)
    if (y >= first_year && y <= last_year) ys.push_back(y);
  if (ys.empty())
    throw DataError("no grid years in [" + std::to_string(first_year) + ", " + std::to_string(last_year) + "]");
  return AgeYearGrid(ages_, std::move(ys));
}

void FundDataset::validate() const {
  grid.require_contiguous("fund dataset");
  if (exposures.rows() != grid.n_ages() || exposures.cols() != grid.n_years() ||
      deaths.rows() != grid.n_ages() || deaths.cols() != grid.n_years())
    throw DataError("fund dataset: matrix shape does not match grid");
  for (Eigen::Index i = 0; i < exposures.rows(); ++i)
    for (Eigen::Index j = 0; j < exposures.cols(); ++j) {
      const double e = exposures(i, j);
      const auto d = deaths(i, j);
      const std::string cell = " at (" + std::to_string(grid.ages()[i]) + "," +
                               std::to_string(grid.years()[j]) + ")";
      if (!std::isfinite(e) || e < 0) throw DataError("negative or non-finite exposure" + cell);
      if (d < 0) throw DataError("negative deaths" + cell);
      if (e == 0 && d != 0) throw DataError("deaths recorded with zero exposure" + cell);
    }
}

FundDataset FundDataset::slice_years(int first_year, int last_year) const {
  FundDataset out;
  out.grid = grid.with_year_range(first_year, last_year);
  const auto j0 = grid.year_index(out.grid.first_year());
  out.exposures = exposures.middleCols(j0, out.grid.n_years());
  out.deaths = deaths.middleCols(j0, out.grid.n_years());
  return out;
}

void ReferenceTable::validate() const {
  if (!grid.ages_contiguous()) throw DataError("reference table: age axis must be contiguous");
  if (rates.rows() != grid.n_ages() || rates.cols() != grid.n_years())
    throw DataError("reference table: matrix shape does not match grid");
  if (!(rates.array().isFinite().all() && (rates.array() > 0).all()))
    throw DataError("reference table: rates must be positive and finite");
}

double ReferenceTable::rate(int age, int year) const {
  return rates(grid.age_index(age), grid.year_index(year));
}

Matrix ReferenceTable::log_rates_on(const AgeYearGrid& target) const {
  Matrix out(target.n_ages(), target.n_years());
  for (Eigen::Index j = 0; j < target.n_years(); ++j) {
    const int year = target.years()[j];
    if (!grid.has_year(year))
      throw DataError("reference table '" + label + "' does not cover year " + std::to_string(year));
    const auto col = grid.year_index(year);
    for (Eigen::Index i = 0; i < target.n_ages(); ++i) {
      const int age = target.ages()[i];
      if (!grid.has_age(age))
        throw DataError("reference table '" + label + "' does not cover age " + std::to_string(age));
      out(i, j) = std::log(rates(grid.age_index(age), col));
    }
  }
  return out;
}

Vector ReferenceTable::log_rate_column(const std::vector<int>& ages, int year) const {
  return log_rates_on(AgeYearGrid(ages, {year})).col(0);
}

FundDataset load_fund_csv(const std::filesystem::path& path) {
  struct Cell {
    double exposure;
    std::int64_t deaths;
  };
  std::map<std::pair<int, int>, Cell> cells;
  read_keyed_csv(path, "age,year,exposure,deaths", 4,
                 [&](int age, int year, const std::vector<std::string_view>& rest, std::size_t row) {
                   Cell c{};
                   if (!parse_number(rest[0], c.exposure) || !std::isfinite(c.exposure))
                     throw DataError(row_msg("malformed exposure", row));
                   if (!parse_number(rest[1], c.deaths)) throw DataError(row_msg("malformed deaths", row));
                   if (c.exposure < 0) throw DataError(row_msg("negative exposure", row));
                   if (c.deaths < 0) throw DataError(row_msg("negative deaths", row));
                   if (c.exposure == 0 && c.deaths != 0)
                     throw DataError(row_msg("deaths recorded with zero exposure", row));
                   if (!cells.emplace(std::make_pair(age, year), c).second)
                     throw DataError(row_msg("duplicate (age, year) pair (" + std::to_string(age) + "," +
                                                 std::to_string(year) + ")",
                                             row));
                 });
  FundDataset data;
  data.grid = grid_from_cells(cells, path, false);
  data.exposures.resize(data.grid.n_ages(), data.grid.n_years());
  data.deaths.resize(data.grid.n_ages(), data.grid.n_years());
  for (const auto& [key, c] : cells) {
    const auto i = data.grid.age_index(key.first);
    const auto j = data.grid.year_index(key.second);
    data.exposures(i, j) = c.exposure;
    data.deaths(i, j) = c.deaths;
  }
  return data;
}

ReferenceTable load_reference_csv(const std::filesystem::path& path, std::string label) {
  std::map<std::pair<int, int>, double> cells;
  read_keyed_csv(path, "age,year,mx", 3,
                 [&](int age, int year, const std::vector<std::string_view>& rest, std::size_t row) {
                   double mx = 0;
                   if (!parse_number(rest[0], mx) || !std::isfinite(mx))
                     throw DataError(row_msg("malformed rate", row));
                   if (mx <= 0) throw DataError(row_msg("non-positive rate", row));
                   if (!cells.emplace(std::make_pair(age, year), mx).second)
                     throw DataError(row_msg("duplicate (age, year) pair (" + std::to_string(age) + "," +
                                                 std::to_string(year) + ")",
                                             row));
                 });
  ReferenceTable table;
  table.label = std::move(label);
  table.grid = grid_from_cells(cells, path, true);
  table.rates.resize(table.grid.n_ages(), table.grid.n_years());
  for (const auto& [key, mx] : cells)
    table.rates(table.grid.age_index(key.first), table.grid.year_index(key.second)) = mx;
  return table;
}

void write_fund_csv(const FundDataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "age,year,exposure,deaths\n";
  for (Eigen::Index i = 0; i < data.grid.n_ages(); ++i)
    for (Eigen::Index j = 0; j < data.grid.n_years(); ++j)
      out << data.grid.ages()[i] << ',' << data.grid.years()[j] << ',' << format_double(data.exposures(i, j))
          << ',' << data.deaths(i, j) << '\n';
}

void write_reference_csv(const ReferenceTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "age,year,mx\n";
  for (Eigen::Index i = 0; i < table.grid.n_ages(); ++i)
    for (Eigen::Index j = 0; j < table.grid.n_years(); ++j)
      out << table.grid.ages()[i] << ',' << table.grid.years()[j] << ',' << format_double(table.rates(i, j))
          << '\n';
}

std::vector<YearTotals> aggregate_totals(const FundDataset& data) {
  std::vector<YearTotals> out;
  for (Eigen::Index j = 0; j < data.grid.n_years(); ++j)
    out.push_back({data.grid.years()[j], data.exposures.col(j).sum(), data.deaths.col(j).sum()});
  return out;
}

} // namespace mortdef
