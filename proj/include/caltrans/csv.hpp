#pragma once

// Dataset ingestion and score export. The input schema is a header row with
// an `s` column, optional `z` and `y` columns and every other column taken as
// a covariate. Empty fields and `NA` mark absent z/y values.

#include <charconv>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "caltrans/core.hpp"

namespace caltrans {

// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
    } else if (ch == ',' && !quoted) {
      fields.push_back(field);
      field.clear();
    } else if (ch != '\r') {
      field.push_back(ch);
    }
  }
  fields.push_back(field);
  for (auto& f : fields) {
    const auto first = f.find_first_not_of(" \t");
    const auto last = f.find_last_not_of(" \t");
    f = first == std::string::npos ? std::string() : f.substr(first, last - first + 1);
  }
  return fields;
}

inline std::optional<double> parse_field(const std::string& field, const std::string& where) {
  if (field.empty() || field == "NA" || field == "na" || field == "NaN") return std::nullopt;
  double v = 0.0;
  auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size()) {
    fail(ErrorCode::kSchemaError, "cannot parse number '" + field + "' at " + where);
  }
  return v;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::optional<double>>> rows;

  std::optional<std::size_t> column(const std::string& name) const {
    for (std::size_t j = 0; j < header.size(); ++j) {
      if (header[j] == name) return j;
    }
    return std::nullopt;
  }
};

inline CsvTable read_csv_table(std::istream& in, const std::string& source) {
  CsvTable table;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r" || line[0] == '#') continue;
    auto fields = split_csv_line(line);
    if (table.header.empty()) {
      table.header = std::move(fields);
      continue;
    }
    if (fields.size() != table.header.size()) {
      fail(ErrorCode::kSchemaError, source + ":" + std::to_string(line_no) + ": expected " +
                                        std::to_string(table.header.size()) + " fields");
    }
    std::vector<std::optional<double>> row;
    row.reserve(fields.size());
    for (std::size_t j = 0; j < fields.size(); ++j) {
      row.push_back(parse_field(fields[j], source + ":" + std::to_string(line_no)));
    }
    table.rows.push_back(std::move(row));
  }
  if (table.header.empty()) fail(ErrorCode::kSchemaError, source + ": missing header row");
  return table;
}

inline CsvTable read_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIoError, "cannot open " + path);
  return read_csv_table(in, path);
}

// Builds a dataset from one table (with an `s` column) or from a study table
// plus a target table; in the two-table form `s` may be omitted and is implied
// by the file a row came from.
inline Dataset dataset_from_tables(const CsvTable& primary, const CsvTable* target = nullptr) {
  auto covariates_of = [](const CsvTable& t) {
    std::vector<std::string> names;
    for (const auto& h : t.header) {
      if (h != "s" && h != "z" && h != "y") names.push_back(h);
    }
    return names;
  };
  const std::vector<std::string> names = covariates_of(primary);
  if (!primary.column("s") && target == nullptr) {
    fail(ErrorCode::kSchemaError, "input is missing the required `s` column");
  }
  if (target != nullptr && covariates_of(*target) != names) {
    fail(ErrorCode::kSchemaError, "target input covariate columns differ from the study input");
  }
  const std::size_t n1 = primary.rows.size();
  const std::size_t n = n1 + (target ? target->rows.size() : 0);
  VectorXi s(static_cast<Index>(n));
  VectorXd z = VectorXd::Zero(static_cast<Index>(n));
  VectorXd y = VectorXd::Zero(static_cast<Index>(n));
  std::vector<bool> has_z(n, false);
  std::vector<bool> has_y(n, false);
  MatrixXd x(static_cast<Index>(n), static_cast<Index>(names.size()));

  auto load = [&](const CsvTable& t, std::size_t offset, std::optional<int> implied_s) {
    const auto s_col = t.column("s");
    const auto z_col = t.column("z");
    const auto y_col = t.column("y");
    std::vector<std::size_t> x_cols;
    for (const auto& name : names) x_cols.push_back(*t.column(name));
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      const auto& row = t.rows[r];
      const Index i = static_cast<Index>(offset + r);
      int si = implied_s.value_or(-1);
      if (s_col) {
        if (!row[*s_col]) fail(ErrorCode::kSchemaError, "missing s value");
        si = static_cast<int>(*row[*s_col]);
        if (implied_s && si != *implied_s) {
          fail(ErrorCode::kSchemaError, "s value contradicts the file it was read from");
        }
      }
      s[i] = si;
      if (z_col && row[*z_col]) {
        z[i] = *row[*z_col];
        has_z[static_cast<std::size_t>(i)] = true;
      }
      if (y_col && row[*y_col]) {
        y[i] = *row[*y_col];
        has_y[static_cast<std::size_t>(i)] = true;
      }
      for (std::size_t j = 0; j < x_cols.size(); ++j) {
        if (!row[x_cols[j]]) fail(ErrorCode::kSchemaError, "missing covariate value in " + names[j]);
        x(i, static_cast<Index>(j)) = *row[x_cols[j]];
      }
    }
  };
  load(primary, 0, target ? std::optional<int>(1) : std::nullopt);
  if (target) load(*target, n1, 0);
  return Dataset(s, OptionalColumn(z, has_z), OptionalColumn(y, has_y), x, names);
}

inline Dataset read_dataset_csv(const std::string& path,
                                const std::optional<std::string>& target_path = std::nullopt) {
  const CsvTable primary = read_csv_file(path);
  if (target_path) {
    const CsvTable target = read_csv_file(*target_path);
    return dataset_from_tables(primary, &target);
  }
  return dataset_from_tables(primary);
}

inline void write_dataset_csv(std::ostream& out, const Dataset& data) {
  out << "s,z,y";
  for (const auto& name : data.covariate_names()) out << ',' << name;
  out << '\n';
  for (Index i = 0; i < data.n(); ++i) {
    out << data.s()[i] << ',';
    if (data.z().has(i)) out << format_double(data.z()[i]);
    out << ',';
    if (data.y().has(i)) out << format_double(data.y()[i]);
    for (Index j = 0; j < data.d(); ++j) out << ',' << format_double(data.x()(i, j));
    out << '\n';
  }
}

inline void write_dataset_csv(const std::string& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIoError, "cannot write " + path);
  write_dataset_csv(out, data);
}

// Fitted sampling (rho) and propensity (pi) scores, one row per unit, for
// external overlap plots.
inline void export_scores(std::ostream& out, const VectorXd& rho_hat, const VectorXd& pi_hat,
                          const Dataset& data) {
  if (rho_hat.size() != data.n() || pi_hat.size() != data.n()) {
    fail(ErrorCode::kDimensionMismatch, "score vectors must have one entry per unit");
  }
  for (Index i = 0; i < data.n(); ++i) {
    for (double p : {rho_hat[i], pi_hat[i]}) {
      if (!(p > 0.0 && p < 1.0)) {
        fail(ErrorCode::kOutOfRange, "score outside (0,1) at unit " + std::to_string(i));
      }
    }
  }
  out << "unit_id,s,z,sampling_score,propensity_score\n";
  for (Index i = 0; i < data.n(); ++i) {
    out << i << ',' << data.s()[i] << ',';
    if (data.z().has(i)) out << format_double(data.z()[i]);
    out << ',' << format_double(rho_hat[i]) << ',' << format_double(pi_hat[i]) << '\n';
  }
  if (!out) fail(ErrorCode::kIoError, "write failed while exporting scores");
}

inline void export_scores(const std::string& path, const VectorXd& rho_hat, const VectorXd& pi_hat,
                          const Dataset& data) {
  std::ostringstream buffer;
  export_scores(buffer, rho_hat, pi_hat, data);
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIoError, "cannot write " + path);
  out << buffer.str();
  if (!out) fail(ErrorCode::kIoError, "write failed for " + path);
}

struct ScoreTable {
  VectorXd sampling_score;
  VectorXd propensity_score;
};

inline ScoreTable read_scores(const std::string& path) {
  const CsvTable t = read_csv_file(path);
  const auto rho_col = t.column("sampling_score");
  const auto pi_col = t.column("propensity_score");
  if (!rho_col || !pi_col) fail(ErrorCode::kSchemaError, path + ": not a score export");
  ScoreTable out;
  out.sampling_score.resize(static_cast<Index>(t.rows.size()));
  out.propensity_score.resize(static_cast<Index>(t.rows.size()));
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    out.sampling_score[static_cast<Index>(r)] = t.rows[r][*rho_col].value();
    out.propensity_score[static_cast<Index>(r)] = t.rows[r][*pi_col].value();
  }
  return out;
}

}  // namespace caltrans
