#pragma once

// Survey data matrix, CSV ingestion and the log/standardize transform.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "nrfu/stat_kernel.hpp"

namespace nrfu {

struct TransformMeta {
  bool log_applied = false;
  double zero_shift = 0.0;
  double center = 0.0;
  double scale = 1.0;
};

/// n x p observations. Missing cells hold NaN and are flagged in `missing`;
/// unit nonrespondent rows have every cell missing.
struct DataMatrix {
  Matrix values;
  MaskMatrix missing;
  std::vector<bool> unit_response;
  std::vector<std::string> names;
  std::vector<TransformMeta> transform;  ///< empty until preprocessed

  [[nodiscard]] Eigen::Index n() const { return values.rows(); }
  [[nodiscard]] Eigen::Index p() const { return values.cols(); }
  [[nodiscard]] bool transformed() const { return !transform.empty(); }

  [[nodiscard]] std::vector<Eigen::Index> respondents() const {
    std::vector<Eigen::Index> out;
    for (Eigen::Index i = 0; i < n(); ++i)
      if (unit_response[static_cast<std::size_t>(i)]) out.push_back(i);
    return out;
  }
  [[nodiscard]] std::vector<Eigen::Index> nonrespondents() const {
    std::vector<Eigen::Index> out;
    for (Eigen::Index i = 0; i < n(); ++i)
      if (!unit_response[static_cast<std::size_t>(i)]) out.push_back(i);
    return out;
  }
  [[nodiscard]] Eigen::Index n_t() const { return static_cast<Eigen::Index>(respondents().size()); }

  [[nodiscard]] Matrix respondent_values() const { return values(respondents(), Eigen::all); }
  [[nodiscard]] MaskMatrix respondent_missing() const { return missing(respondents(), Eigen::all); }
};

struct CsvOptions {
  std::string respond_column = "respond";
  char delimiter = ',';
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

inline std::vector<std::string_view> split(std::string_view line, char delim) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delim, start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline bool parse_double(std::string_view s, double& out) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

}  // namespace detail

/// Parses CSV text. Empty cells are missing; an optional 0/1 respond column
/// sets unit response, otherwise a row with every cell empty is a unit
/// nonrespondent.
inline DataMatrix parse_csv(std::string_view text, const CsvOptions& options = {}) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    auto pos = text.find('\n', start);
    if (pos == std::string_view::npos) pos = text.size();
    auto line = text.substr(start, pos - start);
    if (!detail::trim(line).empty()) lines.push_back(line);
    start = pos + 1;
  }
  if (lines.empty()) throw Error(ErrorCode::ParseError, "missing header row");

  const auto header = detail::split(lines[0], options.delimiter);
  std::ptrdiff_t respond_col = -1;
  DataMatrix data;
  std::vector<std::size_t> value_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (!options.respond_column.empty() && header[c] == options.respond_column) {
      respond_col = static_cast<std::ptrdiff_t>(c);
    } else {
      data.names.emplace_back(header[c]);
      value_cols.push_back(c);
    }
  }
  if (value_cols.empty()) throw Error(ErrorCode::ParseError, "no value columns in header");

  const auto n = static_cast<Eigen::Index>(lines.size() - 1);
  const auto p = static_cast<Eigen::Index>(value_cols.size());
  data.values = Matrix::Constant(n, p, std::numeric_limits<double>::quiet_NaN());
  data.missing = MaskMatrix::Constant(n, p, true);
  data.unit_response.assign(static_cast<std::size_t>(n), true);

  for (Eigen::Index i = 0; i < n; ++i) {
    const auto cells = detail::split(lines[static_cast<std::size_t>(i) + 1], options.delimiter);
    const std::string where = "row " + std::to_string(i + 1);
    if (cells.size() != header.size()) {
      throw Error(ErrorCode::InconsistentColumns,
                  where + " has " + std::to_string(cells.size()) + " cells, header has " + std::to_string(header.size()));
    }
    bool any_value = false;
    for (Eigen::Index j = 0; j < p; ++j) {
      const auto cell = cells[value_cols[static_cast<std::size_t>(j)]];
      if (cell.empty()) continue;
      double v = 0.0;
      if (!detail::parse_double(cell, v)) {
        throw Error(ErrorCode::ParseError, where + ", column " + data.names[static_cast<std::size_t>(j)] +
                                               ": not a number '" + std::string(cell) + "'");
      }
      data.values(i, j) = v;
      data.missing(i, j) = false;
      any_value = true;
    }
    bool responded = any_value;
    if (respond_col >= 0) {
      const auto flag = cells[static_cast<std::size_t>(respond_col)];
      if (flag == "1") {
        responded = true;
      } else if (flag == "0") {
        responded = false;
      } else {
        throw Error(ErrorCode::ParseError, where + ", column " + options.respond_column + ": expected 0 or 1");
      }
      if (responded && !any_value) {
        throw Error(ErrorCode::ValidationError, where + " is marked as responding but has no values");
      }
    }
    data.unit_response[static_cast<std::size_t>(i)] = responded;
    if (!responded) {
      data.values.row(i).setConstant(std::numeric_limits<double>::quiet_NaN());
      data.missing.row(i).setConstant(true);
    }
  }
  return data;
}

inline DataMatrix load_csv(const std::string& path, const CsvOptions& options = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_csv(buffer.str(), options);
}

/// Shortest decimal that round-trips to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline std::string to_csv(const DataMatrix& data, bool with_respond = true) {
  std::string out;
  for (std::size_t j = 0; j < data.names.size(); ++j) {
    if (j) out += ',';
    out += data.names[j];
  }
  if (with_respond) out += ",respond";
  out += '\n';
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    for (Eigen::Index j = 0; j < data.p(); ++j) {
      if (j) out += ',';
      if (!data.missing(i, j)) out += format_double(data.values(i, j));
    }
    if (with_respond) out += data.unit_response[static_cast<std::size_t>(i)] ? ",1" : ",0";
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Transform

struct TransformOptions {
  bool log_all = false;
  std::vector<std::string> log_variables;
  std::map<std::string, double> zero_shift;  ///< per-variable override
};

inline double forward_value(double x, const TransformMeta& m) {
  const double t = m.log_applied ? std::log(x + m.zero_shift) : x;
  return (t - m.center) / m.scale;
}

inline double inverse_value(double z, const TransformMeta& m) {
  const double t = z * m.scale + m.center;
  return m.log_applied ? std::exp(t) - m.zero_shift : t;
}

/// Model-scale rows back to original units.
inline Matrix inverse_transform(const Matrix& rows, const std::vector<TransformMeta>& meta) {
  if (static_cast<Eigen::Index>(meta.size()) != rows.cols()) {
    throw Error(ErrorCode::MetadataMissing, "transform metadata does not cover every variable");
  }
  Matrix out(rows.rows(), rows.cols());
  for (Eigen::Index j = 0; j < rows.cols(); ++j)
    for (Eigen::Index i = 0; i < rows.rows(); ++i) out(i, j) = inverse_value(rows(i, j), meta[static_cast<std::size_t>(j)]);
  return out;
}

/// Original units to model scale with stored metadata.
inline Matrix apply_transform(const Matrix& rows, const std::vector<TransformMeta>& meta) {
  if (static_cast<Eigen::Index>(meta.size()) != rows.cols()) {
    throw Error(ErrorCode::MetadataMissing, "transform metadata does not cover every variable");
  }
  Matrix out(rows.rows(), rows.cols());
  for (Eigen::Index j = 0; j < rows.cols(); ++j)
    for (Eigen::Index i = 0; i < rows.rows(); ++i) out(i, j) = forward_value(rows(i, j), meta[static_cast<std::size_t>(j)]);
  return out;
}

/// Optional log (with a shift when zeros are present), then centering and
/// scaling to respondent mean 0 and standard deviation 1.
inline DataMatrix preprocess(const DataMatrix& data, const TransformOptions& options = {}) {
  DataMatrix out = data;
  out.transform.assign(static_cast<std::size_t>(data.p()), TransformMeta{});
  for (Eigen::Index j = 0; j < data.p(); ++j) {
    const auto& name = data.names[static_cast<std::size_t>(j)];
    std::vector<double> obs;
    for (Eigen::Index i = 0; i < data.n(); ++i) {
      if (data.unit_response[static_cast<std::size_t>(i)] && !data.missing(i, j)) obs.push_back(data.values(i, j));
    }
    if (obs.size() < 2) throw Error(ErrorCode::NoObservedValues, name + " needs at least two observed values");

    TransformMeta& m = out.transform[static_cast<std::size_t>(j)];
    m.log_applied = options.log_all || std::find(options.log_variables.begin(), options.log_variables.end(), name) !=
                                           options.log_variables.end();
    if (m.log_applied) {
      double smallest_positive = std::numeric_limits<double>::infinity();
      bool has_zero = false;
      for (double x : obs) {
        if (x < 0.0) throw Error(ErrorCode::NegativeValueUnderLog, name + " has negative values");
        if (x == 0.0) has_zero = true;
        else smallest_positive = std::min(smallest_positive, x);
      }
      if (auto it = options.zero_shift.find(name); it != options.zero_shift.end()) {
        m.zero_shift = it->second;
      } else if (has_zero) {
        if (!std::isfinite(smallest_positive)) throw Error(ErrorCode::ConstantVariable, name + " is identically zero");
        m.zero_shift = 0.5 * smallest_positive;
      }
      for (double& x : obs) x = std::log(x + m.zero_shift);
    }
    double mean = 0.0;
    for (double x : obs) mean += x;
    mean /= static_cast<double>(obs.size());
    double ss = 0.0;
    for (double x : obs) ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / static_cast<double>(obs.size() - 1));
    if (!(sd > 0.0)) throw Error(ErrorCode::ConstantVariable, name + " has zero variance");
    m.center = mean;
    m.scale = sd;
    for (Eigen::Index i = 0; i < data.n(); ++i) {
      if (!data.missing(i, j)) out.values(i, j) = forward_value(data.values(i, j), m);
    }
  }
  return out;
}

}  // namespace nrfu
