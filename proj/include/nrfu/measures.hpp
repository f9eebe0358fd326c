#pragma once

// Accuracy measures comparing a hypothetical true dataset with its completed
// versions (relative mean difference, standardized mean difference and a
// propensity-score distance), the follow-up cost and scenario expectations.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "nrfu/stat_kernel.hpp"

namespace nrfu {

/// Column means and (n - 1) standard deviations of one dataset.
struct ColumnSummary {
  Vector mean;
  Vector sd;
  Eigen::Index n = 0;

  static ColumnSummary of(const Matrix& rows) {
    ColumnSummary s;
    s.n = rows.rows();
    s.mean = rows.colwise().mean().transpose();
    s.sd.resize(rows.cols());
    for (Eigen::Index j = 0; j < rows.cols(); ++j) {
      const double ss = (rows.col(j).array() - s.mean(j)).square().sum();
      s.sd(j) = s.n > 1 ? std::sqrt(ss / static_cast<double>(s.n - 1)) : 0.0;
    }
    return s;
  }
};

// ---------------------------------------------------------------------------
// theta

/// Signed relative difference (truth - completion) / truth per variable; NaN
/// where the truth mean is zero.
inline Vector theta_replicate(const ColumnSummary& truth, const ColumnSummary& completion) {
  Vector out(truth.mean.size());
  for (Eigen::Index v = 0; v < out.size(); ++v) {
    out(v) = truth.mean(v) == 0.0 ? std::numeric_limits<double>::quiet_NaN()
                                  : (truth.mean(v) - completion.mean(v)) / truth.mean(v);
  }
  return out;
}

struct MeasureSummary {
  Vector per_variable;              ///< mean absolute value across replicates
  double aggregate = 0.0;           ///< mean over usable variables
  std::vector<bool> skipped;        ///< variables dropped from the aggregate
};

namespace detail {

inline MeasureSummary average_abs(std::span<const Vector> replicates) {
  MeasureSummary out;
  if (replicates.empty()) return out;
  const Eigen::Index p = replicates.front().size();
  out.per_variable = Vector::Zero(p);
  out.skipped.assign(static_cast<std::size_t>(p), false);
  for (const auto& r : replicates) {
    for (Eigen::Index v = 0; v < p; ++v) {
      if (std::isnan(r(v))) out.skipped[static_cast<std::size_t>(v)] = true;
      else out.per_variable(v) += std::abs(r(v));
    }
  }
  out.per_variable /= static_cast<double>(replicates.size());
  double sum = 0.0;
  int used = 0;
  for (Eigen::Index v = 0; v < p; ++v) {
    if (out.skipped[static_cast<std::size_t>(v)]) {
      out.per_variable(v) = std::numeric_limits<double>::quiet_NaN();
    } else {
      sum += out.per_variable(v);
      ++used;
    }
  }
  out.aggregate = used > 0 ? sum / used : std::numeric_limits<double>::quiet_NaN();
  return out;
}

}  // namespace detail

/// theta_v = mean over replicates of |(truth - completion) / truth|;
/// variables with a zero truth mean are flagged and left out of the aggregate.
inline MeasureSummary theta_measure(std::span<const Vector> signed_replicates) {
  return detail::average_abs(signed_replicates);
}

// ---------------------------------------------------------------------------
// tau

/// Signed mean difference over an approximate standard error, per variable.
inline Vector tau_replicate(const ColumnSummary& truth, const ColumnSummary& completion) {
  const auto n = static_cast<double>(truth.n);
  if (truth.n < 2) throw Error(ErrorCode::DegenerateData, "tau needs n >= 2");
  Vector out(truth.mean.size());
  for (Eigen::Index v = 0; v < out.size(); ++v) {
    const double diff = truth.mean(v) - completion.mean(v);
    if (diff == 0.0) {
      out(v) = 0.0;
      continue;
    }
    const double pooled = (truth.sd(v) * truth.sd(v) + completion.sd(v) * completion.sd(v)) / 2.0;
    if (!(pooled > 0.0)) throw Error(ErrorCode::DegenerateVariance, "both standard deviations are zero");
    out(v) = diff / std::sqrt(pooled / n);
  }
  return out;
}

inline MeasureSummary tau_measure(std::span<const Vector> signed_replicates) {
  return detail::average_abs(signed_replicates);
}

// ---------------------------------------------------------------------------
// Propensity score distance

/// Cubic B-spline basis with interior knots at equally spaced quantiles.
class SplineBasis {
 public:
  static constexpr int kDegree = 3;

  SplineBasis() = default;
  SplineBasis(std::vector<double> values, int interior_knots) {
    std::sort(values.begin(), values.end());
    lo_ = values.front();
    hi_ = values.back();
    if (!(hi_ > lo_)) return;
    std::vector<double> interior;
    for (int q = 1; q <= interior_knots; ++q) {
      const double pos = static_cast<double>(q) / (interior_knots + 1) * static_cast<double>(values.size() - 1);
      const auto lo_idx = static_cast<std::size_t>(std::floor(pos));
      const std::size_t hi_idx = std::min(lo_idx + 1, values.size() - 1);
      const double frac = pos - static_cast<double>(lo_idx);
      const double knot = values[lo_idx] + frac * (values[hi_idx] - values[lo_idx]);
      if (knot > lo_ && knot < hi_ && (interior.empty() || knot > interior.back())) interior.push_back(knot);
    }
    knots_.assign(kDegree + 1, lo_);
    knots_.insert(knots_.end(), interior.begin(), interior.end());
    knots_.insert(knots_.end(), kDegree + 1, hi_);
  }

  /// Zero when the variable is constant.
  [[nodiscard]] int size() const { return knots_.empty() ? 0 : static_cast<int>(knots_.size()) - kDegree - 1; }

  /// Values of every basis function at x (clamped to the boundary knots).
  [[nodiscard]] std::vector<double> evaluate(double x) const {
    const int m = size();
    std::vector<double> out(static_cast<std::size_t>(m), 0.0);
    if (m == 0) return out;
    x = std::clamp(x, lo_, hi_);
    // Knot span: largest s with knots[s] <= x < knots[s+1], capped at the last non-empty span.
    int span = kDegree;
    while (span + 1 < m && knots_[static_cast<std::size_t>(span) + 1] <= x) ++span;
    // Cox-de Boor, triangular scheme.
    std::vector<double> n(kDegree + 1, 0.0), left(kDegree + 1), right(kDegree + 1);
    n[0] = 1.0;
    for (int d = 1; d <= kDegree; ++d) {
      left[static_cast<std::size_t>(d)] = x - knots_[static_cast<std::size_t>(span + 1 - d)];
      right[static_cast<std::size_t>(d)] = knots_[static_cast<std::size_t>(span + d)] - x;
      double saved = 0.0;
      for (int r = 0; r < d; ++r) {
        const double denom = right[static_cast<std::size_t>(r) + 1] + left[static_cast<std::size_t>(d - r)];
        const double temp = denom > 0.0 ? n[static_cast<std::size_t>(r)] / denom : 0.0;
        n[static_cast<std::size_t>(r)] = saved + right[static_cast<std::size_t>(r) + 1] * temp;
        saved = left[static_cast<std::size_t>(d - r)] * temp;
      }
      n[static_cast<std::size_t>(d)] = saved;
    }
    for (int r = 0; r <= kDegree; ++r) out[static_cast<std::size_t>(span - kDegree + r)] = n[static_cast<std::size_t>(r)];
    return out;
  }

 private:
  double lo_ = 0.0;
  double hi_ = 0.0;
  std::vector<double> knots_;
};

struct PropensityOptions {
  int interior_knots = 8;
  double ridge = 1e-6;
  int max_iterations = 50;
  double tolerance = 1e-8;
};

struct PropensityFit {
  Matrix design;            ///< 2n rows: intercept and spline columns
  std::vector<int> labels;  ///< 1 for the first dataset, 0 for the second
  Vector fitted;            ///< e-hat per row
  bool converged = false;
  int iterations = 0;
};

namespace detail {

inline Matrix additive_design(const Matrix& stacked, int interior_knots) {
  std::vector<SplineBasis> bases;
  Eigen::Index cols = 1;
  for (Eigen::Index j = 0; j < stacked.cols(); ++j) {
    std::vector<double> col(stacked.col(j).data(), stacked.col(j).data() + stacked.rows());
    bases.emplace_back(std::move(col), interior_knots);
    // First basis function dropped: the rest plus the intercept span the same space.
    cols += std::max(0, bases.back().size() - 1);
  }
  Matrix x(stacked.rows(), cols);
  x.col(0).setOnes();
  for (Eigen::Index i = 0; i < stacked.rows(); ++i) {
    Eigen::Index c = 1;
    for (Eigen::Index j = 0; j < stacked.cols(); ++j) {
      const auto& b = bases[static_cast<std::size_t>(j)];
      if (b.size() < 2) continue;
      const auto vals = b.evaluate(stacked(i, j));
      for (std::size_t r = 1; r < vals.size(); ++r) x(i, c++) = vals[r];
    }
  }
  return x;
}

inline double sigmoid(double eta) {
  return eta >= 0 ? 1.0 / (1.0 + std::exp(-eta)) : std::exp(eta) / (1.0 + std::exp(eta));
}

inline double log1p_exp(double eta) { return eta > 0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta)); }

inline double penalized_loglik(const Matrix& x, const Vector& t, const Vector& beta, double ridge) {
  const Vector eta = x * beta;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) ll += t(i) * eta(i) - log1p_exp(eta(i));
  return ll - 0.5 * ridge * beta.squaredNorm();
}

}  // namespace detail

/// Penalized IRLS fit of a logistic additive model; no shortcut for
/// identical inputs.
inline PropensityFit fit_logistic_additive(const Matrix& first, const Matrix& second,
                                           const PropensityOptions& opt = {}) {
  if (first.cols() != second.cols()) throw Error(ErrorCode::DimensionMismatch, "datasets have different variables");
  Matrix stacked(first.rows() + second.rows(), first.cols());
  stacked << first, second;
  PropensityFit fit;
  fit.design = detail::additive_design(stacked, opt.interior_knots);
  fit.labels.assign(static_cast<std::size_t>(stacked.rows()), 0);
  Vector t = Vector::Zero(stacked.rows());
  for (Eigen::Index i = 0; i < first.rows(); ++i) {
    fit.labels[static_cast<std::size_t>(i)] = 1;
    t(i) = 1.0;
  }
  const Matrix& x = fit.design;
  const Eigen::Index q = x.cols();
  Vector beta = Vector::Zero(q);
  double current = detail::penalized_loglik(x, t, beta, opt.ridge);
  for (int it = 0; it < opt.max_iterations; ++it) {
    fit.iterations = it + 1;
    const Vector eta = x * beta;
    Vector mu(eta.size()), w(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      mu(i) = detail::sigmoid(eta(i));
      w(i) = std::max(mu(i) * (1.0 - mu(i)), 1e-12);
    }
    Matrix hessian = x.transpose() * w.asDiagonal() * x;
    hessian.diagonal().array() += opt.ridge;
    const Vector grad = x.transpose() * (t - mu) - opt.ridge * beta;
    const Vector step = hessian.ldlt().solve(grad);
    double scale = 1.0;
    Vector candidate = beta + step;
    double next = detail::penalized_loglik(x, t, candidate, opt.ridge);
    for (int halving = 0; halving < 30 && !(next >= current); ++halving) {
      scale *= 0.5;
      candidate = beta + scale * step;
      next = detail::penalized_loglik(x, t, candidate, opt.ridge);
    }
    const double change = (candidate - beta).cwiseAbs().maxCoeff();
    if (!(next >= current)) break;
    beta = candidate;
    current = next;
    if (change < opt.tolerance) {
      fit.converged = true;
      break;
    }
  }
  const Vector eta = x * beta;
  fit.fitted.resize(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) fit.fitted(i) = detail::sigmoid(eta(i));
  return fit;
}

/// Propensity of membership in `truth` versus `completion`. Identical inputs
/// have their optimum at e-hat = 0.5 for every row, returned directly.
inline PropensityFit propensity_fit(const Matrix& truth, const Matrix& completion, const PropensityOptions& opt = {}) {
  if (truth.rows() == completion.rows() && truth.cols() == completion.cols() && truth == completion) {
    PropensityFit fit;
    fit.labels.assign(static_cast<std::size_t>(2 * truth.rows()), 0);
    std::fill_n(fit.labels.begin(), truth.rows(), 1);
    fit.fitted = Vector::Constant(2 * truth.rows(), 0.5);
    fit.converged = true;
    return fit;
  }
  return fit_logistic_additive(truth, completion, opt);
}

/// sum (e - 0.5)^2 / (2n); lies in [0, 0.25].
inline double rho_replicate(const Vector& fitted) {
  if (fitted.size() == 0) return 0.0;
  return (fitted.array() - 0.5).square().sum() / static_cast<double>(fitted.size());
}

inline double rho_measure(std::span<const double> replicates) {
  if (replicates.empty()) return 0.0;
  double s = 0.0;
  for (double r : replicates) s += r;
  return s / static_cast<double>(replicates.size());
}

// ---------------------------------------------------------------------------
// Cost

struct CostParams {
  double fixed = 0.0;     ///< C0
  double per_unit = 1.0;  ///< c, used when no table is given
  std::optional<std::map<Eigen::Index, double>> table;

  void validate() const {
    if (fixed < 0 || per_unit < 0) throw Error(ErrorCode::ValidationError, "costs must be non-negative");
    if (table) {
      for (const auto& [id, c] : *table)
        if (c < 0) throw Error(ErrorCode::ValidationError, "costs must be non-negative");
    }
  }
};

/// C0 plus the per-row cost of every sampled row id.
inline double cost_measure(const CostParams& params, std::span<const Eigen::Index> sampled_ids) {
  double total = params.fixed;
  for (Eigen::Index id : sampled_ids) {
    if (params.table) {
      auto it = params.table->find(id);
      if (it == params.table->end()) throw Error(ErrorCode::UnknownRowId, "no cost for row " + std::to_string(id));
      total += it->second;
    } else {
      total += params.per_unit;
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Scenario expectations

inline void validate_probabilities(std::span<const double> p_s) {
  double total = 0.0;
  for (double p : p_s) {
    if (!(p >= 0.0)) throw Error(ErrorCode::ProbNotNormalized, "scenario probabilities must be non-negative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error(ErrorCode::ProbNotNormalized, "scenario probabilities must sum to 1");
}

/// sum_s value_s p_s.
inline double expected_over_scenarios(std::span<const double> per_scenario, std::span<const double> p_s) {
  if (per_scenario.size() != p_s.size()) {
    throw Error(ErrorCode::DimensionMismatch, "one probability per scenario is required");
  }
  validate_probabilities(p_s);
  double e = 0.0;
  for (std::size_t s = 0; s < p_s.size(); ++s) {
    if (p_s[s] > 0.0) e += per_scenario[s] * p_s[s];
  }
  return e;
}

}  // namespace nrfu
