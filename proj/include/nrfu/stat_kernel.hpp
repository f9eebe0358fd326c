#pragma once

// Random sampling and dense linear-algebra primitives shared by the model,
// imputation and simulation code. Everything here is a pure function of its
// arguments plus an explicit random engine.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nrfu/error.hpp"

namespace nrfu {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Rng = std::mt19937_64;
/// true marks a missing cell.
using MaskMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

inline constexpr double kPivotTolerance = 1e-12;
inline constexpr double kSymmetryTolerance = 1e-10;

// ---------------------------------------------------------------------------
// Seeding

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// A master seed plus a path naming one replicate stream. Child seeds are a
/// hash of the whole path, so streams can be created in any order.
class SeedContext {
 public:
  explicit SeedContext(std::uint64_t master_seed) : master_seed_(master_seed) {}
  SeedContext(std::uint64_t master_seed, std::vector<std::uint64_t> path)
      : master_seed_(master_seed), path_(std::move(path)) {}

  [[nodiscard]] SeedContext child(std::uint64_t index) const {
    auto path = path_;
    path.push_back(index);
    return {master_seed_, std::move(path)};
  }

  [[nodiscard]] SeedContext child(std::initializer_list<std::uint64_t> indices) const {
    auto path = path_;
    path.insert(path.end(), indices.begin(), indices.end());
    return {master_seed_, std::move(path)};
  }

  [[nodiscard]] std::uint64_t derived_seed() const {
    std::uint64_t h = splitmix64(master_seed_);
    for (std::uint64_t e : path_) {
      h = splitmix64(h ^ splitmix64(e + 0x632be59bd9b4e019ULL));
    }
    return h;
  }

  [[nodiscard]] Rng make_rng() const { return Rng(derived_seed()); }

  [[nodiscard]] std::uint64_t master_seed() const { return master_seed_; }
  [[nodiscard]] const std::vector<std::uint64_t>& path() const { return path_; }

 private:
  std::uint64_t master_seed_;
  std::vector<std::uint64_t> path_;
};

// ---------------------------------------------------------------------------
// Linear algebra

/// Lower Cholesky factor. Any pivot at or below 1e-12 is reported as
/// NotPositiveDefinite.
inline Matrix cholesky(const Matrix& m) {
  if (m.rows() != m.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "cholesky of a non-square matrix");
  }
  const Eigen::Index p = m.rows();
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > kSymmetryTolerance * scale) {
    throw Error(ErrorCode::NotPositiveDefinite, "matrix is not symmetric");
  }
  Matrix l = Matrix::Zero(p, p);
  for (Eigen::Index j = 0; j < p; ++j) {
    double pivot = m(j, j);
    for (Eigen::Index k = 0; k < j; ++k) pivot -= l(j, k) * l(j, k);
    if (!(pivot > kPivotTolerance)) {
      throw Error(ErrorCode::NotPositiveDefinite,
                  "pivot " + std::to_string(pivot) + " at index " + std::to_string(j));
    }
    const double d = std::sqrt(pivot);
    l(j, j) = d;
    for (Eigen::Index i = j + 1; i < p; ++i) {
      double s = m(i, j);
      for (Eigen::Index k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / d;
    }
  }
  return l;
}

/// Symmetric positive-definite matrix together with its Cholesky factor.
class PdMatrix {
 public:
  PdMatrix() = default;
  explicit PdMatrix(Matrix m) : m_(std::move(m)), l_(cholesky(m_)) {
    m_ = 0.5 * (m_ + m_.transpose());
  }

  static PdMatrix identity(Eigen::Index p) { return PdMatrix(Matrix::Identity(p, p)); }
  static PdMatrix scaled_identity(Eigen::Index p, double s) {
    return PdMatrix(s * Matrix::Identity(p, p));
  }

  [[nodiscard]] Eigen::Index dim() const { return m_.rows(); }
  [[nodiscard]] const Matrix& matrix() const { return m_; }
  [[nodiscard]] const Matrix& lower() const { return l_; }

  [[nodiscard]] double log_det() const { return 2.0 * l_.diagonal().array().log().sum(); }

  [[nodiscard]] Matrix inverse() const {
    Matrix inv_l = l_.triangularView<Eigen::Lower>().solve(Matrix::Identity(dim(), dim()));
    return inv_l.transpose() * inv_l;
  }

  /// Mahalanobis form x' M^{-1} x.
  [[nodiscard]] double quad_form(const Vector& x) const {
    Vector w = l_.triangularView<Eigen::Lower>().solve(x);
    return w.squaredNorm();
  }

  friend bool operator==(const PdMatrix& a, const PdMatrix& b) { return a.m_ == b.m_; }

 private:
  Matrix m_;
  Matrix l_;
};

inline double mvn_logpdf(const Vector& y, const Vector& mu, const PdMatrix& sigma) {
  if (y.size() != mu.size() || y.size() != sigma.dim()) {
    throw Error(ErrorCode::DimensionMismatch, "mvn_logpdf dimensions disagree");
  }
  const auto p = static_cast<double>(y.size());
  return -0.5 * (p * std::log(2.0 * std::numbers::pi) + sigma.log_det() + sigma.quad_form(y - mu));
}

// ---------------------------------------------------------------------------
// Scalar distributions. Gamma is shape-rate throughout.

inline double standard_normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline double gamma_sample(Rng& rng, double shape, double rate) {
  return std::gamma_distribution<double>(shape, 1.0 / rate)(rng);
}

inline double beta_sample(Rng& rng, double a, double b) {
  const double x = gamma_sample(rng, a, 1.0);
  const double y = gamma_sample(rng, b, 1.0);
  const double s = x + y;
  if (s == 0.0) return a >= b ? 1.0 : 0.0;
  return x / s;
}

/// log of a Gamma(shape, 1) draw; small shapes use G(shape + 1) U^(1/shape)
/// so the result stays finite where the draw itself would underflow.
inline double log_gamma_sample(Rng& rng, double shape) {
  if (shape >= 1.0) return std::log(gamma_sample(rng, shape, 1.0));
  const double u = 1.0 - uniform01(rng);
  return std::log(gamma_sample(rng, shape + 1.0, 1.0)) + std::log(u) / shape;
}

/// (log x, log(1 - x)) for x ~ Beta(a, b).
inline std::pair<double, double> log_beta_sample(Rng& rng, double a, double b) {
  const double lx = log_gamma_sample(rng, a);
  const double ly = log_gamma_sample(rng, b);
  const double m = std::max(lx, ly);
  const double total = m + std::log(std::exp(lx - m) + std::exp(ly - m));
  return {lx - total, ly - total};
}

inline double chi_square_sample(Rng& rng, double dof) { return gamma_sample(rng, 0.5 * dof, 0.5); }

inline Vector standard_normal_vector(Rng& rng, Eigen::Index p) {
  Vector e(p);
  for (Eigen::Index i = 0; i < p; ++i) e(i) = standard_normal(rng);
  return e;
}

inline Vector mvn_sample(Rng& rng, const Vector& mu, const PdMatrix& sigma) {
  if (mu.size() != sigma.dim()) {
    throw Error(ErrorCode::DimensionMismatch, "mvn_sample dimensions disagree");
  }
  return mu + sigma.lower() * standard_normal_vector(rng, mu.size());
}

/// Inverse-Wishart(dof, scale) with E[X] = scale / (dof - p - 1).
/// Bartlett decomposition of Wishart(dof, scale^{-1}), then inverted.
inline PdMatrix inverse_wishart_sample(Rng& rng, double dof, const PdMatrix& scale) {
  const Eigen::Index p = scale.dim();
  if (!(dof > static_cast<double>(p) - 1.0)) {
    throw Error(ErrorCode::InvalidDof, "dof " + std::to_string(dof) + " <= p - 1");
  }
  Matrix a = Matrix::Zero(p, p);
  for (Eigen::Index i = 0; i < p; ++i) {
    a(i, i) = std::sqrt(chi_square_sample(rng, dof - static_cast<double>(i)));
    for (Eigen::Index j = 0; j < i; ++j) a(i, j) = standard_normal(rng);
  }
  // W = (C A)(C A)' with C = chol(scale^{-1}); X = W^{-1} = B' B, B = (C A)^{-1}.
  const Matrix c = cholesky(scale.inverse());
  const Matrix ca = c * a;
  const Matrix b = ca.triangularView<Eigen::Lower>().solve(Matrix::Identity(p, p));
  return PdMatrix(b.transpose() * b);
}

inline std::size_t categorical_sample(Rng& rng, std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0 || !std::isfinite(w)) {
      throw Error(ErrorCode::AllZeroWeights, "weights must be finite and non-negative");
    }
    total += w;
  }
  if (!(total > 0.0)) throw Error(ErrorCode::AllZeroWeights, "all weights are zero");
  const double u = uniform01(rng) * total;
  double cum = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (weights[k] <= 0.0) continue;
    cum += weights[k];
    last_positive = k;
    if (u < cum) return k;
  }
  return last_positive;
}

inline std::size_t categorical_sample(Rng& rng, const Vector& weights) {
  return categorical_sample(rng, std::span<const double>(weights.data(), static_cast<std::size_t>(weights.size())));
}

/// Distribution of the unobserved coordinates given the observed ones.
struct ConditionalNormal {
  std::vector<Eigen::Index> missing;
  Vector mean;
  Matrix covariance;
};

inline ConditionalNormal conditional_mvn(const Vector& mu, const PdMatrix& sigma,
                                         std::vector<Eigen::Index> observed,
                                         const Vector& observed_values) {
  const Eigen::Index p = mu.size();
  if (sigma.dim() != p || static_cast<Eigen::Index>(observed.size()) != observed_values.size()) {
    throw Error(ErrorCode::DimensionMismatch, "conditional_mvn dimensions disagree");
  }
  // Canonical order so the result does not depend on how the caller listed
  // the observed coordinates.
  std::vector<std::size_t> perm(observed.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) { return observed[a] < observed[b]; });
  std::vector<Eigen::Index> obs(observed.size());
  Vector y_o(static_cast<Eigen::Index>(observed.size()));
  for (std::size_t i = 0; i < perm.size(); ++i) {
    obs[i] = observed[perm[i]];
    y_o(static_cast<Eigen::Index>(i)) = observed_values(static_cast<Eigen::Index>(perm[i]));
    if (obs[i] < 0 || obs[i] >= p || (i > 0 && obs[i] == obs[i - 1])) {
      throw Error(ErrorCode::DimensionMismatch, "observed index out of range or repeated");
    }
  }

  ConditionalNormal out;
  for (Eigen::Index j = 0, o = 0; j < p; ++j) {
    if (o < static_cast<Eigen::Index>(obs.size()) && obs[static_cast<std::size_t>(o)] == j) {
      ++o;
    } else {
      out.missing.push_back(j);
    }
  }
  const Matrix& s = sigma.matrix();
  const auto n_m = static_cast<Eigen::Index>(out.missing.size());
  const auto n_o = static_cast<Eigen::Index>(obs.size());
  out.mean.resize(n_m);
  out.covariance.resize(n_m, n_m);
  for (Eigen::Index a = 0; a < n_m; ++a) {
    out.mean(a) = mu(out.missing[a]);
    for (Eigen::Index b = 0; b < n_m; ++b) out.covariance(a, b) = s(out.missing[a], out.missing[b]);
  }
  if (n_o == 0 || n_m == 0) return out;

  Matrix s_oo(n_o, n_o), s_mo(n_m, n_o);
  Vector mu_o(n_o);
  for (Eigen::Index a = 0; a < n_o; ++a) {
    mu_o(a) = mu(obs[a]);
    for (Eigen::Index b = 0; b < n_o; ++b) s_oo(a, b) = s(obs[a], obs[b]);
  }
  for (Eigen::Index a = 0; a < n_m; ++a)
    for (Eigen::Index b = 0; b < n_o; ++b) s_mo(a, b) = s(out.missing[a], obs[b]);

  const Matrix l = cholesky(s_oo);
  const auto tri = l.triangularView<Eigen::Lower>();
  // K = S_mo S_oo^{-1} computed through two triangular solves.
  const Matrix w = tri.solve(s_mo.transpose());          // L^{-1} S_om
  const Vector r = tri.solve(y_o - mu_o);                // L^{-1} (y_o - mu_o)
  out.mean += w.transpose() * r;
  out.covariance -= w.transpose() * w;
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose());
  return out;
}

}  // namespace nrfu
