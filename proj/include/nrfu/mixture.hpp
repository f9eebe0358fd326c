#pragma once

// Parameter types of the truncated stick-breaking mixture of multivariate
// normals, its joint log-posterior, MAP freezing and component ranking.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "nrfu/stat_kernel.hpp"

namespace nrfu {

enum class CovarianceMode { Full, Spherical };

struct HyperParams {
  std::size_t K = 30;
  double a_alpha = 0.25;
  double b_alpha = 0.25;
  double a_phi = 0.25;
  double b_phi = 0.25;
  double h = 1.0;
  double f = 0.0;  ///< prior degrees of freedom; 0 means "use p + 1"
  Vector mu0;      ///< empty means the zero vector
  CovarianceMode mode = CovarianceMode::Full;
  /// Common diagonal variance of every component in Spherical mode.
  double spherical_variance = 0.3;
  /// When set, Phi = diag(fixed_phi) and the phi update is skipped.
  std::optional<Vector> fixed_phi;

  /// Fills the p-dependent defaults (f = p + 1, mu0 = 0) and validates.
  [[nodiscard]] HyperParams resolved(Eigen::Index p) const {
    HyperParams out = *this;
    if (out.f == 0.0) out.f = static_cast<double>(p) + 1.0;
    if (out.mu0.size() == 0) out.mu0 = Vector::Zero(p);
    out.validate(p);
    return out;
  }

  void validate(Eigen::Index p) const {
    auto bad = [](const std::string& what) { throw Error(ErrorCode::InvalidConfig, what); };
    if (K < 1) bad("K must be at least 1");
    if (!(a_alpha > 0 && b_alpha > 0 && a_phi > 0 && b_phi > 0 && h > 0)) {
      bad("gamma hyperparameters and h must be positive");
    }
    if (mu0.size() != p) bad("mu0 has the wrong dimension");
    if (mode == CovarianceMode::Full && f < static_cast<double>(p) + 1.0) bad("f must be >= p + 1");
    if (mode == CovarianceMode::Spherical && !(spherical_variance > 0)) bad("sigma must be positive");
    if (fixed_phi && (fixed_phi->size() != p || (fixed_phi->array() <= 0).any())) {
      bad("fixed_phi must be a positive p-vector");
    }
  }

  [[nodiscard]] bool spherical() const { return mode == CovarianceMode::Spherical; }
};

struct MixtureState {
  std::vector<int> z;   ///< 0-based component index per modeled row
  Vector v;             ///< stick fractions, v(K-1) == 1
  Vector pi;
  double alpha = 1.0;
  Vector phi;           ///< empty in Spherical mode
  Matrix mu;            ///< K x p
  std::vector<PdMatrix> sigma;
  double log_posterior = -std::numeric_limits<double>::infinity();

  [[nodiscard]] std::size_t K() const { return static_cast<std::size_t>(pi.size()); }
};

/// pi_k = v_k prod_{g<k} (1 - v_g); the last entry absorbs the residual so the
/// vector sums to one.
inline Vector stick_break(const Vector& v) {
  const Eigen::Index K = v.size();
  if (K == 0 || v(K - 1) != 1.0) {
    throw Error(ErrorCode::LastStickNotOne, "the final stick fraction must equal 1");
  }
  Vector pi(K);
  double remaining = 1.0;
  double used = 0.0;
  for (Eigen::Index k = 0; k + 1 < K; ++k) {
    pi(k) = v(k) * remaining;
    used += pi(k);
    remaining *= 1.0 - v(k);
  }
  pi(K - 1) = std::max(0.0, 1.0 - used);
  return pi;
}

inline std::vector<std::size_t> component_counts(std::span<const int> z, std::size_t K) {
  std::vector<std::size_t> counts(K, 0);
  for (int k : z) ++counts[static_cast<std::size_t>(k)];
  return counts;
}

// ---------------------------------------------------------------------------
// Log densities used by the joint posterior

namespace detail {

inline constexpr double kMinStickRemainder = 1e-300;

inline double log_gamma_density(double x, double shape, double rate) {
  return shape * std::log(rate) - std::lgamma(shape) + (shape - 1.0) * std::log(x) - rate * x;
}

inline double log_multigamma(double a, Eigen::Index p) {
  double out = 0.25 * static_cast<double>(p * (p - 1)) * std::log(std::numbers::pi);
  for (Eigen::Index j = 0; j < p; ++j) out += std::lgamma(a - 0.5 * static_cast<double>(j));
  return out;
}

/// log InverseWishart(x | dof, scale), E[x] = scale / (dof - p - 1).
inline double log_inverse_wishart_density(const PdMatrix& x, double dof, const PdMatrix& scale) {
  const Eigen::Index p = x.dim();
  const auto pd = static_cast<double>(p);
  const double trace = (scale.matrix() * x.inverse()).trace();
  return 0.5 * dof * scale.log_det() - 0.5 * dof * pd * std::log(2.0) - log_multigamma(0.5 * dof, p) -
         0.5 * (dof + pd + 1.0) * x.log_det() - 0.5 * trace;
}

}  // namespace detail

struct PosteriorTerms {
  double log_likelihood = 0.0;  ///< sum_i log N(y_i | mu_{z_i}, Sigma_{z_i})
  double log_assignment = 0.0;  ///< sum_i log pi_{z_i}
  double log_prior = 0.0;       ///< v, alpha, mu, Sigma, phi

  [[nodiscard]] double total() const { return log_likelihood + log_assignment + log_prior; }
};

inline double log_prior_density(const MixtureState& state, const HyperParams& hp) {
  const std::size_t K = state.K();
  const Eigen::Index p = state.mu.cols();
  double lp = 0.0;

  for (std::size_t k = 0; k + 1 < K; ++k) {
    const double rest = std::max(1.0 - state.v(static_cast<Eigen::Index>(k)), detail::kMinStickRemainder);
    lp += std::log(state.alpha) + (state.alpha - 1.0) * std::log(rest);
  }
  lp += detail::log_gamma_density(state.alpha, hp.a_alpha, hp.b_alpha);

  if (hp.spherical()) {
    const PdMatrix prior_cov = PdMatrix::scaled_identity(p, hp.spherical_variance / hp.h);
    for (std::size_t k = 0; k < K; ++k) lp += mvn_logpdf(state.mu.row(static_cast<Eigen::Index>(k)).transpose(), hp.mu0, prior_cov);
    return lp;
  }

  const Vector phi = hp.fixed_phi ? *hp.fixed_phi : state.phi;
  const PdMatrix big_phi(Matrix(phi.asDiagonal()));
  for (std::size_t k = 0; k < K; ++k) {
    const PdMatrix& s = state.sigma[k];
    const PdMatrix mu_cov(s.matrix() / hp.h);
    lp += mvn_logpdf(state.mu.row(static_cast<Eigen::Index>(k)).transpose(), hp.mu0, mu_cov);
    lp += detail::log_inverse_wishart_density(s, hp.f, big_phi);
  }
  if (!hp.fixed_phi) {
    for (Eigen::Index j = 0; j < p; ++j) lp += detail::log_gamma_density(phi(j), hp.a_phi, hp.b_phi);
  }
  return lp;
}

/// Joint log-posterior of the state given completed rows, split into the
/// likelihood, assignment and prior parts. Normalizing constants of every
/// closed-form density are included.
inline PosteriorTerms posterior_terms(const MixtureState& state, const Matrix& rows, const HyperParams& hp) {
  const std::size_t K = state.K();
  const Eigen::Index p = rows.cols();
  if (state.z.size() != static_cast<std::size_t>(rows.rows()) || state.mu.rows() != static_cast<Eigen::Index>(K) ||
      state.mu.cols() != p || state.sigma.size() != K || state.v.size() != static_cast<Eigen::Index>(K) ||
      hp.mu0.size() != p) {
    throw Error(ErrorCode::DimensionMismatch, "state, data and hyperparameters disagree");
  }
  PosteriorTerms terms;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    const auto k = static_cast<std::size_t>(state.z[static_cast<std::size_t>(i)]);
    terms.log_likelihood +=
        mvn_logpdf(rows.row(i).transpose(), state.mu.row(static_cast<Eigen::Index>(k)).transpose(), state.sigma[k]);
    terms.log_assignment += std::log(state.pi(static_cast<Eigen::Index>(k)));
  }
  terms.log_prior = log_prior_density(state, hp);
  return terms;
}

inline double log_joint_posterior(const MixtureState& state, const Matrix& rows, const HyperParams& hp) {
  return posterior_terms(state, rows, hp).total();
}

// ---------------------------------------------------------------------------
// MAP freezing and component ranking

struct ComponentRanking {
  Vector y_min;
  Vector delta;
  /// Component indices (0-based) sorted by ascending delta; position 0 is the
  /// "bottom" component.
  std::vector<std::size_t> rank_order;
};

/// Per-variable minimum over observed cells.
inline Vector observed_minimum(const Matrix& rows, const MaskMatrix& missing) {
  const Eigen::Index p = rows.cols();
  Vector y_min(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    double m = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < rows.rows(); ++i) {
      if (missing.size() == 0 || !missing(i, j)) m = std::min(m, rows(i, j));
    }
    if (!std::isfinite(m)) {
      throw Error(ErrorCode::NoObservedValues, "variable " + std::to_string(j) + " has no observed values");
    }
    y_min(j) = m;
  }
  return y_min;
}

inline ComponentRanking rank_components(const Matrix& mu, const Vector& y_min) {
  ComponentRanking out;
  out.y_min = y_min;
  out.delta.resize(mu.rows());
  for (Eigen::Index k = 0; k < mu.rows(); ++k) out.delta(k) = (mu.row(k).transpose() - y_min).squaredNorm();
  out.rank_order.resize(static_cast<std::size_t>(mu.rows()));
  std::iota(out.rank_order.begin(), out.rank_order.end(), std::size_t{0});
  std::stable_sort(out.rank_order.begin(), out.rank_order.end(), [&](std::size_t a, std::size_t b) {
    return out.delta(static_cast<Eigen::Index>(a)) < out.delta(static_cast<Eigen::Index>(b));
  });
  return out;
}

inline ComponentRanking rank_components(const Matrix& mu, const Matrix& rows, const MaskMatrix& missing) {
  return rank_components(mu, observed_minimum(rows, missing));
}

struct MapEstimate {
  Matrix mu;                    ///< K x p
  std::vector<PdMatrix> sigma;
  Vector pi;
  std::vector<bool> occupied;
  Vector delta;
  std::vector<std::size_t> rank_order;
  Vector y_min;
  std::size_t iteration = 0;    ///< index into the chain that was frozen
  double log_posterior = 0.0;

  [[nodiscard]] std::size_t K() const { return static_cast<std::size_t>(pi.size()); }
  [[nodiscard]] Eigen::Index dim() const { return mu.cols(); }

  /// Occupied components ordered bottom (smallest delta) to top.
  [[nodiscard]] std::vector<std::size_t> occupied_by_rank() const {
    std::vector<std::size_t> out;
    for (std::size_t k : rank_order)
      if (occupied[k]) out.push_back(k);
    return out;
  }
};

/// Freezes the parameters of the highest log-posterior state; the earliest
/// state wins ties.
inline MapEstimate freeze_map(std::span<const MixtureState> chain, const Matrix& rows, const MaskMatrix& missing) {
  if (chain.empty()) throw Error(ErrorCode::EmptyChain, "no states to freeze");
  std::size_t best = 0;
  for (std::size_t i = 1; i < chain.size(); ++i) {
    if (chain[i].log_posterior > chain[best].log_posterior) best = i;
  }
  const MixtureState& s = chain[best];
  MapEstimate map;
  map.mu = s.mu;
  map.sigma = s.sigma;
  map.pi = s.pi;
  map.iteration = best;
  map.log_posterior = s.log_posterior;
  const auto counts = component_counts(s.z, s.K());
  map.occupied.resize(s.K());
  for (std::size_t k = 0; k < s.K(); ++k) map.occupied[k] = counts[k] > 0;
  auto ranking = rank_components(map.mu, rows, missing);
  map.delta = std::move(ranking.delta);
  map.rank_order = std::move(ranking.rank_order);
  map.y_min = std::move(ranking.y_min);
  return map;
}

// ---------------------------------------------------------------------------
// Display geometry

/// 0.95 quantile of the chi-square distribution with 2 degrees of freedom.
inline const double kChiSquare2Q95 = -2.0 * std::log(0.05);

struct Ellipse {
  double center_x = 0.0;
  double center_y = 0.0;
  double major = 0.0;     ///< semi-axis length
  double minor = 0.0;
  double rotation = 0.0;  ///< angle of the major axis, radians in (-pi/2, pi/2]
};

inline Ellipse ellipse_95(const Vector& mu, const PdMatrix& sigma, Eigen::Index i, Eigen::Index j) {
  if (i == j || i < 0 || j < 0 || i >= mu.size() || j >= mu.size()) {
    throw Error(ErrorCode::DimensionMismatch, "ellipse needs two distinct variables");
  }
  Matrix block(2, 2);
  block << sigma.matrix()(i, i), sigma.matrix()(i, j), sigma.matrix()(j, i), sigma.matrix()(j, j);
  (void)cholesky(block);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(block);
  const Vector vals = eig.eigenvalues();  // ascending
  const Vector major_dir = eig.eigenvectors().col(1);
  Ellipse e;
  e.center_x = mu(i);
  e.center_y = mu(j);
  e.major = std::sqrt(kChiSquare2Q95 * vals(1));
  e.minor = std::sqrt(kChiSquare2Q95 * vals(0));
  double angle = std::atan2(major_dir(1), major_dir(0));
  if (angle <= -std::numbers::pi / 2) angle += std::numbers::pi;
  if (angle > std::numbers::pi / 2) angle -= std::numbers::pi;
  e.rotation = angle;
  return e;
}

}  // namespace nrfu
