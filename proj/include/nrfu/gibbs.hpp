#pragma once

// Blocked Gibbs sampler for the truncated stick-breaking mixture, in either
// full (Normal-Inverse-Wishart with hyperprior on Phi) or fixed spherical
// covariance mode. Item-missing cells are redrawn from their conditional
// normal at the end of every sweep.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "nrfu/mixture.hpp"

namespace nrfu {

struct ComponentStats {
  std::vector<std::size_t> N;
  Matrix ybar;              ///< K x p; row k is meaningless when N[k] == 0
  std::vector<Matrix> S;    ///< scatter about ybar; zero when N[k] < 2

  [[nodiscard]] std::size_t K() const { return N.size(); }
  [[nodiscard]] bool empty(std::size_t k) const { return N[k] == 0; }
};

inline ComponentStats compute_component_stats(const Matrix& rows, std::span<const int> z, std::size_t K) {
  if (static_cast<Eigen::Index>(z.size()) != rows.rows()) {
    throw Error(ErrorCode::DimensionMismatch, "one assignment per row is required");
  }
  const Eigen::Index p = rows.cols();
  ComponentStats st;
  st.N.assign(K, 0);
  st.ybar = Matrix::Zero(static_cast<Eigen::Index>(K), p);
  st.S.assign(K, Matrix::Zero(p, p));
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    const int k = z[static_cast<std::size_t>(i)];
    if (k < 0 || static_cast<std::size_t>(k) >= K) {
      throw Error(ErrorCode::DimensionMismatch, "assignment out of range");
    }
    ++st.N[static_cast<std::size_t>(k)];
    st.ybar.row(k) += rows.row(i);
  }
  for (std::size_t k = 0; k < K; ++k) {
    if (st.N[k] > 0) st.ybar.row(static_cast<Eigen::Index>(k)) /= static_cast<double>(st.N[k]);
  }
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    const auto k = static_cast<std::size_t>(z[static_cast<std::size_t>(i)]);
    const Vector d = rows.row(i) - st.ybar.row(static_cast<Eigen::Index>(k));
    st.S[k] += d * d.transpose();
  }
  return st;
}

/// Normal-Inverse-Wishart posterior hyperparameters of one component.
struct NiwPosterior {
  double f_k = 0.0;
  Matrix phi_k;
  Vector mu_bar;
  double shrink = 0.0;  ///< h + N_k
};

inline NiwPosterior posterior_niw_params(std::size_t n_k, const Vector& ybar_k, const Matrix& s_k,
                                         const Matrix& phi, const HyperParams& hp) {
  NiwPosterior post;
  const auto n = static_cast<double>(n_k);
  post.f_k = hp.f + n;
  post.shrink = hp.h + n;
  if (n_k == 0) {
    post.phi_k = phi;
    post.mu_bar = hp.mu0;
    return post;
  }
  const Vector d = ybar_k - hp.mu0;
  post.phi_k = phi + s_k + (d * d.transpose()) / (1.0 / hp.h + 1.0 / n);
  post.mu_bar = (hp.h * hp.mu0 + n * ybar_k) / (hp.h + n);
  return post;
}

inline Matrix phi_matrix(const Vector& phi) { return Matrix(phi.asDiagonal()); }

/// Redraws every (mu_k, Sigma_k) from its full conditional.
inline void update_component_params(Rng& rng, const ComponentStats& stats, const HyperParams& hp, const Vector& phi,
                                    Matrix& mu, std::vector<PdMatrix>& sigma) {
  const std::size_t K = stats.K();
  const Eigen::Index p = hp.mu0.size();
  mu.resize(static_cast<Eigen::Index>(K), p);
  sigma.resize(K);
  if (hp.spherical()) {
    for (std::size_t k = 0; k < K; ++k) {
      const auto n = static_cast<double>(stats.N[k]);
      const Vector mu_bar =
          stats.N[k] == 0 ? hp.mu0
                          : Vector((hp.h * hp.mu0 + n * stats.ybar.row(static_cast<Eigen::Index>(k)).transpose()) / (hp.h + n));
      const double sd = std::sqrt(hp.spherical_variance / (hp.h + n));
      mu.row(static_cast<Eigen::Index>(k)) = (mu_bar + sd * standard_normal_vector(rng, p)).transpose();
      if (sigma[k].dim() != p) sigma[k] = PdMatrix::scaled_identity(p, hp.spherical_variance);
    }
    return;
  }
  const Matrix big_phi = phi_matrix(phi);
  for (std::size_t k = 0; k < K; ++k) {
    const auto post = posterior_niw_params(stats.N[k], stats.ybar.row(static_cast<Eigen::Index>(k)).transpose(),
                                           stats.S[k], big_phi, hp);
    sigma[k] = inverse_wishart_sample(rng, post.f_k, PdMatrix(post.phi_k));
    const PdMatrix mu_cov(sigma[k].matrix() / post.shrink);
    mu.row(static_cast<Eigen::Index>(k)) = mvn_sample(rng, post.mu_bar, mu_cov).transpose();
  }
}

/// Sticks: v_k ~ Beta(1 + N_k, alpha + sum_{g>k} N_g), v_K = 1.
struct StickDraw {
  Vector v;
  Vector pi;
  double log_pi_K = 0.0;  ///< sum of log(1 - v_k), kept in log space
};

inline StickDraw update_sticks(Rng& rng, std::span<const std::size_t> counts, double alpha) {
  const std::size_t K = counts.size();
  StickDraw out;
  out.v.resize(static_cast<Eigen::Index>(K));
  std::size_t tail = 0;
  for (std::size_t k = 0; k < K; ++k) tail += counts[k];
  for (std::size_t k = 0; k + 1 < K; ++k) {
    tail -= counts[k];
    const auto [log_v, log_rest] =
        log_beta_sample(rng, 1.0 + static_cast<double>(counts[k]), alpha + static_cast<double>(tail));
    out.v(static_cast<Eigen::Index>(k)) = std::exp(log_v);
    out.log_pi_K += log_rest;
  }
  out.v(static_cast<Eigen::Index>(K) - 1) = 1.0;
  out.pi = stick_break(out.v);
  return out;
}

/// Shape and rate of the phi_j full conditional.
inline std::pair<double, double> phi_conditional(const std::vector<PdMatrix>& sigma, const HyperParams& hp,
                                                 Eigen::Index j) {
  const auto K = static_cast<double>(sigma.size());
  const auto p = static_cast<double>(hp.mu0.size());
  double diag_sum = 0.0;
  for (const auto& s : sigma) diag_sum += s.inverse()(j, j);
  return {hp.a_phi + K * (p + 1.0) / 2.0, hp.b_phi + 0.5 * diag_sum};
}

/// phi update (Full mode only).
inline Vector update_phi(Rng& rng, const std::vector<PdMatrix>& sigma, const HyperParams& hp) {
  if (hp.spherical()) throw Error(ErrorCode::ModeMismatch, "phi is not sampled in Spherical mode");
  const Eigen::Index p = hp.mu0.size();
  Vector phi(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    const auto [shape, rate] = phi_conditional(sigma, hp, j);
    phi(j) = gamma_sample(rng, shape, rate);
  }
  return phi;
}

inline constexpr double kMinPiK = 1e-300;

/// Shape and rate of the alpha full conditional given log pi_K.
inline std::pair<double, double> alpha_conditional(double log_pi_K, std::size_t K, const HyperParams& hp) {
  if (!(log_pi_K <= 0.0)) throw Error(ErrorCode::DegeneratePiK, "pi_K is not a probability");
  return {hp.a_alpha + static_cast<double>(K) - 1.0, hp.b_alpha - log_pi_K};
}

/// Same from the weights; pi_K is clamped at 1e-300 since it may have
/// underflowed.
inline std::pair<double, double> alpha_conditional(const Vector& pi, const HyperParams& hp) {
  const double pi_k = pi(pi.size() - 1);
  if (!(pi_k >= 0.0) || !std::isfinite(pi_k)) {
    throw Error(ErrorCode::DegeneratePiK, "pi_K is not a probability");
  }
  return alpha_conditional(std::log(std::max(pi_k, kMinPiK)), static_cast<std::size_t>(pi.size()), hp);
}

/// alpha update.
inline double update_alpha(Rng& rng, double log_pi_K, std::size_t K, const HyperParams& hp) {
  const auto [shape, rate] = alpha_conditional(log_pi_K, K, hp);
  return gamma_sample(rng, shape, rate);
}

inline double update_alpha(Rng& rng, const Vector& pi, const HyperParams& hp) {
  const auto [shape, rate] = alpha_conditional(pi, hp);
  return gamma_sample(rng, shape, rate);
}

namespace detail {

/// Per-component quantities for repeated density evaluation within a sweep.
struct NormalKernel {
  Vector mu;
  Matrix lower;
  double log_norm = 0.0;

  NormalKernel(const Vector& m, const PdMatrix& s) : mu(m), lower(s.lower()) {
    log_norm = -0.5 * (static_cast<double>(m.size()) * std::log(2.0 * std::numbers::pi) + s.log_det());
  }

  [[nodiscard]] double log_pdf(const Vector& y) const {
    const Vector w = lower.triangularView<Eigen::Lower>().solve(y - mu);
    return log_norm - 0.5 * w.squaredNorm();
  }
};

inline constexpr double kRelativeLogFloor = -700.0;

}  // namespace detail

/// Assignments: z_i drawn from pi_k N(y_i | mu_k, Sigma_k), normalized in log space.
inline std::vector<int> update_assignments(Rng& rng, const Matrix& rows, const Vector& pi, const Matrix& mu,
                                           const std::vector<PdMatrix>& sigma) {
  const auto K = static_cast<std::size_t>(pi.size());
  std::vector<detail::NormalKernel> kernels;
  std::vector<double> log_pi(K);
  kernels.reserve(K);
  for (std::size_t k = 0; k < K; ++k) {
    kernels.emplace_back(mu.row(static_cast<Eigen::Index>(k)).transpose(), sigma[k]);
    log_pi[k] = pi(static_cast<Eigen::Index>(k)) > 0.0 ? std::log(pi(static_cast<Eigen::Index>(k)))
                                                        : -std::numeric_limits<double>::infinity();
  }
  std::vector<int> z(static_cast<std::size_t>(rows.rows()));
  std::vector<double> lw(K), w(K);
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    const Vector y = rows.row(i).transpose();
    double max_lw = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      lw[k] = std::isfinite(log_pi[k]) ? log_pi[k] + kernels[k].log_pdf(y) : log_pi[k];
      max_lw = std::max(max_lw, lw[k]);
    }
    if (!std::isfinite(max_lw)) {
      throw Error(ErrorCode::AllZeroWeights, "row " + std::to_string(i) + " has zero weight under every component");
    }
    for (std::size_t k = 0; k < K; ++k) {
      const double rel = lw[k] - max_lw;
      w[k] = rel < detail::kRelativeLogFloor ? 0.0 : std::exp(rel);
    }
    z[static_cast<std::size_t>(i)] = static_cast<int>(categorical_sample(rng, std::span<const double>(w)));
  }
  return z;
}

/// Redraws the missing cells of one row from N(mu_k, Sigma_k) conditioned on
/// the observed cells. Rows without missing cells come back unchanged.
inline Vector impute_item_missing(Rng& rng, const Vector& row, const Eigen::Matrix<bool, Eigen::Dynamic, 1>& missing,
                                  const Vector& mu_k, const PdMatrix& sigma_k) {
  if (!missing.any()) return row;
  std::vector<Eigen::Index> observed;
  for (Eigen::Index j = 0; j < row.size(); ++j)
    if (!missing(j)) observed.push_back(j);
  Vector values(static_cast<Eigen::Index>(observed.size()));
  for (std::size_t a = 0; a < observed.size(); ++a) values(static_cast<Eigen::Index>(a)) = row(observed[a]);
  const auto cond = conditional_mvn(mu_k, sigma_k, observed, values);
  const Vector draw = mvn_sample(rng, cond.mean, PdMatrix(cond.covariance));
  Vector out = row;
  for (std::size_t a = 0; a < cond.missing.size(); ++a) out(cond.missing[a]) = draw(static_cast<Eigen::Index>(a));
  return out;
}

// ---------------------------------------------------------------------------
// Sampler

enum class SaturationAction { Warn, Abort };
/// Uniform: z uniform over 1..K. Single: every row starts in component 1.
enum class InitMode { Uniform, Single };

struct ChainConfig {
  std::size_t iterations = 5000;
  std::size_t burn_in = 1000;
  std::size_t thin = 2;
  SaturationAction saturation_action = SaturationAction::Warn;
  InitMode init_mode = InitMode::Uniform;

  void validate() const {
    if (burn_in >= iterations) throw Error(ErrorCode::InvalidConfig, "burn_in must be < iterations");
    if (thin < 1) throw Error(ErrorCode::InvalidConfig, "thin must be >= 1");
  }
  [[nodiscard]] std::size_t kept() const { return (iterations - burn_in + thin - 1) / thin; }
};

class GibbsSampler {
 public:
  GibbsSampler(Matrix rows, MaskMatrix missing, const HyperParams& hp)
      : rows_(std::move(rows)), missing_(std::move(missing)), hp_(hp.resolved(rows_.cols())) {
    if (rows_.rows() == 0) throw Error(ErrorCode::DegenerateData, "no rows to model");
    if (missing_.size() == 0) missing_ = MaskMatrix::Constant(rows_.rows(), rows_.cols(), false);
    if (missing_.rows() != rows_.rows() || missing_.cols() != rows_.cols()) {
      throw Error(ErrorCode::DimensionMismatch, "mask and rows disagree");
    }
    for (Eigen::Index i = 0; i < rows_.rows(); ++i) {
      if (missing_.row(i).all()) {
        throw Error(ErrorCode::ValidationError, "row " + std::to_string(i) + " has no observed values");
      }
      if (missing_.row(i).any()) incomplete_rows_.push_back(i);
    }
    // Start missing cells at the observed column mean.
    for (Eigen::Index j = 0; j < rows_.cols(); ++j) {
      double sum = 0.0;
      Eigen::Index count = 0;
      for (Eigen::Index i = 0; i < rows_.rows(); ++i)
        if (!missing_(i, j)) sum += rows_(i, j), ++count;
      const double mean = count > 0 ? sum / static_cast<double>(count) : 0.0;
      for (Eigen::Index i = 0; i < rows_.rows(); ++i)
        if (missing_(i, j)) rows_(i, j) = mean;
    }
  }

  /// Dispersed start: uniform z, mu at mu0 plus jitter, alpha and phi at
  /// their prior means.
  void initialize(Rng& rng, InitMode mode = InitMode::Uniform) {
    const std::size_t K = hp_.K;
    const Eigen::Index p = rows_.cols();
    std::uniform_int_distribution<int> pick(0, static_cast<int>(K) - 1);
    state_.z.resize(static_cast<std::size_t>(rows_.rows()));
    for (auto& zi : state_.z) zi = mode == InitMode::Uniform ? pick(rng) : 0;
    state_.alpha = hp_.a_alpha / hp_.b_alpha;
    state_.mu.resize(static_cast<Eigen::Index>(K), p);
    for (std::size_t k = 0; k < K; ++k) {
      state_.mu.row(static_cast<Eigen::Index>(k)) = (hp_.mu0 + 0.1 * standard_normal_vector(rng, p)).transpose();
    }
    if (hp_.spherical()) {
      state_.phi.resize(0);
      state_.sigma.assign(K, PdMatrix::scaled_identity(p, hp_.spherical_variance));
    } else {
      state_.phi = hp_.fixed_phi ? *hp_.fixed_phi : Vector::Constant(p, hp_.a_phi / hp_.b_phi);
      state_.sigma.assign(K, PdMatrix::identity(p));
    }
    auto counts = component_counts(state_.z, K);
    auto sticks = update_sticks(rng, counts, state_.alpha);
    state_.v = std::move(sticks.v);
    state_.pi = std::move(sticks.pi);
    state_.log_posterior = log_joint_posterior(state_, rows_, hp_);
  }

  /// One full sweep: component parameters, sticks, phi, alpha, assignments,
  /// then item-missing imputation.
  void sweep(Rng& rng) {
    const std::size_t K = hp_.K;
    const ComponentStats stats = compute_component_stats(rows_, state_.z, K);
    update_component_params(rng, stats, hp_, state_.phi, state_.mu, state_.sigma);
    auto sticks = update_sticks(rng, stats.N, state_.alpha);
    state_.v = std::move(sticks.v);
    state_.pi = std::move(sticks.pi);
    if (!hp_.spherical() && !hp_.fixed_phi) state_.phi = update_phi(rng, state_.sigma, hp_);
    state_.alpha = update_alpha(rng, sticks.log_pi_K, K, hp_);
    state_.z = update_assignments(rng, rows_, state_.pi, state_.mu, state_.sigma);
    for (Eigen::Index i : incomplete_rows_) {
      const auto k = static_cast<std::size_t>(state_.z[static_cast<std::size_t>(i)]);
      rows_.row(i) = impute_item_missing(rng, rows_.row(i).transpose(), missing_.row(i).transpose(),
                                         state_.mu.row(static_cast<Eigen::Index>(k)).transpose(), state_.sigma[k])
                         .transpose();
    }
    const auto terms = posterior_terms(state_, rows_, hp_);
    state_.log_posterior = terms.total();
    last_log_likelihood_ = terms.log_likelihood;
  }

  [[nodiscard]] std::size_t occupied_count() const {
    const auto counts = component_counts(state_.z, hp_.K);
    return static_cast<std::size_t>(std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; }));
  }

  [[nodiscard]] const MixtureState& state() const { return state_; }
  MixtureState& mutable_state() { return state_; }
  [[nodiscard]] const Matrix& rows() const { return rows_; }
  [[nodiscard]] const MaskMatrix& missing() const { return missing_; }
  [[nodiscard]] const HyperParams& hyper_params() const { return hp_; }
  [[nodiscard]] double last_log_likelihood() const { return last_log_likelihood_; }

  /// Replaces the modeled rows (same shape, fully observed); used when the
  /// data are resimulated between sweeps.
  void set_rows(Matrix rows) {
    if (rows.rows() != rows_.rows() || rows.cols() != rows_.cols()) {
      throw Error(ErrorCode::DimensionMismatch, "replacement rows have a different shape");
    }
    rows_ = std::move(rows);
  }

 private:
  Matrix rows_;
  MaskMatrix missing_;
  HyperParams hp_;
  std::vector<Eigen::Index> incomplete_rows_;
  MixtureState state_;
  double last_log_likelihood_ = 0.0;
};

struct ChainDiagnostics {
  std::vector<double> alpha_trace;
  std::vector<std::size_t> occupied_trace;
  std::vector<double> log_likelihood_trace;
  std::vector<double> log_posterior_trace;
  bool saturated = false;
  std::size_t first_saturation_sweep = 0;
};

struct ChainResult {
  std::vector<MixtureState> kept;
  MapEstimate map;
  ChainDiagnostics diagnostics;
  Matrix completed_rows;  ///< rows after the final sweep
  HyperParams hp;         ///< resolved hyperparameters actually used
};

using ProgressFn = std::function<void(std::size_t done, std::size_t total)>;

inline ChainResult run_chain(Rng& rng, const Matrix& rows, const MaskMatrix& missing, const HyperParams& hp,
                             const ChainConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  if (rows.rows() == 0) throw Error(ErrorCode::DegenerateData, "no rows to model");
  GibbsSampler sampler(rows, missing, hp);
  sampler.initialize(rng, cfg.init_mode);

  ChainResult result;
  result.hp = sampler.hyper_params();
  auto& diag = result.diagnostics;
  diag.alpha_trace.reserve(cfg.iterations);
  MixtureState best;
  std::size_t best_sweep = 0;
  bool have_best = false;

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    sampler.sweep(rng);
    const MixtureState& s = sampler.state();
    const std::size_t occupied = sampler.occupied_count();
    diag.alpha_trace.push_back(s.alpha);
    diag.occupied_trace.push_back(occupied);
    diag.log_likelihood_trace.push_back(sampler.last_log_likelihood());
    diag.log_posterior_trace.push_back(s.log_posterior);
    // A dispersed start occupies every component for a few sweeps, so the
    // rule is applied to the chain after burn-in.
    if (it >= cfg.burn_in && occupied >= hp.K && !diag.saturated) {
      diag.saturated = true;
      diag.first_saturation_sweep = it;
      if (cfg.saturation_action == SaturationAction::Abort) {
        throw Error(ErrorCode::SaturationAbort,
                    "all " + std::to_string(hp.K) + " components occupied at sweep " + std::to_string(it) +
                        "; refit with a larger K");
      }
    }
    if (it >= cfg.burn_in) {
      if (!have_best || s.log_posterior > best.log_posterior) {
        best = s;
        best_sweep = it;
        have_best = true;
      }
      if ((it - cfg.burn_in) % cfg.thin == 0) result.kept.push_back(s);
    }
    if (progress) progress(it + 1, cfg.iterations);
  }
  result.map = freeze_map(std::span<const MixtureState>(&best, 1), rows, sampler.missing());
  result.map.iteration = best_sweep;
  result.completed_rows = sampler.rows();
  return result;
}

}  // namespace nrfu
