#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "nrfu/mixture.hpp"

using namespace nrfu;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an nrfu::Error");
  return ErrorCode::IoError;
}

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

MixtureState small_state(std::size_t K, Eigen::Index p, std::size_t n) {
  MixtureState s;
  s.z.assign(n, 0);
  s.v = Vector::Constant(static_cast<Eigen::Index>(K), 0.5);
  s.v(static_cast<Eigen::Index>(K) - 1) = 1.0;
  s.pi = stick_break(s.v);
  s.alpha = 1.3;
  s.phi = Vector::Constant(p, 0.7);
  s.mu = Matrix::Zero(static_cast<Eigen::Index>(K), p);
  s.sigma.assign(K, PdMatrix::identity(p));
  return s;
}

HyperParams with_k(std::size_t K) {
  HyperParams hp;
  hp.K = K;
  return hp;
}

}  // namespace

TEST_CASE("stick_break examples") {
  CHECK(stick_break(vec({1.0})) == vec({1.0}));
  CHECK(stick_break(vec({0.5, 0.5, 1.0})) == vec({0.5, 0.25, 0.25}));
  const Vector pi = stick_break(vec({0.2, 0.0, 1.0}));
  CHECK_THAT(pi(0), WithinAbs(0.2, 1e-15));
  CHECK(pi(1) == 0.0);
  CHECK_THAT(pi(2), WithinAbs(0.8, 1e-15));
  CHECK(code_of([] { stick_break(vec({0.5, 0.9})); }) == ErrorCode::LastStickNotOne);
  CHECK(code_of([] { stick_break(Vector()); }) == ErrorCode::LastStickNotOne);
}

TEST_CASE("stick_break sums to one on 10^4 random stick vectors") {
  Rng rng = SeedContext(11).make_rng();
  for (int t = 0; t < 10000; ++t) {
    const Eigen::Index K = 1 + t % 40;
    Vector v(K);
    for (Eigen::Index k = 0; k + 1 < K; ++k) v(k) = uniform01(rng);
    v(K - 1) = 1.0;
    const Vector pi = stick_break(v);
    REQUIRE(std::abs(pi.sum() - 1.0) < 1e-12);
    REQUIRE((pi.array() >= 0.0).all());
    double remaining = 1.0;
    for (Eigen::Index k = 0; k + 1 < K; ++k) {
      REQUIRE(pi(k) == v(k) * remaining);
      remaining *= 1.0 - v(k);
    }
  }
}

TEST_CASE("component_counts") {
  const std::vector<int> z{0, 2, 2, 1, 2};
  CHECK(component_counts(z, 4) == std::vector<std::size_t>{1, 1, 3, 0});
}

TEST_CASE("log posterior matches a term-by-term hand computation for K=1, p=1") {
  HyperParams hp = HyperParams{}.resolved(1);  // f = 2, mu0 = 0
  hp.K = 1;
  MixtureState s = small_state(1, 1, 1);
  s.phi = vec({0.7});
  const Matrix y = Matrix::Zero(1, 1);

  const double ln2pi = std::log(2 * std::numbers::pi);
  const double loglik = -0.5 * ln2pi;                 // N(0 | 0, 1)
  const double log_mu = -0.5 * ln2pi;                 // N(0 | 0, sigma^2 / h), h = 1
  // IW(1 | f = 2, phi) in one dimension is inverse-gamma(shape 1, rate phi / 2).
  const double log_sigma = std::log(0.35) - std::lgamma(1.0) - 2.0 * std::log(1.0) - 0.35;
  auto log_gamma = [](double x, double a, double b) {
    return a * std::log(b) - std::lgamma(a) + (a - 1) * std::log(x) - b * x;
  };
  const double log_alpha = log_gamma(1.3, 0.25, 0.25);
  const double log_phi = log_gamma(0.7, 0.25, 0.25);

  const auto terms = posterior_terms(s, y, hp);
  CHECK_THAT(terms.log_likelihood, WithinAbs(loglik, 1e-12));
  CHECK(terms.log_assignment == 0.0);
  CHECK_THAT(terms.log_prior, WithinAbs(log_mu + log_sigma + log_alpha + log_phi, 1e-12));
  CHECK_THAT(log_joint_posterior(s, y, hp), WithinAbs(loglik + log_mu + log_sigma + log_alpha + log_phi, 1e-12));
}

TEST_CASE("inverse-Wishart log density agrees with the inverse-gamma form for p=1") {
  for (double x : {0.3, 1.0, 4.2}) {
    for (double dof : {2.0, 5.5}) {
      const double scale = 1.7;
      const double a = dof / 2, b = scale / 2;
      const double ig = a * std::log(b) - std::lgamma(a) - (a + 1) * std::log(x) - b / x;
      CHECK_THAT(detail::log_inverse_wishart_density(PdMatrix(Matrix::Constant(1, 1, x)), dof,
                                                     PdMatrix(Matrix::Constant(1, 1, scale))),
                 WithinAbs(ig, 1e-12));
    }
  }
}

TEST_CASE("duplicating the data doubles the likelihood part") {
  Rng rng = SeedContext(12).make_rng();
  const std::size_t K = 3;
  const Eigen::Index p = 2;
  const HyperParams hp = with_k(K).resolved(p);
  Matrix rows(10, p);
  for (Eigen::Index i = 0; i < rows.rows(); ++i) rows.row(i) = standard_normal_vector(rng, p).transpose();
  MixtureState s = small_state(K, p, 10);
  for (std::size_t i = 0; i < 10; ++i) s.z[i] = static_cast<int>(i % K);
  s.mu.row(1) = vec({1.0, -1.0}).transpose();

  Matrix doubled(20, p);
  doubled << rows, rows;
  MixtureState s2 = s;
  s2.z.insert(s2.z.end(), s.z.begin(), s.z.end());

  const auto one = posterior_terms(s, rows, hp);
  const auto two = posterior_terms(s2, doubled, hp);
  CHECK_THAT(two.log_likelihood + two.log_assignment, WithinRel(2 * (one.log_likelihood + one.log_assignment), 1e-12));
  CHECK(two.log_prior == one.log_prior);
  CHECK_THAT(log_joint_posterior(s2, doubled, hp) - 2 * (one.log_likelihood + one.log_assignment) - one.log_prior,
             WithinAbs(0.0, 1e-9));
}

TEST_CASE("moving an unoccupied mean toward mu0 never lowers the prior") {
  const std::size_t K = 2;
  const HyperParams hp = with_k(K).resolved(2);
  MixtureState s = small_state(K, 2, 4);
  double last = -std::numeric_limits<double>::infinity();
  for (double t = 3.0; t >= 0.0; t -= 0.25) {
    s.mu.row(1) = vec({t, -t}).transpose();
    const double lp = log_prior_density(s, hp);
    REQUIRE(lp >= last);
    last = lp;
  }
}

TEST_CASE("posterior differences do not depend on dropped constants") {
  // Differences between two states compare only the parts that change; any
  // fixed offset cancels.
  const HyperParams hp = with_k(2).resolved(2);
  MixtureState a = small_state(2, 2, 3), b = a;
  b.mu.row(0) = vec({0.5, 0.2}).transpose();
  const Matrix rows = Matrix::Ones(3, 2);
  const double diff = log_joint_posterior(b, rows, hp) - log_joint_posterior(a, rows, hp);
  const double c = 123.456;
  CHECK_THAT((log_joint_posterior(b, rows, hp) + c) - (log_joint_posterior(a, rows, hp) + c), WithinAbs(diff, 1e-10));
  CHECK(code_of([&] { posterior_terms(a, Matrix::Ones(4, 2), hp); }) == ErrorCode::DimensionMismatch);
}

TEST_CASE("spherical prior uses sigma I / h for the means") {
  HyperParams hp = with_k(2).resolved(2);
  hp.mode = CovarianceMode::Spherical;
  hp.spherical_variance = 0.3;
  hp.h = 2.0;
  MixtureState s = small_state(2, 2, 1);
  s.mu.row(0) = vec({0.1, 0.2}).transpose();
  s.v = vec({0.4, 1.0});
  const PdMatrix cov = PdMatrix::scaled_identity(2, 0.15);
  const double expected = std::log(1.3) + 0.3 * std::log(0.6) +
                          detail::log_gamma_density(1.3, hp.a_alpha, hp.b_alpha) +
                          mvn_logpdf(s.mu.row(0).transpose(), hp.mu0, cov) +
                          mvn_logpdf(s.mu.row(1).transpose(), hp.mu0, cov);
  CHECK_THAT(log_prior_density(s, hp), WithinAbs(expected, 1e-12));
}

TEST_CASE("hyperparameter validation") {
  CHECK(code_of([] { (void)with_k(0).resolved(2); }) == ErrorCode::InvalidConfig);
  HyperParams hp;
  hp.f = 2.5;
  CHECK(code_of([&] { (void)hp.resolved(2); }) == ErrorCode::InvalidConfig);
  hp.f = 0;
  hp.a_alpha = 0;
  CHECK(code_of([&] { (void)hp.resolved(2); }) == ErrorCode::InvalidConfig);
  const auto r = HyperParams{}.resolved(3);
  CHECK(r.f == 4.0);
  CHECK(r.mu0 == Vector::Zero(3));
}

TEST_CASE("rank_components examples") {
  Matrix mu(3, 2);
  mu << 0, 0, 3, 4, 1, 0;
  const auto r = rank_components(mu, Vector::Zero(2));
  CHECK(r.delta == vec({0, 25, 1}));
  CHECK(r.rank_order == std::vector<std::size_t>{0, 2, 1});

  const auto two = rank_components(Matrix::Ones(1, 2), Vector::Zero(2));
  CHECK(two.delta(0) == 2.0);

  Matrix rows(3, 2);
  rows << 1, 5, -2, 7, 3, 4;
  const Vector y_min = observed_minimum(rows, MaskMatrix::Constant(3, 2, false));
  CHECK(y_min == vec({-2, 4}));
  const auto at_min = rank_components(Matrix(y_min.transpose()), y_min);
  CHECK(at_min.delta(0) == 0.0);
  CHECK(at_min.rank_order[0] == 0);

  MaskMatrix miss = MaskMatrix::Constant(3, 2, false);
  miss(1, 0) = true;
  CHECK(observed_minimum(rows, miss)(0) == 1.0);
  miss.col(1).setConstant(true);
  CHECK(code_of([&] { observed_minimum(rows, miss); }) == ErrorCode::NoObservedValues);
}

TEST_CASE("rank_components delta ignores row order") {
  Rng rng = SeedContext(13).make_rng();
  Matrix rows(50, 3), mu(6, 3);
  for (Eigen::Index i = 0; i < 50; ++i) rows.row(i) = standard_normal_vector(rng, 3).transpose();
  for (Eigen::Index k = 0; k < 6; ++k) mu.row(k) = standard_normal_vector(rng, 3).transpose();
  const MaskMatrix none = MaskMatrix::Constant(50, 3, false);
  Matrix reversed = rows.colwise().reverse();
  CHECK(rank_components(mu, rows, none).delta == rank_components(mu, reversed, none).delta);
}

TEST_CASE("freeze_map picks the argmax with earliest ties") {
  const Matrix rows = Matrix::Zero(2, 1);
  const MaskMatrix none = MaskMatrix::Constant(2, 1, false);
  auto make = [](double lp, double mu) {
    MixtureState s;
    s.z = {0, 0};
    s.v = vec({0.5, 1.0});
    s.pi = stick_break(s.v);
    s.mu = Matrix::Constant(2, 1, mu);
    s.sigma.assign(2, PdMatrix::identity(1));
    s.log_posterior = lp;
    return s;
  };
  const std::vector<MixtureState> single{make(-3, 1.0)};
  CHECK(freeze_map(single, rows, none).mu(0, 0) == 1.0);

  const std::vector<MixtureState> two{make(-10, 1.0), make(-5, 2.0)};
  const auto m2 = freeze_map(two, rows, none);
  CHECK(m2.mu(0, 0) == 2.0);
  CHECK(m2.iteration == 1);

  const std::vector<MixtureState> tie{make(-7, 1.0), make(-5, 2.0), make(-5, 3.0)};
  const auto m3 = freeze_map(tie, rows, none);
  CHECK(m3.mu(0, 0) == 2.0);
  CHECK(m3.occupied == std::vector<bool>{true, false});
  CHECK_THAT(m3.pi.sum(), WithinAbs(1.0, 1e-12));

  const std::vector<MixtureState> reversed(tie.rbegin(), tie.rend());
  CHECK(freeze_map(reversed, rows, none).log_posterior == m3.log_posterior);
  CHECK(code_of([&] { freeze_map(std::vector<MixtureState>{}, rows, none); }) == ErrorCode::EmptyChain);
}

TEST_CASE("ellipse geometry") {
  const double q = kChiSquare2Q95;
  CHECK_THAT(q, WithinAbs(5.991464547, 1e-8));

  const auto circle = ellipse_95(Vector::Zero(2), PdMatrix::identity(2), 0, 1);
  CHECK_THAT(circle.major, WithinAbs(std::sqrt(q), 1e-12));
  CHECK_THAT(circle.minor, WithinAbs(std::sqrt(q), 1e-12));

  const auto axis = ellipse_95(vec({1, 2}), PdMatrix(Matrix(vec({4, 1}).asDiagonal())), 0, 1);
  CHECK_THAT(axis.major, WithinAbs(2 * std::sqrt(q), 1e-12));
  CHECK_THAT(axis.minor, WithinAbs(std::sqrt(q), 1e-12));
  CHECK_THAT(axis.rotation, WithinAbs(0.0, 1e-12));
  CHECK(axis.center_x == 1.0);
  CHECK(axis.center_y == 2.0);

  for (double t : {0.3, -1.1, 1.4}) {
    Eigen::Matrix2d rot;
    rot << std::cos(t), -std::sin(t), std::sin(t), std::cos(t);
    const Matrix s = rot * Eigen::Vector2d(4, 1).asDiagonal() * rot.transpose();
    const auto e = ellipse_95(Vector::Zero(2), PdMatrix(Matrix(0.5 * (s + s.transpose()))), 0, 1);
    CHECK_THAT(e.major, WithinAbs(2 * std::sqrt(q), 1e-10));
    CHECK_THAT(e.minor, WithinAbs(std::sqrt(q), 1e-10));
    CHECK_THAT(e.rotation, WithinAbs(t, 1e-10));
  }

  Matrix s3 = Matrix::Identity(3, 3);
  s3(0, 2) = s3(2, 0) = 0.5;
  const auto sub = ellipse_95(vec({1, 2, 3}), PdMatrix(s3), 0, 2);
  CHECK(sub.center_y == 3.0);
  CHECK_THAT(sub.major, WithinAbs(std::sqrt(1.5 * q), 1e-12));
  CHECK(code_of([] { ellipse_95(Vector::Zero(2), PdMatrix::identity(2), 1, 1); }) == ErrorCode::DimensionMismatch);
}
