#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "nrfu/stat_kernel.hpp"

using namespace nrfu;
using Catch::Approx;
using Catch::Matchers::WithinAbs;

namespace {

Matrix random_pd(Rng& rng, Eigen::Index p) {
  Matrix a(p, p);
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = 0; j < p; ++j) a(i, j) = standard_normal(rng);
  return a.transpose() * a + 0.1 * Matrix::Identity(p, p);
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an nrfu::Error");
  return ErrorCode::IoError;
}

}  // namespace

TEST_CASE("seed contexts are deterministic and path sensitive") {
  const SeedContext root(42);
  CHECK(root.child({1, 2, 3}).derived_seed() == SeedContext(42, {1, 2, 3}).derived_seed());
  CHECK(root.child(1).child(2).derived_seed() == root.child({1, 2}).derived_seed());
  CHECK(root.child({1, 2}).derived_seed() != root.child({2, 1}).derived_seed());
  CHECK(root.child(0).derived_seed() != root.derived_seed());
  CHECK(SeedContext(43).child(0).derived_seed() != root.child(0).derived_seed());

  Rng a = root.child(7).make_rng();
  Rng b = root.child(7).make_rng();
  for (int i = 0; i < 100; ++i) REQUIRE(standard_normal(a) == standard_normal(b));
}

TEST_CASE("cholesky examples") {
  CHECK(cholesky(Matrix::Identity(2, 2)).isApprox(Matrix::Identity(2, 2)));

  Matrix m(2, 2);
  m << 4, 2, 2, 5;
  Matrix expected(2, 2);
  expected << 2, 0, 1, 2;
  CHECK((cholesky(m) - expected).norm() < 1e-14);

  Matrix bad(2, 2);
  bad << 1, 2, 2, 1;
  CHECK(code_of([&] { cholesky(bad); }) == ErrorCode::NotPositiveDefinite);

  Matrix tiny = 1e-13 * Matrix::Identity(2, 2);
  CHECK(code_of([&] { cholesky(tiny); }) == ErrorCode::NotPositiveDefinite);

  Matrix asym(2, 2);
  asym << 2, 1, 0, 2;
  CHECK(code_of([&] { cholesky(asym); }) == ErrorCode::NotPositiveDefinite);
  CHECK(code_of([&] { cholesky(Matrix::Identity(2, 3)); }) == ErrorCode::DimensionMismatch);
}

TEST_CASE("cholesky round-trips 1000 random PD matrices") {
  Rng rng = SeedContext(1).make_rng();
  for (int t = 0; t < 1000; ++t) {
    const Eigen::Index p = 1 + t % 6;
    const Matrix m = random_pd(rng, p);
    const Matrix l = cholesky(m);
    REQUIRE((l * l.transpose() - m).norm() / m.norm() < 1e-8);
    REQUIRE(l.isLowerTriangular());
  }
}

TEST_CASE("PdMatrix helpers agree with dense algebra") {
  Rng rng = SeedContext(2).make_rng();
  const Matrix m = random_pd(rng, 4);
  const PdMatrix pd(m);
  CHECK(pd.log_det() == Approx(std::log(m.determinant())).epsilon(1e-10));
  CHECK((pd.inverse() - m.inverse()).norm() < 1e-9 * m.inverse().norm());
  const Vector x = Vector::LinSpaced(4, -1.0, 2.0);
  CHECK(pd.quad_form(x) == Approx(x.dot(m.inverse() * x)).epsilon(1e-10));
}

TEST_CASE("mvn_logpdf closed forms") {
  const Vector zero1 = Vector::Zero(1);
  CHECK_THAT(mvn_logpdf(zero1, zero1, PdMatrix::identity(1)), WithinAbs(-0.5 * std::log(2 * std::numbers::pi), 1e-12));
  CHECK_THAT(mvn_logpdf(zero1, zero1, PdMatrix::identity(1)), WithinAbs(-0.91893853, 1e-8));
  const Vector mu = Vector::Constant(2, 0.7);
  CHECK_THAT(mvn_logpdf(mu, mu, PdMatrix::identity(2)), WithinAbs(-1.83787707, 1e-8));

  Rng rng = SeedContext(3).make_rng();
  for (int t = 0; t < 200; ++t) {
    const PdMatrix s(random_pd(rng, 3));
    const Vector m = standard_normal_vector(rng, 3);
    const Vector y = standard_normal_vector(rng, 3);
    REQUIRE(mvn_logpdf(y, m, s) <= mvn_logpdf(m, m, s));
  }
  CHECK(code_of([&] { mvn_logpdf(Vector::Zero(2), Vector::Zero(3), PdMatrix::identity(3)); }) ==
        ErrorCode::DimensionMismatch);
}

TEST_CASE("mvn_sample") {
  const Vector mu = (Vector(3) << 1.0, -2.0, 0.5).finished();
  Rng rng = SeedContext(4).make_rng();
  // Just above the pivot tolerance; 1e-12 itself is treated as singular.
  const Vector near = mvn_sample(rng, mu, PdMatrix::scaled_identity(3, 2e-12));
  CHECK((near - mu).cwiseAbs().maxCoeff() < 1e-5);

  Rng a = SeedContext(5).make_rng(), b = SeedContext(5).make_rng();
  CHECK(mvn_sample(a, mu, PdMatrix::identity(3)) == mvn_sample(b, mu, PdMatrix::identity(3)));

  const int n = 100000;
  Matrix cov = Matrix::Zero(2, 2);
  Vector mean = Vector::Zero(2);
  for (int i = 0; i < n; ++i) {
    const Vector x = mvn_sample(rng, Vector::Zero(2), PdMatrix::identity(2));
    mean += x;
    cov += x * x.transpose();
  }
  mean /= n;
  cov = cov / n - mean * mean.transpose();
  CHECK((cov - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 0.05);
}

TEST_CASE("inverse Wishart p=1 reduces to inverse gamma") {
  Rng rng = SeedContext(6).make_rng();
  const PdMatrix scale(Matrix::Constant(1, 1, 4.0));
  const int n = 100000;
  double sum = 0, sum2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = inverse_wishart_sample(rng, 6.0, scale).matrix()(0, 0);
    sum += x;
    sum2 += x * x;
  }
  const double mean = sum / n;
  // Inverse-gamma(3, 2): variance 4 / (4 * 1) = 1.
  const double se = std::sqrt((sum2 / n - mean * mean) / n);
  CHECK(std::abs(mean - 1.0) < 3 * se);
}

TEST_CASE("inverse Wishart mean for p=3 and validity of every draw") {
  Rng rng = SeedContext(7).make_rng();
  Matrix s(3, 3);
  s << 2, 0.5, 0.1, 0.5, 1, 0.2, 0.1, 0.2, 1.5;
  const PdMatrix scale(s);
  const double dof = 9;
  Matrix sum = Matrix::Zero(3, 3);
  const int n = 40000;
  for (int i = 0; i < n; ++i) {
    const PdMatrix x = inverse_wishart_sample(rng, dof, scale);
    REQUIRE_NOTHROW(cholesky(x.matrix()));
    sum += x.matrix();
  }
  const Matrix expected = s / (dof - 3 - 1);
  CHECK(((sum / n) - expected).cwiseAbs().maxCoeff() < 0.02);

  Rng a = SeedContext(8).make_rng(), b = SeedContext(8).make_rng();
  CHECK(inverse_wishart_sample(a, dof, scale) == inverse_wishart_sample(b, dof, scale));
  CHECK(code_of([&] { inverse_wishart_sample(rng, 2.0, scale); }) == ErrorCode::InvalidDof);
  CHECK_NOTHROW(inverse_wishart_sample(rng, 2.5, scale));
}

TEST_CASE("categorical_sample") {
  Rng rng = SeedContext(9).make_rng();
  const std::vector<double> point{1.0, 0.0, 0.0};
  for (int i = 0; i < 1000; ++i) REQUIRE(categorical_sample(rng, point) == 0);

  const int n = 100000;
  std::vector<double> even{1.0, 1.0};
  int ones = 0;
  for (int i = 0; i < n; ++i) ones += categorical_sample(rng, even) == 1;
  CHECK(std::abs(ones / double(n) - 0.5) < 0.01);

  // Chi-square GOF, 2 degrees of freedom: p > 0.001 iff statistic < 13.8155.
  std::vector<double> w{2.0, 1.0, 1.0};
  std::array<int, 3> counts{};
  for (int i = 0; i < n; ++i) ++counts[categorical_sample(rng, w)];
  const std::array<double, 3> expected{0.5 * n, 0.25 * n, 0.25 * n};
  double chi2 = 0;
  for (int k = 0; k < 3; ++k) chi2 += (counts[k] - expected[k]) * (counts[k] - expected[k]) / expected[k];
  CHECK(chi2 < -2.0 * std::log(0.001));

  CHECK(code_of([&] { categorical_sample(rng, std::vector<double>{0.0, 0.0}); }) == ErrorCode::AllZeroWeights);
  CHECK(code_of([&] { categorical_sample(rng, std::vector<double>{1.0, -0.5}); }) == ErrorCode::AllZeroWeights);
}

TEST_CASE("categorical_sample is invariant to rescaling the weights") {
  // Powers of two scale exactly, so the cumulative sums scale exactly too.
  const std::vector<double> w{0.3, 1.7, 0.0, 2.2, 0.9};
  for (double c : {0.25, 8.0, 1024.0}) {
    std::vector<double> scaled;
    for (double x : w) scaled.push_back(c * x);
    Rng a = SeedContext(10).make_rng(), b = SeedContext(10).make_rng();
    for (int i = 0; i < 10000; ++i) REQUIRE(categorical_sample(a, w) == categorical_sample(b, scaled));
  }
}

TEST_CASE("log_beta_sample") {
  Rng rng = SeedContext(9).make_rng();
  const int n = 20000;
  double v_sum = 0, tail_sum = 0;
  for (int i = 0; i < n; ++i) {
    const auto [log_v, log_rest] = log_beta_sample(rng, 2.0, 3.0);
    REQUIRE(std::abs(std::exp(log_v) + std::exp(log_rest) - 1.0) < 1e-12);
    v_sum += std::exp(log_v);
  }
  // Beta(2, 3): mean 0.4, sd 0.2.
  CHECK_THAT(v_sum / n, WithinAbs(0.4, 4 * 0.2 / std::sqrt(n)));

  // Beta(1, b) with b tiny: 1 - v underflows, its log does not.
  // E[log(1 - v)] = -1/b and the variance is 1/b^2.
  const double b = 1e-3;
  for (int i = 0; i < n; ++i) {
    const double log_rest = log_beta_sample(rng, 1.0, b).second;
    REQUIRE(std::isfinite(log_rest));
    tail_sum += log_rest;
  }
  CHECK_THAT(tail_sum / n, WithinAbs(-1.0 / b, 4 / b / std::sqrt(n)));
}

TEST_CASE("conditional_mvn") {
  Matrix s(2, 2);
  s << 1, 0.5, 0.5, 1;
  const auto c = conditional_mvn(Vector::Zero(2), PdMatrix(s), {1}, Vector::Constant(1, 2.0));
  REQUIRE(c.missing == std::vector<Eigen::Index>{0});
  CHECK_THAT(c.mean(0), WithinAbs(1.0, 1e-14));
  CHECK_THAT(c.covariance(0, 0), WithinAbs(0.75, 1e-14));

  const Vector mu = (Vector(3) << 1, 2, 3).finished();
  const PdMatrix diag(Vector(Vector::LinSpaced(3, 1.0, 3.0)).asDiagonal().toDenseMatrix());
  const auto ind = conditional_mvn(mu, diag, {0}, Vector::Constant(1, 100.0));
  CHECK(ind.mean.isApprox(mu.tail(2)));
  CHECK(ind.covariance.isApprox(diag.matrix().bottomRightCorner(2, 2)));

  const auto none = conditional_mvn(mu, diag, {}, Vector());
  CHECK(none.mean == mu);
  CHECK(none.covariance == diag.matrix());
}

TEST_CASE("conditional_mvn does not depend on the listing order of observed cells") {
  Rng rng = SeedContext(11).make_rng();
  for (int t = 0; t < 100; ++t) {
    const PdMatrix s(random_pd(rng, 5));
    const Vector mu = standard_normal_vector(rng, 5);
    const Vector y = standard_normal_vector(rng, 5);
    const auto a = conditional_mvn(mu, s, {0, 2, 3}, (Vector(3) << y(0), y(2), y(3)).finished());
    const auto b = conditional_mvn(mu, s, {3, 0, 2}, (Vector(3) << y(3), y(0), y(2)).finished());
    REQUIRE(a.missing == b.missing);
    REQUIRE(a.mean == b.mean);
    REQUIRE(a.covariance == b.covariance);
  }
}

TEST_CASE("conditional_mvn rejects bad index sets") {
  CHECK(code_of([] { conditional_mvn(Vector::Zero(2), PdMatrix::identity(2), {2}, Vector::Zero(1)); }) ==
        ErrorCode::DimensionMismatch);
  CHECK(code_of([] { conditional_mvn(Vector::Zero(2), PdMatrix::identity(2), {0, 0}, Vector::Zero(2)); }) ==
        ErrorCode::DimensionMismatch);
}
