#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "udsx/domain_stats.hpp"
#include "udsx/error.hpp"
#include "udsx/rng.hpp"

using namespace udsx;

namespace {

Eigen::MatrixXd two_pass_cov(const std::vector<Vector>& xs) {
  const std::size_t d = xs[0].size();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  for (const auto& x : xs) mean += Eigen::Map<const Eigen::VectorXd>(x.data(), d);
  mean /= double(xs.size());
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(d, d);
  for (const auto& x : xs) {
    const Eigen::VectorXd r = Eigen::Map<const Eigen::VectorXd>(x.data(), d) - mean;
    c += r * r.transpose();
  }
  return c / double(xs.size());
}

double max_abs_diff(const Matrix& a, const Eigen::MatrixXd& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) m = std::max(m, std::fabs(a(i, j) - b(i, j)));
  return m;
}

std::vector<Vector> random_stream(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<Vector> xs(n, Vector(d));
  for (auto& x : xs)
    for (auto& v : x) v = 2.0 + standard_normal(rng);
  return xs;
}

}  // namespace

TEST_CASE("covariance hand examples") {
  RunningCovariance a(2);
  a.update(Vector{1, 0});
  a.update(Vector{1, 0});
  CHECK(a.covariance() == Matrix(2, 2));

  RunningCovariance b(2);
  b.update(Vector{0, 0});
  b.update(Vector{2, 0});
  const Matrix cb = b.covariance();
  CHECK(cb(0, 0) == 1.0);
  CHECK(cb(0, 1) == 0.0);
  CHECK(cb(1, 1) == 0.0);

  RunningCovariance c(2);
  const std::vector<Vector> xs{{1, 2}, {3, 4}, {5, 6}};
  for (const auto& x : xs) c.update(x);
  CHECK(max_abs_diff(c.covariance(), two_pass_cov(xs)) < 1e-12);

  CHECK(RunningCovariance(3).covariance() == Matrix(3, 3));
  CHECK_THROWS_AS(c.update(Vector{1, 2, 3}), Error);
}

TEST_CASE("covariance matches the two-pass oracle and stays PSD") {
  Rng rng(21);
  for (int t = 0; t < 30; ++t) {
    const std::size_t d = 1 + t % 12, n = 2 + static_cast<std::size_t>(t) * 7;
    const auto xs = random_stream(rng, n, d);
    RunningCovariance rc(d);
    for (const auto& x : xs) rc.update(x);
    const Matrix cov = rc.covariance();
    const Eigen::MatrixXd ref = two_pass_cov(xs);
    CHECK(max_abs_diff(cov, ref) <= 1e-10 * std::max(1.0, ref.cwiseAbs().maxCoeff()));
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j)
        CHECK(std::fabs(cov(i, j) - cov(j, i)) <= 1e-12 * (std::fabs(cov(i, j)) + 1e-300));
    Eigen::MatrixXd e(d, d);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) e(i, j) = cov(i, j);
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(e).eigenvalues();
    CHECK(ev.minCoeff() >= -1e-8 * std::max(ev.maxCoeff(), 0.0));
  }
}

TEST_CASE("covariance is order independent and scales quadratically") {
  Rng rng(22);
  auto xs = random_stream(rng, 40, 5);
  RunningCovariance a(5), b(5), c(5);
  for (const auto& x : xs) a.update(x);
  std::shuffle(xs.begin(), xs.end(), rng);
  for (const auto& x : xs) b.update(x);
  for (auto x : xs) {
    for (auto& v : x) v *= 3.0;
    c.update(x);
  }
  const Matrix ca = a.covariance(), cb = b.covariance(), cc = c.covariance();
  for (std::size_t i = 0; i < ca.size(); ++i) {
    CHECK(cb.values()[i] == doctest::Approx(ca.values()[i]).epsilon(1e-9));
    CHECK(cc.values()[i] == doctest::Approx(9.0 * ca.values()[i]).epsilon(1e-9));
  }
}

TEST_CASE("momentum mode is an exponential average") {
  CHECK_THROWS_AS(RunningCovariance(2, 1.0), Error);
  RunningCovariance m(1, 0.5);
  for (double x : {1.0, 1.0, 1.0, 1.0}) m.update(Vector{x});
  CHECK(m.covariance()(0, 0) == doctest::Approx(0.0));
  CHECK(m.mean()[0] == doctest::Approx(1.0));
}

TEST_CASE("channel variance") {
  RunningChannelVariance a(3);
  for (int i = 0; i < 5; ++i) a.update(Vector{0.25, -1.0, 7.0});
  for (double v : a.variance()) CHECK(v == 0.0);

  RunningChannelVariance b(1);
  b.update(Vector{0.0});
  b.update(Vector{2.0});
  CHECK(b.variance()[0] == 1.0);

  Rng rng(23);
  const auto xs = random_stream(rng, 57, 4);
  RunningChannelVariance c(4);
  for (const auto& x : xs) c.update(x);
  const Eigen::MatrixXd ref = two_pass_cov(xs);
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(c.variance()[k] == doctest::Approx(ref(k, k)).epsilon(1e-10));
    CHECK(c.variance()[k] >= 0.0);
  }
}

TEST_CASE("domain stats bookkeeping") {
  DomainStats s(3, {{2, 4}, {3, 2}});
  CHECK_THROWS_AS(s.covariance(0), Error);
  s.register_domain(1);
  CHECK(s.has_domain(1));
  CHECK_FALSE(s.has_domain(0));
  try {
    s.covariance(5);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Domain);
  }

  // Layer 0 has 2 channels x 4 positions; the sample is the per-channel mean.
  s.update_channel_variance(1, 0, Vector{1, 1, 1, 1, 0, 0, 0, 0});
  s.update_channel_variance(1, 0, Vector{3, 3, 3, 3, 0, 2, 0, 2});
  const Vector v = s.channel_variance(1, 0).variance();
  CHECK(v[0] == 1.0);
  CHECK(v[1] == 0.25);
  CHECK_THROWS_AS(s.update_channel_variance(1, 2, Vector(6)), Error);
  CHECK_THROWS_AS(s.update_channel_variance(1, 1, Vector(5)), Error);
  CHECK_THROWS_AS(s.update_covariance(1, Vector(2)), Error);
}

TEST_CASE("snapshot round trip") {
  Rng rng(24);
  DomainStats s(4, {{2, 3}, {4, 1}});
  for (int d : {0, 2, 3}) {
    s.register_domain(d);
    for (const auto& x : random_stream(rng, 9, 4)) s.update_covariance(d, x);
    for (const auto& x : random_stream(rng, 6, 6)) s.update_channel_variance(d, 0, x);
  }
  std::stringstream buf;
  s.save(buf);
  const DomainStats r = DomainStats::load(buf);
  CHECK(r.domains() == s.domains());
  for (int d : s.domains()) {
    CHECK(r.covariance(d).count() == s.covariance(d).count());
    CHECK(r.covariance(d).covariance() == s.covariance(d).covariance());
    CHECK(r.channel_variance(d, 0).variance() == s.channel_variance(d, 0).variance());
  }

  std::stringstream bad("NOTSTATS 1\n");
  CHECK_THROWS_AS(DomainStats::load(bad), Error);
  std::string text = buf.str();
  std::stringstream trunc(text.substr(0, text.size() / 2));
  CHECK_THROWS_AS(DomainStats::load(trunc), Error);
}

TEST_CASE("quadratic form and cholesky") {
  CHECK(quadratic_form(Matrix::identity(2), Vector{3, 4}) == 25.0);
  CHECK(quadratic_form(Matrix::identity(2), Vector{0, 0}) == 0.0);
  CHECK_THROWS_AS(quadratic_form(Matrix::identity(2), Vector{1, 2, 3}), Error);

  Rng rng(25);
  for (int t = 0; t < 20; ++t) {
    const std::size_t d = 2 + t % 9;
    Matrix a(d, d);
    for (auto& v : a.values()) v = standard_normal(rng);
    Matrix s(d, d);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t k = 0; k < d; ++k) s(i, j) += a(i, k) * a(j, k);
    Vector v(d);
    for (auto& x : v) x = standard_normal(rng);
    double naive = 0.0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) naive += v[i] * s(i, j) * v[j];
    CHECK(quadratic_form(s, v) == doctest::Approx(naive).epsilon(1e-10));

    const Matrix l = cholesky(s);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) acc += l(i, k) * l(j, k);
        CHECK(acc == doctest::Approx(s(i, j)).epsilon(1e-8).scale(1.0));
      }
  }
  // Rank-deficient PSD input factorizes with jitter.
  CHECK_NOTHROW(cholesky(Matrix(3, 3)));
  Matrix neg = Matrix::identity(2);
  neg(0, 0) = -1.0;
  CHECK_THROWS_AS(cholesky(neg), Error);
}
