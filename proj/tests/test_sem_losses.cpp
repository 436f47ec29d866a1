#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "udsx/checks.hpp"
#include "udsx/error.hpp"
#include "udsx/rng.hpp"
#include "udsx/sem_losses.hpp"

using namespace udsx;

namespace {

struct Instance {
  ClassifierWeights w;
  Vector f;
  int y = 0;
  Matrix sigma;
  double lambda = 0.0;
};

Instance random_instance(Rng& rng, double lambda_max = 20.0) {
  std::uniform_int_distribution<std::size_t> cd(2, 10), dd(2, 16);
  const std::size_t c = cd(rng), d = dd(rng);
  Instance in;
  in.w.w = Matrix(c, d);
  for (auto& v : in.w.w.values()) v = standard_normal(rng);
  in.f.resize(d);
  for (auto& v : in.f) v = standard_normal(rng);
  in.y = std::uniform_int_distribution<int>(0, static_cast<int>(c) - 1)(rng);
  Eigen::MatrixXd a(d, d);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = standard_normal(rng) / std::sqrt(double(d));
  const Eigen::MatrixXd s = a * a.transpose();
  in.sigma = Matrix(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) in.sigma(i, j) = s(i, j);
  in.lambda = std::uniform_real_distribution<double>(0.0, lambda_max)(rng);
  return in;
}

Eigen::MatrixXd to_eigen(const Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
  return e;
}

// Independent evaluation of -log(e^{s_y} / sum_j e^{s_j + gamma_j}).
double oracle_dex(const Instance& in, double lambda) {
  const Eigen::MatrixXd w = to_eigen(in.w.w), s = to_eigen(in.sigma);
  const Eigen::VectorXd f = Eigen::Map<const Eigen::VectorXd>(in.f.data(), in.f.size());
  const Eigen::VectorXd logits = w * f;
  Eigen::VectorXd z(logits.size());
  for (Eigen::Index j = 0; j < logits.size(); ++j) {
    const Eigen::VectorXd dw = w.row(j).transpose() - w.row(in.y).transpose();
    z(j) = logits(j) + 0.5 * lambda * dw.dot(s * dw);
  }
  const double m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum()) - logits(in.y);
}

}  // namespace

TEST_CASE("cross_entropy hand examples") {
  ClassifierWeights w{Matrix::identity(2)};
  const Vector f{1.0, 0.0};
  CHECK(cross_entropy(w, f, 0).value == doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));

  ClassifierWeights same{Matrix(4, 3, 0.7)};
  CHECK(cross_entropy(same, Vector{1, 2, 3}, 2).value == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  CHECK_THROWS_AS(cross_entropy(w, f, 2), Error);
  CHECK_THROWS_AS(cross_entropy(w, f, -1), Error);
}

TEST_CASE("gamma_terms hand examples") {
  ClassifierWeights w{Matrix::identity(2)};
  const Vector g = gamma_terms(w, 0, Matrix::identity(2), 2.0);
  CHECK(g[0] == 0.0);
  CHECK(g[1] == doctest::Approx(2.0).epsilon(1e-14));
  const Vector z = gamma_terms(w, 1, Matrix::identity(2), 0.0);
  CHECK(z[0] == 0.0);
  CHECK(z[1] == 0.0);
  CHECK_THROWS_AS(gamma_terms(w, 0, Matrix::identity(3), 1.0), Error);
}

TEST_CASE("dex_loss hand example") {
  ClassifierWeights w{Matrix::identity(2)};
  const Vector f{1.0, 0.0};
  const auto r = dex_loss(w, f, 0, Matrix::identity(2), DexConfig{2.0});
  CHECK(r.value == doctest::Approx(std::log(1.0 + std::exp(1.0))).epsilon(1e-12));
}

TEST_CASE("dex_loss matches an independent oracle and bounds cross_entropy") {
  Rng rng(11);
  for (int i = 0; i < 300; ++i) {
    const Instance in = random_instance(rng, 50.0);
    const double dex = dex_loss(in.w, in.f, in.y, in.sigma, DexConfig{in.lambda}).value;
    const double ce = cross_entropy(in.w, in.f, in.y).value;
    CHECK(dex == doctest::Approx(oracle_dex(in, in.lambda)).epsilon(1e-10));
    CHECK(ce == doctest::Approx(oracle_dex(in, 0.0)).epsilon(1e-10));
    CHECK(dex >= ce);
  }
}

TEST_CASE("lambda = 0 reproduces cross_entropy bit for bit") {
  Rng rng(12);
  for (int i = 0; i < 1000; ++i) {
    const Instance in = random_instance(rng);
    const auto ce = cross_entropy(in.w, in.f, in.y);
    const auto dex = dex_loss(in.w, in.f, in.y, in.sigma, DexConfig{0.0});
    REQUIRE(dex.value == ce.value);
    REQUIRE(dex.grad_embedding == ce.grad_embedding);
    REQUIRE(dex.grad_weights == ce.grad_weights);
  }
}

TEST_CASE("gamma is zero on the target and non-negative for PSD sigma") {
  Rng rng(13);
  for (int i = 0; i < 1000; ++i) {
    const Instance in = random_instance(rng, 50.0);
    const Vector g = gamma_terms(in.w, in.y, in.sigma, in.lambda);
    REQUIRE(g[in.y] == 0.0);
    for (double v : g) REQUIRE(v >= -1e-10);
  }
}

TEST_CASE("non-PSD sigma is reported as corrupted statistics") {
  ClassifierWeights w{Matrix::identity(2)};
  Matrix bad = Matrix::identity(2);
  bad(0, 0) = bad(1, 1) = -1.0;
  try {
    dex_loss(w, Vector{1, 0}, 0, bad, DexConfig{1.0});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Numeric);
  }
}

TEST_CASE("constant logit shift leaves both losses unchanged") {
  // A shift of every class weight by the same vector u adds u.f to every logit
  // and leaves w_j - w_y, hence gamma, untouched.
  Rng rng(14);
  for (int i = 0; i < 50; ++i) {
    Instance in = random_instance(rng);
    const double ce0 = cross_entropy(in.w, in.f, in.y).value;
    const double dex0 = dex_loss(in.w, in.f, in.y, in.sigma, DexConfig{in.lambda}).value;
    Vector u(in.f.size());
    for (auto& v : u) v = 3.0 * standard_normal(rng);
    for (std::size_t r = 0; r < in.w.classes(); ++r)
      for (std::size_t c = 0; c < in.w.dim(); ++c) in.w.w(r, c) += u[c];
    CHECK(cross_entropy(in.w, in.f, in.y).value == doctest::Approx(ce0).epsilon(1e-9));
    CHECK(dex_loss(in.w, in.f, in.y, in.sigma, DexConfig{in.lambda}).value == doctest::Approx(dex0).epsilon(1e-9));
  }
}

TEST_CASE("large logits stay finite") {
  ClassifierWeights w{Matrix::identity(3)};
  const auto r = dex_loss(w, Vector{1000.0, -1000.0, 0.0}, 1, Matrix::identity(3), DexConfig{4.0});
  CHECK(std::isfinite(r.value));
  CHECK(r.value == doctest::Approx(2000.0 + 4.0).epsilon(1e-9));
}

TEST_CASE("gradients match central differences") {
  Rng rng(15);
  for (int i = 0; i < 50; ++i) {
    Instance in = random_instance(rng);
    for (bool dex : {false, true}) {
      auto eval = [&] {
        return dex ? dex_loss(in.w, in.f, in.y, in.sigma, DexConfig{in.lambda}) : cross_entropy(in.w, in.f, in.y);
      };
      const auto g = eval();
      std::vector<double*> coords;
      std::vector<double> analytic;
      for (std::size_t k = 0; k < in.f.size(); ++k) {
        coords.push_back(&in.f[k]);
        analytic.push_back(g.grad_embedding[k]);
      }
      for (std::size_t k = 0; k < in.w.w.size(); ++k) {
        coords.push_back(&in.w.w.values()[k]);
        analytic.push_back(g.grad_weights.values()[k]);
      }
      // The losses are smooth: only a sign flip of the one-sided slopes would count as a kink.
      const FdReport rep = fd_compare([&] { return eval().value; }, coords, analytic, 1e-5, 1.0);
      CHECK(rep.rel_error < 1e-6);
      CHECK(rep.skipped == 0);
    }
  }
}

TEST_CASE("frozen gamma drops the weight path through gamma only") {
  Rng rng(16);
  const Instance in = random_instance(rng);
  const auto live = dex_loss(in.w, in.f, in.y, in.sigma, DexConfig{in.lambda, false});
  const auto frozen = dex_loss(in.w, in.f, in.y, in.sigma, DexConfig{in.lambda, true});
  CHECK(live.value == frozen.value);
  CHECK(live.grad_embedding == frozen.grad_embedding);
  CHECK_FALSE(live.grad_weights == frozen.grad_weights);
}

TEST_CASE("softmax_loss_accumulate adds scaled gradients") {
  Rng rng(17);
  const Instance in = random_instance(rng);
  const auto ref = dex_loss(in.w, in.f, in.y, in.sigma, DexConfig{in.lambda});
  Vector gf(in.f.size(), 1.0);
  Matrix gw(in.w.classes(), in.w.dim(), 1.0);
  const double v = softmax_loss_accumulate(in.w, in.f, in.y, &in.sigma, DexConfig{in.lambda}, 0.5, gf, gw);
  CHECK(v == ref.value);
  for (std::size_t k = 0; k < gf.size(); ++k) CHECK(gf[k] == doctest::Approx(1.0 + 0.5 * ref.grad_embedding[k]));
  for (std::size_t k = 0; k < gw.size(); ++k)
    CHECK(gw.values()[k] == doctest::Approx(1.0 + 0.5 * ref.grad_weights.values()[k]));
}

TEST_CASE("Monte-Carlo estimate") {
  Rng rng(18);
  SUBCASE("lambda = 0 is the plain loss") {
    const Instance in = random_instance(rng);
    const auto mc = monte_carlo_l_infinity(in.w, in.f, in.y, in.sigma, 0.0, 500, 3);
    CHECK(mc.mean == doctest::Approx(cross_entropy(in.w, in.f, in.y).value).epsilon(1e-12));
    CHECK(mc.stderr_ == 0.0);
  }
  SUBCASE("deterministic given the seed") {
    const Instance in = random_instance(rng);
    const auto a = monte_carlo_l_infinity(in.w, in.f, in.y, in.sigma, 3.0, 1000, 9);
    const auto b = monte_carlo_l_infinity(in.w, in.f, in.y, in.sigma, 3.0, 1000, 9);
    CHECK(a.mean == b.mean);
    CHECK(a.stderr_ == b.stderr_);
  }
  SUBCASE("bounded by the closed form") {
    for (int i = 0; i < 20; ++i) {
      const Instance in = random_instance(rng, 50.0);
      const auto mc = monte_carlo_l_infinity(in.w, in.f, in.y, in.sigma, in.lambda, 20000, rng());
      CHECK(mc.mean <= dex_loss(in.w, in.f, in.y, in.sigma, DexConfig{in.lambda}).value + 4.0 * mc.stderr_);
    }
  }
  SUBCASE("small lambda is continuous with the plain loss") {
    Instance in = random_instance(rng);
    in.sigma = Matrix::identity(in.f.size());
    const auto mc = monte_carlo_l_infinity(in.w, in.f, in.y, in.sigma, 1e-4, 20000, 5);
    CHECK(std::fabs(mc.mean - cross_entropy(in.w, in.f, in.y).value) <= 4.0 * mc.stderr_ + 1e-12);
  }
  SUBCASE("too few samples") {
    const Instance in = random_instance(rng);
    CHECK_THROWS_AS(monte_carlo_l_infinity(in.w, in.f, in.y, in.sigma, 1.0, 50, 1), Error);
  }
}

TEST_CASE("max_interclass_weight_distance") {
  Matrix w(2, 2);
  w(1, 0) = 3;
  w(1, 1) = 4;
  CHECK(max_interclass_weight_distance(ClassifierWeights{w}) == 5.0);
  CHECK(max_interclass_weight_distance(ClassifierWeights{Matrix(5, 3, 1.5)}) == 0.0);
  CHECK_THROWS_AS(max_interclass_weight_distance(ClassifierWeights{Matrix(1, 3)}), Error);

  Rng rng(19);
  for (int t = 0; t < 20; ++t) {
    Matrix r(10, 7);
    for (auto& v : r.values()) v = standard_normal(rng);
    const Eigen::MatrixXd e = to_eigen(r);
    double best = 0.0;
    for (int i = 0; i < 10; ++i)
      for (int j = 0; j < 10; ++j) best = std::max(best, (e.row(i) - e.row(j)).norm());
    CHECK(max_interclass_weight_distance(ClassifierWeights{r}) == doctest::Approx(best).epsilon(1e-12));
  }
}
