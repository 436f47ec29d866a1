#include <cmath>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "udsx/backbone.hpp"
#include "udsx/checks.hpp"
#include "udsx/error.hpp"
#include "udsx/rng.hpp"

using namespace udsx;

namespace {

BackboneSpec small_spec() {
  BackboneSpec s;
  s.in_channels = 3;
  s.height = 8;
  s.width = 4;
  s.channels = {4, 6, 8};
  s.num_classes = 5;
  return s;
}

Vector random_input(Rng& rng, std::size_t n) {
  Vector x(n);
  for (auto& v : x) v = standard_normal(rng);
  return x;
}

// L = u . f + 0.5 |f|^2
double probe_loss(const Vector& f, const Vector& u) {
  double l = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) l += u[i] * f[i] + 0.5 * f[i] * f[i];
  return l;
}

Vector probe_grad(const Vector& f, const Vector& u) {
  Vector g(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) g[i] = u[i] + f[i];
  return g;
}

}  // namespace

TEST_CASE("spec validation") {
  BackboneSpec s = small_spec();
  CHECK_NOTHROW(s.validate());
  s.channels = {4, 3};
  CHECK_THROWS_AS(s.validate(), Error);
  s = small_spec();
  s.height = 3;
  CHECK_THROWS_AS(s.validate(), Error);
  s = small_spec();
  s.num_classes = 1;
  CHECK_THROWS_AS(s.validate(), Error);
  CHECK(BackboneSpec{}.input_size() == 3 * 32 * 16);
}

TEST_CASE("default model shape") {
  BackboneModel m(BackboneSpec{}, 1);
  CHECK(m.embedding_dim() == 32);
  CHECK(m.stages().size() == 5);
  CHECK(m.parameter_count() < 10000);
  const auto shapes = m.layer_shapes();
  CHECK(shapes[0].channels == 8);
  CHECK(shapes[0].spatial == 256);
  CHECK(shapes[4].spatial == 16);
  CHECK(m.parameter_names().size() == 11);
}

TEST_CASE("identity stage passes the pooled input statistic through") {
  BackboneSpec s;
  s.in_channels = 4;
  s.height = 4;
  s.width = 2;
  s.channels = {4};
  s.num_classes = 2;
  BackboneModel m(s, 3);
  auto p = m.mutable_parameters();
  for (auto& v : p[0]) v = 0.0;
  for (std::size_t i = 0; i < 4; ++i) p[0][i * 4 + i] = 1.0;
  for (auto& v : p[1]) v = 0.0;
  Vector x(4 * 8);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.25 * double(i % 7) + double(i / 8);
  const ForwardTrace t = forward(m, x);
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0.0;
    for (std::size_t j = 0; j < 8; ++j) mean += x[c * 8 + j];
    CHECK(t.embedding[c] == doctest::Approx(mean / 8.0).epsilon(1e-14));
  }
}

TEST_CASE("forward is deterministic and a zero hook is a no-op") {
  Rng rng(4);
  BackboneModel a(small_spec(), 9), b(small_spec(), 9);
  const Vector x = random_input(rng, a.spec().input_size());
  const ForwardTrace ta = forward(a, x), tb = forward(b, x);
  CHECK(ta.embedding == tb.embedding);
  CHECK(ta.logits == tb.logits);

  PerturbHook hook{1, [](std::span<double> f, const LayerShape&) {
                     for (auto& v : f) v += 0.0;
                   }};
  const ForwardTrace th = forward(a, x, &hook);
  CHECK(th.outputs == ta.outputs);
  CHECK(th.embedding == ta.embedding);

  int calls = 0;
  PerturbHook shift{1, [&](std::span<double> f, const LayerShape& shape) {
                      ++calls;
                      CHECK(shape.channels == 6);
                      CHECK(shape.spatial == 8);
                      for (auto& v : f) v += 1.0;
                    }};
  const ForwardTrace ts = forward(a, x, &shift);
  CHECK(calls == 1);
  CHECK(ts.outputs[0] == ta.outputs[0]);
  CHECK(ts.outputs[1][0] == doctest::Approx(ta.outputs[1][0] + 1.0));

  CHECK_THROWS_AS(forward(a, Vector(5)), Error);
}

TEST_CASE("backward gradients") {
  Rng rng(5);
  BackboneModel m(small_spec(), 10);
  const Vector x = random_input(rng, m.spec().input_size());
  Vector u(m.embedding_dim());
  for (auto& v : u) v = standard_normal(rng);

  SUBCASE("zero upstream gives zero gradients") {
    ModelGradients g(m);
    backward(m, forward(m, x), Vector(m.embedding_dim(), 0.0), g);
    for (auto b : g.blocks())
      for (double v : b) CHECK(v == 0.0);
  }

  SUBCASE("single dense stage matches the outer product") {
    BackboneSpec s;
    s.in_channels = 4;
    s.height = 1;
    s.width = 2;
    s.channels = {4};
    s.num_classes = 2;
    BackboneModel one(s, 2);
    auto p = one.mutable_parameters();
    for (auto& v : p[1]) v = 20.0;  // every unit active
    const Vector xi{1, 3, -2, 2, 0.5, 0.5, 4, 0};
    const ForwardTrace t = forward(one, xi);
    ModelGradients g(one);
    const Vector up{1, -1, 2, 0.5};
    backward(one, t, up, g);
    const Vector pooled{2, 0, 0.5, 2};
    for (std::size_t o = 0; o < 4; ++o) {
      CHECK(g.bias[0][o] == doctest::Approx(up[o]));
      for (std::size_t c = 0; c < 4; ++c) CHECK(g.weight[0](o, c) == doctest::Approx(up[o] * pooled[c]));
    }
  }

  SUBCASE("parameters and input match central differences") {
    for (int trial = 0; trial < 5; ++trial) {
      const Vector xt = random_input(rng, m.spec().input_size());
      ModelGradients g(m);
      Vector gx;
      const ForwardTrace t = forward(m, xt);
      backward(m, t, probe_grad(t.embedding, u), g, &gx);

      std::vector<double*> coords;
      std::vector<double> analytic;
      auto params = m.mutable_parameters();
      const auto blocks = g.blocks();
      for (std::size_t b = 0; b + 1 < params.size(); ++b)  // classifier is not reached from the embedding
        for (std::size_t i = 0; i < params[b].size(); ++i) {
          coords.push_back(&params[b][i]);
          analytic.push_back(blocks[b][i]);
        }
      Vector xv = xt;
      for (std::size_t i = 0; i < xv.size(); ++i) {
        coords.push_back(&xv[i]);
        analytic.push_back(gx[i]);
      }
      const FdReport r =
          fd_compare([&] { return probe_loss(forward(m, xv).embedding, u); }, coords, analytic, 1e-6);
      CHECK(r.rel_error < 1e-5);
      CHECK(r.checked > coords.size() / 2);
    }
  }

  SUBCASE("stale traces are rejected") {
    const ForwardTrace t = forward(m, x);
    m.mutable_parameters();
    ModelGradients g(m);
    CHECK_THROWS_AS(backward(m, t, u, g), Error);
  }
}

TEST_CASE("checkpoint round trip") {
  BackboneModel m(small_spec(), 11);
  std::stringstream buf;
  m.save(buf);
  const BackboneModel r = BackboneModel::load(buf);
  CHECK(r.spec().channels == m.spec().channels);
  const auto a = m.parameters(), b = r.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::equal(a[i].begin(), a[i].end(), b[i].begin(), b[i].end()));

  std::stringstream bad("garbage");
  CHECK_THROWS_AS(BackboneModel::load(bad), Error);
  const std::string text = buf.str();
  std::stringstream trunc(text.substr(0, text.size() * 2 / 3));
  CHECK_THROWS_AS(BackboneModel::load(trunc), Error);
}

TEST_CASE("seeded initialization") {
  BackboneModel a(small_spec(), 1), b(small_spec(), 1), c(small_spec(), 2);
  CHECK(a.parameters()[0][0] == b.parameters()[0][0]);
  CHECK(a.parameters()[0][0] != c.parameters()[0][0]);
  const auto& w = a.stages()[1].weight;
  const double bound = std::sqrt(6.0 / 4.0);
  for (double v : w.values()) CHECK(std::fabs(v) <= bound);
}
