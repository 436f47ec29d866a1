#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "udsx/error.hpp"
#include "udsx/pste.hpp"

using namespace udsx;

namespace {

using Idx = std::vector<std::size_t>;

// Rank by mean descending with index tie-break, take ranks [floor(lo C), floor(hi C)).
Idx sort_oracle(const Vector& feature, std::size_t c, std::size_t s, double lo, double hi) {
  std::vector<std::pair<double, std::size_t>> keyed;
  for (std::size_t i = 0; i < c; ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < s; ++j) m += feature[i * s + j];
    keyed.emplace_back(-m / double(s), i);
  }
  std::sort(keyed.begin(), keyed.end());
  Idx out;
  const auto a = std::size_t(std::floor(lo * double(c))), b = std::size_t(std::floor(hi * double(c)));
  for (std::size_t r = a; r < b; ++r) out.push_back(keyed[r].second);
  std::sort(out.begin(), out.end());
  return out;
}

DomainStats stats_with_variance(const Vector& var, std::size_t spatial) {
  DomainStats s(1, {{var.size(), spatial}});
  s.register_domain(0);
  // Two samples m +- sqrt(v) give population variance v exactly for these inputs.
  for (double sign : {-1.0, 1.0}) {
    Vector f(var.size() * spatial);
    for (std::size_t c = 0; c < var.size(); ++c)
      for (std::size_t j = 0; j < spatial; ++j) f[c * spatial + j] = sign * std::sqrt(var[c]);
    s.update_channel_variance(0, 0, f);
  }
  return s;
}

}  // namespace

TEST_CASE("candidate layer schedule") {
  PsteConfig cfg;
  CHECK(candidate_layers(cfg, 0) == Idx{0, 1, 2});
  CHECK(candidate_layers(cfg, 45) == Idx{0, 1, 2, 3});
  CHECK(candidate_layers(cfg, 60) == Idx{0, 1, 2, 3, 4});
  CHECK(candidate_layers(cfg, 500) == Idx{0, 1, 2, 3, 4});
  for (int t = 0; t < 100; ++t) {
    const auto a = candidate_layers(cfg, t), b = candidate_layers(cfg, t + 1);
    CHECK(a.size() >= cfg.min_width);
    CHECK(a.size() <= b.size());
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
  CHECK_THROWS_AS(candidate_layers(cfg, -1), Error);

  PsteConfig step = cfg;
  step.schedule = PteSchedule::Step;
  CHECK(candidate_layers(step, 45) == Idx{0, 1, 2});
  CHECK(candidate_layers(step, 60) == Idx{0, 1, 2, 3, 4});

  PsteConfig custom;
  custom.layers = {1, 3, 4};
  custom.min_width = 1;
  custom.horizon_epochs = 10;
  CHECK(candidate_layers(custom, 0) == Idx{1});
  CHECK(candidate_layers(custom, 5) == Idx{1, 3});
  CHECK(candidate_layers(custom, 10) == Idx{1, 3, 4});
}

TEST_CASE("config validation") {
  PsteConfig c;
  CHECK_NOTHROW(c.validate());
  c.min_width = 6;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.min_width = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.horizon_epochs = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.strata_lo = 0.7;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("layer selection") {
  Rng rng(1);
  const Idx one{0};
  CHECK(select_layer(one, rng) == 0);
  CHECK_THROWS_AS(select_layer(Idx{}, rng), Error);

  const Idx cands{0, 1, 2};
  Rng a(42), b(42);
  for (int i = 0; i < 20; ++i) CHECK(select_layer(cands, a) == select_layer(cands, b));

  std::vector<int> counts(3, 0);
  const int n = 30000;
  for (int i = 0; i < n; ++i) ++counts[select_layer(cands, rng)];
  const double sd = std::sqrt(n * (1.0 / 3) * (2.0 / 3));
  for (int c : counts) CHECK(std::fabs(c - n / 3.0) <= 3.0 * sd);
}

TEST_CASE("activation-based stratification examples") {
  const Vector means{0.9, 0.1, 0.5, 0.7, 0.3, 0.8, 0.2, 0.6};
  CHECK(stratify_channels(means, {8, 1}, 3.0 / 8, 5.0 / 8) == Idx{2, 7});
  CHECK(stratify_channels(Vector(8 * 3, 1.25), {8, 3}, 3.0 / 8, 5.0 / 8) == Idx{3, 4});
  CHECK(stratify_channels(Vector{4, 3, 2, 1}, {4, 1}, 3.0 / 8, 5.0 / 8).size() == 1);
  CHECK(strata_size(4, 3.0 / 8, 5.0 / 8) == 1);
  CHECK(strata_size(2, 3.0 / 8, 5.0 / 8) == 1);
  CHECK(strata_size(1, 3.0 / 8, 5.0 / 8) == 0);
  CHECK(stratify_channels(Vector{1, 2}, {1, 2}, 3.0 / 8, 5.0 / 8).empty());
  CHECK_THROWS_AS(stratify_channels(Vector(5), {2, 3}, 0.3, 0.6), Error);
}

TEST_CASE("stratification matches the sort oracle") {
  Rng rng(2);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t c = 1 + rng() % 40, s = 1 + rng() % 9;
    Vector f(c * s);
    switch (t % 3) {
      case 0:
        for (auto& v : f) v = standard_normal(rng);
        break;
      case 1:  // all ties
        std::fill(f.begin(), f.end(), double(rng() % 5));
        break;
      default:  // partial ties: few distinct integer rows
        for (std::size_t i = 0; i < c; ++i) {
          const double v = double(rng() % 3);
          std::fill(f.begin() + i * s, f.begin() + (i + 1) * s, v);
        }
    }
    const auto got = stratify_channels(f, {c, s}, 3.0 / 8, 5.0 / 8);
    REQUIRE(got == sort_oracle(f, c, s, 3.0 / 8, 5.0 / 8));
    REQUIRE(got.size() == strata_size(c, 3.0 / 8, 5.0 / 8));
  }
}

TEST_CASE("expansion touches only the selected channels") {
  Rng rng(3);
  const std::size_t c = 6, s = 5;
  const DomainStats stats = stats_with_variance({1, 2, 3, 4, 5, 6}, s);
  Vector f(c * s);
  for (auto& v : f) v = standard_normal(rng);
  const Idx chosen{1, 4};
  const Vector out = apply_expansion(f, {c, s}, 0, 0, stats, chosen, rng);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const bool sel = ch == 1 || ch == 4;
    const double d0 = out[ch * s] - f[ch * s];
    for (std::size_t j = 0; j < s; ++j) {
      if (!sel) {
        CHECK(out[ch * s + j] == f[ch * s + j]);
      } else {
        CHECK(out[ch * s + j] - f[ch * s + j] == doctest::Approx(d0).epsilon(1e-12));
      }
    }
    if (sel) CHECK(d0 != 0.0);
  }

  CHECK(apply_expansion(f, {c, s}, 0, 0, stats, Idx{}, rng) == f);
  const DomainStats zero = stats_with_variance(Vector(c, 0.0), s);
  CHECK(apply_expansion(f, {c, s}, 0, 0, zero, Idx{0, 1, 2}, rng) == f);
  CHECK_THROWS_AS(apply_expansion(f, {c, s}, 7, 0, stats, chosen, rng), Error);
  CHECK_THROWS_AS(apply_expansion(f, {c, s}, 0, 0, stats, Idx{6}, rng), Error);
}

TEST_CASE("expansion noise has the channel variance") {
  Rng rng(4);
  const DomainStats stats = stats_with_variance({4.0}, 1);
  double ss = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const Vector out = apply_expansion(Vector{0.0}, {1, 1}, 0, 0, stats, Idx{0}, rng);
    ss += out[0] * out[0];
  }
  const double sd = std::sqrt(ss / n);
  CHECK(sd >= 1.9);
  CHECK(sd <= 2.1);
}

TEST_CASE("per-element noise varies across positions") {
  Rng rng(5);
  const DomainStats stats = stats_with_variance({1.0, 1.0}, 4);
  const Vector out = apply_expansion(Vector(8, 0.0), {2, 4}, 0, 0, stats, Idx{1}, rng, true);
  for (std::size_t j = 0; j < 4; ++j) CHECK(out[j] == 0.0);
  CHECK(out[4] != out[5]);
}
