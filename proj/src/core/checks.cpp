#include "udsx/checks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "udsx/csr.hpp"
#include "udsx/harness.hpp"
#include "udsx/rng.hpp"
#include "udsx/sem_losses.hpp"

namespace udsx {

FdReport fd_compare(const std::function<double()>& loss, std::span<double* const> coords,
                    std::span<const double> analytic, double h, double kink_tol) {
  FdReport rep;
  const double l0 = loss();
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    double* x = coords[i];
    const double saved = *x;
    *x = saved + h;
    const double lp = loss();
    *x = saved - h;
    const double lm = loss();
    *x = saved;
    const double fwd = (lp - l0) / h, bwd = (l0 - lm) / h;
    if (std::fabs(fwd - bwd) > kink_tol * (std::fabs(fwd) + std::fabs(bwd)) + 1e-7) {
      ++rep.skipped;
      continue;
    }
    const double num = (lp - lm) / (2.0 * h);
    diff2 += (num - analytic[i]) * (num - analytic[i]);
    a2 += analytic[i] * analytic[i];
    n2 += num * num;
    ++rep.checked;
  }
  const double scale = std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
  rep.rel_error = std::sqrt(diff2) / scale;
  return rep;
}

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (auto& v : m.values()) v = scale * standard_normal(rng);
  return m;
}

Matrix random_psd(std::size_t n, Rng& rng) {
  const Matrix a = random_matrix(n, n, rng, 1.0 / std::sqrt(static_cast<double>(n)));
  Matrix s(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += a(i, k) * a(j, k);
      s(i, j) = acc;
    }
  return s;
}

std::size_t uniform_size(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

struct Tally {
  CheckResult r;
  void add(const FdReport& f) {
    ++r.instances;
    r.skipped += f.skipped;
    r.worst = std::max(r.worst, f.rel_error);
    if (!(f.rel_error < r.tolerance) || f.checked == 0) ++r.failures;
  }
};

void append(std::vector<double*>& coords, std::vector<double>& analytic, std::span<double> x,
            std::span<const double> g) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    coords.push_back(&x[i]);
    analytic.push_back(g[i]);
  }
}

// Classifier head instance shared by the cross-entropy and DEX checks.
template <class Loss>
FdReport head_instance(Rng& rng, const Loss& loss, double h) {
  const std::size_t c = uniform_size(rng, 2, 10), d = uniform_size(rng, 2, 16);
  ClassifierWeights w{random_matrix(c, d, rng)};
  Vector f(d);
  for (auto& v : f) v = standard_normal(rng);
  const int y = static_cast<int>(uniform_size(rng, 0, c - 1));
  const Matrix sigma = random_psd(d, rng);
  const double lambda = uniform(rng, 0.0, 20.0);
  const LossValueWithGrads g = loss(w, f, y, sigma, lambda);
  std::vector<double*> coords;
  std::vector<double> analytic;
  append(coords, analytic, f, g.grad_embedding);
  append(coords, analytic, w.w.values(), g.grad_weights.values());
  return fd_compare([&] { return loss(w, f, y, sigma, lambda).value; }, coords, analytic, h);
}

StreamBatch random_stream_batch(Rng& rng) {
  const std::size_t p = uniform_size(rng, 2, 5), k = uniform_size(rng, 2, 4), d = uniform_size(rng, 2, 16);
  StreamBatch b;
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      b.labels.push_back(static_cast<int>(i));
      b.domains.push_back(static_cast<int>(j % 2));
    }
  b.f_dex = random_matrix(p * k, d, rng);
  b.f_pste = b.f_dex;
  for (auto& v : b.f_pste.values()) v += 0.5 * standard_normal(rng);
  return b;
}

template <class Loss>
FdReport pair_instance(Rng& rng, const Loss& loss, double h) {
  StreamBatch b = random_stream_batch(rng);
  const double margin = uniform(rng, 0.0, 1.0);
  const PairLoss g = loss(b, margin);
  std::vector<double*> coords;
  std::vector<double> analytic;
  append(coords, analytic, b.f_dex.values(), g.grad_dex.values());
  append(coords, analytic, b.f_pste.values(), g.grad_pste.values());
  return fd_compare([&] { return loss(b, margin).value; }, coords, analytic, h);
}

template <class Loss>
FdReport single_instance(Rng& rng, const Loss& loss, double h) {
  StreamBatch b = random_stream_batch(rng);
  const double margin = uniform(rng, 0.0, 1.0);
  const SingleLoss g = loss(b.f_dex, b.labels, margin);
  std::vector<double*> coords;
  std::vector<double> analytic;
  append(coords, analytic, b.f_dex.values(), g.grad.values());
  return fd_compare([&] { return loss(b.f_dex, b.labels, margin).value; }, coords, analytic, h);
}

FdReport model_instance(Rng& rng, std::size_t index, double h) {
  SynthSpec ss;
  ss.n_domains = 3;
  ss.n_classes = 4;
  ss.samples_per_cell = 4;
  ss.height = 8;
  ss.width = 4;
  ss.block_h = 2;
  ss.block_w = 2;
  ss.sigma = 0.5;
  const Dataset data = generate(ss, rng());

  static const Mode modes[] = {Mode::Udsx, Mode::DexOnly, Mode::PsteOnly, Mode::DexNaive, Mode::DexDsd, Mode::DexDsdPste};
  TrainConfig cfg;
  cfg.mode = modes[index % 6];
  cfg.channels = {4, 6, 8};
  cfg.pste.layers = {0, 1, 2};
  cfg.pste.min_width = 2;
  cfg.pste.horizon_epochs = 10;
  cfg.cold_start = 2;
  cfg.lambda = uniform(rng, 0.0, 20.0);
  cfg.beta1 = uniform(rng, 0.5, 1.5);
  cfg.beta2 = uniform(rng, 0.5, 1.5);
  cfg.seed = rng();

  BackboneModel model = make_model(data, cfg);
  DomainStats stats = make_stats(model, data, cfg);
  for (std::size_t i : data.indices(Split::Train)) {
    const Record& r = data.records[i];
    const ForwardTrace t = forward(model, r.pixels);
    stats.update_covariance(r.domain, t.embedding);
    for (std::size_t k = 0; k < t.outputs.size(); ++k) stats.update_channel_variance(r.domain, k, t.outputs[k]);
  }
  PkSampler sampler(data, 3, 2);
  const Batch batch = sampler.next(rng);
  const int epoch = static_cast<int>(uniform_size(rng, 0, 15));
  const std::uint64_t step_seed = rng();

  const StepOutcome out = compute_step(model, batch, stats, cfg, epoch, step_seed);
  std::vector<double*> coords;
  std::vector<double> analytic;
  const auto params = model.mutable_parameters();
  const auto grads = out.grads.blocks();
  for (std::size_t b = 0; b < params.size(); ++b) append(coords, analytic, params[b], grads[b]);
  return fd_compare([&] { return compute_step(model, batch, stats, cfg, epoch, step_seed).report.udsx; }, coords,
                    analytic, h);
}

}  // namespace

std::vector<CheckResult> gradient_suite(std::uint64_t seed, const GradSuiteOptions& opts) {
  std::vector<CheckResult> out;
  auto run = [&](const std::string& name, std::uint64_t tag, const auto& instance) {
    Tally t;
    t.r.name = name;
    t.r.tolerance = opts.tolerance;
    Rng rng(derive_seed(seed, {tag}));
    for (std::size_t i = 0; i < opts.instances; ++i) t.add(instance(rng, i, opts.h));
    out.push_back(t.r);
  };
  run("grad.cross_entropy", 1, [](Rng& rng, std::size_t, double h) {
    return head_instance(rng, [](const ClassifierWeights& w, std::span<const double> f, int y, const Matrix&, double) {
      return cross_entropy(w, f, y);
    }, h);
  });
  run("grad.dex_loss", 2, [](Rng& rng, std::size_t, double h) {
    return head_instance(rng, [](const ClassifierWeights& w, std::span<const double> f, int y, const Matrix& s,
                                 double lambda) { return dex_loss(w, f, y, s, DexConfig{lambda, false}); }, h);
  });
  run("grad.csp", 3, [](Rng& rng, std::size_t, double h) {
    return pair_instance(rng, [](const StreamBatch& b, double) { return csp_loss(b); }, h);
  });
  run("grad.csc", 4, [](Rng& rng, std::size_t, double h) {
    return pair_instance(rng, [](const StreamBatch& b, double) { return csc_loss(b); }, h);
  });
  run("grad.cst", 5, [](Rng& rng, std::size_t, double h) {
    return pair_instance(rng, [](const StreamBatch& b, double margin) { return cst_loss(b, margin); }, h);
  });
  run("grad.center", 6, [](Rng& rng, std::size_t, double h) {
    return single_instance(rng, [](const Matrix& f, std::span<const int> y, double) { return center_loss(f, y); }, h);
  });
  run("grad.batch_hard_triplet", 7, [](Rng& rng, std::size_t, double h) {
    return single_instance(rng, [](const Matrix& f, std::span<const int> y, double margin) {
      return batch_hard_triplet(f, y, margin);
    }, h);
  });
  run("grad.model_step", 8, [](Rng& rng, std::size_t i, double h) { return model_instance(rng, i, h); });
  return out;
}

CheckResult jensen_suite(std::uint64_t seed, const BoundSuiteOptions& opts) {
  CheckResult r;
  r.name = "bound.jensen";
  r.tolerance = opts.stderr_factor;
  r.worst = -std::numeric_limits<double>::infinity();
  Rng rng(derive_seed(seed, {9}));
  for (std::size_t i = 0; i < opts.instances; ++i) {
    const std::size_t c = uniform_size(rng, 2, 10), d = uniform_size(rng, 2, 16);
    const ClassifierWeights w{random_matrix(c, d, rng, 1.0 / std::sqrt(static_cast<double>(d)))};
    Vector f(d);
    for (auto& v : f) v = standard_normal(rng);
    const int y = static_cast<int>(uniform_size(rng, 0, c - 1));
    const Matrix sigma = random_psd(d, rng);
    const double lambda = uniform(rng, 0.0, 50.0);
    const double bound = dex_loss(w, f, y, sigma, DexConfig{lambda, false}).value;
    const MonteCarloEstimate mc = monte_carlo_l_infinity(w, f, y, sigma, lambda, opts.samples, rng());
    // Excess of the estimate over the bound, in standard errors.
    const double z = (mc.mean - bound) / std::max(mc.stderr_, 1e-300);
    r.worst = std::max(r.worst, z);
    ++r.instances;
    if (mc.mean > bound + opts.stderr_factor * mc.stderr_) ++r.failures;
  }
  return r;
}

std::string format_check(const CheckResult& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s %s: %zu/%zu instances ok, worst %.3e (limit %.3e)", r.passed() ? "PASS" : "FAIL",
                r.name.c_str(), r.instances - r.failures, r.instances, r.worst, r.tolerance);
  std::string out = buf;
  if (r.skipped) out += ", " + std::to_string(r.skipped) + " kink coordinates skipped";
  return out;
}

}  // namespace udsx
