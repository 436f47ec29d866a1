#include "udsx/sem_losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "udsx/domain_stats.hpp"
#include "udsx/error.hpp"
#include "udsx/kernels.hpp"
#include "udsx/rng.hpp"

namespace udsx {
namespace {

constexpr double kGammaCorruptTol = 1e-6;

void check_inputs(const ClassifierWeights& w, std::span<const double> f, int y) {
  require(w.classes() >= 2, ErrorKind::Config, "classifier needs at least 2 classes");
  require(f.size() == w.dim(), ErrorKind::Shape,
          "embedding has dim " + std::to_string(f.size()) + ", classifier expects " + std::to_string(w.dim()));
  require(y >= 0 && static_cast<std::size_t>(y) < w.classes(), ErrorKind::Config,
          "label " + std::to_string(y) + " out of range [0, " + std::to_string(w.classes()) + ")");
}

// -log softmax_y(z) with z_j = s_j + offset_j; writes p = softmax(z).
double log_softmax_loss(std::span<const double> s, const double* offset, int y, std::span<double> p) {
  const std::size_t c = s.size();
  double zmax = -INFINITY;
  for (std::size_t j = 0; j < c; ++j) {
    p[j] = offset ? s[j] + offset[j] : s[j];
    zmax = std::max(zmax, p[j]);
  }
  double total = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    p[j] = std::exp(p[j] - zmax);
    total += p[j];
  }
  const double lse = zmax + std::log(total);
  for (std::size_t j = 0; j < c; ++j) p[j] /= total;
  return lse - s[static_cast<std::size_t>(y)];
}

}  // namespace

Vector gamma_terms(const ClassifierWeights& w, int y, const Matrix& sigma, double lambda) {
  require(w.classes() >= 1 && y >= 0 && static_cast<std::size_t>(y) < w.classes(), ErrorKind::Config,
          "gamma_terms: label out of range");
  require(lambda >= 0.0, ErrorKind::Config, "gamma_terms: lambda must be >= 0");
  require(sigma.rows() == w.dim() && sigma.cols() == w.dim(), ErrorKind::Shape,
          "gamma_terms: sigma is " + std::to_string(sigma.rows()) + "x" + std::to_string(sigma.cols()) +
              ", expected " + std::to_string(w.dim()) + "x" + std::to_string(w.dim()));
  Vector gamma(w.classes(), 0.0);
  if (lambda == 0.0) return gamma;
  const auto wy = w.w.row(static_cast<std::size_t>(y));
  Vector diff(w.dim());
  for (std::size_t j = 0; j < w.classes(); ++j) {
    if (j == static_cast<std::size_t>(y)) continue;
    const auto wj = w.w.row(j);
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = wj[i] - wy[i];
    gamma[j] = 0.5 * lambda * quadratic_form(sigma, diff);
  }
  return gamma;
}

double softmax_loss_accumulate(const ClassifierWeights& w, std::span<const double> f, int y, const Matrix* sigma,
                               const DexConfig& cfg, double scale, std::span<double> grad_f, Matrix& grad_w) {
  check_inputs(w, f, y);
  const std::size_t c = w.classes();
  const std::size_t dim = w.dim();
  const std::size_t uy = static_cast<std::size_t>(y);

  Vector s(c), p(c);
  for (std::size_t j = 0; j < c; ++j) s[j] = kernels::dot(w.w.row(j).data(), f.data(), dim);

  const bool use_gamma = sigma != nullptr && cfg.lambda > 0.0;
  Vector gamma;
  Matrix sigma_diff;  // row j = Sigma (w_j - w_y)
  if (use_gamma) {
    require(cfg.lambda >= 0.0, ErrorKind::Config, "dex_loss: lambda must be >= 0");
    require(sigma->rows() == dim && sigma->cols() == dim, ErrorKind::Shape, "dex_loss: sigma shape mismatch");
    gamma.assign(c, 0.0);
    sigma_diff = Matrix(c, dim);
    Vector diff(dim);
    const auto wy = w.w.row(uy);
    for (std::size_t j = 0; j < c; ++j) {
      if (j == uy) continue;
      const auto wj = w.w.row(j);
      for (std::size_t i = 0; i < dim; ++i) diff[i] = wj[i] - wy[i];
      auto u = sigma_diff.row(j);
      for (std::size_t i = 0; i < dim; ++i) u[i] = kernels::dot(sigma->row(i).data(), diff.data(), dim);
      gamma[j] = 0.5 * cfg.lambda * kernels::dot(diff.data(), u.data(), dim);
      if (gamma[j] < -kGammaCorruptTol)
        fail(ErrorKind::Numeric, "dex_loss: negative gamma " + std::to_string(gamma[j]) +
                                     " (covariance statistics are not PSD)");
    }
  } else if (sigma != nullptr) {
    require(cfg.lambda >= 0.0, ErrorKind::Config, "dex_loss: lambda must be >= 0");
    require(sigma->rows() == dim && sigma->cols() == dim, ErrorKind::Shape, "dex_loss: sigma shape mismatch");
  }

  const double value = log_softmax_loss(s, use_gamma ? gamma.data() : nullptr, y, p);
  if (scale == 0.0) return value;

  require(grad_f.size() == dim && grad_w.rows() == c && grad_w.cols() == dim, ErrorKind::Shape,
          "softmax loss: gradient buffer shape mismatch");
  // d/df = sum_j p_j w_j - w_y ; d/dw_j = (p_j - [j == y]) f
  for (std::size_t j = 0; j < c; ++j) {
    const double pj = j == uy ? p[j] - 1.0 : p[j];
    kernels::axpy(scale * pj, w.w.row(j).data(), grad_f.data(), dim);
    kernels::axpy(scale * pj, f.data(), grad_w.row(j).data(), dim);
  }
  if (use_gamma && !cfg.freeze_gamma) {
    // d gamma_j / d w_j = lambda Sigma (w_j - w_y) = -d gamma_j / d w_y
    auto gy = grad_w.row(uy);
    for (std::size_t j = 0; j < c; ++j) {
      if (j == uy) continue;
      const double coef = scale * p[j] * cfg.lambda;
      kernels::axpy(coef, sigma_diff.row(j).data(), grad_w.row(j).data(), dim);
      kernels::axpy(-coef, sigma_diff.row(j).data(), gy.data(), dim);
    }
  }
  return value;
}

LossValueWithGrads cross_entropy(const ClassifierWeights& w, std::span<const double> f, int y) {
  check_inputs(w, f, y);
  LossValueWithGrads out;
  out.grad_embedding.assign(w.dim(), 0.0);
  out.grad_weights = Matrix(w.classes(), w.dim());
  out.value = softmax_loss_accumulate(w, f, y, nullptr, DexConfig{}, 1.0, out.grad_embedding, out.grad_weights);
  return out;
}

LossValueWithGrads dex_loss(const ClassifierWeights& w, std::span<const double> f, int y, const Matrix& sigma,
                            const DexConfig& cfg) {
  check_inputs(w, f, y);
  require(cfg.lambda >= 0.0, ErrorKind::Config, "dex_loss: lambda must be >= 0");
  LossValueWithGrads out;
  out.grad_embedding.assign(w.dim(), 0.0);
  out.grad_weights = Matrix(w.classes(), w.dim());
  out.value = softmax_loss_accumulate(w, f, y, &sigma, cfg, 1.0, out.grad_embedding, out.grad_weights);
  return out;
}

MonteCarloEstimate monte_carlo_l_infinity(const ClassifierWeights& w, std::span<const double> f, int y,
                                          const Matrix& sigma, double lambda, std::size_t n_samples,
                                          std::uint64_t seed) {
  check_inputs(w, f, y);
  require(n_samples >= 100, ErrorKind::Config, "monte_carlo_l_infinity: need at least 100 samples");
  require(lambda >= 0.0, ErrorKind::Config, "monte_carlo_l_infinity: lambda must be >= 0");
  require(sigma.rows() == w.dim() && sigma.cols() == w.dim(), ErrorKind::Shape,
          "monte_carlo_l_infinity: sigma shape mismatch");
  const std::size_t dim = w.dim();
  const std::size_t c = w.classes();

  Matrix chol;
  if (lambda > 0.0) chol = cholesky(sigma);
  const double root = std::sqrt(lambda);

  Rng rng(seed);
  Vector z(dim), ft(dim), s(c), p(c);
  double mean = 0.0, m2 = 0.0;
  for (std::size_t n = 1; n <= n_samples; ++n) {
    std::copy(f.begin(), f.end(), ft.begin());
    if (lambda > 0.0) {
      for (auto& v : z) v = standard_normal(rng);
      for (std::size_t i = 0; i < dim; ++i) ft[i] += root * kernels::dot(chol.row(i).data(), z.data(), i + 1);
    }
    for (std::size_t j = 0; j < c; ++j) s[j] = kernels::dot(w.w.row(j).data(), ft.data(), dim);
    const double v = log_softmax_loss(s, nullptr, y, p);
    const double d = v - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (v - mean);
  }
  const double var = m2 / static_cast<double>(n_samples > 1 ? n_samples - 1 : 1);
  return {mean, std::sqrt(var / static_cast<double>(n_samples))};
}

double max_interclass_weight_distance(const ClassifierWeights& w) {
  require(w.classes() >= 2, ErrorKind::Config, "max_interclass_weight_distance: need at least 2 classes");
  double best = 0.0;
  for (std::size_t i = 0; i < w.classes(); ++i)
    for (std::size_t j = i + 1; j < w.classes(); ++j)
      best = std::max(best, kernels::sqdist(w.w.row(i).data(), w.w.row(j).data(), w.dim()));
  return std::sqrt(best);
}

}  // namespace udsx
