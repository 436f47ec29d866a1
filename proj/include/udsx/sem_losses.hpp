#pragma once
// Identity classification losses over a bias-free linear classifier: plain
// cross-entropy and the DEX loss, whose denominator logits are inflated by
// gamma_j = (lambda/2) (w_j - w_y)^T Sigma_d (w_j - w_y). Also a Monte-Carlo
// estimator of the expected cross-entropy under N(f, lambda Sigma_d)
// feature perturbations, which DEX upper-bounds.

#include <cstdint>
#include <span>

#include "udsx/matrix.hpp"

namespace udsx {

// One row per class, no bias.
struct ClassifierWeights {
  Matrix w;

  std::size_t classes() const noexcept { return w.rows(); }
  std::size_t dim() const noexcept { return w.cols(); }
};

struct DexConfig {
  double lambda = 0.0;
  // Treat gamma as a constant w.r.t. w (ablation only).
  bool freeze_gamma = false;
};

struct LossValueWithGrads {
  double value = 0.0;
  Vector grad_embedding;
  Matrix grad_weights;
};

LossValueWithGrads cross_entropy(const ClassifierWeights& w, std::span<const double> f, int y);

Vector gamma_terms(const ClassifierWeights& w, int y, const Matrix& sigma, double lambda);

LossValueWithGrads dex_loss(const ClassifierWeights& w, std::span<const double> f, int y, const Matrix& sigma,
                            const DexConfig& cfg);

// Accumulating forms used by the training loop. They add scale * dL/df into
// grad_f and scale * dL/dw into grad_w and return the unscaled loss value.
// sigma == nullptr means plain cross-entropy.
double softmax_loss_accumulate(const ClassifierWeights& w, std::span<const double> f, int y, const Matrix* sigma,
                               const DexConfig& cfg, double scale, std::span<double> grad_f, Matrix& grad_w);

struct MonteCarloEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
};

MonteCarloEstimate monte_carlo_l_infinity(const ClassifierWeights& w, std::span<const double> f, int y,
                                          const Matrix& sigma, double lambda, std::size_t n_samples,
                                          std::uint64_t seed);

double max_interclass_weight_distance(const ClassifierWeights& w);

}  // namespace udsx
