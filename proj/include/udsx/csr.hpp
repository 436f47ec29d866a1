#pragma once
// Contrastive-stream reunification losses. Both streams hold the same samples
// in the same order: row i of f_dex and row i of f_pste are siblings.
// Every loss is mean-reduced over the m samples (or anchors).

#include <span>
#include <vector>

#include "udsx/matrix.hpp"

namespace udsx {

struct StreamBatch {
  std::vector<int> labels;
  std::vector<int> domains;
  Matrix f_dex;
  Matrix f_pste;

  std::size_t size() const noexcept { return labels.size(); }
};

struct CsrConfig {
  double psi1 = 2.0;
  double psi2 = 5e-4;
  double psi3 = 1.0;
  double margin = 0.3;

  void validate() const;
};

struct PairLoss {
  double value = 0.0;
  Matrix grad_dex;
  Matrix grad_pste;
};

struct SingleLoss {
  double value = 0.0;
  Matrix grad;
};

double euclidean(std::span<const double> a, std::span<const double> b);

// mean_i || f_D(x_i) - f_P(x_i) ||_1
PairLoss csp_loss(const StreamBatch& batch);

// mean_i || f(x_i) - c^{y_i} ||_2 with per-class batch centroids.
SingleLoss center_loss(const Matrix& f, std::span<const int> labels);

// Each sample against the class centroid of the opposite stream.
PairLoss csc_loss(const StreamBatch& batch);

// [delta(f(a), g(p)) - delta(f(a), f(n)) + margin]_+
double cross_extractor_triplet(std::span<const double> fa, std::span<const double> gp, std::span<const double> fn,
                               double margin);

// Batch-hard mining with the positive taken from the opposite stream and the
// negative from the anchor's own stream; symmetric over both anchor streams.
PairLoss cst_loss(const StreamBatch& batch, double margin);

// Standard single-stream batch-hard triplet loss.
SingleLoss batch_hard_triplet(const Matrix& f, std::span<const int> labels, double margin);

struct CsrBreakdown {
  double csp = 0.0;
  double csc = 0.0;
  double cst = 0.0;
  double total = 0.0;
  Matrix grad_dex;
  Matrix grad_pste;
};

CsrBreakdown csr_loss(const StreamBatch& batch, const CsrConfig& cfg);

}  // namespace udsx
