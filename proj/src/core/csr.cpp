#include "udsx/csr.hpp"

#include <cmath>
#include <map>
#include <string>

#include "udsx/error.hpp"
#include "udsx/kernels.hpp"

namespace udsx {
namespace {

void check_aligned(const StreamBatch& b) {
  const std::size_t m = b.labels.size();
  require(m >= 1, ErrorKind::Config, "stream batch is empty");
  require(b.f_dex.rows() == m && b.f_pste.rows() == m, ErrorKind::Shape,
          "stream batch misaligned: " + std::to_string(b.f_dex.rows()) + " DEX rows, " +
              std::to_string(b.f_pste.rows()) + " PSTE rows, " + std::to_string(m) + " labels");
  require(b.f_dex.cols() == b.f_pste.cols(), ErrorKind::Shape, "stream batch: embedding dims differ");
}

// Per-class means of the rows of f; index by label.
std::map<int, Vector> class_centroids(const Matrix& f, std::span<const int> labels) {
  std::map<int, Vector> sums;
  std::map<int, std::size_t> counts;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& s = sums[labels[i]];
    if (s.empty()) s.assign(f.cols(), 0.0);
    kernels::axpy(1.0, f.row(i).data(), s.data(), f.cols());
    ++counts[labels[i]];
  }
  for (auto& [y, s] : sums) {
    const double inv = 1.0 / static_cast<double>(counts[y]);
    for (auto& v : s) v *= inv;
  }
  return sums;
}

std::map<int, std::size_t> class_counts(std::span<const int> labels) {
  std::map<int, std::size_t> counts;
  for (int y : labels) ++counts[y];
  return counts;
}

// sum_i ||a_i - c_b(y_i)|| / m with gradients into ga (direct) and gb
// (through the centroid of b). a and b may be the same matrix.
double centroid_distance_term(const Matrix& a, const Matrix& b, std::span<const int> labels, double scale,
                              Matrix& ga, Matrix& gb) {
  const std::size_t m = labels.size(), dim = a.cols();
  const auto centroids = class_centroids(b, labels);
  const auto counts = class_counts(labels);
  std::map<int, Vector> unit_sums;
  Vector u(dim);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const Vector& c = centroids.at(labels[i]);
    const double d = std::sqrt(kernels::sqdist(a.row(i).data(), c.data(), dim));
    total += d;
    if (d == 0.0) continue;
    for (std::size_t k = 0; k < dim; ++k) u[k] = (a(i, k) - c[k]) / d;
    kernels::axpy(scale, u.data(), ga.row(i).data(), dim);
    auto& us = unit_sums[labels[i]];
    if (us.empty()) us.assign(dim, 0.0);
    kernels::axpy(1.0, u.data(), us.data(), dim);
  }
  // c_y = mean of b rows in class y, so each b row receives -(1/n_y) sum of u.
  for (std::size_t j = 0; j < m; ++j) {
    auto it = unit_sums.find(labels[j]);
    if (it == unit_sums.end()) continue;
    const double coef = -scale / static_cast<double>(counts.at(labels[j]));
    kernels::axpy(coef, it->second.data(), gb.row(j).data(), dim);
  }
  return total / static_cast<double>(m);
}

void check_triplet_batch(std::span<const int> labels) {
  const auto counts = class_counts(labels);
  require(counts.size() >= 2, ErrorKind::Config, "triplet loss: batch needs at least 2 classes");
  for (const auto& [y, n] : counts)
    require(n >= 2, ErrorKind::Config, "triplet loss: class " + std::to_string(y) + " has fewer than 2 samples");
}

void add_distance_grad(std::span<const double> a, std::span<const double> b, double dist, double coef,
                       std::span<double> ga, std::span<double> gb) {
  if (dist == 0.0) return;
  const double s = coef / dist;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double v = s * (a[k] - b[k]);
    ga[k] += v;
    gb[k] -= v;
  }
}

// One direction of the cross-stream triplet: anchors in `self`, positives in
// `other`, negatives in `self`. Returns the summed hinge.
double mine_direction(const Matrix& self, const Matrix& other, std::span<const int> labels, double margin,
                      double coef, Matrix& gself, Matrix& gother) {
  const std::size_t m = labels.size(), dim = self.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double dpos = -1.0, dneg = INFINITY;
    std::size_t p = 0, n = 0;
    for (std::size_t j = 0; j < m; ++j) {
      if (labels[j] == labels[i]) {
        const double d = std::sqrt(kernels::sqdist(self.row(i).data(), other.row(j).data(), dim));
        if (d > dpos) dpos = d, p = j;
      } else {
        const double d = std::sqrt(kernels::sqdist(self.row(i).data(), self.row(j).data(), dim));
        if (d < dneg) dneg = d, n = j;
      }
    }
    const double h = dpos - dneg + margin;
    if (h <= 0.0) continue;
    total += h;
    add_distance_grad(self.row(i), other.row(p), dpos, coef, gself.row(i), gother.row(p));
    add_distance_grad(self.row(i), self.row(n), dneg, -coef, gself.row(i), gself.row(n));
  }
  return total;
}

}  // namespace

void CsrConfig::validate() const {
  require(psi1 >= 0.0 && psi2 >= 0.0 && psi3 >= 0.0, ErrorKind::Config, "csr weights must be >= 0");
  require(margin >= 0.0, ErrorKind::Config, "csr.margin must be >= 0");
}

double euclidean(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::Shape, "euclidean: dimension mismatch");
  return std::sqrt(kernels::sqdist(a.data(), b.data(), a.size()));
}

PairLoss csp_loss(const StreamBatch& batch) {
  check_aligned(batch);
  const std::size_t m = batch.size(), dim = batch.f_dex.cols();
  PairLoss out{0.0, Matrix(m, dim), Matrix(m, dim)};
  const double inv = 1.0 / static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < dim; ++k) {
      const double d = batch.f_dex(i, k) - batch.f_pste(i, k);
      out.value += std::abs(d);
      const double s = d > 0.0 ? inv : (d < 0.0 ? -inv : 0.0);
      out.grad_dex(i, k) = s;
      out.grad_pste(i, k) = -s;
    }
  }
  out.value *= inv;
  return out;
}

SingleLoss center_loss(const Matrix& f, std::span<const int> labels) {
  require(f.rows() == labels.size() && !labels.empty(), ErrorKind::Shape, "center_loss: rows/labels mismatch");
  SingleLoss out{0.0, Matrix(f.rows(), f.cols())};
  const double inv = 1.0 / static_cast<double>(labels.size());
  out.value = centroid_distance_term(f, f, labels, inv, out.grad, out.grad);
  return out;
}

PairLoss csc_loss(const StreamBatch& batch) {
  check_aligned(batch);
  const std::size_t m = batch.size(), dim = batch.f_dex.cols();
  PairLoss out{0.0, Matrix(m, dim), Matrix(m, dim)};
  const double inv = 1.0 / static_cast<double>(m);
  out.value = centroid_distance_term(batch.f_dex, batch.f_pste, batch.labels, inv, out.grad_dex, out.grad_pste) +
              centroid_distance_term(batch.f_pste, batch.f_dex, batch.labels, inv, out.grad_pste, out.grad_dex);
  return out;
}

double cross_extractor_triplet(std::span<const double> fa, std::span<const double> gp, std::span<const double> fn,
                               double margin) {
  return std::max(0.0, euclidean(fa, gp) - euclidean(fa, fn) + margin);
}

PairLoss cst_loss(const StreamBatch& batch, double margin) {
  check_aligned(batch);
  check_triplet_batch(batch.labels);
  const std::size_t m = batch.size(), dim = batch.f_dex.cols();
  PairLoss out{0.0, Matrix(m, dim), Matrix(m, dim)};
  const double coef = 0.5 / static_cast<double>(m);
  const double hd = mine_direction(batch.f_dex, batch.f_pste, batch.labels, margin, coef, out.grad_dex, out.grad_pste);
  const double hp = mine_direction(batch.f_pste, batch.f_dex, batch.labels, margin, coef, out.grad_pste, out.grad_dex);
  out.value = 0.5 * (hd + hp) / static_cast<double>(m);
  return out;
}

SingleLoss batch_hard_triplet(const Matrix& f, std::span<const int> labels, double margin) {
  require(f.rows() == labels.size(), ErrorKind::Shape, "batch_hard_triplet: rows/labels mismatch");
  check_triplet_batch(labels);
  const std::size_t m = labels.size(), dim = f.cols();
  SingleLoss out{0.0, Matrix(m, dim)};
  const double coef = 1.0 / static_cast<double>(m);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double dpos = -1.0, dneg = INFINITY;
    std::size_t p = 0, n = 0;
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i) continue;
      const double d = std::sqrt(kernels::sqdist(f.row(i).data(), f.row(j).data(), dim));
      if (labels[j] == labels[i]) {
        if (d > dpos) dpos = d, p = j;
      } else if (d < dneg) {
        dneg = d, n = j;
      }
    }
    const double h = dpos - dneg + margin;
    if (h <= 0.0) continue;
    total += h;
    add_distance_grad(f.row(i), f.row(p), dpos, coef, out.grad.row(i), out.grad.row(p));
    add_distance_grad(f.row(i), f.row(n), dneg, -coef, out.grad.row(i), out.grad.row(n));
  }
  out.value = total / static_cast<double>(m);
  return out;
}

CsrBreakdown csr_loss(const StreamBatch& batch, const CsrConfig& cfg) {
  cfg.validate();
  check_aligned(batch);
  const std::size_t m = batch.size(), dim = batch.f_dex.cols();
  CsrBreakdown out;
  out.grad_dex = Matrix(m, dim);
  out.grad_pste = Matrix(m, dim);
  auto add = [&](const PairLoss& l, double w) {
    if (w == 0.0) return;
    kernels::axpy(w, l.grad_dex.data(), out.grad_dex.data(), l.grad_dex.size());
    kernels::axpy(w, l.grad_pste.data(), out.grad_pste.data(), l.grad_pste.size());
  };
  const PairLoss csp = csp_loss(batch);
  const PairLoss csc = csc_loss(batch);
  const PairLoss cst = cst_loss(batch, cfg.margin);
  out.csp = csp.value;
  out.csc = csc.value;
  out.cst = cst.value;
  add(csp, cfg.psi1);
  add(csc, cfg.psi2);
  add(cst, cfg.psi3);
  out.total = cfg.psi1 * out.csp + cfg.psi2 * out.csc + cfg.psi3 * out.cst;
  return out;
}

}  // namespace udsx
