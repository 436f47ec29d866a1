#include "udsx/kernels.hpp"

namespace udsx::kernels {
namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

double sqdist_scalar(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

void pool_pairs_scalar(const double* in, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = 0.5 * (in[2 * i] + in[2 * i + 1]);
}

void relu_scalar(double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] = x[i] <= 0.0 ? 0.0 : x[i];
}

void relu_mask_scalar(const double* x, double* g, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) g[i] = x[i] > 0.0 ? g[i] : 0.0;
}

double sum_scalar(const double* x, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{"scalar",          dot_scalar,       axpy_scalar, sqdist_scalar,
                                 pool_pairs_scalar, relu_scalar,      relu_mask_scalar,
                                 sum_scalar};
  return table;
}

}  // namespace udsx::kernels
