#pragma once
// Data-parallel inner loops used by the backbone, the losses and the
// retrieval metrics. Every kernel has a scalar reference version; an AVX2+FMA
// table is built when the compiler supports it and picked at runtime when the
// CPU does. Set UDSX_SIMD=scalar to force the reference table.

#include <cstddef>
#include <string_view>

namespace udsx::kernels {

struct KernelTable {
  std::string_view name;
  // sum_i a[i] * b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // sum_i (a[i] - b[i])^2
  double (*sqdist)(const double* a, const double* b, std::size_t n);
  // out[i] = 0.5 * (in[2i] + in[2i+1]), n = number of outputs
  void (*pool_pairs)(const double* in, double* out, std::size_t n);
  // in-place max(x, 0); NaN passes through
  void (*relu)(double* x, std::size_t n);
  // g[i] = x[i] > 0 ? g[i] : 0
  void (*relu_mask)(const double* x, double* g, std::size_t n);
  // sum_i x[i]
  double (*sum)(const double* x, std::size_t n);
};

const KernelTable& scalar_table();

// nullptr when the AVX2 table was not compiled in.
const KernelTable* avx2_table();

bool cpu_has_avx2();

// Resolved once per process.
const KernelTable& active();

// Convenience wrappers over active().
inline double dot(const double* a, const double* b, std::size_t n) { return active().dot(a, b, n); }
inline void axpy(double alpha, const double* x, double* y, std::size_t n) { active().axpy(alpha, x, y, n); }
inline double sqdist(const double* a, const double* b, std::size_t n) { return active().sqdist(a, b, n); }
inline double sum(const double* x, std::size_t n) { return active().sum(x, n); }

}  // namespace udsx::kernels
