#include <cstdlib>
#include <string_view>

#include "udsx/kernels.hpp"

namespace udsx::kernels {

#ifndef UDSX_HAVE_AVX2
const KernelTable* avx2_table() { return nullptr; }
#endif

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

namespace {

const KernelTable& resolve() {
  if (const char* env = std::getenv("UDSX_SIMD"); env && std::string_view(env) == "scalar")
    return scalar_table();
  if (const KernelTable* t = avx2_table(); t && cpu_has_avx2()) return *t;
  return scalar_table();
}

}  // namespace

const KernelTable& active() {
  static const KernelTable& table = resolve();
  return table;
}

}  // namespace udsx::kernels
