#pragma once
// Self-check suites: central finite differences against every analytic
// gradient, and the Monte-Carlo check that the closed-form DEX loss bounds the
// expected cross-entropy under Gaussian feature augmentation.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace udsx {

struct CheckResult {
  std::string name;
  std::size_t instances = 0;
  std::size_t failures = 0;
  std::size_t skipped = 0;  // coordinates dropped at a kink
  double worst = 0.0;
  double tolerance = 0.0;

  bool passed() const noexcept { return instances > 0 && failures == 0; }
};

struct FdReport {
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

// Central differences of `loss` over the given coordinates. A coordinate whose
// one-sided slopes disagree by more than kink_tol (relative) sits on a
// non-differentiable point of a piecewise-smooth loss and is skipped.
FdReport fd_compare(const std::function<double()>& loss, std::span<double* const> coords,
                    std::span<const double> analytic, double h = 1e-6, double kink_tol = 1e-3);

struct GradSuiteOptions {
  std::size_t instances = 50;
  double h = 1e-6;
  double tolerance = 1e-5;
};

// cross_entropy, dex_loss, dex_loss with frozen offsets, csp, csc, cst, and
// the full dual-stream step in every mode on a small backbone.
std::vector<CheckResult> gradient_suite(std::uint64_t seed, const GradSuiteOptions& opts = {});

struct BoundSuiteOptions {
  std::size_t instances = 200;
  std::size_t samples = 20000;
  double stderr_factor = 4.0;
};

CheckResult jensen_suite(std::uint64_t seed, const BoundSuiteOptions& opts = {});

std::string format_check(const CheckResult& r);

}  // namespace udsx
