#pragma once
// Running second-order statistics per domain: the embedding covariance used by
// the DEX loss and the per-channel variances used to sample PSTE perturbations.

#include <cstddef>
#include <iosfwd>
#include <map>
#include <span>
#include <utility>

#include "udsx/matrix.hpp"

namespace udsx {

// Streaming mean and comoment (Welford). With momentum > 0 the statistics
// become an exponential moving average instead of exact population values.
class RunningCovariance {
 public:
  explicit RunningCovariance(std::size_t dim = 0, double momentum = 0.0);

  void update(std::span<const double> x);

  std::size_t dim() const noexcept { return dim_; }
  std::size_t count() const noexcept { return count_; }
  const Vector& mean() const noexcept { return mean_; }
  const Matrix& comoment() const noexcept { return comoment_; }

  // Population covariance (comoment / count); zero matrix when count == 0.
  Matrix covariance() const;

  void restore(std::size_t count, Vector mean, Matrix comoment);

 private:
  std::size_t dim_;
  double momentum_;
  std::size_t count_ = 0;
  Vector mean_;
  Matrix comoment_;  // in momentum mode this holds the covariance itself
  Vector delta_;
};

class RunningChannelVariance {
 public:
  explicit RunningChannelVariance(std::size_t channels = 0, double momentum = 0.0);

  // One sample = the vector of per-channel spatial means.
  void update(std::span<const double> channel_means);

  std::size_t channels() const noexcept { return mean_.size(); }
  std::size_t count() const noexcept { return count_; }
  const Vector& mean() const noexcept { return mean_; }
  Vector variance() const;

  void restore(std::size_t count, Vector mean, Vector m2);
  const Vector& m2() const noexcept { return m2_; }

 private:
  double momentum_;
  std::size_t count_ = 0;
  Vector mean_;
  Vector m2_;
};

struct LayerShape {
  std::size_t channels = 0;
  std::size_t spatial = 0;
};

class DomainStats {
 public:
  DomainStats() = default;
  DomainStats(std::size_t embedding_dim, std::vector<LayerShape> layers, double momentum = 0.0);

  // Creates empty entries for domain d if not present.
  void register_domain(int d);
  bool has_domain(int d) const { return covariances_.count(d) != 0; }

  void update_covariance(int d, std::span<const double> embedding);
  // feature is C_k x S_k, row-major.
  void update_channel_variance(int d, std::size_t k, std::span<const double> feature);

  const RunningCovariance& covariance(int d) const;
  const RunningChannelVariance& channel_variance(int d, std::size_t k) const;

  std::size_t embedding_dim() const noexcept { return dim_; }
  const std::vector<LayerShape>& layers() const noexcept { return layers_; }
  std::vector<int> domains() const;

  // Versioned text snapshot.
  void save(std::ostream& out) const;
  static DomainStats load(std::istream& in);

 private:
  std::size_t dim_ = 0;
  std::vector<LayerShape> layers_;
  double momentum_ = 0.0;
  std::map<int, RunningCovariance> covariances_;
  std::map<std::pair<int, std::size_t>, RunningChannelVariance> channels_;
};

// v^T sigma v.
double quadratic_form(const Matrix& sigma, std::span<const double> v);

// Lower-triangular L with L L^T = a (+ jitter on the diagonal if the plain
// factorization fails). Throws Numeric on failure after jitter.
Matrix cholesky(const Matrix& a, double jitter = 1e-9);

}  // namespace udsx
