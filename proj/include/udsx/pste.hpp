#pragma once
// Explicit semantic expansion: a layer schedule that widens from early to late
// taps over training, activation-quantile channel selection, and additive
// per-channel Gaussian noise drawn from the domain's channel variances.

#include <cstddef>
#include <span>
#include <vector>

#include "udsx/domain_stats.hpp"
#include "udsx/rng.hpp"

namespace udsx {

enum class PteSchedule { Linear, Step };

struct PsteConfig {
  std::vector<std::size_t> layers{0, 1, 2, 3, 4};
  std::size_t min_width = 3;
  int horizon_epochs = 60;
  double strata_lo = 3.0 / 8.0;
  double strata_hi = 5.0 / 8.0;
  bool enabled = true;
  PteSchedule schedule = PteSchedule::Linear;
  // Independent draw per (channel, position) instead of one per channel.
  bool per_element = false;

  void validate() const;
};

struct PsteDecision {
  int epoch = 0;
  std::size_t layer = 0;
  std::vector<std::size_t> channels;
  Vector perturbation;  // C_k x S_k, zero outside `channels`
};

std::vector<std::size_t> candidate_layers(const PsteConfig& cfg, int epoch);

std::size_t select_layer(std::span<const std::size_t> candidates, Rng& rng);

// Channels whose spatial-mean activation ranks (descending, ties to the lower
// channel index) fall in [floor(lo*C), floor(hi*C)). Returned sorted.
std::vector<std::size_t> stratify_channels(std::span<const double> feature, const LayerShape& shape, double lo,
                                           double hi);

// Number of channels stratify_channels returns for C channels.
std::size_t strata_size(std::size_t channels, double lo, double hi);

// Adds the expansion in place and returns the noise that was added.
Vector apply_expansion_inplace(std::span<double> feature, const LayerShape& shape, int domain, std::size_t layer,
                               const DomainStats& stats, std::span<const std::size_t> channels, Rng& rng,
                               bool per_element = false);

Vector apply_expansion(std::span<const double> feature, const LayerShape& shape, int domain, std::size_t layer,
                       const DomainStats& stats, std::span<const std::size_t> channels, Rng& rng,
                       bool per_element = false);

}  // namespace udsx
