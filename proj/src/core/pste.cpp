#include "udsx/pste.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "udsx/error.hpp"
#include "udsx/kernels.hpp"

namespace udsx {

void PsteConfig::validate() const {
  require(!layers.empty(), ErrorKind::Config, "pste.layers must not be empty");
  require(min_width >= 1, ErrorKind::Config, "pste.min_width must be >= 1");
  require(min_width <= layers.size(), ErrorKind::Config, "pste.min_width must not exceed the number of layers");
  require(horizon_epochs >= 1, ErrorKind::Config, "pste.horizon_epochs must be >= 1");
  require(strata_lo >= 0.0 && strata_lo < strata_hi && strata_hi <= 1.0, ErrorKind::Config,
          "pste strata must satisfy 0 <= lo < hi <= 1");
}

std::vector<std::size_t> candidate_layers(const PsteConfig& cfg, int epoch) {
  require(epoch >= 0, ErrorKind::Config, "candidate_layers: epoch must be >= 0");
  const std::size_t last = cfg.layers.size() - 1;
  double progress = 0.0;
  if (cfg.schedule == PteSchedule::Linear)
    progress = std::min(static_cast<double>(epoch) / cfg.horizon_epochs, 1.0);
  else
    progress = std::min(epoch / cfg.horizon_epochs, 1);
  std::size_t l = static_cast<std::size_t>(std::floor(static_cast<double>(last) * progress));
  l = std::max(l, cfg.min_width - 1);
  l = std::min(l, last);
  return {cfg.layers.begin(), cfg.layers.begin() + static_cast<std::ptrdiff_t>(l + 1)};
}

std::size_t select_layer(std::span<const std::size_t> candidates, Rng& rng) {
  require(!candidates.empty(), ErrorKind::Config, "select_layer: empty candidate set");
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  return candidates[pick(rng)];
}

std::size_t strata_size(std::size_t channels, double lo, double hi) {
  const auto a = static_cast<std::size_t>(std::floor(lo * static_cast<double>(channels)));
  const auto b = static_cast<std::size_t>(std::floor(hi * static_cast<double>(channels)));
  return b > a ? b - a : 0;
}

std::vector<std::size_t> stratify_channels(std::span<const double> feature, const LayerShape& shape, double lo,
                                           double hi) {
  require(feature.size() == shape.channels * shape.spatial, ErrorKind::Shape,
          "stratify_channels: feature size does not match layer shape");
  const std::size_t c = shape.channels;
  Vector means(c);
  for (std::size_t i = 0; i < c; ++i)
    means[i] = kernels::sum(feature.data() + i * shape.spatial, shape.spatial) / static_cast<double>(shape.spatial);
  std::vector<std::size_t> order(c);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return means[a] > means[b]; });

  const auto first = static_cast<std::size_t>(std::floor(lo * static_cast<double>(c)));
  const auto last = static_cast<std::size_t>(std::floor(hi * static_cast<double>(c)));
  std::vector<std::size_t> picked;
  for (std::size_t r = first; r < last && r < c; ++r) picked.push_back(order[r]);
  std::sort(picked.begin(), picked.end());
  return picked;
}

Vector apply_expansion_inplace(std::span<double> feature, const LayerShape& shape, int domain, std::size_t layer,
                               const DomainStats& stats, std::span<const std::size_t> channels, Rng& rng,
                               bool per_element) {
  require(feature.size() == shape.channels * shape.spatial, ErrorKind::Shape,
          "apply_expansion: feature size does not match layer shape");
  const Vector var = stats.channel_variance(domain, layer).variance();
  require(var.size() == shape.channels, ErrorKind::Shape, "apply_expansion: variance/channel count mismatch");
  Vector noise(feature.size(), 0.0);
  for (std::size_t c : channels) {
    require(c < shape.channels, ErrorKind::Shape, "apply_expansion: channel index out of range");
    const double sd = std::sqrt(var[c]);
    double* row = noise.data() + c * shape.spatial;
    if (per_element) {
      for (std::size_t s = 0; s < shape.spatial; ++s) row[s] = sd * standard_normal(rng);
    } else {
      const double v = sd * standard_normal(rng);
      std::fill(row, row + shape.spatial, v);
    }
    double* out = feature.data() + c * shape.spatial;
    for (std::size_t s = 0; s < shape.spatial; ++s) out[s] += row[s];
  }
  return noise;
}

Vector apply_expansion(std::span<const double> feature, const LayerShape& shape, int domain, std::size_t layer,
                       const DomainStats& stats, std::span<const std::size_t> channels, Rng& rng, bool per_element) {
  Vector out(feature.begin(), feature.end());
  apply_expansion_inplace(out, shape, domain, layer, stats, channels, rng, per_element);
  return out;
}

}  // namespace udsx
