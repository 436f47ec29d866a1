#pragma once
// Deterministic multi-domain synthetic "identity" images. Each class has a
// prototype pattern with coarse colour regions; each domain applies its own
// per-channel gain and offset and its own noise colour covariance, which is
// what separates the domains. Noise has a per-pixel part and a per-sample part
// that is constant over each coarse cell (it does not average away).

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "udsx/matrix.hpp"

namespace udsx {

struct SynthSpec {
  int n_domains = 4;
  int n_classes = 20;
  int samples_per_cell = 8;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 16;
  std::uint64_t prototype_seed = 1;
  // Prototypes are drawn on a coarse grid (cells of block_h x block_w pixels)
  // plus a fine-detail component of amplitude `detail`.
  std::size_t block_h = 4;
  std::size_t block_w = 8;
  double detail = 0.3;
  // Domain style: per-channel gain exp(style_scale * N(0,1)), per-channel
  // offset style_shift * N(0,1), noise multiplier exp(noise_spread * N(0,1)).
  double style_scale = 0.3;
  double style_shift = 0.6;
  double noise_spread = 0.3;
  double sigma = 0.6;       // per-pixel noise
  double cell_sigma = 0.0;  // per-sample, per-coarse-cell noise
  // Fraction of the noise variance concentrated on one random colour
  // direction per domain (0 = isotropic).
  double noise_anisotropy = 0.0;
  int holdout_domain = -1;  // -1 = last domain

  int holdout() const { return holdout_domain < 0 ? n_domains - 1 : holdout_domain; }
  void validate() const;
};

enum class Split : std::uint8_t { Train = 0, Query = 1, Gallery = 2 };

struct Record {
  int domain = 0;
  int label = 0;
  Split split = Split::Train;
  int camera = -1;  // unused for synthetic data
  Vector pixels;    // channels x height x width, row-major

  bool operator==(const Record&) const = default;
};

struct Dataset {
  int n_domains = 0;
  int n_classes = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  int holdout_domain = -1;
  std::vector<Record> records;

  std::size_t pixel_count() const { return channels * height * width; }
  std::vector<std::size_t> indices(Split split) const;
  bool operator==(const Dataset&) const = default;
};

struct DomainStyle {
  Vector gain;
  Vector offset;
  double noise = 1.0;
  Matrix noise_mix;  // channels x channels, noise = noise_mix * N(0, I)
};

Dataset generate(const SynthSpec& spec, std::uint64_t seed);

// Styles the generator would use for (spec, seed); exposed for tests.
std::vector<DomainStyle> domain_styles(const SynthSpec& spec, std::uint64_t seed);
std::vector<Vector> class_prototypes(const SynthSpec& spec);

// Binary layout (little endian):
//   8 bytes  magic "UDSXDATA"
//   u32      version (1)
//   u32 x5   n_domains, n_classes, channels, height, width
//   i32      holdout domain
//   u64      record count
//   u8       dtype (1 = float64)
//   records: i32 domain, i32 label, u8 split, i32 camera, f64[channels*height*width]
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_dataset(const Dataset& data);
Dataset deserialize_dataset(const std::vector<std::uint8_t>& bytes);

// FNV-1a 64 over the serialized bytes.
std::uint64_t dataset_checksum(const Dataset& data);

struct NearestCentroidReport {
  double within_domain = 0.0;  // mean over domains, fit on even samples, test on odd
  double cross_domain = 0.0;   // fit on even samples of a, test on odd samples of b != a
};

NearestCentroidReport nearest_centroid_accuracy(const Dataset& data);

}  // namespace udsx
