#include "udsx/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include "udsx/error.hpp"
#include "udsx/kernels.hpp"
#include "udsx/rng.hpp"

namespace udsx {

void SynthSpec::validate() const {
  require(n_domains >= 2, ErrorKind::Config, "data.domains must be >= 2");
  require(n_classes >= 4, ErrorKind::Config, "data.classes must be >= 4");
  require(samples_per_cell >= 2, ErrorKind::Config, "data.samples_per_cell must be >= 2");
  require(channels >= 1 && height >= 1 && width >= 1, ErrorKind::Config, "data image shape must be positive");
  require(block_h >= 1 && block_w >= 1, ErrorKind::Config, "data.block_h/block_w must be >= 1");
  require(style_scale >= 0.0 && style_shift >= 0.0 && noise_spread >= 0.0 && sigma >= 0.0 && cell_sigma >= 0.0 &&
              detail >= 0.0,
          ErrorKind::Config, "data style parameters must be >= 0");
  require(noise_anisotropy >= 0.0 && noise_anisotropy <= 1.0, ErrorKind::Config,
          "data.noise_anisotropy must be in [0, 1]");
  require(holdout_domain >= -1 && holdout_domain < n_domains, ErrorKind::Config, "data.holdout out of range");
}

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].split == split) out.push_back(i);
  return out;
}

std::vector<Vector> class_prototypes(const SynthSpec& spec) {
  spec.validate();
  const std::size_t gh = (spec.height + spec.block_h - 1) / spec.block_h;
  const std::size_t gw = (spec.width + spec.block_w - 1) / spec.block_w;
  std::vector<Vector> protos;
  for (int y = 0; y < spec.n_classes; ++y) {
    Rng rng(derive_seed(spec.prototype_seed, {0x70726f74, static_cast<std::uint64_t>(y)}));
    Vector coarse(spec.channels * gh * gw);
    for (auto& v : coarse) v = standard_normal(rng);
    Vector p(spec.channels * spec.height * spec.width);
    for (std::size_t c = 0; c < spec.channels; ++c)
      for (std::size_t r = 0; r < spec.height; ++r)
        for (std::size_t q = 0; q < spec.width; ++q)
          p[(c * spec.height + r) * spec.width + q] =
              coarse[(c * gh + r / spec.block_h) * gw + q / spec.block_w] + spec.detail * standard_normal(rng);
    protos.push_back(std::move(p));
  }
  return protos;
}

std::vector<DomainStyle> domain_styles(const SynthSpec& spec, std::uint64_t seed) {
  std::vector<DomainStyle> styles;
  for (int d = 0; d < spec.n_domains; ++d) {
    Rng rng(derive_seed(seed, {0x7374796c, static_cast<std::uint64_t>(d)}));
    DomainStyle s;
    s.gain.resize(spec.channels);
    s.offset.resize(spec.channels);
    for (std::size_t c = 0; c < spec.channels; ++c) {
      s.gain[c] = std::exp(spec.style_scale * standard_normal(rng));
      s.offset[c] = spec.style_shift * standard_normal(rng);
    }
    s.noise = std::exp(spec.noise_spread * standard_normal(rng));
    // noise * (a I + b u u^T) with u a random unit colour direction; its square
    // is noise^2 ((1 - rho) I + rho C u u^T), trace preserved.
    const std::size_t nc = spec.channels;
    Vector u(nc);
    double norm = 0.0;
    for (auto& v : u) v = standard_normal(rng), norm += v * v;
    norm = std::sqrt(norm);
    for (auto& v : u) v /= norm;
    const double rho = spec.noise_anisotropy;
    const double a = std::sqrt(1.0 - rho);
    const double b = std::sqrt(1.0 - rho + static_cast<double>(nc) * rho) - a;
    s.noise_mix = Matrix(nc, nc);
    for (std::size_t i = 0; i < nc; ++i)
      for (std::size_t j = 0; j < nc; ++j) s.noise_mix(i, j) = s.noise * ((i == j ? a : 0.0) + b * u[i] * u[j]);
    styles.push_back(std::move(s));
  }
  return styles;
}

namespace {

Vector coloured(const DomainStyle& st, Rng& rng, double scale) {
  const std::size_t nc = st.noise_mix.rows();
  Vector z(nc), e(nc, 0.0);
  for (auto& v : z) v = standard_normal(rng);
  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t j = 0; j < nc; ++j) e[i] += scale * st.noise_mix(i, j) * z[j];
  return e;
}

}  // namespace

Dataset generate(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto protos = class_prototypes(spec);
  const auto styles = domain_styles(spec, seed);
  const std::size_t plane = spec.height * spec.width;
  const std::size_t gh = (spec.height + spec.block_h - 1) / spec.block_h;
  const std::size_t gw = (spec.width + spec.block_w - 1) / spec.block_w;

  Dataset data;
  data.n_domains = spec.n_domains;
  data.n_classes = spec.n_classes;
  data.channels = spec.channels;
  data.height = spec.height;
  data.width = spec.width;
  data.holdout_domain = spec.holdout();

  for (int d = 0; d < spec.n_domains; ++d) {
    const DomainStyle& st = styles[static_cast<std::size_t>(d)];
    for (int y = 0; y < spec.n_classes; ++y) {
      // Each (class, domain) cell has its own stream so cells are independent.
      Rng rng(derive_seed(seed, {0x63656c6c, static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(y)}));
      std::size_t query_pick = 0;
      if (d == data.holdout_domain) {
        std::uniform_int_distribution<std::size_t> u(0, static_cast<std::size_t>(spec.samples_per_cell) - 1);
        query_pick = u(rng);
      }
      for (int n = 0; n < spec.samples_per_cell; ++n) {
        Record r;
        r.domain = d;
        r.label = y;
        r.split = d != data.holdout_domain ? Split::Train
                  : static_cast<std::size_t>(n) == query_pick ? Split::Query
                                                              : Split::Gallery;
        r.pixels.resize(spec.channels * plane);
        const Vector& p = protos[static_cast<std::size_t>(y)];
        for (std::size_t c = 0; c < spec.channels; ++c)
          for (std::size_t i = 0; i < plane; ++i) r.pixels[c * plane + i] = st.gain[c] * p[c * plane + i] + st.offset[c];
        if (spec.cell_sigma > 0.0) {
          for (std::size_t cr = 0; cr < gh; ++cr)
            for (std::size_t cq = 0; cq < gw; ++cq) {
              const Vector e = coloured(st, rng, spec.cell_sigma);
              for (std::size_t q = cr * spec.block_h; q < std::min(spec.height, (cr + 1) * spec.block_h); ++q)
                for (std::size_t w = cq * spec.block_w; w < std::min(spec.width, (cq + 1) * spec.block_w); ++w)
                  for (std::size_t c = 0; c < spec.channels; ++c) r.pixels[c * plane + q * spec.width + w] += e[c];
            }
        }
        if (spec.sigma > 0.0)
          for (std::size_t i = 0; i < plane; ++i) {
            const Vector e = coloured(st, rng, spec.sigma);
            for (std::size_t c = 0; c < spec.channels; ++c) r.pixels[c * plane + i] += e[c];
          }
        data.records.push_back(std::move(r));
      }
    }
  }
  return data;
}

namespace {

constexpr char kDataMagic[8] = {'U', 'D', 'S', 'X', 'D', 'A', 'T', 'A'};
constexpr std::uint32_t kDataVersion = 1;
constexpr std::uint8_t kDtypeF64 = 1;
constexpr std::size_t kHeaderSize = 8 + 4 + 5 * 4 + 4 + 8 + 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    if (pos_ + sizeof(T) > bytes_.size())
      fail(ErrorKind::Io, std::string("dataset file truncated at offset ") + std::to_string(pos_) + " reading " +
                              what + " (file has " + std::to_string(bytes_.size()) + " bytes)");
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_dataset(const Dataset& data) {
  std::vector<std::uint8_t> out(kDataMagic, kDataMagic + 8);
  out.reserve(kHeaderSize + data.records.size() * (13 + 8 * data.pixel_count()));
  put<std::uint32_t>(out, kDataVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(data.n_domains));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(data.n_classes));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(data.channels));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(data.height));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(data.width));
  put<std::int32_t>(out, data.holdout_domain);
  put<std::uint64_t>(out, data.records.size());
  put<std::uint8_t>(out, kDtypeF64);
  for (const Record& r : data.records) {
    require(r.pixels.size() == data.pixel_count(), ErrorKind::Shape, "save_dataset: record has wrong pixel count");
    put<std::int32_t>(out, r.domain);
    put<std::int32_t>(out, r.label);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(r.split));
    put<std::int32_t>(out, r.camera);
    for (double v : r.pixels) put<double>(out, v);
  }
  return out;
}

Dataset deserialize_dataset(const std::vector<std::uint8_t>& bytes) {
  Reader rd(bytes);
  char magic[8];
  for (char& c : magic) c = static_cast<char>(rd.get<std::uint8_t>("magic"));
  if (std::memcmp(magic, kDataMagic, 8) != 0) fail(ErrorKind::Io, "dataset file: bad magic bytes at offset 0");
  const auto version = rd.get<std::uint32_t>("version");
  if (version != kDataVersion)
    fail(ErrorKind::Io, "dataset file: version " + std::to_string(version) + " at offset 8, expected " +
                            std::to_string(kDataVersion));
  Dataset d;
  d.n_domains = static_cast<int>(rd.get<std::uint32_t>("n_domains"));
  d.n_classes = static_cast<int>(rd.get<std::uint32_t>("n_classes"));
  d.channels = rd.get<std::uint32_t>("channels");
  d.height = rd.get<std::uint32_t>("height");
  d.width = rd.get<std::uint32_t>("width");
  d.holdout_domain = rd.get<std::int32_t>("holdout");
  const auto count = rd.get<std::uint64_t>("record count");
  const auto dtype = rd.get<std::uint8_t>("dtype");
  if (dtype != kDtypeF64) fail(ErrorKind::Io, "dataset file: unsupported dtype " + std::to_string(dtype));

  const std::size_t record_bytes = 13 + 8 * d.pixel_count();
  const std::size_t expected = kHeaderSize + count * record_bytes;
  if (bytes.size() < expected) {
    const std::size_t complete = (bytes.size() - rd.pos()) / record_bytes;
    fail(ErrorKind::Io, "dataset file truncated: " + std::to_string(bytes.size()) + " bytes, expected " +
                            std::to_string(expected) + "; record " + std::to_string(complete) +
                            " is incomplete at offset " + std::to_string(kHeaderSize + complete * record_bytes));
  }
  if (bytes.size() > expected)
    fail(ErrorKind::Io, "dataset file has " + std::to_string(bytes.size() - expected) +
                            " trailing bytes after offset " + std::to_string(expected));

  d.records.resize(count);
  for (Record& r : d.records) {
    r.domain = rd.get<std::int32_t>("domain");
    r.label = rd.get<std::int32_t>("label");
    const auto split = rd.get<std::uint8_t>("split");
    if (split > 2) fail(ErrorKind::Io, "dataset file: bad split code at offset " + std::to_string(rd.pos() - 1));
    r.split = static_cast<Split>(split);
    r.camera = rd.get<std::int32_t>("camera");
    r.pixels.resize(d.pixel_count());
    for (double& v : r.pixels) v = rd.get<double>("pixels");
  }
  return d;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  const auto bytes = serialize_dataset(data);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open dataset " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_dataset(bytes);
}

std::uint64_t dataset_checksum(const Dataset& data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : serialize_dataset(data)) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

NearestCentroidReport nearest_centroid_accuracy(const Dataset& data) {
  const std::size_t n = data.pixel_count();
  const auto nd = static_cast<std::size_t>(data.n_domains);
  const auto nc = static_cast<std::size_t>(data.n_classes);
  // Centroids are fit on the even-numbered samples of each cell and every
  // accuracy is measured on the odd-numbered ones, so both figures use the same
  // fit and test sizes.
  std::vector<std::vector<Vector>> even(nd, std::vector<Vector>(nc, Vector(n, 0.0)));
  std::vector<std::vector<double>> even_n(nd, std::vector<double>(nc, 0.0));
  std::vector<std::vector<int>> seen(nd, std::vector<int>(nc, 0));
  std::vector<bool> is_even(data.records.size());
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    const Record& r = data.records[i];
    const auto d = static_cast<std::size_t>(r.domain), y = static_cast<std::size_t>(r.label);
    is_even[i] = seen[d][y]++ % 2 == 0;
    if (is_even[i]) {
      kernels::axpy(1.0, r.pixels.data(), even[d][y].data(), n);
      even_n[d][y] += 1.0;
    }
  }
  for (std::size_t d = 0; d < nd; ++d)
    for (std::size_t y = 0; y < nc; ++y)
      for (auto& v : even[d][y]) v /= std::max(even_n[d][y], 1.0);
  auto classify = [&](const std::vector<Vector>& cents, const Vector& x) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t y = 0; y < cents.size(); ++y) {
      const double dist = kernels::sqdist(cents[y].data(), x.data(), n);
      if (dist < bd) bd = dist, best = y;
    }
    return static_cast<int>(best);
  };

  NearestCentroidReport rep;
  double within_hits = 0.0, within_total = 0.0;
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    if (is_even[i]) continue;
    const Record& r = data.records[i];
    within_hits += classify(even[static_cast<std::size_t>(r.domain)], r.pixels) == r.label ? 1.0 : 0.0;
    within_total += 1.0;
  }
  double cross_hits = 0.0, cross_total = 0.0;
  for (std::size_t a = 0; a < nd; ++a)
    for (std::size_t i = 0; i < data.records.size(); ++i) {
      const Record& r = data.records[i];
      if (is_even[i] || static_cast<std::size_t>(r.domain) == a) continue;
      cross_hits += classify(even[a], r.pixels) == r.label ? 1.0 : 0.0;
      cross_total += 1.0;
    }
  rep.within_domain = within_total > 0 ? within_hits / within_total : 0.0;
  rep.cross_domain = cross_total > 0 ? cross_hits / cross_total : 0.0;
  return rep;
}

}  // namespace udsx
