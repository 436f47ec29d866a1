#include "udsx/domain_stats.hpp"

#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "udsx/error.hpp"
#include "udsx/kernels.hpp"

namespace udsx {

RunningCovariance::RunningCovariance(std::size_t dim, double momentum)
    : dim_(dim), momentum_(momentum), mean_(dim, 0.0), comoment_(dim, dim), delta_(dim, 0.0) {
  require(momentum >= 0.0 && momentum < 1.0, ErrorKind::Config, "covariance momentum must be in [0, 1)");
}

void RunningCovariance::update(std::span<const double> x) {
  require(x.size() == dim_, ErrorKind::Shape,
          "covariance update: embedding has dim " + std::to_string(x.size()) + ", expected " +
              std::to_string(dim_));
  ++count_;
  for (std::size_t i = 0; i < dim_; ++i) delta_[i] = x[i] - mean_[i];

  if (momentum_ > 0.0 && count_ > 1) {
    const double alpha = 1.0 - momentum_;
    for (std::size_t i = 0; i < dim_; ++i) mean_[i] += alpha * delta_[i];
    for (std::size_t i = 0; i < dim_; ++i) {
      for (std::size_t j = i; j < dim_; ++j) {
        const double v = momentum_ * (comoment_(i, j) + alpha * delta_[i] * delta_[j]);
        comoment_(i, j) = v;
        comoment_(j, i) = v;
      }
    }
    return;
  }

  const double n = static_cast<double>(count_);
  for (std::size_t i = 0; i < dim_; ++i) mean_[i] += delta_[i] / n;
  // (x - m_old)(x - m_new)^T == ((n-1)/n) d d^T; the symmetric form keeps the
  // comoment exactly symmetric.
  const double scale = (n - 1.0) / n;
  for (std::size_t i = 0; i < dim_; ++i) {
    const double si = scale * delta_[i];
    for (std::size_t j = i; j < dim_; ++j) {
      comoment_(i, j) += si * delta_[j];
      comoment_(j, i) = comoment_(i, j);
    }
  }
}

Matrix RunningCovariance::covariance() const {
  Matrix cov(dim_, dim_);
  if (count_ == 0) return cov;
  if (momentum_ > 0.0) return comoment_;
  const double inv = 1.0 / static_cast<double>(count_);
  for (std::size_t i = 0; i < cov.size(); ++i) cov.data()[i] = comoment_.data()[i] * inv;
  return cov;
}

void RunningCovariance::restore(std::size_t count, Vector mean, Matrix comoment) {
  require(mean.size() == dim_ && comoment.rows() == dim_ && comoment.cols() == dim_, ErrorKind::Shape,
          "covariance restore: shape mismatch");
  count_ = count;
  mean_ = std::move(mean);
  comoment_ = std::move(comoment);
}

RunningChannelVariance::RunningChannelVariance(std::size_t channels, double momentum)
    : momentum_(momentum), mean_(channels, 0.0), m2_(channels, 0.0) {}

void RunningChannelVariance::update(std::span<const double> x) {
  require(x.size() == mean_.size(), ErrorKind::Shape, "channel variance update: channel count mismatch");
  ++count_;
  if (momentum_ > 0.0 && count_ > 1) {
    const double alpha = 1.0 - momentum_;
    for (std::size_t c = 0; c < x.size(); ++c) {
      const double d = x[c] - mean_[c];
      mean_[c] += alpha * d;
      m2_[c] = momentum_ * (m2_[c] + alpha * d * d);
    }
    return;
  }
  const double n = static_cast<double>(count_);
  for (std::size_t c = 0; c < x.size(); ++c) {
    const double d = x[c] - mean_[c];
    mean_[c] += d / n;
    m2_[c] += d * (x[c] - mean_[c]);
  }
}

Vector RunningChannelVariance::variance() const {
  Vector v(mean_.size(), 0.0);
  if (count_ == 0) return v;
  if (momentum_ > 0.0) return m2_;
  const double inv = 1.0 / static_cast<double>(count_);
  for (std::size_t c = 0; c < v.size(); ++c) v[c] = std::max(0.0, m2_[c] * inv);
  return v;
}

void RunningChannelVariance::restore(std::size_t count, Vector mean, Vector m2) {
  require(mean.size() == mean_.size() && m2.size() == mean_.size(), ErrorKind::Shape,
          "channel variance restore: shape mismatch");
  count_ = count;
  mean_ = std::move(mean);
  m2_ = std::move(m2);
}

DomainStats::DomainStats(std::size_t embedding_dim, std::vector<LayerShape> layers, double momentum)
    : dim_(embedding_dim), layers_(std::move(layers)), momentum_(momentum) {}

void DomainStats::register_domain(int d) {
  if (has_domain(d)) return;
  covariances_.emplace(d, RunningCovariance(dim_, momentum_));
  for (std::size_t k = 0; k < layers_.size(); ++k)
    channels_.emplace(std::make_pair(d, k), RunningChannelVariance(layers_[k].channels, momentum_));
}

void DomainStats::update_covariance(int d, std::span<const double> embedding) {
  auto it = covariances_.find(d);
  require(it != covariances_.end(), ErrorKind::Domain, "domain stats: unknown domain " + std::to_string(d));
  it->second.update(embedding);
}

void DomainStats::update_channel_variance(int d, std::size_t k, std::span<const double> feature) {
  require(k < layers_.size(), ErrorKind::Domain, "domain stats: unknown layer " + std::to_string(k));
  auto it = channels_.find({d, k});
  require(it != channels_.end(), ErrorKind::Domain, "domain stats: unknown domain " + std::to_string(d));
  const LayerShape& shape = layers_[k];
  require(feature.size() == shape.channels * shape.spatial, ErrorKind::Shape,
          "domain stats: layer " + std::to_string(k) + " feature has " + std::to_string(feature.size()) +
              " values, expected " + std::to_string(shape.channels * shape.spatial));
  Vector means(shape.channels);
  const double inv = 1.0 / static_cast<double>(shape.spatial);
  for (std::size_t c = 0; c < shape.channels; ++c)
    means[c] = kernels::sum(feature.data() + c * shape.spatial, shape.spatial) * inv;
  it->second.update(means);
}

const RunningCovariance& DomainStats::covariance(int d) const {
  auto it = covariances_.find(d);
  require(it != covariances_.end(), ErrorKind::Domain, "domain stats: unknown domain " + std::to_string(d));
  return it->second;
}

const RunningChannelVariance& DomainStats::channel_variance(int d, std::size_t k) const {
  require(k < layers_.size(), ErrorKind::Domain, "domain stats: unknown layer " + std::to_string(k));
  auto it = channels_.find({d, k});
  require(it != channels_.end(), ErrorKind::Domain, "domain stats: unknown domain " + std::to_string(d));
  return it->second;
}

std::vector<int> DomainStats::domains() const {
  std::vector<int> out;
  for (const auto& [d, _] : covariances_) out.push_back(d);
  return out;
}

namespace {

constexpr const char* kStatsMagic = "UDSX-STATS";
constexpr int kStatsVersion = 1;

void write_values(std::ostream& out, const double* v, std::size_t n) {
  char buf[32];
  for (std::size_t i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", v[i]);
    out << (i ? " " : "") << buf;
  }
  out << '\n';
}

Vector read_values(std::istream& in, std::size_t n, const char* what) {
  Vector v(n);
  for (auto& x : v)
    if (!(in >> x)) fail(ErrorKind::Io, std::string("stats snapshot: truncated while reading ") + what);
  return v;
}

void expect_token(std::istream& in, const std::string& token) {
  std::string got;
  if (!(in >> got) || got != token)
    fail(ErrorKind::Io, "stats snapshot: expected '" + token + "', got '" + got + "'");
}

}  // namespace

void DomainStats::save(std::ostream& out) const {
  out << kStatsMagic << ' ' << kStatsVersion << '\n';
  out << "dim " << dim_ << '\n';
  out << "momentum " << momentum_ << '\n';
  out << "layers " << layers_.size() << '\n';
  for (const auto& l : layers_) out << l.channels << ' ' << l.spatial << '\n';
  out << "domains " << covariances_.size() << '\n';
  for (const auto& [d, cov] : covariances_) {
    out << "domain " << d << '\n';
    out << "count " << cov.count() << '\n';
    write_values(out, cov.mean().data(), dim_);
    for (std::size_t r = 0; r < dim_; ++r) write_values(out, cov.comoment().row(r).data(), dim_);
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const auto& cv = channels_.at({d, k});
      out << "layer " << k << " count " << cv.count() << '\n';
      write_values(out, cv.mean().data(), cv.channels());
      write_values(out, cv.m2().data(), cv.channels());
    }
  }
}

DomainStats DomainStats::load(std::istream& in) {
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != kStatsMagic)
    fail(ErrorKind::Io, "stats snapshot: bad magic '" + magic + "'");
  if (version != kStatsVersion)
    fail(ErrorKind::Io, "stats snapshot: unsupported version " + std::to_string(version));
  std::size_t dim = 0, nlayers = 0, ndomains = 0;
  double momentum = 0.0;
  expect_token(in, "dim");
  in >> dim;
  expect_token(in, "momentum");
  in >> momentum;
  expect_token(in, "layers");
  in >> nlayers;
  std::vector<LayerShape> layers(nlayers);
  for (auto& l : layers)
    if (!(in >> l.channels >> l.spatial)) fail(ErrorKind::Io, "stats snapshot: truncated layer table");
  DomainStats stats(dim, layers, momentum);
  expect_token(in, "domains");
  in >> ndomains;
  for (std::size_t i = 0; i < ndomains; ++i) {
    int d = 0;
    std::size_t count = 0;
    expect_token(in, "domain");
    in >> d;
    expect_token(in, "count");
    in >> count;
    stats.register_domain(d);
    Vector mean = read_values(in, dim, "mean");
    Matrix com(dim, dim);
    com.values() = read_values(in, dim * dim, "comoment");
    stats.covariances_.at(d).restore(count, std::move(mean), std::move(com));
    for (std::size_t k = 0; k < nlayers; ++k) {
      std::size_t kk = 0, ccount = 0;
      expect_token(in, "layer");
      in >> kk;
      expect_token(in, "count");
      in >> ccount;
      if (kk != k) fail(ErrorKind::Io, "stats snapshot: layer index out of order");
      Vector cm = read_values(in, layers[k].channels, "channel mean");
      Vector m2 = read_values(in, layers[k].channels, "channel m2");
      stats.channels_.at({d, k}).restore(ccount, std::move(cm), std::move(m2));
    }
  }
  return stats;
}

double quadratic_form(const Matrix& sigma, std::span<const double> v) {
  require(sigma.rows() == v.size() && sigma.cols() == v.size(), ErrorKind::Shape,
          "quadratic_form: sigma is " + std::to_string(sigma.rows()) + "x" + std::to_string(sigma.cols()) +
              ", v has " + std::to_string(v.size()) + " entries");
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] == 0.0) continue;
    acc += v[i] * kernels::dot(sigma.row(i).data(), v.data(), v.size());
  }
  return acc;
}

Matrix cholesky(const Matrix& a, double jitter) {
  require(a.rows() == a.cols(), ErrorKind::Shape, "cholesky: matrix is not square");
  const std::size_t n = a.rows();
  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(a(i, i)));

  auto attempt = [&](double add, Matrix& l) {
    l = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
      double d = a(j, j) + add;
      for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
      if (!(d > 0.0)) return false;
      l(j, j) = std::sqrt(d);
      for (std::size_t i = j + 1; i < n; ++i) {
        double s = a(i, j);
        for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
        l(i, j) = s / l(j, j);
      }
    }
    return true;
  };

  Matrix l;
  if (attempt(0.0, l)) return l;
  const double base = jitter * std::max(1.0, max_diag);
  for (double add = base; add <= base * 1e6; add *= 10.0)
    if (attempt(add, l)) return l;
  fail(ErrorKind::Numeric, "cholesky: factorization failed after diagonal jitter");
}

}  // namespace udsx
