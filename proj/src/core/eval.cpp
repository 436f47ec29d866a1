#include "udsx/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "udsx/error.hpp"
#include "udsx/kernels.hpp"

namespace udsx {

Distance parse_distance(const std::string& name) {
  if (name == "euclidean") return Distance::Euclidean;
  if (name == "cosine") return Distance::Cosine;
  fail(ErrorKind::Config, "unknown distance '" + name + "' (expected euclidean|cosine)");
}

std::string to_string(Distance d) { return d == Distance::Euclidean ? "euclidean" : "cosine"; }

namespace {

double pair_distance(std::span<const double> a, std::span<const double> b, Distance kind) {
  if (kind == Distance::Euclidean) return kernels::sqdist(a.data(), b.data(), a.size());
  const double na = std::sqrt(kernels::dot(a.data(), a.data(), a.size()));
  const double nb = std::sqrt(kernels::dot(b.data(), b.data(), b.size()));
  if (na == 0.0 || nb == 0.0) return 1.0;
  return 1.0 - kernels::dot(a.data(), b.data(), a.size()) / (na * nb);
}

}  // namespace

RetrievalResult cmc_map(const Matrix& query, std::span<const int> query_labels, const Matrix& gallery,
                        std::span<const int> gallery_labels, std::span<const int> ks, Distance distance) {
  require(query.rows() == query_labels.size(), ErrorKind::Shape, "cmc_map: query rows/labels mismatch");
  require(gallery.rows() == gallery_labels.size(), ErrorKind::Shape, "cmc_map: gallery rows/labels mismatch");
  require(query.rows() >= 1 && gallery.rows() >= 1, ErrorKind::Protocol, "cmc_map: empty query or gallery");
  require(query.cols() == gallery.cols(), ErrorKind::Shape, "cmc_map: embedding dims differ");
  for (int k : ks) require(k >= 1, ErrorKind::Config, "cmc_map: rank k must be >= 1");

  const std::size_t nq = query.rows(), ng = gallery.rows();
  RetrievalResult out;
  for (int k : ks) out.rank_k[k] = 0.0;
  out.ap.resize(nq);

  Vector dist(ng);
  std::vector<std::size_t> order(ng);
  for (std::size_t q = 0; q < nq; ++q) {
    for (std::size_t g = 0; g < ng; ++g) dist[g] = pair_distance(query.row(q), gallery.row(g), distance);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });

    std::size_t hits = 0, first_hit = ng;
    double precision_sum = 0.0;
    for (std::size_t r = 0; r < ng; ++r) {
      if (gallery_labels[order[r]] != query_labels[q]) continue;
      if (hits == 0) first_hit = r;
      ++hits;
      precision_sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
    if (hits == 0)
      fail(ErrorKind::Protocol, "cmc_map: query " + std::to_string(q) + " (label " +
                                    std::to_string(query_labels[q]) + ") has no gallery match");
    out.ap[q] = precision_sum / static_cast<double>(hits);
    for (int k : ks)
      if (first_hit < static_cast<std::size_t>(k)) out.rank_k[k] += 1.0;
  }
  for (auto& [k, v] : out.rank_k) v /= static_cast<double>(nq);
  out.mAP = std::accumulate(out.ap.begin(), out.ap.end(), 0.0) / static_cast<double>(nq);
  return out;
}

Matrix embed(const BackboneModel& model, const Dataset& data, std::span<const std::size_t> indices) {
  Matrix out(indices.size(), model.embedding_dim());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const ForwardTrace t = forward(model, data.records[indices[i]].pixels);
    std::copy(t.embedding.begin(), t.embedding.end(), out.row(i).begin());
  }
  return out;
}

RetrievalResult evaluate_held_out(const BackboneModel& model, const Dataset& data, std::span<const int> ks,
                                  Distance distance, const DomainStats* /*stats*/) {
  const auto qi = data.indices(Split::Query);
  const auto gi = data.indices(Split::Gallery);
  require(!qi.empty() && !gi.empty(), ErrorKind::Protocol, "evaluate_held_out: dataset has no query/gallery split");
  std::vector<int> ql, gl;
  for (auto i : qi) ql.push_back(data.records[i].label);
  for (auto i : gi) gl.push_back(data.records[i].label);
  return cmc_map(embed(model, data, qi), ql, embed(model, data, gi), gl, ks, distance);
}

std::string retrieval_json(const RetrievalResult& r, const std::map<std::string, std::string>& extra) {
  nlohmann::ordered_json j;
  for (const auto& [k, v] : extra) j[k] = v;
  nlohmann::ordered_json ranks;
  for (const auto& [k, v] : r.rank_k) ranks["rank" + std::to_string(k)] = v;
  j["cmc"] = ranks;
  j["mAP"] = r.mAP;
  j["per_query_ap"] = r.ap;
  return j.dump(2);
}

}  // namespace udsx
