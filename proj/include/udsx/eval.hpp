#pragma once
// CMC rank-k and mean average precision for query/gallery retrieval, plus the
// held-out-domain driver that embeds data with a single clean forward pass.

#include <map>
#include <span>
#include <string>
#include <vector>

#include "udsx/backbone.hpp"
#include "udsx/matrix.hpp"
#include "udsx/synthdata.hpp"

namespace udsx {

enum class Distance { Euclidean, Cosine };

Distance parse_distance(const std::string& name);
std::string to_string(Distance d);

struct RetrievalResult {
  std::map<int, double> rank_k;
  double mAP = 0.0;
  Vector ap;  // per query

  double rank(int k) const { return rank_k.at(k); }
};

// Rows of `query`/`gallery` are embeddings. Ranking is ascending distance with
// ties broken by gallery index. Every query must have a gallery match.
RetrievalResult cmc_map(const Matrix& query, std::span<const int> query_labels, const Matrix& gallery,
                        std::span<const int> gallery_labels, std::span<const int> ks,
                        Distance distance = Distance::Euclidean);

Matrix embed(const BackboneModel& model, const Dataset& data, std::span<const std::size_t> indices);

// The stats argument is accepted so callers can pass whatever they hold; it is
// never read because inference uses neither DEX nor PSTE.
RetrievalResult evaluate_held_out(const BackboneModel& model, const Dataset& data, std::span<const int> ks,
                                  Distance distance = Distance::Euclidean, const DomainStats* stats = nullptr);

std::string retrieval_json(const RetrievalResult& r, const std::map<std::string, std::string>& extra = {});

}  // namespace udsx
