#pragma once

// Triplet mining over an embedding table and the triplet / combined losses.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cwmerge/consistency_weights.hpp"
#include "cwmerge/error.hpp"
#include "cwmerge/parallel.hpp"
#include "cwmerge/rng.hpp"

namespace cwmerge {

struct Triplet {
  std::string anchor_id;
  std::string positive_id;
  std::string negative_id;

  bool operator==(const Triplet&) const = default;
};

inline nlohmann::json to_json(const Triplet& t) {
  return {{"anchor_id", t.anchor_id}, {"positive_id", t.positive_id}, {"negative_id", t.negative_id}};
}

enum class DistanceKind { Euclidean, Cosine };

inline double distance(std::span<const double> a, std::span<const double> b, DistanceKind kind = DistanceKind::Euclidean) {
  if (a.size() != b.size())
    throw ValidationError("vector dimension mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  if (kind == DistanceKind::Cosine) {
    const double na = std::sqrt(dot(a, a)), nb = std::sqrt(dot(b, b));
    if (na == 0.0 || nb == 0.0) throw ValidationError("cosine distance of a zero vector");
    return 1.0 - dot(a, b) / (na * nb);
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

inline constexpr std::size_t kNeighborPool = 10;

struct MiningOptions {
  std::size_t per_anchor = 1;
  DistanceKind distance = DistanceKind::Euclidean;
  unsigned threads = 1;
};

/// Indices of all other points sorted by (distance to anchor, id).
inline std::vector<std::size_t> rank_neighbors(const EmbeddingTable& tbl, std::size_t anchor, DistanceKind kind) {
  const std::size_t t = tbl.ids.size();
  std::vector<double> d(t);
  std::vector<std::size_t> order;
  order.reserve(t - 1);
  for (std::size_t j = 0; j < t; ++j) {
    if (j == anchor) continue;
    d[j] = distance(tbl.vectors.row(anchor), tbl.vectors.row(j), kind);
    order.push_back(j);
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return d[a] != d[b] ? d[a] < d[b] : tbl.ids[a] < tbl.ids[b];
  });
  return order;
}

/// For every anchor, positives are drawn uniformly from its 10 nearest
/// neighbours and negatives from its 10 farthest. Each anchor has its own
/// keyed sub-stream, so results do not depend on thread count.
inline std::vector<Triplet> mine_triplets(const EmbeddingTable& tbl, std::uint64_t seed, const MiningOptions& opts = {}) {
  const std::size_t t = tbl.ids.size();
  if (t < 2 * kNeighborPool + 1) throw ValidationError("need at least 21 points for triplet mining, got " + std::to_string(t));
  if (opts.per_anchor < 1) throw ValidationError("per_anchor must be at least 1");
  if (tbl.vectors.rows != t) throw ValidationError("embedding table rows do not match ids");
  for (std::size_t i = 0; i < t; ++i) {
    for (double v : tbl.vectors.row(i))
      if (!std::isfinite(v)) throw ValidationError("non-finite embedding for id '" + tbl.ids[i] + "'");
  }
  {
    auto ids = tbl.ids;
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw ValidationError("duplicate embedding ids");
  }

  std::vector<std::vector<Triplet>> per(t);
  const rng::KeyedStream root(seed, "triplets");
  parallel_for(t, opts.threads, [&](std::size_t a) {
    const auto order = rank_neighbors(tbl, a, opts.distance);
    const auto stream = root.derive(tbl.ids[a]);
    for (std::size_t k = 0; k < opts.per_anchor; ++k) {
      const std::size_t p = order[stream.below(2 * k, kNeighborPool)];
      const std::size_t n = order[order.size() - kNeighborPool + stream.below(2 * k + 1, kNeighborPool)];
      per[a].push_back({tbl.ids[a], tbl.ids[p], tbl.ids[n]});
    }
  });

  std::vector<Triplet> out;
  out.reserve(t * opts.per_anchor);
  for (auto& v : per) out.insert(out.end(), v.begin(), v.end());
  return out;
}

inline constexpr double kDefaultMargin = 1.0;
inline constexpr double kDefaultAlpha = 0.1;

/// max(0, d(A,P) - d(A,N) + margin) with Euclidean d.
inline double triplet_loss(std::span<const double> anchor, std::span<const double> positive,
                           std::span<const double> negative, double margin = kDefaultMargin) {
  if (margin < 0.0) throw ValidationError("margin must be non-negative");
  return std::max(0.0, distance(anchor, positive) - distance(anchor, negative) + margin);
}

struct TripletGradient {
  std::vector<double> anchor;
  std::vector<double> positive;
  std::vector<double> negative;
};

/// Gradient of the triplet loss. Zero wherever the hinge is inactive
/// (including exactly at the kink). With the hinge active, a zero A-P or
/// A-N distance has no defined direction and is rejected.
inline TripletGradient triplet_loss_gradient(std::span<const double> anchor, std::span<const double> positive,
                                             std::span<const double> negative, double margin = kDefaultMargin) {
  const std::size_t dim = anchor.size();
  TripletGradient g{std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0)};
  if (triplet_loss(anchor, positive, negative, margin) <= 0.0) return g;
  const double dap = distance(anchor, positive), dan = distance(anchor, negative);
  if (dap == 0.0 || dan == 0.0)
    throw ValidationError("triplet loss gradient undefined at zero anchor distance");
  for (std::size_t i = 0; i < dim; ++i) {
    const double up = (anchor[i] - positive[i]) / dap;  // d dap / d anchor
    const double un = (anchor[i] - negative[i]) / dan;  // d dan / d anchor
    g.anchor[i] = up - un;
    g.positive[i] = -up;
    g.negative[i] = un;
  }
  return g;
}

inline double combined_loss(double ce, double tl, double alpha = kDefaultAlpha) {
  if (ce < 0.0 || tl < 0.0) throw ValidationError("loss terms must be non-negative");
  if (alpha < 0.0) throw ValidationError("alpha must be non-negative");
  return ce + alpha * tl;
}

}  // namespace cwmerge
