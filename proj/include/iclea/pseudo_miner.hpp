#pragma once

// Pseudo-aligned pair mining: exact top-1 cross-graph nearest neighbor by L2
// distance, kept when the distance is strictly below lambda.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <vector>

#include "iclea/error.hpp"
#include "iclea/kg.hpp"
#include "iclea/matrix.hpp"
#include "iclea/parallel.hpp"

namespace iclea {

struct PseudoPair {
  EntityId partner = 0;
  double distance = 0.0;

  friend bool operator==(const PseudoPair&, const PseudoPair&) = default;
};

// Indexed by source entity id; empty slots have no pair.
struct PseudoPairSet {
  int source_graph = 1;  // 1: G1 -> G2, 2: G2 -> G1
  std::size_t epoch = 0;
  std::vector<std::optional<PseudoPair>> pairs;

  std::size_t size() const {
    return static_cast<std::size_t>(std::count_if(pairs.begin(), pairs.end(), [](const auto& p) { return p.has_value(); }));
  }
};

struct NearestNeighbor {
  EntityId id = 0;
  double distance = std::numeric_limits<double>::infinity();
};

// Exact top-1 search. Ties go to the lowest target id. Target rows are scanned
// in blocks so a block stays in cache across a chunk of queries.
inline std::vector<NearestNeighbor> nearest_neighbors(const Matrix& queries, const Matrix& targets, std::size_t block = 256) {
  if (queries.rows && targets.rows && queries.cols != targets.cols) throw ShapeError("nearest_neighbors: dimension mismatch");
  std::vector<NearestNeighbor> out(queries.rows);
  if (targets.rows == 0) return out;
  parallel_chunks(queries.rows, 32, [&](std::size_t begin, std::size_t end) {
    for (std::size_t t0 = 0; t0 < targets.rows; t0 += block) {
      const std::size_t t1 = std::min(targets.rows, t0 + block);
      for (std::size_t q = begin; q < end; ++q) {
        auto& best = out[q];
        const auto qr = queries.row(q);
        for (std::size_t t = t0; t < t1; ++t) {
          const double d = l2_distance(qr, targets.row(t));
          // Targets are visited in ascending id order, so strict < keeps the lowest id on ties.
          if (d < best.distance) best = {static_cast<EntityId>(t), d};
        }
      }
    }
  });
  return out;
}

inline PseudoPairSet search_pairs(const Matrix& source, const Matrix& target, double lambda, int source_graph, std::size_t epoch = 0) {
  PseudoPairSet s;
  s.source_graph = source_graph;
  s.epoch = epoch;
  s.pairs.resize(source.rows);
  const auto nn = nearest_neighbors(source, target);
  for (std::size_t i = 0; i < nn.size(); ++i)
    if (nn[i].distance < lambda) s.pairs[i] = PseudoPair{nn[i].id, nn[i].distance};
  return s;
}

struct MinedPairs {
  PseudoPairSet forward;   // G1 -> G2
  PseudoPairSet backward;  // G2 -> G1
};

inline MinedPairs mine(const Matrix& v1, const Matrix& v2, double lambda, std::size_t epoch = 0) {
  for (float x : v1.data)
    if (!std::isfinite(x)) throw DataError("mine: non-finite embedding in G1");
  for (float x : v2.data)
    if (!std::isfinite(x)) throw DataError("mine: non-finite embedding in G2");
  return {search_pairs(v1, v2, lambda, 1, epoch), search_pairs(v2, v1, lambda, 2, epoch)};
}

// Bidirectional partner lookup produced by merge().
struct PseudoLookup {
  std::vector<std::optional<PseudoPair>> g1;  // partner in G2 of each G1 entity
  std::vector<std::optional<PseudoPair>> g2;  // partner in G1 of each G2 entity

  const std::vector<std::optional<PseudoPair>>& side(int graph) const { return graph == 1 ? g1 : g2; }
};

namespace detail {

inline std::vector<std::optional<PseudoPair>> resolve(const PseudoPairSet& own, const PseudoPairSet& reverse, std::size_t n) {
  std::vector<std::optional<PseudoPair>> out(n);
  std::vector<std::size_t> hits(n, 0);
  std::vector<PseudoPair> candidate(n);
  for (std::size_t src = 0; src < reverse.pairs.size(); ++src) {
    const auto& p = reverse.pairs[src];
    if (!p || p->partner >= n) continue;
    ++hits[p->partner];
    candidate[p->partner] = PseudoPair{static_cast<EntityId>(src), p->distance};
  }
  for (std::size_t e = 0; e < n; ++e) {
    if (e < own.pairs.size() && own.pairs[e])
      out[e] = own.pairs[e];
    else if (hits[e] == 1)
      out[e] = candidate[e];
  }
  return out;
}

}  // namespace detail

// An entity's own-direction pair wins. Without one, it takes the unique
// reverse pair that points at it; several reverse candidates leave it unpaired.
inline PseudoLookup merge(const PseudoPairSet& p12, const PseudoPairSet& p21, std::size_t n1, std::size_t n2) {
  return {detail::resolve(p12, p21, n1), detail::resolve(p21, p12, n2)};
}

inline PseudoLookup merge(const PseudoPairSet& p12, const PseudoPairSet& p21) {
  std::size_t n1 = p12.pairs.size(), n2 = p21.pairs.size();
  for (const auto& p : p21.pairs)
    if (p) n1 = std::max<std::size_t>(n1, p->partner + 1);
  for (const auto& p : p12.pairs)
    if (p) n2 = std::max<std::size_t>(n2, p->partner + 1);
  return merge(p12, p21, n1, n2);
}

struct CoverageSide {
  double coverage = 0.0;  // fraction of entities with a partner
  std::size_t paired = 0;
  double mean_distance = 0.0;
  double median_distance = 0.0;
  double p90_distance = 0.0;
};

struct Coverage {
  CoverageSide g1, g2;
};

namespace detail {

// Nearest-rank percentile of a sorted sample.
inline double percentile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(sorted.size())));
  return sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
}

inline CoverageSide side_stats(const std::vector<std::optional<PseudoPair>>& side, std::size_t n) {
  CoverageSide s;
  std::vector<double> d;
  for (const auto& p : side)
    if (p) d.push_back(p->distance);
  s.paired = d.size();
  s.coverage = n ? static_cast<double>(d.size()) / static_cast<double>(n) : 0.0;
  if (d.empty()) return s;
  std::sort(d.begin(), d.end());
  double acc = 0.0;
  for (double x : d) acc += x;
  s.mean_distance = acc / static_cast<double>(d.size());
  s.median_distance = percentile(d, 0.5);
  s.p90_distance = percentile(d, 0.9);
  return s;
}

}  // namespace detail

inline Coverage coverage_stats(const PseudoLookup& merged, std::size_t n1, std::size_t n2) {
  return {detail::side_stats(merged.g1, n1), detail::side_stats(merged.g2, n2)};
}

// Audit dump: epoch<TAB>src_kg<TAB>src_id<TAB>dst_id<TAB>distance, one line per pair.
inline void write_pairs_tsv(std::ostream& out, const PseudoPairSet& s) {
  for (std::size_t i = 0; i < s.pairs.size(); ++i) {
    if (!s.pairs[i]) continue;
    out << s.epoch << '\t' << s.source_graph << '\t' << i << '\t' << s.pairs[i]->partner << '\t' << s.pairs[i]->distance << '\n';
  }
}

}  // namespace iclea
