#pragma once

// Ranking evaluation. The gold counterpart's rank is one plus the number of
// candidates strictly closer by L2 distance, or equally close with a lower id.

#include <algorithm>
#include <cstddef>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "iclea/error.hpp"
#include "iclea/kg.hpp"
#include "iclea/matrix.hpp"
#include "iclea/parallel.hpp"

namespace iclea {

struct RankingResult {
  std::string direction = "G1->G2";
  std::vector<std::size_t> ranks;  // one per gold pair, in gold order
  std::vector<std::size_t> ns;
  std::vector<double> hits;        // hits[k] is Hits@ns[k]
  double mean_rank = 0.0;
  double mrr = 0.0;

  std::size_t queries() const { return ranks.size(); }

  double hits_at(std::size_t n) const {
    if (ranks.empty()) return 0.0;
    const auto c = std::count_if(ranks.begin(), ranks.end(), [n](std::size_t r) { return r <= n; });
    return static_cast<double>(c) / static_cast<double>(ranks.size());
  }
};

// Ranks gold.right among the candidate rows for each gold.left query row.
// candidate_ids[row] gives the entity id stored in that row; without it row i
// holds entity i. Ties are broken by entity id, never by row position.
inline RankingResult evaluate(const Matrix& queries, const Matrix& candidates, const AlignmentSet& gold, std::vector<std::size_t> ns = {1, 10},
                              const std::vector<EntityId>* candidate_ids = nullptr) {
  if (candidate_ids && candidate_ids->size() != candidates.rows) throw ShapeError("evaluate: candidate id list does not match candidate rows");
  if (queries.rows && candidates.rows && queries.cols != candidates.cols) throw ShapeError("evaluate: dimension mismatch");
  auto id_of = [&](std::size_t row) { return candidate_ids ? (*candidate_ids)[row] : static_cast<EntityId>(row); };
  std::vector<std::size_t> row_of;
  {
    EntityId max_id = 0;
    for (std::size_t r = 0; r < candidates.rows; ++r) max_id = std::max(max_id, id_of(r));
    row_of.assign(candidates.rows ? max_id + 1 : 0, SIZE_MAX);
    for (std::size_t r = 0; r < candidates.rows; ++r) row_of[id_of(r)] = r;
  }
  for (const auto& p : gold) {
    if (p.left >= queries.rows) throw IdError("evaluate: gold query id " + std::to_string(p.left) + " has no encoded row");
    if (p.right >= row_of.size() || row_of[p.right] == SIZE_MAX) throw IdError("evaluate: gold candidate id " + std::to_string(p.right) + " has no encoded row");
  }

  RankingResult res;
  res.ns = std::move(ns);
  res.ranks.resize(gold.size());
  parallel_chunks(gold.size(), 16, [&](std::size_t begin, std::size_t end) {
    for (std::size_t g = begin; g < end; ++g) {
      const auto q = queries.row(gold[g].left);
      const EntityId target = gold[g].right;
      const double dg = l2_distance(q, candidates.row(row_of[target]));
      std::size_t rank = 1;
      for (std::size_t r = 0; r < candidates.rows; ++r) {
        const EntityId id = id_of(r);
        if (id == target) continue;
        const double d = l2_distance(q, candidates.row(r));
        if (d < dg || (d == dg && id < target)) ++rank;
      }
      res.ranks[g] = rank;
    }
  });
  for (auto n : res.ns) res.hits.push_back(res.hits_at(n));
  if (!res.ranks.empty()) {
    double sum = 0.0, rr = 0.0;
    for (auto r : res.ranks) {
      sum += static_cast<double>(r);
      rr += 1.0 / static_cast<double>(r);
    }
    res.mean_rank = sum / static_cast<double>(res.ranks.size());
    res.mrr = rr / static_cast<double>(res.ranks.size());
  }
  return res;
}

inline AlignmentSet reversed(const AlignmentSet& gold) {
  AlignmentSet out;
  out.reserve(gold.size());
  for (const auto& p : gold) out.push_back({p.right, p.left});
  return out;
}

struct BidirectionalResult {
  RankingResult forward;   // G1 -> G2
  RankingResult backward;  // G2 -> G1
};

inline BidirectionalResult evaluate_both(const Matrix& v1, const Matrix& v2, const AlignmentSet& gold, const std::vector<std::size_t>& ns = {1, 10}) {
  BidirectionalResult r{evaluate(v1, v2, gold, ns), evaluate(v2, v1, reversed(gold), ns)};
  r.backward.direction = "G2->G1";
  return r;
}

inline void write_hits_csv(std::ostream& out, const std::vector<RankingResult>& results, bool header = true) {
  if (header) out << "direction,N,hits,queries\n";
  for (const auto& r : results)
    for (std::size_t k = 0; k < r.ns.size(); ++k) out << r.direction << ',' << r.ns[k] << ',' << std::setprecision(6) << std::fixed << r.hits[k] << ',' << r.queries() << '\n';
  out << std::defaultfloat;
}

inline void print_hits_table(std::ostream& out, const std::vector<RankingResult>& results) {
  out << std::left << std::setw(10) << "direction";
  if (!results.empty())
    for (auto n : results.front().ns) out << std::right << std::setw(10) << ("Hits@" + std::to_string(n));
  out << std::right << std::setw(11) << "mean rank" << std::setw(9) << "MRR" << std::setw(9) << "queries" << '\n';
  for (const auto& r : results) {
    out << std::left << std::setw(10) << r.direction << std::right << std::fixed << std::setprecision(4);
    for (double h : r.hits) out << std::setw(10) << h;
    out << std::setw(11) << std::setprecision(2) << r.mean_rank << std::setw(9) << std::setprecision(4) << r.mrr << std::setw(9) << r.queries() << '\n';
  }
  out << std::defaultfloat;
}

inline void write_ranks_tsv(std::ostream& out, const RankingResult& r, const AlignmentSet& gold) {
  for (std::size_t i = 0; i < r.ranks.size(); ++i) out << r.direction << '\t' << gold[i].left << '\t' << gold[i].right << '\t' << r.ranks[i] << '\n';
}

}  // namespace iclea
