#pragma once

// Twin-graph generator for tests and demos. A base graph gets random
// pseudo-word names and templated descriptions; its twin is the same graph
// with noisy embeddings, dropped edges and shuffled entity ids.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "iclea/dataset.hpp"
#include "iclea/embedding_io.hpp"
#include "iclea/error.hpp"
#include "iclea/kg.hpp"
#include "iclea/rng.hpp"

namespace iclea {

struct SynthConfig {
  std::size_t entities = 200;
  std::size_t relations = 12;
  double extra_edges_per_entity = 1.5;  // on top of a spanning tree
  std::size_t name_dim = 32;
  std::size_t desc_dim = 32;
  std::size_t relation_dim = 32;
  double sigma = 0.05;         // Gaussian noise per embedding component in the twin
  double edge_dropout = 0.1;   // probability of dropping each twin edge
  std::uint64_t seed = 37;
  std::uint64_t encoder_seed = 7;  // hash seed of the fallback text encoder

  void validate() const {
    if (entities < 2) throw ConfigError("synth: need at least 2 entities");
    if (relations == 0) throw ConfigError("synth: need at least 1 relation");
    if (name_dim == 0 || desc_dim == 0 || relation_dim == 0) throw ConfigError("synth: dims must be positive");
    if (!(sigma >= 0.0)) throw ConfigError("synth: sigma must be >= 0");
    if (!(edge_dropout >= 0.0 && edge_dropout <= 1.0)) throw ConfigError("synth: edge dropout must lie in [0, 1]");
    if (!(extra_edges_per_entity >= 0.0)) throw ConfigError("synth: extra edges must be >= 0");
  }
};

namespace detail {

inline std::string pseudo_word(Rng& rng) {
  static const char* const onsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh", "tr", "br"};
  static const char* const vowels[] = {"a", "e", "i", "o", "u", "ai", "ou"};
  std::string w;
  const auto syllables = 2 + rng.below(2);
  for (std::uint64_t s = 0; s < syllables; ++s) {
    w += onsets[rng.below(std::size(onsets))];
    w += vowels[rng.below(std::size(vowels))];
  }
  return w;
}

// Adds N(0, sigma^2) per component and renormalizes each row to unit length.
inline void perturb_rows(EmbeddingTable& t, double sigma, Rng& rng) {
  if (sigma == 0.0) return;
  for (std::size_t i = 0; i < t.count; ++i) {
    auto r = t.row(i);
    double norm = 0.0;
    for (auto& x : r) {
      x = static_cast<float>(x + sigma * rng.normal());
      norm += static_cast<double>(x) * x;
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;
    for (auto& x : r) x = static_cast<float>(x / norm);
  }
}

}  // namespace detail

inline TwinDataset synthesize(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t n = cfg.entities;

  std::vector<std::string> topics;
  for (int k = 0; k < 8; ++k) topics.push_back(detail::pseudo_word(rng));

  std::vector<SideInfo> entities(n);
  std::set<std::string> used;
  for (std::size_t e = 0; e < n; ++e) {
    std::string name;
    do {
      name = detail::pseudo_word(rng) + " " + detail::pseudo_word(rng) + " " + detail::pseudo_word(rng);
    } while (!used.insert(name).second);
    entities[e].name = name;
    // Mostly shared template words, plus one entity-specific word.
    entities[e].description = "an entity of kind " + topics[rng.below(topics.size())] + " related to " + topics[rng.below(topics.size())] + " " +
                              detail::pseudo_word(rng);
  }
  std::vector<SideInfo> relations(cfg.relations);
  for (std::size_t r = 0; r < cfg.relations; ++r) relations[r].name = "rel " + detail::pseudo_word(rng);

  std::vector<Triple> triples;
  for (std::size_t e = 1; e < n; ++e)
    triples.push_back({static_cast<EntityId>(rng.below(e)), static_cast<RelationId>(rng.below(cfg.relations)), static_cast<EntityId>(e)});
  const auto extra = static_cast<std::size_t>(std::llround(cfg.extra_edges_per_entity * static_cast<double>(n)));
  for (std::size_t k = 0; k < extra; ++k) {
    const auto h = static_cast<EntityId>(rng.below(n));
    auto t = static_cast<EntityId>(rng.below(n - 1));
    if (t >= h) ++t;
    triples.push_back({h, static_cast<RelationId>(rng.below(cfg.relations)), t});
  }

  auto texts = [](const std::vector<SideInfo>& rows, bool description) {
    std::vector<std::string> out;
    for (const auto& r : rows) out.push_back(description ? r.description.value_or("") : r.name);
    return out;
  };

  TwinDataset d;
  d.g1.kg = make_kg(entities, relations, triples);
  d.g1.name = fallback_encode(texts(entities, false), cfg.name_dim, cfg.encoder_seed, EmbeddingKind::entity_name);
  d.g1.desc = fallback_encode(texts(entities, true), cfg.desc_dim, cfg.encoder_seed, EmbeddingKind::entity_description);
  d.g1.relation = fallback_encode(texts(relations, false), cfg.relation_dim, cfg.encoder_seed, EmbeddingKind::relation_name);

  // Twin: G1 entity e becomes G2 entity perm[e].
  std::vector<EntityId> perm(n);
  for (EntityId e = 0; e < n; ++e) perm[e] = e;
  rng.shuffle(perm.begin(), perm.end());

  std::vector<SideInfo> entities2(n);
  for (std::size_t e = 0; e < n; ++e) entities2[perm[e]] = entities[e];
  std::vector<Triple> triples2;
  for (const auto& t : d.g1.kg.triples)
    if (rng.uniform01() >= cfg.edge_dropout) triples2.push_back({perm[t.head], t.relation, perm[t.tail]});
  d.g2.kg = make_kg(entities2, relations, triples2);

  auto permuted = [&](const EmbeddingTable& src) {
    EmbeddingTable t = src;
    for (std::size_t e = 0; e < n; ++e) {
      const auto from = src.row(e);
      std::copy(from.begin(), from.end(), t.row(perm[e]).begin());
    }
    return t;
  };
  d.g2.name = permuted(d.g1.name);
  d.g2.desc = permuted(*d.g1.desc);
  d.g2.relation = d.g1.relation;
  detail::perturb_rows(d.g2.name, cfg.sigma, rng);
  detail::perturb_rows(*d.g2.desc, cfg.sigma, rng);
  detail::perturb_rows(d.g2.relation, cfg.sigma, rng);

  for (EntityId e = 0; e < n; ++e) d.alignments.push_back({e, perm[e]});
  return d;
}

}  // namespace iclea
