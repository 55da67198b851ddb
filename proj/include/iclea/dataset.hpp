#pragma once

// On-disk dataset layout:
//
//   <root>/kg1/{entities,relations,triples}.tsv
//   <root>/kg1/{name,desc,relation}.emb     desc.emb is optional
//   <root>/kg2/...                          same as kg1
//   <root>/alignments.tsv                   gold pairs, evaluation only

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "iclea/embedding_io.hpp"
#include "iclea/error.hpp"
#include "iclea/kg.hpp"

namespace iclea {

struct GraphData {
  KnowledgeGraph kg;
  EmbeddingTable name;
  std::optional<EmbeddingTable> desc;
  EmbeddingTable relation;
};

struct TwinDataset {
  GraphData g1, g2;
  AlignmentSet alignments;
};

namespace detail {

inline EmbeddingTable read_kind(const std::filesystem::path& p, EmbeddingKind kind, std::size_t count) {
  auto t = read_embeddings(p.string());
  if (t.kind != kind) throw FormatError(p.string() + ": expected kind " + to_string(kind) + ", found " + to_string(t.kind));
  if (t.count != count) throw IntegrityError(p.string() + ": has " + std::to_string(t.count) + " rows, graph has " + std::to_string(count));
  return t;
}

inline void require_file(const std::filesystem::path& p) {
  if (!std::filesystem::is_regular_file(p)) throw InputError("missing file " + p.string());
}

}  // namespace detail

inline GraphData load_graph_data(const std::filesystem::path& dir) {
  for (const char* f : {"entities.tsv", "relations.tsv", "triples.tsv", "name.emb", "relation.emb"}) detail::require_file(dir / f);
  GraphData g;
  g.kg = load_kg((dir / "entities.tsv").string(), (dir / "relations.tsv").string(), (dir / "triples.tsv").string());
  g.name = detail::read_kind(dir / "name.emb", EmbeddingKind::entity_name, g.kg.entity_count());
  if (std::filesystem::exists(dir / "desc.emb")) g.desc = detail::read_kind(dir / "desc.emb", EmbeddingKind::entity_description, g.kg.entity_count());
  g.relation = detail::read_kind(dir / "relation.emb", EmbeddingKind::relation_name, g.kg.relation_count());
  return g;
}

inline TwinDataset load_dataset(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw InputError("dataset directory not found: " + root.string());
  TwinDataset d;
  d.g1 = load_graph_data(root / "kg1");
  d.g2 = load_graph_data(root / "kg2");
  detail::require_file(root / "alignments.tsv");
  d.alignments = load_alignments((root / "alignments.tsv").string(), &d.g1.kg, &d.g2.kg);
  return d;
}

namespace detail {

inline void write_side_info(const std::filesystem::path& p, const std::vector<SideInfo>& rows, bool with_description) {
  std::ofstream out(p);
  if (!out) throw InputError("cannot write " + p.string());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << i << '\t' << rows[i].name;
    if (with_description && rows[i].description) out << '\t' << *rows[i].description;
    out << '\n';
  }
}

}  // namespace detail

inline void save_graph_data(const std::filesystem::path& dir, const GraphData& g) {
  std::filesystem::create_directories(dir);
  detail::write_side_info(dir / "entities.tsv", g.kg.entities, true);
  detail::write_side_info(dir / "relations.tsv", g.kg.relations, false);
  {
    std::ofstream out(dir / "triples.tsv");
    if (!out) throw InputError("cannot write " + (dir / "triples.tsv").string());
    for (const auto& t : g.kg.triples) out << t.head << '\t' << t.relation << '\t' << t.tail << '\n';
  }
  write_embeddings((dir / "name.emb").string(), g.name);
  if (g.desc) write_embeddings((dir / "desc.emb").string(), *g.desc);
  write_embeddings((dir / "relation.emb").string(), g.relation);
}

inline void save_dataset(const std::filesystem::path& root, const TwinDataset& d) {
  save_graph_data(root / "kg1", d.g1);
  save_graph_data(root / "kg2", d.g2);
  std::ofstream out(root / "alignments.tsv");
  if (!out) throw InputError("cannot write " + (root / "alignments.tsv").string());
  for (const auto& p : d.alignments) out << p.left << '\t' << p.right << '\n';
}

}  // namespace iclea
