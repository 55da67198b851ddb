#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "iclea/error.hpp"
#include "iclea/rng.hpp"

namespace iclea {

using EntityId = std::uint32_t;
using RelationId = std::uint32_t;

struct Triple {
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = 0;

  friend bool operator==(const Triple&, const Triple&) = default;
  friend auto operator<=>(const Triple&, const Triple&) = default;
};

struct SideInfo {
  std::string name;
  std::optional<std::string> description;

  friend bool operator==(const SideInfo&, const SideInfo&) = default;
};

// One entry of N_e: the neighbor and every relation linking the pair, either direction.
struct Neighbor {
  EntityId id = 0;
  std::vector<RelationId> relations;  // sorted, unique

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

enum class NeighborOrder { ascending_id, degree_first };

struct KnowledgeGraph {
  std::vector<SideInfo> entities;
  std::vector<SideInfo> relations;
  std::vector<Triple> triples;  // deduplicated, self-loops kept
  std::vector<std::vector<Neighbor>> neighborhoods;  // sorted by neighbor id, no self
  std::size_t duplicate_triples = 0;

  std::size_t entity_count() const { return entities.size(); }
  std::size_t relation_count() const { return relations.size(); }

  friend bool operator==(const KnowledgeGraph&, const KnowledgeGraph&) = default;
};

struct AlignmentPair {
  EntityId left = 0;   // in G1
  EntityId right = 0;  // in G2

  friend bool operator==(const AlignmentPair&, const AlignmentPair&) = default;
};

using AlignmentSet = std::vector<AlignmentPair>;

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline bool skip_line(std::string_view line) {
  return line.empty() || line.front() == '#';
}

inline std::string_view chomp(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  return line;
}

inline std::uint32_t parse_id(std::string_view field, const std::string& source, std::size_t line_no) {
  if (field.empty()) throw ParseError(source, line_no, "empty id field");
  std::uint64_t v = 0;
  for (char c : field) {
    if (c < '0' || c > '9') throw ParseError(source, line_no, "not a non-negative integer: '" + std::string(field) + "'");
    v = v * 10 + static_cast<std::uint64_t>(c - '0');
    if (v > 0xFFFFFFFFull) throw ParseError(source, line_no, "id out of range");
  }
  return static_cast<std::uint32_t>(v);
}

template <class Fn>
void for_each_line(const std::string& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto line = chomp(raw);
    if (skip_line(line)) continue;
    fn(line, line_no);
  }
}

// Reads `id<TAB>name[<TAB>description]` rows into a dense, id-indexed table.
inline std::vector<SideInfo> read_side_info(const std::string& path, bool with_description);

}  // namespace detail

// Strips URI prefixes ("http://dbpedia.org/resource/Jay_Chou" -> "Jay Chou").
// Names that are not URIs pass through unchanged.
inline std::string preprocess_name(std::string_view raw) {
  static const std::regex uri(R"(^[A-Za-z][A-Za-z0-9+.\-]*://.*)");
  std::string name(raw);
  if (!std::regex_match(name, uri)) return name;
  while (!name.empty() && (name.back() == '/' || name.back() == '#')) name.pop_back();
  const auto cut = name.find_last_of("/#");
  std::string label = cut == std::string::npos ? name : name.substr(cut + 1);
  std::replace(label.begin(), label.end(), '_', ' ');
  return label;
}

namespace detail {

inline std::vector<SideInfo> read_side_info(const std::string& path, bool with_description) {
  std::map<std::uint32_t, SideInfo> rows;
  for_each_line(path, [&](std::string_view line, std::size_t line_no) {
    const auto fields = split_tabs(line);
    const std::size_t max_fields = with_description ? 3 : 2;
    if (fields.size() < 2 || fields.size() > max_fields)
      throw ParseError(path, line_no, "expected " + std::string(with_description ? "2 or 3" : "2") + " tab-separated fields");
    const auto id = parse_id(fields[0], path, line_no);
    SideInfo info;
    info.name = preprocess_name(fields[1]);
    if (info.name.empty()) throw ParseError(path, line_no, "empty name");
    if (fields.size() == 3 && !fields[2].empty()) info.description = std::string(fields[2]);
    if (!rows.emplace(id, std::move(info)).second) throw IntegrityError(path + ":" + std::to_string(line_no) + ": duplicate id " + std::to_string(id));
  });
  std::vector<SideInfo> out;
  out.reserve(rows.size());
  for (auto& [id, info] : rows) {
    if (id != out.size()) throw IntegrityError(path + ": ids are not dense, missing id " + std::to_string(out.size()));
    out.push_back(std::move(info));
  }
  return out;
}

}  // namespace detail

// Builds undirected one-hop neighborhoods. Self-loops never enter N_e.
inline std::vector<std::vector<Neighbor>> build_neighborhoods(std::size_t entity_count, const std::vector<Triple>& triples) {
  std::vector<std::map<EntityId, std::set<RelationId>>> adj(entity_count);
  for (const auto& t : triples) {
    if (t.head == t.tail) continue;
    adj[t.head][t.tail].insert(t.relation);
    adj[t.tail][t.head].insert(t.relation);
  }
  std::vector<std::vector<Neighbor>> out(entity_count);
  for (std::size_t e = 0; e < entity_count; ++e) {
    out[e].reserve(adj[e].size());
    for (auto& [nb, rels] : adj[e]) out[e].push_back(Neighbor{nb, std::vector<RelationId>(rels.begin(), rels.end())});
  }
  return out;
}

// Assembles a validated graph from in-memory parts; load_kg uses this after parsing.
inline KnowledgeGraph make_kg(std::vector<SideInfo> entities, std::vector<SideInfo> relations, std::vector<Triple> triples) {
  KnowledgeGraph kg;
  kg.entities = std::move(entities);
  kg.relations = std::move(relations);
  for (const auto& t : triples) {
    if (t.head >= kg.entities.size() || t.tail >= kg.entities.size() || t.relation >= kg.relations.size())
      throw IntegrityError("triple (" + std::to_string(t.head) + "," + std::to_string(t.relation) + "," + std::to_string(t.tail) + ") references an unknown id");
  }
  std::set<Triple> seen;
  kg.triples.reserve(triples.size());
  for (const auto& t : triples) {
    if (seen.insert(t).second)
      kg.triples.push_back(t);
    else
      ++kg.duplicate_triples;
  }
  kg.neighborhoods = build_neighborhoods(kg.entities.size(), kg.triples);
  return kg;
}

inline KnowledgeGraph load_kg(const std::string& entities_path, const std::string& relations_path, const std::string& triples_path) {
  auto entities = detail::read_side_info(entities_path, true);
  auto relations = detail::read_side_info(relations_path, false);
  std::vector<Triple> triples;
  detail::for_each_line(triples_path, [&](std::string_view line, std::size_t line_no) {
    const auto f = detail::split_tabs(line);
    if (f.size() != 3) throw ParseError(triples_path, line_no, "expected head<TAB>relation<TAB>tail");
    triples.push_back(Triple{detail::parse_id(f[0], triples_path, line_no), detail::parse_id(f[1], triples_path, line_no),
                             detail::parse_id(f[2], triples_path, line_no)});
  });
  try {
    return make_kg(std::move(entities), std::move(relations), std::move(triples));
  } catch (const IntegrityError& e) {
    throw IntegrityError(triples_path + ": " + e.what());
  }
}

// Alignment file: id_in_G1<TAB>id_in_G2. Ids are checked against the graphs when given.
inline AlignmentSet load_alignments(const std::string& path, const KnowledgeGraph* g1 = nullptr, const KnowledgeGraph* g2 = nullptr) {
  AlignmentSet out;
  detail::for_each_line(path, [&](std::string_view line, std::size_t line_no) {
    const auto f = detail::split_tabs(line);
    if (f.size() != 2) throw ParseError(path, line_no, "expected id_in_G1<TAB>id_in_G2");
    AlignmentPair p{detail::parse_id(f[0], path, line_no), detail::parse_id(f[1], path, line_no)};
    if ((g1 && p.left >= g1->entity_count()) || (g2 && p.right >= g2->entity_count()))
      throw IntegrityError(path + ":" + std::to_string(line_no) + ": alignment references an unknown entity");
    out.push_back(p);
  });
  return out;
}

// Capped N_e. ascending_id keeps the smallest ids; degree_first keeps the
// highest-degree neighbors (ties by id). Either way the result is id-sorted.
inline std::vector<Neighbor> neighborhood(const KnowledgeGraph& kg, EntityId e, std::size_t cap,
                                          NeighborOrder order = NeighborOrder::ascending_id) {
  if (e >= kg.entity_count()) throw IdError("entity id " + std::to_string(e) + " out of range");
  const auto& all = kg.neighborhoods[e];
  if (all.size() <= cap) return all;
  if (order == NeighborOrder::ascending_id) return {all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cap)};
  std::vector<Neighbor> sorted = all;
  std::stable_sort(sorted.begin(), sorted.end(), [&](const Neighbor& a, const Neighbor& b) {
    return kg.neighborhoods[a.id].size() > kg.neighborhoods[b.id].size();
  });
  sorted.resize(cap);
  std::sort(sorted.begin(), sorted.end(), [](const Neighbor& a, const Neighbor& b) { return a.id < b.id; });
  return sorted;
}

// Returns (remaining, validation); validation holds floor(fraction * n) pairs.
// Both keep the input order.
inline std::pair<AlignmentSet, AlignmentSet> split_validation(const AlignmentSet& alignments, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("validation fraction must lie in [0, 1]");
  const std::size_t n = alignments.size();
  const auto take = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  std::vector<char> chosen(n, 0);
  for (std::size_t i = 0; i < take; ++i) chosen[order[i]] = 1;
  std::pair<AlignmentSet, AlignmentSet> out;
  for (std::size_t i = 0; i < n; ++i) (chosen[i] ? out.second : out.first).push_back(alignments[i]);
  return out;
}

}  // namespace iclea
