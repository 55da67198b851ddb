#pragma once

// Relation-aware neighborhood aggregator.
//
// Three one-hop aggregations run side by side over the capped neighborhood
// of each center entity and are fused by one fully connected layer:
//
//   entity GAT          attention over N_i plus the center itself, driven by
//                       q^T [W h_i || W h_j]
//   relation-gated GAT  attention over N_i whose logits are gates computed
//                       from trainable relation embeddings r_ij
//   semantic GAT        the entity GAT form applied to the mean relation-name
//                       embedding of each edge instead of the neighbor itself
//
//   v_i = act(W_f [h_en || h_st || h_se] + b_f)
//
// The activation everywhere is leaky ReLU. Projections are computed once per
// batch for the union of all entities the batch touches, then shared by the
// per-center attention steps.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "iclea/embedding_io.hpp"
#include "iclea/error.hpp"
#include "iclea/kg.hpp"
#include "iclea/matrix.hpp"
#include "iclea/parallel.hpp"
#include "iclea/rng.hpp"
#include "iclea/tensor.hpp"

namespace iclea {

// Extra block appended to the fusion input. `name` reproduces a fusion input
// of 7 x name_dim when name_dim == desc_dim.
enum class FusionExtra { none, name, input };

struct AggregatorConfig {
  std::size_t name_dim = 768;
  std::size_t desc_dim = 768;
  std::size_t relation_name_dim = 768;
  std::size_t num_relations = 0;  // trainable relation embeddings, both graphs together
  std::size_t heads = 1;
  std::size_t head_dim = 0;                // 0: name_dim + desc_dim
  std::size_t relation_embedding_dim = 0;  // 0: relation_name_dim
  std::size_t gate_hidden_dim = 0;         // 0: relation embedding dim
  std::size_t output_dim = 0;              // 0: 5 * name_dim
  bool relation_branches = true;           // false drops h_st and h_se
  FusionExtra fusion_extra = FusionExtra::none;
  double leaky_slope = 0.01;
  bool normalize_output = true;            // unit-norm rows out of encode_batch

  std::size_t input_dim() const { return name_dim + desc_dim; }
  std::size_t resolved_head_dim() const { return head_dim ? head_dim : input_dim(); }
  std::size_t branch_dim() const { return heads * resolved_head_dim(); }
  std::size_t resolved_relation_embedding_dim() const { return relation_embedding_dim ? relation_embedding_dim : relation_name_dim; }
  std::size_t resolved_gate_hidden_dim() const { return gate_hidden_dim ? gate_hidden_dim : resolved_relation_embedding_dim(); }
  std::size_t resolved_output_dim() const { return output_dim ? output_dim : 5 * name_dim; }
  std::size_t extra_dim() const {
    switch (fusion_extra) {
      case FusionExtra::none: return 0;
      case FusionExtra::name: return name_dim;
      case FusionExtra::input: return input_dim();
    }
    return 0;
  }
  std::size_t fusion_input_dim() const { return branch_dim() * (relation_branches ? 3 : 1) + extra_dim(); }

  void validate() const {
    if (name_dim == 0) throw ConfigError("name_dim must be positive");
    if (heads == 0) throw ConfigError("heads must be positive");
    if (relation_branches && relation_name_dim == 0) throw ConfigError("relation_name_dim must be positive");
    if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw ConfigError("leaky_slope must lie in [0, 1)");
  }
};

template <class T>
struct AggregatorParams {
  using Tensor = ad::Tensor<T>;

  std::vector<Tensor> en_w, en_q;  // per head: [hd, in], [2 hd]

  Tensor st_relations;  // [num_relations, rel_dim]
  std::vector<Tensor> st_w, st_gate1_w, st_gate1_b, st_gate2_w, st_gate2_b;

  std::vector<Tensor> se_w, se_center_w, se_q;  // per head: [hd, rel_name_dim], [hd, in], [2 hd]

  Tensor fusion_w, fusion_b;  // [out, fusion_in], [out]

  // Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], drawn in a fixed order.
  static AggregatorParams init(const AggregatorConfig& cfg, Rng& rng, bool requires_grad = true) {
    cfg.validate();
    auto uniform = [&](ad::Shape shape, std::size_t fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
      std::vector<T> v(ad::numel(shape));
      for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
      return Tensor::from(std::move(shape), std::move(v), requires_grad);
    };
    const std::size_t in = cfg.input_dim(), hd = cfg.resolved_head_dim();
    AggregatorParams p;
    for (std::size_t k = 0; k < cfg.heads; ++k) {
      p.en_w.push_back(uniform({hd, in}, in));
      p.en_q.push_back(uniform({2 * hd}, 2 * hd));
    }
    if (cfg.relation_branches) {
      const std::size_t rd = cfg.resolved_relation_embedding_dim(), gh = cfg.resolved_gate_hidden_dim();
      p.st_relations = uniform({cfg.num_relations, rd}, rd);
      for (std::size_t k = 0; k < cfg.heads; ++k) {
        p.st_w.push_back(uniform({hd, in}, in));
        p.st_gate1_w.push_back(uniform({gh, rd}, rd));
        p.st_gate1_b.push_back(uniform({gh}, rd));
        p.st_gate2_w.push_back(uniform({1, gh}, gh));
        p.st_gate2_b.push_back(uniform({1}, gh));
      }
      for (std::size_t k = 0; k < cfg.heads; ++k) {
        p.se_w.push_back(uniform({hd, cfg.relation_name_dim}, cfg.relation_name_dim));
        p.se_center_w.push_back(uniform({hd, in}, in));
        p.se_q.push_back(uniform({2 * hd}, 2 * hd));
      }
    }
    const std::size_t fin = cfg.fusion_input_dim(), out = cfg.resolved_output_dim();
    p.fusion_w = uniform({out, fin}, fin);
    p.fusion_b = uniform({out}, fin);
    return p;
  }

  // Stable names `agg.{en,st,se,fusion}.*`, in serialization order.
  std::vector<std::pair<std::string, Tensor>> named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto add_heads = [&](const std::string& base, const std::vector<Tensor>& ts) {
      for (std::size_t k = 0; k < ts.size(); ++k) out.emplace_back(base + "." + std::to_string(k), ts[k]);
    };
    add_heads("agg.en.w", en_w);
    add_heads("agg.en.q", en_q);
    if (st_relations.defined()) out.emplace_back("agg.st.relations", st_relations);
    add_heads("agg.st.w", st_w);
    add_heads("agg.st.gate1_w", st_gate1_w);
    add_heads("agg.st.gate1_b", st_gate1_b);
    add_heads("agg.st.gate2_w", st_gate2_w);
    add_heads("agg.st.gate2_b", st_gate2_b);
    add_heads("agg.se.w", se_w);
    add_heads("agg.se.center_w", se_center_w);
    add_heads("agg.se.q", se_q);
    out.emplace_back("agg.fusion.w", fusion_w);
    out.emplace_back("agg.fusion.b", fusion_b);
    return out;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
  }

  // Deep copy with its own storage.
  AggregatorParams clone(bool requires_grad) const {
    auto copy = [&](const Tensor& t) { return t.defined() ? Tensor::from(t.shape(), {t.values().begin(), t.values().end()}, requires_grad) : Tensor(); };
    auto copy_all = [&](const std::vector<Tensor>& ts) {
      std::vector<Tensor> out;
      for (const auto& t : ts) out.push_back(copy(t));
      return out;
    };
    AggregatorParams p;
    p.en_w = copy_all(en_w);
    p.en_q = copy_all(en_q);
    p.st_relations = copy(st_relations);
    p.st_w = copy_all(st_w);
    p.st_gate1_w = copy_all(st_gate1_w);
    p.st_gate1_b = copy_all(st_gate1_b);
    p.st_gate2_w = copy_all(st_gate2_w);
    p.st_gate2_b = copy_all(st_gate2_b);
    p.se_w = copy_all(se_w);
    p.se_center_w = copy_all(se_center_w);
    p.se_q = copy_all(se_q);
    p.fusion_w = copy(fusion_w);
    p.fusion_b = copy(fusion_b);
    return p;
  }

  // Overwrites values in place from a same-architecture parameter set.
  void assign_from(const AggregatorParams& other) {
    auto mine = tensors();
    auto theirs = other.tensors();
    if (mine.size() != theirs.size()) throw ContractError("assign_from: parameter sets differ in structure");
    for (std::size_t k = 0; k < mine.size(); ++k) {
      if (mine[k].shape() != theirs[k].shape()) throw ContractError("assign_from: shape mismatch");
      std::copy(theirs[k].values().begin(), theirs[k].values().end(), mine[k].mutable_values().begin());
    }
  }
};

// Fusion weights set to a (rectangular) identity and zero bias.
template <class T>
void set_fusion_identity(AggregatorParams<T>& p) {
  auto w = p.fusion_w.mutable_values();
  std::fill(w.begin(), w.end(), T(0));
  const std::size_t out = p.fusion_w.shape()[0], in = p.fusion_w.shape()[1];
  for (std::size_t i = 0; i < std::min(out, in); ++i) w[i * in + i] = T(1);
  auto b = p.fusion_b.mutable_values();
  std::fill(b.begin(), b.end(), T(0));
}

// Everything the encoder reads about one graph. The tables are referenced,
// not owned, and must outlive the GraphInput.
struct GraphInput {
  const KnowledgeGraph* kg = nullptr;
  const EmbeddingTable* fused = nullptr;           // h_e rows
  const EmbeddingTable* relation_names = nullptr;  // h_{n_r} rows, may be null without relation branches
  const EmbeddingTable* entity_names = nullptr;    // only read for FusionExtra::name
  std::size_t relation_offset = 0;                 // this graph's first row in AggregatorParams::st_relations
  std::vector<std::vector<Neighbor>> capped;
  // Per entity: one averaged relation-name row per capped neighbor, row-major.
  std::vector<std::vector<float>> semantic_rows;

  std::size_t entity_count() const { return kg->entity_count(); }

  static GraphInput build(const KnowledgeGraph& kg, const EmbeddingTable& fused, const EmbeddingTable* relation_names,
                          const EmbeddingTable* entity_names, std::size_t neighbor_cap,
                          NeighborOrder order = NeighborOrder::ascending_id, std::size_t relation_offset = 0) {
    if (fused.count != kg.entity_count()) throw CompatibilityError("fused embedding rows (" + std::to_string(fused.count) + ") != entity count (" + std::to_string(kg.entity_count()) + ")");
    if (relation_names && relation_names->count != kg.relation_count())
      throw CompatibilityError("relation embedding rows (" + std::to_string(relation_names->count) + ") != relation count (" + std::to_string(kg.relation_count()) + ")");
    if (entity_names && entity_names->count != kg.entity_count()) throw CompatibilityError("entity name rows != entity count");
    GraphInput g;
    g.kg = &kg;
    g.fused = &fused;
    g.relation_names = relation_names;
    g.entity_names = entity_names;
    g.relation_offset = relation_offset;
    g.capped.resize(kg.entity_count());
    g.semantic_rows.resize(kg.entity_count());
    for (EntityId e = 0; e < kg.entity_count(); ++e) {
      g.capped[e] = neighborhood(kg, e, neighbor_cap, order);
      if (!relation_names) continue;
      const std::size_t d = relation_names->dim;
      auto& rows = g.semantic_rows[e];
      rows.assign(g.capped[e].size() * d, 0.0f);
      for (std::size_t j = 0; j < g.capped[e].size(); ++j) {
        const auto& rels = g.capped[e][j].relations;
        std::vector<double> acc(d, 0.0);
        for (auto r : rels) {
          const auto src = relation_names->row(r);
          for (std::size_t c = 0; c < d; ++c) acc[c] += src[c];
        }
        for (std::size_t c = 0; c < d; ++c) rows[j * d + c] = static_cast<float>(acc[c] / static_cast<double>(rels.size()));
      }
    }
    return g;
  }
};

// Attention weights per (center, head), in batch order then head order.
struct AttentionTrace {
  std::vector<std::vector<double>> entity;
  std::vector<std::vector<double>> relation_gated;
  std::vector<std::vector<double>> semantic;
};

struct EncodeStats {
  std::size_t isolated_relation_gated = 0;
  std::size_t isolated_semantic = 0;
};

// Checks that tables and parameters agree with the configured dimensions.
template <class T>
void check_compatible(const AggregatorConfig& cfg, const AggregatorParams<T>& p, const GraphInput& g) {
  if (g.fused->dim != cfg.input_dim())
    throw CompatibilityError("fused embeddings have dim " + std::to_string(g.fused->dim) + ", encoder expects " + std::to_string(cfg.input_dim()));
  if (cfg.relation_branches) {
    if (!g.relation_names) throw CompatibilityError("relation branches need relation-name embeddings");
    if (g.relation_names->dim != cfg.relation_name_dim)
      throw CompatibilityError("relation-name embeddings have dim " + std::to_string(g.relation_names->dim) + ", encoder expects " + std::to_string(cfg.relation_name_dim));
    if (g.relation_offset + g.kg->relation_count() > p.st_relations.shape()[0])
      throw CompatibilityError("graph has more relations than the encoder's relation table covers");
  }
  if (cfg.fusion_extra == FusionExtra::name && (!g.entity_names || g.entity_names->dim != cfg.name_dim))
    throw CompatibilityError("fusion extra 'name' needs entity-name embeddings of dim " + std::to_string(cfg.name_dim));
}

namespace detail {

struct CenterPlan {
  std::size_t self_pos = 0;             // row in the union matrix
  std::vector<std::size_t> nbr_pos;     // rows in the union matrix
  std::size_t edge_begin = 0, edge_end = 0;
};

template <class T>
struct BatchPlan {
  std::vector<EntityId> centers;
  std::vector<EntityId> touched;  // sorted union of centers and their neighbors
  std::vector<CenterPlan> plan;
  std::vector<std::vector<std::size_t>> edge_relations;  // trainable-table rows per edge
  ad::Tensor<T> touched_inputs;   // [|touched|, in]
  ad::Tensor<T> center_inputs;    // [b, in]
  ad::Tensor<T> edge_semantic;    // [E, rel_name_dim]
  std::size_t edge_count = 0;
};

template <class T>
std::vector<T> to_values(std::span<const float> src) {
  return std::vector<T>(src.begin(), src.end());
}

template <class T>
BatchPlan<T> make_plan(const GraphInput& g, std::span<const EntityId> ids) {
  BatchPlan<T> b;
  b.centers.assign(ids.begin(), ids.end());
  for (auto e : ids) {
    if (e >= g.entity_count()) throw IdError("entity id " + std::to_string(e) + " out of range");
    b.touched.push_back(e);
    for (const auto& n : g.capped[e]) b.touched.push_back(n.id);
  }
  std::sort(b.touched.begin(), b.touched.end());
  b.touched.erase(std::unique(b.touched.begin(), b.touched.end()), b.touched.end());
  auto pos = [&](EntityId e) { return static_cast<std::size_t>(std::lower_bound(b.touched.begin(), b.touched.end(), e) - b.touched.begin()); };

  const std::size_t in = g.fused->dim;
  std::vector<T> touched_vals;
  touched_vals.reserve(b.touched.size() * in);
  for (auto e : b.touched) {
    const auto r = g.fused->row(e);
    touched_vals.insert(touched_vals.end(), r.begin(), r.end());
  }
  b.touched_inputs = ad::Tensor<T>::matrix(b.touched.size(), in, std::move(touched_vals));

  std::vector<T> center_vals;
  center_vals.reserve(ids.size() * in);
  for (auto e : ids) {
    const auto r = g.fused->row(e);
    center_vals.insert(center_vals.end(), r.begin(), r.end());
  }
  b.center_inputs = ad::Tensor<T>::matrix(ids.size(), in, std::move(center_vals));

  const std::size_t rd = g.relation_names ? g.relation_names->dim : 0;
  std::vector<T> semantic_vals;
  for (auto e : ids) {
    CenterPlan c;
    c.self_pos = pos(e);
    c.edge_begin = b.edge_count;
    for (std::size_t j = 0; j < g.capped[e].size(); ++j) {
      const auto& n = g.capped[e][j];
      c.nbr_pos.push_back(pos(n.id));
      std::vector<std::size_t> rels;
      for (auto r : n.relations) rels.push_back(g.relation_offset + r);
      b.edge_relations.push_back(std::move(rels));
      if (rd) {
        const auto& rows = g.semantic_rows[e];
        semantic_vals.insert(semantic_vals.end(), rows.begin() + static_cast<std::ptrdiff_t>(j * rd), rows.begin() + static_cast<std::ptrdiff_t>((j + 1) * rd));
      }
      ++b.edge_count;
    }
    c.edge_end = b.edge_count;
    b.plan.push_back(std::move(c));
  }
  if (rd) b.edge_semantic = ad::Tensor<T>::matrix(b.edge_count, rd, std::move(semantic_vals));
  return b;
}

inline std::vector<std::size_t> iota_range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = begin + i;
  return v;
}

template <class T>
void record(std::vector<std::vector<double>>* sink, const ad::Tensor<T>& weights) {
  if (sink) sink->emplace_back(weights.values().begin(), weights.values().end());
}

template <class T>
ad::Tensor<T> stack_heads(std::vector<std::vector<ad::Tensor<T>>>& per_center) {
  std::vector<ad::Tensor<T>> rows;
  rows.reserve(per_center.size());
  for (auto& heads : per_center) rows.push_back(heads.size() == 1 ? heads[0] : ad::concat(heads));
  return ad::stack_rows(rows);
}

}  // namespace detail

// h_en for every center of the plan: [b, heads * hd].
template <class T>
ad::Tensor<T> entity_gat_batch(const detail::BatchPlan<T>& b, const AggregatorParams<T>& p, const AggregatorConfig& cfg,
                               AttentionTrace* trace = nullptr) {
  const T slope = static_cast<T>(cfg.leaky_slope);
  const std::size_t hd = cfg.resolved_head_dim();
  std::vector<std::vector<ad::Tensor<T>>> out(b.centers.size());
  std::vector<std::vector<double>> weights_by_head;
  for (std::size_t k = 0; k < cfg.heads; ++k) {
    const auto z = ad::linear(b.touched_inputs, p.en_w[k]);
    const auto a_self = ad::matmul(z, ad::slice(p.en_q[k], 0, hd));
    const auto a_nbr = ad::matmul(z, ad::slice(p.en_q[k], hd, 2 * hd));
    for (std::size_t c = 0; c < b.centers.size(); ++c) {
      const auto& cp = b.plan[c];
      std::vector<std::size_t> members{cp.self_pos};
      members.insert(members.end(), cp.nbr_pos.begin(), cp.nbr_pos.end());
      const auto scores = ad::leaky_relu(ad::add(ad::gather(a_nbr, members), ad::element(a_self, cp.self_pos)), slope);
      const auto alpha = ad::softmax(scores);
      if (trace) trace->entity.emplace_back(alpha.values().begin(), alpha.values().end());
      out[c].push_back(ad::leaky_relu(ad::matmul(alpha, ad::gather(z, members)), slope));
    }
  }
  if (trace && cfg.heads > 1) {
    // Reorder from head-major to center-major.
    auto& t = trace->entity;
    const std::size_t n = b.centers.size(), start = t.size() - n * cfg.heads;
    std::vector<std::vector<double>> reordered;
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t k = 0; k < cfg.heads; ++k) reordered.push_back(std::move(t[start + k * n + c]));
    t.resize(start);
    for (auto& r : reordered) t.push_back(std::move(r));
  }
  return detail::stack_heads(out);
}

// h_st for every center: [b, heads * hd]. Isolated centers get zeros.
template <class T>
ad::Tensor<T> relation_gated_gat_batch(const detail::BatchPlan<T>& b, const AggregatorParams<T>& p, const AggregatorConfig& cfg,
                                       AttentionTrace* trace = nullptr, EncodeStats* stats = nullptr) {
  const T slope = static_cast<T>(cfg.leaky_slope);
  const std::size_t hd = cfg.resolved_head_dim();
  std::vector<std::vector<ad::Tensor<T>>> out(b.centers.size());
  ad::Tensor<T> edge_rel;
  if (b.edge_count) edge_rel = ad::segment_mean_rows(p.st_relations, b.edge_relations);
  std::vector<std::vector<std::vector<double>>> weights(b.centers.size());
  for (std::size_t k = 0; k < cfg.heads; ++k) {
    ad::Tensor<T> z, gamma;
    if (b.edge_count) {
      z = ad::linear(b.touched_inputs, p.st_w[k]);
      const auto hidden = ad::leaky_relu(ad::linear(edge_rel, p.st_gate1_w[k], p.st_gate1_b[k]), slope);
      gamma = ad::reshape(ad::leaky_relu(ad::linear(hidden, p.st_gate2_w[k], p.st_gate2_b[k]), slope), ad::Shape{b.edge_count});
    }
    for (std::size_t c = 0; c < b.centers.size(); ++c) {
      const auto& cp = b.plan[c];
      if (cp.nbr_pos.empty()) {
        if (stats && k == 0) ++stats->isolated_relation_gated;
        weights[c].emplace_back();
        out[c].push_back(ad::Tensor<T>::zeros({hd}));
        continue;
      }
      const auto beta = ad::softmax(ad::gather(gamma, detail::iota_range(cp.edge_begin, cp.edge_end)));
      weights[c].emplace_back(beta.values().begin(), beta.values().end());
      out[c].push_back(ad::leaky_relu(ad::matmul(beta, ad::gather(z, cp.nbr_pos)), slope));
    }
  }
  if (trace)
    for (auto& per_head : weights)
      for (auto& w : per_head) trace->relation_gated.push_back(std::move(w));
  return detail::stack_heads(out);
}

// h_se for every center: [b, heads * hd]. Isolated centers get zeros.
template <class T>
ad::Tensor<T> semantic_gat_batch(const detail::BatchPlan<T>& b, const AggregatorParams<T>& p, const AggregatorConfig& cfg,
                                 AttentionTrace* trace = nullptr, EncodeStats* stats = nullptr) {
  const T slope = static_cast<T>(cfg.leaky_slope);
  const std::size_t hd = cfg.resolved_head_dim();
  std::vector<std::vector<ad::Tensor<T>>> out(b.centers.size());
  std::vector<std::vector<std::vector<double>>> weights(b.centers.size());
  for (std::size_t k = 0; k < cfg.heads; ++k) {
    ad::Tensor<T> z_edge, a_edge;
    if (b.edge_count) {
      z_edge = ad::linear(b.edge_semantic, p.se_w[k]);
      a_edge = ad::matmul(z_edge, ad::slice(p.se_q[k], hd, 2 * hd));
    }
    const auto a_center = ad::matmul(ad::linear(b.center_inputs, p.se_center_w[k]), ad::slice(p.se_q[k], 0, hd));
    for (std::size_t c = 0; c < b.centers.size(); ++c) {
      const auto& cp = b.plan[c];
      if (cp.nbr_pos.empty()) {
        if (stats && k == 0) ++stats->isolated_semantic;
        weights[c].emplace_back();
        out[c].push_back(ad::Tensor<T>::zeros({hd}));
        continue;
      }
      const auto edges = detail::iota_range(cp.edge_begin, cp.edge_end);
      const auto scores = ad::leaky_relu(ad::add(ad::gather(a_edge, edges), ad::element(a_center, c)), slope);
      const auto alpha = ad::softmax(scores);
      weights[c].emplace_back(alpha.values().begin(), alpha.values().end());
      out[c].push_back(ad::leaky_relu(ad::matmul(alpha, ad::gather(z_edge, edges)), slope));
    }
  }
  if (trace)
    for (auto& per_head : weights)
      for (auto& w : per_head) trace->semantic.push_back(std::move(w));
  return detail::stack_heads(out);
}

// v = act(W_f concat(parts) + b_f). Accepts vectors or row-aligned matrices.
template <class T>
ad::Tensor<T> fuse_and_project(const std::vector<ad::Tensor<T>>& parts, const AggregatorParams<T>& p, const AggregatorConfig& cfg) {
  const auto x = parts.size() == 1 ? parts[0] : ad::concat(parts);
  return ad::leaky_relu(ad::linear(x, p.fusion_w, p.fusion_b), static_cast<T>(cfg.leaky_slope));
}

// Final embeddings v for `ids`, one row per id: [b, output_dim], scaled to
// unit norm when normalize_output is set. The graph is
// recorded only when the parameters require grad and grad mode is on.
template <class T>
ad::Tensor<T> encode_batch(const AggregatorParams<T>& p, const AggregatorConfig& cfg, const GraphInput& g, std::span<const EntityId> ids,
                           AttentionTrace* trace = nullptr, EncodeStats* stats = nullptr) {
  if (ids.empty()) throw ContractError("encode_batch needs at least one id");
  const auto plan = detail::make_plan<T>(g, ids);
  std::vector<ad::Tensor<T>> parts{entity_gat_batch(plan, p, cfg, trace)};
  if (cfg.relation_branches) {
    parts.push_back(relation_gated_gat_batch(plan, p, cfg, trace, stats));
    parts.push_back(semantic_gat_batch(plan, p, cfg, trace, stats));
  }
  if (cfg.fusion_extra == FusionExtra::input) {
    parts.push_back(plan.center_inputs);
  } else if (cfg.fusion_extra == FusionExtra::name) {
    std::vector<T> vals;
    for (auto e : ids) {
      const auto r = g.entity_names->row(e);
      vals.insert(vals.end(), r.begin(), r.end());
    }
    parts.push_back(ad::Tensor<T>::matrix(ids.size(), cfg.name_dim, std::move(vals)));
  }
  const auto v = fuse_and_project(parts, p, cfg);
  return cfg.normalize_output ? ad::normalize_rows(v) : v;
}

// Single-center views of the three aggregators.
template <class T>
ad::Tensor<T> entity_gat(const AggregatorParams<T>& p, const AggregatorConfig& cfg, const GraphInput& g, EntityId center, AttentionTrace* trace = nullptr) {
  const EntityId ids[] = {center};
  return ad::row(entity_gat_batch(detail::make_plan<T>(g, ids), p, cfg, trace), 0);
}

template <class T>
ad::Tensor<T> relation_gated_gat(const AggregatorParams<T>& p, const AggregatorConfig& cfg, const GraphInput& g, EntityId center,
                                 AttentionTrace* trace = nullptr, EncodeStats* stats = nullptr) {
  const EntityId ids[] = {center};
  return ad::row(relation_gated_gat_batch(detail::make_plan<T>(g, ids), p, cfg, trace, stats), 0);
}

template <class T>
ad::Tensor<T> semantic_gat(const AggregatorParams<T>& p, const AggregatorConfig& cfg, const GraphInput& g, EntityId center,
                           AttentionTrace* trace = nullptr, EncodeStats* stats = nullptr) {
  const EntityId ids[] = {center};
  return ad::row(semantic_gat_batch(detail::make_plan<T>(g, ids), p, cfg, trace, stats), 0);
}

template <class T>
Matrix to_matrix(const ad::Tensor<T>& t) {
  Matrix m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.size(); ++i) m.data[i] = static_cast<float>(t[i]);
  return m;
}

// Encodes `ids` without recording a graph, in parallel chunks.
template <class T>
Matrix encode_rows(const AggregatorParams<T>& p, const AggregatorConfig& cfg, const GraphInput& g, std::span<const EntityId> ids,
                   std::size_t chunk = 64) {
  Matrix out(ids.size(), cfg.resolved_output_dim());
  parallel_chunks(ids.size(), chunk, [&](std::size_t begin, std::size_t end) {
    ad::NoGradGuard no_grad;
    const auto v = encode_batch(p, cfg, g, ids.subspan(begin, end - begin));
    for (std::size_t i = 0; i < v.size(); ++i) out.data[begin * out.cols + i] = static_cast<float>(v[i]);
  });
  return out;
}

// Row e of the result is v_e for every entity of the graph.
template <class T>
Matrix encode_all(const AggregatorParams<T>& p, const AggregatorConfig& cfg, const GraphInput& g) {
  std::vector<EntityId> ids(g.entity_count());
  for (EntityId e = 0; e < ids.size(); ++e) ids[e] = e;
  return encode_rows(p, cfg, g, ids);
}

}  // namespace iclea
