#pragma once

// The training loop. Each epoch:
//   1. encode both graphs with the online encoder and mine pseudo pairs,
//   2. walk a shuffled schedule of batches from both graphs, pushing each
//      onto its graph's negative queue,
//   3. whenever a queue hands back a positive batch, take one Adam step on
//      NCE + ICL and move the momentum encoder toward the online one.
// Validation Hits@1 drives early stopping; the best parameters are kept.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "iclea/aggregator.hpp"
#include "iclea/checkpoint.hpp"
#include "iclea/config.hpp"
#include "iclea/contrastive.hpp"
#include "iclea/dataset.hpp"
#include "iclea/evaluator.hpp"
#include "iclea/optim.hpp"
#include "iclea/pseudo_miner.hpp"
#include "iclea/rng.hpp"

namespace iclea {

// One graph's encoder inputs after ablations. Not movable: `input` points
// into the tables held alongside it.
struct PreparedGraph {
  EmbeddingTable names;
  EmbeddingTable fused;
  EmbeddingTable relation;
  GraphInput input;

  PreparedGraph() = default;
  PreparedGraph(const PreparedGraph&) = delete;
  PreparedGraph& operator=(const PreparedGraph&) = delete;
};

inline std::unique_ptr<PreparedGraph> prepare_graph(const GraphData& data, const Ablation& ablation, std::size_t neighbor_cap, NeighborOrder order,
                                                    std::size_t relation_offset, std::size_t desc_dim_if_missing) {
  auto g = std::make_unique<PreparedGraph>();
  g->names = data.name;
  if (ablation.no_name) std::fill(g->names.data.begin(), g->names.data.end(), 0.0f);
  const EmbeddingTable* desc = data.desc && !ablation.no_desc ? &*data.desc : nullptr;
  const std::size_t desc_dim = data.desc ? data.desc->dim : desc_dim_if_missing;
  g->fused = fuse(g->names, desc, desc_dim);
  g->relation = data.relation;
  g->input = GraphInput::build(data.kg, g->fused, &g->relation, &g->names, neighbor_cap, order, relation_offset);
  return g;
}

inline AggregatorConfig make_architecture(const TrainConfig& cfg, const GraphData& g1, const GraphData& g2) {
  AggregatorConfig a;
  a.name_dim = g1.name.dim;
  a.desc_dim = g1.desc ? g1.desc->dim : g1.name.dim;
  a.relation_name_dim = g1.relation.dim;
  const std::size_t desc2 = g2.desc ? g2.desc->dim : g2.name.dim;
  if (g2.name.dim != a.name_dim || desc2 != a.desc_dim || g2.relation.dim != a.relation_name_dim)
    throw CompatibilityError("the two graphs have different embedding dimensions");
  a.num_relations = g1.kg.relation_count() + g2.kg.relation_count();
  a.heads = cfg.heads;
  a.head_dim = cfg.head_dim;
  a.relation_embedding_dim = cfg.relation_embedding_dim;
  a.gate_hidden_dim = cfg.gate_hidden_dim;
  a.output_dim = cfg.output_dim;
  a.relation_branches = !cfg.ablation.no_rel;
  a.fusion_extra = cfg.fusion_extra;
  a.leaky_slope = cfg.leaky_slope;
  a.normalize_output = cfg.normalize_output;
  a.validate();
  return a;
}

// ---------------------------------------------------------------------------
// Checkpoint layout: "meta.arch" plus every parameter under "online." and
// "momentum." prefixes.

struct ModelState {
  AggregatorConfig arch;
  AggregatorParams<float> online;
  AggregatorParams<float> momentum;
};

inline TensorMap to_tensor_map(const ModelState& m) {
  TensorMap out;
  const auto& a = m.arch;
  StoredTensor meta;
  meta.values = {static_cast<float>(a.name_dim), static_cast<float>(a.desc_dim), static_cast<float>(a.relation_name_dim),
                 static_cast<float>(a.num_relations), static_cast<float>(a.heads), static_cast<float>(a.resolved_head_dim()),
                 static_cast<float>(a.resolved_relation_embedding_dim()), static_cast<float>(a.resolved_gate_hidden_dim()),
                 static_cast<float>(a.resolved_output_dim()), a.relation_branches ? 1.0f : 0.0f, static_cast<float>(static_cast<int>(a.fusion_extra)),
                 static_cast<float>(a.leaky_slope), a.normalize_output ? 1.0f : 0.0f};
  meta.shape = {meta.values.size()};
  out["meta.arch"] = meta;
  for (const auto& [name, t] : m.online.named()) out["online." + name] = store(t);
  for (const auto& [name, t] : m.momentum.named()) out["momentum." + name] = store(t);
  return out;
}

inline ModelState from_tensor_map(const TensorMap& map) {
  const auto meta = map.find("meta.arch");
  if (meta == map.end() || meta->second.values.size() != 13) throw CheckpointError("checkpoint lacks a valid meta.arch record");
  const auto& v = meta->second.values;
  auto sz = [&](std::size_t i) { return static_cast<std::size_t>(v[i]); };
  ModelState m;
  auto& a = m.arch;
  a.name_dim = sz(0);
  a.desc_dim = sz(1);
  a.relation_name_dim = sz(2);
  a.num_relations = sz(3);
  a.heads = sz(4);
  a.head_dim = sz(5);
  a.relation_embedding_dim = sz(6);
  a.gate_hidden_dim = sz(7);
  a.output_dim = sz(8);
  a.relation_branches = v[9] != 0.0f;
  a.fusion_extra = static_cast<FusionExtra>(static_cast<int>(v[10]));
  a.leaky_slope = static_cast<double>(v[11]);
  a.normalize_output = v[12] != 0.0f;
  // Builds correctly shaped tensors, then overwrites them from the map.
  Rng scratch(0);
  m.online = AggregatorParams<float>::init(a, scratch, true);
  m.momentum = m.online.clone(false);
  auto fill = [&](const std::string& prefix, AggregatorParams<float>& p) {
    for (auto& [name, t] : p.named()) {
      const auto it = map.find(prefix + name);
      if (it == map.end()) throw CheckpointError("checkpoint is missing tensor " + prefix + name);
      if (it->second.shape != t.shape())
        throw CheckpointError("tensor " + prefix + name + " has shape " + ad::shape_str(it->second.shape) + ", expected " + ad::shape_str(t.shape()));
      auto dst = t.mutable_values();
      std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
    }
  };
  fill("online.", m.online);
  fill("momentum.", m.momentum);
  return m;
}

// Makes a trained model usable on graphs with more relations than it was
// trained on: missing relation embeddings are set to the mean trained row.
inline void extend_relation_table(ModelState& m, std::size_t needed) {
  if (!m.arch.relation_branches || needed <= m.arch.num_relations) return;
  auto grow = [&](AggregatorParams<float>& p) {
    const std::size_t rows = p.st_relations.shape()[0], cols = p.st_relations.shape()[1];
    std::vector<float> vals(p.st_relations.values().begin(), p.st_relations.values().end());
    std::vector<double> mean(cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) mean[c] += vals[r * cols + c];
    for (auto& x : mean) x /= static_cast<double>(std::max<std::size_t>(rows, 1));
    for (std::size_t r = rows; r < needed; ++r)
      for (std::size_t c = 0; c < cols; ++c) vals.push_back(static_cast<float>(mean[c]));
    p.st_relations = ad::Tensor<float>::from({needed, cols}, std::move(vals), p.st_relations.requires_grad());
  };
  grow(m.online);
  grow(m.momentum);
  m.arch.num_relations = needed;
}

// Encoder settings that live outside the checkpoint: input ablations and
// neighborhood sampling. They must match the run that produced the model.
struct EncodeOptions {
  Ablation ablation;
  std::size_t neighbor_cap = 15;
  NeighborOrder neighbor_order = NeighborOrder::ascending_id;

  static EncodeOptions from(const TrainConfig& cfg) { return {cfg.ablation, cfg.neighbor_cap, cfg.neighbor_order}; }
};

// Online-encoder embeddings of both graphs under a stored model. Embedding
// dims that differ from the model's raise CheckpointError.
inline std::pair<Matrix, Matrix> encode_dataset(ModelState m, const GraphData& g1, const GraphData& g2, const EncodeOptions& opt = {}) {
  const auto& a = m.arch;
  for (const GraphData* g : {&g1, &g2}) {
    const std::size_t desc = g->desc ? g->desc->dim : a.desc_dim;
    if (g->name.dim != a.name_dim || desc != a.desc_dim || (a.relation_branches && g->relation.dim != a.relation_name_dim))
      throw CheckpointError("model expects name/desc/relation dims " + std::to_string(a.name_dim) + "/" + std::to_string(a.desc_dim) + "/" +
                            std::to_string(a.relation_name_dim) + ", data has " + std::to_string(g->name.dim) + "/" + std::to_string(desc) + "/" +
                            std::to_string(g->relation.dim));
  }
  extend_relation_table(m, g1.kg.relation_count() + g2.kg.relation_count());
  const auto p1 = prepare_graph(g1, opt.ablation, opt.neighbor_cap, opt.neighbor_order, 0, a.desc_dim);
  const auto p2 = prepare_graph(g2, opt.ablation, opt.neighbor_cap, opt.neighbor_order, g1.kg.relation_count(), a.desc_dim);
  return {encode_all(m.online, m.arch, p1->input), encode_all(m.online, m.arch, p2->input)};
}

// Runs a stored model on a dataset it may never have seen. No training.
inline BidirectionalResult evaluate_transfer(const ModelState& m, const TwinDataset& data, const AlignmentSet& gold, const EncodeOptions& opt = {},
                                             const std::vector<std::size_t>& ns = {1, 10}) {
  const auto [v1, v2] = encode_dataset(m, data.g1, data.g2, opt);
  return evaluate_both(v1, v2, gold, ns);
}

// ---------------------------------------------------------------------------

struct StepLog {
  std::size_t epoch = 0;
  std::size_t step = 0;
  int kg = 1;
  double nce = 0.0;
  double icl = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double pseudo_coverage = 0.0;  // fraction of the positive batch with a pseudo partner
  std::size_t negatives = 0;     // NCE negatives per positive entity
};

struct EpochMetrics {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double nce = 0.0;  // means over the epoch's steps
  double icl = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double coverage_g1 = 0.0;
  double coverage_g2 = 0.0;
  std::optional<double> validation_hits1;
  bool improved = false;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;
  double best_validation = -1.0;
  bool stopped_early = false;
};

class Trainer;
using EpochObserver = std::function<void(const EpochMetrics&, const Trainer&)>;

class Trainer {
 public:
  // The trainer only ever sees the validation split of the gold alignments.
  Trainer(TrainConfig cfg, const GraphData& g1, const GraphData& g2, AlignmentSet validation)
      : cfg_(std::move(cfg)), validation_(std::move(validation)), rng_(cfg_.seed) {
    cfg_.validate();
    check_queue_constraint(cfg_.batch_size, cfg_.queue_length, g1.kg.entity_count(), g2.kg.entity_count());
    arch_ = make_architecture(cfg_, g1, g2);
    graphs_[0] = prepare_graph(g1, cfg_.ablation, cfg_.neighbor_cap, cfg_.neighbor_order, 0, arch_.desc_dim);
    graphs_[1] = prepare_graph(g2, cfg_.ablation, cfg_.neighbor_cap, cfg_.neighbor_order, g1.kg.relation_count(), arch_.desc_dim);
    online_ = AggregatorParams<float>::init(arch_, rng_, true);
    momentum_ = online_.clone(false);
    for (const auto& g : graphs_) check_compatible(arch_, online_, g->input);
    optimizer_ = std::make_unique<ad::Adam<float>>(online_.tensors(), ad::AdamOptions{cfg_.learning_rate, cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_epsilon});
    queues_.emplace_back(cfg_.queue_length, cfg_.batch_size, 1);
    queues_.emplace_back(cfg_.queue_length, cfg_.batch_size, 2);
    best_ = snapshot();
  }

  const TrainConfig& config() const { return cfg_; }
  const AggregatorConfig& architecture() const { return arch_; }
  const AggregatorParams<float>& online() const { return online_; }
  const AggregatorParams<float>& momentum() const { return momentum_; }
  const GraphInput& input(int graph) const { return graphs_[graph - 1]->input; }
  const std::vector<StepLog>& step_log() const { return steps_; }
  const PseudoLookup& pseudo_pairs() const { return lookup_; }
  const NegativeQueue& queue(int graph) const { return queues_[graph - 1]; }
  std::size_t updates() const { return optimizer_->step_count(); }
  std::size_t mining_passes() const { return mining_passes_; }
  std::size_t epoch() const { return epoch_; }
  double learning_rate() const { return optimizer_->learning_rate(); }

  // Online-encoder embeddings of every entity of graph 1 or 2.
  Matrix encode(int graph) const { return encode_all(online_, arch_, input(graph)); }

  EpochMetrics run_epoch() {
    ++epoch_;
    const Matrix v1 = encode(1), v2 = encode(2);
    const auto mined = mine(v1, v2, cfg_.lambda, epoch_);
    lookup_ = merge(mined.forward, mined.backward, v1.rows, v2.rows);
    ++mining_passes_;
    const auto cov = coverage_stats(lookup_, v1.rows, v2.rows);

    struct Scheduled {
      int graph;
      std::vector<EntityId> ids;
    };
    std::vector<Scheduled> schedule;
    for (int g = 1; g <= 2; ++g) {
      std::vector<EntityId> order(input(g).entity_count());
      for (EntityId e = 0; e < order.size(); ++e) order[e] = e;
      rng_.shuffle(order.begin(), order.end());
      for (std::size_t b = 0; b + cfg_.batch_size <= order.size(); b += cfg_.batch_size)
        schedule.push_back({g, std::vector<EntityId>(order.begin() + static_cast<std::ptrdiff_t>(b), order.begin() + static_cast<std::ptrdiff_t>(b + cfg_.batch_size))});
    }
    rng_.shuffle(schedule.begin(), schedule.end());

    EpochMetrics m;
    m.epoch = epoch_;
    m.lr = optimizer_->learning_rate();
    m.coverage_g1 = cov.g1.coverage;
    m.coverage_g2 = cov.g2.coverage;
    for (auto& s : schedule) {
      QueuedBatch batch{s.ids, encode_rows(momentum_, arch_, input(s.graph), s.ids)};
      auto positive = queues_[s.graph - 1].push(std::move(batch));
      if (!positive) continue;
      const auto log = step(s.graph, *positive);
      m.nce += log.nce;
      m.icl += log.icl;
      m.total += log.total;
      ++m.steps;
    }
    if (m.steps) {
      m.nce /= static_cast<double>(m.steps);
      m.icl /= static_cast<double>(m.steps);
      m.total /= static_cast<double>(m.steps);
    }
    optimizer_->set_learning_rate(optimizer_->learning_rate() * cfg_.lr_decay);
    if (!validation_.empty()) m.validation_hits1 = validation_hits1();
    return m;
  }

  // Hits@1 (G1 -> G2) of the online encoder on the validation split.
  double validation_hits1() const {
    if (validation_.empty()) return 0.0;
    return evaluate(encode(1), encode(2), validation_, {1}).hits[0];
  }

  TrainResult train(const EpochObserver& observer = {}) {
    TrainResult res;
    std::size_t stale = 0;
    while (epoch_ < cfg_.epochs) {
      auto m = run_epoch();
      if (m.validation_hits1) {
        if (*m.validation_hits1 > res.best_validation) {
          res.best_validation = *m.validation_hits1;
          res.best_epoch = m.epoch;
          best_ = snapshot();
          m.improved = true;
          stale = 0;
        } else {
          ++stale;
        }
      } else {
        res.best_epoch = m.epoch;
        best_ = snapshot();
        m.improved = true;
      }
      res.history.push_back(m);
      if (observer) observer(m, *this);
      if (m.validation_hits1 && stale > cfg_.patience) {
        res.stopped_early = true;
        break;
      }
    }
    return res;
  }

  // Parameters of the best validation epoch (or the latest, without validation).
  const ModelState& best() const { return best_; }
  ModelState current() const { return snapshot(); }

  void write_loss_csv(std::ostream& out) const {
    out << "epoch,step,kg,nce,icl,total,lr,pseudo_coverage\n";
    for (const auto& s : steps_)
      out << s.epoch << ',' << s.step << ',' << s.kg << ',' << detail::format_double(s.nce) << ',' << detail::format_double(s.icl) << ','
          << detail::format_double(s.total) << ',' << detail::format_double(s.lr) << ',' << detail::format_double(s.pseudo_coverage) << '\n';
  }

  static void write_metrics_csv(std::ostream& out, const TrainResult& r) {
    out << "epoch,steps,nce,icl,total,lr,coverage_g1,coverage_g2,val_hits1,improved\n";
    for (const auto& m : r.history)
      out << m.epoch << ',' << m.steps << ',' << detail::format_double(m.nce) << ',' << detail::format_double(m.icl) << ','
          << detail::format_double(m.total) << ',' << detail::format_double(m.lr) << ',' << detail::format_double(m.coverage_g1) << ','
          << detail::format_double(m.coverage_g2) << ',' << (m.validation_hits1 ? detail::format_double(*m.validation_hits1) : std::string()) << ','
          << (m.improved ? 1 : 0) << '\n';
  }

 private:
  ModelState snapshot() const { return {arch_, online_.clone(false), momentum_.clone(false)}; }

  static Matrix stack(const Matrix& top, const Matrix& bottom) {
    if (bottom.rows == 0) return top;
    Matrix out(top.rows + bottom.rows, top.cols);
    std::copy(top.data.begin(), top.data.end(), out.data.begin());
    std::copy(bottom.data.begin(), bottom.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(top.data.size()));
    return out;
  }

  StepLog step(int graph, const QueuedBatch& positive) {
    const int other = 3 - graph;
    const auto& ids = positive.ids;
    const std::size_t b = ids.size();
    const auto& queue = queues_[graph - 1];
    const auto& other_queue = queues_[other - 1];

    const auto v = encode_batch(online_, arch_, input(graph), ids);
    const Matrix vp = encode_rows(momentum_, arch_, input(graph), ids);
    // Same-graph negatives: the batch's own momentum rows, then the queue.
    const Matrix same = stack(vp, queue.embeddings());
    std::vector<unsigned char> diagonal(b * same.rows, 0);
    for (std::size_t x = 0; x < b; ++x) diagonal[x * same.rows + x] = 1;

    StepLog log;
    log.epoch = epoch_;
    log.step = optimizer_->step_count() + 1;
    log.kg = graph;
    log.lr = optimizer_->learning_rate();
    log.negatives = same.rows - 1;

    const auto same_t = to_tensor<float>(same);
    ad::Tensor<float> loss = ad::Tensor<float>::scalar(0.0f);
    if (!cfg_.ablation.no_mcl) {
      const auto nce = ad::mean(nce_rows(v, to_tensor<float>(vp), same_t, cfg_.temperature, diagonal));
      log.nce = nce.item();
      loss = nce;
    }

    const auto& partners = lookup_.side(graph);
    std::vector<unsigned char> has(b, 0);
    std::vector<EntityId> partner_ids;
    for (std::size_t x = 0; x < b; ++x)
      if (partners[ids[x]]) {
        has[x] = 1;
        partner_ids.push_back(partners[ids[x]]->partner);
      }
    log.pseudo_coverage = static_cast<double>(partner_ids.size()) / static_cast<double>(b);

    if (!cfg_.ablation.no_icl && !partner_ids.empty()) {
      const Matrix pm = encode_rows(momentum_, arch_, input(other), partner_ids);
      Matrix pseudo(b, pm.cols);
      for (std::size_t x = 0, k = 0; x < b; ++x)
        if (has[x]) {
          std::copy(pm.row(k).begin(), pm.row(k).end(), pseudo.row(x).begin());
          ++k;
        }
      const Matrix cross = other_queue.embeddings();
      const auto cross_ids = other_queue.ids();
      std::vector<unsigned char> cross_exclude(b * cross.rows, 0);
      for (std::size_t x = 0; x < b; ++x) {
        if (!has[x]) continue;
        const EntityId p = partners[ids[x]]->partner;
        for (std::size_t k = 0; k < cross_ids.size(); ++k)
          if (cross_ids[k] == p) cross_exclude[x * cross.rows + k] = 1;
      }
      IclInputs icl_in{has, diagonal, cross_exclude};
      const auto icl = icl_loss(v, to_tensor<float>(pseudo), same_t, cross.rows ? to_tensor<float>(cross) : ad::Tensor<float>(), cfg_.temperature,
                                cfg_.beta, icl_in);
      log.icl = icl.item();
      loss = cfg_.ablation.no_mcl ? icl : total_loss(loss, icl);
    }
    log.total = log.nce + log.icl;

    ad::backward(loss);
    optimizer_->step();
    momentum_update(online_, momentum_, cfg_.momentum);
    steps_.push_back(log);
    return log;
  }

  TrainConfig cfg_;
  AlignmentSet validation_;
  Rng rng_;
  AggregatorConfig arch_;
  std::unique_ptr<PreparedGraph> graphs_[2];
  AggregatorParams<float> online_;
  AggregatorParams<float> momentum_;
  std::unique_ptr<ad::Adam<float>> optimizer_;
  std::vector<NegativeQueue> queues_;
  PseudoLookup lookup_;
  std::vector<StepLog> steps_;
  ModelState best_;
  std::size_t epoch_ = 0;
  std::size_t mining_passes_ = 0;
};

}  // namespace iclea
