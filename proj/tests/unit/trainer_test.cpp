#include "test_support.hpp"

#include <sstream>

namespace iclea {
namespace {

TwinDataset small_twins(std::size_t n = 48, std::uint64_t seed = 37) {
  SynthConfig s;
  s.entities = n;
  s.relations = 4;
  s.name_dim = s.desc_dim = s.relation_dim = 8;
  s.seed = seed;
  return synthesize(s);
}

TrainConfig small_config(std::size_t b, std::size_t l) {
  TrainConfig c;
  c.batch_size = b;
  c.queue_length = l;
  c.learning_rate = 1e-3;
  c.epochs = 2;
  return c;
}

std::size_t expected_updates(std::size_t n1, std::size_t n2, std::size_t b, std::size_t l, std::size_t epochs) {
  // Pushes accumulate across epochs; each push past the first L emits.
  const std::size_t p1 = epochs * (n1 / b), p2 = epochs * (n2 / b);
  return (p1 > l ? p1 - l : 0) + (p2 > l ? p2 - l : 0);
}

TEST(Trainer, MomentumStartsAsExactCopy) {
  const auto d = small_twins();
  Trainer t(small_config(4, 2), d.g1, d.g2, {});
  const auto on = t.online().tensors(), mo = t.momentum().tensors();
  ASSERT_EQ(on.size(), mo.size());
  for (std::size_t k = 0; k < on.size(); ++k) EXPECT_TRUE(std::equal(on[k].values().begin(), on[k].values().end(), mo[k].values().begin()));
  EXPECT_EQ(t.encode(1), encode_all(t.momentum(), t.architecture(), t.input(1)));
}

TEST(Trainer, WarmUpThenOneUpdatePerEmittedBatch) {
  const auto d = small_twins();
  // 48 / 4 = 12 pushes per graph and epoch; L = 11 means one emission each.
  auto cfg = small_config(4, 11);
  cfg.epochs = 1;
  Trainer t(cfg, d.g1, d.g2, {});
  t.run_epoch();
  EXPECT_EQ(t.updates(), 2u);
  EXPECT_EQ(t.mining_passes(), 1u);
  EXPECT_EQ(t.queue(1).size(), 11u);
  EXPECT_EQ(t.queue(2).size(), 11u);
}

TEST(Trainer, NegativeCountForEveryValidShape) {
  const auto d = small_twins();
  Rng rng(5);
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t b = 1 + rng.below(8);
    const std::size_t l = rng.below(48 / b);  // (L+1) B <= 48
    auto cfg = small_config(b, l);
    Trainer t(cfg, d.g1, d.g2, {});
    t.train();
    EXPECT_EQ(t.updates(), expected_updates(48, 48, b, l, cfg.epochs)) << "B=" << b << " L=" << l;
    for (const auto& s : t.step_log()) ASSERT_EQ(s.negatives, (l + 1) * b - 1) << "B=" << b << " L=" << l;
  }
}

TEST(Trainer, QueueConstraintCheckedAtConstruction) {
  const auto d = small_twins();
  EXPECT_THROW(Trainer(small_config(4, 12), d.g1, d.g2, {}), ConstraintError);
  EXPECT_NO_THROW(Trainer(small_config(4, 11), d.g1, d.g2, {}));
}

TEST(Trainer, OneMiningPassPerEpoch) {
  const auto d = small_twins();
  auto cfg = small_config(4, 2);
  cfg.epochs = 3;
  Trainer t(cfg, d.g1, d.g2, {});
  t.train();
  EXPECT_EQ(t.mining_passes(), 3u);
  EXPECT_EQ(t.epoch(), 3u);
}

TEST(Trainer, LoggedTotalsAddUp) {
  const auto d = small_twins();
  Trainer t(small_config(4, 2), d.g1, d.g2, {});
  const auto res = t.train();
  for (const auto& s : t.step_log()) EXPECT_DOUBLE_EQ(s.total, s.nce + s.icl);
  // Epoch means equal the mean of the logged step losses over both graphs.
  for (const auto& m : res.history) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& s : t.step_log())
      if (s.epoch == m.epoch) {
        sum += s.total;
        ++n;
      }
    ASSERT_EQ(n, m.steps);
    EXPECT_NEAR(m.total * static_cast<double>(n), sum, 1e-9 * std::max(1.0, sum));
  }
  bool both = false;
  for (const auto& s : t.step_log()) both |= s.kg == 2;
  EXPECT_TRUE(both);
}

TEST(Trainer, NoIclLeavesPlainNce) {
  const auto d = small_twins();
  auto cfg = small_config(4, 2);
  cfg.ablation.no_icl = true;
  Trainer t(cfg, d.g1, d.g2, {});
  t.train();
  ASSERT_FALSE(t.step_log().empty());
  for (const auto& s : t.step_log()) {
    EXPECT_EQ(s.icl, 0.0);
    EXPECT_EQ(s.total, s.nce);
    EXPECT_GT(s.nce, 0.0);
  }
}

TEST(Trainer, NoMclLeavesIclOnly) {
  const auto d = small_twins();
  auto cfg = small_config(4, 2);
  cfg.ablation.no_mcl = true;
  Trainer t(cfg, d.g1, d.g2, {});
  t.train();
  double icl = 0.0;
  for (const auto& s : t.step_log()) {
    EXPECT_EQ(s.nce, 0.0);
    icl += s.icl;
  }
  EXPECT_GT(icl, 0.0);
}

TEST(Trainer, BothLossesOffIsConfigError) {
  const auto d = small_twins();
  auto cfg = small_config(4, 2);
  cfg.ablation.no_icl = cfg.ablation.no_mcl = true;
  EXPECT_THROW(Trainer(cfg, d.g1, d.g2, {}), ConfigError);
}

TEST(Trainer, ZeroPatienceStopsAtFirstStaleEpoch) {
  const auto d = small_twins();
  const auto [rest, val] = split_validation(d.alignments, 0.25, 1);
  auto cfg = small_config(4, 2);
  cfg.epochs = 30;
  cfg.patience = 0;
  Trainer t(cfg, d.g1, d.g2, val);
  const auto res = t.train();
  ASSERT_TRUE(res.stopped_early);
  EXPECT_FALSE(res.history.back().improved);
  for (std::size_t k = 0; k + 1 < res.history.size(); ++k) EXPECT_TRUE(res.history[k].improved);
  EXPECT_EQ(res.best_epoch, res.history.size() - 1);
}

TEST(Trainer, BestKeepsTheBestValidationEpoch) {
  const auto d = small_twins();
  const auto [rest, val] = split_validation(d.alignments, 0.25, 1);
  auto cfg = small_config(4, 2);
  cfg.epochs = 6;
  cfg.patience = 100;
  Trainer t(cfg, d.g1, d.g2, val);
  ModelState at_best;
  const auto res = t.train([&](const EpochMetrics& m, const Trainer& tr) {
    if (m.improved) at_best = tr.current();
  });
  EXPECT_FALSE(res.stopped_early);
  EXPECT_EQ(res.history.size(), 6u);
  EXPECT_EQ(encode_checkpoint(to_tensor_map(t.best())), encode_checkpoint(to_tensor_map(at_best)));
  double best = -1;
  for (const auto& m : res.history) best = std::max(best, *m.validation_hits1);
  EXPECT_EQ(res.best_validation, best);
}

TEST(Trainer, IdenticalSeedsGiveBitwiseIdenticalRuns) {
  const auto d = small_twins();
  const auto [rest, val] = split_validation(d.alignments, 0.25, 1);
  auto run = [&] {
    auto cfg = small_config(4, 2);
    cfg.epochs = 3;
    Trainer t(cfg, d.g1, d.g2, val);
    const auto res = t.train();
    std::ostringstream metrics, loss;
    Trainer::write_metrics_csv(metrics, res);
    t.write_loss_csv(loss);
    return std::make_tuple(metrics.str(), loss.str(), encode_checkpoint(to_tensor_map(t.best())));
  };
  const auto a = run(), b = run();
  EXPECT_EQ(std::get<0>(a), std::get<0>(b));
  EXPECT_EQ(std::get<1>(a), std::get<1>(b));
  EXPECT_TRUE(std::get<2>(a) == std::get<2>(b));
}

TEST(Trainer, DifferentSeedsDiverge) {
  const auto d = small_twins();
  auto cfg = small_config(4, 2);
  Trainer a(cfg, d.g1, d.g2, {});
  cfg.seed = 38;
  Trainer b(cfg, d.g1, d.g2, {});
  EXPECT_NE(a.encode(1), b.encode(1));
}

TEST(Checkpoint, ModelStateRoundTrip) {
  const auto d = small_twins();
  Trainer t(small_config(4, 2), d.g1, d.g2, {});
  t.train();
  const auto bytes = encode_checkpoint(to_tensor_map(t.current()));
  const auto back = from_tensor_map(decode_checkpoint(bytes));
  EXPECT_EQ(encode_checkpoint(to_tensor_map(back)), bytes);
  EXPECT_EQ(encode_all(back.online, back.arch, t.input(1)), t.encode(1));
}

TEST(Checkpoint, MissingOrMisshapenTensorsRejected) {
  const auto d = small_twins();
  Trainer t(small_config(4, 2), d.g1, d.g2, {});
  auto map = to_tensor_map(t.current());
  auto missing = map;
  missing.erase("momentum.agg.fusion.b");
  EXPECT_THROW(from_tensor_map(missing), CheckpointError);
  auto misshapen = map;
  misshapen["online.agg.fusion.b"].shape = {1, misshapen["online.agg.fusion.b"].values.size()};
  EXPECT_THROW(from_tensor_map(misshapen), CheckpointError);
  map.erase("meta.arch");
  EXPECT_THROW(from_tensor_map(map), CheckpointError);
}

TEST(Transfer, SelfTransferReproducesTrainerEmbeddings) {
  const auto d = small_twins();
  auto cfg = small_config(4, 2);
  cfg.ablation.no_desc = true;
  Trainer t(cfg, d.g1, d.g2, {});
  t.train();
  const auto opt = EncodeOptions::from(cfg);
  const auto [v1, v2] = encode_dataset(t.current(), d.g1, d.g2, opt);
  EXPECT_EQ(v1, t.encode(1));
  EXPECT_EQ(v2, t.encode(2));
  const auto direct = evaluate_both(v1, v2, d.alignments);
  const auto transfer = evaluate_transfer(t.current(), d, d.alignments, opt);
  EXPECT_EQ(direct.forward.ranks, transfer.forward.ranks);
  EXPECT_EQ(direct.backward.ranks, transfer.backward.ranks);
}

TEST(Transfer, UnseenGraphWithMoreRelationsStillEncodes) {
  const auto d = small_twins();
  Trainer t(small_config(4, 2), d.g1, d.g2, {});
  SynthConfig s;
  s.entities = 30;
  s.relations = 9;
  s.name_dim = s.desc_dim = s.relation_dim = 8;
  s.seed = 3;
  const auto other = synthesize(s);
  const auto r = evaluate_transfer(t.current(), other, other.alignments);
  EXPECT_EQ(r.forward.queries(), 30u);
}

TEST(Transfer, DimensionMismatchIsCheckpointError) {
  const auto d = small_twins();
  Trainer t(small_config(4, 2), d.g1, d.g2, {});
  SynthConfig s;
  s.entities = 30;
  s.name_dim = s.desc_dim = s.relation_dim = 6;
  const auto other = synthesize(s);
  EXPECT_THROW(encode_dataset(t.current(), other.g1, other.g2), CheckpointError);
}

TEST(Ablation, InputBlocksAndBranches) {
  const auto d = small_twins();
  Ablation no_name;
  no_name.no_name = true;
  const auto g = prepare_graph(d.g1, no_name, 15, NeighborOrder::ascending_id, 0, 8);
  for (std::size_t e = 0; e < g->fused.count; ++e) {
    for (std::size_t c = 0; c < 8; ++c) ASSERT_EQ(g->fused.row(e)[c], 0.0f);
    for (std::size_t c = 8; c < 16; ++c) ASSERT_EQ(g->fused.row(e)[c], d.g1.desc->row(e)[c - 8]);
  }
  Ablation no_desc;
  no_desc.no_desc = true;
  const auto h = prepare_graph(d.g1, no_desc, 15, NeighborOrder::ascending_id, 0, 8);
  EXPECT_EQ(h->fused.dim, 16u);
  for (std::size_t c = 8; c < 16; ++c) EXPECT_EQ(h->fused.row(3)[c], 0.0f);

  auto cfg = small_config(4, 2);
  cfg.ablation.no_rel = true;
  const auto arch = make_architecture(cfg, d.g1, d.g2);
  EXPECT_FALSE(arch.relation_branches);
  EXPECT_EQ(arch.fusion_input_dim(), 16u);
  EXPECT_EQ(arch.num_relations, 8u);
}

TEST(Trainer, LearningRateDecaysPerEpoch) {
  const auto d = small_twins();
  auto cfg = small_config(4, 2);
  cfg.lr_decay = 0.5;
  Trainer t(cfg, d.g1, d.g2, {});
  const auto res = t.train();
  EXPECT_DOUBLE_EQ(res.history[0].lr, 1e-3);
  EXPECT_DOUBLE_EQ(res.history[1].lr, 5e-4);
  EXPECT_DOUBLE_EQ(t.learning_rate(), 2.5e-4);
}

}  // namespace
}  // namespace iclea
