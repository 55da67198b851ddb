// Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any FAIL.
//
// Synthetic experiments use the generator defaults (200 entities per side,
// sigma 0.05, edge dropout 0.1, seed 37, 32-dim embeddings) with B=16, L=8
// and learning rate 1e-4.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "iclea/iclea.hpp"

namespace fs = std::filesystem;
using namespace iclea;

namespace {

using Clock = std::chrono::steady_clock;
using DT = ad::Tensor<double>;

int failures = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
  std::cout << (ok ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
  if (!ok) ++failures;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(ICLEA_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

fs::path scratch(const std::string& tag) {
  const auto p = fs::temp_directory_path() / ("iclea_acceptance_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

DT random_tensor(Rng& rng, ad::Shape shape, double scale = 1.0) {
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return DT::from(std::move(shape), std::move(v), true);
}

EmbeddingTable unit_table(Rng& rng, std::size_t count, std::size_t dim, EmbeddingKind kind) {
  EmbeddingTable t{kind, count, dim, std::vector<float>(count * dim)};
  for (auto& x : t.data) x = static_cast<float>(rng.normal());
  for (std::size_t i = 0; i < count; ++i) {
    const double n = row_norm(t.row(i));
    for (auto& x : t.row(i)) x = static_cast<float>(x / n);
  }
  return t;
}

// Tensors whose gradient is zero up to difference noise have no meaningful
// relative error; they must agree with the numeric side in absolute terms.
constexpr double kZeroGradient = 1e-6, kZeroTolerance = 1e-8;
std::size_t zero_gradient_tensors = 0;

// Largest per-tensor ||analytic - numeric|| / max(||analytic||, ||numeric||)
// under central differences. A vanishing tensor that fails the absolute check
// scores infinity.
double fd_error(const std::function<DT()>& loss, std::vector<DT> params, double h = 1e-6) {
  for (auto& p : params) p.zero_grad();
  ad::backward(loss());
  double worst = 0.0;
  for (auto& p : params) {
    double diff = 0.0, na = 0.0, nn = 0.0;
    auto vals = p.mutable_values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double keep = vals[i];
      double up, down;
      {
        ad::NoGradGuard guard;
        vals[i] = keep + h;
        up = loss().item();
        vals[i] = keep - h;
        down = loss().item();
      }
      vals[i] = keep;
      const double num = (up - down) / (2 * h), ana = p.grad()[i];
      diff += (ana - num) * (ana - num);
      na += ana * ana;
      nn += num * num;
    }
    const double scale = std::max(std::sqrt(na), std::sqrt(nn));
    if (scale < kZeroGradient) {
      ++zero_gradient_tensors;
      if (std::sqrt(diff) > kZeroTolerance) worst = std::numeric_limits<double>::infinity();
      continue;
    }
    worst = std::max(worst, std::sqrt(diff) / scale);
  }
  return worst;
}

DT probe(const DT& y, std::uint64_t seed) {
  Rng r(seed);
  std::vector<double> w(y.size());
  for (auto& x : w) x = r.normal();
  return ad::sum(ad::mul(y, DT::from(y.shape(), w)));
}

std::vector<DT> with_prefix(const AggregatorParams<double>& p, const std::string& prefix) {
  std::vector<DT> out;
  for (const auto& [n, t] : p.named())
    if (n.rfind(prefix, 0) == 0) out.push_back(t);
  return out;
}

// ---------------------------------------------------------------------------

void gradient_correctness() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_what;
  std::size_t checks = 0;
  auto note = [&](double e, const std::string& what) {
    ++checks;
    if (e > worst) {
      worst = e;
      worst_what = what;
    }
  };
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    Rng rng(seed);
    // At most 5 entities, every dim at most 8.
    std::vector<Triple> t{{0, 0, 1}, {1, 1, 2}, {2, 0, 3}, {3, 2, 0}, {0, 1, 2}};
    if (seed % 2) t.push_back({4, 2, 1});
    std::vector<SideInfo> ents(5), rels(3);
    const auto kg = make_kg(ents, rels, t);
    const auto names = unit_table(rng, 5, 4, EmbeddingKind::entity_name);
    const auto descs = unit_table(rng, 5, 4, EmbeddingKind::entity_description);
    const auto fused = fuse(names, &descs);
    const auto rel_names = unit_table(rng, 3, 5, EmbeddingKind::relation_name);
    const auto g = GraphInput::build(kg, fused, &rel_names, &names, 15);
    AggregatorConfig cfg;
    cfg.name_dim = cfg.desc_dim = 4;
    cfg.relation_name_dim = 5;
    cfg.num_relations = 3;
    cfg.head_dim = 6;
    cfg.relation_embedding_dim = 4;
    cfg.gate_hidden_dim = 3;
    cfg.output_dim = 7;
    cfg.heads = 1 + seed % 2;
    cfg.leaky_slope = 0.2;
    auto p = AggregatorParams<double>::init(cfg, rng, true);
    const EntityId center = static_cast<EntityId>(seed % 4);
    note(fd_error([&] { return probe(entity_gat(p, cfg, g, center), seed); }, with_prefix(p, "agg.en.")), "entity GAT");
    note(fd_error([&] { return probe(relation_gated_gat(p, cfg, g, center), seed); }, with_prefix(p, "agg.st.")), "relation-gated GAT");
    note(fd_error([&] { return probe(semantic_gat(p, cfg, g, center), seed); }, with_prefix(p, "agg.se.")), "semantic GAT");
    std::vector<DT> parts{random_tensor(rng, {cfg.branch_dim()}), random_tensor(rng, {cfg.branch_dim()}), random_tensor(rng, {cfg.branch_dim()})};
    auto fusion_params = with_prefix(p, "agg.fusion.");
    fusion_params.insert(fusion_params.end(), parts.begin(), parts.end());
    note(fd_error([&] { return probe(fuse_and_project(parts, p, cfg), seed); }, fusion_params), "fusion");

    const std::size_t b = 1 + rng.below(5), d = 1 + rng.below(8), r = 1 + rng.below(8);
    auto v = random_tensor(rng, {b, d}, 0.5), pos = random_tensor(rng, {b, d}, 0.5), neg = random_tensor(rng, {r, d}, 0.5),
         cross = random_tensor(rng, {r, d}, 0.5);
    note(fd_error([&] { return nce_loss(v, pos, neg, 0.3); }, {v, pos, neg}), "NCE");
    IclInputs in;
    in.has_partner.assign(b, 1);
    if (b > 1) in.has_partner[b - 1] = 0;
    note(fd_error([&] { return icl_loss(v, pos, neg, cross, 0.3, 0.9, in); }, {v, pos, neg, cross}), "ICL");
  }
  const double secs = seconds_since(t0);
  report(worst < 1e-4 && secs < 120.0, "gradient-correctness",
         std::to_string(checks) + " checks, worst relative error " + fmt(worst, 3) + " (" + worst_what + "), " +
             std::to_string(zero_gradient_tensors) + " zero-gradient tensors matched absolutely, " + fmt(secs, 3) + " s");
}

void closed_form_losses() {
  Rng rng(11);
  double worst_nce = 0.0, worst_icl = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 1 + rng.below(6), d = 1 + rng.below(16), r = 1 + rng.below(2111);
    std::vector<double> u(d);
    double n = 0;
    for (auto& x : u) {
      x = rng.normal();
      n += x * x;
    }
    for (auto& x : u) x /= std::sqrt(n);
    auto rows = [&](std::size_t k) {
      std::vector<double> v;
      for (std::size_t i = 0; i < k; ++i) v.insert(v.end(), u.begin(), u.end());
      return DT::matrix(k, d, v);
    };
    const auto same = rows(b);
    worst_nce = std::max(worst_nce, std::abs(nce_loss(same, same, rows(r), 0.08).item() - std::log(static_cast<double>(r) + 1)));

    const auto v = random_tensor(rng, {b, d}), ps = random_tensor(rng, {b, d});
    const auto sn = random_tensor(rng, {r % 50 + 1, d}), cn = random_tensor(rng, {r % 30 + 1, d});
    IclInputs in;
    in.has_partner.assign(b, 1);
    const double s = nce_loss(v, ps, sn, 0.08).item(), c = nce_loss(v, ps, cn, 0.08).item();
    worst_icl = std::max(worst_icl, std::abs(icl_loss(v, ps, sn, cn, 0.08, 1.0, in).item() - s) / std::max(1.0, s));
    worst_icl = std::max(worst_icl, std::abs(icl_loss(v, ps, sn, cn, 0.08, 0.0, in).item() - c) / std::max(1.0, c));
  }
  report(worst_nce <= 1e-6 && worst_icl <= 1e-6, "closed-form-losses",
         "max |nce - ln(r+1)| " + fmt(worst_nce, 3) + ", max icl deviation at beta 0/1 " + fmt(worst_icl, 3));
}

TwinDataset desk_twins(std::size_t dim = 32) {
  SynthConfig s;
  s.name_dim = s.desc_dim = s.relation_dim = dim;
  return synthesize(s);
}

void queue_accounting() {
  const auto d = desk_twins(8);
  const std::size_t n = d.g1.kg.entity_count();
  bool ok = true;
  std::string detail;
  const std::pair<std::size_t, std::size_t> shapes[] = {{1, 0}, {7, 3}, {16, 8}, {20, 9}, {3, 60}, {50, 3}};
  for (auto [b, l] : shapes) {
    TrainConfig cfg;
    cfg.batch_size = b;
    cfg.queue_length = l;
    cfg.epochs = 2;
    cfg.learning_rate = 1e-4;
    Trainer t(cfg, d.g1, d.g2, {});
    std::size_t first_epoch_updates = 0;
    t.train([&](const EpochMetrics& m, const Trainer&) {
      if (m.epoch == 1) first_epoch_updates = m.steps;
    });
    const std::size_t pushes = n / b;
    const std::size_t want_first = 2 * (pushes > l ? pushes - l : 0);
    const std::size_t want_total = 2 * (2 * pushes > l ? 2 * pushes - l : 0);
    bool counts = true;
    for (const auto& s : t.step_log()) counts &= s.negatives == (l + 1) * b - 1;
    if (!counts || first_epoch_updates != want_first || t.updates() != want_total) {
      ok = false;
      detail += " [B=" + std::to_string(b) + " L=" + std::to_string(l) + " broken]";
    }
  }
  // The CLI must refuse (L+1)B > min(|E1|, |E2|) before any training.
  const auto dir = scratch("queue");
  run_cli("synth --out " + (dir / "data").string() + " --dim 8");
  const int code = run_cli("train --data " + (dir / "data").string() + " --out " + (dir / "run").string() + " --batch-size 16 --queue-length 12 --quiet");
  fs::remove_all(dir);
  ok &= code == 4;
  report(ok, "queue-accounting",
         std::to_string(std::size(shapes)) + " (B, L) shapes, negatives (L+1)B-1 on every step, warm-up respected; constraint violation exit " +
             std::to_string(code) + detail);
}

std::vector<std::optional<PseudoPair>> naive_search(const Matrix& s, const Matrix& t, double lambda) {
  std::vector<std::optional<PseudoPair>> out(s.rows);
  for (std::size_t i = 0; i < s.rows; ++i) {
    double best = std::numeric_limits<double>::infinity();
    EntityId arg = 0;
    for (std::size_t j = 0; j < t.rows; ++j) {
      double acc = 0;
      for (std::size_t c = 0; c < s.cols; ++c) {
        const double x = static_cast<double>(s.row(i)[c]) - static_cast<double>(t.row(j)[c]);
        acc += x * x;
      }
      if (std::sqrt(acc) < best) {
        best = std::sqrt(acc);
        arg = static_cast<EntityId>(j);
      }
    }
    if (best < lambda) out[i] = PseudoPair{arg, best};
  }
  return out;
}

void miner_oracle() {
  Rng rng(21);
  const double lambdas[] = {0.0, 0.5, 1.0, 1e30};
  std::size_t mismatches = 0, monotone_breaks = 0, largest = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n1 = trial % 10 == 0 ? 500 : 1 + rng.below(500), n2 = trial % 10 == 0 ? 500 : 1 + rng.below(500);
    const std::size_t d = 1 + rng.below(8);
    largest = std::max(largest, n1 * n2);
    Matrix v1(n1, d), v2(n2, d);
    const double scale = 0.1 + rng.uniform01();
    for (auto& x : v1.data) x = static_cast<float>(scale * rng.normal());
    for (auto& x : v2.data) x = static_cast<float>(scale * rng.normal());
    std::vector<MinedPairs> per;
    for (double lambda : lambdas) {
      per.push_back(mine(v1, v2, lambda));
      const auto f = naive_search(v1, v2, lambda), b = naive_search(v2, v1, lambda);
      auto cmp = [&](const PseudoPairSet& got, const std::vector<std::optional<PseudoPair>>& want) {
        for (std::size_t i = 0; i < want.size(); ++i) {
          if (got.pairs[i].has_value() != want[i].has_value()) ++mismatches;
          else if (want[i] && (got.pairs[i]->partner != want[i]->partner || std::abs(got.pairs[i]->distance - want[i]->distance) > 1e-6)) ++mismatches;
        }
      };
      cmp(per.back().forward, f);
      cmp(per.back().backward, b);
    }
    for (std::size_t k = 1; k < per.size(); ++k)
      for (auto side : {&MinedPairs::forward, &MinedPairs::backward})
        for (std::size_t i = 0; i < (per[k - 1].*side).pairs.size(); ++i)
          if ((per[k - 1].*side).pairs[i] && (per[k].*side).pairs[i] != (per[k - 1].*side).pairs[i]) ++monotone_breaks;
  }
  report(mismatches == 0 && monotone_breaks == 0, "miner-oracle",
         "50 instances up to 500x500, lambda {0, 0.5, 1, 1e30}: " + std::to_string(mismatches) + " mismatches against the naive scan, " +
             std::to_string(monotone_breaks) + " monotonicity breaks");
}

void momentum_contract() {
  AggregatorConfig a;
  a.name_dim = a.desc_dim = 4;
  a.relation_name_dim = 4;
  a.num_relations = 5;
  a.output_dim = 6;
  Rng rng(31);
  const auto online = AggregatorParams<double>::init(a, rng, false);
  auto mom = AggregatorParams<double>::init(a, rng, false);
  const auto frozen = online.clone(false);
  auto gap = [&] {
    double g = 0;
    const auto s = online.tensors(), t = mom.tensors();
    for (std::size_t k = 0; k < s.size(); ++k)
      for (std::size_t i = 0; i < s[k].size(); ++i) g = std::max(g, std::abs(t[k][i] - s[k][i]));
    return g;
  };
  const double m = 0.9999;
  double prev = gap(), worst = 0;
  for (int u = 0; u < 100; ++u) {
    momentum_update(online, mom, m);
    const double now = gap();
    worst = std::max(worst, std::abs(now / prev - m) / m);
    prev = now;
  }
  bool untouched = true;
  const auto s = online.tensors(), f = frozen.tensors();
  for (std::size_t k = 0; k < s.size(); ++k) untouched &= std::equal(s[k].values().begin(), s[k].values().end(), f[k].values().begin());
  report(worst <= 1e-6 && untouched, "momentum-contract",
         "100 updates at m=0.9999, worst relative deviation of the shrink factor " + fmt(worst, 3) + (untouched ? ", online parameters untouched" : ", online parameters changed"));
}

struct RunStats {
  double last = 0, peak = 0, best_test_hits1 = 0, best_test_hits10 = 0;
  std::size_t epochs = 0;
  double seconds = 0;
};

// One desk-scale run. Test Hits@1 is tracked per epoch for the stability
// criterion; the reported model is the best-validation snapshot.
RunStats desk_run(const TwinDataset& d, std::uint64_t seed, const Ablation& ablation) {
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.queue_length = 8;
  cfg.epochs = 50;
  cfg.learning_rate = 1e-4;
  cfg.seed = seed;
  cfg.ablation = ablation;
  const auto [test, validation] = split_validation(d.alignments, cfg.validation_fraction, cfg.seed);
  const auto t0 = Clock::now();
  Trainer t(cfg, d.g1, d.g2, validation);
  RunStats s;
  const auto res = t.train([&](const EpochMetrics&, const Trainer& tr) {
    s.last = evaluate(tr.encode(1), tr.encode(2), test, {1}).hits[0];
    s.peak = std::max(s.peak, s.last);
  });
  const auto best = evaluate_transfer(t.best(), d, test, EncodeOptions::from(cfg));
  s.best_test_hits1 = best.forward.hits_at(1);
  s.best_test_hits10 = best.forward.hits_at(10);
  s.epochs = res.history.size();
  s.seconds = seconds_since(t0);
  return s;
}

void synthetic_end_to_end(const RunStats& full37) {
  const bool ok = full37.best_test_hits1 >= 0.90 && full37.best_test_hits10 >= 0.98 && full37.epochs <= 50 && full37.seconds < 600;
  report(ok, "synthetic-end-to-end",
         "test Hits@1 " + fmt(full37.best_test_hits1) + ", Hits@10 " + fmt(full37.best_test_hits10) + " after " + std::to_string(full37.epochs) +
             " epochs, " + fmt(full37.seconds, 3) + " s");
}

void determinism() {
  const auto dir = scratch("determinism");
  const auto data = (dir / "data").string();
  bool ok = run_cli("synth --out " + data) == 0;
  const std::string common = " --epochs 4 --batch-size 16 --queue-length 8 --learning-rate 1e-4 --quiet";
  ok &= run_cli("train --data " + data + " --out " + (dir / "a").string() + common) == 0;
  ok &= run_cli("train --data " + data + " --out " + (dir / "b").string() + common) == 0;
  std::string detail;
  for (const char* f : {"metrics.csv", "loss.csv", "checkpoint.iclc", "last.iclc", "eval.csv"}) {
    const auto a = slurp(dir / "a" / f), b = slurp(dir / "b" / f);
    const bool same = !a.empty() && a == b;
    ok &= same;
    detail += std::string(" ") + f + (same ? " identical" : " DIFFER");
  }
  fs::remove_all(dir);
  report(ok, "determinism", "two CLI runs, seed 37:" + detail);
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  gradient_correctness();
  closed_form_losses();
  queue_accounting();
  miner_oracle();
  momentum_contract();

  const auto d = desk_twins();
  const std::vector<std::uint64_t> seeds{37, 38, 39, 40, 41};
  const std::vector<std::pair<std::string, Ablation>> variants{
      {"full", {}}, {"no_icl", {true, false, false, false, false}}, {"no_rel", {false, false, true, false, false}},
      {"no_desc", {false, false, false, true, false}}, {"no_name", {false, false, false, false, true}}};
  std::map<std::string, std::vector<RunStats>> runs;
  for (const auto& [name, ab] : variants)
    for (auto seed : seeds) {
      runs[name].push_back(desk_run(d, seed, ab));
      const auto& r = runs[name].back();
      std::cout << "  " << name << " seed " << seed << ": final " << fmt(r.last) << ", peak " << fmt(r.peak) << ", epochs " << r.epochs << ", "
                << fmt(r.seconds, 3) << " s" << std::endl;
    }

  synthetic_end_to_end(runs["full"][0]);

  auto mean_last = [&](const std::string& v) {
    double s = 0;
    for (const auto& r : runs[v]) s += r.last;
    return s / static_cast<double>(runs[v].size());
  };
  const double full = mean_last("full"), no_icl = mean_last("no_icl"), no_rel = mean_last("no_rel"), no_desc = mean_last("no_desc"),
               no_name = mean_last("no_name");
  report(full >= no_icl && full >= no_rel && full >= no_desc && no_name <= no_desc, "ablation-direction",
         "mean final Hits@1 over 5 seeds: full " + fmt(full) + ", no_icl " + fmt(no_icl) + ", no_rel " + fmt(no_rel) + ", no_desc " + fmt(no_desc) +
             ", no_name " + fmt(no_name));

  auto min_ratio = [&](const std::string& v) {
    double m = 1.0;
    for (const auto& r : runs[v]) m = std::min(m, r.peak > 0 ? r.last / r.peak : 0.0);
    return m;
  };
  report(min_ratio("full") >= 0.95, "training-stability",
         "min final/peak test Hits@1 over 5 seeds: with ICL " + fmt(min_ratio("full")) + ", without ICL " + fmt(min_ratio("no_icl")) + " (reported only)");

  determinism();
  std::cout << (failures ? "FAILED " : "ALL PASS ") << "(" << failures << " failing), " << fmt(seconds_since(t0), 4) << " s total" << std::endl;
  return failures ? 1 : 0;
}
