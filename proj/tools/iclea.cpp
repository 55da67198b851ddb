// iclea: train, evaluate and audit entity-alignment encoders.
//
// Exit codes: 0 ok, 2 bad input, 3 incompatible checkpoint or data,
// 4 rejected configuration. ICLEA_THREADS sets the worker count.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "iclea/iclea.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace iclea;

namespace {

constexpr int kExitInput = 2;
constexpr int kExitCompat = 3;
constexpr int kExitConfig = 4;

std::string fnv1a_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError("cannot read " + p.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

json digests(const fs::path& root) {
  json d = json::object();
  if (!fs::is_directory(root)) return d;
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) d[fs::relative(f, root).generic_string()] = "fnv1a64:" + fnv1a_file(f);
  return d;
}

json config_json(const TrainConfig& cfg) {
  json c = json::object();
  for (const auto& [name, field] : detail::config_fields()) c[name] = field.get(cfg);
  return c;
}

TrainConfig config_from_json(const json& c) {
  TrainConfig cfg;
  for (const auto& [key, value] : c.items()) set_config_value(cfg, key, value.get<std::string>(), "manifest");
  return cfg;
}

void write_text(const fs::path& p, const std::string& text) { write_file_atomic(p.string(), text); }

template <class Fn>
std::string render(Fn&& fn) {
  std::ostringstream os;
  fn(os);
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); }

// Options shared by commands that build a TrainConfig.
struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::size_t> epochs, batch, queue, seed, patience;
  std::optional<double> lr;
  bool no_icl = false, no_mcl = false, no_rel = false, no_desc = false, no_name = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "key = value config file");
    app->add_option("--set", sets, "override one key, as key=value")->take_all();
    app->add_option("--epochs", epochs);
    app->add_option("--batch-size", batch);
    app->add_option("--queue-length", queue);
    app->add_option("--learning-rate", lr);
    app->add_option("--seed", seed);
    app->add_option("--patience", patience);
    app->add_flag("--no-icl", no_icl, "drop the interactive contrastive term");
    app->add_flag("--no-mcl", no_mcl, "drop the queue contrastive term");
    app->add_flag("--no-rel", no_rel, "entity attention branch only");
    app->add_flag("--no-desc", no_desc, "zero the description block");
    app->add_flag("--no-name", no_name, "zero the name block");
  }

  TrainConfig resolve(TrainConfig cfg = {}) const {
    if (!config_path.empty()) cfg = load_config(config_path, cfg);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ParseError("--set expects key=value, got '" + kv + "'");
      set_config_value(cfg, detail::trim(std::string_view(kv).substr(0, eq)), std::string_view(kv).substr(eq + 1), "--set");
    }
    if (epochs) cfg.epochs = *epochs;
    if (batch) cfg.batch_size = *batch;
    if (queue) cfg.queue_length = *queue;
    if (lr) cfg.learning_rate = *lr;
    if (seed) cfg.seed = *seed;
    if (patience) cfg.patience = *patience;
    cfg.ablation.no_icl |= no_icl;
    cfg.ablation.no_mcl |= no_mcl;
    cfg.ablation.no_rel |= no_rel;
    cfg.ablation.no_desc |= no_desc;
    cfg.ablation.no_name |= no_name;
    cfg.validate();
    return cfg;
  }
};

// Train and evaluation splits are both derived from the seed, so eval can
// recover the held-out pairs of a run from its manifest.
AlignmentSet select_split(const AlignmentSet& gold, const TrainConfig& cfg, const std::string& which) {
  if (which == "all") return gold;
  auto [test, validation] = split_validation(gold, cfg.validation_fraction, cfg.seed);
  if (which == "test") return test;
  if (which == "validation") return validation;
  throw ParseError("--split must be test, validation or all");
}

void print_results(const BidirectionalResult& r) {
  print_hits_table(std::cout, {r.forward, r.backward});
  std::cout << "mean rank " << r.forward.mean_rank << " / " << r.backward.mean_rank << ", MRR " << r.forward.mrr << " / " << r.backward.mrr << "\n";
}

// --------------------------------------------------------------------------

int cmd_train(const std::string& data_dir, const std::string& out_dir, const ConfigArgs& args, bool quiet) {
  const auto t0 = std::chrono::steady_clock::now();
  const TrainConfig cfg = args.resolve();
  const auto data = load_dataset(data_dir);
  const double load_s = seconds_since(t0);
  auto [test, validation] = split_validation(data.alignments, cfg.validation_fraction, cfg.seed);

  Trainer trainer(cfg, data.g1, data.g2, validation);
  const auto t1 = std::chrono::steady_clock::now();
  const auto result = trainer.train([&](const EpochMetrics& m, const Trainer&) {
    if (quiet) return;
    std::cout << "epoch " << m.epoch << " steps " << m.steps << " nce " << m.nce << " icl " << m.icl << " coverage " << m.coverage_g1 << "/"
              << m.coverage_g2;
    if (m.validation_hits1) std::cout << " val_hits1 " << *m.validation_hits1 << (m.improved ? " *" : "");
    std::cout << "\n";
  });
  const double train_s = seconds_since(t1);

  fs::create_directories(out_dir);
  const fs::path out(out_dir);
  write_checkpoint((out / "checkpoint.iclc").string(), to_tensor_map(trainer.best()));
  write_checkpoint((out / "last.iclc").string(), to_tensor_map(trainer.current()));
  write_text(out / "metrics.csv", render([&](std::ostream& os) { Trainer::write_metrics_csv(os, result); }));
  write_text(out / "loss.csv", render([&](std::ostream& os) { trainer.write_loss_csv(os); }));

  const auto eval = evaluate_transfer(trainer.best(), data, test, EncodeOptions::from(cfg));
  write_text(out / "eval.csv", render([&](std::ostream& os) { write_hits_csv(os, {eval.forward, eval.backward}); }));

  json manifest;
  manifest["tool"] = "iclea";
  manifest["version"] = kVersion;
  manifest["config"] = config_json(cfg);
  manifest["seed"] = cfg.seed;
  manifest["data"] = fs::absolute(data_dir).string();
  manifest["inputs"] = digests(data_dir);
  manifest["epochs_run"] = result.history.size();
  manifest["best_epoch"] = result.best_epoch;
  manifest["best_validation_hits1"] = result.best_validation;
  manifest["stopped_early"] = result.stopped_early;
  manifest["updates"] = trainer.updates();
  manifest["test_hits1"] = eval.forward.hits_at(1);
  manifest["test_hits10"] = eval.forward.hits_at(10);
  manifest["checkpoint"] = "fnv1a64:" + fnv1a_file(out / "checkpoint.iclc");
  // Timings are the only field that differs between identical runs.
  manifest["timings"] = {{"load_s", load_s}, {"train_s", train_s}};
  write_text(out / "manifest.json", manifest.dump(2) + "\n");

  std::cout << "best epoch " << result.best_epoch << " of " << result.history.size() << ", test pairs " << test.size() << "\n";
  print_results(eval);
  return 0;
}

int cmd_eval(const std::string& data_dir, const std::string& checkpoint, const std::string& transfer_dir, const std::string& split,
             const std::string& dump_ranks, const std::string& csv, const ConfigArgs& args) {
  // Settings of the training run come from its manifest when one sits next
  // to the checkpoint; explicit flags override them.
  TrainConfig base;
  const fs::path manifest_path = fs::path(checkpoint).parent_path() / "manifest.json";
  if (fs::exists(manifest_path)) {
    std::ifstream in(manifest_path);
    try {
      base = config_from_json(json::parse(in).at("config"));
    } catch (const json::exception& e) {
      throw ParseError(manifest_path.string() + ": " + e.what());
    }
  }
  const TrainConfig cfg = args.resolve(base);
  const auto model = from_tensor_map(read_checkpoint(checkpoint));

  const bool transfer = !transfer_dir.empty();
  const auto data = load_dataset(transfer ? transfer_dir : data_dir);
  // A foreign dataset has no training split to hide, so all pairs count.
  const AlignmentSet gold = select_split(data.alignments, cfg, transfer && split == "test" ? "all" : split);
  const auto r = evaluate_transfer(model, data, gold, EncodeOptions::from(cfg));

  std::cout << (transfer ? "transfer" : "eval") << " on " << (transfer ? transfer_dir : data_dir) << ", " << gold.size() << " pairs\n";
  print_results(r);
  if (!csv.empty()) write_text(csv, render([&](std::ostream& os) { write_hits_csv(os, {r.forward, r.backward}); }));
  if (!dump_ranks.empty()) write_text(dump_ranks, render([&](std::ostream& os) { write_ranks_tsv(os, r.forward, gold); }));
  return 0;
}

// Mines pseudo pairs with a stored model and scores them against the gold
// alignments. Audit only; nothing here feeds back into training.
int cmd_mine_audit(const std::string& data_dir, const std::string& checkpoint, std::optional<double> lambda, const std::string& pairs_out,
                   const ConfigArgs& args) {
  TrainConfig cfg = args.resolve();
  if (lambda) cfg.lambda = *lambda;
  const auto data = load_dataset(data_dir);
  std::pair<Matrix, Matrix> v;
  if (checkpoint.empty()) {
    v = {fuse(data.g1.name, data.g1.desc ? &*data.g1.desc : nullptr, data.g1.name.dim).as_matrix(),
         fuse(data.g2.name, data.g2.desc ? &*data.g2.desc : nullptr, data.g2.name.dim).as_matrix()};
  } else {
    v = encode_dataset(from_tensor_map(read_checkpoint(checkpoint)), data.g1, data.g2, EncodeOptions::from(cfg));
  }
  const auto mined = mine(v.first, v.second, cfg.lambda);
  const auto merged = merge(mined.forward, mined.backward, v.first.rows, v.second.rows);
  const auto cov = coverage_stats(merged, v.first.rows, v.second.rows);

  std::map<EntityId, EntityId> truth;
  for (const auto& p : data.alignments) truth[p.left] = p.right;
  std::size_t judged = 0, correct = 0;
  for (EntityId e = 0; e < merged.g1.size(); ++e) {
    const auto it = truth.find(e);
    if (!merged.g1[e] || it == truth.end()) continue;
    ++judged;
    correct += merged.g1[e]->partner == it->second;
  }
  std::cout << "source " << (checkpoint.empty() ? "raw fused inputs" : checkpoint) << ", lambda " << cfg.lambda << "\n";
  std::cout << "mined G1->G2 " << mined.forward.size() << ", G2->G1 " << mined.backward.size() << "\n";
  for (int g = 1; g <= 2; ++g) {
    const auto& s = g == 1 ? cov.g1 : cov.g2;
    std::cout << "G" << g << " coverage " << s.coverage << " (" << s.paired << "), distance mean " << s.mean_distance << " median " << s.median_distance << " p90 " << s.p90_distance
              << "\n";
  }
  std::cout << "G1 pseudo-pair precision " << (judged ? static_cast<double>(correct) / static_cast<double>(judged) : 0.0) << " over " << judged
            << " gold-covered entities\n";
  if (!pairs_out.empty()) write_text(pairs_out, render([&](std::ostream& os) { write_pairs_tsv(os, mined.forward); }));
  return 0;
}

int cmd_synth(const std::string& out_dir, const SynthConfig& sc) {
  const auto d = synthesize(sc);
  save_dataset(out_dir, d);
  std::cout << "wrote " << out_dir << ": " << d.g1.kg.entity_count() << " entities, " << d.g1.kg.triples.size() << "/" << d.g2.kg.triples.size()
            << " triples, " << d.alignments.size() << " gold pairs\n";
  return 0;
}

int cmd_inspect(const std::vector<std::string>& paths) {
  for (const auto& path : paths) {
    const auto t = read_embeddings(path);  // validates header, length and norms
    double lo = 0.0, hi = 0.0, sum = 0.0;
    for (std::size_t i = 0; i < t.count; ++i) {
      const double n = row_norm(t.row(i));
      lo = i ? std::min(lo, n) : n;
      hi = i ? std::max(hi, n) : n;
      sum += n;
    }
    std::cout << path << ": kind " << to_string(t.kind) << ", count " << t.count << ", dim " << t.dim << ", norm min " << lo << " mean "
              << (t.count ? sum / static_cast<double>(t.count) : 0.0) << " max " << hi << ", ok\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interactive contrastive learning for self-supervised entity alignment"};
  app.require_subcommand(0, 1);
  bool print_config = false;
  app.add_flag("--print-config", print_config, "print the resolved default config and exit");

  ConfigArgs train_args, eval_args, audit_args;
  std::string data_dir, out_dir, checkpoint, transfer_dir, dump_ranks, csv, pairs_out, split = "test";
  bool quiet = false, train_print = false;
  std::optional<double> lambda;

  auto* train = app.add_subcommand("train", "train an encoder on a dataset directory");
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_flag("--quiet", quiet);
  train->add_flag("--print-config", train_print, "print the resolved config and exit");
  train_args.attach(train);

  auto* eval = app.add_subcommand("eval", "rank the gold counterparts with a checkpoint");
  eval->add_option("--data", data_dir, "dataset directory");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--transfer", transfer_dir, "evaluate on another dataset, no training");
  eval->add_option("--split", split, "test, validation or all")->check(CLI::IsMember({"test", "validation", "all"}));
  eval->add_option("--dump-ranks", dump_ranks, "write per-query ranks as TSV");
  eval->add_option("--csv", csv, "write hits as CSV");
  eval_args.attach(eval);

  auto* audit = app.add_subcommand("mine-audit", "mine pseudo pairs and score them against gold");
  audit->add_option("--data", data_dir)->required();
  audit->add_option("--checkpoint", checkpoint, "model to encode with; raw inputs when absent");
  audit->add_option("--lambda", lambda);
  audit->add_option("--pairs", pairs_out, "write mined G1->G2 pairs as TSV");
  audit_args.attach(audit);

  SynthConfig sc;
  auto* synth = app.add_subcommand("synth", "generate a twin-graph dataset");
  synth->add_option("--out", out_dir)->required();
  synth->add_option("--entities", sc.entities);
  synth->add_option("--relations", sc.relations);
  synth->add_option("--extra-edges", sc.extra_edges_per_entity, "extra edges per entity beyond a spanning tree");
  std::optional<std::size_t> synth_dim;
  synth->add_option("--dim", synth_dim, "dimension of every embedding table");
  synth->add_option("--sigma", sc.sigma, "embedding noise in the twin");
  synth->add_option("--dropout", sc.edge_dropout, "edge drop probability in the twin");
  synth->add_option("--seed", sc.seed);

  std::vector<std::string> inspect_paths;
  auto* inspect = app.add_subcommand("inspect-embeddings", "validate and summarize embedding files");
  inspect->add_option("files", inspect_paths)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInput;
  }

  try {
    if (print_config || train_print) {
      std::cout << to_text(train_print ? train_args.resolve() : TrainConfig{});
      return 0;
    }
    if (app.got_subcommand(train)) return cmd_train(data_dir, out_dir, train_args, quiet);
    if (app.got_subcommand(eval)) {
      if (data_dir.empty() && transfer_dir.empty()) throw InputError("eval needs --data or --transfer");
      return cmd_eval(data_dir, checkpoint, transfer_dir, split, dump_ranks, csv, eval_args);
    }
    if (app.got_subcommand(audit)) return cmd_mine_audit(data_dir, checkpoint, lambda, pairs_out, audit_args);
    if (app.got_subcommand(synth)) {
      if (synth_dim) sc.name_dim = sc.desc_dim = sc.relation_dim = *synth_dim;
      return cmd_synth(out_dir, sc);
    }
    if (app.got_subcommand(inspect)) return cmd_inspect(inspect_paths);
    std::cout << app.help();
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CompatibilityError& e) {
    std::cerr << "compatibility error: " << e.what() << "\n";
    return kExitCompat;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInput;
  }
}
