// fedgrec: command-line runner for ingest, training, evaluation, the public
// ratio sweep and ablations. Exit status: 0 success, 1 runtime failure,
// 2 usage or configuration error.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedgrec/errors.hpp"
#include "fedgrec/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fedgrec;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> threads;
};

RunConfig resolve(const Globals& g) {
  RunConfig cfg = g.config.empty() ? default_config() : load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.out.empty()) cfg.output_dir = g.out;
  if (g.threads) cfg.fed.threads = *g.threads;
  cfg.validate();
  return cfg;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

fs::path open_run_dir(const RunConfig& cfg) {
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  write_json(dir / "resolved_config.json", to_json(cfg));
  return dir;
}

json run_header(const RunConfig& cfg, const std::string& command) {
  return {{"command", command},
          {"version", version()},
          {"seed", cfg.seed},
          {"config_hash", config_hash(cfg)}};
}

Dataset filtered_source(const RunConfig& cfg) {
  return filter_min_interactions(load_source(cfg.data), cfg.data.min_interactions,
                                 cfg.data.min_item_interactions);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json counts(const Dataset& ds) {
  return {{"users", ds.n_users}, {"items", ds.n_items}, {"interactions", ds.size()}};
}

// ---------------------------------------------------------------------------

int cmd_synth(const Globals& g, const std::string& path) {
  const auto cfg = resolve(g);
  const auto ds = make_block_dataset(cfg.data.synthetic);
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path);
  for (const auto& x : ds.interactions)
    out << ds.user_ids.raw[x.user] << '\t' << ds.item_ids.raw[x.item] << '\t' << x.rating
        << '\t' << x.timestamp << '\n';
  if (!out) throw std::runtime_error("cannot write " + path);
  std::cerr << "wrote " << ds.size() << " interactions to " << path << '\n';
  return 0;
}

int cmd_ingest(const Globals& g, const std::string& input, bool dump_edges) {
  auto cfg = resolve(g);
  const auto raw = load_interactions(input);
  const auto ds = filter_min_interactions(raw, cfg.data.min_interactions,
                                          cfg.data.min_item_interactions);
  const SeedPlan seeds(cfg.seed);
  const auto parts = split(ds, seeds.split, cfg.data.split_mode);

  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  write_interactions(ds, dir / "interactions.tsv");
  ds.user_ids.write(dir / "user_ids.tsv");
  ds.item_ids.write(dir / "item_ids.tsv");
  write_interactions(parts.train, dir / "train.tsv");
  write_interactions(parts.validation, dir / "validation.tsv");
  write_interactions(parts.test, dir / "test.tsv");
  write_interactions(parts.tuning_subset, dir / "tuning.tsv");

  json files = {"interactions.tsv", "user_ids.tsv", "item_ids.tsv", "train.tsv",
                "validation.tsv", "test.tsv", "tuning.tsv"};
  if (dump_edges) {
    const auto users = implicit_user_relations(parts.train, cfg.graph.tau, cfg.graph.top_m);
    const auto items =
        implicit_item_relations(parts.train, cfg.graph.top_m, cfg.graph.shrinkage);
    const ImplicitEdges* sets[] = {&users, &items};
    write_implicit_edges(dir / "implicit_edges.tsv", sets);
    files.push_back("implicit_edges.tsv");
  }

  const json manifest{
      {"format", "fedgrec-dataset"},
      {"version", version()},
      {"input", fs::path(input).filename().string()},
      {"seed", cfg.seed},
      {"split_mode", to_json(cfg)["data"]["split_mode"]},
      {"min_interactions", cfg.data.min_interactions},
      {"min_item_interactions", cfg.data.min_item_interactions},
      {"raw", counts(raw)},
      {"filtered", counts(ds)},
      {"split",
       {{"train", parts.train.size()},
        {"validation", parts.validation.size()},
        {"test", parts.test.size()},
        {"tuning_subset", parts.tuning_subset.size()}}},
      {"files", files}};
  write_json(dir / "manifest.json", manifest);
  std::cout << "users " << ds.n_users << "  items " << ds.n_items << "  interactions "
            << ds.size() << '\n';
  return 0;
}

int cmd_train(const Globals& g, const std::string& mode_name, bool quiet) {
  const auto cfg = resolve(g);
  RunMode mode = RunMode::kFederated;
  if (mode_name == "centralized_public")
    mode = RunMode::kCentralizedPublic;
  else if (mode_name != "federated")
    throw ConfigError("--mode must be federated or centralized_public");

  const auto dir = open_run_dir(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = filtered_source(cfg);

  RunHooks hooks;
  if (!quiet)
    hooks.on_round = [&](const RoundRecord& r) {
      if (r.round % 10 == 0 || r.round == cfg.fed.rounds || r.validation) {
        std::cerr << "round " << r.round << "  loss " << r.mean_loss;
        if (r.validation) std::cerr << "  val recall@20 " << r.validation->recall;
        std::cerr << '\n';
      }
    };
  const auto result = run_experiment(cfg, data, mode, hooks);

  write_history_csv(dir / "history.csv", result.state.history);
  write_epoch_losses_csv(dir / "epoch_losses.csv", result.state.history);
  save_checkpoint(dir / "checkpoint", result.final_params, cfg.checkpoint_dtype);

  auto summary = run_header(cfg, "train");
  summary["mode"] = to_string(mode);
  summary["rounds_completed"] = result.state.round;
  summary["stopped_early"] = result.state.round < cfg.fed.rounds;
  summary["final_train_loss"] =
      result.state.history.empty() ? json(nullptr) : json(result.state.history.back().mean_loss);
  summary["test"] = metrics_json(result.test);
  summary["seconds"] = seconds_since(t0);
  write_json(dir / "summary.json", summary);

  std::cout << "rounds " << result.state.round << "  test recall@" << result.test.k << ' '
            << result.test.recall << "  ndcg@" << result.test.k << ' ' << result.test.ndcg
            << '\n';
  return 0;
}

void write_metrics_csv(const fs::path& path, const MetricsReport& m) {
  std::ofstream out(path);
  out.precision(17);
  out << "k,recall,ndcg,rmse,mae,n_users\n"
      << m.k << ',' << m.recall << ',' << m.ndcg << ',' << m.rmse << ',' << m.mae << ','
      << m.n_users_evaluated << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

int cmd_evaluate(const Globals& g, const std::string& checkpoint) {
  const auto cfg = resolve(g);
  const auto data = filtered_source(cfg);
  const auto prep = prepare(cfg, data, RunMode::kFederated);
  const auto params = load_checkpoint(checkpoint, model_config_for(prep->data, cfg.model));
  const auto m = evaluate_params(cfg, *prep, params, cfg.eval.k);

  const auto dir = open_run_dir(cfg);
  write_metrics_csv(dir / "metrics.csv", m);
  auto summary = run_header(cfg, "evaluate");
  summary["checkpoint"] = checkpoint;
  summary["test"] = metrics_json(m);
  write_json(dir / "summary.json", summary);
  std::cout << "recall@" << m.k << ' ' << m.recall << "  ndcg@" << m.k << ' ' << m.ndcg
            << "  rmse " << m.rmse << "  mae " << m.mae << '\n';
  return 0;
}

int cmd_sweep(const Globals& g) {
  const auto cfg = resolve(g);
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = filtered_source(cfg);
  const auto rows = privacy_sweep(cfg, data, cfg.eval.sweep_ratios);

  const auto dir = open_run_dir(cfg);
  write_sweep_csv(dir / "sweep.csv", rows);
  auto summary = run_header(cfg, "sweep-privacy");
  json list = json::array();
  for (const auto& r : rows) {
    auto m = metrics_json(r.metrics);
    m["p"] = r.p;
    m["mode"] = to_string(r.mode);
    list.push_back(m);
  }
  summary["rows"] = list;
  summary["seconds"] = seconds_since(t0);
  write_json(dir / "summary.json", summary);
  for (const auto& r : rows)
    std::cout << r.p << ' ' << to_string(r.mode) << "  recall@" << r.metrics.k << ' '
              << r.metrics.recall << '\n';
  return 0;
}

int cmd_ablate(const Globals& g, const std::vector<std::string>& wanted) {
  const auto cfg = resolve(g);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Variant> variants;
  for (const auto& v : standard_variants())
    if (wanted.empty() || std::find(wanted.begin(), wanted.end(), v.name) != wanted.end())
      variants.push_back(v);
  if (variants.size() < std::max<std::size_t>(wanted.size(), 1)) {
    std::string names;
    for (const auto& v : standard_variants()) names += "\n  " + v.name;
    throw ConfigError("unknown variant; choose from:" + names);
  }

  const auto data = filtered_source(cfg);
  std::vector<std::pair<std::string, MetricsReport>> rows;
  for (const auto& v : variants) {
    rows.emplace_back(v.name, run_ablation(v.spec, cfg, data));
    std::cout << v.name << "  recall@" << rows.back().second.k << ' '
              << rows.back().second.recall << '\n';
  }

  const auto dir = open_run_dir(cfg);
  write_ablation_csv(dir / "ablation.csv", rows);
  auto summary = run_header(cfg, "ablate");
  json list = json::array();
  for (const auto& [name, m] : rows) {
    auto j = metrics_json(m);
    j["variant"] = name;
    list.push_back(j);
  }
  summary["rows"] = list;
  summary["seconds"] = seconds_since(t0);
  write_json(dir / "summary.json", summary);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated spatio-temporal graph recommender"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(version()));

  Globals g;
  auto add_globals = [&g](CLI::App* cmd) {
    cmd->add_option("--config", g.config, "JSON run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--seed", g.seed, "master seed (overrides the config)");
    cmd->add_option("--out", g.out, "output directory (overrides the config)");
    cmd->add_option("--threads", g.threads, "cap on concurrently training clients")
        ->check(CLI::PositiveNumber);
  };

  std::string input, synth_out, checkpoint, mode = "federated";
  bool dump_edges = false, quiet = false;
  std::vector<std::string> variants;

  auto* synth = app.add_subcommand("synth", "write the synthetic block dataset as TSV");
  add_globals(synth);
  synth->add_option("--output,-o", synth_out, "destination file")->required();

  auto* ingest = app.add_subcommand("ingest", "load, filter and split an interaction file");
  add_globals(ingest);
  ingest->add_option("--input", input, "user<TAB>item<TAB>rating<TAB>timestamp file")
      ->required();
  ingest->get_option("--out")->required();
  ingest->add_flag("--edges", dump_edges, "also dump implicit relation edges");

  auto* train = app.add_subcommand("train", "federated training run");
  add_globals(train);
  train->add_option("--mode", mode, "federated or centralized_public");
  train->add_flag("--quiet", quiet, "no per-round progress");

  auto* eval = app.add_subcommand("evaluate", "test metrics of a checkpoint");
  add_globals(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();

  auto* sweep = app.add_subcommand("sweep-privacy", "public ratio sweep, both modes");
  add_globals(sweep);

  auto* ablate = app.add_subcommand("ablate", "train and evaluate ablation variants");
  add_globals(ablate);
  ablate->add_option("--variant", variants, "variant name (repeatable; default all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*synth) return cmd_synth(g, synth_out);
    if (*ingest) return cmd_ingest(g, input, dump_edges);
    if (*train) return cmd_train(g, mode, quiet);
    if (*eval) return cmd_evaluate(g, checkpoint);
    if (*sweep) return cmd_sweep(g);
    if (*ablate) return cmd_ablate(g, variants);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
