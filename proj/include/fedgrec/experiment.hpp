#pragma once

// Run configuration, seed fan-out and the end-to-end pipelines behind the
// command-line tool: prepare data and graphs, train federated or
// centralized, evaluate, sweep the public ratio and run ablations.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedgrec/checkpoint.hpp"
#include "fedgrec/dataset.hpp"
#include "fedgrec/evaluation.hpp"
#include "fedgrec/federation.hpp"
#include "fedgrec/graphs.hpp"
#include "fedgrec/model.hpp"
#include "fedgrec/synthetic.hpp"
#include "fedgrec/training.hpp"

namespace fedgrec {

// Build version, from `git describe` at configure time.
const char* version();

struct DataConfig {
  std::string path;  // empty: generate the synthetic block dataset
  SyntheticConfig synthetic;
  std::size_t min_interactions = 5;
  std::size_t min_item_interactions = 1;
  SplitMode split_mode = SplitMode::kPerUser801010;
};

struct GraphConfig {
  std::size_t num_slices = 8;
  Timestamp slice_length = 0;  // 0: range / num_slices
  std::size_t tau = 2;
  std::size_t top_m = 20;
  double shrinkage = 5.0;
  std::size_t fanout = 3;
  double drop_rate = 0.25;
};

struct EvalConfig {
  std::size_t k = 20;
  std::vector<double> sweep_ratios{1.0, 0.75, 0.5, 0.25};
};

struct RunConfig {
  DataConfig data;
  std::size_t clients = 3;
  double public_ratio = 1.0;
  GraphConfig graph;
  ModelConfig model;  // vocabulary sizes are filled in from the data
  TrainConfig train;
  FedConfig fed;
  EvalConfig eval;
  AblationSpec ablation;
  std::uint64_t seed = 0;
  Dtype checkpoint_dtype = Dtype::kF32;
  std::string output_dir = "runs/default";

  // Throws ConfigError on any invalid field.
  void validate() const;
};

// Desk-scale defaults tuned for the synthetic dataset.
RunConfig default_config();

// Strict parsing: unknown keys and wrong types are ConfigErrors. Missing
// keys keep their defaults.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
// Every field, defaults materialized.
nlohmann::json to_json(const RunConfig& cfg);
// FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

// Per-module seeds split from the master seed.
struct SeedPlan {
  std::uint64_t split, partition, public_mask, init, train, fed, eval;
  explicit SeedPlan(std::uint64_t master);
};

// Raw dataset named by the config (file or synthetic), before filtering.
Dataset load_source(const DataConfig& cfg);

enum class RunMode {
  kFederated,          // graphs from public interactions, training on all
  kCentralizedPublic,  // one client, public interactions for graph and training
};
std::string to_string(RunMode m);

// Filtered data, split, client shards and graph structures for one run.
// Holds the graph context, so it stays where it was created.
struct Prepared {
  Dataset data;
  SplitBundle split;
  std::vector<ClientShard> shards;
  Dataset graph_data;  // public training interactions of every client
  TimeSlicedGraph graph;
  ImplicitEdges user_edges, item_edges;
  GraphContext ctx;

  Prepared() = default;
  Prepared(const Prepared&) = delete;
  Prepared& operator=(const Prepared&) = delete;
};

std::unique_ptr<Prepared> prepare(const RunConfig& cfg, const Dataset& filtered, RunMode mode);

struct RunResult {
  ServerState state;
  ModelParams final_params;  // as stored in the checkpoint dtype
  MetricsReport test;
};

struct RunHooks {
  std::function<void(const RoundRecord&)> on_round;
};

RunResult run_experiment(const RunConfig& cfg, const Dataset& filtered,
                         RunMode mode = RunMode::kFederated, const RunHooks& hooks = {});

// Test-split metrics of `params` under the run's graphs.
MetricsReport evaluate_params(const RunConfig& cfg, const Prepared& prep,
                              const ModelParams& params, std::size_t k);

struct SweepRow {
  double p = 0.0;
  RunMode mode = RunMode::kFederated;
  MetricsReport metrics;
};

std::vector<SweepRow> privacy_sweep(const RunConfig& base, const Dataset& filtered,
                                    std::span<const double> ratios);

MetricsReport run_ablation(const AblationSpec& spec, const RunConfig& base,
                           const Dataset& filtered);

struct Variant {
  std::string name;
  AblationSpec spec;
};
// The full model and one variant per disabled component.
std::vector<Variant> standard_variants();

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows);
void write_ablation_csv(const std::filesystem::path& path,
                        std::span<const std::pair<std::string, MetricsReport>> rows);
nlohmann::json metrics_json(const MetricsReport& m);

}  // namespace fedgrec
