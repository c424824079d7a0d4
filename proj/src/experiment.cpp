#include "fedgrec/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "fedgrec/errors.hpp"
#include "fedgrec/random.hpp"

#ifndef FEDGREC_VERSION
#define FEDGREC_VERSION "unknown"
#endif

namespace fedgrec {

using nlohmann::json;

const char* version() { return FEDGREC_VERSION; }

// ---------------------------------------------------------------------------
// Configuration

void RunConfig::validate() const {
  if (data.min_interactions < 1) throw ConfigError("data.min_interactions must be >= 1");
  if (data.min_item_interactions < 1)
    throw ConfigError("data.min_item_interactions must be >= 1");
  if (clients < 1) throw ConfigError("clients must be >= 1");
  if (!(public_ratio >= 0.0 && public_ratio <= 1.0))
    throw ConfigError("public_ratio must lie in [0, 1]");
  if (graph.num_slices < 1) throw ConfigError("graph.num_slices must be >= 1");
  if (graph.slice_length < 0) throw ConfigError("graph.slice_length must be >= 0");
  if (graph.tau < 1) throw ConfigError("graph.tau must be >= 1");
  if (!(graph.shrinkage >= 0.0)) throw ConfigError("graph.shrinkage must be >= 0");
  if (graph.fanout < 1) throw ConfigError("graph.fanout must be >= 1");
  if (!(graph.drop_rate >= 0.0 && graph.drop_rate < 1.0))
    throw ConfigError("graph.drop_rate must lie in [0, 1)");
  if (model.dim < 1 || model.heads < 1 || model.layers < 1 || model.hops < 1)
    throw ConfigError("model.dim, heads, layers and hops must be >= 1");
  for (auto w : model.mlp_hidden)
    if (w < 1) throw ConfigError("model.mlp_hidden widths must be >= 1");
  if (!std::isfinite(model.leaky_slope)) throw ConfigError("model.leaky_slope must be finite");
  train.validate();
  if (fed.clients_per_round > clients)
    throw ConfigError("fed.clients_per_round exceeds clients");
  if (fed.masking && fed.participants(clients) < 2)
    throw ConfigError("fed.masking needs at least two clients per round");
  if (fed.threads < 1) throw ConfigError("fed.threads must be >= 1");
  if (eval.k < 1) throw ConfigError("eval.k must be >= 1");
  for (auto p : eval.sweep_ratios)
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("eval.sweep_ratios must lie in [0, 1]");
}

RunConfig default_config() {
  RunConfig c;
  c.model.dim = 16;
  c.model.heads = 2;
  c.model.layers = 2;
  c.model.hops = 2;
  c.model.mlp_hidden = {32};
  c.train.optimizer = Optimizer::kAdam;
  c.train.learning_rate = 0.003;
  c.train.batch_size = 64;
  c.train.negatives_per_positive = 4;
  c.fed.rounds = 200;
  c.fed.masking = true;
  return c;
}

namespace {

std::string split_mode_name(SplitMode m) {
  return m == SplitMode::kPerUser801010 ? "per_user_80_10_10" : "holdout_80_20";
}

std::string optimizer_name(Optimizer o) { return o == Optimizer::kSgd ? "sgd" : "adam"; }

// Strict object reader: every key must be consumed.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(label() + " must be a JSON object");
  }

  bool has(const char* key) {
    if (!j_.contains(key)) return false;
    used_.insert(key);
    return true;
  }
  const json& at(const char* key) const { return j_.at(key); }
  std::string path(const char* key) const { return where_.empty() ? key : where_ + "." + key; }

  template <typename T>
  void count(const char* key, T& out) {
    if (!has(key)) return;
    if (!at(key).is_number_unsigned()) throw ConfigError(path(key) + " must be a nonnegative integer");
    out = static_cast<T>(at(key).get<std::uint64_t>());
  }
  void integer(const char* key, std::int64_t& out) {
    if (!has(key)) return;
    if (!at(key).is_number_integer()) throw ConfigError(path(key) + " must be an integer");
    out = at(key).get<std::int64_t>();
  }
  void real(const char* key, double& out) {
    if (!has(key)) return;
    if (!at(key).is_number()) throw ConfigError(path(key) + " must be a number");
    out = at(key).get<double>();
  }
  void boolean(const char* key, bool& out) {
    if (!has(key)) return;
    if (!at(key).is_boolean()) throw ConfigError(path(key) + " must be true or false");
    out = at(key).get<bool>();
  }
  void string(const char* key, std::string& out) {
    if (!has(key)) return;
    if (!at(key).is_string()) throw ConfigError(path(key) + " must be a string");
    out = at(key).get<std::string>();
  }
  template <typename T>
  void count_list(const char* key, std::vector<T>& out) {
    if (!has(key)) return;
    if (!at(key).is_array()) throw ConfigError(path(key) + " must be an array");
    out.clear();
    for (const auto& v : at(key)) {
      if (!v.is_number_unsigned()) throw ConfigError(path(key) + " entries must be nonnegative integers");
      out.push_back(static_cast<T>(v.get<std::uint64_t>()));
    }
  }
  void real_list(const char* key, std::vector<double>& out) {
    if (!has(key)) return;
    if (!at(key).is_array()) throw ConfigError(path(key) + " must be an array");
    out.clear();
    for (const auto& v : at(key)) {
      if (!v.is_number()) throw ConfigError(path(key) + " entries must be numbers");
      out.push_back(v.get<double>());
    }
  }
  std::optional<Reader> child(const char* key) {
    if (!has(key)) return std::nullopt;
    return Reader(at(key), path(key));
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.count(k)) throw ConfigError("unknown configuration key '" + path(k.c_str()) + "'");
  }

 private:
  std::string label() const { return where_.empty() ? "configuration" : where_; }
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

}  // namespace

RunConfig config_from_json(const json& j) {
  RunConfig c = default_config();
  Reader root(j, "");
  if (auto r = root.child("data")) {
    r->string("path", c.data.path);
    r->count("min_interactions", c.data.min_interactions);
    r->count("min_item_interactions", c.data.min_item_interactions);
    if (r->has("split_mode")) {
      const auto& v = r->at("split_mode");
      if (v == "per_user_80_10_10")
        c.data.split_mode = SplitMode::kPerUser801010;
      else if (v == "holdout_80_20")
        c.data.split_mode = SplitMode::kHoldout8020;
      else
        throw ConfigError("data.split_mode must be per_user_80_10_10 or holdout_80_20");
    }
    if (auto s = r->child("synthetic")) {
      auto& sc = c.data.synthetic;
      s->count("n_users", sc.n_users);
      s->count("n_items", sc.n_items);
      s->count("blocks", sc.blocks);
      s->count("core_items", sc.core_items);
      s->real("core_prob", sc.core_prob);
      s->count("tail_per_user", sc.tail_per_user);
      s->count("noise_per_user", sc.noise_per_user);
      s->integer("horizon", sc.horizon);
      s->count("seed", sc.seed);
      s->finish();
    }
    r->finish();
  }
  root.count("clients", c.clients);
  root.real("public_ratio", c.public_ratio);
  if (auto r = root.child("graph")) {
    r->count("num_slices", c.graph.num_slices);
    r->integer("slice_length", c.graph.slice_length);
    r->count("tau", c.graph.tau);
    r->count("top_m", c.graph.top_m);
    r->real("shrinkage", c.graph.shrinkage);
    r->count("fanout", c.graph.fanout);
    r->real("drop_rate", c.graph.drop_rate);
    r->finish();
  }
  if (auto r = root.child("model")) {
    r->count("dim", c.model.dim);
    r->count("heads", c.model.heads);
    r->count("layers", c.model.layers);
    r->count("hops", c.model.hops);
    r->count_list("mlp_hidden", c.model.mlp_hidden);
    r->count("history_length", c.model.history_length);
    r->real("leaky_slope", c.model.leaky_slope);
    r->finish();
  }
  if (auto r = root.child("train")) {
    r->real("learning_rate", c.train.learning_rate);
    r->count("local_epochs", c.train.local_epochs);
    r->count("batch_size", c.train.batch_size);
    r->count("negatives_per_positive", c.train.negatives_per_positive);
    r->count("early_stop_patience", c.train.early_stop_patience);
    if (r->has("optimizer")) {
      const auto& v = r->at("optimizer");
      if (v == "sgd")
        c.train.optimizer = Optimizer::kSgd;
      else if (v == "adam")
        c.train.optimizer = Optimizer::kAdam;
      else
        throw ConfigError("train.optimizer must be sgd or adam");
    }
    r->real("adam_beta1", c.train.adam_beta1);
    r->real("adam_beta2", c.train.adam_beta2);
    r->real("adam_epsilon", c.train.adam_epsilon);
    r->finish();
  }
  if (auto r = root.child("fed")) {
    r->count("rounds", c.fed.rounds);
    r->count("clients_per_round", c.fed.clients_per_round);
    r->boolean("masking", c.fed.masking);
    r->count("eval_every", c.fed.eval_every);
    r->count("threads", c.fed.threads);
    r->finish();
  }
  if (auto r = root.child("eval")) {
    r->count("k", c.eval.k);
    r->real_list("sweep_ratios", c.eval.sweep_ratios);
    r->finish();
  }
  if (auto r = root.child("ablation")) {
    r->boolean("item_graph", c.ablation.item_graph);
    r->boolean("neighbor_public_interactions", c.ablation.neighbor_public_interactions);
    r->boolean("attention", c.ablation.attention);
    r->boolean("implicit_user", c.ablation.implicit_user);
    r->boolean("implicit_item", c.ablation.implicit_item);
    r->finish();
  }
  root.count("seed", c.seed);
  if (root.has("checkpoint_dtype")) {
    if (!root.at("checkpoint_dtype").is_string())
      throw ConfigError("checkpoint_dtype must be a string");
    c.checkpoint_dtype = parse_dtype(root.at("checkpoint_dtype").get<std::string>());
  }
  root.string("output_dir", c.output_dir);
  root.finish();
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

json to_json(const RunConfig& c) {
  const auto& sc = c.data.synthetic;
  return {
      {"data",
       {{"path", c.data.path},
        {"min_interactions", c.data.min_interactions},
        {"min_item_interactions", c.data.min_item_interactions},
        {"split_mode", split_mode_name(c.data.split_mode)},
        {"synthetic",
         {{"n_users", sc.n_users},
          {"n_items", sc.n_items},
          {"blocks", sc.blocks},
          {"core_items", sc.core_items},
          {"core_prob", sc.core_prob},
          {"tail_per_user", sc.tail_per_user},
          {"noise_per_user", sc.noise_per_user},
          {"horizon", sc.horizon},
          {"seed", sc.seed}}}}},
      {"clients", c.clients},
      {"public_ratio", c.public_ratio},
      {"graph",
       {{"num_slices", c.graph.num_slices},
        {"slice_length", c.graph.slice_length},
        {"tau", c.graph.tau},
        {"top_m", c.graph.top_m},
        {"shrinkage", c.graph.shrinkage},
        {"fanout", c.graph.fanout},
        {"drop_rate", c.graph.drop_rate}}},
      {"model",
       {{"dim", c.model.dim},
        {"heads", c.model.heads},
        {"layers", c.model.layers},
        {"hops", c.model.hops},
        {"mlp_hidden", c.model.mlp_hidden},
        {"history_length", c.model.history_length},
        {"leaky_slope", c.model.leaky_slope}}},
      {"train",
       {{"learning_rate", c.train.learning_rate},
        {"local_epochs", c.train.local_epochs},
        {"batch_size", c.train.batch_size},
        {"negatives_per_positive", c.train.negatives_per_positive},
        {"early_stop_patience", c.train.early_stop_patience},
        {"optimizer", optimizer_name(c.train.optimizer)},
        {"adam_beta1", c.train.adam_beta1},
        {"adam_beta2", c.train.adam_beta2},
        {"adam_epsilon", c.train.adam_epsilon}}},
      {"fed",
       {{"rounds", c.fed.rounds},
        {"clients_per_round", c.fed.clients_per_round},
        {"masking", c.fed.masking},
        {"eval_every", c.fed.eval_every},
        {"threads", c.fed.threads}}},
      {"eval", {{"k", c.eval.k}, {"sweep_ratios", c.eval.sweep_ratios}}},
      {"ablation",
       {{"item_graph", c.ablation.item_graph},
        {"neighbor_public_interactions", c.ablation.neighbor_public_interactions},
        {"attention", c.ablation.attention},
        {"implicit_user", c.ablation.implicit_user},
        {"implicit_item", c.ablation.implicit_item}}},
      {"seed", c.seed},
      {"checkpoint_dtype", to_string(c.checkpoint_dtype)},
      {"output_dir", c.output_dir},
  };
}

std::string config_hash(const RunConfig& cfg) {
  // threads and output location do not change results
  auto j = to_json(cfg);
  j["fed"].erase("threads");
  j.erase("output_dir");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

SeedPlan::SeedPlan(std::uint64_t master)
    : split(derive_seed(master, "split")),
      partition(derive_seed(master, "partition")),
      public_mask(derive_seed(master, "public")),
      init(derive_seed(master, "init")),
      train(derive_seed(master, "train")),
      fed(derive_seed(master, "fed")),
      eval(derive_seed(master, "eval")) {}

// ---------------------------------------------------------------------------
// Pipeline

Dataset load_source(const DataConfig& cfg) {
  if (cfg.path.empty()) return make_block_dataset(cfg.synthetic);
  return load_interactions(cfg.path);
}

std::string to_string(RunMode m) {
  return m == RunMode::kFederated ? "federated" : "centralized_public";
}

namespace {

TimeSlicedGraph graph_over(const Dataset& graph_data, const Dataset& train,
                           const GraphConfig& cfg) {
  const auto length = cfg.slice_length > 0 ? cfg.slice_length
                                            : default_slice_length(train, cfg.num_slices);
  if (!graph_data.empty()) return build_time_slices(graph_data, length);
  // nothing public: one empty slice spanning the training range
  Timestamp lo = kNoCutoff, hi = 0;
  for (const auto& x : train.interactions) {
    lo = std::min(lo, x.timestamp);
    hi = std::max(hi, x.timestamp);
  }
  TimeSlicedGraph g;
  g.slices.emplace_back(std::span<const Interaction>{}, train.n_users, train.n_items);
  g.boundaries = {lo, hi + 1};
  g.merged = g.slices.front();
  return g;
}

}  // namespace

std::unique_ptr<Prepared> prepare(const RunConfig& cfg, const Dataset& filtered, RunMode mode) {
  cfg.validate();
  const SeedPlan seeds(cfg.seed);
  auto prep = std::make_unique<Prepared>();
  prep->data = filtered;
  prep->split = split(filtered, seeds.split, cfg.data.split_mode);
  const auto& train = prep->split.train;

  auto shards = partition_clients(train, cfg.clients, seeds.partition);
  for (auto& s : shards) s = apply_public_ratio(s, cfg.public_ratio, seeds.public_mask);

  std::vector<Interaction> public_rows;
  for (const auto& s : shards) {
    const auto part = s.public_part();
    public_rows.insert(public_rows.end(), part.interactions.begin(), part.interactions.end());
  }
  normalize(public_rows);
  prep->graph_data = train.with_interactions(public_rows);

  if (mode == RunMode::kCentralizedPublic) {
    ClientShard all;
    all.client_id = 0;
    all.data = prep->graph_data;
    all.public_mask.assign(all.data.size(), true);
    for (const auto& s : shards) all.users.insert(all.users.end(), s.users.begin(), s.users.end());
    std::sort(all.users.begin(), all.users.end());
    all.sample_count = all.data.size();
    shards = {std::move(all)};
  }
  prep->shards = std::move(shards);

  prep->graph = graph_over(prep->graph_data, train, cfg.graph);
  prep->user_edges = implicit_user_relations(prep->graph_data, cfg.graph.tau, cfg.graph.top_m);
  prep->item_edges =
      implicit_item_relations(prep->graph_data, cfg.graph.top_m, cfg.graph.shrinkage);

  auto& ctx = prep->ctx;
  ctx.graph = &prep->graph;
  ctx.user_edges = &prep->user_edges;
  ctx.item_edges = &prep->item_edges;
  ctx.user_features = prep->data.user_features;
  ctx.item_features = prep->data.item_features;
  ctx.fanout = cfg.graph.fanout;
  ctx.drop_rate = cfg.graph.drop_rate;
  ctx.ablation = cfg.ablation;
  return prep;
}

MetricsReport evaluate_params(const RunConfig& cfg, const Prepared& prep,
                              const ModelParams& params, std::size_t k) {
  const SeedPlan seeds(cfg.seed);
  ModelScorer scorer(params, prep.ctx, seeds.eval, prep.ctx.eval_time());
  const Dataset* seen[] = {&prep.split.train, &prep.split.validation};
  return evaluate(scorer, prep.split.test, seen, {k, seeds.eval, true});
}

RunResult run_experiment(const RunConfig& cfg, const Dataset& filtered, RunMode mode,
                         const RunHooks& hooks) {
  const auto prep = prepare(cfg, filtered, mode);
  const SeedPlan seeds(cfg.seed);

  RoundInputs in;
  in.shards = prep->shards;
  in.ctx = &prep->ctx;
  in.fed = cfg.fed;
  in.fed.seed = seeds.fed;
  in.train = cfg.train;
  in.train.seed = seeds.train;
  if (mode == RunMode::kCentralizedPublic) {
    in.fed.masking = false;
    in.fed.clients_per_round = 0;
  }

  ServerState state;
  state.global_params =
      ModelParams::init(model_config_for(prep->data, cfg.model), seeds.init);

  const Validator validator = [&](const ModelParams& p) {
    ModelScorer scorer(p, prep->ctx, seeds.eval, prep->ctx.eval_time());
    const Dataset* seen[] = {&prep->split.train};
    return evaluate(scorer, prep->split.validation, seen, {20, seeds.eval, true});
  };
  RunResult out;
  out.state = orchestrate(std::move(state), in, validator, hooks.on_round);
  out.final_params = round_to_dtype(out.state.global_params, cfg.checkpoint_dtype);
  out.test = evaluate_params(cfg, *prep, out.final_params, cfg.eval.k);
  return out;
}

std::vector<SweepRow> privacy_sweep(const RunConfig& base, const Dataset& filtered,
                                    std::span<const double> ratios) {
  std::vector<SweepRow> rows;
  for (auto p : ratios) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("public ratio outside [0, 1]");
    auto cfg = base;
    cfg.public_ratio = p;
    for (auto mode : {RunMode::kFederated, RunMode::kCentralizedPublic}) {
      if (mode == RunMode::kCentralizedPublic && p == 0.0) {
        // nothing to train on: report the untrained model
        auto frozen = cfg;
        frozen.fed.rounds = 0;
        rows.push_back({p, mode, run_experiment(frozen, filtered, mode).test});
        continue;
      }
      rows.push_back({p, mode, run_experiment(cfg, filtered, mode).test});
    }
  }
  return rows;
}

MetricsReport run_ablation(const AblationSpec& spec, const RunConfig& base,
                           const Dataset& filtered) {
  auto cfg = base;
  cfg.ablation = spec;
  return run_experiment(cfg, filtered).test;
}

std::vector<Variant> standard_variants() {
  std::vector<Variant> out{{"full", {}}};
  AblationSpec s;
  s.item_graph = false;
  out.push_back({"w/o item graph", s});
  s = {};
  s.neighbor_public_interactions = false;
  out.push_back({"w/o neighbor interactions", s});
  s = {};
  s.attention = false;
  out.push_back({"w/o attention", s});
  s = {};
  s.implicit_user = false;
  out.push_back({"w/o implicit user", s});
  s = {};
  s.implicit_item = false;
  out.push_back({"w/o implicit item", s});
  return out;
}

namespace {

std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

}  // namespace

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows) {
  auto out = open_out(path);
  out << "p,mode,recall,ndcg,rmse,mae\n";
  for (const auto& r : rows)
    out << num(r.p) << ',' << to_string(r.mode) << ',' << num(r.metrics.recall) << ','
        << num(r.metrics.ndcg) << ',' << num(r.metrics.rmse) << ',' << num(r.metrics.mae)
        << '\n';
}

void write_ablation_csv(const std::filesystem::path& path,
                        std::span<const std::pair<std::string, MetricsReport>> rows) {
  auto out = open_out(path);
  out << "variant,recall,ndcg\n";
  for (const auto& [name, m] : rows)
    out << name << ',' << num(m.recall) << ',' << num(m.ndcg) << '\n';
}

json metrics_json(const MetricsReport& m) {
  return {{"recall", m.recall},
          {"ndcg", m.ndcg},
          {"rmse", m.rmse},
          {"mae", m.mae},
          {"k", m.k},
          {"n_users_evaluated", m.n_users_evaluated},
          {"n_rating_pairs", m.n_rating_pairs}};
}

}  // namespace fedgrec
