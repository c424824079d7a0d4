#include "fedgrec/federation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <numeric>
#include <string>
#include <thread>

#include "fedgrec/errors.hpp"
#include "fedgrec/random.hpp"

namespace fedgrec {

namespace {

bool same_metrics(const std::optional<MetricsReport>& a, const std::optional<MetricsReport>& b) {
  if (a.has_value() != b.has_value()) return false;
  return !a || *a == *b;
}

}  // namespace

bool ServerState::same_outcome(const ServerState& other) const {
  if (round != other.round || !(global_params == other.global_params) ||
      history.size() != other.history.size())
    return false;
  for (std::size_t i = 0; i < history.size(); ++i) {
    const auto& a = history[i];
    const auto& b = other.history[i];
    if (a.round != b.round || a.participants != b.participants ||
        a.epoch_losses != b.epoch_losses ||
        std::memcmp(&a.mean_loss, &b.mean_loss, sizeof(double)) != 0 ||
        !same_metrics(a.validation, b.validation))
      return false;
  }
  return true;
}

void FedConfig::validate(std::size_t n_clients) const {
  if (n_clients < 1) throw ConfigError("federation needs at least one client");
  if (clients_per_round > n_clients)
    throw ConfigError("clients_per_round (" + std::to_string(clients_per_round) +
                      ") exceeds the number of clients (" + std::to_string(n_clients) + ")");
  if (masking && participants(n_clients) < 2)
    throw ConfigError("secure aggregation needs at least two clients per round");
  if (threads < 1) throw ConfigError("threads must be >= 1");
}

std::size_t FedConfig::participants(std::size_t n_clients) const {
  return clients_per_round == 0 ? n_clients : clients_per_round;
}

// ---------------------------------------------------------------------------

double sample_count_weight(const ClientUpdate& u) { return static_cast<double>(u.sample_count); }

namespace {

std::vector<std::size_t> by_client_id(std::span<const ClientUpdate> updates) {
  std::vector<std::size_t> order(updates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return updates[a].client_id < updates[b].client_id;
  });
  return order;
}

}  // namespace

std::vector<double> aggregation_weights(std::span<const ClientUpdate> updates,
                                        const WeightFn& weight) {
  if (updates.empty()) throw ProtocolError("aggregation needs at least one update");
  const auto order = by_client_id(updates);
  std::vector<double> raw;
  double total = 0.0;
  for (auto k : order) {
    const double w = weight(updates[k]);
    if (!(w >= 0.0) || !std::isfinite(w))
      throw ProtocolError("invalid aggregation weight for client " +
                          std::to_string(updates[k].client_id));
    raw.push_back(w);
    total += w;
  }
  if (!(total > 0.0)) throw ProtocolError("aggregation weights sum to zero");
  for (auto& w : raw) w /= total;
  return raw;
}

ModelParams aggregate(std::span<const ClientUpdate> updates, const WeightFn& weight) {
  const auto weights = aggregation_weights(updates, weight);
  const auto order = by_client_id(updates);
  const auto& first = updates[order[0]].params;
  for (auto k : order)
    if (!updates[k].params.same_shape(first))
      throw ProtocolError("client " + std::to_string(updates[k].client_id) +
                          " sent parameters of a different shape");

  ModelParams out = first;
  for (std::size_t t = 0; t < out.tensors.size(); ++t) {
    auto& acc = out.tensors[t].data;
    for (auto& v : acc) v *= weights[0];
    for (std::size_t j = 1; j < order.size(); ++j) {
      const auto& src = updates[order[j]].params.tensors[t].data;
      const double w = weights[j];
      for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += w * src[c];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::uint64_t quantize(double x) {
  const double scaled = std::nearbyint(x * kFixedPointScale);
  if (!(std::fabs(scaled) < 0x1.0p62))
    throw NumericalError("value " + std::to_string(x) + " does not fit the fixed-point range");
  return static_cast<std::uint64_t>(static_cast<std::int64_t>(scaled));
}

double dequantize(std::uint64_t q) {
  return static_cast<double>(static_cast<std::int64_t>(q)) / kFixedPointScale;
}

std::vector<std::uint64_t> pair_mask(std::uint64_t round_seed, Index a, Index b,
                                     std::size_t length) {
  Rng rng(derive_seed(round_seed, {std::min(a, b), std::max(a, b)}));
  std::vector<std::uint64_t> mask(length);
  for (auto& m : mask) m = rng();
  return mask;
}

std::vector<std::uint64_t> quantized_share(const ClientUpdate& update,
                                           std::size_t total_samples) {
  if (total_samples == 0) throw ProtocolError("total sample count is zero");
  const double w =
      static_cast<double>(update.sample_count) / static_cast<double>(total_samples);
  std::vector<std::uint64_t> out;
  out.reserve(update.params.size());
  for (const auto& t : update.params.tensors)
    for (auto v : t.data) out.push_back(quantize(w * v));
  return out;
}

MaskedUpdate mask_update(const ClientUpdate& update, std::span<const Index> peers,
                         std::uint64_t round_seed, std::size_t total_samples) {
  std::vector<Index> sorted(peers.begin(), peers.end());
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw ProtocolError("duplicate peer id in the round");
  if (sorted.size() < 2)
    throw ConfigError("masking with a single client cannot cancel; disable masking");
  if (!std::binary_search(sorted.begin(), sorted.end(), update.client_id))
    throw ProtocolError("client " + std::to_string(update.client_id) +
                        " is not among the round's peers");

  MaskedUpdate out;
  out.values = quantized_share(update, total_samples);
  out.sample_count = update.sample_count;
  out.client_id = update.client_id;
  out.round_seed = round_seed;
  out.peers = sorted;
  for (auto peer : sorted) {
    if (peer == update.client_id) continue;
    const auto mask = pair_mask(round_seed, update.client_id, peer, out.values.size());
    if (update.client_id < peer)
      for (std::size_t j = 0; j < mask.size(); ++j) out.values[j] += mask[j];
    else
      for (std::size_t j = 0; j < mask.size(); ++j) out.values[j] -= mask[j];
  }
  return out;
}

ModelParams unmask_aggregate(std::span<const MaskedUpdate> masked, const ModelParams& like) {
  if (masked.empty()) throw ProtocolError("no masked updates received");
  const auto& peers = masked[0].peers;
  std::vector<Index> present;
  for (const auto& m : masked) {
    if (m.peers != peers || m.round_seed != masked[0].round_seed)
      throw ProtocolError("masked updates come from different rounds");
    if (m.values.size() != like.size())
      throw ProtocolError("masked vector from client " + std::to_string(m.client_id) +
                          " has length " + std::to_string(m.values.size()) + ", expected " +
                          std::to_string(like.size()));
    present.push_back(m.client_id);
  }
  std::sort(present.begin(), present.end());
  if (present != peers)
    throw ProtocolError("participant set mismatch: " + std::to_string(present.size()) + " of " +
                        std::to_string(peers.size()) + " masked updates present; round aborted");

  std::vector<std::uint64_t> sum(like.size(), 0);
  for (const auto& m : masked)
    for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += m.values[j];
  std::vector<double> flat(sum.size());
  for (std::size_t j = 0; j < sum.size(); ++j) flat[j] = dequantize(sum[j]);
  ModelParams out = like;
  out.unflatten(flat);
  return out;
}

// ---------------------------------------------------------------------------

std::vector<Index> sample_clients(const FedConfig& cfg, std::size_t n_clients,
                                  std::size_t round) {
  const auto m = cfg.participants(n_clients);
  std::vector<Index> ids(n_clients);
  std::iota(ids.begin(), ids.end(), 0);
  if (m < n_clients) {
    Rng rng(derive_seed(cfg.seed, {fnv1a64("clients"), round}));
    for (std::size_t i = 0; i < m; ++i)
      std::swap(ids[i], ids[i + uniform_index(rng, n_clients - i)]);
    ids.resize(m);
    std::sort(ids.begin(), ids.end());
  }
  return ids;
}

std::uint64_t client_seed(const TrainConfig& cfg, std::size_t round, Index client) {
  return derive_seed(cfg.seed, {fnv1a64("client"), round, client});
}

ServerState run_round(const ServerState& state, const RoundInputs& in) {
  const auto started = std::chrono::steady_clock::now();
  in.fed.validate(in.shards.size());
  const auto round = state.round + 1;
  const auto ids = sample_clients(in.fed, in.shards.size(), round);

  std::vector<std::optional<ClientUpdate>> updates(ids.size());
  std::vector<std::exception_ptr> failures(ids.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < ids.size();) {
      try {
        auto cfg = in.train;
        cfg.seed = client_seed(in.train, round, ids[j]);
        updates[j] = local_train(in.shards[ids[j]], state.global_params, cfg, *in.ctx);
      } catch (...) {
        failures[j] = std::current_exception();
      }
    }
  };
  const auto n_threads = std::min(in.fed.threads, ids.size());
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }
  for (auto& f : failures)
    if (f) std::rethrow_exception(f);

  std::vector<ClientUpdate> done;
  for (auto& u : updates) done.push_back(std::move(*u));

  ServerState next_state;
  next_state.round = round;
  next_state.history = state.history;
  if (in.fed.masking) {
    std::size_t total = 0;
    for (const auto& u : done) total += u.sample_count;
    const auto round_seed = derive_seed(in.fed.seed, {fnv1a64("mask"), round});
    std::vector<MaskedUpdate> masked;
    for (const auto& u : done) masked.push_back(mask_update(u, ids, round_seed, total));
    next_state.global_params = unmask_aggregate(masked, state.global_params);
  } else {
    next_state.global_params = aggregate(done);
  }

  const auto weights = aggregation_weights(done);
  RoundRecord rec;
  rec.round = round;
  rec.participants = ids;
  for (std::size_t j = 0; j < done.size(); ++j) {
    rec.mean_loss += weights[j] * done[j].train_loss;
    rec.epoch_losses.push_back(done[j].epoch_losses);
  }
  rec.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  next_state.history.push_back(std::move(rec));
  return next_state;
}

ServerState orchestrate(ServerState state, const RoundInputs& in, const Validator& validate,
                        const std::function<void(const RoundRecord&)>& on_round) {
  in.fed.validate(in.shards.size());
  in.train.validate();
  std::vector<double> recalls;
  for (std::size_t r = 0; r < in.fed.rounds; ++r) {
    state = run_round(state, in);
    auto& rec = state.history.back();
    bool stop = false;
    if (validate && in.fed.eval_every > 0 && state.round % in.fed.eval_every == 0) {
      const auto started = std::chrono::steady_clock::now();
      rec.validation = validate(state.global_params);
      rec.seconds +=
          std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      recalls.push_back(rec.validation->recall);
      stop = early_stop(recalls, in.train.early_stop_patience);
    }
    if (on_round) on_round(rec);
    if (stop) break;
  }
  return state;
}

void write_history_csv(const std::filesystem::path& path,
                       std::span<const RoundRecord> history) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "round,mean_loss,val_recall@20,val_ndcg@20,val_rmse,val_mae,seconds\n";
  for (const auto& r : history) {
    out << r.round << ',' << r.mean_loss << ',';
    if (r.validation)
      out << r.validation->recall << ',' << r.validation->ndcg << ',' << r.validation->rmse
          << ',' << r.validation->mae;
    else
      out << ",,,";
    out << ',' << r.seconds << '\n';
  }
}

void write_epoch_losses_csv(const std::filesystem::path& path,
                            std::span<const RoundRecord> history) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "round,client,epoch,loss\n";
  for (const auto& r : history)
    for (std::size_t j = 0; j < r.participants.size(); ++j)
      for (std::size_t e = 0; e < r.epoch_losses[j].size(); ++e)
        out << r.round << ',' << r.participants[j] << ',' << e + 1 << ',' << r.epoch_losses[j][e]
            << '\n';
}

}  // namespace fedgrec
