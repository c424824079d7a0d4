#pragma once

// Server-side round orchestration: client sampling, broadcast, local
// training, masked or plain weighted averaging.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "fedgrec/dataset.hpp"
#include "fedgrec/evaluation.hpp"
#include "fedgrec/model.hpp"
#include "fedgrec/training.hpp"

namespace fedgrec {

struct RoundRecord {
  std::size_t round = 0;  // 1-based
  double mean_loss = 0.0;
  std::vector<Index> participants;
  std::vector<std::vector<double>> epoch_losses;  // per participant, per local epoch
  std::optional<MetricsReport> validation;
  double seconds = 0.0;
};

struct ServerState {
  ModelParams global_params;
  std::size_t round = 0;
  std::vector<RoundRecord> history;

  // Bitwise comparison that ignores wall-clock timings.
  bool same_outcome(const ServerState& other) const;
};

struct FedConfig {
  std::size_t rounds = 200;
  std::size_t clients_per_round = 0;  // 0 = every client
  bool masking = true;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // validation cadence in rounds; 0 = never
  std::size_t threads = 1;

  void validate(std::size_t n_clients) const;
  std::size_t participants(std::size_t n_clients) const;
};

// Raw (unnormalized) aggregation weight of an update.
using WeightFn = std::function<double(const ClientUpdate&)>;
double sample_count_weight(const ClientUpdate& u);

// Normalized coefficients in client_id order.
std::vector<double> aggregation_weights(std::span<const ClientUpdate> updates,
                                        const WeightFn& weight = sample_count_weight);

// Weighted average of the updates' parameters, accumulated in client_id
// order. Throws ProtocolError on shape mismatch.
ModelParams aggregate(std::span<const ClientUpdate> updates,
                      const WeightFn& weight = sample_count_weight);

inline constexpr double kFixedPointScale = 1048576.0;  // 2^20

struct MaskedUpdate {
  std::vector<std::uint64_t> values;  // fixed point, modulo 2^64
  std::size_t sample_count = 0;
  Index client_id = 0;
  std::uint64_t round_seed = 0;
  std::vector<Index> peers;  // sorted participant ids of the round
};

std::uint64_t quantize(double x);
double dequantize(std::uint64_t q);

// Pairwise mask shared by peers a and b for one round.
std::vector<std::uint64_t> pair_mask(std::uint64_t round_seed, Index a, Index b,
                                     std::size_t length);

// Pre-scales by sample_count / total_samples, quantizes, then adds the mask
// of every pair this client belongs to (lower id adds, higher subtracts).
MaskedUpdate mask_update(const ClientUpdate& update, std::span<const Index> peers,
                         std::uint64_t round_seed, std::size_t total_samples);

// Quantized pre-scaled parameters without masks.
std::vector<std::uint64_t> quantized_share(const ClientUpdate& update,
                                           std::size_t total_samples);

// Modular sum of every masked vector, dequantized into the shape of `like`.
// Throws ProtocolError unless exactly the round's peers are present.
ModelParams unmask_aggregate(std::span<const MaskedUpdate> masked, const ModelParams& like);

struct RoundInputs {
  std::span<const ClientShard> shards;  // indexed by client id
  const GraphContext* ctx = nullptr;
  FedConfig fed;
  TrainConfig train;
};

// Ids of the clients taking part in `round` (1-based), sorted.
std::vector<Index> sample_clients(const FedConfig& cfg, std::size_t n_clients,
                                  std::size_t round);

// Per-client training seed for a round.
std::uint64_t client_seed(const TrainConfig& cfg, std::size_t round, Index client);

// One synchronous round. On any client failure the exception propagates
// and `state` is left untouched.
ServerState run_round(const ServerState& state, const RoundInputs& in);

using Validator = std::function<MetricsReport(const ModelParams&)>;

// Runs up to fed.rounds rounds, validating every fed.eval_every rounds and
// stopping early once validation Recall has stalled for the patience.
ServerState orchestrate(ServerState state, const RoundInputs& in,
                        const Validator& validate = {},
                        const std::function<void(const RoundRecord&)>& on_round = {});

void write_history_csv(const std::filesystem::path& path,
                       std::span<const RoundRecord> history);

// One line per (round, client, local epoch): `round,client,epoch,loss`.
void write_epoch_losses_csv(const std::filesystem::path& path,
                            std::span<const RoundRecord> history);

}  // namespace fedgrec
