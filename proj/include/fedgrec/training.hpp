#pragma once

// Client-local optimization: negatives, epochs, SGD or Adam steps.

#include <cstdint>
#include <span>
#include <vector>

#include "fedgrec/dataset.hpp"
#include "fedgrec/model.hpp"
#include "fedgrec/params.hpp"

namespace fedgrec {

enum class Optimizer { kSgd, kAdam };

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 128;  // positives per batch; negatives come on top
  std::size_t negatives_per_positive = 4;
  std::size_t early_stop_patience = 5;
  std::uint64_t seed = 0;
  Optimizer optimizer = Optimizer::kSgd;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  // learning_rate 0 is accepted (a null update); negative or non-finite is not.
  void validate() const;
};

struct ClientUpdate {
  ModelParams params;
  std::size_t sample_count = 0;
  double train_loss = 0.0;  // mean over local epochs of the mean batch loss
  Index client_id = 0;
  std::vector<double> epoch_losses;
};

// Positive samples (label = rating) for every interaction of the shard.
std::vector<Sample> positives_of(const ClientShard& shard);

// Per-user exclusion sets over the shard's interactions.
class NegativeSampler {
 public:
  explicit NegativeSampler(const ClientShard& shard);

  // Returns `positives` followed by `ratio` negatives per positive, each an
  // item the user never touched, with the positive's timestamp and label 0.
  // Users who touched every item get no negatives (a warning is logged).
  std::vector<Sample> augment(std::span<const Sample> positives, std::size_t ratio,
                              std::uint64_t seed) const;

  bool saturated(Index user) const;

 private:
  Index n_items_ = 0;
  std::vector<std::vector<Index>> items_;  // per user, sorted
};

std::vector<Sample> sample_negatives(const ClientShard& shard,
                                     std::span<const Sample> positives, std::size_t ratio,
                                     std::uint64_t seed);

// w <- w - lr * g on every touched row.
void apply_sgd(ModelParams& params, const GradientSet& grads, double lr);

class AdamState {
 public:
  AdamState(const ModelParams& like, const TrainConfig& cfg);
  // Rows that have ever received a gradient keep moving on their moments.
  void step(ModelParams& params, const GradientSet& grads, double lr);

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
  std::vector<std::vector<std::uint8_t>> active_;
  std::vector<std::vector<std::size_t>> active_rows_;
};

// Trains a copy of `global_params` on the shard's interactions (public and
// private). Throws NumericalError on a non-finite loss.
ClientUpdate local_train(const ClientShard& shard, const ModelParams& global_params,
                         const TrainConfig& cfg, const GraphContext& ctx);

// True once the best value (higher is better) is `patience` evaluations old.
bool early_stop(std::span<const double> history, std::size_t patience);

}  // namespace fedgrec
