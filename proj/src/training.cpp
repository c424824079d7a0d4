#include "fedgrec/training.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <string>

#include "fedgrec/errors.hpp"
#include "fedgrec/random.hpp"

namespace fedgrec {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("learning_rate must be finite and >= 0");
  if (local_epochs < 1) throw ConfigError("local_epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be >= 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_epsilon > 0.0)) throw ConfigError("adam_epsilon must be > 0");
}

std::vector<Sample> positives_of(const ClientShard& shard) {
  std::vector<Sample> out;
  out.reserve(shard.data.size());
  for (const auto& x : shard.data.interactions)
    out.push_back({x.user, x.item, x.timestamp, x.rating});
  return out;
}

// ---------------------------------------------------------------------------

NegativeSampler::NegativeSampler(const ClientShard& shard)
    : n_items_(shard.data.n_items),
      items_(shard.data.n_users) {
  for (const auto& x : shard.data.interactions) items_[x.user].push_back(x.item);
  for (auto& v : items_) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
}

bool NegativeSampler::saturated(Index user) const {
  return user < items_.size() && items_[user].size() >= n_items_;
}

std::vector<Sample> NegativeSampler::augment(std::span<const Sample> positives,
                                             std::size_t ratio, std::uint64_t seed) const {
  std::vector<Sample> out(positives.begin(), positives.end());
  if (ratio == 0) return out;
  Rng rng(derive_seed(seed, "negatives"));
  static const std::vector<Index> kNone;
  for (const auto& p : positives) {
    const auto& seen = p.user < items_.size() ? items_[p.user] : kNone;
    if (seen.size() >= n_items_) {
      std::cerr << "warning: user " << p.user
                << " has interacted with every item; no negatives drawn\n";
      continue;
    }
    for (std::size_t r = 0; r < ratio; ++r) {
      Index j;
      do {
        j = static_cast<Index>(uniform_index(rng, n_items_));
      } while (std::binary_search(seen.begin(), seen.end(), j));
      out.push_back({p.user, j, p.time, 0.0});
    }
  }
  return out;
}

std::vector<Sample> sample_negatives(const ClientShard& shard,
                                     std::span<const Sample> positives, std::size_t ratio,
                                     std::uint64_t seed) {
  return NegativeSampler(shard).augment(positives, ratio, seed);
}

// ---------------------------------------------------------------------------

void apply_sgd(ModelParams& params, const GradientSet& grads, double lr) {
  const auto& g = grads.tensors();
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto& t = params.tensors[i];
    for (auto r : grads.touched_rows(i)) {
      auto w = t.row(r);
      const auto d = g[i].row(r);
      for (std::size_t c = 0; c < w.size(); ++c) w[c] -= lr * d[c];
    }
  }
}

AdamState::AdamState(const ModelParams& like, const TrainConfig& cfg)
    : beta1_(cfg.adam_beta1), beta2_(cfg.adam_beta2), eps_(cfg.adam_epsilon) {
  for (const auto& t : like.tensors) {
    m_.emplace_back(t.data.size(), 0.0);
    v_.emplace_back(t.data.size(), 0.0);
    active_.emplace_back(t.rows, 0);
    active_rows_.emplace_back();
  }
}

void AdamState::step(ModelParams& params, const GradientSet& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto& g = grads.tensors();
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto& t = params.tensors[i];
    for (auto r : grads.touched_rows(i))
      if (!active_[i][r]) {
        active_[i][r] = 1;
        active_rows_[i].push_back(r);
      }
    for (auto r : active_rows_[i]) {
      const bool fresh = grads.touched(i, r);
      for (std::size_t c = 0; c < t.cols; ++c) {
        const auto k = r * t.cols + c;
        const double gk = fresh ? g[i].data[k] : 0.0;
        m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * gk;
        v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * gk * gk;
        t.data[k] -= lr * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps_);
      }
    }
  }
}

// ---------------------------------------------------------------------------

ClientUpdate local_train(const ClientShard& shard, const ModelParams& global_params,
                         const TrainConfig& cfg, const GraphContext& ctx) {
  cfg.validate();
  if (shard.data.empty())
    throw ContractError("client " + std::to_string(shard.client_id) + " has no interactions");

  ClientUpdate out;
  out.params = global_params;
  out.sample_count = shard.sample_count;
  out.client_id = shard.client_id;

  const auto positives = positives_of(shard);
  const NegativeSampler sampler(shard);
  GradientSet grads(out.params);
  Tape tape(out.params);
  std::optional<AdamState> adam;
  if (cfg.optimizer == Optimizer::kAdam) adam.emplace(out.params, cfg);

  std::vector<std::size_t> order(positives.size());
  std::vector<Sample> chunk;
  for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, {epoch, 0}));
    shuffle(order, rng);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const auto end = std::min(order.size(), begin + cfg.batch_size);
      chunk.clear();
      for (auto k = begin; k < end; ++k) chunk.push_back(positives[order[k]]);
      const auto batch =
          sampler.augment(chunk, cfg.negatives_per_positive, derive_seed(cfg.seed, {epoch, batches, 1}));
      double loss;
      try {
        loss = forward_backward(batch, ctx, out.params, derive_seed(cfg.seed, {epoch, batches, 2}),
                                true, grads, tape);
      } catch (const NumericalError& e) {
        throw NumericalError("client " + std::to_string(shard.client_id) + ", epoch " +
                             std::to_string(epoch) + ", batch " + std::to_string(batches) +
                             ": " + e.what());
      }
      if (adam)
        adam->step(out.params, grads, cfg.learning_rate);
      else
        apply_sgd(out.params, grads, cfg.learning_rate);
      loss_sum += loss;
      ++batches;
    }
    out.epoch_losses.push_back(loss_sum / static_cast<double>(batches));
  }
  out.train_loss = std::accumulate(out.epoch_losses.begin(), out.epoch_losses.end(), 0.0) /
                   static_cast<double>(out.epoch_losses.size());
  return out;
}

bool early_stop(std::span<const double> history, std::size_t patience) {
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (history.empty()) return false;
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i)
    if (history[i] > history[best]) best = i;
  return history.size() - 1 - best >= patience;
}

}  // namespace fedgrec
