#pragma once

// Ranking and rating metrics under the rank-all-unseen-items protocol.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "fedgrec/dataset.hpp"
#include "fedgrec/model.hpp"

namespace fedgrec {

struct MetricsReport {
  double recall = 0.0;
  double ndcg = 0.0;
  double rmse = 0.0;
  double mae = 0.0;
  std::size_t k = 20;
  std::size_t n_users_evaluated = 0;
  std::size_t n_rating_pairs = 0;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

// Indices sorted by descending score, ties by ascending index, skipping the
// (sorted) excluded indices.
std::vector<Index> rank_by_scores(std::span<const double> scores,
                                  std::span<const Index> exclude);

// |top-k ∩ truth| / |truth|. Truth must be nonempty and duplicate-free.
double recall_at_k(std::span<const Index> ranked, std::span<const Index> truth, std::size_t k);
double ndcg_at_k(std::span<const Index> ranked, std::span<const Index> truth, std::size_t k);

struct RatingErrors {
  double rmse = 0.0;
  double mae = 0.0;
};

// Pairs of (prediction, truth); must be nonempty.
RatingErrors rating_errors(std::span<const std::pair<double, double>> pairs);

class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual Index n_items() const = 0;
  virtual double score(Index user, Index item) = 0;
  // Scores for every item, index-aligned.
  virtual std::vector<double> score_all(Index user);
};

// Scores with the trained model at a fixed evaluation time. Entity
// representations are computed once and cached; this matches predict()
// bit for bit.
class ModelScorer : public Scorer {
 public:
  ModelScorer(const ModelParams& params, const GraphContext& ctx, std::uint64_t seed,
              Timestamp t);

  Index n_items() const override { return params_->config.n_items; }
  double score(Index user, Index item) override;

 private:
  struct Cached {
    bool ready = false;
    std::vector<double> temporal, spatial;
  };
  const Cached& rep(NodeRef node, Index query_user);
  Cached compute(NodeRef node, Index query_user) const;

  const ModelParams* params_;
  const GraphContext* ctx_;
  std::uint64_t seed_;
  Timestamp t_;
  bool item_depends_on_user_;
  std::vector<Cached> users_, items_;
  Cached scratch_;
};

std::vector<Index> rank_items(Scorer& scorer, Index user, std::span<const Index> exclude);

struct EvalOptions {
  std::size_t k = 20;
  std::uint64_t seed = 0;  // drives the negative sample for rating errors
  bool rating_errors = true;
};

// Per-user items of each dataset, merged and sorted.
std::vector<std::vector<Index>> items_by_user(std::span<const Dataset* const> parts,
                                              Index n_users);

// Averages Recall/NDCG over users whose truth (minus already-seen items) is
// nonempty; rating errors use every truth positive plus one seeded unseen
// negative each.
MetricsReport evaluate(Scorer& scorer, const Dataset& truth,
                       std::span<const Dataset* const> seen, const EvalOptions& opts);

}  // namespace fedgrec
