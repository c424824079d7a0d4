#include "fedgrec/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fedgrec/errors.hpp"
#include "fedgrec/random.hpp"

namespace fedgrec {

std::vector<Index> rank_by_scores(std::span<const double> scores,
                                  std::span<const Index> exclude) {
  std::vector<Index> out;
  out.reserve(scores.size());
  for (Index i = 0; i < scores.size(); ++i)
    if (!std::binary_search(exclude.begin(), exclude.end(), i)) out.push_back(i);
  std::stable_sort(out.begin(), out.end(),
                   [&](Index a, Index b) { return scores[a] > scores[b]; });
  return out;
}

namespace {

void check_ranking_args(std::span<const Index> truth, std::size_t k) {
  if (k < 1) throw ContractError("k must be >= 1");
  if (truth.empty()) throw ContractError("ranking metrics need a nonempty truth set");
}

bool in_truth(std::span<const Index> truth, Index item) {
  return std::find(truth.begin(), truth.end(), item) != truth.end();
}

}  // namespace

double recall_at_k(std::span<const Index> ranked, std::span<const Index> truth, std::size_t k) {
  check_ranking_args(truth, k);
  std::size_t hits = 0;
  for (std::size_t p = 0; p < std::min(k, ranked.size()); ++p)
    if (in_truth(truth, ranked[p])) ++hits;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

double ndcg_at_k(std::span<const Index> ranked, std::span<const Index> truth, std::size_t k) {
  check_ranking_args(truth, k);
  double dcg = 0.0;
  for (std::size_t p = 0; p < std::min(k, ranked.size()); ++p)
    if (in_truth(truth, ranked[p])) dcg += 1.0 / std::log2(static_cast<double>(p) + 2.0);
  double idcg = 0.0;
  for (std::size_t p = 0; p < std::min(k, truth.size()); ++p)
    idcg += 1.0 / std::log2(static_cast<double>(p) + 2.0);
  return dcg / idcg;
}

RatingErrors rating_errors(std::span<const std::pair<double, double>> pairs) {
  if (pairs.empty()) throw ContractError("rating_errors needs at least one pair");
  double sq = 0.0, abs = 0.0;
  for (const auto& [pred, truth] : pairs) {
    const double r = pred - truth;
    sq += r * r;
    abs += std::fabs(r);
  }
  const auto n = static_cast<double>(pairs.size());
  return {std::sqrt(sq / n), abs / n};
}

// ---------------------------------------------------------------------------

std::vector<double> Scorer::score_all(Index user) {
  std::vector<double> out(n_items());
  for (Index i = 0; i < out.size(); ++i) out[i] = score(user, i);
  return out;
}

ModelScorer::ModelScorer(const ModelParams& params, const GraphContext& ctx, std::uint64_t seed,
                         Timestamp t)
    : params_(&params),
      ctx_(&ctx),
      seed_(seed),
      t_(t),
      item_depends_on_user_(!ctx.ablation.neighbor_public_interactions),
      users_(params.config.n_users),
      items_(params.config.n_items) {}

ModelScorer::Cached ModelScorer::compute(NodeRef node, Index query_user) const {
  Tape tape(*params_);
  const auto rep = represent(tape, *params_, *ctx_, node, t_, {false, seed_, query_user});
  const auto tv = tape.value(rep.temporal);
  const auto sv = tape.value(rep.spatial);
  return {true, {tv.begin(), tv.end()}, {sv.begin(), sv.end()}};
}

const ModelScorer::Cached& ModelScorer::rep(NodeRef node, Index query_user) {
  if (node.side == Side::kItem && item_depends_on_user_) {
    scratch_ = compute(node, query_user);
    return scratch_;
  }
  auto& slot = node.side == Side::kUser ? users_.at(node.index) : items_.at(node.index);
  if (!slot.ready) slot = compute(node, query_user);
  return slot;
}

double ModelScorer::score(Index user, Index item) {
  if (user >= params_->config.n_users || item >= params_->config.n_items)
    throw ContractError("score: index outside the vocabulary");
  const auto& u = rep(NodeRef::user(user), user);
  const auto& i = rep(NodeRef::item(item), user);
  return score_from_reps(*params_, u.temporal, u.spatial, i.temporal, i.spatial);
}

std::vector<Index> rank_items(Scorer& scorer, Index user, std::span<const Index> exclude) {
  std::vector<Index> sorted(exclude.begin(), exclude.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  if (sorted.size() >= scorer.n_items()) return {};
  return rank_by_scores(scorer.score_all(user), sorted);
}

// ---------------------------------------------------------------------------

std::vector<std::vector<Index>> items_by_user(std::span<const Dataset* const> parts,
                                              Index n_users) {
  std::vector<std::vector<Index>> out(n_users);
  for (const auto* ds : parts)
    for (const auto& x : ds->interactions) {
      if (x.user >= n_users) throw ContractError("user index outside the vocabulary");
      out[x.user].push_back(x.item);
    }
  for (auto& v : out) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
  return out;
}

MetricsReport evaluate(Scorer& scorer, const Dataset& truth,
                       std::span<const Dataset* const> seen, const EvalOptions& opts) {
  if (truth.empty()) throw ContractError("evaluation split is empty");
  if (opts.k < 1) throw ConfigError("k must be >= 1");
  const Dataset* truth_ptr = &truth;
  const auto truth_items = items_by_user({&truth_ptr, 1}, truth.n_users);
  const auto seen_items = items_by_user(seen, truth.n_users);
  const auto n_items = scorer.n_items();
  std::vector<std::vector<Index>> truth_rows(truth.n_users);
  for (const auto& x : truth.interactions) truth_rows[x.user].push_back(x.item);

  MetricsReport rep;
  rep.k = opts.k;
  double recall_sum = 0.0, ndcg_sum = 0.0;
  std::vector<std::pair<double, double>> pairs;

  for (Index u = 0; u < truth.n_users; ++u) {
    if (truth_items[u].empty()) continue;
    std::vector<Index> target;
    std::set_difference(truth_items[u].begin(), truth_items[u].end(), seen_items[u].begin(),
                        seen_items[u].end(), std::back_inserter(target));
    if (!target.empty()) {
      const auto scores = scorer.score_all(u);
      const auto ranked = rank_by_scores(scores, seen_items[u]);
      recall_sum += recall_at_k(ranked, target, opts.k);
      ndcg_sum += ndcg_at_k(ranked, target, opts.k);
      ++rep.n_users_evaluated;
    }
    if (!opts.rating_errors) continue;

    std::vector<Index> touched;
    std::set_union(truth_items[u].begin(), truth_items[u].end(), seen_items[u].begin(),
                   seen_items[u].end(), std::back_inserter(touched));
    Rng rng(derive_seed(opts.seed, {fnv1a64("rating-negatives"), u}));
    for (auto item : truth_rows[u]) {
      pairs.emplace_back(scorer.score(u, item), 1.0);
      if (touched.size() >= n_items) continue;
      Index j;
      do {
        j = static_cast<Index>(uniform_index(rng, n_items));
      } while (std::binary_search(touched.begin(), touched.end(), j));
      pairs.emplace_back(scorer.score(u, j), 0.0);
    }
  }
  if (rep.n_users_evaluated > 0) {
    rep.recall = recall_sum / static_cast<double>(rep.n_users_evaluated);
    rep.ndcg = ndcg_sum / static_cast<double>(rep.n_users_evaluated);
  }
  if (!pairs.empty()) {
    const auto err = rating_errors(pairs);
    rep.rmse = err.rmse;
    rep.mae = err.mae;
    rep.n_rating_pairs = pairs.size();
  }
  return rep;
}

}  // namespace fedgrec
