#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>
#include <set>

#include "fedgrec/errors.hpp"
#include "fedgrec/evaluation.hpp"
#include "fedgrec/random.hpp"
#include "fedgrec/synthetic.hpp"
#include "helpers.hpp"

using namespace fedgrec;

namespace {

// Scores come from a fixed table.
class TableScorer : public Scorer {
 public:
  explicit TableScorer(std::vector<std::vector<double>> table) : table_(std::move(table)) {}
  Index n_items() const override { return static_cast<Index>(table_[0].size()); }
  double score(Index u, Index i) override { return table_[u][i]; }

 private:
  std::vector<std::vector<double>> table_;
};

// Brute force: every pair compared, no sorting library.
std::vector<Index> oracle_rank(const std::vector<double>& s, const std::set<Index>& excluded) {
  std::vector<Index> out;
  std::vector<bool> used(s.size(), false);
  for (std::size_t round = 0; round < s.size(); ++round) {
    std::optional<Index> best;
    for (Index i = 0; i < s.size(); ++i) {
      if (used[i] || excluded.count(i)) continue;
      if (!best || s[i] > s[*best]) best = i;
    }
    if (!best) break;
    used[*best] = true;
    out.push_back(*best);
  }
  return out;
}

double dcg(const std::vector<bool>& relevant, std::size_t k) {
  double total = 0.0;
  for (std::size_t p = 0; p < std::min(k, relevant.size()); ++p)
    if (relevant[p]) total += std::log(2.0) / std::log(p + 2.0);
  return total;
}

double oracle_ndcg(const std::vector<Index>& ranked, const std::set<Index>& truth, std::size_t k) {
  std::vector<bool> rel, ideal;
  for (auto i : ranked) rel.push_back(truth.count(i) > 0);
  ideal.assign(std::max(rel.size(), truth.size()), false);
  std::fill(ideal.begin(), ideal.begin() + static_cast<std::ptrdiff_t>(truth.size()), true);
  return dcg(rel, k) / dcg(ideal, k);
}

}  // namespace

// ---------------------------------------------------------------------------
// ranking primitives

TEST_CASE("ranking sorts by score, ties by index, skipping exclusions") {
  const std::vector<double> s{0.2, 0.9, 0.5, 0.9, 0.1};
  CHECK(rank_by_scores(s, {}) == std::vector<Index>{1, 3, 2, 0, 4});
  const std::vector<Index> ex{1, 4};
  CHECK(rank_by_scores(s, ex) == std::vector<Index>{3, 2, 0});
}

TEST_CASE("recall and ndcg by hand") {
  const std::vector<Index> ranked{5, 2, 9, 1};
  const std::vector<Index> one{2};
  CHECK(recall_at_k(ranked, one, 1) == 0.0);
  CHECK(recall_at_k(ranked, one, 2) == 1.0);
  CHECK(ndcg_at_k(ranked, one, 2) == doctest::Approx(0.6309).epsilon(1e-4));
  CHECK(ndcg_at_k(ranked, one, 2) == doctest::Approx(1.0 / std::log2(3.0)));

  const std::vector<Index> two{5, 1};
  CHECK(recall_at_k(ranked, two, 3) == 0.5);
  CHECK(recall_at_k(ranked, two, 4) == 1.0);
  CHECK(ndcg_at_k(ranked, two, 4) ==
        doctest::Approx((1.0 + 1.0 / std::log2(5.0)) / (1.0 + 1.0 / std::log2(3.0))));
  CHECK(ndcg_at_k(ranked, std::vector<Index>{5}, 1) == 1.0);
  // more truth than k: the ideal list is capped at k
  const std::vector<Index> many{5, 2, 9, 1};
  CHECK(ndcg_at_k(ranked, many, 2) == 1.0);
  CHECK(recall_at_k(ranked, many, 2) == 0.5);
  // k beyond the list
  CHECK(recall_at_k(ranked, two, 100) == 1.0);

  CHECK_THROWS_AS(recall_at_k(ranked, std::vector<Index>{}, 3), ContractError);
  CHECK_THROWS_AS(ndcg_at_k(ranked, one, 0), ContractError);
}

TEST_CASE("ranking and metrics agree with a brute-force oracle") {
  Rng rng(21);
  for (int trial = 0; trial < 300; ++trial) {
    const auto n = 1 + uniform_index(rng, 30);
    std::vector<double> s(n);
    // a coarse grid forces ties
    for (auto& v : s) v = static_cast<double>(uniform_index(rng, 6)) / 5.0;
    std::set<Index> excluded, truth;
    for (Index i = 0; i < n; ++i) {
      const auto r = uniform_index(rng, 10);
      if (r < 2) excluded.insert(i);
      else if (r < 4) truth.insert(i);
    }
    const std::vector<Index> ex(excluded.begin(), excluded.end());
    const auto ranked = rank_by_scores(s, ex);
    REQUIRE(ranked == oracle_rank(s, excluded));
    if (truth.empty()) continue;
    const std::vector<Index> tv(truth.begin(), truth.end());
    for (std::size_t k : {1u, 3u, 5u, 10u, 40u}) {
      std::size_t hits = 0;
      for (std::size_t p = 0; p < std::min(k, ranked.size()); ++p) hits += truth.count(ranked[p]);
      CHECK(recall_at_k(ranked, tv, k) == doctest::Approx(double(hits) / truth.size()));
      CHECK(ndcg_at_k(ranked, tv, k) == doctest::Approx(oracle_ndcg(ranked, truth, k)));
    }
  }
}

TEST_CASE("metrics never decrease as k grows and stay in [0, 1]") {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Index> ranked(20);
    std::iota(ranked.begin(), ranked.end(), 0);
    shuffle(ranked, rng);
    std::vector<Index> truth;
    for (Index i = 0; i < 20; ++i)
      if (uniform01(rng) < 0.3) truth.push_back(i);
    if (truth.empty()) truth.push_back(7);
    double prev = 0.0;
    for (std::size_t k = 1; k <= 25; ++k) {
      const double r = recall_at_k(ranked, truth, k);
      CHECK(r >= prev);
      CHECK(r <= 1.0);
      prev = r;
      const double g = ndcg_at_k(ranked, truth, k);
      CHECK(g >= 0.0);
      CHECK(g <= 1.0 + 1e-12);
    }
    CHECK(prev == 1.0);
  }
}

TEST_CASE("rating errors by hand") {
  const std::vector<std::pair<double, double>> pairs{{0.5, 1.0}, {0.25, 0.0}, {1.0, 1.0}};
  const auto e = rating_errors(pairs);
  CHECK(e.mae == doctest::Approx(0.25));
  CHECK(e.rmse == doctest::Approx(std::sqrt((0.25 + 0.0625) / 3.0)));
  const std::vector<std::pair<double, double>> exact{{0.3, 0.3}, {0.9, 0.9}};
  CHECK(rating_errors(exact).rmse == 0.0);
  CHECK(rating_errors(exact).mae == 0.0);
  CHECK_THROWS_AS(rating_errors(std::vector<std::pair<double, double>>{}), ContractError);
}

// ---------------------------------------------------------------------------
// protocol

TEST_CASE("a scorer that knows the answers reaches recall and ndcg 1") {
  const auto train = testing::make_dataset({{0, 0, 1, 1}, {1, 1, 1, 1}, {2, 2, 1, 1}}, 3, 8);
  const auto test = testing::make_dataset({{0, 3, 1, 5}, {0, 4, 1, 6}, {1, 5, 1, 5}}, 3, 8);
  std::vector<std::vector<double>> table(3, std::vector<double>(8, 0.0));
  for (const auto& x : test.interactions) table[x.user][x.item] = 1.0;
  for (const auto& x : train.interactions) table[x.user][x.item] = 5.0;  // excluded as seen
  TableScorer scorer(table);
  const Dataset* seen[] = {&train};
  const auto m = evaluate(scorer, test, seen, {2, 0, false});
  CHECK(m.recall == 1.0);
  CHECK(m.ndcg == 1.0);
  CHECK(m.n_users_evaluated == 2);
  CHECK(m.k == 2);
}

TEST_CASE("seen items are excluded from truth and ranking") {
  const auto train = testing::make_dataset({{0, 0, 1, 1}}, 1, 4);
  const auto test = testing::make_dataset({{0, 0, 1, 2}, {0, 2, 1, 3}}, 1, 4);
  TableScorer scorer({{0.1, 0.9, 0.5, 0.3}});
  const Dataset* seen[] = {&train};
  const auto m = evaluate(scorer, test, seen, {1, 0, false});
  // target is {2}; ranking is 1, 2, 3
  CHECK(m.recall == 0.0);
  CHECK(evaluate(scorer, test, seen, {2, 0, false}).recall == 1.0);
  CHECK(evaluate(scorer, test, seen, {2, 0, false}).ndcg == doctest::Approx(1.0 / std::log2(3.0)));
}

TEST_CASE("a user whose test items were all seen is skipped") {
  const auto train = testing::make_dataset({{0, 0, 1, 1}, {1, 1, 1, 1}}, 2, 4);
  const auto test = testing::make_dataset({{0, 0, 1, 2}, {1, 2, 1, 2}}, 2, 4);
  TableScorer scorer({{0, 0, 0, 0}, {0, 0, 1, 0}});
  const Dataset* seen[] = {&train};
  const auto m = evaluate(scorer, test, seen, {1, 0, false});
  CHECK(m.n_users_evaluated == 1);
  CHECK(m.recall == 1.0);
}

TEST_CASE("rating errors pair each positive with an unseen negative") {
  const auto train = testing::make_dataset({{0, 0, 1, 1}}, 1, 4);
  const auto test = testing::make_dataset({{0, 1, 1, 2}}, 1, 4);
  TableScorer scorer({{0.0, 0.75, 0.5, 0.5}});
  const Dataset* seen[] = {&train};
  const auto m = evaluate(scorer, test, seen, {5, 9, true});
  CHECK(m.n_rating_pairs == 2);
  CHECK(m.mae == doctest::Approx((0.25 + 0.5) / 2));
  CHECK(m.rmse == doctest::Approx(std::sqrt((0.0625 + 0.25) / 2)));
  CHECK(evaluate(scorer, test, seen, {5, 9, true}) == m);
}

TEST_CASE("random scores give recall near k over the candidate count") {
  // 50 users, 40 items, 5 seen and 3 test items each: 35 candidates.
  Rng rng(1);
  std::vector<Interaction> train_rows, test_rows;
  for (Index u = 0; u < 50; ++u) {
    std::vector<Index> items(40);
    std::iota(items.begin(), items.end(), 0);
    shuffle(items, rng);
    for (int j = 0; j < 5; ++j) train_rows.push_back({u, items[j], 1, 1});
    for (int j = 5; j < 8; ++j) test_rows.push_back({u, items[j], 1, 2});
  }
  const auto train = testing::make_dataset(train_rows, 50, 40);
  const auto test = testing::make_dataset(test_rows, 50, 40);
  const Dataset* seen[] = {&train};
  double total = 0.0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    std::vector<std::vector<double>> table(50, std::vector<double>(40));
    for (auto& row : table)
      for (auto& v : row) v = uniform01(rng);
    TableScorer scorer(table);
    total += evaluate(scorer, test, seen, {7, 0, false}).recall;
  }
  // mean 7/35 = 0.2; the sd of a trial is about 0.03, so of the average 0.002
  CHECK(std::abs(total / trials - 0.2) < 0.01);
}

TEST_CASE("evaluation rejects empty truth and k = 0") {
  const auto test = testing::make_dataset({{0, 1, 1, 2}}, 1, 4);
  TableScorer scorer({{0, 0, 0, 0}});
  CHECK_THROWS_AS(evaluate(scorer, test, {}, {0, 0, false}), ConfigError);
  const auto empty = testing::make_dataset({}, 1, 4);
  CHECK_THROWS_AS(evaluate(scorer, empty, {}, {5, 0, false}), ContractError);
}

TEST_CASE("model scorer matches predict bit for bit") {
  SyntheticConfig sc;
  sc.n_users = 16;
  sc.n_items = 30;
  const auto ds = make_block_dataset(sc);
  const auto w = testing::make_world(ds.interactions, ds.n_users, ds.n_items, 3);
  ModelConfig c;
  c.dim = 4;
  const auto p = ModelParams::init(model_config_for(ds, c), 6);
  const Timestamp t = w->ctx.eval_time();
  for (bool off_neighbors : {false, true}) {
    auto ctx = w->ctx;
    ctx.ablation.neighbor_public_interactions = !off_neighbors;
    ctx.ablation.item_graph = !off_neighbors;
    ModelScorer scorer(p, ctx, 12, t);
    for (Index u = 0; u < ds.n_users; u += 3) {
      const auto all = scorer.score_all(u);
      for (Index i = 0; i < ds.n_items; i += 2) {
        const double r = predict(u, i, t, ctx, p, 12);
        CHECK(std::memcmp(&r, &all[i], sizeof r) == 0);
        const double again = scorer.score(u, i);
        CHECK(std::memcmp(&r, &again, sizeof r) == 0);
      }
    }
  }
}

TEST_CASE("items_by_user merges parts and sorts") {
  const auto a = testing::make_dataset({{0, 3, 1, 1}, {1, 1, 1, 1}}, 2, 5);
  const auto b = testing::make_dataset({{0, 1, 1, 2}, {0, 3, 1, 3}}, 2, 5);
  const Dataset* parts[] = {&a, &b};
  const auto m = items_by_user(parts, 2);
  CHECK(m[0] == std::vector<Index>{1, 3});
  CHECK(m[1] == std::vector<Index>{1});
}
