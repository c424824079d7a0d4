#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "fedgrec/errors.hpp"
#include "fedgrec/graphs.hpp"
#include "fedgrec/random.hpp"
#include "fedgrec/synthetic.hpp"
#include "helpers.hpp"

using namespace fedgrec;
using testing::make_dataset;

namespace {

Dataset random_dataset(std::uint64_t seed, Index users, Index items, std::size_t rows) {
  Rng rng(seed);
  std::vector<Interaction> out;
  for (std::size_t r = 0; r < rows; ++r)
    out.push_back({static_cast<Index>(uniform_index(rng, users)),
                   static_cast<Index>(uniform_index(rng, items)), 1.0,
                   static_cast<Timestamp>(uniform_index(rng, 1000))});
  return make_dataset(out, users, items);
}

bool same_subgraph(const Subgraph& a, const Subgraph& b) {
  if (a.nodes != b.nodes || a.layers != b.layers || a.cold != b.cold ||
      a.edges.size() != b.edges.size())
    return false;
  for (std::size_t e = 0; e < a.edges.size(); ++e) {
    const auto &x = a.edges[e], &y = b.edges[e];
    if (x.src != y.src || x.dst != y.dst || x.kind != y.kind || x.time_bucket != y.time_bucket)
      return false;
  }
  return true;
}

bool interacted(const BipartiteSlice& s, Index u, Index i) {
  for (const auto& a : s.user_neighbors(u))
    if (a.neighbor == i) return true;
  return false;
}

// i=0 and k=1 each touch an item first; j1=2 and j2=3 touch both items later.
Dataset follower_toy() {
  return make_dataset({{0, 0, 1.0, 1},
                       {1, 1, 1.0, 1},
                       {2, 0, 1.0, 2},
                       {2, 1, 1.0, 2},
                       {3, 0, 1.0, 3},
                       {3, 1, 1.0, 3}},
                      4, 2);
}

}  // namespace

TEST_CASE("time buckets are floor log2 clamped") {
  CHECK(time_bucket(-5) == 0);
  CHECK(time_bucket(0) == 0);
  CHECK(time_bucket(1) == 0);
  CHECK(time_bucket(2) == 1);
  CHECK(time_bucket(3) == 1);
  CHECK(time_bucket(4) == 2);
  CHECK(time_bucket(3000) == 11);
  CHECK(time_bucket(Timestamp{1} << 40) == 15);
}

TEST_CASE("100 stamps at slice length 50 give two slices") {
  std::vector<Interaction> rows;
  for (Timestamp t = 0; t < 100; ++t) rows.push_back({static_cast<Index>(t % 7), 0, 1.0, t});
  const auto g = build_time_slices(make_dataset(rows, 7, 1), 50);
  REQUIRE(g.slices.size() == 2);
  CHECK(g.boundaries[1] == 50);
  CHECK(g.slices[0].edge_count() == 50);
  CHECK(g.slices[1].edge_count() == 50);
  CHECK(g.slice_of(49) == 0);
  CHECK(g.slice_of(50) == 1);
}

TEST_CASE("slice longer than the range is the whole graph") {
  const auto ds = random_dataset(1, 10, 10, 60);
  const auto g = build_time_slices(ds, 1'000'000);
  REQUIRE(g.slices.size() == 1);
  CHECK(g.slices[0].edge_count() == ds.size());
}

TEST_CASE("boundary interaction lands in the later slice") {
  const auto ds = make_dataset({{0, 0, 1.0, 0}, {0, 1, 1.0, 10}, {1, 0, 1.0, 20}}, 2, 2);
  const auto g = build_time_slices(ds, 10);
  REQUIRE(g.slices.size() == 3);
  CHECK(g.slices[0].edge_count() == 1);
  CHECK(g.slices[1].edge_count() == 1);
  CHECK(g.slices[1].user_neighbors(0)[0].neighbor == 1);
  CHECK(g.slices[2].edge_count() == 1);
}

TEST_CASE("slices partition the interactions and adjacencies are transposes") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto ds = random_dataset(seed, 15, 25, 200);
    const auto g = build_time_slices(ds, default_slice_length(ds, 8));
    std::size_t total = 0;
    for (std::size_t s = 0; s < g.slices.size(); ++s) {
      const auto& sl = g.slices[s];
      total += sl.edge_count();
      std::multiset<std::tuple<Index, Index, Timestamp>> by_user, by_item;
      for (Index u = 0; u < ds.n_users; ++u) {
        const auto adj = sl.user_neighbors(u);
        for (std::size_t a = 0; a < adj.size(); ++a) {
          by_user.emplace(u, adj[a].neighbor, adj[a].timestamp);
          CHECK(adj[a].timestamp >= g.boundaries[s]);
          CHECK(adj[a].timestamp < g.boundaries[s + 1]);
          if (a > 0) CHECK(adj[a - 1].timestamp <= adj[a].timestamp);
        }
      }
      for (Index i = 0; i < ds.n_items; ++i)
        for (const auto& a : sl.item_neighbors(i)) by_item.emplace(a.neighbor, i, a.timestamp);
      CHECK(by_user == by_item);
    }
    CHECK(total == ds.size());
    CHECK(g.merged.edge_count() == ds.size());
  }
}

TEST_CASE("behavior sequences: under-length, truncation, boundary") {
  std::vector<Interaction> rows;
  for (Timestamp t = 1; t <= 8; ++t) rows.push_back({0, static_cast<Index>(t - 1), 1.0, t * 10});
  for (Timestamp t = 1; t <= 3; ++t) rows.push_back({1, static_cast<Index>(t), 1.0, t * 10});
  const auto g = build_time_slices(make_dataset(rows, 2, 8), 25);

  auto short_seq = build_behavior_sequence(g, NodeRef::user(1), kNoCutoff, 5);
  CHECK(short_seq.events.size() == 3);

  auto long_seq = build_behavior_sequence(g, NodeRef::user(0), kNoCutoff, 5);
  REQUIRE(long_seq.events.size() == 5);
  CHECK(long_seq.events.front().timestamp == 40);
  CHECK(long_seq.events.back().timestamp == 80);
  CHECK(long_seq.events.back().counterpart == 7);

  CHECK(build_behavior_sequence(g, NodeRef::user(0), 10, 5).events.empty());
  CHECK(build_behavior_sequence(g, NodeRef::user(0), 31, 5).events.size() == 3);
  const auto item_seq = build_behavior_sequence(g, NodeRef::item(2), kNoCutoff, 5);
  CHECK(item_seq.events.size() == 2);
}

TEST_CASE("common followers give a weight-2 edge at tau 2 and none at tau 3") {
  const auto ds = follower_toy();
  const auto follows = follow_relation(ds);
  CHECK(follows.followers[0] == std::vector<Index>{2, 3});
  CHECK(follows.followers[1] == std::vector<Index>{2, 3});

  const auto e2 = implicit_user_relations(ds, 2, 20);
  REQUIRE(e2.size() == 2);
  CHECK(e2.contains(0, 1));
  CHECK(e2.contains(1, 0));
  CHECK(e2.from(1)[0].weight == 2.0);
  CHECK(implicit_user_relations(ds, 3, 20).size() == 0);
}

TEST_CASE("a user without followers has no outgoing relation edges") {
  const auto ds = follower_toy();
  const auto e1 = implicit_user_relations(ds, 1, 20);
  CHECK(e1.from(3).empty());
  for (const auto& e : e1.edges()) {
    CHECK(e.src != e.dst);
    CHECK(e.weight > 0.0);
  }
}

TEST_CASE("tau monotonicity and top-m cap") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const auto ds = random_dataset(seed, 20, 15, 150);
    const auto follows = follow_relation(ds);
    for (std::size_t tau = 1; tau < 5; ++tau) {
      const auto loose = implicit_user_relations(follows, tau, 1000);
      const auto tight = implicit_user_relations(follows, tau + 1, 1000);
      for (const auto& e : tight.edges()) CHECK(loose.contains(e.src, e.dst));
    }
    const auto capped = implicit_user_relations(follows, 1, 3);
    for (Index u = 0; u < ds.n_users; ++u) {
      CHECK(capped.from(u).size() <= 3);
      const auto all = implicit_user_relations(follows, 1, 1000).from(u);
      const auto top = capped.from(u);
      for (std::size_t r = 0; r < top.size(); ++r) CHECK(top[r].weight == all[r].weight);
    }
  }
}

TEST_CASE("item similarity: shrunk cosine") {
  // items 0 and 1 share raters u0, u1, all ratings 1
  const auto ds = make_dataset({{0, 0, 1.0, 1}, {0, 1, 1.0, 2}, {1, 0, 1.0, 3}, {1, 1, 1.0, 4},
                                {2, 2, 1.0, 5}},
                               3, 3);
  const auto shrunk = implicit_item_relations(ds, 20, 5.0);
  REQUIRE(shrunk.contains(0, 1));
  CHECK(shrunk.from(0)[0].weight == doctest::Approx(2.0 / 7.0).epsilon(1e-12));
  CHECK_FALSE(shrunk.contains(0, 2));
  CHECK(shrunk.from(2).empty());

  const auto exact = implicit_item_relations(ds, 20, 0.0);
  CHECK(exact.from(0)[0].weight == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(implicit_item_relations(ds, 20, -1.0), ConfigError);
}

TEST_CASE("item similarity matches a direct cosine") {
  Rng rng(5);
  std::vector<Interaction> rows;
  for (Index u = 0; u < 6; ++u)
    for (Index i = 0; i < 4; ++i)
      if (uniform01(rng) < 0.7) rows.push_back({u, i, 1.0 + uniform_index(rng, 5), 0});
  const auto ds = make_dataset(rows, 6, 4);
  const auto edges = implicit_item_relations(ds, 20, 2.0);
  for (Index a = 0; a < 4; ++a)
    for (Index b = 0; b < 4; ++b) {
      if (a == b) continue;
      double dot = 0, aa = 0, bb = 0, n = 0;
      for (Index u = 0; u < 6; ++u) {
        double ra = 0, rb = 0;
        for (const auto& x : ds.interactions)
          if (x.user == u) {
            if (x.item == a) ra = x.rating;
            if (x.item == b) rb = x.rating;
          }
        if (ra > 0 && rb > 0) {
          dot += ra * rb;
          aa += ra * ra;
          bb += rb * rb;
          n += 1;
        }
      }
      if (n == 0) {
        CHECK_FALSE(edges.contains(a, b));
        continue;
      }
      const double w = dot / (std::sqrt(aa) * std::sqrt(bb)) * n / (n + 2.0);
      REQUIRE(edges.contains(a, b));
      for (const auto& e : edges.from(a))
        if (e.dst == b) CHECK(e.weight == doctest::Approx(w).epsilon(1e-12));
    }
}

TEST_CASE("meta-path neighbor sets") {
  // social chain u0 - u1, and u1 interacted with item 0
  const auto ds = make_dataset({{1, 0, 1.0, 5}, {2, 1, 1.0, 6}}, 3, 2);
  const ImplicitEdges no_users(EdgeKind::kUserUser, 3, {}, 20);
  const ImplicitEdges items(EdgeKind::kItemItem, 2, {{0, 1, 0.5}}, 20);
  const MetaPathIndex index(ds, no_users, items, std::vector<std::pair<Index, Index>>{{0, 1}});

  const auto u0 = index.query(NodeRef::user(0), 5);
  CHECK(u0.user_user == std::vector<Index>{1});
  CHECK(u0.user_user_item == std::vector<Index>{0});
  CHECK(u0.user_implicit.empty());
  CHECK(u0.user_implicit_item.empty());

  const auto i0 = index.query(NodeRef::item(0), 5);
  CHECK(i0.item_user == std::vector<Index>{1});
  CHECK(i0.item_implicit == std::vector<Index>{1});
  CHECK(i0.item_implicit_user == std::vector<Index>{2});
}

TEST_CASE("item-user path equals the slice adjacency") {
  const auto ds = random_dataset(3, 10, 6, 40);
  const auto users = implicit_user_relations(ds, 2, 20);
  const auto items = implicit_item_relations(ds, 20, 5.0);
  const MetaPathIndex index(ds, users, items);
  const BipartiteSlice slice(ds.interactions, ds.n_users, ds.n_items);
  for (Index i = 0; i < ds.n_items; ++i) {
    std::set<Index> adj;
    for (const auto& a : slice.item_neighbors(i)) adj.insert(a.neighbor);
    const auto q = index.query(NodeRef::item(i), 1000);
    CHECK(std::vector<Index>(adj.begin(), adj.end()) == q.item_user);
    CHECK(index.query(NodeRef::item(i), 2).item_user.size() <= 2);
  }
}

TEST_CASE("full neighborhood when fanout covers every degree") {
  // u0 - i0 - u1 - i1 ; u0 - i2
  const auto ds = make_dataset({{0, 0, 1.0, 1}, {0, 2, 1.0, 2}, {1, 0, 1.0, 3}, {1, 1, 1.0, 4}},
                               2, 3);
  const BipartiteSlice slice(ds.interactions, 2, 3);
  SampleOptions opts;
  opts.depth = 3;
  opts.fanout = 10;
  opts.reference_time = 10;
  const auto a = sample_khop(slice, nullptr, nullptr, NodeRef::user(0), opts, 1);
  const auto b = sample_khop(slice, nullptr, nullptr, NodeRef::user(0), opts, 99);
  CHECK(same_subgraph(a, b));
  REQUIRE(a.layers.size() == 4);
  CHECK(a.layers[1].size() == 2);  // i0, i2
  CHECK(a.layers[2].size() == 1);  // u1
  CHECK(a.layers[3].size() == 1);  // i1
  CHECK(a.nodes.size() == 5);
  CHECK(a.edges.size() == 4);
  CHECK_FALSE(a.cold);
  // time feature: reference 10, i2 touched at 2 -> delta 8 -> bucket 3
  for (const auto& e : a.edges)
    if (a.nodes[e.dst] == NodeRef::item(2)) CHECK(e.time_bucket == 3);
}

TEST_CASE("isolated root is cold") {
  const auto ds = make_dataset({{0, 0, 1.0, 1}}, 2, 1);
  const BipartiteSlice slice(ds.interactions, 2, 1);
  const auto g = sample_khop(slice, nullptr, nullptr, NodeRef::user(1), {}, 0);
  CHECK(g.nodes.size() == 1);
  CHECK(g.edges.empty());
  CHECK(g.cold);
}

TEST_CASE("cutoff hides newer interactions") {
  const auto ds = make_dataset({{0, 0, 1.0, 1}, {0, 1, 1.0, 50}}, 1, 2);
  const BipartiteSlice slice(ds.interactions, 1, 2);
  SampleOptions opts;
  opts.cutoff = 50;
  const auto g = sample_khop(slice, nullptr, nullptr, NodeRef::user(0), opts, 0);
  REQUIRE(g.nodes.size() == 2);
  CHECK(g.nodes[1] == NodeRef::item(0));
}

TEST_CASE("sampled subgraphs are sound, bounded and deterministic") {
  SyntheticConfig sc;
  const auto ds = make_block_dataset(sc);
  const BipartiteSlice slice(ds.interactions, ds.n_users, ds.n_items);
  const auto users = implicit_user_relations(ds, 2, 20);
  const auto items = implicit_item_relations(ds, 20, 5.0);
  for (std::size_t fanout : {1, 3, 5}) {
    SampleOptions opts;
    opts.depth = 2;
    opts.fanout = fanout;
    for (Index v = 0; v < 20; ++v)
      for (auto root : {NodeRef::user(v), NodeRef::item(v)}) {
        const auto g = sample_khop(slice, &users, &items, root, opts, v);
        CHECK(same_subgraph(g, sample_khop(slice, &users, &items, root, opts, v)));
        CHECK(g.root() == root);
        CHECK(g.layers[0] == std::vector<Index>{0});
        CHECK(g.nodes.size() <= 1 + fanout + fanout * fanout);
        std::vector<std::size_t> hop(g.nodes.size());
        for (std::size_t h = 0; h < g.layers.size(); ++h)
          for (auto id : g.layers[h]) hop[id] = h;
        for (const auto& e : g.edges) {
          CHECK(hop[e.dst] == hop[e.src] + 1);
          const auto a = g.nodes[e.src], b = g.nodes[e.dst];
          switch (e.kind) {
            case EdgeKind::kInteraction:
              CHECK(a.side != b.side);
              {
                const bool ok = a.side == Side::kUser ? interacted(slice, a.index, b.index)
                                                      : interacted(slice, b.index, a.index);
                CHECK(ok);
              }
              break;
            case EdgeKind::kUserUser:
              CHECK(users.contains(a.index, b.index));
              break;
            case EdgeKind::kItemItem:
              CHECK(items.contains(a.index, b.index));
              break;
          }
        }
        std::set<NodeRef> distinct(g.nodes.begin(), g.nodes.end());
        CHECK(distinct.size() == g.nodes.size());
      }
  }
}

TEST_CASE("disabled edge kinds never appear") {
  SyntheticConfig sc;
  const auto ds = make_block_dataset(sc);
  const BipartiteSlice slice(ds.interactions, ds.n_users, ds.n_items);
  const auto users = implicit_user_relations(ds, 2, 20);
  const auto items = implicit_item_relations(ds, 20, 5.0);
  SampleOptions opts;
  opts.implicit_users = false;
  opts.only_user = 3;
  for (Index v = 0; v < ds.n_items; ++v) {
    const auto g = sample_khop(slice, &users, &items, NodeRef::item(v), opts, v);
    for (const auto& e : g.edges) {
      CHECK(e.kind != EdgeKind::kUserUser);
      if (e.kind == EdgeKind::kInteraction) {
        const auto a = g.nodes[e.src], b = g.nodes[e.dst];
        CHECK((a.side == Side::kUser ? a.index : b.index) == 3);
      }
    }
  }
}

TEST_CASE("drop_node: identity, root kept, edges subset") {
  SyntheticConfig sc;
  const auto ds = make_block_dataset(sc);
  const BipartiteSlice slice(ds.interactions, ds.n_users, ds.n_items);
  SampleOptions opts;
  opts.fanout = 4;
  const auto g = sample_khop(slice, nullptr, nullptr, NodeRef::user(0), opts, 0);
  CHECK(same_subgraph(drop_node(g, 0.0, 5), g));
  CHECK_THROWS_AS(drop_node(g, 1.0, 0), ConfigError);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto d = drop_node(g, 0.5, seed);
    CHECK(d.root() == g.root());
    std::set<std::pair<NodeRef, NodeRef>> original;
    for (const auto& e : g.edges) original.emplace(g.nodes[e.src], g.nodes[e.dst]);
    for (const auto& e : d.edges) CHECK(original.count({d.nodes[e.src], d.nodes[e.dst]}) == 1);
    // every kept node still reaches the root
    std::vector<bool> reach(d.nodes.size(), false);
    reach[0] = true;
    for (std::size_t pass = 0; pass < d.nodes.size(); ++pass)
      for (const auto& e : d.edges)
        if (reach[e.src]) reach[e.dst] = true;
    CHECK(std::all_of(reach.begin(), reach.end(), [](bool b) { return b; }));
  }
}

TEST_CASE("drop_node near rate 1 leaves the root alone") {
  Subgraph star;
  star.nodes.push_back(NodeRef::user(0));
  star.layers = {{0}, {}};
  for (Index i = 0; i < 10; ++i) {
    star.nodes.push_back(NodeRef::item(i));
    star.layers[1].push_back(i + 1);
    star.edges.push_back({0, i + 1, EdgeKind::kInteraction, 0});
  }
  std::size_t root_only = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed)
    if (drop_node(star, 0.999, seed).nodes.size() == 1) ++root_only;
  CHECK(root_only > 980);
}
