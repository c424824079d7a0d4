#include "fedgrec/graphs.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "fedgrec/errors.hpp"
#include "fedgrec/random.hpp"

namespace fedgrec {

std::size_t time_bucket(Timestamp delta) {
  if (delta <= 1) return 0;
  const auto log2 = 63 - std::countl_zero(static_cast<std::uint64_t>(delta));
  return std::min<std::size_t>(static_cast<std::size_t>(log2), kTimeBuckets - 1);
}

// ---------------------------------------------------------------------------
// BipartiteSlice

namespace {

void build_csr(std::size_t n, std::span<const Interaction> rows, bool by_user,
               std::vector<std::size_t>& off, std::vector<Adjacent>& adj) {
  off.assign(n + 1, 0);
  for (const auto& x : rows) ++off[(by_user ? x.user : x.item) + 1];
  std::partial_sum(off.begin(), off.end(), off.begin());
  adj.resize(rows.size());
  std::vector<std::size_t> fill(off.begin(), off.end() - 1);
  for (const auto& x : rows) {
    const auto owner = by_user ? x.user : x.item;
    adj[fill[owner]++] = {by_user ? x.item : x.user, x.timestamp, x.rating};
  }
  for (std::size_t v = 0; v < n; ++v)
    std::sort(adj.begin() + static_cast<std::ptrdiff_t>(off[v]),
              adj.begin() + static_cast<std::ptrdiff_t>(off[v + 1]),
              [](const Adjacent& a, const Adjacent& b) {
                return std::tie(a.timestamp, a.neighbor) <
                       std::tie(b.timestamp, b.neighbor);
              });
}

}  // namespace

BipartiteSlice::BipartiteSlice(std::span<const Interaction> rows, Index n_users,
                               Index n_items)
    : n_users_(n_users), n_items_(n_items) {
  build_csr(n_users, rows, true, user_off_, user_adj_);
  build_csr(n_items, rows, false, item_off_, item_adj_);
}

std::span<const Adjacent> BipartiteSlice::user_neighbors(Index u) const {
  if (u >= n_users_) return {};
  return std::span(user_adj_).subspan(user_off_[u], user_off_[u + 1] - user_off_[u]);
}

std::span<const Adjacent> BipartiteSlice::item_neighbors(Index i) const {
  if (i >= n_items_) return {};
  return std::span(item_adj_).subspan(item_off_[i], item_off_[i + 1] - item_off_[i]);
}

std::span<const Adjacent> BipartiteSlice::neighbors(NodeRef n) const {
  return n.side == Side::kUser ? user_neighbors(n.index) : item_neighbors(n.index);
}

std::span<const Adjacent> BipartiteSlice::neighbors_before(NodeRef n,
                                                           Timestamp cutoff) const {
  const auto all = neighbors(n);
  const auto it = std::partition_point(
      all.begin(), all.end(), [cutoff](const Adjacent& a) { return a.timestamp < cutoff; });
  return all.first(static_cast<std::size_t>(it - all.begin()));
}

// ---------------------------------------------------------------------------
// Time slices

Timestamp default_slice_length(const Dataset& train, std::size_t num_slices) {
  if (train.empty()) throw EmptyDatasetError("cannot slice an empty dataset");
  const auto [lo, hi] = std::minmax_element(
      train.interactions.begin(), train.interactions.end(),
      [](const Interaction& a, const Interaction& b) { return a.timestamp < b.timestamp; });
  const Timestamp range = hi->timestamp - lo->timestamp + 1;
  const auto n = static_cast<Timestamp>(std::max<std::size_t>(num_slices, 1));
  return std::max<Timestamp>(1, (range + n - 1) / n);
}

TimeSlicedGraph build_time_slices(const Dataset& train, Timestamp slice_length) {
  if (slice_length <= 0) throw ConfigError("slice length must be positive");
  if (train.empty()) throw EmptyDatasetError("cannot slice an empty dataset");
  Timestamp lo = kNoCutoff, hi = 0;
  for (const auto& x : train.interactions) {
    lo = std::min(lo, x.timestamp);
    hi = std::max(hi, x.timestamp);
  }
  const auto n_slices = static_cast<std::size_t>((hi - lo) / slice_length) + 1;

  TimeSlicedGraph g;
  for (std::size_t s = 0; s <= n_slices; ++s)
    g.boundaries.push_back(lo + static_cast<Timestamp>(s) * slice_length);
  std::vector<std::vector<Interaction>> buckets(n_slices);
  for (const auto& x : train.interactions)
    buckets[static_cast<std::size_t>((x.timestamp - lo) / slice_length)].push_back(x);
  for (const auto& rows : buckets) g.slices.emplace_back(rows, train.n_users, train.n_items);
  g.merged = BipartiteSlice(train.interactions, train.n_users, train.n_items);
  return g;
}

std::size_t TimeSlicedGraph::slice_of(Timestamp t) const {
  const auto it = std::upper_bound(boundaries.begin(), boundaries.end(), t);
  if (it == boundaries.begin()) return 0;
  const auto s = static_cast<std::size_t>(it - boundaries.begin()) - 1;
  return std::min(s, slices.size() - 1);
}

BehaviorSequence build_behavior_sequence(const TimeSlicedGraph& graph,
                                         NodeRef entity, Timestamp t,
                                         std::size_t length) {
  BehaviorSequence seq{entity, {}};
  const auto history = graph.merged.neighbors_before(entity, t);
  const auto take = std::min(length, history.size());
  for (const auto& a : history.last(take))
    seq.events.push_back({a.neighbor, a.timestamp, a.rating});
  return seq;
}

// ---------------------------------------------------------------------------
// Implicit relations

ImplicitEdges::ImplicitEdges(EdgeKind kind, Index n_nodes,
                             std::vector<WeightedEdge> edges, std::size_t top_m)
    : kind_(kind) {
  std::sort(edges.begin(), edges.end(), [](const WeightedEdge& a, const WeightedEdge& b) {
    if (a.src != b.src) return a.src < b.src;
    if (a.weight != b.weight) return a.weight > b.weight;
    return a.dst < b.dst;
  });
  offsets_.assign(static_cast<std::size_t>(n_nodes) + 1, 0);
  std::size_t kept = 0;
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto& x = edges[e];
    if (x.src >= n_nodes || x.dst >= n_nodes)
      throw ContractError("implicit edge outside the node range");
    if (e > 0 && edges[e - 1].src != x.src) kept = 0;
    if (x.src == x.dst || !(x.weight > 0.0) || !std::isfinite(x.weight)) continue;
    if (top_m != 0 && kept >= top_m) continue;
    ++kept;
    edges_.push_back(x);
    ++offsets_[x.src + 1];
  }
  std::partial_sum(offsets_.begin(), offsets_.end(), offsets_.begin());
}

std::span<const WeightedEdge> ImplicitEdges::from(Index src) const {
  if (static_cast<std::size_t>(src) + 1 >= offsets_.size()) return {};
  return std::span(edges_).subspan(offsets_[src], offsets_[src + 1] - offsets_[src]);
}

bool ImplicitEdges::contains(Index src, Index dst) const {
  const auto out = from(src);
  return std::any_of(out.begin(), out.end(),
                     [dst](const WeightedEdge& e) { return e.dst == dst; });
}

FollowGraph follow_relation(const Dataset& train) {
  // earliest contact of each user with each item
  std::vector<std::map<Index, Timestamp>> first_touch(train.n_items);
  for (const auto& x : train.interactions) {
    auto [it, inserted] = first_touch[x.item].try_emplace(x.user, x.timestamp);
    if (!inserted) it->second = std::min(it->second, x.timestamp);
  }
  FollowGraph g;
  g.followers.resize(train.n_users);
  g.followees.resize(train.n_users);
  for (const auto& touches : first_touch) {
    std::vector<std::pair<Timestamp, Index>> order;
    order.reserve(touches.size());
    for (const auto& [user, ts] : touches) order.emplace_back(ts, user);
    std::sort(order.begin(), order.end());
    for (std::size_t a = 0; a < order.size(); ++a)
      for (std::size_t b = a + 1; b < order.size(); ++b) {
        if (order[b].first == order[a].first) continue;
        g.followers[order[a].second].push_back(order[b].second);
        g.followees[order[b].second].push_back(order[a].second);
      }
  }
  for (auto* lists : {&g.followers, &g.followees})
    for (auto& v : *lists) {
      std::sort(v.begin(), v.end());
      v.erase(std::unique(v.begin(), v.end()), v.end());
    }
  return g;
}

ImplicitEdges implicit_user_relations(const FollowGraph& follows, std::size_t tau,
                                      std::size_t top_m) {
  if (tau < 1) throw ConfigError("tau must be >= 1");
  const auto n = static_cast<Index>(follows.followers.size());
  std::vector<std::size_t> count(n, 0);
  std::vector<Index> touched;
  std::vector<WeightedEdge> edges;
  for (Index i = 0; i < n; ++i) {
    for (auto j : follows.followers[i])
      for (auto k : follows.followees[j]) {
        if (k == i) continue;
        if (count[k]++ == 0) touched.push_back(k);
      }
    for (auto k : touched) {
      if (count[k] >= tau) edges.push_back({i, k, static_cast<double>(count[k])});
      count[k] = 0;
    }
    touched.clear();
  }
  return ImplicitEdges(EdgeKind::kUserUser, n, std::move(edges), top_m);
}

ImplicitEdges implicit_user_relations(const Dataset& train, std::size_t tau,
                                      std::size_t top_m) {
  return implicit_user_relations(follow_relation(train), tau, top_m);
}

ImplicitEdges implicit_item_relations(const Dataset& train, std::size_t top_m,
                                      double shrinkage) {
  if (shrinkage < 0.0) throw ConfigError("shrinkage must be >= 0");
  // Repeated (user, item) contacts collapse to their mean rating.
  std::map<std::pair<Index, Index>, std::pair<double, std::size_t>> acc;
  for (const auto& x : train.interactions) {
    auto& [sum, n] = acc[{x.user, x.item}];
    sum += x.rating;
    ++n;
  }
  std::vector<std::vector<std::pair<Index, double>>> by_user(train.n_users),
      by_item(train.n_items);
  for (const auto& [key, v] : acc) {
    const double r = v.first / static_cast<double>(v.second);
    by_user[key.first].emplace_back(key.second, r);
    by_item[key.second].emplace_back(key.first, r);
  }

  struct Acc {
    double dot = 0, aa = 0, bb = 0;
    std::size_t n = 0;
  };
  std::vector<Acc> sums(train.n_items);
  std::vector<Index> touched;
  std::vector<WeightedEdge> edges;
  for (Index a = 0; a < train.n_items; ++a) {
    for (const auto& [u, ra] : by_item[a])
      for (const auto& [b, rb] : by_user[u]) {
        if (b == a) continue;
        auto& s = sums[b];
        if (s.n == 0) touched.push_back(b);
        s.dot += ra * rb;
        s.aa += ra * ra;
        s.bb += rb * rb;
        ++s.n;
      }
    std::sort(touched.begin(), touched.end());
    for (auto b : touched) {
      auto& s = sums[b];
      const double denom = std::sqrt(s.aa) * std::sqrt(s.bb);
      if (denom > 0.0) {
        const double n = static_cast<double>(s.n);
        const double w = (s.dot / denom) * (n / (n + shrinkage));
        if (w > 0.0) edges.push_back({a, b, w});
      }
      s = Acc{};
    }
    touched.clear();
  }
  return ImplicitEdges(EdgeKind::kItemItem, train.n_items, std::move(edges), top_m);
}

void write_implicit_edges(const std::filesystem::path& path,
                          std::span<const ImplicitEdges* const> sets) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  for (const auto* set : sets) {
    const char* kind = set->kind() == EdgeKind::kUserUser ? "user-user" : "item-item";
    for (const auto& e : set->edges())
      out << kind << '\t' << e.src << '\t' << e.dst << '\t' << e.weight << '\n';
  }
}

// ---------------------------------------------------------------------------
// Meta-paths

namespace {

void sort_unique(std::vector<Index>& v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
}

std::vector<Index> capped(std::vector<Index> v, std::size_t fanout) {
  sort_unique(v);
  if (v.size() > fanout) v.resize(fanout);
  return v;
}

}  // namespace

MetaPathIndex::MetaPathIndex(const Dataset& train, const ImplicitEdges& implicit_users,
                             const ImplicitEdges& implicit_items,
                             std::optional<std::vector<std::pair<Index, Index>>> social)
    : user_items_(train.n_users),
      item_users_(train.n_items),
      social_(train.n_users),
      implicit_users_(&implicit_users),
      implicit_items_(&implicit_items) {
  for (const auto& x : train.interactions) {
    user_items_[x.user].push_back(x.item);
    item_users_[x.item].push_back(x.user);
  }
  for (auto& v : user_items_) sort_unique(v);
  for (auto& v : item_users_) sort_unique(v);
  if (social) {
    for (const auto& [a, b] : *social) {
      if (a >= train.n_users || b >= train.n_users)
        throw ContractError("social edge outside the user range");
      social_[a].push_back(b);
      social_[b].push_back(a);
    }
  } else {
    const auto follows = follow_relation(train);
    for (Index u = 0; u < train.n_users; ++u) {
      social_[u] = follows.followers[u];
      social_[u].insert(social_[u].end(), follows.followees[u].begin(),
                        follows.followees[u].end());
    }
  }
  for (auto& v : social_) sort_unique(v);
}

MetaPathNeighbors MetaPathIndex::query(NodeRef entity, std::size_t fanout) const {
  MetaPathNeighbors out;
  if (entity.side == Side::kUser) {
    if (entity.index >= user_items_.size())
      throw ContractError("unknown user " + std::to_string(entity.index));
    const auto u = entity.index;
    out.user_item = capped(user_items_[u], fanout);
    out.user_user = capped(social_[u], fanout);
    std::vector<Index> implicit, via_social, via_implicit;
    for (const auto& e : implicit_users_->from(u)) implicit.push_back(e.dst);
    for (auto v : social_[u])
      via_social.insert(via_social.end(), user_items_[v].begin(), user_items_[v].end());
    for (auto v : implicit)
      via_implicit.insert(via_implicit.end(), user_items_[v].begin(), user_items_[v].end());
    out.user_implicit = capped(std::move(implicit), fanout);
    out.user_user_item = capped(std::move(via_social), fanout);
    out.user_implicit_item = capped(std::move(via_implicit), fanout);
  } else {
    if (entity.index >= item_users_.size())
      throw ContractError("unknown item " + std::to_string(entity.index));
    const auto i = entity.index;
    out.item_user = capped(item_users_[i], fanout);
    std::vector<Index> implicit, via_implicit;
    for (const auto& e : implicit_items_->from(i)) implicit.push_back(e.dst);
    for (auto j : implicit)
      via_implicit.insert(via_implicit.end(), item_users_[j].begin(), item_users_[j].end());
    out.item_implicit = capped(std::move(implicit), fanout);
    out.item_implicit_user = capped(std::move(via_implicit), fanout);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subgraph sampling

Subgraph sample_khop(const BipartiteSlice& slice, const ImplicitEdges* user_edges,
                     const ImplicitEdges* item_edges, NodeRef root,
                     const SampleOptions& opts, std::uint64_t seed) {
  if (opts.depth < 1 || opts.fanout < 1)
    throw ConfigError("sample_khop needs depth >= 1 and fanout >= 1");
  Rng rng(derive_seed(seed, {fnv1a64("khop"), root.key()}));

  Subgraph g;
  g.nodes.push_back(root);
  g.layers.push_back({0});
  std::unordered_map<std::uint64_t, Index> local{{root.key(), 0}};

  struct Candidate {
    NodeRef node;
    EdgeKind kind;
    std::uint8_t bucket;
  };
  std::vector<Candidate> cand;
  std::unordered_set<std::uint64_t> offered;

  for (std::size_t hop = 1; hop <= opts.depth; ++hop) {
    std::vector<Index> next;
    for (const auto parent : g.layers[hop - 1]) {
      const NodeRef p = g.nodes[parent];
      cand.clear();
      offered.clear();
      auto offer = [&](NodeRef n, EdgeKind kind, std::size_t bucket) {
        if (local.count(n.key()) || !offered.insert(n.key()).second) return;
        cand.push_back({n, kind, static_cast<std::uint8_t>(bucket)});
      };
      if (opts.interactions) {
        const auto adj = slice.neighbors_before(p, opts.cutoff);
        // newest first, so a repeated contact carries its latest time delta
        for (auto it = adj.rbegin(); it != adj.rend(); ++it) {
          if (opts.only_user) {
            const Index user = p.side == Side::kUser ? p.index : it->neighbor;
            if (user != *opts.only_user) continue;
          }
          const NodeRef n = p.side == Side::kUser ? NodeRef::item(it->neighbor)
                                                  : NodeRef::user(it->neighbor);
          offer(n, EdgeKind::kInteraction, time_bucket(opts.reference_time - it->timestamp));
        }
      }
      if (p.side == Side::kUser && opts.implicit_users && user_edges)
        for (const auto& e : user_edges->from(p.index))
          offer(NodeRef::user(e.dst), EdgeKind::kUserUser, 0);
      if (p.side == Side::kItem && opts.implicit_items && item_edges)
        for (const auto& e : item_edges->from(p.index))
          offer(NodeRef::item(e.dst), EdgeKind::kItemItem, 0);

      std::vector<std::size_t> pick(cand.size());
      std::iota(pick.begin(), pick.end(), 0);
      if (cand.size() > opts.fanout) {
        for (std::size_t s = 0; s < opts.fanout; ++s) {
          const auto j = s + uniform_index(rng, pick.size() - s);
          std::swap(pick[s], pick[j]);
        }
        pick.resize(opts.fanout);
        std::sort(pick.begin(), pick.end());
      }
      for (auto c : pick) {
        const auto id = static_cast<Index>(g.nodes.size());
        g.nodes.push_back(cand[c].node);
        local.emplace(cand[c].node.key(), id);
        g.edges.push_back({parent, id, cand[c].kind, cand[c].bucket});
        next.push_back(id);
      }
    }
    if (next.empty()) break;
    g.layers.push_back(std::move(next));
  }
  g.cold = g.edges.empty();
  return g;
}

Subgraph drop_node(const Subgraph& g, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("drop rate must lie in [0, 1)");
  if (rate == 0.0) return g;
  Rng rng(derive_seed(seed, "dropnode"));
  const auto n = g.nodes.size();
  std::vector<bool> keep(n, true);
  for (std::size_t v = 1; v < n; ++v) keep[v] = uniform01(rng) >= rate;

  std::vector<std::vector<Index>> adj(n);
  for (const auto& e : g.edges)
    if (keep[e.src] && keep[e.dst]) {
      adj[e.src].push_back(e.dst);
      adj[e.dst].push_back(e.src);
    }
  std::vector<bool> reach(n, false);
  std::vector<Index> stack{0};
  reach[0] = true;
  while (!stack.empty()) {
    const auto v = stack.back();
    stack.pop_back();
    for (auto w : adj[v])
      if (!reach[w]) {
        reach[w] = true;
        stack.push_back(w);
      }
  }

  Subgraph out;
  std::vector<Index> remap(n, UINT32_MAX);
  for (std::size_t v = 0; v < n; ++v)
    if (reach[v]) {
      remap[v] = static_cast<Index>(out.nodes.size());
      out.nodes.push_back(g.nodes[v]);
    }
  for (const auto& layer : g.layers) {
    std::vector<Index> kept;
    for (auto v : layer)
      if (reach[v]) kept.push_back(remap[v]);
    if (kept.empty()) break;
    out.layers.push_back(std::move(kept));
  }
  for (const auto& e : g.edges)
    if (reach[e.src] && reach[e.dst])
      out.edges.push_back({remap[e.src], remap[e.dst], e.kind, e.time_bucket});
  out.cold = g.cold;
  return out;
}

}  // namespace fedgrec
