#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "fedgrec/dataset.hpp"

namespace fedgrec {

enum class Side : std::uint8_t { kUser = 0, kItem = 1 };

struct NodeRef {
  Side side = Side::kUser;
  Index index = 0;

  static NodeRef user(Index u) { return {Side::kUser, u}; }
  static NodeRef item(Index i) { return {Side::kItem, i}; }
  std::uint64_t key() const {
    return (static_cast<std::uint64_t>(side) << 32) | index;
  }
  friend auto operator<=>(const NodeRef&, const NodeRef&) = default;
};

enum class EdgeKind : std::uint8_t { kInteraction = 0, kUserUser = 1, kItemItem = 2 };
inline constexpr std::size_t kEdgeKinds = 3;
inline constexpr std::size_t kTimeBuckets = 16;
inline constexpr Timestamp kNoCutoff = std::numeric_limits<Timestamp>::max();

// floor(log2(delta)) clamped to [0, 15]; deltas <= 1 map to bucket 0.
std::size_t time_bucket(Timestamp delta);

struct Adjacent {
  Index neighbor = 0;
  Timestamp timestamp = 0;
  double rating = 1.0;

  friend bool operator==(const Adjacent&, const Adjacent&) = default;
};

// User->item and item->user adjacency in offset-array form. Neighbor lists
// are sorted by (timestamp, neighbor).
class BipartiteSlice {
 public:
  BipartiteSlice() = default;
  BipartiteSlice(std::span<const Interaction> rows, Index n_users, Index n_items);

  std::span<const Adjacent> user_neighbors(Index u) const;
  std::span<const Adjacent> item_neighbors(Index i) const;
  std::span<const Adjacent> neighbors(NodeRef n) const;
  // Neighbors whose interaction happened strictly before `cutoff`.
  std::span<const Adjacent> neighbors_before(NodeRef n, Timestamp cutoff) const;

  bool contains(NodeRef n) const { return !neighbors(n).empty(); }
  std::size_t edge_count() const { return user_adj_.size(); }
  Index n_users() const { return n_users_; }
  Index n_items() const { return n_items_; }

 private:
  Index n_users_ = 0, n_items_ = 0;
  std::vector<std::size_t> user_off_{0}, item_off_{0};
  std::vector<Adjacent> user_adj_, item_adj_;
};

// Half-open slices [boundaries[s], boundaries[s+1]) over the training range.
struct TimeSlicedGraph {
  std::vector<BipartiteSlice> slices;
  std::vector<Timestamp> boundaries;
  BipartiteSlice merged;  // union of every slice

  std::size_t slice_of(Timestamp t) const;
  Timestamp end_time() const { return boundaries.back(); }
};

TimeSlicedGraph build_time_slices(const Dataset& train, Timestamp slice_length);

// Range split into `num_slices` equal pieces (at least 1 second each).
Timestamp default_slice_length(const Dataset& train, std::size_t num_slices = 8);

struct BehaviorEvent {
  Index counterpart = 0;
  Timestamp timestamp = 0;
  double rating = 1.0;
};

struct BehaviorSequence {
  NodeRef owner;
  std::vector<BehaviorEvent> events;  // oldest first
};

// The `length` most recent interactions of `entity` strictly before `t`.
BehaviorSequence build_behavior_sequence(const TimeSlicedGraph& graph,
                                         NodeRef entity, Timestamp t,
                                         std::size_t length);

struct WeightedEdge {
  Index src = 0;
  Index dst = 0;
  double weight = 0.0;
};

// Directed relation edges grouped by source; within a source, sorted by
// weight descending then target ascending.
class ImplicitEdges {
 public:
  ImplicitEdges() = default;
  ImplicitEdges(EdgeKind kind, Index n_nodes, std::vector<WeightedEdge> edges,
                std::size_t top_m);

  EdgeKind kind() const { return kind_; }
  std::span<const WeightedEdge> edges() const { return edges_; }
  std::span<const WeightedEdge> from(Index src) const;
  bool contains(Index src, Index dst) const;
  std::size_t size() const { return edges_.size(); }

 private:
  EdgeKind kind_ = EdgeKind::kUserUser;
  std::vector<WeightedEdge> edges_;
  std::vector<std::size_t> offsets_{0};
};

// followers[i] = users j that interacted with some item of i after i first did.
struct FollowGraph {
  std::vector<std::vector<Index>> followers;
  std::vector<std::vector<Index>> followees;
};

FollowGraph follow_relation(const Dataset& train);

// Edge i->k weighted by the number of common followers, kept when >= tau.
ImplicitEdges implicit_user_relations(const Dataset& train, std::size_t tau,
                                      std::size_t top_m);
ImplicitEdges implicit_user_relations(const FollowGraph& follows, std::size_t tau,
                                      std::size_t top_m);

// Cosine over co-raters, shrunk by n / (n + shrinkage).
ImplicitEdges implicit_item_relations(const Dataset& train, std::size_t top_m,
                                      double shrinkage);

void write_implicit_edges(const std::filesystem::path& path,
                          std::span<const ImplicitEdges* const> sets);

struct MetaPathNeighbors {
  // user paths
  std::vector<Index> user_item;           // U-I
  std::vector<Index> user_user;           // U-U
  std::vector<Index> user_implicit;       // U-Ū
  std::vector<Index> user_user_item;      // U-U-I
  std::vector<Index> user_implicit_item;  // U-Ū-I
  // item paths
  std::vector<Index> item_user;           // I-U
  std::vector<Index> item_implicit;       // I-Ī
  std::vector<Index> item_implicit_user;  // I-Ī-U
};

// Social edges default to the follow relation when none are supplied.
class MetaPathIndex {
 public:
  MetaPathIndex(const Dataset& train, const ImplicitEdges& implicit_users,
                const ImplicitEdges& implicit_items,
                std::optional<std::vector<std::pair<Index, Index>>> social = {});

  MetaPathNeighbors query(NodeRef entity, std::size_t fanout) const;

 private:
  std::vector<std::vector<Index>> user_items_, item_users_, social_;
  const ImplicitEdges* implicit_users_;
  const ImplicitEdges* implicit_items_;
};

struct SubgraphEdge {
  Index src = 0;  // local node ids
  Index dst = 0;
  EdgeKind kind = EdgeKind::kInteraction;
  std::uint8_t time_bucket = 0;
};

struct Subgraph {
  std::vector<NodeRef> nodes;               // nodes[0] is the root
  std::vector<std::vector<Index>> layers;   // layers[h] = local ids at hop h
  std::vector<SubgraphEdge> edges;
  bool cold = false;

  NodeRef root() const { return nodes.front(); }
};

struct SampleOptions {
  std::size_t depth = 2;
  std::size_t fanout = 5;
  Timestamp cutoff = kNoCutoff;    // interaction edges must be older than this
  Timestamp reference_time = 0;    // time-delta origin for edge features
  bool interactions = true;
  bool implicit_users = true;
  bool implicit_items = true;
  // When set, interaction edges are limited to this user's own interactions.
  std::optional<Index> only_user;
};

// Seeded breadth-first sampling over interaction + implicit edges. Each
// expanded node draws at most `fanout` unvisited neighbors without replacement.
Subgraph sample_khop(const BipartiteSlice& slice, const ImplicitEdges* user_edges,
                     const ImplicitEdges* item_edges, NodeRef root,
                     const SampleOptions& opts, std::uint64_t seed);

// Removes each non-root node with probability `rate`, then prunes whatever
// lost its path to the root.
Subgraph drop_node(const Subgraph& g, double rate, std::uint64_t seed);

}  // namespace fedgrec
