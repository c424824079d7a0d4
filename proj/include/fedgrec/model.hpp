#pragma once

// Spatio-temporal attention GNN scorer.
//
// For a query (u, i, t):
//   temporal  e_{v,t}: embedding of v's most recent interaction before t
//                      (counterpart embedding + time-decay bucket), or v's
//                      base embedding when v has no history;
//   spatial   X̂_{v,t}: layer-mean of the root state after L rounds of
//                      multi-head attention message passing over a sampled
//                      k-hop subgraph rooted at v (edges older than t);
//   score     sigmoid(MLP([e_u ‖ e_i ‖ X̂_u ‖ X̂_i])).
// Training minimizes (1 / 2|B|) Σ (r̂ − r)² over a batch B.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fedgrec/dataset.hpp"
#include "fedgrec/graphs.hpp"
#include "fedgrec/params.hpp"
#include "fedgrec/tape.hpp"

namespace fedgrec {

// Component switches; all-on is the full model.
struct AblationSpec {
  bool item_graph = true;                    // off: item X̂ = mean of its users
  bool neighbor_public_interactions = true;  // off: only the query user's edges
  bool attention = true;                     // off: uniform mean pooling
  bool implicit_user = true;
  bool implicit_item = true;

  bool all_on() const {
    return item_graph && neighbor_public_interactions && attention && implicit_user &&
           implicit_item;
  }
  friend bool operator==(const AblationSpec&, const AblationSpec&) = default;
};

// Read-only graph state shared by every forward pass.
struct GraphContext {
  const TimeSlicedGraph* graph = nullptr;
  const ImplicitEdges* user_edges = nullptr;
  const ImplicitEdges* item_edges = nullptr;
  std::span<const FeatureField> user_features;
  std::span<const FeatureField> item_features;
  std::size_t fanout = 5;
  double drop_rate = 0.25;  // DropNode, training passes only
  AblationSpec ablation;

  Timestamp eval_time() const { return graph->end_time(); }
};

struct Sample {
  Index user = 0;
  Index item = 0;
  Timestamp time = 0;
  double label = 1.0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

using Var = Tape::Var;

// ---- tape-level building blocks -------------------------------------------

// Table row plus every categorical feature row of the entity.
Var base_embedding(Tape& tape, const ModelParams& params, const GraphContext& ctx,
                   NodeRef node);

// One row per event: counterpart embedding + time bucket of (t - event time).
std::vector<Var> embed_sequence(Tape& tape, const ModelParams& params,
                                const GraphContext& ctx, const BehaviorSequence& seq,
                                Timestamp t);

// Multi-head attention over neighbor states, heads concatenated then
// projected back to d. Empty neighbor list yields a zero vector.
Var attention_aggregate(Tape& tape, const ModelParams& params, Var self,
                        std::span<const Var> neighbors, bool use_attention = true);

struct NodeState {
  // h[l][v]: state of local node v after layer l. h[0] holds every node;
  // the final layer holds only the root unless a full pass was requested.
  std::vector<std::vector<Var>> h;
  Var combined = 0;  // mean of the root state over layers 1..L
};

NodeState khop_forward(Tape& tape, const ModelParams& params, const GraphContext& ctx,
                       const Subgraph& g, bool full_last_layer = false);

Var combine_layers(Tape& tape, std::span<const Var> states);

struct EntityRep {
  Var temporal = 0;
  Var spatial = 0;
};

struct RepOptions {
  bool training = false;
  std::uint64_t seed = 0;
  Index query_user = 0;  // only consulted when neighbor interactions are off
};

EntityRep represent(Tape& tape, const ModelParams& params, const GraphContext& ctx,
                    NodeRef node, Timestamp t, const RepOptions& opts);

// Pre-sigmoid MLP output on [e_u ‖ e_i ‖ X̂_u ‖ X̂_i].
Var score_logit(Tape& tape, const ModelParams& params, const EntityRep& user,
                const EntityRep& item);

// ---- value-level operations -------------------------------------------------

using Matrix = std::vector<std::vector<double>>;

Matrix embed_sequence(const BehaviorSequence& seq, const ModelParams& params,
                      const GraphContext& ctx, Timestamp t);

std::vector<double> attention_aggregate(std::span<const double> self,
                                        const Matrix& neighbors,
                                        const ModelParams& params,
                                        bool use_attention = true);

struct NodeStateValues {
  std::vector<Matrix> h;  // h[l][v] for every layer and node
  std::vector<double> combined;
};

NodeStateValues khop_forward(const Subgraph& g, const ModelParams& params,
                             const GraphContext& ctx);

// Arithmetic mean of the layer states; throws ContractError when empty.
std::vector<double> combine_layers(std::span<const std::vector<double>> states);

// r̂ in (0, 1). Subgraph sampling is seeded by `seed`; no DropNode.
double predict(Index user, Index item, Timestamp t, const GraphContext& ctx,
               const ModelParams& params, std::uint64_t seed = 0);

// MLP + sigmoid on cached representation values.
double score_from_reps(const ModelParams& params, std::span<const double> user_temporal,
                       std::span<const double> user_spatial,
                       std::span<const double> item_temporal,
                       std::span<const double> item_spatial);

struct LossAndGrads {
  double loss = 0.0;
  GradientSet grads;
};

// Loss (1 / 2|B|) Σ (r̂ − r)² and its exact gradient. Samples sharing
// (user, time) reuse one user representation. `training` enables DropNode.
LossAndGrads forward_backward(std::span<const Sample> batch, const GraphContext& ctx,
                              const ModelParams& params, std::uint64_t seed,
                              bool training = true);

// Same, writing into caller-owned buffers (grads is cleared first).
double forward_backward(std::span<const Sample> batch, const GraphContext& ctx,
                        const ModelParams& params, std::uint64_t seed, bool training,
                        GradientSet& grads, Tape& tape);

}  // namespace fedgrec
