#include "fedgrec/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <unordered_map>

#include "fedgrec/errors.hpp"
#include "fedgrec/random.hpp"

namespace fedgrec {

namespace {

std::span<const FeatureField> fields_of(const GraphContext& ctx, Side side) {
  return side == Side::kUser ? ctx.user_features : ctx.item_features;
}

Var time_row(Tape& tape, const ModelParams& params, std::size_t bucket) {
  return tape.param_row(params.layout.time_table, std::min(bucket, kTimeBuckets - 1));
}

// Local-node lists by exact hop distance: out[k-1][v] = nodes at distance k.
std::vector<std::vector<std::vector<Index>>> hop_lists(const Subgraph& g, std::size_t hops) {
  const auto n = g.nodes.size();
  std::vector<std::vector<Index>> adj(n);
  for (const auto& e : g.edges) {
    adj[e.src].push_back(e.dst);
    adj[e.dst].push_back(e.src);
  }
  std::vector<std::vector<std::vector<Index>>> out(hops, std::vector<std::vector<Index>>(n));
  std::vector<std::size_t> dist(n);
  std::vector<Index> frontier, next;
  for (std::size_t src = 0; src < n; ++src) {
    std::fill(dist.begin(), dist.end(), SIZE_MAX);
    dist[src] = 0;
    frontier.assign(1, static_cast<Index>(src));
    for (std::size_t k = 1; k <= hops && !frontier.empty(); ++k) {
      next.clear();
      for (auto v : frontier)
        for (auto w : adj[v])
          if (dist[w] == SIZE_MAX) {
            dist[w] = k;
            next.push_back(w);
          }
      std::sort(next.begin(), next.end());
      out[k - 1][src] = next;
      frontier.swap(next);
    }
  }
  return out;
}

// Σ_c (1/|C|) · mean edge embedding of component c, or nullopt without edges.
std::optional<Var> edge_term(Tape& tape, const ModelParams& params, const Subgraph& g) {
  if (g.edges.empty()) return std::nullopt;
  const auto n = g.nodes.size();
  std::vector<Index> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](Index v) {
    while (parent[v] != v) v = parent[v] = parent[parent[v]];
    return v;
  };
  for (const auto& e : g.edges) parent[find(e.src)] = find(e.dst);

  std::vector<Index> comp_of_root(n, UINT32_MAX);
  std::size_t n_comps = 0;
  for (Index v = 0; v < n; ++v)
    if (find(v) == v) comp_of_root[v] = static_cast<Index>(n_comps++);

  std::vector<std::vector<Var>> per_comp(n_comps);
  for (const auto& e : g.edges) {
    const Var emb = tape.add(time_row(tape, params, e.time_bucket),
                             tape.param_row(params.layout.edge_kind_table,
                                            static_cast<std::size_t>(e.kind)));
    per_comp[comp_of_root[find(e.src)]].push_back(emb);
  }
  std::vector<Var> means;
  for (const auto& edges : per_comp)
    if (!edges.empty()) means.push_back(tape.mean(edges));
  return tape.scale(tape.sum(means), 1.0 / static_cast<double>(n_comps));
}

struct HeadLeaves {
  Var a_self, a_neighbor;
};

std::vector<HeadLeaves> head_leaves(Tape& tape, const ModelParams& params) {
  const auto d = params.config.dim;
  std::vector<HeadLeaves> out;
  for (std::size_t h = 0; h < params.config.heads; ++h) {
    const auto t = params.layout.attention + 2 * h + 1;
    out.push_back({tape.param_slice(t, 0, d), tape.param_slice(t, d, d)});
  }
  return out;
}

// Heads over precomputed per-node projections z (and scores q).
Var aggregate_heads(Tape& tape, const ModelParams& params,
                    const std::vector<std::vector<Var>>& z,
                    const std::vector<std::vector<Var>>& q, const std::vector<Var>& centers,
                    std::span<const Index> neighbors, bool use_attention) {
  const auto heads = params.config.heads;
  std::vector<Var> outs, zs, qs;
  for (std::size_t h = 0; h < heads; ++h) {
    zs.clear();
    qs.clear();
    for (auto j : neighbors) {
      zs.push_back(z[h][j]);
      if (use_attention) qs.push_back(q[h][j]);
    }
    Var alpha;
    if (use_attention) {
      alpha = tape.attention_weights(centers[h], qs, params.config.leaky_slope);
    } else {
      const std::vector<double> uniform(neighbors.size(),
                                        1.0 / static_cast<double>(neighbors.size()));
      alpha = tape.constant(uniform);
    }
    outs.push_back(tape.relu(tape.weighted_sum(alpha, zs)));
  }
  return tape.matvec(params.layout.combine_proj, tape.concat(outs));
}

}  // namespace

// ---------------------------------------------------------------------------

Var base_embedding(Tape& tape, const ModelParams& params, const GraphContext& ctx,
                   NodeRef node) {
  const bool user = node.side == Side::kUser;
  const auto& cfg = params.config;
  if (node.index >= (user ? cfg.n_users : cfg.n_items))
    throw ContractError(std::string(user ? "user " : "item ") + std::to_string(node.index) +
                        " outside the vocabulary");
  const auto table = user ? params.layout.user_table : params.layout.item_table;
  const auto fields = fields_of(ctx, node.side);
  const auto n_fields =
      user ? cfg.user_field_cardinalities.size() : cfg.item_field_cardinalities.size();
  const Var row = tape.param_row(table, node.index);
  if (n_fields == 0) return row;
  if (fields.size() != n_fields)
    throw ContractError("graph context feature fields do not match the model config");
  std::vector<Var> parts{row};
  const auto first = user ? params.layout.user_fields : params.layout.item_fields;
  for (std::size_t f = 0; f < n_fields; ++f)
    parts.push_back(tape.param_row(first + f, fields[f].values[node.index]));
  return tape.sum(parts);
}

std::vector<Var> embed_sequence(Tape& tape, const ModelParams& params,
                                const GraphContext& ctx, const BehaviorSequence& seq,
                                Timestamp t) {
  const Side other = seq.owner.side == Side::kUser ? Side::kItem : Side::kUser;
  std::vector<Var> rows;
  rows.reserve(seq.events.size());
  for (const auto& ev : seq.events)
    rows.push_back(tape.add(base_embedding(tape, params, ctx, {other, ev.counterpart}),
                            time_row(tape, params, time_bucket(t - ev.timestamp))));
  return rows;
}

Var attention_aggregate(Tape& tape, const ModelParams& params, Var self,
                        std::span<const Var> neighbors, bool use_attention) {
  const auto heads = params.config.heads;
  if (neighbors.empty()) return tape.zeros(params.config.dim);
  const auto leaves = head_leaves(tape, params);
  std::vector<std::vector<Var>> z(heads), q(heads);
  std::vector<Var> centers(heads);
  std::vector<Index> ids(neighbors.size());
  std::iota(ids.begin(), ids.end(), 0);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto w = params.layout.attention + 2 * h;
    centers[h] = tape.dot(leaves[h].a_self, tape.matvec(w, self));
    for (auto x : neighbors) {
      z[h].push_back(tape.matvec(w, x));
      q[h].push_back(tape.dot(leaves[h].a_neighbor, z[h].back()));
    }
  }
  return aggregate_heads(tape, params, z, q, centers, ids, use_attention);
}

NodeState khop_forward(Tape& tape, const ModelParams& params, const GraphContext& ctx,
                       const Subgraph& g, bool full_last_layer) {
  const auto& cfg = params.config;
  const auto n = g.nodes.size();
  const bool attend = ctx.ablation.attention;
  const auto lists = hop_lists(g, cfg.hops);
  const auto ebar = edge_term(tape, params, g);
  const auto leaves = head_leaves(tape, params);
  std::vector<Var> bias(cfg.hops);
  for (std::size_t k = 0; k < cfg.hops; ++k)
    bias[k] = tape.param_row(params.layout.hop_update + 2 * k + 1, 0);

  NodeState st;
  st.h.emplace_back();
  for (const auto& node : g.nodes) st.h[0].push_back(base_embedding(tape, params, ctx, node));

  std::vector<std::vector<Var>> z(cfg.heads, std::vector<Var>(n)), q = z;
  for (std::size_t l = 1; l <= cfg.layers; ++l) {
    const auto& prev = st.h[l - 1];
    const std::size_t targets = (l < cfg.layers || full_last_layer) ? n : 1;
    for (std::size_t h = 0; h < cfg.heads; ++h)
      for (std::size_t v = 0; v < n; ++v) {
        z[h][v] = tape.matvec(params.layout.attention + 2 * h, prev[v]);
        if (attend) q[h][v] = tape.dot(leaves[h].a_neighbor, z[h][v]);
      }
    std::vector<Var> next(targets);
    std::vector<Var> centers(cfg.heads), per_hop(cfg.hops);
    for (std::size_t v = 0; v < targets; ++v) {
      if (attend)
        for (std::size_t h = 0; h < cfg.heads; ++h)
          centers[h] = tape.dot(leaves[h].a_self, z[h][v]);
      for (std::size_t k = 0; k < cfg.hops; ++k) {
        const auto& nb = lists[k][v];
        Var mes;
        if (nb.empty()) {
          mes = ebar ? *ebar : tape.zeros(cfg.dim);
        } else {
          mes = aggregate_heads(tape, params, z, q, centers, nb, attend);
          if (ebar) mes = tape.add(mes, *ebar);
        }
        const Var cat = tape.concat(std::vector<Var>{mes, prev[v]});
        per_hop[k] = tape.relu(
            tape.add(tape.matvec(params.layout.hop_update + 2 * k, cat), bias[k]));
      }
      next[v] = tape.mean(per_hop);
    }
    st.h.push_back(std::move(next));
  }
  std::vector<Var> root_states;
  for (std::size_t l = 1; l <= cfg.layers; ++l) root_states.push_back(st.h[l][0]);
  st.combined = combine_layers(tape, root_states);
  return st;
}

Var combine_layers(Tape& tape, std::span<const Var> states) {
  if (states.empty()) throw ContractError("combine_layers needs at least one layer");
  return tape.mean(states);
}

EntityRep represent(Tape& tape, const ModelParams& params, const GraphContext& ctx,
                    NodeRef node, Timestamp t, const RepOptions& opts) {
  const auto& cfg = params.config;
  const auto& ab = ctx.ablation;
  EntityRep rep;

  const auto seq = build_behavior_sequence(*ctx.graph, node, t, cfg.history_length);
  if (seq.events.empty()) {
    rep.temporal = base_embedding(tape, params, ctx, node);
  } else {
    BehaviorSequence last{node, {seq.events.back()}};
    rep.temporal = embed_sequence(tape, params, ctx, last, t).back();
  }

  if (node.side == Side::kItem && !ab.item_graph) {
    std::vector<Index> users;
    for (const auto& a : ctx.graph->merged.neighbors_before(node, t))
      if (ab.neighbor_public_interactions || a.neighbor == opts.query_user)
        users.push_back(a.neighbor);
    std::sort(users.begin(), users.end());
    users.erase(std::unique(users.begin(), users.end()), users.end());
    if (users.empty()) {
      rep.spatial = base_embedding(tape, params, ctx, node);
    } else {
      std::vector<Var> rows;
      for (auto u : users) rows.push_back(base_embedding(tape, params, ctx, NodeRef::user(u)));
      rep.spatial = tape.mean(rows);
    }
    return rep;
  }

  SampleOptions so;
  so.depth = cfg.hops;
  so.fanout = ctx.fanout;
  so.cutoff = t;
  so.reference_time = t;
  so.implicit_users = ab.implicit_user;
  so.implicit_items = ab.implicit_item;
  if (!ab.neighbor_public_interactions) so.only_user = opts.query_user;
  auto sub = sample_khop(ctx.graph->merged, ctx.user_edges, ctx.item_edges, node, so, opts.seed);
  if (opts.training && ctx.drop_rate > 0.0)
    sub = drop_node(sub, ctx.drop_rate, derive_seed(opts.seed, {node.key()}));
  rep.spatial = khop_forward(tape, params, ctx, sub).combined;
  return rep;
}

Var score_logit(Tape& tape, const ModelParams& params, const EntityRep& user,
                const EntityRep& item) {
  Var x = tape.concat(std::vector<Var>{user.temporal, item.temporal, user.spatial, item.spatial});
  const auto layers = params.layout.mlp_layers;
  for (std::size_t l = 0; l < layers; ++l) {
    x = tape.add(tape.matvec(params.layout.mlp + 2 * l, x),
                 tape.param_row(params.layout.mlp + 2 * l + 1, 0));
    if (l + 1 < layers) x = tape.relu(x);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Value-level wrappers

namespace {

std::vector<double> values_of(const Tape& tape, Var v) {
  const auto s = tape.value(v);
  return {s.begin(), s.end()};
}

}  // namespace

Matrix embed_sequence(const BehaviorSequence& seq, const ModelParams& params,
                      const GraphContext& ctx, Timestamp t) {
  Tape tape(params);
  Matrix out;
  for (auto v : embed_sequence(tape, params, ctx, seq, t)) out.push_back(values_of(tape, v));
  return out;
}

std::vector<double> attention_aggregate(std::span<const double> self, const Matrix& neighbors,
                                        const ModelParams& params, bool use_attention) {
  Tape tape(params);
  const Var s = tape.constant(self);
  std::vector<Var> nb;
  for (const auto& x : neighbors) nb.push_back(tape.constant(x));
  return values_of(tape, attention_aggregate(tape, params, s, nb, use_attention));
}

NodeStateValues khop_forward(const Subgraph& g, const ModelParams& params,
                             const GraphContext& ctx) {
  Tape tape(params);
  const auto st = khop_forward(tape, params, ctx, g, true);
  NodeStateValues out;
  for (const auto& layer : st.h) {
    Matrix m;
    for (auto v : layer) m.push_back(values_of(tape, v));
    out.h.push_back(std::move(m));
  }
  out.combined = values_of(tape, st.combined);
  return out;
}

std::vector<double> combine_layers(std::span<const std::vector<double>> states) {
  if (states.empty()) throw ContractError("combine_layers needs at least one layer");
  std::vector<double> out = states[0];
  for (std::size_t k = 1; k < states.size(); ++k) {
    if (states[k].size() != out.size()) throw ContractError("combine_layers shape mismatch");
    const double inv = 1.0 / static_cast<double>(k + 1);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += (states[k][j] - out[j]) * inv;
  }
  return out;
}

double predict(Index user, Index item, Timestamp t, const GraphContext& ctx,
               const ModelParams& params, std::uint64_t seed) {
  if (user >= params.config.n_users || item >= params.config.n_items)
    throw ContractError("predict: index outside the vocabulary");
  Tape tape(params);
  const RepOptions opts{false, seed, user};
  const auto u = represent(tape, params, ctx, NodeRef::user(user), t, opts);
  const auto i = represent(tape, params, ctx, NodeRef::item(item), t, opts);
  return tape.scalar(tape.sigmoid(score_logit(tape, params, u, i)));
}

double score_from_reps(const ModelParams& params, std::span<const double> user_temporal,
                       std::span<const double> user_spatial,
                       std::span<const double> item_temporal,
                       std::span<const double> item_spatial) {
  std::vector<double> x;
  x.reserve(4 * params.config.dim);
  for (auto part : {user_temporal, item_temporal, user_spatial, item_spatial})
    x.insert(x.end(), part.begin(), part.end());
  std::vector<double> y;
  const auto layers = params.layout.mlp_layers;
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& w = params.mlp_w(l);
    const auto& b = params.mlp_b(l);
    y.assign(w.rows, 0.0);
    for (std::size_t r = 0; r < w.rows; ++r) {
      y[r] = matvec_row(w.row(r), x) + b.data[r];
      if (l + 1 < layers && !(y[r] > 0.0)) y[r] = 0.0;
    }
    x.swap(y);
  }
  return 1.0 / (1.0 + std::exp(-x[0]));
}

// ---------------------------------------------------------------------------

double forward_backward(std::span<const Sample> batch, const GraphContext& ctx,
                        const ModelParams& params, std::uint64_t seed, bool training,
                        GradientSet& grads, Tape& tape) {
  if (batch.empty()) throw ContractError("forward_backward needs a nonempty batch");
  grads.clear();
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  // group samples that share (user, time), in order of first appearance
  std::vector<std::vector<std::size_t>> groups;
  std::unordered_map<std::uint64_t, std::size_t> lookup;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto key = derive_seed(batch[s].user, {static_cast<std::uint64_t>(batch[s].time)});
    auto [it, inserted] = lookup.try_emplace(key, groups.size());
    if (inserted) {
      groups.emplace_back();
    } else {
      const auto& head = batch[groups[it->second].front()];
      if (head.user != batch[s].user || head.time != batch[s].time) {
        it->second = groups.size();  // hash collision: start a fresh group
        groups.emplace_back();
      }
    }
    groups[it->second].push_back(s);
  }

  double squared = 0.0;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    tape.clear();
    const auto& head = batch[groups[gi].front()];
    const RepOptions uopts{training, derive_seed(seed, {gi, 0}), head.user};
    const auto urep = represent(tape, params, ctx, NodeRef::user(head.user), head.time, uopts);
    for (auto s : groups[gi]) {
      const auto& x = batch[s];
      const RepOptions iopts{training, derive_seed(seed, {gi, s + 1}), x.user};
      const auto irep = represent(tape, params, ctx, NodeRef::item(x.item), x.time, iopts);
      const Var p = tape.sigmoid(score_logit(tape, params, urep, irep));
      const double r = tape.scalar(p);
      if (!std::isfinite(r))
        throw NumericalError("non-finite prediction for (user " + std::to_string(x.user) +
                             ", item " + std::to_string(x.item) + ")");
      const double diff = r - x.label;
      squared += diff * diff;
      tape.seed(p, diff * inv_b);
    }
    tape.backward(grads);
  }
  const double loss = 0.5 * squared * inv_b;
  if (!std::isfinite(loss) || !grads.all_finite())
    throw NumericalError("non-finite loss or gradient (loss = " + std::to_string(loss) + ")");
  return loss;
}

LossAndGrads forward_backward(std::span<const Sample> batch, const GraphContext& ctx,
                              const ModelParams& params, std::uint64_t seed, bool training) {
  LossAndGrads out{0.0, GradientSet(params)};
  Tape tape(params);
  out.loss = forward_backward(batch, ctx, params, seed, training, out.grads, tape);
  return out;
}

}  // namespace fedgrec
