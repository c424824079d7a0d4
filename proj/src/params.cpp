#include "fedgrec/params.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedgrec/errors.hpp"
#include "fedgrec/graphs.hpp"
#include "fedgrec/random.hpp"

namespace fedgrec {

ModelConfig model_config_for(const Dataset& ds, ModelConfig base) {
  base.n_users = ds.n_users;
  base.n_items = ds.n_items;
  base.user_field_cardinalities.clear();
  base.item_field_cardinalities.clear();
  for (const auto& f : ds.user_features) base.user_field_cardinalities.push_back(f.cardinality);
  for (const auto& f : ds.item_features) base.item_field_cardinalities.push_back(f.cardinality);
  return base;
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
  std::size_t next = 0;
  user_table = next++;
  item_table = next++;
  time_table = next++;
  edge_kind_table = next++;
  user_fields = next;
  next += cfg.user_field_cardinalities.size();
  item_fields = next;
  next += cfg.item_field_cardinalities.size();
  attention = next;
  next += 2 * cfg.heads;
  hop_update = next;
  next += 2 * cfg.hops;
  combine_proj = next++;
  mlp = next;
  mlp_layers = cfg.mlp_hidden.size() + 1;
  next += 2 * mlp_layers;
  count = next;
}

namespace {

Tensor make(std::string name, std::size_t rows, std::size_t cols, bool sparse = false) {
  return Tensor{std::move(name), rows, cols, sparse, std::vector<double>(rows * cols, 0.0)};
}

std::vector<Tensor> shapes(const ModelConfig& cfg) {
  if (cfg.dim == 0 || cfg.heads == 0 || cfg.layers == 0 || cfg.hops == 0)
    throw ConfigError("dim, heads, layers and hops must all be >= 1");
  const auto d = cfg.dim;
  std::vector<Tensor> t;
  t.push_back(make("user_table", cfg.n_users, d, true));
  t.push_back(make("item_table", cfg.n_items, d, true));
  t.push_back(make("time_bucket_table", kTimeBuckets, d));
  t.push_back(make("edge_kind_table", kEdgeKinds, d));
  for (std::size_t f = 0; f < cfg.user_field_cardinalities.size(); ++f)
    t.push_back(make("user_field_" + std::to_string(f), cfg.user_field_cardinalities[f], d, true));
  for (std::size_t f = 0; f < cfg.item_field_cardinalities.size(); ++f)
    t.push_back(make("item_field_" + std::to_string(f), cfg.item_field_cardinalities[f], d, true));
  for (std::size_t n = 0; n < cfg.heads; ++n) {
    t.push_back(make("attention_w_" + std::to_string(n), d, d));
    t.push_back(make("attention_a_" + std::to_string(n), 1, 2 * d));
  }
  for (std::size_t k = 0; k < cfg.hops; ++k) {
    t.push_back(make("hop_update_w_" + std::to_string(k), d, 2 * d));
    t.push_back(make("hop_update_b_" + std::to_string(k), 1, d));
  }
  t.push_back(make("combine_proj", d, cfg.heads * d));
  std::size_t in = 4 * d;
  auto widths = cfg.mlp_hidden;
  widths.push_back(1);
  for (std::size_t l = 0; l < widths.size(); ++l) {
    if (widths[l] == 0) throw ConfigError("MLP layer widths must be >= 1");
    t.push_back(make("mlp_w_" + std::to_string(l), widths[l], in));
    t.push_back(make("mlp_b_" + std::to_string(l), 1, widths[l]));
    in = widths[l];
  }
  return t;
}

bool is_bias(const std::string& name) {
  return name.rfind("hop_update_b_", 0) == 0 || name.rfind("mlp_b_", 0) == 0;
}

}  // namespace

ModelParams ModelParams::zeros(const ModelConfig& cfg) {
  ModelParams p;
  p.config = cfg;
  p.layout = ParamLayout(cfg);
  p.tensors = shapes(cfg);
  return p;
}

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
  auto p = zeros(cfg);
  Rng rng(derive_seed(seed, "init"));
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
  for (auto& t : p.tensors) {
    if (is_bias(t.name)) continue;
    for (auto& v : t.data) v = uniform_real(rng, -bound, bound);
  }
  return p;
}

std::size_t ModelParams::size() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.data.size();
  return n;
}

std::vector<double> ModelParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(size());
  for (const auto& t : tensors) flat.insert(flat.end(), t.data.begin(), t.data.end());
  return flat;
}

void ModelParams::unflatten(std::span<const double> flat) {
  if (flat.size() != size())
    throw ProtocolError("flat parameter vector has length " + std::to_string(flat.size()) +
                        ", expected " + std::to_string(size()));
  std::size_t pos = 0;
  for (auto& t : tensors) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), t.data.size(), t.data.begin());
    pos += t.data.size();
  }
}

bool ModelParams::same_shape(const ModelParams& other) const {
  if (tensors.size() != other.tensors.size()) return false;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& a = tensors[i];
    const auto& b = other.tensors[i];
    if (a.name != b.name || a.rows != b.rows || a.cols != b.cols) return false;
  }
  return true;
}

bool ModelParams::all_finite() const {
  for (const auto& t : tensors)
    for (auto v : t.data)
      if (!std::isfinite(v)) return false;
  return true;
}

bool operator==(const ModelParams& a, const ModelParams& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i)
    if (a.tensors[i].data != b.tensors[i].data) return false;
  return true;
}

// ---------------------------------------------------------------------------

GradientSet::GradientSet(const ModelParams& like) : tensors_(like.tensors) {
  marks_.resize(tensors_.size());
  rows_.resize(tensors_.size());
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    auto& t = tensors_[i];
    std::fill(t.data.begin(), t.data.end(), 0.0);
    if (t.sparse) {
      marks_[i].assign(t.rows, 0);
    } else {
      rows_[i].resize(t.rows);
      std::iota(rows_[i].begin(), rows_[i].end(), 0);
    }
  }
}

void GradientSet::add(std::size_t tensor, std::size_t offset, std::span<const double> g) {
  auto& t = tensors_[tensor];
  if (t.sparse) {
    const auto row = offset / t.cols;
    if (!marks_[tensor][row]) {
      marks_[tensor][row] = 1;
      rows_[tensor].push_back(row);
    }
  }
  double* dst = t.data.data() + offset;
  for (std::size_t j = 0; j < g.size(); ++j) dst[j] += g[j];
}

void GradientSet::clear() {
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    auto& t = tensors_[i];
    if (t.sparse) {
      for (auto r : rows_[i]) {
        std::fill_n(t.data.begin() + static_cast<std::ptrdiff_t>(r * t.cols), t.cols, 0.0);
        marks_[i][r] = 0;
      }
      rows_[i].clear();
    } else {
      std::fill(t.data.begin(), t.data.end(), 0.0);
    }
  }
}

void GradientSet::scale(double s) {
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    auto& t = tensors_[i];
    for (auto r : rows_[i])
      for (auto& v : t.row(r)) v *= s;
  }
}

std::span<const std::size_t> GradientSet::touched_rows(std::size_t tensor) const {
  return rows_[tensor];
}

bool GradientSet::touched(std::size_t tensor, std::size_t row) const {
  return !tensors_[tensor].sparse || marks_[tensor][row] != 0;
}

bool GradientSet::all_finite() const {
  for (std::size_t i = 0; i < tensors_.size(); ++i)
    for (auto r : rows_[i])
      for (auto v : tensors_[i].row(r))
        if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace fedgrec
