#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedgrec/dataset.hpp"

namespace fedgrec {

struct ModelConfig {
  Index n_users = 0;
  Index n_items = 0;
  std::vector<Index> user_field_cardinalities;
  std::vector<Index> item_field_cardinalities;
  std::size_t dim = 16;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t hops = 2;
  std::vector<std::size_t> mlp_hidden{32};
  std::size_t history_length = 10;
  double leaky_slope = 0.2;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

ModelConfig model_config_for(const Dataset& ds, ModelConfig base);

struct Tensor {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool sparse = false;  // embedding table: gradients touch individual rows
  std::vector<double> data;

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

// Tensor positions inside ModelParams::tensors for a given config.
struct ParamLayout {
  std::size_t user_table = 0, item_table = 0, time_table = 0, edge_kind_table = 0;
  std::size_t user_fields = 0, item_fields = 0;  // first field table
  std::size_t attention = 0;  // head n: W at attention + 2n, a at attention + 2n + 1
  std::size_t hop_update = 0; // hop k (0-based): W at hop_update + 2k, bias at +1
  std::size_t combine_proj = 0;
  std::size_t mlp = 0;        // layer l: W at mlp + 2l, bias at +1
  std::size_t mlp_layers = 0;
  std::size_t count = 0;

  explicit ParamLayout(const ModelConfig& cfg);
  ParamLayout() = default;
};

// Every learnable tensor of the model, in a fixed order.
struct ModelParams {
  ModelConfig config;
  ParamLayout layout;
  std::vector<Tensor> tensors;

  // Uniform(-1/sqrt(d), 1/sqrt(d)) for tables and weights, zero biases.
  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);
  // Every entry zero; handy as a gradient or accumulator shape.
  static ModelParams zeros(const ModelConfig& cfg);

  std::size_t size() const;  // flattened length
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);
  bool same_shape(const ModelParams& other) const;
  bool all_finite() const;

  const Tensor& attention_w(std::size_t head) const { return tensors[layout.attention + 2 * head]; }
  const Tensor& attention_a(std::size_t head) const { return tensors[layout.attention + 2 * head + 1]; }
  const Tensor& hop_w(std::size_t hop) const { return tensors[layout.hop_update + 2 * hop]; }
  const Tensor& hop_b(std::size_t hop) const { return tensors[layout.hop_update + 2 * hop + 1]; }
  const Tensor& mlp_w(std::size_t l) const { return tensors[layout.mlp + 2 * l]; }
  const Tensor& mlp_b(std::size_t l) const { return tensors[layout.mlp + 2 * l + 1]; }

  friend bool operator==(const ModelParams& a, const ModelParams& b);
};

// Gradient storage shaped like ModelParams. Rows of sparse tables are
// tracked so clearing and applying cost O(touched rows).
class GradientSet {
 public:
  GradientSet() = default;
  explicit GradientSet(const ModelParams& like);

  void add(std::size_t tensor, std::size_t offset, std::span<const double> g);
  void clear();
  void scale(double s);

  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::vector<Tensor>& tensors() { return tensors_; }
  // Rows with a (possibly zero) contribution; dense tensors report every row.
  std::span<const std::size_t> touched_rows(std::size_t tensor) const;
  bool touched(std::size_t tensor, std::size_t row) const;
  bool all_finite() const;

 private:
  std::vector<Tensor> tensors_;
  std::vector<std::vector<std::uint8_t>> marks_;
  std::vector<std::vector<std::size_t>> rows_;
};

}  // namespace fedgrec
