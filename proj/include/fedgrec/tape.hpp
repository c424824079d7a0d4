#pragma once

// Minimal reverse-mode differentiation over the vector operations the model
// needs. Values live in one arena; every op records its inputs, and
// backward() walks the record in reverse, routing parameter gradients into a
// GradientSet. Summation order is fixed, so results are bit-reproducible.

#include <cstdint>
#include <span>
#include <vector>

#include "fedgrec/params.hpp"

namespace fedgrec {

// The dot product kernel behind Tape::matvec, for callers that must
// reproduce its rounding exactly.
double matvec_row(std::span<const double> w, std::span<const double> x);

class Tape {
 public:
  using Var = std::uint32_t;

  explicit Tape(const ModelParams& params) : params_(&params) {}

  void clear();

  // Leaves
  Var param_row(std::size_t tensor, std::size_t row);
  Var param_slice(std::size_t tensor, std::size_t offset, std::size_t len);
  Var constant(std::span<const double> values);
  Var zeros(std::size_t n);

  // Ops
  Var matvec(std::size_t tensor, Var x);  // tensor (rows x cols) times x (cols)
  Var add(Var a, Var b);
  Var sum(std::span<const Var> xs);       // elementwise; xs nonempty
  Var scale(Var a, double s);
  // Arithmetic mean as a running update, so identical inputs come back exact.
  Var mean(std::span<const Var> xs);
  Var concat(std::span<const Var> xs);
  Var relu(Var a);
  Var leaky_relu(Var a, double slope);
  Var sigmoid(Var a);
  Var dot(Var a, Var b);                  // scalar result
  // softmax_j(leaky_relu(center + scores_j)); center and scores are scalars.
  Var attention_weights(Var center, std::span<const Var> scores, double slope);
  Var weighted_sum(Var weights, std::span<const Var> xs);

  std::span<const double> value(Var v) const;
  double scalar(Var v) const { return value(v)[0]; }
  std::size_t size(Var v) const { return nodes_[v].size; }
  std::size_t node_count() const { return nodes_.size(); }

  // Adds `g` to the output gradient of v.
  void seed(Var v, std::span<const double> g);
  void seed(Var v, double g) { seed(v, std::span<const double>(&g, 1)); }
  void backward(GradientSet& grads);

 private:
  enum class Op : std::uint8_t {
    kParam, kConst, kMatVec, kAdd, kSum, kScale, kConcat, kRelu, kLeakyRelu,
    kSigmoid, kDot, kAttention, kWeightedSum, kMean
  };
  struct Node {
    Op op;
    std::uint32_t size;
    std::size_t off;        // value/grad offset
    std::uint32_t a = 0, b = 0;
    std::uint32_t in_begin = 0, in_count = 0;
    std::size_t tensor = 0, param_off = 0;
    double k = 0.0;
  };

  Var push(Op op, std::size_t size);
  double* val(Var v) { return values_.data() + nodes_[v].off; }
  const double* val(Var v) const { return values_.data() + nodes_[v].off; }
  double* grad(Var v) { return grads_.data() + nodes_[v].off; }
  std::uint32_t store_inputs(std::span<const Var> xs);

  const ModelParams* params_;
  std::vector<Node> nodes_;
  std::vector<double> values_, grads_;
  std::vector<Var> inputs_;
};

}  // namespace fedgrec
