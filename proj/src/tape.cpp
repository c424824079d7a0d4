#include "fedgrec/tape.hpp"

#include <algorithm>
#include <cmath>

#include "fedgrec/errors.hpp"

namespace fedgrec {

namespace {

// Four interleaved partial sums; the order is fixed, so results are
// reproducible and match row_dot wherever it is used.
double row_dot(const double* __restrict w, const double* __restrict x, std::size_t n) {
  double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
  std::size_t c = 0;
  for (; c + 4 <= n; c += 4) {
    a0 += w[c] * x[c];
    a1 += w[c + 1] * x[c + 1];
    a2 += w[c + 2] * x[c + 2];
    a3 += w[c + 3] * x[c + 3];
  }
  for (; c < n; ++c) a0 += w[c] * x[c];
  return (a0 + a1) + (a2 + a3);
}

void outer_accumulate(double* __restrict gw, double* __restrict gx, const double* __restrict w,
                      const double* __restrict x, double g, std::size_t n) {
  for (std::size_t c = 0; c < n; ++c) {
    gw[c] += g * x[c];
    gx[c] += g * w[c];
  }
}

}  // namespace

double matvec_row(std::span<const double> w, std::span<const double> x) {
  return row_dot(w.data(), x.data(), x.size());
}

void Tape::clear() {
  nodes_.clear();
  values_.clear();
  grads_.clear();
  inputs_.clear();
}

Tape::Var Tape::push(Op op, std::size_t size) {
  Node n{op, static_cast<std::uint32_t>(size), values_.size()};
  values_.resize(values_.size() + size, 0.0);
  nodes_.push_back(n);
  return static_cast<Var>(nodes_.size() - 1);
}

std::uint32_t Tape::store_inputs(std::span<const Var> xs) {
  const auto begin = static_cast<std::uint32_t>(inputs_.size());
  inputs_.insert(inputs_.end(), xs.begin(), xs.end());
  return begin;
}

std::span<const double> Tape::value(Var v) const { return {val(v), nodes_[v].size}; }

Tape::Var Tape::param_row(std::size_t tensor, std::size_t row) {
  const auto& t = params_->tensors[tensor];
  if (row >= t.rows) throw ContractError("row " + std::to_string(row) + " outside " + t.name);
  return param_slice(tensor, row * t.cols, t.cols);
}

Tape::Var Tape::param_slice(std::size_t tensor, std::size_t offset, std::size_t len) {
  const auto v = push(Op::kParam, len);
  nodes_[v].tensor = tensor;
  nodes_[v].param_off = offset;
  std::copy_n(params_->tensors[tensor].data.data() + offset, len, val(v));
  return v;
}

Tape::Var Tape::constant(std::span<const double> values) {
  // values may alias the arena, which push() can reallocate
  const std::vector<double> copy(values.begin(), values.end());
  const auto v = push(Op::kConst, copy.size());
  std::copy(copy.begin(), copy.end(), val(v));
  return v;
}

Tape::Var Tape::zeros(std::size_t n) { return push(Op::kConst, n); }

Tape::Var Tape::matvec(std::size_t tensor, Var x) {
  const auto& t = params_->tensors[tensor];
  if (nodes_[x].size != t.cols)
    throw ContractError("matvec shape mismatch on " + t.name);
  const auto v = push(Op::kMatVec, t.rows);
  nodes_[v].tensor = tensor;
  nodes_[v].a = x;
  const double* w = t.data.data();
  const double* in = val(x);
  double* out = val(v);
  for (std::size_t r = 0; r < t.rows; ++r) out[r] = row_dot(w + r * t.cols, in, t.cols);
  return v;
}

Tape::Var Tape::add(Var a, Var b) {
  if (nodes_[a].size != nodes_[b].size) throw ContractError("add shape mismatch");
  const auto v = push(Op::kAdd, nodes_[a].size);
  nodes_[v].a = a;
  nodes_[v].b = b;
  const double* x = val(a);
  const double* y = val(b);
  double* out = val(v);
  for (std::size_t j = 0; j < nodes_[v].size; ++j) out[j] = x[j] + y[j];
  return v;
}

Tape::Var Tape::sum(std::span<const Var> xs) {
  if (xs.empty()) throw ContractError("sum of an empty list");
  const auto n = nodes_[xs[0]].size;
  const auto v = push(Op::kSum, n);
  nodes_[v].in_begin = store_inputs(xs);
  nodes_[v].in_count = static_cast<std::uint32_t>(xs.size());
  double* out = val(v);
  for (auto x : xs) {
    if (nodes_[x].size != n) throw ContractError("sum shape mismatch");
    const double* in = val(x);
    for (std::size_t j = 0; j < n; ++j) out[j] += in[j];
  }
  return v;
}

Tape::Var Tape::scale(Var a, double s) {
  const auto v = push(Op::kScale, nodes_[a].size);
  nodes_[v].a = a;
  nodes_[v].k = s;
  const double* x = val(a);
  double* out = val(v);
  for (std::size_t j = 0; j < nodes_[v].size; ++j) out[j] = s * x[j];
  return v;
}

Tape::Var Tape::mean(std::span<const Var> xs) {
  if (xs.empty()) throw ContractError("mean of an empty list");
  const auto n = nodes_[xs[0]].size;
  const auto v = push(Op::kMean, n);
  nodes_[v].in_begin = store_inputs(xs);
  nodes_[v].in_count = static_cast<std::uint32_t>(xs.size());
  double* out = val(v);
  std::copy_n(val(xs[0]), n, out);
  for (std::size_t k = 1; k < xs.size(); ++k) {
    if (nodes_[xs[k]].size != n) throw ContractError("mean shape mismatch");
    const double* in = val(xs[k]);
    const double inv = 1.0 / static_cast<double>(k + 1);
    for (std::size_t j = 0; j < n; ++j) out[j] += (in[j] - out[j]) * inv;
  }
  return v;
}

Tape::Var Tape::concat(std::span<const Var> xs) {
  std::size_t n = 0;
  for (auto x : xs) n += nodes_[x].size;
  const auto v = push(Op::kConcat, n);
  nodes_[v].in_begin = store_inputs(xs);
  nodes_[v].in_count = static_cast<std::uint32_t>(xs.size());
  double* out = val(v);
  for (auto x : xs) {
    std::copy_n(val(x), nodes_[x].size, out);
    out += nodes_[x].size;
  }
  return v;
}

Tape::Var Tape::relu(Var a) {
  const auto v = push(Op::kRelu, nodes_[a].size);
  nodes_[v].a = a;
  const double* x = val(a);
  double* out = val(v);
  for (std::size_t j = 0; j < nodes_[v].size; ++j) out[j] = x[j] > 0.0 ? x[j] : 0.0;
  return v;
}

Tape::Var Tape::leaky_relu(Var a, double slope) {
  const auto v = push(Op::kLeakyRelu, nodes_[a].size);
  nodes_[v].a = a;
  nodes_[v].k = slope;
  const double* x = val(a);
  double* out = val(v);
  for (std::size_t j = 0; j < nodes_[v].size; ++j) out[j] = x[j] > 0.0 ? x[j] : slope * x[j];
  return v;
}

Tape::Var Tape::sigmoid(Var a) {
  const auto v = push(Op::kSigmoid, nodes_[a].size);
  nodes_[v].a = a;
  const double* x = val(a);
  double* out = val(v);
  for (std::size_t j = 0; j < nodes_[v].size; ++j) out[j] = 1.0 / (1.0 + std::exp(-x[j]));
  return v;
}

Tape::Var Tape::dot(Var a, Var b) {
  if (nodes_[a].size != nodes_[b].size) throw ContractError("dot shape mismatch");
  const auto v = push(Op::kDot, 1);
  nodes_[v].a = a;
  nodes_[v].b = b;
  const double* x = val(a);
  const double* y = val(b);
  double acc = 0.0;
  for (std::size_t j = 0; j < nodes_[a].size; ++j) acc += x[j] * y[j];
  *val(v) = acc;
  return v;
}

Tape::Var Tape::attention_weights(Var center, std::span<const Var> scores, double slope) {
  if (scores.empty()) throw ContractError("attention over an empty neighbor list");
  const auto v = push(Op::kAttention, scores.size());
  nodes_[v].a = center;
  nodes_[v].k = slope;
  nodes_[v].in_begin = store_inputs(scores);
  nodes_[v].in_count = static_cast<std::uint32_t>(scores.size());
  const double c = *val(center);
  double* out = val(v);
  double peak = -INFINITY;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    const double pre = c + *val(scores[j]);
    out[j] = pre > 0.0 ? pre : slope * pre;
    peak = std::max(peak, out[j]);
  }
  double total = 0.0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    out[j] = std::exp(out[j] - peak);
    total += out[j];
  }
  for (std::size_t j = 0; j < scores.size(); ++j) out[j] /= total;
  return v;
}

Tape::Var Tape::weighted_sum(Var weights, std::span<const Var> xs) {
  if (xs.empty() || nodes_[weights].size != xs.size())
    throw ContractError("weighted_sum needs one weight per input");
  const auto n = nodes_[xs[0]].size;
  const auto v = push(Op::kWeightedSum, n);
  nodes_[v].a = weights;
  nodes_[v].in_begin = store_inputs(xs);
  nodes_[v].in_count = static_cast<std::uint32_t>(xs.size());
  const double* w = val(weights);
  double* out = val(v);
  for (std::size_t j = 0; j < xs.size(); ++j) {
    const double* in = val(xs[j]);
    for (std::size_t c = 0; c < n; ++c) out[c] += w[j] * in[c];
  }
  return v;
}

void Tape::seed(Var v, std::span<const double> g) {
  if (g.size() != nodes_[v].size) throw ContractError("seed shape mismatch");
  grads_.resize(values_.size(), 0.0);
  double* dst = grad(v);
  for (std::size_t j = 0; j < g.size(); ++j) dst[j] += g[j];
}

void Tape::backward(GradientSet& grads) {
  grads_.resize(values_.size(), 0.0);
  for (std::size_t idx = nodes_.size(); idx-- > 0;) {
    const Node& n = nodes_[idx];
    const auto v = static_cast<Var>(idx);
    const double* g = grad(v);
    const auto sz = n.size;
    if (std::all_of(g, g + sz, [](double x) { return x == 0.0; })) continue;
    switch (n.op) {
      case Op::kConst:
        break;
      case Op::kParam:
        grads.add(n.tensor, n.param_off, {g, sz});
        break;
      case Op::kMatVec: {
        const auto& t = params_->tensors[n.tensor];
        auto& gw = grads.tensors()[n.tensor].data;
        const double* x = val(n.a);
        double* gx = grad(n.a);
        for (std::size_t r = 0; r < t.rows; ++r) {
          const double gr = g[r];
          if (gr == 0.0) continue;
          outer_accumulate(gw.data() + r * t.cols, gx, t.data.data() + r * t.cols, x, gr,
                           t.cols);
        }
        break;
      }
      case Op::kAdd: {
        double* ga = grad(n.a);
        double* gb = grad(n.b);
        for (std::size_t j = 0; j < sz; ++j) {
          ga[j] += g[j];
          gb[j] += g[j];
        }
        break;
      }
      case Op::kSum:
        for (std::uint32_t i = 0; i < n.in_count; ++i) {
          double* gi = grad(inputs_[n.in_begin + i]);
          for (std::size_t j = 0; j < sz; ++j) gi[j] += g[j];
        }
        break;
      case Op::kMean: {
        const double inv = 1.0 / static_cast<double>(n.in_count);
        for (std::uint32_t i = 0; i < n.in_count; ++i) {
          double* gi = grad(inputs_[n.in_begin + i]);
          for (std::size_t j = 0; j < sz; ++j) gi[j] += g[j] * inv;
        }
        break;
      }
      case Op::kScale: {
        double* ga = grad(n.a);
        for (std::size_t j = 0; j < sz; ++j) ga[j] += n.k * g[j];
        break;
      }
      case Op::kConcat: {
        const double* src = g;
        for (std::uint32_t i = 0; i < n.in_count; ++i) {
          const auto in = inputs_[n.in_begin + i];
          double* gi = grad(in);
          for (std::size_t j = 0; j < nodes_[in].size; ++j) gi[j] += src[j];
          src += nodes_[in].size;
        }
        break;
      }
      case Op::kRelu: {
        const double* y = val(v);
        double* ga = grad(n.a);
        for (std::size_t j = 0; j < sz; ++j)
          if (y[j] > 0.0) ga[j] += g[j];
        break;
      }
      case Op::kLeakyRelu: {
        const double* x = val(n.a);
        double* ga = grad(n.a);
        for (std::size_t j = 0; j < sz; ++j) ga[j] += x[j] > 0.0 ? g[j] : n.k * g[j];
        break;
      }
      case Op::kSigmoid: {
        const double* y = val(v);
        double* ga = grad(n.a);
        for (std::size_t j = 0; j < sz; ++j) ga[j] += g[j] * y[j] * (1.0 - y[j]);
        break;
      }
      case Op::kDot: {
        const auto len = nodes_[n.a].size;
        const double* x = val(n.a);
        const double* y = val(n.b);
        double* ga = grad(n.a);
        double* gb = grad(n.b);
        for (std::size_t j = 0; j < len; ++j) {
          ga[j] += g[0] * y[j];
          gb[j] += g[0] * x[j];
        }
        break;
      }
      case Op::kAttention: {
        const double* alpha = val(v);
        double inner = 0.0;
        for (std::size_t j = 0; j < sz; ++j) inner += alpha[j] * g[j];
        const double c = *val(n.a);
        double* gc = grad(n.a);
        for (std::size_t j = 0; j < sz; ++j) {
          const auto s = inputs_[n.in_begin + j];
          const double pre = c + *val(s);
          const double ge = alpha[j] * (g[j] - inner);
          const double gp = pre > 0.0 ? ge : n.k * ge;
          *gc += gp;
          *grad(s) += gp;
        }
        break;
      }
      case Op::kWeightedSum: {
        const double* w = val(n.a);
        double* gw = grad(n.a);
        for (std::uint32_t i = 0; i < n.in_count; ++i) {
          const auto in = inputs_[n.in_begin + i];
          const double* x = val(in);
          double* gi = grad(in);
          double acc = 0.0;
          for (std::size_t j = 0; j < sz; ++j) {
            acc += g[j] * x[j];
            gi[j] += w[i] * g[j];
          }
          gw[i] += acc;
        }
        break;
      }
    }
  }
}

}  // namespace fedgrec
