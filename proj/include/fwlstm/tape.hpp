#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fwlstm/tensor.hpp"

namespace fwlstm {

/// Index of a node on a Tape. Only valid for the tape that produced it.
struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
  friend auto operator<=>(NodeId, NodeId) = default;
};

enum class Op {
  leaf,
  matmul,
  matvec,
  add,
  hadamard,
  scalar_scale,
  outer_product,
  concat_rows,
  slice_rows,
  transpose,
  sum,
  sigmoid,
  relu,
  layer_norm,
  softmax_cross_entropy,
};

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::matvec: return "matvec";
    case Op::add: return "add";
    case Op::hadamard: return "hadamard";
    case Op::scalar_scale: return "scalar_scale";
    case Op::outer_product: return "outer_product";
    case Op::concat_rows: return "concat_rows";
    case Op::slice_rows: return "slice_rows";
    case Op::transpose: return "transpose";
    case Op::sum: return "sum";
    case Op::sigmoid: return "sigmoid";
    case Op::relu: return "relu";
    case Op::layer_norm: return "layer_norm";
    case Op::softmax_cross_entropy: return "softmax_cross_entropy";
  }
  return "unknown";
}

/// Non-tensor arguments of a primitive. Only the fields relevant to the op are read.
struct OpAttrs {
  double scale = 1.0;             // scalar_scale
  double eps = 1e-5;              // layer_norm, added to the variance inside the sqrt
  std::size_t begin = 0;          // slice_rows
  std::size_t count = 0;          // slice_rows
  std::size_t target = 0;         // softmax_cross_entropy
};

inline constexpr double kLayerNormEps = 1e-5;

class TapeError : public Error {
 public:
  using Error::Error;
};

/// Gradients produced by Tape::backward, one tensor per node.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}

  const Tensor& operator[](NodeId id) const { return grads_.at(id.index); }
  [[nodiscard]] std::size_t size() const { return grads_.size(); }

 private:
  std::vector<Tensor> grads_;
};

/// Append-only record of primitive applications, differentiated in reverse.
///
/// Each apply() appends exactly one node whose inputs are earlier nodes, so the
/// node order is a topological order. Values are computed eagerly in double
/// precision. ReLU uses a strict `x > 0` test in both directions, so the
/// subgradient at exactly zero is 0.
class Tape {
 public:
  Tape() = default;
  explicit Tape(bool check_finite) : check_finite_(check_finite) {}

  NodeId leaf(Tensor value) {
    if (check_finite_ && !value.all_finite()) {
      throw NonFiniteError("leaf: non-finite value");
    }
    nodes_.push_back(Node{Op::leaf, {}, std::move(value), {}, {}});
    return NodeId{nodes_.size() - 1};
  }

  NodeId apply(Op op, std::span<const NodeId> inputs, const OpAttrs& attrs = {}) {
    if (backward_done_) throw TapeError("apply after backward; reset the tape first");
    for (NodeId id : inputs) {
      if (id.index >= nodes_.size()) {
        throw TapeError(std::string(op_name(op)) + ": input id out of range");
      }
    }
    Node node{op, std::vector<NodeId>(inputs.begin(), inputs.end()), {}, {}, attrs};
    forward(node);
    if (check_finite_ && !node.value.all_finite()) {
      throw NonFiniteError(std::string(op_name(op)) + ": produced a non-finite value");
    }
    nodes_.push_back(std::move(node));
    return NodeId{nodes_.size() - 1};
  }

  NodeId apply(Op op, std::initializer_list<NodeId> inputs, const OpAttrs& attrs = {}) {
    return apply(op, std::span<const NodeId>(inputs.begin(), inputs.size()), attrs);
  }

  NodeId matmul(NodeId a, NodeId b) { return apply(Op::matmul, {a, b}); }
  NodeId matvec(NodeId m, NodeId v) { return apply(Op::matvec, {m, v}); }
  NodeId add(NodeId a, NodeId b) { return apply(Op::add, {a, b}); }
  NodeId hadamard(NodeId a, NodeId b) { return apply(Op::hadamard, {a, b}); }
  NodeId scale(NodeId a, double s) {
    OpAttrs at;
    at.scale = s;
    return apply(Op::scalar_scale, {a}, at);
  }
  NodeId outer(NodeId u, NodeId v) { return apply(Op::outer_product, {u, v}); }
  NodeId concat_rows(std::span<const NodeId> parts) { return apply(Op::concat_rows, parts); }
  NodeId concat_rows(std::initializer_list<NodeId> parts) { return apply(Op::concat_rows, parts); }
  NodeId slice_rows(NodeId a, std::size_t begin, std::size_t count) {
    OpAttrs at;
    at.begin = begin;
    at.count = count;
    return apply(Op::slice_rows, {a}, at);
  }
  NodeId transpose(NodeId a) { return apply(Op::transpose, {a}); }
  NodeId sum(NodeId a) { return apply(Op::sum, {a}); }
  NodeId sigmoid(NodeId a) { return apply(Op::sigmoid, {a}); }
  NodeId relu(NodeId a) { return apply(Op::relu, {a}); }
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps = kLayerNormEps) {
    OpAttrs at;
    at.eps = eps;
    return apply(Op::layer_norm, {x, gain, bias}, at);
  }
  NodeId softmax_cross_entropy(NodeId logits, std::size_t target) {
    OpAttrs at;
    at.target = target;
    return apply(Op::softmax_cross_entropy, {logits}, at);
  }

  [[nodiscard]] const Tensor& value(NodeId id) const { return nodes_.at(id.index).value; }
  [[nodiscard]] Op op(NodeId id) const { return nodes_.at(id.index).op; }
  [[nodiscard]] std::span<const NodeId> inputs(NodeId id) const {
    return nodes_.at(id.index).inputs;
  }
  /// Softmax probabilities saved by a softmax_cross_entropy node.
  [[nodiscard]] const Tensor& saved(NodeId id, std::size_t slot = 0) const {
    return nodes_.at(id.index).saved.at(slot);
  }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  /// Smallest |input| over all relu nodes; +inf when the tape has none.
  [[nodiscard]] double min_relu_margin() const {
    double m = std::numeric_limits<double>::infinity();
    for (const Node& n : nodes_) {
      if (n.op != Op::relu) continue;
      for (double v : nodes_[n.inputs[0].index].value.data()) m = std::min(m, std::abs(v));
    }
    return m;
  }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

  /// Reverse-mode sweep from a scalar node. Nodes that do not feed `loss`
  /// receive exact zeros.
  Gradients backward(NodeId loss) {
    if (backward_done_) throw TapeError("backward called twice without reset");
    if (loss.index >= nodes_.size()) throw TapeError("backward: loss id out of range");
    const Shape ls = nodes_[loss.index].value.shape();
    if (ls != Shape{1, 1}) throw TapeError("backward: loss must be 1x1, got " + ls.str());
    backward_done_ = true;

    std::vector<Tensor> grads(nodes_.size());
    std::vector<char> live(nodes_.size(), 0);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Shape& s = nodes_[i].value.shape();
      grads[i] = Tensor(s.rows, s.cols);
    }
    grads[loss.index][0] = 1.0;
    live[loss.index] = 1;

    for (std::size_t i = loss.index + 1; i-- > 0;) {
      if (!live[i]) continue;
      const Node& n = nodes_[i];
      for (NodeId in : n.inputs) live[in.index] = 1;
      backprop(n, grads[i], grads);
    }
    return Gradients(std::move(grads));
  }

 private:
  struct Node {
    Op op;
    std::vector<NodeId> inputs;
    Tensor value;
    std::vector<Tensor> saved;
    OpAttrs attrs;
  };

  [[nodiscard]] const Tensor& in(const Node& n, std::size_t k) const {
    return nodes_[n.inputs[k].index].value;
  }

  void expect_arity(const Node& n, std::size_t arity) const {
    if (n.inputs.size() != arity) {
      throw ShapeError(std::string(op_name(n.op)) + ": expected " + std::to_string(arity) +
                       " inputs, got " + std::to_string(n.inputs.size()));
    }
  }

  [[noreturn]] static void shape_mismatch(Op op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + a.str() + " vs " +
                     b.str());
  }

  void forward(Node& n) const {
    switch (n.op) {
      case Op::leaf:
        throw TapeError("use Tape::leaf to create leaves");
      case Op::matmul: {
        expect_arity(n, 2);
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        if (a.cols() != b.rows()) shape_mismatch(n.op, a.shape(), b.shape());
        Tensor out(a.rows(), b.cols());
        for (std::size_t r = 0; r < a.rows(); ++r)
          for (std::size_t k = 0; k < a.cols(); ++k) {
            const double av = a(r, k);
            for (std::size_t c = 0; c < b.cols(); ++c) out(r, c) += av * b(k, c);
          }
        n.value = std::move(out);
        return;
      }
      case Op::matvec: {
        expect_arity(n, 2);
        const Tensor& m = in(n, 0);
        const Tensor& v = in(n, 1);
        if (!v.is_column() || m.cols() != v.rows()) shape_mismatch(n.op, m.shape(), v.shape());
        Tensor out(m.rows(), 1);
        const double* md = m.data().data();
        const double* vd = v.data().data();
        const std::size_t cols = m.cols();
        for (std::size_t r = 0; r < m.rows(); ++r) {
          double s = 0.0;
          const double* row = md + r * cols;
          for (std::size_t c = 0; c < cols; ++c) s += row[c] * vd[c];
          out[r] = s;
        }
        n.value = std::move(out);
        return;
      }
      case Op::add:
      case Op::hadamard: {
        expect_arity(n, 2);
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        if (a.shape() != b.shape()) shape_mismatch(n.op, a.shape(), b.shape());
        Tensor out = a;
        if (n.op == Op::add) {
          for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
        } else {
          for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
        }
        n.value = std::move(out);
        return;
      }
      case Op::scalar_scale: {
        expect_arity(n, 1);
        Tensor out = in(n, 0);
        out *= n.attrs.scale;
        n.value = std::move(out);
        return;
      }
      case Op::outer_product: {
        expect_arity(n, 2);
        const Tensor& u = in(n, 0);
        const Tensor& v = in(n, 1);
        if (!u.is_column() || !v.is_column()) shape_mismatch(n.op, u.shape(), v.shape());
        Tensor out(u.rows(), v.rows());
        for (std::size_t r = 0; r < u.rows(); ++r)
          for (std::size_t c = 0; c < v.rows(); ++c) out(r, c) = u[r] * v[c];
        n.value = std::move(out);
        return;
      }
      case Op::concat_rows: {
        if (n.inputs.empty()) throw ShapeError("concat_rows: no inputs");
        const std::size_t cols = in(n, 0).cols();
        std::size_t rows = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Tensor& p = in(n, k);
          if (p.cols() != cols) shape_mismatch(n.op, in(n, 0).shape(), p.shape());
          rows += p.rows();
        }
        std::vector<double> data;
        data.reserve(rows * cols);
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const auto d = in(n, k).data();
          data.insert(data.end(), d.begin(), d.end());
        }
        n.value = Tensor(rows, cols, std::move(data));
        return;
      }
      case Op::slice_rows: {
        expect_arity(n, 1);
        const Tensor& a = in(n, 0);
        if (n.attrs.count == 0 || n.attrs.begin + n.attrs.count > a.rows()) {
          throw ShapeError("slice_rows: rows [" + std::to_string(n.attrs.begin) + ", " +
                           std::to_string(n.attrs.begin + n.attrs.count) +
                           ") out of range for shape " + a.shape().str());
        }
        const auto d = a.data();
        const auto first = d.begin() + static_cast<std::ptrdiff_t>(n.attrs.begin * a.cols());
        const auto last = first + static_cast<std::ptrdiff_t>(n.attrs.count * a.cols());
        n.value = Tensor(n.attrs.count, a.cols(), std::vector<double>(first, last));
        return;
      }
      case Op::transpose:
        expect_arity(n, 1);
        n.value = in(n, 0).transposed();
        return;
      case Op::sum: {
        expect_arity(n, 1);
        double s = 0.0;
        for (double v : in(n, 0).data()) s += v;
        n.value = Tensor::scalar(s);
        return;
      }
      case Op::sigmoid: {
        expect_arity(n, 1);
        Tensor out = in(n, 0);
        for (double& v : out.data()) v = 1.0 / (1.0 + std::exp(-v));
        n.value = std::move(out);
        return;
      }
      case Op::relu: {
        expect_arity(n, 1);
        Tensor out = in(n, 0);
        for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
        n.value = std::move(out);
        return;
      }
      case Op::layer_norm: {
        expect_arity(n, 3);
        const Tensor& x = in(n, 0);
        const Tensor& gain = in(n, 1);
        const Tensor& bias = in(n, 2);
        if (!x.is_column()) throw ShapeError("layer_norm: input must be a column, got " + x.shape().str());
        if (x.rows() < 2) throw ShapeError("layer_norm: degenerate normalization over length " + std::to_string(x.rows()));
        if (gain.shape() != x.shape()) shape_mismatch(n.op, x.shape(), gain.shape());
        if (bias.shape() != x.shape()) shape_mismatch(n.op, x.shape(), bias.shape());
        const auto count = static_cast<double>(x.rows());
        double mean = 0.0;
        for (double v : x.data()) mean += v;
        mean /= count;
        double var = 0.0;
        for (double v : x.data()) var += (v - mean) * (v - mean);
        var /= count;
        const double inv_std = 1.0 / std::sqrt(var + n.attrs.eps);
        Tensor xhat(x.rows(), 1);
        Tensor out(x.rows(), 1);
        for (std::size_t i = 0; i < x.rows(); ++i) {
          xhat[i] = (x[i] - mean) * inv_std;
          out[i] = gain[i] * xhat[i] + bias[i];
        }
        n.saved = {std::move(xhat), Tensor::scalar(inv_std)};
        n.value = std::move(out);
        return;
      }
      case Op::softmax_cross_entropy: {
        expect_arity(n, 1);
        const Tensor& z = in(n, 0);
        if (!z.is_column()) throw ShapeError("softmax_cross_entropy: logits must be a column, got " + z.shape().str());
        if (n.attrs.target >= z.rows()) {
          throw ShapeError("softmax_cross_entropy: target " + std::to_string(n.attrs.target) +
                           " out of range for " + z.shape().str());
        }
        double zmax = -std::numeric_limits<double>::infinity();
        for (double v : z.data()) zmax = std::max(zmax, v);
        double denom = 0.0;
        for (double v : z.data()) denom += std::exp(v - zmax);
        const double log_denom = std::log(denom);
        Tensor probs(z.rows(), 1);
        for (std::size_t i = 0; i < z.rows(); ++i) probs[i] = std::exp(z[i] - zmax - log_denom);
        n.value = Tensor::scalar(-(z[n.attrs.target] - zmax - log_denom));
        n.saved = {std::move(probs)};
        return;
      }
    }
  }

  void backprop(const Node& n, const Tensor& gy, std::vector<Tensor>& grads) const {
    auto g = [&](std::size_t k) -> Tensor& { return grads[n.inputs[k].index]; };
    switch (n.op) {
      case Op::leaf:
        return;
      case Op::matmul: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        Tensor& ga = g(0);
        Tensor& gb = g(1);
        for (std::size_t r = 0; r < a.rows(); ++r)
          for (std::size_t k = 0; k < a.cols(); ++k) {
            double s = 0.0;
            for (std::size_t c = 0; c < b.cols(); ++c) {
              s += gy(r, c) * b(k, c);
              gb(k, c) += a(r, k) * gy(r, c);
            }
            ga(r, k) += s;
          }
        return;
      }
      case Op::matvec: {
        const Tensor& m = in(n, 0);
        const Tensor& v = in(n, 1);
        const std::size_t cols = m.cols();
        double* gm = g(0).data().data();
        double* gv = g(1).data().data();
        const double* md = m.data().data();
        const double* vd = v.data().data();
        for (std::size_t r = 0; r < m.rows(); ++r) {
          const double d = gy[r];
          if (d == 0.0) continue;
          double* grow = gm + r * cols;
          const double* mrow = md + r * cols;
          for (std::size_t c = 0; c < cols; ++c) {
            grow[c] += d * vd[c];
            gv[c] += d * mrow[c];
          }
        }
        return;
      }
      case Op::add:
        g(0) += gy;
        g(1) += gy;
        return;
      case Op::hadamard: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        for (std::size_t i = 0; i < gy.size(); ++i) {
          g(0)[i] += gy[i] * b[i];
          g(1)[i] += gy[i] * a[i];
        }
        return;
      }
      case Op::scalar_scale:
        for (std::size_t i = 0; i < gy.size(); ++i) g(0)[i] += n.attrs.scale * gy[i];
        return;
      case Op::outer_product: {
        const Tensor& u = in(n, 0);
        const Tensor& v = in(n, 1);
        for (std::size_t r = 0; r < u.rows(); ++r)
          for (std::size_t c = 0; c < v.rows(); ++c) {
            g(0)[r] += gy(r, c) * v[c];
            g(1)[c] += gy(r, c) * u[r];
          }
        return;
      }
      case Op::concat_rows: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          Tensor& gk = g(k);
          for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += gy[offset + i];
          offset += gk.size();
        }
        return;
      }
      case Op::slice_rows: {
        Tensor& ga = g(0);
        const std::size_t offset = n.attrs.begin * ga.cols();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[offset + i] += gy[i];
        return;
      }
      case Op::transpose: {
        Tensor& ga = g(0);
        for (std::size_t r = 0; r < ga.rows(); ++r)
          for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += gy(c, r);
        return;
      }
      case Op::sum: {
        const double d = gy[0];
        for (double& v : g(0).data()) v += d;
        return;
      }
      case Op::sigmoid:
        for (std::size_t i = 0; i < gy.size(); ++i) {
          const double y = n.value[i];
          g(0)[i] += gy[i] * y * (1.0 - y);
        }
        return;
      case Op::relu: {
        const Tensor& x = in(n, 0);
        for (std::size_t i = 0; i < gy.size(); ++i) {
          if (x[i] > 0.0) g(0)[i] += gy[i];
        }
        return;
      }
      case Op::layer_norm: {
        const Tensor& gain = in(n, 1);
        const Tensor& xhat = n.saved[0];
        const double inv_std = n.saved[1][0];
        const std::size_t len = gy.size();
        std::vector<double> dxhat(len);
        double mean_d = 0.0;
        double mean_dx = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
          dxhat[i] = gy[i] * gain[i];
          mean_d += dxhat[i];
          mean_dx += dxhat[i] * xhat[i];
          g(1)[i] += gy[i] * xhat[i];
          g(2)[i] += gy[i];
        }
        mean_d /= static_cast<double>(len);
        mean_dx /= static_cast<double>(len);
        for (std::size_t i = 0; i < len; ++i) {
          g(0)[i] += inv_std * (dxhat[i] - mean_d - xhat[i] * mean_dx);
        }
        return;
      }
      case Op::softmax_cross_entropy: {
        const Tensor& probs = n.saved[0];
        const double d = gy[0];
        for (std::size_t i = 0; i < probs.size(); ++i) {
          g(0)[i] += d * (probs[i] - (i == n.attrs.target ? 1.0 : 0.0));
        }
        return;
      }
    }
  }

  std::vector<Node> nodes_;
  bool check_finite_ = false;
  bool backward_done_ = false;
};

}  // namespace fwlstm
