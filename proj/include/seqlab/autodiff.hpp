#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "seqlab/tensor.hpp"

namespace seqlab {

// Raised when a forward pass produces a non-finite value. Perturbed
// parameters can blow the recurrence up; the failure has to be attributable
// to the op that produced it instead of surfacing as NaN losses later.
struct NonFiniteError : std::runtime_error {
  explicit NonFiniteError(const std::string& what) : std::runtime_error(what) {}
};

// Reverse-mode tape over dense tensors. Values are computed eagerly as nodes
// are added, so building the graph is the forward pass; backward() then
// walks the tape in reverse. A Graph instance is single-threaded, but many
// graphs may evaluate concurrently over shared read-only parameter tensors.
class Graph {
 public:
  using NodeId = std::size_t;

  enum class Op {
    leaf,
    add,
    sub,
    mul,
    scale,
    matmul,
    tanh_fn,
    sigmoid_fn,
    exp_fn,
    embed_row,
    log_softmax,
    pick,
    sum_all,
    mean_all,
    add_n,
    stack_scalars,
  };

  // Constant leaf; no gradient tracked.
  NodeId constant(Tensor v) { return push(Op::leaf, {}, std::move(v), false); }

  NodeId scalar(double v) {
    return constant(Tensor({std::size_t(1)}, {v}));
  }

  // Parameter leaf. One node per name; backward() reports a gradient for
  // every parameter leaf, zero if unused.
  NodeId parameter(const std::string& name, const Tensor& v) {
    NodeId id = push(Op::leaf, {}, v, true);
    nodes_[id].name = name;
    param_ids_.push_back(id);
    return id;
  }

  NodeId add(NodeId a, NodeId b) {
    require_same_shape(a, b, "add");
    Tensor out = nodes_[a].value;
    for (std::size_t i = 0; i < out.data.size(); ++i)
      out.data[i] += nodes_[b].value.data[i];
    return push(Op::add, {a, b}, std::move(out));
  }

  NodeId sub(NodeId a, NodeId b) {
    require_same_shape(a, b, "sub");
    Tensor out = nodes_[a].value;
    for (std::size_t i = 0; i < out.data.size(); ++i)
      out.data[i] -= nodes_[b].value.data[i];
    return push(Op::sub, {a, b}, std::move(out));
  }

  NodeId mul(NodeId a, NodeId b) {
    require_same_shape(a, b, "mul");
    Tensor out = nodes_[a].value;
    for (std::size_t i = 0; i < out.data.size(); ++i)
      out.data[i] *= nodes_[b].value.data[i];
    return push(Op::mul, {a, b}, std::move(out));
  }

  NodeId scale(NodeId a, double c) {
    Tensor out = nodes_[a].value;
    for (double& v : out.data) v *= c;
    NodeId id = push(Op::scale, {a}, std::move(out));
    nodes_[id].aux_scalar = c;
    return id;
  }

  // [m,k] x [k,n] -> [m,n]
  NodeId matmul(NodeId a, NodeId b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[0])
      throw std::invalid_argument("matmul: incompatible shapes");
    std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        double av = A.data[i * k + p];
        if (av == 0.0) continue;
        const double* brow = &B.data[p * n];
        double* orow = &out.data[i * n];
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    return push(Op::matmul, {a, b}, std::move(out));
  }

  NodeId tanh(NodeId a) {
    Tensor out = nodes_[a].value;
    for (double& v : out.data) v = std::tanh(v);
    return push(Op::tanh_fn, {a}, std::move(out));
  }

  NodeId exp(NodeId a) {
    Tensor out = nodes_[a].value;
    for (double& v : out.data) v = std::exp(v);
    return push(Op::exp_fn, {a}, std::move(out));
  }

  NodeId sigmoid(NodeId a) {
    Tensor out = nodes_[a].value;
    for (double& v : out.data)
      v = (v >= 0.0) ? 1.0 / (1.0 + std::exp(-v))
                     : std::exp(v) / (1.0 + std::exp(v));
    return push(Op::sigmoid_fn, {a}, std::move(out));
  }

  // Row `row` of a [V, d] table as a [1, d] tensor.
  NodeId embed_row(NodeId table, std::size_t row) {
    const Tensor& T = nodes_[table].value;
    if (T.shape.size() != 2 || row >= T.shape[0])
      throw std::invalid_argument("embed_row: bad row index");
    std::size_t d = T.shape[1];
    Tensor out({std::size_t(1), d});
    for (std::size_t j = 0; j < d; ++j) out.data[j] = T.data[row * d + j];
    NodeId id = push(Op::embed_row, {table}, std::move(out));
    nodes_[id].aux_index = row;
    return id;
  }

  // Stable log-softmax over all entries (intended for [1, V] logits).
  NodeId log_softmax(NodeId a) {
    const Tensor& x = nodes_[a].value;
    double m = -std::numeric_limits<double>::infinity();
    for (double v : x.data) m = std::max(m, v);
    double z = 0.0;
    for (double v : x.data) z += std::exp(v - m);
    double lz = m + std::log(z);
    Tensor out = x;
    for (double& v : out.data) v -= lz;
    return push(Op::log_softmax, {a}, std::move(out));
  }

  // Scalar element of a vector-valued node.
  NodeId pick(NodeId a, std::size_t index) {
    const Tensor& x = nodes_[a].value;
    if (index >= x.numel()) throw std::invalid_argument("pick: index out of range");
    Tensor out({std::size_t(1)}, {x.data[index]});
    NodeId id = push(Op::pick, {a}, std::move(out));
    nodes_[id].aux_index = index;
    return id;
  }

  NodeId sum(NodeId a) {
    double s = 0.0;
    for (double v : nodes_[a].value.data) s += v;
    return push(Op::sum_all, {a}, Tensor({std::size_t(1)}, {s}));
  }

  NodeId mean(NodeId a) {
    double s = 0.0;
    const Tensor& x = nodes_[a].value;
    for (double v : x.data) s += v;
    return push(Op::mean_all, {a},
                Tensor({std::size_t(1)}, {s / double(x.numel())}));
  }

  // Scalar nodes gathered into one [1, n] vector.
  NodeId stack(const std::vector<NodeId>& xs) {
    if (xs.empty()) throw std::invalid_argument("stack: empty input list");
    Tensor out({std::size_t(1), xs.size()});
    for (std::size_t k = 0; k < xs.size(); ++k) {
      if (nodes_[xs[k]].value.numel() != 1)
        throw std::invalid_argument("stack: inputs must be scalars");
      out.data[k] = nodes_[xs[k]].value.data[0];
    }
    return push(Op::stack_scalars, xs, std::move(out));
  }

  // Sum of same-shaped nodes; keeps NLL accumulation to one node.
  NodeId add_n(const std::vector<NodeId>& xs) {
    if (xs.empty()) throw std::invalid_argument("add_n: empty input list");
    Tensor out = nodes_[xs[0]].value;
    for (std::size_t k = 1; k < xs.size(); ++k) {
      require_same_shape(xs[0], xs[k], "add_n");
      for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] += nodes_[xs[k]].value.data[i];
    }
    return push(Op::add_n, xs, std::move(out));
  }

  const Tensor& value(NodeId id) const { return nodes_[id].value; }

  // Accumulate d(root)/d(node) for every node; root must be scalar.
  void backward(NodeId root) {
    if (nodes_[root].value.numel() != 1)
      throw std::invalid_argument("backward: root is not a scalar");
    for (auto& n : nodes_) {
      n.grad.assign(n.value.numel(), 0.0);
    }
    nodes_[root].grad[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (n.op == Op::leaf) continue;
      backprop_node(n);
    }
    ran_backward_ = true;
  }

  // Gradient w.r.t. a leaf (or any node) after backward().
  Tensor grad(NodeId id) const {
    const Node& n = nodes_[id];
    return Tensor(n.value.shape, n.grad);
  }

  // Gradient map over named parameter leaves; zero tensors for unused ones.
  std::map<std::string, Tensor> param_grads() const {
    if (!ran_backward_)
      throw std::logic_error("param_grads: backward has not run");
    std::map<std::string, Tensor> out;
    for (NodeId id : param_ids_) out[nodes_[id].name] = grad(id);
    return out;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Op op;
    std::vector<NodeId> inputs;
    Tensor value;
    std::vector<double> grad;
    std::size_t aux_index = 0;
    double aux_scalar = 0.0;
    std::string name;
    bool track = true;
  };

  std::vector<Node> nodes_;
  std::vector<NodeId> param_ids_;
  bool ran_backward_ = false;

  NodeId push(Op op, std::vector<NodeId> inputs, Tensor value,
              bool check_finite = true) {
    if (check_finite && !value.all_finite())
      throw NonFiniteError("non-finite value in forward pass (op " +
                           std::to_string(int(op)) + ")");
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  void require_same_shape(NodeId a, NodeId b, const char* what) const {
    if (!nodes_[a].value.same_shape(nodes_[b].value))
      throw std::invalid_argument(std::string(what) + ": shape mismatch");
  }

  void backprop_node(Node& n) {
    const std::vector<double>& g = n.grad;
    switch (n.op) {
      case Op::add: {
        acc(n.inputs[0], g);
        acc(n.inputs[1], g);
        break;
      }
      case Op::sub: {
        acc(n.inputs[0], g);
        auto& gb = nodes_[n.inputs[1]].grad;
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        break;
      }
      case Op::mul: {
        auto& ga = nodes_[n.inputs[0]].grad;
        auto& gb = nodes_[n.inputs[1]].grad;
        const auto& va = nodes_[n.inputs[0]].value.data;
        const auto& vb = nodes_[n.inputs[1]].value.data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i] * vb[i];
          gb[i] += g[i] * va[i];
        }
        break;
      }
      case Op::scale: {
        auto& ga = nodes_[n.inputs[0]].grad;
        for (std::size_t i = 0; i < g.size(); ++i)
          ga[i] += g[i] * n.aux_scalar;
        break;
      }
      case Op::matmul: {
        const Tensor& A = nodes_[n.inputs[0]].value;
        const Tensor& B = nodes_[n.inputs[1]].value;
        auto& gA = nodes_[n.inputs[0]].grad;
        auto& gB = nodes_[n.inputs[1]].grad;
        std::size_t m = A.shape[0], k = A.shape[1], nn = B.shape[1];
        // dA = g * B^T ; dB = A^T * g
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            const double* grow = &g[i * nn];
            const double* brow = &B.data[p * nn];
            for (std::size_t j = 0; j < nn; ++j) s += grow[j] * brow[j];
            gA[i * k + p] += s;
          }
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t i = 0; i < m; ++i) {
            double av = A.data[i * k + p];
            if (av == 0.0) continue;
            const double* grow = &g[i * nn];
            double* brow = &gB[p * nn];
            for (std::size_t j = 0; j < nn; ++j) brow[j] += av * grow[j];
          }
        break;
      }
      case Op::tanh_fn: {
        auto& ga = nodes_[n.inputs[0]].grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
          double y = n.value.data[i];
          ga[i] += g[i] * (1.0 - y * y);
        }
        break;
      }
      case Op::sigmoid_fn: {
        auto& ga = nodes_[n.inputs[0]].grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
          double y = n.value.data[i];
          ga[i] += g[i] * y * (1.0 - y);
        }
        break;
      }
      case Op::exp_fn: {
        auto& ga = nodes_[n.inputs[0]].grad;
        for (std::size_t i = 0; i < g.size(); ++i)
          ga[i] += g[i] * n.value.data[i];
        break;
      }
      case Op::embed_row: {
        auto& gt = nodes_[n.inputs[0]].grad;
        std::size_t d = n.value.numel();
        for (std::size_t j = 0; j < d; ++j)
          gt[n.aux_index * d + j] += g[j];
        break;
      }
      case Op::log_softmax: {
        auto& ga = nodes_[n.inputs[0]].grad;
        double gsum = 0.0;
        for (double v : g) gsum += v;
        for (std::size_t i = 0; i < g.size(); ++i)
          ga[i] += g[i] - std::exp(n.value.data[i]) * gsum;
        break;
      }
      case Op::pick: {
        nodes_[n.inputs[0]].grad[n.aux_index] += g[0];
        break;
      }
      case Op::sum_all: {
        auto& ga = nodes_[n.inputs[0]].grad;
        for (double& v : ga) v += g[0];
        break;
      }
      case Op::mean_all: {
        auto& ga = nodes_[n.inputs[0]].grad;
        double c = g[0] / double(ga.size());
        for (double& v : ga) v += c;
        break;
      }
      case Op::add_n: {
        for (NodeId in : n.inputs) acc(in, g);
        break;
      }
      case Op::stack_scalars: {
        for (std::size_t k = 0; k < n.inputs.size(); ++k)
          nodes_[n.inputs[k]].grad[0] += g[k];
        break;
      }
      case Op::leaf:
        break;
    }
  }

  void acc(NodeId id, const std::vector<double>& g) {
    auto& dst = nodes_[id].grad;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }
};

// Central-difference gradient of a scalar function of a flat parameter
// vector. Oracle for backward(); kept independent of the tape on purpose.
inline std::vector<double> finite_difference_gradient(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& theta, double h = 1e-5) {
  std::vector<double> g(theta.size());
  std::vector<double> x = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    x[i] = theta[i] + h;
    double fp = f(x);
    x[i] = theta[i] - h;
    double fm = f(x);
    x[i] = theta[i];
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NonFiniteError("finite_difference_gradient: non-finite value");
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace seqlab
