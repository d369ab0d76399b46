#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "cdmm/tensor.hpp"

namespace cdmm::ad {

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while its graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

// Append-only tape. Nodes are created in topological order, so a reverse sweep
// over the node list visits every node after all of its consumers.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaf that owns its value.
  Var input(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return input(std::move(value), false); }
  Var scalar(double v) { return input(Tensor::scalar(v), false); }
  // Leaf that references an external tensor (a model parameter). The tensor must
  // outlive the graph and stay unmodified while the graph is in use.
  Var parameter(const Tensor& value, bool requires_grad = true);

  // Records an interior node. `backward` receives d(loss)/d(output) and must call
  // accumulate() for each parent that requires a gradient.
  Var record(Tensor value, std::vector<Var> parents, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

  // Reverse sweep from a scalar loss. Gradients accumulate into previous results,
  // call zero_grad() first to recompute from scratch.
  void backward(Var loss);
  void zero_grad();
  // Null when the node received no gradient.
  const Tensor* grad(Var v) const;

  void accumulate(Var v, const Tensor& g);
  void accumulate(Var v, std::span<const double> g);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
    bool has_grad = false;
    Tensor grad;
  };
  std::vector<Node> nodes_;
};

// Affine / linear algebra.
Var matmul(Var a, Var b);
// m[R×C] + bias[C] added to every row; bias may be shaped [C] or [1×C].
Var add_rowwise(Var m, Var bias);

// Elementwise. Binary ops accept equal shapes or a one-element operand on either side.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var neg(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);

// Reductions.
Var sum(Var a);

// Row manipulation for rank-2 tensors.
Var row(Var m, std::size_t r);
Var stack_rows(std::span<const Var> rows);
// Repeats every row k times: [L×C] -> [kL×C].
Var repeat_rows(Var m, std::size_t k);
// Leading n rows: [T×C] -> [n×C].
Var first_rows(Var m, std::size_t n);

// x[T×C_in], kernels[C_out×C_in×K], bias[C_out]; zero padding on both ends.
Var conv1d(Var x, Var kernels, Var bias, std::size_t stride, std::size_t pad);

Var log_softmax_rows(Var m);
// Picks m[t, index[t]] for every row: [T×C] -> [T×1].
Var pick(Var m, std::span<const int> index);

// Output length of conv1d, or throws DimensionError when the kernel does not fit.
std::size_t conv_out_length(std::size_t length, std::size_t kernel, std::size_t stride,
                            std::size_t pad);

// Overflow-safe log(1 + exp(x)) and its derivative.
double softplus(double x);
double sigmoid(double x);

}  // namespace cdmm::ad
