#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "mfam/tensor.hpp"

namespace mfam {

// Handle to a node on the active tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

enum class Activation { Tanh, Sigmoid, Relu };
enum class PoolMode { Mean, Max };

// k = min(n, ceil(ratio * n)), with an epsilon guard so ratios like 0.1
// at n = 10 do not round up through floating-point noise.
std::size_t topk_count(std::size_t n, double ratio);

// Indices of the k largest entries, ties keeping the lower index, returned
// in ascending index order.
std::vector<std::size_t> topk_indices(std::span<const double> values, std::size_t k);

// Define-by-run reverse-mode tape over dense tensors. Nodes are append-only,
// so every node's inputs precede it; backward() walks the list in reverse.
// One tape per forward pass; single-threaded.
class Tape {
 public:
  Var leaf(Tensor value);

  // elementwise / structural
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var sum(Var a);
  Var pick(Var a, std::size_t flat_index);
  Var reshape(Var a, std::vector<std::size_t> new_shape);
  Var concat_channels(std::span<const Var> parts);

  // linear algebra
  Var affine(Var x, Var w, Var b);             // x:[n] w:[m x n] b:[m] -> [m]
  Var linear(Var w, Var x);                    // no bias, x:[n] -> [m]
  Var affine_rows(Var z, Var w, Var b);        // z:[N x n] -> [N x m], row-wise
  Var outer(Var z, Var p);                     // [D],[K] -> [D*K], h[i*K+j]=z_i*p_j

  // neural ops
  Var conv1d(Var x, Var w, Var b, int dilation);  // x:[Cin x T] w:[Cout x Cin x k]
  Var activation(Var a, Activation kind);
  Var softmax(Var x);                          // [n] -> [n]
  Var pool_global(Var x, PoolMode mode);       // [C x T] -> [C]
  Var pool_windowed(Var x, PoolMode mode, std::size_t window, std::size_t stride);
                                               // [C x T] -> [N x C]
  Var cross_entropy(Var logits, std::size_t label);
  Var grad_reverse(Var x, double lambda);
  Var channel_scale(Var x, Var g);             // [C x T] * [C] broadcast over time
  Var weighted_rowsum(Var z, Var a);           // [N x D],[N] -> [D]
  Var topk_gate(Var a, double ratio);

  // Accumulates gradients for every node reachable from `loss`; untouched
  // nodes keep zero gradients.
  void backward(Var loss);

  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int> inputs;
    std::function<void(Tape&, const Node&)> backprop;
  };

  std::vector<Node> nodes_;

  Var push(Tensor value, std::vector<int> inputs,
           std::function<void(Tape&, const Node&)> backprop);
  const Node& node(int id) const;
  Tensor& grad_ref(int id);
  const Tensor& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  void check_var(Var v, const char* who) const;
};

}  // namespace mfam
