#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "trojanlab/tensor.hpp"

namespace trojanlab {

enum class OpKind {
  leaf,
  matmul,      // A(MxK) @ B(KxN)
  matmul_nt,   // A(MxD) @ B(NxD)^T
  add,
  add_bias,    // A(MxN) + bias(1xN) broadcast over rows
  mul,
  scale,
  softmax_rows,
  log_softmax_rows,
  layernorm_rows,
  gelu,
  embedding_gather,
  concat_rows,
  cross_entropy,       // sum over (row, id) slots of -log softmax(logits)[row][id]
  soft_cross_entropy,  // sum over rows of -<targets[r], log softmax(logits)[r]>
};

struct Node {
  OpKind kind = OpKind::leaf;
  bool requires_grad = false;
  Tensor value;
  std::vector<int> inputs;
  double scalar = 0.0;     // scale factor or layernorm eps
  std::vector<int> idata;  // gather row ids, or flattened (row, id) slots
  Tensor stats;            // layernorm row stats or cached log-softmax
};

// Reverse-mode tape over dense 2D tensors. Build the graph forward by id,
// then call backward on a 1x1 loss node.
class Tape {
 public:
  int leaf(Tensor t, bool requires_grad = false);
  int matmul(int a, int b);
  int matmul_nt(int a, int b);
  int add(int a, int b);
  int add_bias(int a, int bias);
  int mul(int a, int b);
  int scale(int a, double c);
  int softmax_rows(int a);
  int log_softmax_rows(int a);
  int layernorm_rows(int x, int gain, int bias, double eps);
  int gelu(int a);
  int embedding_gather(int table, const std::vector<int>& ids);
  int concat_rows(const std::vector<int>& parts);
  int cross_entropy(int logits, const std::vector<std::pair<int, int>>& slots);
  int soft_cross_entropy(int logits, int targets);

  const Tensor& value(int id) const { return nodes_[check(id)].value; }
  const Node& node(int id) const { return nodes_[check(id)]; }
  int size() const { return static_cast<int>(nodes_.size()); }

  // Adjoints for every node reachable from `loss` that requires grad; nodes
  // outside that set get an empty tensor. `loss` must be 1x1.
  std::vector<Tensor> backward(int loss) const;

 private:
  int check(int id) const;
  int push(Node n);
  std::vector<Node> nodes_;
};

struct FdCheckResult {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t n_checked = 0;
};

// Builder gets the current leaf tensors, creates leaves on the tape (with
// requires_grad on the ones under test), wires the graph, and returns
// {loss_id, leaf_ids} with leaf_ids parallel to the input vector.
using GraphBuilder =
    std::function<std::pair<int, std::vector<int>>(Tape&, const std::vector<Tensor>&)>;

// Central-difference check of tape gradients at the given point. Checks every
// coordinate unless max_coords_per_leaf > 0, in which case that many are
// sampled per leaf.
FdCheckResult finite_diff_check(const std::vector<Tensor>& inits, const GraphBuilder& build,
                                std::size_t max_coords_per_leaf = 0, double h = 1e-5,
                                std::uint64_t seed = 12345);

// Same check for an externally supplied scalar function and its claimed
// gradient at `point`.
FdCheckResult finite_diff_check_fn(const std::function<double(const Tensor&)>& f,
                                   const Tensor& analytic_grad, const Tensor& point,
                                   std::size_t max_coords = 0, double h = 1e-5,
                                   std::uint64_t seed = 12345);

}  // namespace trojanlab
