// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "prophy/tensor.hpp"

namespace prophy::ad {

struct Val {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

/// Eager reverse-mode tape over Tensor values. Ops append nodes in
/// topological order; backward() walks the nodes in reverse and accumulates
/// gradients into every node that transitively depends on a param leaf.
class Tape {
 public:
  /// Constant leaf: no gradient is tracked through it.
  Val input(Tensor value);
  /// Differentiable leaf.
  Val param(Tensor value);

  const Tensor& value(Val v) const { return node(v).value; }
  /// Gradient of the last backward() root w.r.t. v. Zero tensor if v does
  /// not influence the root.
  const Tensor& grad(Val v);

  void backward(Val root);

  // Elementwise and shape ops.
  Val add(Val a, Val b);
  Val sub(Val a, Val b);
  Val mul(Val a, Val b);
  Val scale(Val a, double c);
  Val add_const(Val a, Tensor c);
  Val mul_const(Val a, Tensor c);
  Val reshape(Val a, Shape shape);

  // Linear algebra.
  Val matmul(Val a, Val b);
  /// y = x w^T + b; x [m, in], w [out, in], b [out]. Pass Val{} for no bias.
  Val linear(Val x, Val w, Val b);
  /// x [b*n, c] plus one row of rows [b, c] broadcast over each n-token span.
  Val add_row_broadcast(Val x, Val rows, std::int64_t tokens_per_row);
  /// Build [b, d] rows where row i is base.row(i), or null_row where
  /// use_null[i] is set. Gradient flows only into null_row.
  Val rows_with_null(Tensor base, Val null_row, std::vector<std::uint8_t> use_null);

  // Nonlinearities.
  Val gelu(Val a);
  Val softmax_rows(Val a);
  Val layer_norm(Val x, Val gamma, Val beta, double eps = 1e-6);
  /// Fused multi-head self-attention over q, k, v of shape [batch*n, c].
  Val attention(Val q, Val k, Val v, std::int64_t batch, std::int64_t heads);

  // Reductions.
  Val sum(Val a);
  Val mean(Val a);
  /// Column means of a 2-d value: [m, n] -> [n].
  Val col_mean(Val a);
  /// Scalar sum(a * w) with constant w.
  Val dot_const(Val a, Tensor w);

  /// Mixture over per-token top-k experts. x [t, c], probs [t, e],
  /// w [e, c, c] (rows are output channels), b [e, c]. Weights are the
  /// selected probabilities, renormalized to sum 1 when renormalize is set.
  struct MoeOut {
    Val out;
    std::vector<std::int32_t> indices;  // [t * k], expert per slot
  };
  MoeOut moe_apply(Val x, Val probs, Val w, Val b, int k, bool renormalize);

  /// Sum over i<j of (cos(v_i, v_j) - q_ij)^2 with the zero-norm rule:
  /// rows with norm below eps have cosine 0 against every other row.
  Val coarse_cosine(Val v, Tensor q, double eps = 1e-12);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node;
  using BackFn = std::function<void(Tape&, const Node&)>;

  struct Node {
    Tensor value;
    std::int32_t id = -1;
    std::int32_t in[3] = {-1, -1, -1};
    bool requires_grad = false;
    BackFn back;
    std::vector<Tensor> aux;
    std::vector<std::int32_t> iaux;
  };

  Node& node(Val v) {
    require(v.valid() && v.id < static_cast<std::int32_t>(nodes_.size()), "tape: invalid value");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(Val v) const {
    require(v.valid() && v.id < static_cast<std::int32_t>(nodes_.size()), "tape: invalid value");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  Val push(Tensor value, std::initializer_list<Val> ins, BackFn back, bool force_grad = false);

  /// Gradient buffer for node id, or nullptr when the node is grad-free.
  Tensor* gbuf(std::int32_t id);
  void accum(std::int32_t id, const Tensor& g);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

}  // namespace prophy::ad
