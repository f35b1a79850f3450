// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "sparrow/numkernel.hpp"

// Small tape-free reverse-mode autodiff over whole matrices. Each op returns a
// node that remembers its parents and how to push its gradient into them.
namespace sparrow::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Matrix value;
  Matrix grad;
  // Losses keep a double copy of their 1x1 value for gradient checking.
  double scalar = 0.0;
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad();
};

Var leaf(Matrix value, bool requires_grad = true);
Var constant(Matrix value);

// Accumulates d(root)/d(node) into every reachable node that requires grad.
void backward(const Var& root);

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
// x (n x m) + broadcast row b (1 x m)
Var add_row(const Var& x, const Var& b);
Var rmsnorm(const Var& x, const Var& gain, double eps);
Var rope(const Var& x, std::vector<int> positions, int heads, double base);
Var gelu(const Var& x);

// Multi-head scaled dot-product self attention. allow[i * n + j] != 0 lets
// query row i see key row j. Every row must allow at least one key.
Var attention(const Var& q, const Var& k, const Var& v, int heads, std::vector<unsigned char> allow);

Var concat_cols(const Var& a, const Var& b);
Var concat_rows(const Var& a, const Var& b);
Var slice_rows(const Var& x, std::size_t begin, std::size_t end);
// Row 0 becomes zero, row t takes row t - 1.
Var shift_down(const Var& x);
Var gather_rows(const Var& table, std::vector<int> ids);

// Mean token cross-entropy; targets < 0 are skipped.
Var cross_entropy(const Var& logits, std::vector<int> targets);
// Mean over rows of -sum_v p(v) log softmax(logits)(v).
Var soft_cross_entropy(const Var& logits, Matrix target_probs);
// Mean smooth-L1 (Huber with threshold beta) over all entries.
Var smooth_l1(const Var& x, Matrix target, double beta = 1.0);
Var weighted_sum(const std::vector<std::pair<Var, double>>& terms);

}  // namespace sparrow::ag
