// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "sparrow/layers.hpp"

namespace sparrow {

struct AdamConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient-norm clip; <= 0 disables
};

// Adam over the trainable weights of a binding. Slot i of the optimizer state
// follows the i-th bound weight, so weights must be bound in a fixed order.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  // Applies one update with learning rate `lr` and returns the pre-clip gradient norm.
  double step(const ParamBinding& binding, double lr);
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<Matrix> m_, v_;
  long t_ = 0;
};

}  // namespace sparrow
