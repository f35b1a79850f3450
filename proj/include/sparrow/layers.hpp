// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "sparrow/autograd.hpp"
#include "sparrow/numkernel.hpp"

namespace sparrow {

inline constexpr double kNormEps = 1e-6;

float gelu_value(float x);
double gelu_derivative(double x);

// Rotary encoding on each head's slice, pairing dimension i with i + head_dim/2.
void rope_row(std::span<float> x, int position, int heads, double base, bool inverse = false);

// Analytic multiply counter. Kernels add the number of scalar multiplies they
// perform so cost comparisons do not depend on wall-clock noise.
struct CostMeter {
  std::uint64_t multiplies = 0;
  void add(std::uint64_t n) { multiplies += n; }
};

struct LayerShape {
  int hidden = 0;
  int heads = 0;
  int ffn = 0;
  double rope_base = 10000.0;
  int head_dim() const { return hidden / heads; }
};

// One pre-norm decoder layer: attention and GELU feed-forward, both residual.
struct LayerWeights {
  Matrix attn_norm;  // 1 x d
  Matrix wq, wk, wv, wo;  // d x d
  Matrix mlp_norm;  // 1 x d
  Matrix w_up;  // d x ffn
  Matrix w_down;  // ffn x d

  static LayerWeights random(const LayerShape& shape, Rng& rng, float out_scale);
  std::vector<Matrix*> tensors();
  std::vector<const Matrix*> tensors() const;
};

// Single-layer key/value storage. Keys are stored transposed per head
// ([head][dim][slot]) so that scoring a query against a contiguous slot range
// is a unit-stride loop.
class KVStore {
 public:
  KVStore() = default;
  KVStore(int heads, int head_dim, std::size_t capacity);

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }
  int heads() const { return heads_; }
  int head_dim() const { return head_dim_; }

  void reserve(std::size_t capacity);
  void resize(std::size_t size);
  void set(std::size_t slot, std::span<const float> key, std::span<const float> value);
  void copy_slot(std::size_t from, std::size_t to);

  float key(int head, int dim, std::size_t slot) const {
    return kt_[(static_cast<std::size_t>(head) * head_dim_ + dim) * capacity_ + slot];
  }
  const float* key_lane(int head, int dim) const {
    return kt_.data() + (static_cast<std::size_t>(head) * head_dim_ + dim) * capacity_;
  }
  std::span<const float> value(std::size_t slot) const {
    return {v_.data() + slot * hidden(), hidden()};
  }
  std::size_t hidden() const { return static_cast<std::size_t>(heads_) * head_dim_; }

  // Entrywise comparison of the first `n` slots.
  double max_abs_diff(const KVStore& other, std::size_t n) const;

 private:
  int heads_ = 0;
  int head_dim_ = 0;
  std::size_t capacity_ = 0;
  std::size_t size_ = 0;
  std::vector<float> kt_;
  std::vector<float> v_;
};

// Keys visible to one query: the contiguous slots [begin, end) followed by
// `extras` in the given order. The order fixes the accumulation order, so two
// callers that see the same keys in the same order get bit-identical output.
struct KeySet {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::vector<std::size_t> extras;
  std::size_t count() const { return end - begin + extras.size(); }
};

// Multi-head attention of one (already rotated) query over a key set.
// `probs`, when given, receives heads x count attention weights.
void attend(const KVStore& kv, std::span<const float> q, const KeySet& keys, std::span<float> out,
            std::vector<double>* probs = nullptr, CostMeter* cost = nullptr);

// Receives attention weights (heads x keys.count()) for the rows it wants.
struct AttentionObserver {
  std::function<bool(std::size_t row)> wants;
  std::function<void(std::size_t row, const KeySet& keys, const std::vector<double>& probs)> record;
};

// Runs one layer over `x` in place. Keys/values of every row are written to
// slots [slot0, slot0 + rows) before any row attends.
void layer_forward_rows(const LayerWeights& w, const LayerShape& shape, Matrix& x,
                        std::span<const int> positions, KVStore& kv, std::size_t slot0,
                        const std::function<KeySet(std::size_t)>& keys_for_row,
                        const AttentionObserver* observer = nullptr, CostMeter* cost = nullptr);

// Final RMSNorm + LM head on one row.
void head_row(std::span<const float> x, const Matrix& final_norm, const Matrix& lm_head,
              std::span<float> logits, CostMeter* cost = nullptr);

// ---- training graphs -------------------------------------------------------

// Pairs persistent weights with per-step autograd leaves. Binding the same
// trainable weight twice returns the same leaf, so several graphs built
// against one binding accumulate into shared gradients.
class ParamBinding {
 public:
  ag::Var bind(Matrix& weight, bool trainable = true);
  const std::vector<Matrix*>& weights() const { return weights_; }
  const std::vector<ag::Var>& leaves() const { return leaves_; }
  void clear();

 private:
  std::vector<Matrix*> weights_;
  std::vector<ag::Var> leaves_;
};

struct LayerVars {
  ag::Var attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down;
};

LayerVars bind_layer(LayerWeights& w, ParamBinding& binding, bool trainable = true);
LayerVars constant_layer(const LayerWeights& w);

ag::Var layer_graph(const LayerVars& p, const LayerShape& shape, const ag::Var& x,
                    const std::vector<int>& positions, const std::vector<unsigned char>& allow);

std::vector<unsigned char> causal_mask(std::size_t n);

}  // namespace sparrow
