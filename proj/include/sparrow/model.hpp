// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "sparrow/autograd.hpp"
#include "sparrow/layers.hpp"
#include "sparrow/numkernel.hpp"

namespace sparrow {

struct ModelConfig {
  int num_layers = 8;
  int hidden_dim = 64;
  int num_heads = 4;
  int vocab_size = 256;
  int max_positions = 4608;
  int visual_alphabet = 16;
  int ffn_dim = 128;
  double rope_base = 1.0e6;

  void validate() const;
  LayerShape layer_shape() const { return {hidden_dim, num_heads, ffn_dim, rope_base}; }
  // Level of the trace used for the visual bridge states (half depth).
  int mid_level() const { return num_layers / 2; }
  // Level holding the output of layer M-1, the draft's fused hidden state.
  int penult_level() const { return num_layers - 1; }
  bool operator==(const ModelConfig&) const = default;
};

enum class Modality : std::uint8_t { visual, text };

// One contiguous visual block followed by text tokens.
struct TokenSequence {
  Matrix visual;             // L_vis x d embeddings
  std::vector<int> symbols;  // ground-truth symbol per visual row
  std::vector<int> text;

  std::size_t visual_len() const { return visual.rows(); }
  std::size_t text_len() const { return text.size(); }
  std::size_t size() const { return visual_len() + text_len(); }
  Modality modality(std::size_t i) const { return i < visual_len() ? Modality::visual : Modality::text; }
  void validate(const ModelConfig& cfg) const;
};

// states[0] is the embedded input, states[l] the output of layer l.
struct LayerTrace {
  std::vector<Matrix> states;
};

class TargetKVCache {
 public:
  TargetKVCache() = default;
  TargetKVCache(const ModelConfig& cfg, std::size_t capacity);

  std::size_t length() const { return length_; }
  std::size_t provisional() const { return provisional_; }
  std::size_t visual_len() const { return visual_len_; }
  const std::vector<Modality>& tags() const { return tags_; }
  const KVStore& layer(std::size_t l) const { return layers_[l]; }
  std::size_t num_layers() const { return layers_.size(); }

  // Entrywise max difference over committed slots of every layer.
  double max_abs_diff(const TargetKVCache& other) const;

 private:
  friend class TargetModel;
  std::vector<KVStore> layers_;
  std::size_t length_ = 0;
  std::size_t provisional_ = 0;
  std::size_t visual_len_ = 0;
  std::vector<Modality> tags_;
  std::vector<unsigned char> prov_mask_;  // provisional_ x provisional_ ancestor mask
};

struct PrefillOptions {
  // Layers with index >= this (0-based) hide visual keys from text queries.
  int truncate_visual_from = std::numeric_limits<int>::max();
  bool keep_trace = true;
  // Observer invoked per layer: (layer, row, keys, probs).
  std::function<bool(int layer, std::size_t row)> observe_wants;
  std::function<void(int layer, std::size_t row, const KeySet& keys, const std::vector<double>& probs)> observe;
};

struct PrefillResult {
  Matrix logits;  // L x V
  LayerTrace trace;
  TargetKVCache cache;
};

struct VerifyResult {
  Matrix logits;   // n x V
  Matrix penult;   // n x d, trace level M-1 of each verified token
};

class TargetModel {
 public:
  TargetModel() = default;
  static TargetModel random(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  PrefillResult prefill(const TokenSequence& seq, const PrefillOptions& opts = {}) const;
  // Logits with text queries masked off visual keys from layer x onward.
  Matrix truncate_visual_from_layer(const TokenSequence& seq, int x) const;

  std::vector<float> decode_step(TargetKVCache& cache, int token, std::vector<float>* penult = nullptr) const;

  // Scores a token forest in one pass. ancestor_mask is n x n row-major with
  // mask[i][j] set iff j == i or j is an ancestor of i; ancestors precede
  // descendants. Entries are kept provisionally until commit_prefix.
  VerifyResult verify_batch(TargetKVCache& cache, std::span<const int> tokens,
                            std::span<const unsigned char> ancestor_mask, std::span<const int> positions) const;
  // Keeps the provisional entries on a root-to-node path and drops the rest.
  void commit_prefix(TargetKVCache& cache, std::span<const std::size_t> keep) const;

  Matrix embed(const TokenSequence& seq) const;
  std::span<const float> token_embedding(int token) const;
  void head(std::span<const float> x, std::span<float> logits, CostMeter* cost = nullptr) const;

  // Differentiable forward over a whole sequence; returns L x V logits.
  // Positions default to 0..L-1.
  ag::Var graph(const TokenSequence& seq, ParamBinding& binding, bool trainable = true,
                std::span<const int> positions = {});

  Matrix embedding;  // V x d
  std::vector<LayerWeights> layers;
  Matrix final_norm;  // 1 x d
  Matrix lm_head;     // d x V

 private:
  explicit TargetModel(const ModelConfig& cfg) : cfg_(cfg) {}
  friend TargetModel make_target(const ModelConfig& cfg);
  ModelConfig cfg_;
};

// Empty model with the given shape; weights are filled by a loader.
TargetModel make_target(const ModelConfig& cfg);

struct StateSplit {
  Matrix h_vis_mid;     // L_vis x d
  Matrix h_txt_penult;  // L_txt x d
};
StateSplit extract_states(const LayerTrace& trace, const TokenSequence& seq, const ModelConfig& cfg);

}  // namespace sparrow
