// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sparrow/autograd.hpp"
#include "sparrow/layers.hpp"
#include "sparrow/model.hpp"

namespace sparrow {

enum class DraftMode { training_full_causal, inference_vata };

// Single decoder layer fed by an FC fusion of (token embedding, hidden state).
// Embedding table, final norm and LM head are borrowed from the target.
class DraftModel {
 public:
  DraftModel() = default;
  static DraftModel random(const TargetModel& target, std::uint64_t seed);

  const TargetModel& target() const { return *target_; }
  LayerShape shape() const { return target_->config().layer_shape(); }
  int hidden() const { return target_->config().hidden_dim; }

  Matrix fc;       // 2d x d; input rows 0..d-1 take the embedding, d..2d-1 the hidden state
  Matrix fc_bias;  // 1 x d
  LayerWeights layer;

 private:
  explicit DraftModel(const TargetModel& t) : target_(&t) {}
  friend DraftModel make_draft(const TargetModel& target);
  const TargetModel* target_ = nullptr;
};

DraftModel make_draft(const TargetModel& target);

void save_draft(const std::filesystem::path& path, const DraftModel& draft);
DraftModel load_draft(const std::filesystem::path& path, const TargetModel& target);

// z = e W[0:d] + h W[d:2d] + b
std::vector<float> hsr_fuse(std::span<const float> e, std::span<const float> h, const Matrix& fc,
                            const Matrix& fc_bias, CostMeter* cost = nullptr);

// Row t becomes row t-1; row 0 is zero (the first text token has no text predecessor).
Matrix shift_states(const Matrix& states);

struct FusedInput {
  Matrix rows;
  std::vector<Modality> tags;
  std::vector<int> positions;
  std::size_t visual_len() const;
  std::size_t text_len() const { return rows.rows() - visual_len(); }
};

// [h_vis_mid ; FC(e_t, h_prev_t)] with h_prev already shift-aligned to e.
// Visual rows take positions 0..L_vis-1 and text rows continue from L_vis.
FusedInput build_init_input(const Matrix& h_vis_mid, const Matrix& e_txt, const Matrix& h_prev, const DraftModel& d);
// Same layout with the draft's own shifted outputs in place of target states.
FusedInput build_recursive_input(const Matrix& h_vis_mid, const Matrix& e_txt, const Matrix& h_hat_prev,
                                 const DraftModel& d);
// Text rows only with compacted positions 0..L_txt-1.
FusedInput build_text_input(const Matrix& e_txt, const Matrix& h_prev, const DraftModel& d);

struct DraftOutput {
  Matrix hidden;  // all rows
  Matrix logits;  // text rows
};

// Causal single-layer pass. Inference mode refuses visual rows.
DraftOutput draft_forward(const FusedInput& input, DraftMode mode, const DraftModel& d, CostMeter* cost = nullptr);

// Multi-head attention of one query over a text-only draft cache (all entries visible).
std::vector<float> vata_attention(std::span<const float> q, const KVStore& cache, CostMeter* cost = nullptr);

// ---- differentiable pieces used by training ---------------------------------

struct DraftVars {
  ag::Var fc, fc_bias;
  LayerVars layer;
  ag::Var final_norm, lm_head;  // frozen target head
};
DraftVars bind_draft(DraftModel& d, ParamBinding& binding);

// FC fusion of text rows: concat(e, h_prev) W + b.
ag::Var fuse_graph(const DraftVars& v, const ag::Var& e_txt, const ag::Var& h_prev);
// Causal layer over [visual ; text] rows; returns hidden of every row.
ag::Var draft_layer_graph(const DraftVars& v, const LayerShape& shape, const ag::Var& rows,
                          const std::vector<int>& positions);
ag::Var head_graph(const DraftVars& v, const ag::Var& hidden);

// ---- decoding session -------------------------------------------------------

enum class DraftInputMode { vata, full_visual, pruned };

std::string to_string(DraftInputMode m);
DraftInputMode parse_draft_input_mode(const std::string& s);

// Draft-side state of one decode: a single-layer cache over committed rows
// (text only for VATA; raw visual prefix rows for the baselines) plus the
// target hidden state of the last committed token.
class DraftSession {
 public:
  DraftSession(const DraftModel& draft, DraftInputMode mode);

  // visual_rows: prefix rows for full/pruned modes (with their original
  // positions); must be empty for VATA. text_base is the position of the first
  // text token. text: committed prompt tokens with the target's level M-1
  // states (unshifted).
  void begin(const Matrix& visual_rows, std::span<const int> visual_positions, int text_base,
             std::span<const int> text, const Matrix& text_states);

  // Root row for a new cycle: token not yet seen by the target, fused with the
  // last committed target state. Returns its hidden state; draft probabilities
  // for the next token go to `probs` (temperature 1).
  std::vector<float> root(int token, std::vector<double>& probs);

  // Rows for tree nodes at one depth. Row i fuses tokens[i] with
  // parent_hidden row i and attends to committed rows, the root, its tree
  // ancestors (node ids, top first) and itself. Node ids index tree slots.
  Matrix expand(std::span<const int> tokens, const Matrix& parent_hidden, std::span<const std::size_t> node_ids,
                const std::vector<std::vector<std::size_t>>& ancestors, Matrix* logits);

  // Accepts root + accepted tokens with their target states; tree rows are dropped.
  void commit(std::span<const int> tokens, const Matrix& target_states);

  std::size_t committed_rows() const { return committed_; }
  std::size_t text_rows() const { return committed_ - prefix_; }
  std::size_t cache_rows() const { return committed_; }
  CostMeter& cost() { return cost_; }
  const DraftModel& model() const { return draft_; }

 private:
  int text_position(std::size_t text_index) const;
  void run_rows(const Matrix& z, std::span<const int> positions, std::size_t slot0,
                const std::function<KeySet(std::size_t)>& keys);

  const DraftModel& draft_;
  DraftInputMode mode_;
  KVStore kv_;
  std::size_t prefix_ = 0;      // visual prefix rows
  std::size_t committed_ = 0;   // prefix + committed text rows
  int text_base_ = 0;           // position of text index 0
  std::vector<float> last_state_;
  bool root_ready_ = false;
  CostMeter cost_;
};

}  // namespace sparrow
