// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "sparrow/draft.hpp"
#include "sparrow/model.hpp"
#include "sparrow/optim.hpp"
#include "sparrow/workload.hpp"

namespace sparrow {

// ---- target pretraining ----------------------------------------------------

struct TargetTrainConfig {
  int steps = 2400;
  int batch = 8;
  double lr = 3e-3;
  int warmup = 40;
  int min_visual = 16;
  int max_visual = 96;
  int min_queries = 1;
  int max_queries = 4;
  // Half the sequences space their visual rows at a stride drawn from
  // [1, max_visual_stride], so short blocks cover long query-to-row distances.
  int max_visual_stride = 48;
  std::uint64_t seed = 1;
  std::uint64_t vocab_seed = kDefaultVocabSeed;
};

struct TargetLogEntry {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

// Sequences (with reference continuation) and per-row targets for one batch.
struct TargetBatch {
  std::vector<TokenSequence> seqs;
  std::vector<std::vector<int>> targets;
  std::vector<std::vector<int>> positions;
};
TargetBatch sample_target_batch(const TargetTrainConfig& tc, const ModelConfig& cfg, const VisualTables& tables,
                                std::uint64_t step);

// Mean next-token cross-entropy over reference rows of the batch.
ag::Var target_batch_loss(TargetModel& model, const TargetBatch& batch, ParamBinding& binding);

double cosine_lr(double base, int step, int warmup, int total);

TargetModel pretrain_target(const ModelConfig& cfg, const TargetTrainConfig& tc,
                            const std::function<void(const TargetLogEntry&)>& log = {});

// ---- draft training ----------------------------------------------------------

struct TrainExample {
  Matrix h_vis_mid;       // L_vis x d, trace level M/2 at visual rows
  Matrix visual_raw;      // L_vis x d, input embeddings of the visual rows
  Matrix e_txt;           // L_txt x d
  Matrix h_txt_penult;    // L_txt x d, trace level M-1 at text rows (unshifted)
  Matrix teacher_probs;   // L_txt x V, row t scores text token t+1
  Matrix teacher_states;  // L_txt x d, regression target of draft row t
};

std::vector<TrainExample> teacher_trace(const std::vector<TokenSequence>& seqs, const TargetModel& target);

enum class VisualSource { mid_states, zeros, raw };
std::string to_string(VisualSource v);
VisualSource parse_visual_source(const std::string& s);

struct LossReport {
  double pass1_token = 0.0, pass1_state = 0.0, pass2_token = 0.0, pass2_state = 0.0;
  std::vector<double> token, state;  // every pass
  double total = 0.0;
};

struct MtpOptions {
  double alpha = 1.0;
  double beta = 1.0;
  int depth = 2;
  VisualSource visual = VisualSource::mid_states;
};

// alpha * (sum of token losses) + beta * (sum of state losses)
double decomposed_total(const LossReport& r, const MtpOptions& opts);

struct MtpLoss {
  ag::Var total;
  LossReport report;
};

// Pass 1 fuses target states; each later pass fuses the previous pass's
// shifted draft outputs, reusing the same visual block.
MtpLoss mtp_joint_loss_graph(const TrainExample& ex, const DraftVars& vars, const LayerShape& shape,
                             const MtpOptions& opts);
LossReport mtp_joint_loss(const TrainExample& ex, DraftModel& draft, const MtpOptions& opts = {});

struct DraftTrainConfig {
  int stage1_epochs = 3;
  int stage2_epochs = 3;
  int examples = 2000;
  int batch = 16;
  double lr = 2e-3;
  int warmup = 20;
  MtpOptions mtp;
  int min_visual = 16;
  int max_visual = 96;
  int min_queries = 1;
  int max_queries = 4;
  std::uint64_t seed = 1;
  std::uint64_t vocab_seed = kDefaultVocabSeed;
};

struct DraftLogEntry {
  int stage = 0;
  int epoch = 0;
  int step = 0;
  LossReport loss;
};

// Training sequences of one stage: stage 1 is text only, stage 2 multimodal.
std::vector<TokenSequence> draft_training_sequences(const DraftTrainConfig& tc, const ModelConfig& cfg, int stage);

DraftModel train_draft_two_stage(const TargetModel& target, const DraftTrainConfig& tc,
                                 const std::function<void(const DraftLogEntry&)>& log = {});

}  // namespace sparrow
