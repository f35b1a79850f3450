// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sparrow/draft.hpp"
#include "sparrow/model.hpp"
#include "sparrow/specdec.hpp"
#include "sparrow/workload.hpp"

namespace sparrow {

enum class Method { sparrow, full_visual_draft, pruned_draft, vanilla };
std::string to_string(Method m);
Method parse_method(const std::string& s);  // accepts "baseline" for full_visual_draft

struct EngineConfig {
  TreeConfig tree;
  double temperature = 0.0;
  int max_tokens = 48;
  int stop_token = -1;
  int reps = 5;     // timed repetitions per prompt; the median is reported
  int warmup = 1;   // untimed runs per prompt before the timed ones
  double prune_fraction = 0.5;
  PruneRanking ranking = PruneRanking::last_instruction;
  std::uint64_t seed = 0;
};

struct RunRecord {
  Method method = Method::sparrow;
  int visual_len = 0;
  std::size_t prompt_index = 0;
  std::vector<int> tokens;
  DecodeStats stats;  // counters from the run, times are medians over reps
};

struct MethodSummary {
  Method method = Method::sparrow;
  int visual_len = 0;
  // raw counters
  std::size_t prompts = 0;
  std::size_t generated_tokens = 0;
  std::size_t target_calls = 0;
  double prefill_time = 0.0;
  double decode_time = 0.0;
  double wall_time = 0.0;
  // derived
  double tau = 0.0;
  double prefill_ratio = 0.0;
  double latency_per_step = 0.0;  // decode time per decode-phase target call
  double dsr = 0.0;
  double esr = 0.0;
};

// Fills the derived fields from the raw counters; speedups need the vanilla row.
void derive_summary(MethodSummary& s, const MethodSummary* vanilla);

struct BenchmarkReport {
  std::vector<RunRecord> runs;
  std::vector<MethodSummary> summary;
};

BenchmarkReport run_benchmark(const TargetModel& target, const DraftModel* draft, const std::vector<Prompt>& prompts,
                              int visual_len, const std::vector<Method>& methods, const EngineConfig& cfg);

// ---- analysis experiments ---------------------------------------------------

struct TruncationPoint {
  int layer_x = 0;
  AccuracyResult result;
};
std::vector<TruncationPoint> layer_truncation_experiment(const TargetModel& target, const std::vector<Prompt>& prompts);

// Mean over prompts of the attention mass the last prompt token puts on
// visual and on text keys, per layer and head.
struct AttentionFlow {
  int layers = 0;
  int heads = 0;
  std::vector<double> visual;  // layers x heads
  std::vector<double> text;    // layers x heads
};
AttentionFlow attention_flow_experiment(const TargetModel& target, const std::vector<Prompt>& prompts);

// Mean cosine similarity between trace level l and level 0, by modality (M + 1 levels).
struct RetentionCurves {
  std::vector<double> visual;
  std::vector<double> text;
};
RetentionCurves retention_experiment(const TargetModel& target, const std::vector<Prompt>& prompts);

struct PruningPoint {
  double fraction = 0.0;
  double tau = 0.0;
  std::size_t generated_tokens = 0;
  std::size_t target_calls = 0;
};
std::vector<PruningPoint> pruning_sweep(const TargetModel& target, const DraftModel& draft,
                                        const std::vector<Prompt>& prompts, const std::vector<double>& fractions,
                                        const EngineConfig& cfg);

// ---- output -----------------------------------------------------------------

std::string run_record_json(const RunRecord& r);
std::string summary_json(const MethodSummary& s);

// method,visual_len,tau,generated_tokens,target_calls
void write_fig1a_csv(const std::filesystem::path& path, const std::vector<MethodSummary>& rows);
// method,visual_len,prompts,generated_tokens,target_calls,prefill_time_s,decode_time_s,wall_time_s,
// tau,prefill_ratio,latency_per_step_s,dsr,esr
void write_table5_csv(const std::filesystem::path& path, const std::vector<MethodSummary>& rows);
// layer_x,accuracy,correct,total
void write_fig3a_csv(const std::filesystem::path& path, const std::vector<TruncationPoint>& pts);
// layer,head,visual_attention,text_attention
void write_fig3b_csv(const std::filesystem::path& path, const AttentionFlow& flow);
// layer,visual_retention,text_retention
void write_retention_csv(const std::filesystem::path& path, const RetentionCurves& c);
// fraction,tau,generated_tokens,target_calls
void write_pruning_csv(const std::filesystem::path& path, const std::vector<PruningPoint>& pts);

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

}  // namespace sparrow
