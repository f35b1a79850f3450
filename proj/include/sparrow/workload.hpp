// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sparrow/model.hpp"

namespace sparrow {

// Token layout of the grounded recall task:
//   [0, A)            visual symbols (also the answer tokens)
//   [A, A + slots)    slot names used in queries
//   bos, query, answer, eos
//   two phrase words per symbol after that
struct TaskVocab {
  static constexpr int kSlots = 16;
  int alphabet = 0;
  int bos = 0, query = 0, answer = 0, eos = 0;
  int word_base = 0;

  explicit TaskVocab(const ModelConfig& cfg);
  int slot_token(int slot) const { return alphabet + slot; }
  int word_token(int symbol, int which) const { return word_base + 2 * symbol + which; }
  bool is_symbol(int token) const { return token >= 0 && token < alphabet; }
};

// Fixed embedding tables the visual block is built from; shared by training and benchmarks.
struct VisualTables {
  Matrix symbol;  // A x d
  Matrix slot;    // slots x d
  double jitter = 0.1;
};

inline constexpr std::uint64_t kDefaultVocabSeed = 0x5350524f57ULL;
VisualTables make_visual_tables(const ModelConfig& cfg, std::uint64_t vocab_seed = kDefaultVocabSeed);

enum class WorkloadKind { random_model, grounded_task };

struct WorkloadConfig {
  WorkloadKind kind = WorkloadKind::grounded_task;
  int visual_len = 64;
  int queries = 4;      // grounded: number of slots asked about
  int text_len = 8;     // random_model: prompt text length
  int num_prompts = 8;
  std::uint64_t seed = 1;
};

struct Prompt {
  TokenSequence seq;               // visual block + prompt text
  std::vector<int> reference;      // expected continuation (ends with eos for grounded prompts)
  std::vector<int> answers;        // queried symbols in order
  std::vector<std::size_t> answer_index;  // index into reference of each answer token
};

std::vector<Prompt> gen_workload(const WorkloadConfig& wc, const ModelConfig& cfg, const VisualTables& tables);

// Prompt text followed by its reference continuation (teacher forcing input).
TokenSequence with_reference(const Prompt& p);

struct AccuracyResult {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
};

// Teacher-forced recall accuracy: at each position whose next reference token
// is an answer, the argmax over the symbol alphabet must equal the answer.
// Text queries stop seeing visual keys from layer `truncate_from` on.
AccuracyResult grounded_accuracy(const TargetModel& target, const std::vector<Prompt>& prompts, int truncate_from);

// Row index (in the full teacher-forced sequence) whose logits predict reference[k].
std::size_t reference_row(const Prompt& p, std::size_t k);

WorkloadKind parse_workload_kind(const std::string& s);
std::string to_string(WorkloadKind k);

}  // namespace sparrow
