// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sparrow/draft.hpp"
#include "sparrow/model.hpp"

namespace sparrow {

// Draft budget written as total-depth-width, e.g. "30-4-8".
struct TreeConfig {
  int total_tokens = 30;
  int depth = 4;
  int width = 8;

  void validate() const;
  static TreeConfig parse(const std::string& s);
  std::string str() const;
  bool operator==(const TreeConfig&) const = default;
};

struct TreeNode {
  int token = 0;
  int parent = -1;  // -1: child of the root
  int depth = 1;
  double q = 0.0;   // draft probability of token under the parent's distribution
  double cum_logp = 0.0;
};

// Candidate tokens below a root (the last committed token, not part of `nodes`).
struct DraftTree {
  int root_token = 0;
  std::vector<TreeNode> nodes;

  // children(-1) lists root children; order is by descending q, then node id.
  std::vector<std::size_t> children(int node) const;
  int max_depth() const;
};

DraftTree grow_tree(DraftSession& session, int root_token, const TreeConfig& cfg);

struct LinearTree {
  std::vector<int> tokens;              // root first, then nodes in order
  std::vector<int> positions;
  std::vector<unsigned char> ancestor_mask;  // (n+1) x (n+1)
};
LinearTree linearize_tree(const DraftTree& tree, std::size_t committed_len);

struct VerificationResult {
  std::vector<std::size_t> accepted_path;  // node ids, root-descending
  int bonus_token = 0;
  // Per visited node: (node id, accepted?)
  std::vector<std::pair<std::size_t, bool>> decisions;
  std::size_t accepted_len() const { return accepted_path.size(); }
};

// logits row 0 scores the root, row i + 1 scores node i.
VerificationResult verify_greedy(const DraftTree& tree, const Matrix& logits);
// probs rows laid out like the logits above.
VerificationResult verify_sampling(const DraftTree& tree, const std::vector<std::vector<double>>& probs, Rng& rng);

enum class PruneRanking { last_instruction, all_text };
std::string to_string(PruneRanking r);
PruneRanking parse_prune_ranking(const std::string& s);

struct DecodeOptions {
  TreeConfig tree;
  double temperature = 0.0;
  int max_tokens = 64;
  int stop_token = -1;
  DraftInputMode mode = DraftInputMode::vata;
  double prune_fraction = 1.0;  // pruned mode: share of visual rows kept
  PruneRanking ranking = PruneRanking::last_instruction;
  std::uint64_t seed = 0;
};

struct DecodeStats {
  std::size_t generated_tokens = 0;
  std::size_t target_calls = 0;
  std::size_t draft_steps = 0;
  double wall_time = 0.0;
  double decode_time = 0.0;
  double prefill_time = 0.0;
  std::uint64_t draft_multiplies = 0;
  std::size_t draft_cache_rows = 0;
  double tau() const;
};

struct DecodeResult {
  std::vector<int> tokens;
  DecodeStats stats;
  std::vector<std::size_t> accept_lengths;  // accepted draft tokens per verification
};

DecodeResult decode(const TargetModel& target, const DraftModel& draft, const TokenSequence& prompt,
                    const DecodeOptions& opts);
DecodeResult vanilla_decode(const TargetModel& target, const TokenSequence& prompt, double temperature, int max_tokens,
                            int stop_token, std::uint64_t seed = 0);

// Visual rows the pruned baseline keeps, in original order.
std::vector<std::size_t> select_visual_rows(const TargetModel& target, const TokenSequence& prompt, double fraction,
                                            PruneRanking ranking);

// {prompt_id, tokens, tau, target_calls, prefill_time_s, decode_time_s, wall_time_s}
std::string decode_record_json(const std::string& prompt_id, const DecodeResult& r);

}  // namespace sparrow
