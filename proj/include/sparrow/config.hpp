// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sparrow/bench.hpp"
#include "sparrow/model.hpp"
#include "sparrow/train.hpp"
#include "sparrow/workload.hpp"

namespace sparrow {

// Bad config text, unknown key or unparsable value. The CLI maps it to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat "key = value" lines; '#' starts a comment. Later duplicates are an error.
using KeyValues = std::map<std::string, std::string>;
KeyValues parse_key_values(const std::string& text, const std::string& origin = "<config>");
KeyValues load_key_values(const std::filesystem::path& path);
// "key=value" strings; each one replaces the file value.
void apply_overrides(KeyValues& kv, const std::vector<std::string>& overrides);

struct RunConfig {
  std::uint64_t seed = 1;
  ModelConfig model;
  TargetTrainConfig target_train;
  DraftTrainConfig draft_train;
  WorkloadConfig workload;
  EngineConfig engine;
  bool stop_at_eos = true;
  std::vector<int> bench_visual_lens = {64, 512, 1536, 4096};
  std::vector<Method> bench_methods = {Method::sparrow, Method::full_visual_draft, Method::vanilla};
  std::vector<double> prune_fractions = {0.0, 0.25, 0.5, 0.75, 1.0};
  int analyze_prompts = 64;
  int analyze_visual_len = 64;
};

// Every key of RunConfig with its default rendering, in file order.
std::vector<std::pair<std::string, std::string>> default_key_values();
// Same rendering for a resolved config; parsing it back reproduces the config.
std::vector<std::pair<std::string, std::string>> config_key_values(const RunConfig& c);

// Resolves keys over the defaults. `seed` wins over a "seed" key, which wins
// over SPARROW_SEED. The seed reaches every component unless a component key
// sets its own.
RunConfig resolve_config(const KeyValues& kv, std::optional<std::uint64_t> seed);

std::optional<std::uint64_t> seed_from_env();

// Prompt files: one JSON object per line,
// {"id": str, "text": [int], "visual": [[float]], "symbols": [int]}; visual and symbols optional.
struct PromptRecord {
  std::string id;
  TokenSequence seq;
};
std::vector<PromptRecord> read_prompt_file(const std::filesystem::path& path, const ModelConfig& cfg);
void write_prompt_file(const std::filesystem::path& path, const std::vector<Prompt>& prompts);

}  // namespace sparrow
