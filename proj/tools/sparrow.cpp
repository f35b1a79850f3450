// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

// sparrow: train the toy target and draft, decode, benchmark and analyze.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sparrow/bench.hpp"
#include "sparrow/checkpoint.hpp"
#include "sparrow/config.hpp"
#include "sparrow/draft.hpp"
#include "sparrow/specdec.hpp"
#include "sparrow/train.hpp"
#include "sparrow/workload.hpp"

namespace fs = std::filesystem;
using namespace sparrow;

namespace {

constexpr int kOk = 0;
constexpr int kRuntimeError = 1;
constexpr int kUsageError = 2;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  std::vector<std::string> overrides;
};

struct Paths {
  std::string target;
  std::string draft;
};

// Flags that are shorthands for config keys are collected as overrides so
// that they beat the config file.
void add_key_flag(CLI::App* app, std::vector<std::string>& overrides, const std::string& flag, const std::string& key,
                  const std::string& help) {
  app->add_option_function<std::string>(
      flag, [&overrides, key](const std::string& v) { overrides.push_back(key + "=" + v); }, help);
}

RunConfig load_config(const Common& c) {
  KeyValues kv;
  if (!c.config_path.empty()) kv = load_key_values(c.config_path);
  apply_overrides(kv, c.overrides);
  return resolve_config(kv, c.seed);
}

fs::path prepare_out_dir(const Common& c, const RunConfig& cfg) {
  const fs::path dir(c.out_dir);
  fs::create_directories(dir);
  std::ofstream out(dir / "resolved_config.txt", std::ios::trunc);
  for (const auto& [k, v] : config_key_values(cfg)) out << k << " = " << v << '\n';
  return dir;
}

std::string path_or(const std::string& p, const fs::path& fallback) { return p.empty() ? fallback.string() : p; }

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  return out;
}

int cmd_train_target(const Common& c) {
  const RunConfig cfg = load_config(c);
  const fs::path dir = prepare_out_dir(c, cfg);
  auto log = open_out(dir / "train_target.jsonl");
  const TargetModel model = pretrain_target(cfg.model, cfg.target_train, [&](const TargetLogEntry& e) {
    nlohmann::json j{{"step", e.step}, {"loss", e.loss}, {"lr", e.lr}, {"grad_norm", e.grad_norm}};
    log << j.dump() << '\n';
    if (e.step % 100 == 0) std::fprintf(stderr, "train-target step %d loss %.4f\n", e.step, e.loss);
  });
  save_target(dir / "target.ckpt", model);
  std::fprintf(stderr, "wrote %s\n", (dir / "target.ckpt").string().c_str());
  return kOk;
}

int cmd_train_draft(const Common& c, const Paths& p) {
  const RunConfig cfg = load_config(c);
  const fs::path dir = prepare_out_dir(c, cfg);
  const TargetModel target = load_target(path_or(p.target, dir / "target.ckpt"));
  auto log = open_out(dir / "train_draft.jsonl");
  const DraftModel draft = train_draft_two_stage(target, cfg.draft_train, [&](const DraftLogEntry& e) {
    nlohmann::json j{{"stage", e.stage},
                     {"epoch", e.epoch},
                     {"step", e.step},
                     {"pass1_token", e.loss.pass1_token},
                     {"pass1_state", e.loss.pass1_state},
                     {"pass2_token", e.loss.pass2_token},
                     {"pass2_state", e.loss.pass2_state},
                     {"total", e.loss.total}};
    log << j.dump() << '\n';
    if (e.step % 50 == 0)
      std::fprintf(stderr, "train-draft stage %d epoch %d step %d loss %.4f\n", e.stage, e.epoch, e.step, e.loss.total);
  });
  save_draft(dir / "draft.ckpt", draft);
  std::fprintf(stderr, "wrote %s\n", (dir / "draft.ckpt").string().c_str());
  return kOk;
}

DecodeOptions decode_options(const RunConfig& cfg, DraftInputMode mode, std::uint64_t seed) {
  DecodeOptions o;
  o.tree = cfg.engine.tree;
  o.temperature = cfg.engine.temperature;
  o.max_tokens = cfg.engine.max_tokens;
  o.stop_token = cfg.engine.stop_token;
  o.mode = mode;
  o.prune_fraction = cfg.engine.prune_fraction;
  o.ranking = cfg.engine.ranking;
  o.seed = seed;
  return o;
}

int cmd_decode(const Common& c, const Paths& p, const std::string& prompt_file, const std::string& method_name) {
  const RunConfig cfg = load_config(c);
  Method method;
  try {
    method = parse_method(method_name);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  const fs::path dir = prepare_out_dir(c, cfg);
  const TargetModel target = load_target(path_or(p.target, dir / "target.ckpt"));
  std::optional<DraftModel> draft;
  if (method != Method::vanilla) draft = load_draft(path_or(p.draft, dir / "draft.ckpt"), target);

  std::vector<PromptRecord> prompts;
  if (!prompt_file.empty()) {
    prompts = read_prompt_file(prompt_file, target.config());
  } else {
    const auto tables = make_visual_tables(target.config(), cfg.target_train.vocab_seed);
    const auto gen = gen_workload(cfg.workload, target.config(), tables);
    for (std::size_t i = 0; i < gen.size(); ++i) prompts.push_back({std::to_string(i), gen[i].seq});
  }
  auto out = open_out(dir / "decode.jsonl");
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const std::uint64_t seed = Rng(cfg.engine.seed).fork(i).next_u64();
    DecodeResult r;
    if (method == Method::vanilla) {
      r = vanilla_decode(target, prompts[i].seq, cfg.engine.temperature, cfg.engine.max_tokens, cfg.engine.stop_token,
                         seed);
    } else {
      const DraftInputMode mode = method == Method::sparrow           ? DraftInputMode::vata
                                  : method == Method::full_visual_draft ? DraftInputMode::full_visual
                                                                        : DraftInputMode::pruned;
      r = decode(target, *draft, prompts[i].seq, decode_options(cfg, mode, seed));
    }
    out << decode_record_json(prompts[i].id, r) << '\n';
  }
  std::fprintf(stderr, "wrote %zu records to %s\n", prompts.size(), (dir / "decode.jsonl").string().c_str());
  return kOk;
}

int cmd_bench(const Common& c, const Paths& p) {
  const RunConfig cfg = load_config(c);
  const fs::path dir = prepare_out_dir(c, cfg);
  const TargetModel target = load_target(path_or(p.target, dir / "target.ckpt"));
  bool needs_draft = !cfg.prune_fractions.empty();
  for (Method m : cfg.bench_methods) needs_draft = needs_draft || m != Method::vanilla;
  std::optional<DraftModel> draft;
  if (needs_draft) draft = load_draft(path_or(p.draft, dir / "draft.ckpt"), target);

  const auto tables = make_visual_tables(target.config(), cfg.target_train.vocab_seed);
  auto jsonl = open_out(dir / "bench.jsonl");
  std::vector<MethodSummary> all, trend;
  std::vector<Prompt> longest;
  for (int lv : cfg.bench_visual_lens) {
    WorkloadConfig wc = cfg.workload;
    wc.visual_len = lv;
    const auto prompts = gen_workload(wc, target.config(), tables);
    const auto rep = run_benchmark(target, draft ? &*draft : nullptr, prompts, lv, cfg.bench_methods, cfg.engine);
    for (const auto& r : rep.runs) jsonl << "{\"record\":\"run\"," << run_record_json(r).substr(1) << '\n';
    for (const auto& s : rep.summary) {
      jsonl << "{\"record\":\"summary\"," << summary_json(s).substr(1) << '\n';
      std::fprintf(stderr, "bench L_vis %d %-18s tau %.3f dsr %.3f esr %.3f\n", lv, to_string(s.method).c_str(), s.tau,
                   s.dsr, s.esr);
      all.push_back(s);
      if (s.method != Method::vanilla) trend.push_back(s);
    }
    longest = prompts;
  }
  write_fig1a_csv(dir / "fig1a.csv", trend);
  write_table5_csv(dir / "table5.csv", all);
  if (draft && !cfg.prune_fractions.empty() && !longest.empty()) {
    const auto pts = pruning_sweep(target, *draft, longest, cfg.prune_fractions, cfg.engine);
    write_pruning_csv(dir / "pruning.csv", pts);
  }
  return kOk;
}

int cmd_analyze(const Common& c, const Paths& p) {
  const RunConfig cfg = load_config(c);
  const fs::path dir = prepare_out_dir(c, cfg);
  const TargetModel target = load_target(path_or(p.target, dir / "target.ckpt"));
  const auto tables = make_visual_tables(target.config(), cfg.target_train.vocab_seed);
  WorkloadConfig wc = cfg.workload;
  wc.kind = WorkloadKind::grounded_task;
  wc.visual_len = cfg.analyze_visual_len;
  wc.num_prompts = cfg.analyze_prompts;
  const auto prompts = gen_workload(wc, target.config(), tables);

  const auto trunc = layer_truncation_experiment(target, prompts);
  const auto flow = attention_flow_experiment(target, prompts);
  const auto ret = retention_experiment(target, prompts);
  write_fig3a_csv(dir / "fig3a.csv", trunc);
  write_fig3b_csv(dir / "fig3b.csv", flow);
  write_retention_csv(dir / "retention.csv", ret);

  auto jsonl = open_out(dir / "analysis.jsonl");
  for (const auto& t : trunc)
    jsonl << nlohmann::json{{"record", "layer_truncation"},
                            {"layer_x", t.layer_x},
                            {"accuracy", t.result.accuracy()},
                            {"correct", t.result.correct},
                            {"total", t.result.total}}
                 .dump()
          << '\n';
  for (int l = 0; l < flow.layers; ++l)
    for (int h = 0; h < flow.heads; ++h) {
      const auto cell = static_cast<std::size_t>(l * flow.heads + h);
      jsonl << nlohmann::json{{"record", "attention_flow"},
                              {"layer", l},
                              {"head", h},
                              {"visual", flow.visual[cell]},
                              {"text", flow.text[cell]}}
                   .dump()
            << '\n';
    }
  for (std::size_t l = 0; l < ret.visual.size(); ++l)
    jsonl << nlohmann::json{{"record", "retention"}, {"layer", l}, {"visual", ret.visual[l]}, {"text", ret.text[l]}}
                 .dump()
          << '\n';
  std::fprintf(stderr, "native accuracy %.4f, x=0 accuracy %.4f\n", trunc.back().result.accuracy(),
               trunc.front().result.accuracy());
  return kOk;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "Flat key = value config file")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "Seed for every component (falls back to SPARROW_SEED)");
  app->add_option("--out-dir", c.out_dir, "Directory for all outputs")->capture_default_str();
  app->add_option("--set", c.overrides, "Config override key=value (repeatable)");
}

void add_checkpoints(CLI::App* app, Paths& p, bool draft) {
  app->add_option("--target", p.target, "Target checkpoint (default: <out-dir>/target.ckpt)");
  if (draft) app->add_option("--draft", p.draft, "Draft checkpoint (default: <out-dir>/draft.ckpt)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparrow speculative decoding toolkit"};
  app.require_subcommand(1);
  Common common;
  Paths paths;
  std::string prompt_file, method = "sparrow";

  auto* train_target = app.add_subcommand("train-target", "Pretrain the toy target model");
  add_common(train_target, common);
  add_key_flag(train_target, common.overrides, "--steps", "target.steps", "Optimizer steps");

  auto* train_draft = app.add_subcommand("train-draft", "Two-stage draft training");
  add_common(train_draft, common);
  add_checkpoints(train_draft, paths, false);
  add_key_flag(train_draft, common.overrides, "--stage1-epochs", "draft.stage1_epochs", "Text-only stage epochs");
  add_key_flag(train_draft, common.overrides, "--stage2-epochs", "draft.stage2_epochs", "Multimodal stage epochs");
  add_key_flag(train_draft, common.overrides, "--alpha", "draft.alpha", "Token loss weight");
  add_key_flag(train_draft, common.overrides, "--beta", "draft.beta", "State loss weight");
  add_key_flag(train_draft, common.overrides, "--mtp-depth", "draft.mtp_depth", "Recursive passes per example");

  auto* dec = app.add_subcommand("decode", "Decode prompts and write JSON lines");
  add_common(dec, common);
  add_checkpoints(dec, paths, true);
  dec->add_option("--prompt-file", prompt_file, "JSONL prompts (default: generated workload)")->check(CLI::ExistingFile);
  add_key_flag(dec, common.overrides, "--tree", "decode.tree", "Draft tree as total-depth-width");
  add_key_flag(dec, common.overrides, "--temperature", "decode.temperature", "Sampling temperature (0: greedy)");
  add_key_flag(dec, common.overrides, "--max-tokens", "decode.max_tokens", "Generation budget per prompt");
  dec->add_option("--method", method, "sparrow, baseline or vanilla")
      ->check(CLI::IsMember({"sparrow", "baseline", "vanilla"}))
      ->capture_default_str();

  auto* bench = app.add_subcommand("bench", "Benchmark methods over visual lengths");
  add_common(bench, common);
  add_checkpoints(bench, paths, true);
  add_key_flag(bench, common.overrides, "--tree", "decode.tree", "Draft tree as total-depth-width");
  add_key_flag(bench, common.overrides, "--temperature", "decode.temperature", "Sampling temperature (0: greedy)");

  auto* analyze = app.add_subcommand("analyze", "Layer truncation, attention flow and retention");
  add_common(analyze, common);
  add_checkpoints(analyze, paths, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageError;
  }

  try {
    if (train_target->parsed()) return cmd_train_target(common);
    if (train_draft->parsed()) return cmd_train_draft(common, paths);
    if (dec->parsed()) return cmd_decode(common, paths, prompt_file, method);
    if (bench->parsed()) return cmd_bench(common, paths);
    if (analyze->parsed()) return cmd_analyze(common, paths);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsageError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntimeError;
  }
  return kUsageError;
}
