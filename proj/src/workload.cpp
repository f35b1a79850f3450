// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#include "sparrow/workload.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace sparrow {

TaskVocab::TaskVocab(const ModelConfig& cfg) : alphabet(cfg.visual_alphabet) {
  bos = alphabet + kSlots;
  query = bos + 1;
  answer = bos + 2;
  eos = bos + 3;
  word_base = bos + 4;
  if (word_base + 2 * alphabet > cfg.vocab_size)
    throw std::invalid_argument("TaskVocab: vocab_size too small for the grounded task layout");
}

VisualTables make_visual_tables(const ModelConfig& cfg, std::uint64_t vocab_seed) {
  Rng rng(vocab_seed);
  const auto d = static_cast<std::size_t>(cfg.hidden_dim);
  VisualTables t;
  t.symbol = Matrix(static_cast<std::size_t>(cfg.visual_alphabet), d);
  t.slot = Matrix(TaskVocab::kSlots, d);
  for (float& v : t.symbol.values()) v = static_cast<float>(rng.normal());
  for (float& v : t.slot.values()) v = static_cast<float>(rng.normal());
  return t;
}

namespace {

void visual_row(std::span<float> out, const VisualTables& t, int symbol, std::span<const float> tag, Rng& rng) {
  const auto sym = t.symbol.row(static_cast<std::size_t>(symbol));
  for (std::size_t c = 0; c < out.size(); ++c)
    out[c] = static_cast<float>(static_cast<double>(sym[c]) + tag[c] + t.jitter * rng.normal());
}

Prompt grounded_prompt(const WorkloadConfig& wc, const ModelConfig& cfg, const VisualTables& t, Rng& rng) {
  const TaskVocab vocab(cfg);
  const auto d = static_cast<std::size_t>(cfg.hidden_dim);
  const int lv = wc.visual_len;
  const int placed = std::min(lv, TaskVocab::kSlots);
  if (wc.queries < 0 || wc.queries > placed)
    throw std::invalid_argument("gen_workload: queries must be within [0, min(visual_len, 16)]");
  // Slot contents and the query are drawn first so that prompts with the same
  // seed ask the same question at every visual length.
  std::vector<int> slot_symbol(TaskVocab::kSlots);
  for (int& sym : slot_symbol) sym = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.visual_alphabet)));
  const int first = static_cast<int>(rng.below(static_cast<std::uint64_t>(placed - wc.queries + 1)));
  Prompt p;
  p.seq.visual = Matrix(static_cast<std::size_t>(lv), d);
  p.seq.symbols.resize(static_cast<std::size_t>(lv));
  std::vector<int> order(static_cast<std::size_t>(lv));
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<float> noise_tag(d);
  for (int i = 0; i < lv; ++i) {
    const auto row = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
    if (i < placed) {
      const int sym = slot_symbol[static_cast<std::size_t>(i)];
      p.seq.symbols[row] = sym;
      visual_row(p.seq.visual.row(row), t, sym, t.slot.row(static_cast<std::size_t>(i)), rng);
    } else {
      const int sym = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.visual_alphabet)));
      p.seq.symbols[row] = sym;
      for (float& v : noise_tag) v = static_cast<float>(rng.normal());
      visual_row(p.seq.visual.row(row), t, sym, noise_tag, rng);
    }
  }
  p.seq.text = {vocab.bos, vocab.query};
  for (int j = 0; j < wc.queries; ++j) p.seq.text.push_back(vocab.slot_token(first + j));
  p.seq.text.push_back(vocab.answer);
  for (int j = 0; j < wc.queries; ++j) {
    const int sym = slot_symbol[static_cast<std::size_t>(first + j)];
    p.reference.push_back(vocab.slot_token(first + j));
    p.answer_index.push_back(p.reference.size());
    p.reference.push_back(sym);
    p.reference.push_back(vocab.word_token(sym, 0));
    p.reference.push_back(vocab.word_token(sym, 1));
    p.answers.push_back(sym);
  }
  if (wc.queries > 0) p.reference.push_back(vocab.eos);
  return p;
}

Prompt random_prompt(const WorkloadConfig& wc, const ModelConfig& cfg, Rng& rng) {
  const auto d = static_cast<std::size_t>(cfg.hidden_dim);
  Prompt p;
  p.seq.visual = Matrix(static_cast<std::size_t>(wc.visual_len), d);
  for (float& v : p.seq.visual.values()) v = static_cast<float>(rng.normal());
  for (int i = 0; i < wc.visual_len; ++i)
    p.seq.symbols.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.visual_alphabet))));
  for (int i = 0; i < wc.text_len; ++i)
    p.seq.text.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.vocab_size))));
  return p;
}

}  // namespace

std::vector<Prompt> gen_workload(const WorkloadConfig& wc, const ModelConfig& cfg, const VisualTables& tables) {
  if (wc.visual_len < 0 || wc.num_prompts < 0 || wc.text_len < 0)
    throw std::invalid_argument("gen_workload: negative size");
  const std::size_t text = wc.kind == WorkloadKind::grounded_task
                               ? static_cast<std::size_t>(3 + wc.queries + 4 * wc.queries + 1)
                               : static_cast<std::size_t>(wc.text_len);
  if (static_cast<std::size_t>(wc.visual_len) + text > static_cast<std::size_t>(cfg.max_positions))
    throw std::invalid_argument("gen_workload: visual_len + text length exceeds max_positions");
  if (wc.kind == WorkloadKind::random_model && wc.text_len == 0)
    throw std::invalid_argument("gen_workload: random_model prompts need text");
  const Rng root(wc.seed);
  std::vector<Prompt> out;
  out.reserve(static_cast<std::size_t>(wc.num_prompts));
  for (int i = 0; i < wc.num_prompts; ++i) {
    Rng rng = root.fork(static_cast<std::uint64_t>(i));
    out.push_back(wc.kind == WorkloadKind::grounded_task ? grounded_prompt(wc, cfg, tables, rng)
                                                         : random_prompt(wc, cfg, rng));
  }
  return out;
}

TokenSequence with_reference(const Prompt& p) {
  TokenSequence s = p.seq;
  s.text.insert(s.text.end(), p.reference.begin(), p.reference.end());
  return s;
}

std::size_t reference_row(const Prompt& p, std::size_t k) { return p.seq.size() + k - 1; }

AccuracyResult grounded_accuracy(const TargetModel& target, const std::vector<Prompt>& prompts, int truncate_from) {
  AccuracyResult r;
  const int alphabet = target.config().visual_alphabet;
  for (const auto& p : prompts) {
    if (p.answers.empty()) continue;
    const Matrix logits = target.truncate_visual_from_layer(with_reference(p), truncate_from);
    for (std::size_t i = 0; i < p.answers.size(); ++i) {
      const auto row = logits.row(reference_row(p, p.answer_index[i]));
      const auto best = argmax(row.first(static_cast<std::size_t>(alphabet)));
      r.correct += static_cast<int>(best) == p.answers[i] ? 1 : 0;
      ++r.total;
    }
  }
  return r;
}

WorkloadKind parse_workload_kind(const std::string& s) {
  if (s == "grounded_task" || s == "grounded") return WorkloadKind::grounded_task;
  if (s == "random_model" || s == "random") return WorkloadKind::random_model;
  throw std::invalid_argument("unknown workload kind '" + s + "'");
}

std::string to_string(WorkloadKind k) { return k == WorkloadKind::grounded_task ? "grounded_task" : "random_model"; }

}  // namespace sparrow
