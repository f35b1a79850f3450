// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#include "sparrow/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace sparrow {

void ModelConfig::validate() const {
  if (num_layers < 4) throw std::invalid_argument("ModelConfig: num_layers must be >= 4");
  if (hidden_dim <= 0 || num_heads <= 0 || hidden_dim % num_heads != 0)
    throw std::invalid_argument("ModelConfig: hidden_dim must be a positive multiple of num_heads");
  if ((hidden_dim / num_heads) % 2 != 0) throw std::invalid_argument("ModelConfig: head dim must be even");
  if (vocab_size <= 0 || max_positions <= 0 || visual_alphabet <= 0 || ffn_dim <= 0)
    throw std::invalid_argument("ModelConfig: sizes must be positive");
  if (visual_alphabet > vocab_size) throw std::invalid_argument("ModelConfig: visual_alphabet exceeds vocab");
  if (!(rope_base > 1.0)) throw std::invalid_argument("ModelConfig: rope_base must exceed 1");
}

void TokenSequence::validate(const ModelConfig& cfg) const {
  if (visual.rows() > 0 && visual.cols() != static_cast<std::size_t>(cfg.hidden_dim))
    throw std::invalid_argument("TokenSequence: visual embedding width != hidden_dim");
  if (symbols.size() != visual.rows()) throw std::invalid_argument("TokenSequence: one symbol per visual row required");
  for (int s : symbols)
    if (s < 0 || s >= cfg.visual_alphabet) throw std::invalid_argument("TokenSequence: symbol id out of range");
  for (int t : text)
    if (t < 0 || t >= cfg.vocab_size) throw std::invalid_argument("TokenSequence: token id out of range");
  if (!visual.all_finite()) throw std::invalid_argument("TokenSequence: non-finite visual embedding");
}

TargetKVCache::TargetKVCache(const ModelConfig& cfg, std::size_t capacity) {
  layers_.reserve(static_cast<std::size_t>(cfg.num_layers));
  for (int l = 0; l < cfg.num_layers; ++l)
    layers_.emplace_back(cfg.num_heads, cfg.hidden_dim / cfg.num_heads, capacity);
}

double TargetKVCache::max_abs_diff(const TargetKVCache& other) const {
  if (length_ != other.length_ || layers_.size() != other.layers_.size())
    throw std::invalid_argument("TargetKVCache::max_abs_diff: caches differ in shape");
  double m = 0.0;
  for (std::size_t l = 0; l < layers_.size(); ++l) m = std::max(m, layers_[l].max_abs_diff(other.layers_[l], length_));
  return m;
}

TargetModel make_target(const ModelConfig& cfg) {
  cfg.validate();
  TargetModel m(cfg);
  const auto d = static_cast<std::size_t>(cfg.hidden_dim);
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  m.embedding = Matrix(v, d);
  m.layers.resize(static_cast<std::size_t>(cfg.num_layers));
  const LayerShape shape = cfg.layer_shape();
  for (auto& w : m.layers) {
    w.attn_norm = Matrix(1, d, 1.0f);
    w.wq = Matrix(d, d);
    w.wk = Matrix(d, d);
    w.wv = Matrix(d, d);
    w.wo = Matrix(d, d);
    w.mlp_norm = Matrix(1, d, 1.0f);
    w.w_up = Matrix(d, static_cast<std::size_t>(shape.ffn));
    w.w_down = Matrix(static_cast<std::size_t>(shape.ffn), d);
  }
  m.final_norm = Matrix(1, d, 1.0f);
  m.lm_head = Matrix(d, v);
  return m;
}

TargetModel TargetModel::random(const ModelConfig& cfg, std::uint64_t seed) {
  TargetModel m = make_target(cfg);
  Rng rng(seed);
  for (float& x : m.embedding.values()) x = static_cast<float>(rng.normal());
  const float out_scale = static_cast<float>(1.0 / std::sqrt(2.0 * cfg.num_layers));
  for (auto& w : m.layers) w = LayerWeights::random(cfg.layer_shape(), rng, out_scale);
  const double s = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
  for (float& x : m.lm_head.values()) x = static_cast<float>(rng.normal() * s);
  return m;
}

std::span<const float> TargetModel::token_embedding(int token) const {
  if (token < 0 || token >= cfg_.vocab_size) throw std::out_of_range("token id " + std::to_string(token));
  return embedding.row(static_cast<std::size_t>(token));
}

Matrix TargetModel::embed(const TokenSequence& seq) const {
  Matrix x(seq.size(), static_cast<std::size_t>(cfg_.hidden_dim));
  for (std::size_t i = 0; i < seq.visual_len(); ++i) std::ranges::copy(seq.visual.row(i), x.row(i).begin());
  for (std::size_t t = 0; t < seq.text_len(); ++t)
    std::ranges::copy(token_embedding(seq.text[t]), x.row(seq.visual_len() + t).begin());
  return x;
}

void TargetModel::head(std::span<const float> x, std::span<float> logits, CostMeter* cost) const {
  head_row(x, final_norm, lm_head, logits, cost);
}

namespace {

using KeyFn = std::function<KeySet(int layer, std::size_t row)>;

void run_layers(const TargetModel& m, std::vector<KVStore>& kv, Matrix& x, std::span<const int> positions,
                std::size_t slot0, const KeyFn& keys, LayerTrace* trace, const PrefillOptions* opts) {
  const ModelConfig& cfg = m.config();
  const LayerShape shape = cfg.layer_shape();
  if (trace) {
    trace->states.clear();
    trace->states.reserve(static_cast<std::size_t>(cfg.num_layers) + 1);
    trace->states.push_back(x);
  }
  for (int l = 0; l < cfg.num_layers; ++l) {
    AttentionObserver obs;
    const bool observing = opts && opts->observe && opts->observe_wants;
    if (observing) {
      obs.wants = [&, l](std::size_t row) { return opts->observe_wants(l, row); };
      obs.record = [&, l](std::size_t row, const KeySet& k, const std::vector<double>& p) { opts->observe(l, row, k, p); };
    }
    layer_forward_rows(m.layers[static_cast<std::size_t>(l)], shape, x, positions, kv[static_cast<std::size_t>(l)],
                       slot0, [&, l](std::size_t row) { return keys(l, row); }, observing ? &obs : nullptr);
    if (trace) trace->states.push_back(x);
  }
}

Matrix head_rows(const TargetModel& m, const Matrix& x) {
  Matrix logits(x.rows(), static_cast<std::size_t>(m.config().vocab_size));
  for (std::size_t i = 0; i < x.rows(); ++i) m.head(x.row(i), logits.row(i));
  return logits;
}

}  // namespace

PrefillResult TargetModel::prefill(const TokenSequence& seq, const PrefillOptions& opts) const {
  seq.validate(cfg_);
  const std::size_t n = seq.size();
  if (n == 0) throw std::invalid_argument("prefill: empty sequence");
  if (n > static_cast<std::size_t>(cfg_.max_positions))
    throw std::invalid_argument("prefill: sequence length " + std::to_string(n) + " exceeds max_positions");
  PrefillResult r;
  r.cache = TargetKVCache(cfg_, n + 64);
  Matrix x = embed(seq);
  std::vector<int> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<int>(i);
  const std::size_t lv = seq.visual_len();
  const int cut = opts.truncate_visual_from;
  KeyFn keys = [lv, cut](int layer, std::size_t row) {
    KeySet k;
    k.begin = (row >= lv && layer >= cut) ? lv : 0;
    k.end = row + 1;
    return k;
  };
  LayerTrace trace;
  run_layers(*this, r.cache.layers_, x, positions, 0, keys, opts.keep_trace ? &trace : nullptr, &opts);
  r.logits = head_rows(*this, x);
  r.trace = std::move(trace);
  r.cache.length_ = n;
  r.cache.visual_len_ = lv;
  r.cache.tags_.assign(n, Modality::text);
  std::fill_n(r.cache.tags_.begin(), lv, Modality::visual);
  return r;
}

Matrix TargetModel::truncate_visual_from_layer(const TokenSequence& seq, int x) const {
  if (x < 0 || x > cfg_.num_layers) throw std::invalid_argument("truncate_visual_from_layer: x out of range");
  PrefillOptions opts;
  opts.truncate_visual_from = x;
  opts.keep_trace = false;
  return prefill(seq, opts).logits;
}

std::vector<float> TargetModel::decode_step(TargetKVCache& cache, int token, std::vector<float>* penult) const {
  if (cache.layers_.empty()) throw std::invalid_argument("decode_step: cache not initialised");
  if (cache.provisional_ != 0) throw std::logic_error("decode_step: uncommitted verification entries");
  const std::size_t pos = cache.length_;
  if (pos + 1 > static_cast<std::size_t>(cfg_.max_positions))
    throw std::invalid_argument("decode_step: exceeds max_positions");
  Matrix x(1, static_cast<std::size_t>(cfg_.hidden_dim));
  std::ranges::copy(token_embedding(token), x.row(0).begin());
  const int position = static_cast<int>(pos);
  KeyFn keys = [pos](int, std::size_t) { return KeySet{0, pos + 1, {}}; };
  LayerTrace trace;
  run_layers(*this, cache.layers_, x, std::span<const int>(&position, 1), pos, keys, penult ? &trace : nullptr, nullptr);
  std::vector<float> logits(static_cast<std::size_t>(cfg_.vocab_size));
  head(x.row(0), logits);
  if (penult) {
    const auto r = trace.states[static_cast<std::size_t>(cfg_.penult_level())].row(0);
    penult->assign(r.begin(), r.end());
  }
  cache.length_ = pos + 1;
  cache.tags_.push_back(Modality::text);
  return logits;
}

VerifyResult TargetModel::verify_batch(TargetKVCache& cache, std::span<const int> tokens,
                                       std::span<const unsigned char> mask, std::span<const int> positions) const {
  if (cache.layers_.empty()) throw std::invalid_argument("verify_batch: cache not initialised");
  if (cache.provisional_ != 0) throw std::logic_error("verify_batch: previous verification not committed");
  const std::size_t n = tokens.size();
  if (n == 0) throw std::invalid_argument("verify_batch: no tokens");
  if (mask.size() != n * n) throw std::invalid_argument("verify_batch: mask must be n x n");
  if (positions.size() != n) throw std::invalid_argument("verify_batch: one position per token required");
  const std::size_t base = cache.length_;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i * n + i]) throw std::invalid_argument("verify_batch: mask is not reflexive");
    std::size_t depth = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || !mask[i * n + j]) continue;
      if (j > i) throw std::invalid_argument("verify_batch: ancestor follows descendant");
      ++depth;
      // Ancestors of an ancestor are ancestors; two ancestors are ordered.
      for (std::size_t k = 0; k < n; ++k)
        if (mask[j * n + k] && !mask[i * n + k]) throw std::invalid_argument("verify_batch: mask not ancestor-closed");
      for (std::size_t k = 0; k < j; ++k)
        if (mask[i * n + k] && !mask[j * n + k]) throw std::invalid_argument("verify_batch: ancestors do not form a path");
    }
    if (positions[i] != static_cast<int>(base + depth))
      throw std::invalid_argument("verify_batch: position inconsistent with tree depth");
    if (positions[i] >= cfg_.max_positions) throw std::invalid_argument("verify_batch: exceeds max_positions");
  }
  Matrix x(n, static_cast<std::size_t>(cfg_.hidden_dim));
  for (std::size_t i = 0; i < n; ++i) std::ranges::copy(token_embedding(tokens[i]), x.row(i).begin());
  std::vector<std::vector<std::size_t>> extras(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j)
      if (mask[i * n + j]) extras[i].push_back(base + j);
  KeyFn keys = [&](int, std::size_t row) { return KeySet{0, base, extras[row]}; };
  LayerTrace trace;
  run_layers(*this, cache.layers_, x, positions, base, keys, &trace, nullptr);
  VerifyResult r;
  r.logits = head_rows(*this, x);
  r.penult = std::move(trace.states[static_cast<std::size_t>(cfg_.penult_level())]);
  cache.provisional_ = n;
  cache.prov_mask_.assign(mask.begin(), mask.end());
  return r;
}

void TargetModel::commit_prefix(TargetKVCache& cache, std::span<const std::size_t> keep) const {
  const std::size_t n = cache.provisional_;
  const auto& mask = cache.prov_mask_;
  for (std::size_t t = 0; t < keep.size(); ++t) {
    const std::size_t node = keep[t];
    if (node >= n) throw std::invalid_argument("commit_prefix: index is not a provisional entry");
    std::size_t count = 0;
    for (std::size_t j = 0; j < n; ++j) count += mask[node * n + j] ? 1 : 0;
    if (count != t + 1) throw std::invalid_argument("commit_prefix: keep set is not a root-to-node path");
    for (std::size_t s = 0; s < t; ++s)
      if (!mask[node * n + keep[s]]) throw std::invalid_argument("commit_prefix: keep set is not a root-to-node path");
  }
  const std::size_t base = cache.length_;
  for (auto& kv : cache.layers_) {
    for (std::size_t t = 0; t < keep.size(); ++t)
      if (keep[t] != t) kv.copy_slot(base + keep[t], base + t);
    kv.resize(base + keep.size());
  }
  cache.length_ = base + keep.size();
  cache.tags_.insert(cache.tags_.end(), keep.size(), Modality::text);
  cache.provisional_ = 0;
  cache.prov_mask_.clear();
}

ag::Var TargetModel::graph(const TokenSequence& seq, ParamBinding& binding, bool trainable,
                           std::span<const int> positions_in) {
  seq.validate(cfg_);
  const std::size_t n = seq.size();
  if (n == 0) throw std::invalid_argument("graph: empty sequence");
  auto emb = binding.bind(embedding, trainable);
  ag::Var x = ag::gather_rows(emb, seq.text);
  if (seq.visual_len() > 0) x = ag::concat_rows(ag::constant(seq.visual), x);
  std::vector<int> positions(n);
  if (positions_in.empty()) {
    for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<int>(i);
  } else {
    if (positions_in.size() != n) throw std::invalid_argument("graph: positions and sequence lengths differ");
    for (std::size_t i = 0; i < n; ++i) {
      if (positions_in[i] < 0 || positions_in[i] >= cfg_.max_positions || (i > 0 && positions_in[i] <= positions_in[i - 1]))
        throw std::invalid_argument("graph: positions must increase within [0, max_positions)");
      positions[i] = positions_in[i];
    }
  }
  const auto allow = causal_mask(n);
  for (auto& w : layers) x = layer_graph(bind_layer(w, binding, trainable), cfg_.layer_shape(), x, positions, allow);
  const auto fn = binding.bind(final_norm, trainable);
  const auto head = binding.bind(lm_head, trainable);
  return ag::matmul(ag::rmsnorm(x, fn, kNormEps), head);
}

StateSplit extract_states(const LayerTrace& trace, const TokenSequence& seq, const ModelConfig& cfg) {
  if (trace.states.size() != static_cast<std::size_t>(cfg.num_layers) + 1)
    throw std::invalid_argument("extract_states: trace depth does not match config");
  for (const auto& s : trace.states)
    if (s.rows() != seq.size()) throw std::invalid_argument("extract_states: trace and sequence lengths differ");
  const auto& mid = trace.states[static_cast<std::size_t>(cfg.mid_level())];
  const auto& pen = trace.states[static_cast<std::size_t>(cfg.penult_level())];
  StateSplit s;
  s.h_vis_mid = Matrix(0, static_cast<std::size_t>(cfg.hidden_dim));
  if (seq.visual_len() > 0) s.h_vis_mid = mid.slice_rows(0, seq.visual_len());
  s.h_txt_penult = pen.slice_rows(seq.visual_len(), seq.size());
  return s;
}

}  // namespace sparrow
