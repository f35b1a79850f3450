// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#include "sparrow/draft.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "sparrow/checkpoint.hpp"

namespace sparrow {

DraftModel make_draft(const TargetModel& target) {
  DraftModel d(target);
  const auto h = static_cast<std::size_t>(target.config().hidden_dim);
  d.fc = Matrix(2 * h, h);
  d.fc_bias = Matrix(1, h);
  Rng rng(0);
  d.layer = LayerWeights::random(target.config().layer_shape(), rng, 1.0f);
  for (Matrix* m : d.layer.tensors()) m->fill(0.0f);
  d.layer.attn_norm.fill(1.0f);
  d.layer.mlp_norm.fill(1.0f);
  return d;
}

DraftModel DraftModel::random(const TargetModel& target, std::uint64_t seed) {
  DraftModel d = make_draft(target);
  Rng rng(seed);
  const double s = 1.0 / std::sqrt(static_cast<double>(d.fc.rows()));
  for (float& v : d.fc.values()) v = static_cast<float>(rng.normal() * s);
  d.layer = LayerWeights::random(target.config().layer_shape(), rng, 0.5f);
  return d;
}

void save_draft(const std::filesystem::path& path, const DraftModel& d) {
  Container c;
  c.kind = "DRFT";
  c.fields = config_fields(d.target().config());
  c.tensors.push_back({"fc", d.fc});
  c.tensors.push_back({"fc_bias", d.fc_bias});
  auto lt = layer_tensors(d.layer, "layer.");
  c.tensors.insert(c.tensors.end(), lt.begin(), lt.end());
  write_container(path, c);
}

DraftModel load_draft(const std::filesystem::path& path, const TargetModel& target) {
  const Container c = read_container(path);
  if (c.kind != "DRFT") throw std::runtime_error("checkpoint: " + path.string() + " is not a draft checkpoint");
  if (config_from_fields(c.fields) != target.config())
    throw std::runtime_error("checkpoint: draft " + path.string() + " was trained for a different target shape");
  DraftModel d = make_draft(target);
  auto take = [&](Matrix& dst, const std::string& name) {
    const Matrix& src = c.tensor(name);
    if (src.rows() != dst.rows() || src.cols() != dst.cols())
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
    dst = src;
  };
  take(d.fc, "fc");
  take(d.fc_bias, "fc_bias");
  load_layer(d.layer, c, "layer.");
  return d;
}

std::vector<float> hsr_fuse(std::span<const float> e, std::span<const float> h, const Matrix& fc,
                            const Matrix& fc_bias, CostMeter* cost) {
  const std::size_t d = fc.cols();
  if (e.size() != d || h.size() != d || fc.rows() != 2 * d)
    throw std::invalid_argument("hsr_fuse: dimension mismatch");
  if (fc_bias.rows() != 1 || fc_bias.cols() != d) throw std::invalid_argument("hsr_fuse: bias shape mismatch");
  std::vector<float> cat(2 * d);
  std::ranges::copy(e, cat.begin());
  std::ranges::copy(h, cat.begin() + static_cast<std::ptrdiff_t>(d));
  std::vector<float> z(d);
  matmul_row(cat, fc, z);
  for (std::size_t j = 0; j < d; ++j) z[j] += fc_bias(0, j);
  if (cost) cost->add(2 * d * d);
  return z;
}

Matrix shift_states(const Matrix& states) {
  Matrix out(states.rows(), states.cols());
  for (std::size_t i = 1; i < states.rows(); ++i) std::ranges::copy(states.row(i - 1), out.row(i).begin());
  return out;
}

std::size_t FusedInput::visual_len() const {
  return static_cast<std::size_t>(std::count(tags.begin(), tags.end(), Modality::visual));
}

namespace {

Matrix fuse_rows(const Matrix& e, const Matrix& h, const DraftModel& d) {
  const auto w = static_cast<std::size_t>(d.hidden());
  if (e.rows() != h.rows()) throw std::invalid_argument("fused input: embedding and state rows misaligned");
  if (e.rows() > 0 && (e.cols() != w || h.cols() != w)) throw std::invalid_argument("fused input: width mismatch");
  Matrix z(e.rows(), w);
  for (std::size_t t = 0; t < e.rows(); ++t) {
    const auto row = hsr_fuse(e.row(t), h.row(t), d.fc, d.fc_bias);
    std::ranges::copy(row, z.row(t).begin());
  }
  return z;
}

FusedInput assemble(const Matrix& h_vis, const Matrix& z) {
  const std::size_t lv = h_vis.rows();
  if (lv > 0 && h_vis.cols() != z.cols() && z.rows() > 0) throw std::invalid_argument("fused input: width mismatch");
  FusedInput f;
  f.rows = Matrix(0, z.cols());
  if (lv > 0) f.rows.append_rows(h_vis);
  f.rows.append_rows(z);
  f.tags.assign(lv, Modality::visual);
  f.tags.insert(f.tags.end(), z.rows(), Modality::text);
  for (std::size_t i = 0; i < f.rows.rows(); ++i) f.positions.push_back(static_cast<int>(i));
  return f;
}

}  // namespace

FusedInput build_init_input(const Matrix& h_vis_mid, const Matrix& e_txt, const Matrix& h_prev, const DraftModel& d) {
  return assemble(h_vis_mid, fuse_rows(e_txt, h_prev, d));
}

FusedInput build_recursive_input(const Matrix& h_vis_mid, const Matrix& e_txt, const Matrix& h_hat_prev,
                                 const DraftModel& d) {
  return assemble(h_vis_mid, fuse_rows(e_txt, h_hat_prev, d));
}

FusedInput build_text_input(const Matrix& e_txt, const Matrix& h_prev, const DraftModel& d) {
  return assemble(Matrix(0, static_cast<std::size_t>(d.hidden())), fuse_rows(e_txt, h_prev, d));
}

DraftOutput draft_forward(const FusedInput& input, DraftMode mode, const DraftModel& d, CostMeter* cost) {
  const std::size_t n = input.rows.rows();
  if (n == 0) throw std::invalid_argument("draft_forward: empty input");
  if (input.tags.size() != n || input.positions.size() != n)
    throw std::invalid_argument("draft_forward: tags/positions do not match rows");
  const std::size_t lv = input.visual_len();
  for (std::size_t i = 0; i < lv; ++i)
    if (input.tags[i] != Modality::visual) throw std::invalid_argument("draft_forward: visual rows must precede text rows");
  if (mode == DraftMode::inference_vata && lv > 0)
    throw std::invalid_argument("draft_forward: inference mode input must not contain visual rows");
  const LayerShape shape = d.shape();
  KVStore kv(shape.heads, shape.head_dim(), n);
  DraftOutput out;
  out.hidden = input.rows;
  layer_forward_rows(d.layer, shape, out.hidden, input.positions, kv, 0,
                     [](std::size_t row) { return KeySet{0, row + 1, {}}; }, nullptr, cost);
  const TargetModel& t = d.target();
  out.logits = Matrix(n - lv, static_cast<std::size_t>(t.config().vocab_size));
  for (std::size_t i = lv; i < n; ++i) t.head(out.hidden.row(i), out.logits.row(i - lv), cost);
  return out;
}

std::vector<float> vata_attention(std::span<const float> q, const KVStore& cache, CostMeter* cost) {
  if (cache.size() == 0) throw std::invalid_argument("vata_attention: empty cache");
  if (q.size() != cache.hidden()) throw std::invalid_argument("vata_attention: query width mismatch");
  std::vector<float> out(q.size());
  attend(cache, q, KeySet{0, cache.size(), {}}, out, nullptr, cost);
  return out;
}

DraftVars bind_draft(DraftModel& d, ParamBinding& binding) {
  DraftVars v;
  v.fc = binding.bind(d.fc);
  v.fc_bias = binding.bind(d.fc_bias);
  v.layer = bind_layer(d.layer, binding);
  v.final_norm = ag::constant(d.target().final_norm);
  v.lm_head = ag::constant(d.target().lm_head);
  return v;
}

ag::Var fuse_graph(const DraftVars& v, const ag::Var& e_txt, const ag::Var& h_prev) {
  return ag::add_row(ag::matmul(ag::concat_cols(e_txt, h_prev), v.fc), v.fc_bias);
}

ag::Var draft_layer_graph(const DraftVars& v, const LayerShape& shape, const ag::Var& rows,
                          const std::vector<int>& positions) {
  return layer_graph(v.layer, shape, rows, positions, causal_mask(rows->value.rows()));
}

ag::Var head_graph(const DraftVars& v, const ag::Var& hidden) {
  return ag::matmul(ag::rmsnorm(hidden, v.final_norm, kNormEps), v.lm_head);
}

std::string to_string(DraftInputMode m) {
  switch (m) {
    case DraftInputMode::vata: return "vata";
    case DraftInputMode::full_visual: return "full_visual";
    case DraftInputMode::pruned: return "pruned";
  }
  return "?";
}

DraftInputMode parse_draft_input_mode(const std::string& s) {
  if (s == "vata") return DraftInputMode::vata;
  if (s == "full_visual") return DraftInputMode::full_visual;
  if (s == "pruned") return DraftInputMode::pruned;
  throw std::invalid_argument("unknown draft input mode '" + s + "'");
}

DraftSession::DraftSession(const DraftModel& draft, DraftInputMode mode)
    : draft_(draft), mode_(mode), kv_(draft.shape().heads, draft.shape().head_dim(), 256) {}

int DraftSession::text_position(std::size_t text_index) const { return text_base_ + static_cast<int>(text_index); }

void DraftSession::run_rows(const Matrix& z, std::span<const int> positions, std::size_t slot0,
                            const std::function<KeySet(std::size_t)>& keys) {
  Matrix x = z;
  layer_forward_rows(draft_.layer, draft_.shape(), x, positions, kv_, slot0, keys, nullptr, &cost_);
}

void DraftSession::begin(const Matrix& visual_rows, std::span<const int> visual_positions, int text_base,
                         std::span<const int> text, const Matrix& text_states) {
  const auto d = static_cast<std::size_t>(draft_.hidden());
  if (mode_ == DraftInputMode::vata && visual_rows.rows() > 0)
    throw std::invalid_argument("DraftSession: text-anchored mode takes no visual rows");
  if (visual_positions.size() != visual_rows.rows()) throw std::invalid_argument("DraftSession: one position per visual row");
  if (text_states.rows() != text.size() || (text.size() > 0 && text_states.cols() != d))
    throw std::invalid_argument("DraftSession: one target state per text token required");
  kv_.resize(0);
  prefix_ = visual_rows.rows();
  text_base_ = mode_ == DraftInputMode::vata ? 0 : text_base;
  if (prefix_ > 0) {
    run_rows(visual_rows, visual_positions, 0, [](std::size_t row) { return KeySet{0, row + 1, {}}; });
  }
  Matrix e(text.size(), d);
  for (std::size_t t = 0; t < text.size(); ++t) std::ranges::copy(draft_.target().token_embedding(text[t]), e.row(t).begin());
  const Matrix h_prev = shift_states(text_states);
  Matrix z(text.size(), d);
  for (std::size_t t = 0; t < text.size(); ++t)
    std::ranges::copy(hsr_fuse(e.row(t), h_prev.row(t), draft_.fc, draft_.fc_bias, &cost_), z.row(t).begin());
  std::vector<int> pos(text.size());
  for (std::size_t t = 0; t < text.size(); ++t) pos[t] = text_position(t);
  const std::size_t p = prefix_;
  if (!text.empty()) run_rows(z, pos, p, [p](std::size_t row) { return KeySet{0, p + row + 1, {}}; });
  committed_ = prefix_ + text.size();
  last_state_.assign(d, 0.0f);
  if (!text.empty()) std::ranges::copy(text_states.row(text.size() - 1), last_state_.begin());
  root_ready_ = false;
}

std::vector<float> DraftSession::root(int token, std::vector<double>& probs) {
  const auto d = static_cast<std::size_t>(draft_.hidden());
  if (last_state_.size() != d) throw std::logic_error("DraftSession: begin() not called");
  Matrix z(1, d);
  std::ranges::copy(hsr_fuse(draft_.target().token_embedding(token), last_state_, draft_.fc, draft_.fc_bias, &cost_),
                    z.row(0).begin());
  const int pos = text_position(text_rows());
  const std::size_t slot = committed_;
  Matrix x = z;
  layer_forward_rows(draft_.layer, draft_.shape(), x, std::span<const int>(&pos, 1), kv_, slot,
                     [slot](std::size_t) { return KeySet{0, slot + 1, {}}; }, nullptr, &cost_);
  std::vector<float> logits(static_cast<std::size_t>(draft_.target().config().vocab_size));
  draft_.target().head(x.row(0), logits, &cost_);
  probs = softmax(logits);
  root_ready_ = true;
  return {x.row(0).begin(), x.row(0).end()};
}

Matrix DraftSession::expand(std::span<const int> tokens, const Matrix& parent_hidden,
                            std::span<const std::size_t> node_ids,
                            const std::vector<std::vector<std::size_t>>& ancestors, Matrix* logits) {
  if (!root_ready_) throw std::logic_error("DraftSession: expand() before root()");
  const std::size_t n = tokens.size();
  if (parent_hidden.rows() != n || node_ids.size() != n || ancestors.size() != n)
    throw std::invalid_argument("DraftSession::expand: argument lengths differ");
  const auto d = static_cast<std::size_t>(draft_.hidden());
  const std::size_t root_slot = committed_;
  auto slot_of = [root_slot](std::size_t node) { return root_slot + 1 + node; };
  // Rows of one call must occupy consecutive slots.
  for (std::size_t i = 1; i < n; ++i)
    if (node_ids[i] != node_ids[0] + i) throw std::invalid_argument("DraftSession::expand: node ids must be consecutive");
  Matrix z(n, d);
  std::vector<int> pos(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::ranges::copy(hsr_fuse(draft_.target().token_embedding(tokens[i]), parent_hidden.row(i), draft_.fc,
                               draft_.fc_bias, &cost_),
                      z.row(i).begin());
    pos[i] = text_position(text_rows()) + static_cast<int>(ancestors[i].size()) + 1;
  }
  if (n == 0) return Matrix(0, d);
  layer_forward_rows(draft_.layer, draft_.shape(), z, pos, kv_, slot_of(node_ids[0]),
                     [&](std::size_t row) {
                       KeySet k{0, root_slot + 1, {}};
                       for (std::size_t a : ancestors[row]) k.extras.push_back(slot_of(a));
                       k.extras.push_back(slot_of(node_ids[row]));
                       return k;
                     },
                     nullptr, &cost_);
  if (logits) {
    *logits = Matrix(n, static_cast<std::size_t>(draft_.target().config().vocab_size));
    for (std::size_t i = 0; i < n; ++i) draft_.target().head(z.row(i), logits->row(i), &cost_);
  }
  return z;
}

void DraftSession::commit(std::span<const int> tokens, const Matrix& target_states) {
  if (!root_ready_) throw std::logic_error("DraftSession: commit() before root()");
  if (tokens.empty() || target_states.rows() != tokens.size())
    throw std::invalid_argument("DraftSession::commit: one target state per token required");
  const auto d = static_cast<std::size_t>(draft_.hidden());
  // tokens[0] is the root whose row is already in place.
  const std::size_t k = tokens.size() - 1;
  if (k > 0) {
    Matrix z(k, d);
    std::vector<int> pos(k);
    for (std::size_t i = 0; i < k; ++i) {
      std::ranges::copy(hsr_fuse(draft_.target().token_embedding(tokens[i + 1]), target_states.row(i), draft_.fc,
                                 draft_.fc_bias, &cost_),
                        z.row(i).begin());
      pos[i] = text_position(text_rows() + 1 + i);
    }
    const std::size_t slot0 = committed_ + 1;
    run_rows(z, pos, slot0, [slot0](std::size_t row) { return KeySet{0, slot0 + row + 1, {}}; });
  }
  committed_ += k + 1;
  kv_.resize(committed_);
  std::ranges::copy(target_states.row(k), last_state_.begin());
  root_ready_ = false;
}

}  // namespace sparrow
