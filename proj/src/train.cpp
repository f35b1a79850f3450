// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#include "sparrow/train.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace sparrow {

double cosine_lr(double base, int step, int warmup, int total) {
  if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double t = static_cast<double>(step - warmup) / static_cast<double>(std::max(1, total - warmup));
  return base * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, t))));
}

TargetBatch sample_target_batch(const TargetTrainConfig& tc, const ModelConfig& cfg, const VisualTables& tables,
                                std::uint64_t step) {
  Rng rng = Rng(tc.seed).fork(step);
  TargetBatch b;
  for (int i = 0; i < tc.batch; ++i) {
    WorkloadConfig wc;
    wc.kind = WorkloadKind::grounded_task;
    wc.visual_len = tc.min_visual + static_cast<int>(rng.below(static_cast<std::uint64_t>(tc.max_visual - tc.min_visual + 1)));
    wc.queries = tc.min_queries + static_cast<int>(rng.below(static_cast<std::uint64_t>(tc.max_queries - tc.min_queries + 1)));
    wc.num_prompts = 1;
    wc.seed = rng.next_u64();
    const Prompt p = gen_workload(wc, cfg, tables).front();
    TokenSequence s = with_reference(p);
    std::vector<int> targets(s.size(), -1);
    for (std::size_t k = 0; k < p.reference.size(); ++k) targets[reference_row(p, k)] = p.reference[k];
    const int lv = wc.visual_len;
    const int text = static_cast<int>(s.text_len());
    int stride = 1;
    if (tc.max_visual_stride > 1 && rng.below(2) == 1) {
      stride = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(tc.max_visual_stride)));
      if (lv > 1) stride = std::max(1, std::min(stride, (cfg.max_positions - text - 1) / (lv - 1)));
    }
    std::vector<int> positions(s.size());
    for (int i = 0; i < lv; ++i) positions[static_cast<std::size_t>(i)] = i * stride;
    const int text_base = lv > 0 ? (lv - 1) * stride + 1 : 0;
    for (int t = 0; t < text; ++t) positions[static_cast<std::size_t>(lv + t)] = text_base + t;
    b.seqs.push_back(std::move(s));
    b.targets.push_back(std::move(targets));
    b.positions.push_back(std::move(positions));
  }
  return b;
}

ag::Var target_batch_loss(TargetModel& model, const TargetBatch& batch, ParamBinding& binding) {
  std::vector<std::pair<ag::Var, double>> terms;
  const double w = 1.0 / static_cast<double>(batch.seqs.size());
  for (std::size_t i = 0; i < batch.seqs.size(); ++i) {
    std::span<const int> positions;
    if (!batch.positions.empty()) positions = batch.positions[i];
    terms.emplace_back(ag::cross_entropy(model.graph(batch.seqs[i], binding, true, positions), batch.targets[i]), w);
  }
  return ag::weighted_sum(terms);
}

TargetModel pretrain_target(const ModelConfig& cfg, const TargetTrainConfig& tc,
                            const std::function<void(const TargetLogEntry&)>& log) {
  if (tc.steps < 0 || tc.batch < 1 || !(tc.lr > 0.0) || tc.max_visual_stride < 1) throw std::invalid_argument("pretrain_target: bad train config");
  TargetModel model = TargetModel::random(cfg, Rng(tc.seed).fork(0x7461726745ULL).next_u64());
  const VisualTables tables = make_visual_tables(cfg, tc.vocab_seed);
  AdamConfig ac;
  ac.lr = tc.lr;
  Adam opt(ac);
  for (int step = 0; step < tc.steps; ++step) {
    const TargetBatch batch = sample_target_batch(tc, cfg, tables, static_cast<std::uint64_t>(step));
    ParamBinding binding;
    const auto loss = target_batch_loss(model, batch, binding);
    if (!std::isfinite(loss->scalar)) throw std::runtime_error("pretrain_target: loss diverged at step " + std::to_string(step));
    ag::backward(loss);
    const double lr = cosine_lr(tc.lr, step, tc.warmup, tc.steps);
    const double gn = opt.step(binding, lr);
    if (log) log({step, loss->scalar, lr, gn});
  }
  return model;
}

}  // namespace sparrow

namespace sparrow {

std::vector<TrainExample> teacher_trace(const std::vector<TokenSequence>& seqs, const TargetModel& target) {
  const ModelConfig& cfg = target.config();
  std::vector<TrainExample> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) {
    if (s.text_len() == 0) throw std::invalid_argument("teacher_trace: sequence without text");
    const PrefillResult pre = target.prefill(s);
    const StateSplit st = extract_states(pre.trace, s, cfg);
    TrainExample ex;
    ex.h_vis_mid = st.h_vis_mid;
    ex.visual_raw = s.visual_len() > 0 ? s.visual : Matrix(0, static_cast<std::size_t>(cfg.hidden_dim));
    ex.e_txt = Matrix(s.text_len(), static_cast<std::size_t>(cfg.hidden_dim));
    for (std::size_t t = 0; t < s.text_len(); ++t) std::ranges::copy(target.token_embedding(s.text[t]), ex.e_txt.row(t).begin());
    ex.h_txt_penult = st.h_txt_penult;
    ex.teacher_states = st.h_txt_penult;
    ex.teacher_probs = Matrix(s.text_len(), static_cast<std::size_t>(cfg.vocab_size));
    for (std::size_t t = 0; t < s.text_len(); ++t) {
      const auto p = softmax(pre.logits.row(s.visual_len() + t));
      for (std::size_t v = 0; v < p.size(); ++v) ex.teacher_probs(t, v) = static_cast<float>(p[v]);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::string to_string(VisualSource v) {
  switch (v) {
    case VisualSource::mid_states: return "mid_states";
    case VisualSource::zeros: return "zeros";
    case VisualSource::raw: return "raw";
  }
  return "?";
}

VisualSource parse_visual_source(const std::string& s) {
  if (s == "mid_states") return VisualSource::mid_states;
  if (s == "zeros") return VisualSource::zeros;
  if (s == "raw") return VisualSource::raw;
  throw std::invalid_argument("unknown visual source '" + s + "'");
}

double decomposed_total(const LossReport& r, const MtpOptions& opts) {
  double tok = 0.0, st = 0.0;
  for (double v : r.token) tok += v;
  for (double v : r.state) st += v;
  return opts.alpha * tok + opts.beta * st;
}

MtpLoss mtp_joint_loss_graph(const TrainExample& ex, const DraftVars& vars, const LayerShape& shape,
                             const MtpOptions& opts) {
  const std::size_t lt = ex.e_txt.rows();
  const std::size_t lv = ex.h_vis_mid.rows();
  if (lt == 0) throw std::invalid_argument("mtp_joint_loss: example without text rows");
  if (ex.h_txt_penult.rows() != lt || ex.teacher_probs.rows() != lt || ex.teacher_states.rows() != lt)
    throw std::invalid_argument("mtp_joint_loss: text fields misaligned");
  if (opts.depth < 1) throw std::invalid_argument("mtp_joint_loss: depth must be >= 1");
  if (!(opts.alpha >= 0.0) || !(opts.beta >= 0.0)) throw std::invalid_argument("mtp_joint_loss: negative loss weight");
  ag::Var vis;
  if (lv > 0) {
    switch (opts.visual) {
      case VisualSource::mid_states: vis = ag::constant(ex.h_vis_mid); break;
      case VisualSource::zeros: vis = ag::constant(Matrix(lv, ex.h_vis_mid.cols())); break;
      case VisualSource::raw: vis = ag::constant(ex.visual_raw); break;
    }
  }
  std::vector<int> positions(lv + lt);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
  const auto e = ag::constant(ex.e_txt);
  ag::Var h_prev = ag::constant(shift_states(ex.h_txt_penult));
  MtpLoss out;
  std::vector<std::pair<ag::Var, double>> terms;
  for (int pass = 0; pass < opts.depth; ++pass) {
    const auto z = fuse_graph(vars, e, h_prev);
    const auto rows = lv > 0 ? ag::concat_rows(vis, z) : z;
    const auto hid = draft_layer_graph(vars, shape, rows, positions);
    const auto ht = lv > 0 ? ag::slice_rows(hid, lv, lv + lt) : hid;
    const auto tok = ag::soft_cross_entropy(head_graph(vars, ht), ex.teacher_probs);
    const auto st = ag::smooth_l1(ht, ex.teacher_states);
    terms.emplace_back(tok, opts.alpha);
    terms.emplace_back(st, opts.beta);
    out.report.token.push_back(tok->scalar);
    out.report.state.push_back(st->scalar);
    h_prev = ag::shift_down(ht);
  }
  out.total = ag::weighted_sum(terms);
  auto& r = out.report;
  r.pass1_token = r.token[0];
  r.pass1_state = r.state[0];
  r.pass2_token = r.token.size() > 1 ? r.token[1] : 0.0;
  r.pass2_state = r.state.size() > 1 ? r.state[1] : 0.0;
  r.total = decomposed_total(r, opts);
  return out;
}

LossReport mtp_joint_loss(const TrainExample& ex, DraftModel& draft, const MtpOptions& opts) {
  ParamBinding binding;
  return mtp_joint_loss_graph(ex, bind_draft(draft, binding), draft.shape(), opts).report;
}

std::vector<TokenSequence> draft_training_sequences(const DraftTrainConfig& tc, const ModelConfig& cfg, int stage) {
  const VisualTables tables = make_visual_tables(cfg, tc.vocab_seed);
  Rng rng = Rng(tc.seed).fork(0x647261667400ULL + static_cast<std::uint64_t>(stage));
  std::vector<TokenSequence> out;
  for (int i = 0; i < tc.examples; ++i) {
    WorkloadConfig wc;
    wc.visual_len = tc.min_visual + static_cast<int>(rng.below(static_cast<std::uint64_t>(tc.max_visual - tc.min_visual + 1)));
    wc.queries = tc.min_queries + static_cast<int>(rng.below(static_cast<std::uint64_t>(tc.max_queries - tc.min_queries + 1)));
    wc.num_prompts = 1;
    wc.seed = rng.next_u64();
    TokenSequence s = with_reference(gen_workload(wc, cfg, tables).front());
    if (stage == 1) {
      s.visual = Matrix(0, static_cast<std::size_t>(cfg.hidden_dim));
      s.symbols.clear();
    }
    out.push_back(std::move(s));
  }
  return out;
}

DraftModel train_draft_two_stage(const TargetModel& target, const DraftTrainConfig& tc,
                                 const std::function<void(const DraftLogEntry&)>& log) {
  if (tc.stage1_epochs < 0 || tc.stage2_epochs < 0 || tc.examples < 1 || tc.batch < 1 || !(tc.lr > 0.0))
    throw std::invalid_argument("train_draft_two_stage: bad train config");
  DraftModel draft = DraftModel::random(target, Rng(tc.seed).fork(0x6472616674ULL).next_u64());
  AdamConfig ac;
  ac.lr = tc.lr;
  Adam opt(ac);
  const int steps_per_epoch = (tc.examples + tc.batch - 1) / tc.batch;
  const int total_steps = (tc.stage1_epochs + tc.stage2_epochs) * steps_per_epoch;
  int global = 0;
  for (int stage = 1; stage <= 2; ++stage) {
    const int epochs = stage == 1 ? tc.stage1_epochs : tc.stage2_epochs;
    if (epochs == 0) continue;
    const auto examples = teacher_trace(draft_training_sequences(tc, target.config(), stage), target);
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < epochs; ++epoch) {
      Rng shuffle = Rng(tc.seed).fork(static_cast<std::uint64_t>(stage * 1000 + epoch));
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
      for (int step = 0; step < steps_per_epoch; ++step, ++global) {
        ParamBinding binding;
        const DraftVars vars = bind_draft(draft, binding);
        std::vector<std::pair<ag::Var, double>> terms;
        DraftLogEntry entry{stage, epoch, step, {}};
        const std::size_t lo = static_cast<std::size_t>(step) * static_cast<std::size_t>(tc.batch);
        const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(tc.batch));
        const double w = 1.0 / static_cast<double>(hi - lo);
        for (std::size_t k = lo; k < hi; ++k) {
          MtpLoss l = mtp_joint_loss_graph(examples[order[k]], vars, draft.shape(), tc.mtp);
          terms.emplace_back(l.total, w);
          auto& acc = entry.loss;
          if (acc.token.empty()) {
            acc.token.assign(l.report.token.size(), 0.0);
            acc.state.assign(l.report.state.size(), 0.0);
          }
          for (std::size_t p = 0; p < acc.token.size(); ++p) {
            acc.token[p] += w * l.report.token[p];
            acc.state[p] += w * l.report.state[p];
          }
        }
        const auto total = ag::weighted_sum(terms);
        if (!std::isfinite(total->scalar))
          throw std::runtime_error("train_draft_two_stage: loss diverged at stage " + std::to_string(stage));
        ag::backward(total);
        opt.step(binding, cosine_lr(tc.lr, global, tc.warmup, total_steps));
        auto& r = entry.loss;
        r.pass1_token = r.token[0];
        r.pass1_state = r.state[0];
        r.pass2_token = r.token.size() > 1 ? r.token[1] : 0.0;
        r.pass2_state = r.state.size() > 1 ? r.state[1] : 0.0;
        r.total = decomposed_total(r, tc.mtp);
        if (log) log(entry);
      }
    }
  }
  return draft;
}

}  // namespace sparrow
