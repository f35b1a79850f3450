// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <functional>
#include <numeric>

#include "sparrow/train.hpp"
#include "test_util.hpp"

using namespace sparrow;
using sparrow::testing::random_matrix;
using sparrow::testing::tiny_config;

namespace {

// Norm-wise relative error between an analytic gradient and central
// differences of a scalar loss, taken over every entry of `x`.
double gradient_error(Matrix& x, const Matrix& analytic, const std::function<double()>& loss, double h) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const float orig = x(i, j);
      x(i, j) = orig + static_cast<float>(h);
      const double up = x(i, j);
      const double lp = loss();
      x(i, j) = orig - static_cast<float>(h);
      const double dn = x(i, j);
      const double lm = loss();
      x(i, j) = orig;
      const double fd = (lp - lm) / (up - dn);
      const double diff = fd - analytic(i, j);
      num += diff * diff;
      den += fd * fd;
    }
  return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

// Reduces a matrix-valued op to a scalar with a fixed quadratic readout.
struct OpCheck {
  std::function<ag::Var(const std::vector<ag::Var>&)> op;
  std::vector<Matrix> inputs;
  Matrix readout;

  double loss() {
    std::vector<ag::Var> vs;
    for (auto& m : inputs) vs.push_back(ag::constant(m));
    return ag::smooth_l1(op(vs), readout, 1e3)->scalar;
  }

  double error(std::size_t which, double h = 1e-2) {
    std::vector<ag::Var> vs;
    for (auto& m : inputs) vs.push_back(ag::leaf(m));
    ag::backward(ag::smooth_l1(op(vs), readout, 1e3));
    const Matrix g = vs[which]->grad;
    return gradient_error(inputs[which], g, [&] { return loss(); }, h);
  }
};

OpCheck make_check(std::function<ag::Var(const std::vector<ag::Var>&)> op, std::vector<Matrix> inputs,
                   std::size_t out_rows, std::size_t out_cols, Rng& rng) {
  return OpCheck{std::move(op), std::move(inputs), random_matrix(out_rows, out_cols, rng, 2.0)};
}

ModelConfig gradcheck_config() {
  ModelConfig c;
  c.num_layers = 4;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.vocab_size = 40;
  c.max_positions = 128;
  c.visual_alphabet = 4;
  c.ffn_dim = 16;
  c.rope_base = 1e4;
  return c;
}

TrainExample gradcheck_example(const TargetModel& t, int visual_len) {
  WorkloadConfig wc;
  wc.visual_len = visual_len;
  wc.queries = 1;
  wc.num_prompts = 1;
  const auto prompts = gen_workload(wc, t.config(), make_visual_tables(t.config()));
  return teacher_trace({with_reference(prompts[0])}, t)[0];
}

DraftTrainConfig tiny_draft_train() {
  DraftTrainConfig tc;
  tc.stage1_epochs = 1;
  tc.stage2_epochs = 1;
  tc.examples = 8;
  tc.batch = 4;
  tc.lr = 5e-3;
  tc.warmup = 1;
  tc.min_visual = 4;
  tc.max_visual = 8;
  tc.max_queries = 2;
  tc.seed = 3;
  return tc;
}

}  // namespace

TEST_CASE("autograd ops match central differences") {
  Rng rng(21);
  const std::vector<unsigned char> causal = causal_mask(5);
  std::vector<unsigned char> sparse = causal;
  sparse[4 * 5 + 1] = 0;  // row 4 skips key 1
  struct Case {
    const char* name;
    OpCheck check;
    std::size_t inputs;
  };
  std::vector<Case> cases;
  cases.push_back({"matmul",
                   make_check([](const auto& v) { return ag::matmul(v[0], v[1]); },
                              {random_matrix(4, 3, rng), random_matrix(3, 5, rng)}, 4, 5, rng),
                   2});
  cases.push_back({"add_row",
                   make_check([](const auto& v) { return ag::add_row(v[0], v[1]); },
                              {random_matrix(4, 3, rng), random_matrix(1, 3, rng)}, 4, 3, rng),
                   2});
  cases.push_back({"rmsnorm",
                   make_check([](const auto& v) { return ag::rmsnorm(v[0], v[1], 1e-6); },
                              {random_matrix(3, 6, rng), random_matrix(1, 6, rng)}, 3, 6, rng),
                   2});
  cases.push_back({"rope",
                   make_check([](const auto& v) { return ag::rope(v[0], {0, 3, 7}, 2, 1e4); },
                              {random_matrix(3, 8, rng)}, 3, 8, rng),
                   1});
  cases.push_back({"gelu",
                   make_check([](const auto& v) { return ag::gelu(v[0]); }, {random_matrix(3, 4, rng, 2.0)}, 3, 4, rng),
                   1});
  cases.push_back({"attention",
                   make_check([&](const auto& v) { return ag::attention(v[0], v[1], v[2], 2, sparse); },
                              {random_matrix(5, 4, rng), random_matrix(5, 4, rng), random_matrix(5, 4, rng)}, 5, 4, rng),
                   3});
  cases.push_back({"concat and slice",
                   make_check(
                       [](const auto& v) {
                         return ag::slice_rows(ag::concat_rows(ag::concat_cols(v[0], v[1]), v[2]), 1, 4);
                       },
                       {random_matrix(2, 2, rng), random_matrix(2, 3, rng), random_matrix(3, 5, rng)}, 3, 5, rng),
                   3});
  cases.push_back({"shift_down",
                   make_check([](const auto& v) { return ag::shift_down(v[0]); }, {random_matrix(4, 3, rng)}, 4, 3, rng),
                   1});
  cases.push_back({"gather_rows",
                   make_check([](const auto& v) { return ag::gather_rows(v[0], {2, 0, 2, 3}); },
                              {random_matrix(5, 3, rng)}, 4, 3, rng),
                   1});
  for (auto& c : cases) {
    CAPTURE(c.name);
    for (std::size_t i = 0; i < c.inputs; ++i) {
      CAPTURE(i);
      CHECK(c.check.error(i) < 1e-3);
    }
  }
}

TEST_CASE("loss ops match central differences") {
  Rng rng(22);
  Matrix logits = random_matrix(4, 6, rng, 2.0);
  const std::vector<int> targets = {1, -1, 5, 0};
  {
    auto x = ag::leaf(logits);
    ag::backward(ag::cross_entropy(x, targets));
    const Matrix g = x->grad;
    CHECK(gradient_error(logits, g, [&] { return ag::cross_entropy(ag::constant(logits), targets)->scalar; }, 1e-2) <
          1e-3);
    // Skipped rows carry no gradient.
    for (std::size_t j = 0; j < 6; ++j) CHECK(g(1, j) == 0.0f);
  }
  Matrix probs(4, 6);
  for (std::size_t r = 0; r < 4; ++r) {
    const auto p = softmax(random_matrix(1, 6, rng).row(0));
    for (std::size_t j = 0; j < 6; ++j) probs(r, j) = static_cast<float>(p[j]);
  }
  {
    auto x = ag::leaf(logits);
    ag::backward(ag::soft_cross_entropy(x, probs));
    const Matrix g = x->grad;
    CHECK(gradient_error(logits, g, [&] { return ag::soft_cross_entropy(ag::constant(logits), probs)->scalar; },
                         1e-2) < 1e-3);
  }
  {
    const Matrix target = random_matrix(4, 6, rng, 2.0);
    auto x = ag::leaf(logits);
    ag::backward(ag::smooth_l1(x, target, 1.0));
    const Matrix g = x->grad;
    CHECK(gradient_error(logits, g, [&] { return ag::smooth_l1(ag::constant(logits), target, 1.0)->scalar; }, 1e-3) <
          1e-3);
  }
}

TEST_CASE("smooth_l1 and weighted_sum values follow their definitions") {
  Matrix x(1, 3), t(1, 3);
  x(0, 0) = 0.5f;   // quadratic region
  x(0, 1) = -3.0f;  // linear region
  x(0, 2) = 2.0f;
  const double expected = (0.5 * 0.25 + (3.0 - 0.5) + 0.0) / 3.0;
  t(0, 2) = 2.0f;
  const auto l = ag::smooth_l1(ag::constant(x), t, 1.0);
  CHECK(l->scalar == doctest::Approx(expected).epsilon(1e-12));
  const auto w = ag::weighted_sum({{l, 2.0}, {l, -0.5}});
  CHECK(w->scalar == doctest::Approx(1.5 * expected).epsilon(1e-12));
}

TEST_CASE("cosine_lr warms up linearly and decays to a tenth") {
  CHECK(cosine_lr(1.0, 0, 4, 20) == doctest::Approx(0.25));
  CHECK(cosine_lr(1.0, 3, 4, 20) == doctest::Approx(1.0));
  CHECK(cosine_lr(1.0, 4, 4, 20) == doctest::Approx(1.0));
  CHECK(cosine_lr(1.0, 12, 4, 20) == doctest::Approx(0.55));
  CHECK(cosine_lr(1.0, 20, 4, 20) == doctest::Approx(0.1));
  CHECK(cosine_lr(1.0, 50, 4, 20) == doctest::Approx(0.1));
  double prev = 2.0;
  for (int s = 4; s <= 20; ++s) {
    const double lr = cosine_lr(2e-3, s, 4, 20);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("Adam applies bias-corrected moments after global norm clipping") {
  Matrix w(1, 2);
  w(0, 0) = 1.0f;
  w(0, 1) = -1.0f;
  AdamConfig ac;
  ac.clip_norm = 1.0;
  Adam opt(ac);
  ParamBinding b;
  auto v = b.bind(w);
  v->ensure_grad();
  v->grad(0, 0) = 3.0f;
  v->grad(0, 1) = 4.0f;  // norm 5, clipped to 1
  const double norm = opt.step(b, 0.1);
  CHECK(norm == doctest::Approx(5.0));
  // First step: m_hat = g, v_hat = g^2, so each update is lr * sign(g) up to eps.
  const double g0 = 0.6, g1 = 0.8;
  const auto upd = [&](double g) {
    const float m = static_cast<float>((1.0 - 0.9) * g);
    const float vv = static_cast<float>((1.0 - 0.98) * g * g);
    return 0.1 * (m / (1.0 - 0.9)) / (std::sqrt(vv / (1.0 - 0.98)) + 1e-8);
  };
  CHECK(w(0, 0) == doctest::Approx(1.0 - upd(g0)).epsilon(1e-6));
  CHECK(w(0, 1) == doctest::Approx(-1.0 - upd(g1)).epsilon(1e-6));

  // Second step with a small gradient: no clip, moments carry over.
  const float w0 = w(0, 0);
  v->grad(0, 0) = 0.1f;
  v->grad(0, 1) = 0.0f;
  opt.step(b, 0.1);
  const double m2 = 0.9 * (0.1 * g0) + 0.1 * 0.1;
  const double v2 = 0.98 * (0.02 * g0 * g0) + 0.02 * 0.01;
  const double expect = w0 - 0.1 * (m2 / (1.0 - 0.81)) / (std::sqrt(v2 / (1.0 - 0.98 * 0.98)) + 1e-8);
  CHECK(w(0, 0) == doctest::Approx(expect).epsilon(1e-5));
}

TEST_CASE("Adam rejects non-finite gradients") {
  Matrix w(1, 1);
  Adam opt;
  ParamBinding b;
  auto v = b.bind(w);
  v->ensure_grad();
  v->grad(0, 0) = std::nanf("");
  CHECK_THROWS(opt.step(b, 0.1));
}

TEST_CASE("teacher_trace records unshifted penultimate states and normalized teacher rows") {
  const ModelConfig cfg = tiny_config();
  const TargetModel t = TargetModel::random(cfg, 4);
  Rng rng(5);
  const TokenSequence s = sparrow::testing::random_sequence(cfg, 6, 5, rng);
  const auto ex = teacher_trace({s}, t)[0];
  const PrefillResult pre = t.prefill(s);
  REQUIRE(ex.h_vis_mid.rows() == 6);
  REQUIRE(ex.visual_raw.rows() == 6);
  REQUIRE(ex.e_txt.rows() == 5);
  REQUIRE(ex.teacher_probs.rows() == 5);
  REQUIRE(ex.teacher_probs.cols() == static_cast<std::size_t>(cfg.vocab_size));
  const auto& penult = pre.trace.states[static_cast<std::size_t>(cfg.num_layers - 1)];
  const auto& mid = pre.trace.states[static_cast<std::size_t>(cfg.num_layers / 2)];
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t j = 0; j < static_cast<std::size_t>(cfg.hidden_dim); ++j) {
      CHECK(ex.teacher_states(r, j) == penult(6 + r, j));
      CHECK(ex.h_txt_penult(r, j) == penult(6 + r, j));
      CHECK(ex.e_txt(r, j) == t.token_embedding(s.text[r])[j]);
    }
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t j = 0; j < static_cast<std::size_t>(cfg.hidden_dim); ++j) {
      CHECK(ex.h_vis_mid(r, j) == mid(r, j));
      CHECK(ex.visual_raw(r, j) == s.visual(r, j));
    }
  for (std::size_t r = 0; r < 5; ++r) {
    const auto row = ex.teacher_probs.row(r);
    CHECK(std::accumulate(row.begin(), row.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("MTP loss gradient matches central differences") {
  const ModelConfig c = gradcheck_config();
  const TargetModel t = TargetModel::random(c, 1);
  DraftModel d = DraftModel::random(t, 2);
  const TrainExample ex = gradcheck_example(t, 6);
  for (VisualSource src : {VisualSource::mid_states, VisualSource::zeros, VisualSource::raw}) {
    CAPTURE(to_string(src));
    MtpOptions o;
    o.depth = 2;
    o.alpha = 1.0;
    o.beta = 0.5;
    o.visual = src;
    ParamBinding b;
    const DraftVars vars = bind_draft(d, b);
    ag::backward(mtp_joint_loss_graph(ex, vars, d.shape(), o).total);
    const auto loss = [&] { return mtp_joint_loss(ex, d, o).total; };
    CHECK(gradient_error(d.fc, vars.fc->grad, loss, 3e-3) < 1e-3);
    CHECK(gradient_error(d.fc_bias, vars.fc_bias->grad, loss, 3e-3) < 1e-3);
    CHECK(gradient_error(d.layer.wq, vars.layer.wq->grad, loss, 3e-3) < 1e-3);
  }
}

TEST_CASE("MTP report totals decompose into weighted sums of per-pass terms") {
  const ModelConfig c = gradcheck_config();
  const TargetModel t = TargetModel::random(c, 1);
  DraftModel d = DraftModel::random(t, 2);
  const TrainExample ex = gradcheck_example(t, 5);
  MtpOptions o;
  o.depth = 3;
  o.alpha = 0.7;
  o.beta = 1.3;
  const LossReport r = mtp_joint_loss(ex, d, o);
  REQUIRE(r.token.size() == 3);
  REQUIRE(r.state.size() == 3);
  CHECK(r.pass1_token == r.token[0]);
  CHECK(r.pass2_state == r.state[1]);
  const double by_hand = 0.7 * (r.token[0] + r.token[1] + r.token[2]) + 1.3 * (r.state[0] + r.state[1] + r.state[2]);
  CHECK(decomposed_total(r, o) == doctest::Approx(by_hand).epsilon(1e-12));
  CHECK(r.total == doctest::Approx(by_hand).epsilon(1e-12));
  for (double v : r.token) CHECK(v > 0.0);
  for (double v : r.state) CHECK(v >= 0.0);

  // Pass 1 on its own does not depend on the pass count.
  MtpOptions one = o;
  one.depth = 1;
  const LossReport r1 = mtp_joint_loss(ex, d, one);
  CHECK(r1.token[0] == doctest::Approx(r.token[0]).epsilon(1e-12));
  CHECK(r1.total == doctest::Approx(0.7 * r.token[0] + 1.3 * r.state[0]).epsilon(1e-12));
}

TEST_CASE("draft training sequences drop the visual block in stage one only") {
  const ModelConfig cfg = tiny_config();
  const DraftTrainConfig tc = tiny_draft_train();
  const auto s1 = draft_training_sequences(tc, cfg, 1);
  const auto s2 = draft_training_sequences(tc, cfg, 2);
  REQUIRE(s1.size() == static_cast<std::size_t>(tc.examples));
  REQUIRE(s2.size() == static_cast<std::size_t>(tc.examples));
  for (const auto& s : s1) {
    CHECK(s.visual_len() == 0);
    CHECK(s.text_len() > 0);
  }
  for (const auto& s : s2) {
    CHECK(s.visual_len() >= static_cast<std::size_t>(tc.min_visual));
    CHECK(s.visual_len() <= static_cast<std::size_t>(tc.max_visual));
  }
  const auto again = draft_training_sequences(tc, cfg, 2);
  for (std::size_t i = 0; i < s2.size(); ++i) {
    CHECK(again[i].text == s2[i].text);
    CHECK(again[i].visual == s2[i].visual);
  }
}

TEST_CASE("target batches spread visual rows at a bounded stride") {
  ModelConfig cfg = tiny_config();
  cfg.max_positions = 200;
  TargetTrainConfig tc;
  tc.batch = 8;
  tc.min_visual = 4;
  tc.max_visual = 16;
  tc.max_queries = 2;
  tc.max_visual_stride = 40;
  const VisualTables tables = make_visual_tables(cfg);
  int dense = 0, spread = 0;
  for (std::uint64_t step = 0; step < 8; ++step) {
    const TargetBatch b = sample_target_batch(tc, cfg, tables, step);
    REQUIRE(b.positions.size() == b.seqs.size());
    for (std::size_t i = 0; i < b.seqs.size(); ++i) {
      const auto& pos = b.positions[i];
      const std::size_t lv = b.seqs[i].visual_len();
      REQUIRE(pos.size() == b.seqs[i].size());
      CHECK(pos.front() == 0);
      CHECK(pos.back() < cfg.max_positions);
      for (std::size_t r = 1; r < pos.size(); ++r) {
        CHECK(pos[r] > pos[r - 1]);
        if (r < lv) CHECK(pos[r] - pos[r - 1] == pos[1] - pos[0]);
        if (r > lv) CHECK(pos[r] == pos[r - 1] + 1);
      }
      (pos[1] == 1 ? dense : spread) += 1;
    }
  }
  CHECK(dense > 0);
  CHECK(spread > 0);

  tc.max_visual_stride = 1;
  const TargetBatch b = sample_target_batch(tc, cfg, tables, 0);
  for (const auto& pos : b.positions)
    for (std::size_t r = 0; r < pos.size(); ++r) CHECK(pos[r] == static_cast<int>(r));
}

TEST_CASE("target pretraining reduces the loss and is deterministic") {
  ModelConfig cfg = tiny_config();
  TargetTrainConfig tc;
  tc.steps = 40;
  tc.batch = 4;
  tc.lr = 1e-2;
  tc.warmup = 4;
  tc.min_visual = 4;
  tc.max_visual = 8;
  tc.max_queries = 2;
  tc.seed = 9;
  std::vector<TargetLogEntry> log;
  const TargetModel a = pretrain_target(cfg, tc, [&](const TargetLogEntry& e) { log.push_back(e); });
  REQUIRE(log.size() == 40);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 5; ++i) {
    head += log[static_cast<std::size_t>(i)].loss;
    tail += log[log.size() - 1 - static_cast<std::size_t>(i)].loss;
  }
  CHECK(tail < 0.8 * head);
  CHECK(log[0].lr == doctest::Approx(cosine_lr(1e-2, 0, 4, 40)));
  for (const auto& e : log) CHECK(std::isfinite(e.grad_norm));

  const TargetModel b = pretrain_target(cfg, tc);
  CHECK(a.embedding == b.embedding);
  CHECK(a.lm_head == b.lm_head);
}

TEST_CASE("two-stage draft training logs both stages and is deterministic") {
  const ModelConfig cfg = tiny_config();
  const TargetModel t = TargetModel::random(cfg, 6);
  const DraftTrainConfig tc = tiny_draft_train();
  std::vector<DraftLogEntry> log;
  const DraftModel a = train_draft_two_stage(t, tc, [&](const DraftLogEntry& e) { log.push_back(e); });
  REQUIRE(log.size() == 4);  // 2 steps per epoch, one epoch per stage
  CHECK(log[0].stage == 1);
  CHECK(log[3].stage == 2);
  for (const auto& e : log) {
    CHECK(e.loss.total == doctest::Approx(decomposed_total(e.loss, tc.mtp)).epsilon(1e-12));
    CHECK(std::isfinite(e.loss.total));
  }
  const DraftModel b = train_draft_two_stage(t, tc);
  CHECK(a.fc == b.fc);
  CHECK(a.layer.wq == b.layer.wq);

  DraftTrainConfig only1 = tc;
  only1.stage2_epochs = 0;
  std::vector<DraftLogEntry> log1;
  train_draft_two_stage(t, only1, [&](const DraftLogEntry& e) { log1.push_back(e); });
  REQUIRE(log1.size() == 2);
  for (const auto& e : log1) CHECK(e.stage == 1);

  DraftTrainConfig bad = tc;
  bad.examples = 0;
  CHECK_THROWS_AS(train_draft_two_stage(t, bad), std::invalid_argument);
}
