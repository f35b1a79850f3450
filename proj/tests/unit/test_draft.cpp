// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "sparrow/draft.hpp"
#include "test_util.hpp"

using namespace sparrow;
using sparrow::testing::random_matrix;
using sparrow::testing::random_sequence;
using sparrow::testing::tiny_config;

namespace {

Matrix embed_tokens(const TargetModel& t, const std::vector<int>& toks) {
  Matrix e(toks.size(), static_cast<std::size_t>(t.config().hidden_dim));
  for (std::size_t i = 0; i < toks.size(); ++i) std::ranges::copy(t.token_embedding(toks[i]), e.row(i).begin());
  return e;
}

double row_diff(std::span<const float> a, std::span<const float> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(static_cast<double>(a[i]) - b[i]));
  return d;
}

}  // namespace

TEST_CASE("hsr_fuse is an affine map of the concatenated inputs") {
  const TargetModel t = TargetModel::random(tiny_config(), 1);
  const DraftModel d = DraftModel::random(t, 2);
  Rng rng(3);
  const Matrix e = random_matrix(1, 16, rng), h = random_matrix(1, 16, rng);
  CostMeter cost;
  const auto z = hsr_fuse(e.row(0), h.row(0), d.fc, d.fc_bias, &cost);
  for (std::size_t j = 0; j < 16; ++j) {
    double ref = d.fc_bias(0, j);
    for (std::size_t k = 0; k < 16; ++k) ref += static_cast<double>(e(0, k)) * d.fc(k, j) + static_cast<double>(h(0, k)) * d.fc(16 + k, j);
    CHECK(z[j] == doctest::Approx(ref).epsilon(1e-5));
  }
  CHECK(cost.multiplies == 2u * 16u * 16u);
}

TEST_CASE("shift_states moves rows down and zeroes the first") {
  Rng rng(4);
  const Matrix s = random_matrix(4, 16, rng);
  const Matrix sh = shift_states(s);
  for (std::size_t j = 0; j < 16; ++j) CHECK(sh(0, j) == 0.0f);
  for (std::size_t r = 1; r < 4; ++r) CHECK(row_diff(sh.row(r), s.row(r - 1)) == 0.0);
}

TEST_CASE("input builders lay out visual rows before text with the right positions") {
  const TargetModel t = TargetModel::random(tiny_config(), 5);
  const DraftModel d = DraftModel::random(t, 6);
  Rng rng(7);
  const Matrix vis = random_matrix(3, 16, rng), e = random_matrix(4, 16, rng), h = random_matrix(4, 16, rng);
  const FusedInput in = build_init_input(vis, e, h, d);
  CHECK(in.visual_len() == 3);
  CHECK(in.text_len() == 4);
  CHECK(in.positions == std::vector<int>{0, 1, 2, 3, 4, 5, 6});
  CHECK(row_diff(in.rows.row(1), vis.row(1)) == 0.0);
  CHECK(row_diff(in.rows.row(3), hsr_fuse(e.row(0), h.row(0), d.fc, d.fc_bias)) == 0.0);
  const FusedInput txt = build_text_input(e, h, d);
  CHECK(txt.visual_len() == 0);
  CHECK(txt.positions == std::vector<int>{0, 1, 2, 3});
  CHECK_THROWS_AS(draft_forward(in, DraftMode::inference_vata, d), std::invalid_argument);
  CHECK_NOTHROW(draft_forward(in, DraftMode::training_full_causal, d));
}

TEST_CASE("training-mode forward agrees with the differentiable graph") {
  const TargetModel t = TargetModel::random(tiny_config(), 8);
  DraftModel d = DraftModel::random(t, 9);
  Rng rng(10);
  const Matrix vis = random_matrix(3, 16, rng), e = random_matrix(5, 16, rng), h = random_matrix(5, 16, rng);
  const FusedInput in = build_init_input(vis, e, h, d);
  const DraftOutput out = draft_forward(in, DraftMode::training_full_causal, d);

  ParamBinding b;
  const DraftVars v = bind_draft(d, b);
  const auto z = fuse_graph(v, ag::constant(e), ag::constant(h));
  const auto rows = ag::concat_rows(ag::constant(vis), z);
  const auto hidden = draft_layer_graph(v, d.shape(), rows, in.positions);
  const auto logits = head_graph(v, ag::slice_rows(hidden, 3, 8));
  CHECK(max_abs_diff(hidden->value, out.hidden) < 1e-5);
  CHECK(max_abs_diff(logits->value, out.logits) < 1e-4);
}

TEST_CASE("vata_attention attends over every cached entry") {
  Rng rng(11);
  KVStore kv(2, 8, 6);
  kv.resize(5);
  for (std::size_t s = 0; s < 5; ++s) kv.set(s, random_matrix(1, 16, rng).row(0), random_matrix(1, 16, rng).row(0));
  const Matrix q = random_matrix(1, 16, rng);
  std::vector<float> ref(16);
  attend(kv, q.row(0), KeySet{0, 5, {}}, ref);
  CHECK(row_diff(vata_attention(q.row(0), kv), ref) == 0.0);
}

TEST_CASE("session rows reproduce a batch forward over the same fused inputs") {
  const ModelConfig c = tiny_config();
  const TargetModel t = TargetModel::random(c, 12);
  const DraftModel d = DraftModel::random(t, 13);
  Rng rng(14);
  const TokenSequence prompt = random_sequence(c, 6, 5, rng);
  const auto pre = t.prefill(prompt);
  const Matrix states = extract_states(pre.trace, prompt, c).h_txt_penult;

  DraftSession s(d, DraftInputMode::vata);
  s.begin(Matrix(0, 16), {}, static_cast<int>(prompt.visual_len()), prompt.text, states);
  const int root_tok = 7;
  std::vector<double> probs;
  const auto root_hidden = s.root(root_tok, probs);

  // Batch oracle: text rows fuse e_t with the previous target state, the root
  // fuses its token with the last prompt state, all at compacted positions.
  std::vector<int> toks = prompt.text;
  toks.push_back(root_tok);
  Matrix ext = states;
  ext.append_row(states.row(states.rows() - 1));
  const auto batch = draft_forward(build_text_input(embed_tokens(t, toks), shift_states(ext), d),
                                   DraftMode::inference_vata, d);
  CHECK(row_diff(root_hidden, batch.hidden.row(toks.size() - 1)) < 1e-6);
  const auto ref_probs = softmax(batch.logits.row(toks.size() - 1));
  for (std::size_t v = 0; v < probs.size(); ++v) CHECK(probs[v] == doctest::Approx(ref_probs[v]).epsilon(1e-6));

  // Two siblings under the root each see committed rows, the root and themselves.
  Matrix parents(2, 16);
  std::ranges::copy(root_hidden, parents.row(0).begin());
  std::ranges::copy(root_hidden, parents.row(1).begin());
  const std::vector<int> kids = {3, 9};
  const std::vector<std::size_t> ids = {0, 1};
  Matrix logits;
  const Matrix h1 = s.expand(kids, parents, ids, {{}, {}}, &logits);
  for (std::size_t i = 0; i < 2; ++i) {
    std::vector<int> path = toks;
    path.push_back(kids[i]);
    // shift_states drops the last row, so the final row is a placeholder.
    Matrix hp = states;
    hp.append_row(std::span<const float>(root_hidden));
    hp.append_row(std::span<const float>(root_hidden));
    const auto ref = draft_forward(build_text_input(embed_tokens(t, path), shift_states(hp), d),
                                   DraftMode::inference_vata, d);
    CHECK(row_diff(h1.row(i), ref.hidden.row(path.size() - 1)) < 1e-6);
    CHECK(row_diff(logits.row(i), ref.logits.row(path.size() - 1)) < 1e-5);
  }
  // A grandchild of sibling 1 ignores sibling 0.
  Matrix gp(1, 16);
  std::ranges::copy(h1.row(1), gp.row(0).begin());
  const std::vector<int> gk = {5};
  const std::vector<std::size_t> gid = {2};
  const Matrix h2 = s.expand(gk, gp, gid, {{1}}, nullptr);
  std::vector<int> path = toks;
  path.push_back(kids[1]);
  path.push_back(5);
  Matrix hp = states;
  hp.append_row(std::span<const float>(root_hidden));
  hp.append_row(h1.row(1));
  hp.append_row(h1.row(1));
  const auto ref = draft_forward(build_text_input(embed_tokens(t, path), shift_states(hp), d),
                                 DraftMode::inference_vata, d);
  CHECK(row_diff(h2.row(0), ref.hidden.row(path.size() - 1)) < 1e-6);
}

TEST_CASE("commit refreshes accepted rows from target states") {
  const ModelConfig c = tiny_config();
  const TargetModel t = TargetModel::random(c, 15);
  const DraftModel d = DraftModel::random(t, 16);
  Rng rng(17);
  const TokenSequence prompt = random_sequence(c, 0, 4, rng);
  const Matrix states = random_matrix(4, 16, rng);
  DraftSession s(d, DraftInputMode::vata);
  s.begin(Matrix(0, 16), {}, 0, prompt.text, states);
  std::vector<double> probs;
  s.root(1, probs);
  const std::vector<int> accepted = {1, 2, 3};
  const Matrix new_states = random_matrix(3, 16, rng);
  s.commit(accepted, new_states);
  CHECK(s.committed_rows() == 7);
  CHECK(s.text_rows() == 7);
  const auto next_hidden = s.root(4, probs);

  // Same rows built in one batch from the full state history.
  std::vector<int> toks = prompt.text;
  toks.insert(toks.end(), accepted.begin(), accepted.end());
  toks.push_back(4);
  Matrix all = states;
  all.append_rows(new_states);
  all.append_row(new_states.row(2));
  const auto ref = draft_forward(build_text_input(embed_tokens(t, toks), shift_states(all), d),
                                 DraftMode::inference_vata, d);
  CHECK(row_diff(next_hidden, ref.hidden.row(toks.size() - 1)) < 1e-6);
}

TEST_CASE("full-visual mode with no visual rows equals text-anchored mode") {
  const ModelConfig c = tiny_config();
  const TargetModel t = TargetModel::random(c, 18);
  const DraftModel d = DraftModel::random(t, 19);
  Rng rng(20);
  const TokenSequence prompt = random_sequence(c, 0, 6, rng);
  const Matrix states = random_matrix(6, 16, rng);
  DraftSession a(d, DraftInputMode::vata), b(d, DraftInputMode::full_visual);
  a.begin(Matrix(0, 16), {}, 0, prompt.text, states);
  b.begin(Matrix(0, 16), {}, 0, prompt.text, states);
  std::vector<double> pa, pb;
  const auto ha = a.root(3, pa), hb = b.root(3, pb);
  CHECK(row_diff(ha, hb) <= 1e-6);
  for (std::size_t v = 0; v < pa.size(); ++v) CHECK(std::abs(pa[v] - pb[v]) <= 1e-6);
  CHECK(a.cost().multiplies == b.cost().multiplies);
}

TEST_CASE("full-visual draft cost grows with visual rows while text-anchored cost does not") {
  const ModelConfig c = tiny_config();
  const TargetModel t = TargetModel::random(c, 21);
  const DraftModel d = DraftModel::random(t, 22);
  Rng rng(23);
  const TokenSequence prompt = random_sequence(c, 0, 5, rng);
  const Matrix states = random_matrix(5, 16, rng);
  std::vector<std::uint64_t> vata_cost, full_cost;
  std::vector<std::size_t> vata_rows;
  for (std::size_t lv : {4u, 32u, 128u}) {
    const Matrix vis = random_matrix(lv, 16, rng);
    std::vector<int> pos(lv);
    for (std::size_t i = 0; i < lv; ++i) pos[i] = static_cast<int>(i);
    DraftSession a(d, DraftInputMode::vata), b(d, DraftInputMode::full_visual);
    a.begin(Matrix(0, 16), {}, static_cast<int>(lv), prompt.text, states);
    b.begin(vis, pos, static_cast<int>(lv), prompt.text, states);
    std::vector<double> p;
    const auto before_a = a.cost().multiplies, before_b = b.cost().multiplies;
    a.root(2, p);
    b.root(2, p);
    vata_cost.push_back(a.cost().multiplies - before_a);
    full_cost.push_back(b.cost().multiplies - before_b);
    vata_rows.push_back(a.cache_rows());
  }
  CHECK(vata_cost[0] == vata_cost[1]);
  CHECK(vata_cost[1] == vata_cost[2]);
  CHECK(vata_rows[0] == vata_rows[2]);
  CHECK(full_cost[0] < full_cost[1]);
  CHECK(full_cost[1] < full_cost[2]);
}

TEST_CASE("session argument checks") {
  const TargetModel t = TargetModel::random(tiny_config(), 24);
  const DraftModel d = DraftModel::random(t, 25);
  Rng rng(26);
  DraftSession s(d, DraftInputMode::vata);
  const std::vector<int> pos = {0};
  CHECK_THROWS_AS(s.begin(random_matrix(1, 16, rng), pos, 1, std::vector<int>{1}, random_matrix(1, 16, rng)),
                  std::invalid_argument);
  std::vector<double> p;
  CHECK_THROWS_AS(s.root(1, p), std::logic_error);
  CHECK(parse_draft_input_mode("full_visual") == DraftInputMode::full_visual);
  CHECK_THROWS(parse_draft_input_mode("sideways"));
}
