// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#include "sparrow/specdec.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace sparrow {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void check_temperature(double t) {
  if (!(t >= 0.0) || !std::isfinite(t)) throw std::invalid_argument("temperature must be finite and >= 0");
}

int pick_token(std::span<const float> logits, double temperature, Rng& rng) {
  if (temperature == 0.0) return static_cast<int>(argmax(logits));
  return static_cast<int>(sample_categorical(softmax(logits, temperature), rng));
}

// Top `k` tokens of a distribution: descending probability, ties to the lower id.
std::vector<int> top_tokens(const std::vector<double>& p, int k) {
  std::vector<int> ids(p.size());
  std::iota(ids.begin(), ids.end(), 0);
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(k), ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n), ids.end(), [&](int a, int b) {
    if (p[static_cast<std::size_t>(a)] != p[static_cast<std::size_t>(b)])
      return p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(b)];
    return a < b;
  });
  ids.resize(n);
  return ids;
}

}  // namespace

void TreeConfig::validate() const {
  if (total_tokens < 1 || depth < 1 || width < 1)
    throw std::invalid_argument("tree config " + str() + ": total, depth and width must all be >= 1");
}

TreeConfig TreeConfig::parse(const std::string& s) {
  TreeConfig c;
  std::size_t a = s.find('-');
  std::size_t b = a == std::string::npos ? a : s.find('-', a + 1);
  if (a == std::string::npos || b == std::string::npos || s.find('-', b + 1) != std::string::npos)
    throw std::invalid_argument("tree config '" + s + "' is not of the form TOTAL-DEPTH-WIDTH");
  auto num = [&](const std::string& part) {
    if (part.empty() || part.size() > 6 || !std::all_of(part.begin(), part.end(), [](char ch) { return ch >= '0' && ch <= '9'; }))
      throw std::invalid_argument("tree config '" + s + "' has a non-numeric field");
    return std::stoi(part);
  };
  c.total_tokens = num(s.substr(0, a));
  c.depth = num(s.substr(a + 1, b - a - 1));
  c.width = num(s.substr(b + 1));
  c.validate();
  return c;
}

std::string TreeConfig::str() const {
  return std::to_string(total_tokens) + "-" + std::to_string(depth) + "-" + std::to_string(width);
}

std::vector<std::size_t> DraftTree::children(int node) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (nodes[i].parent == node) out.push_back(i);
  std::stable_sort(out.begin(), out.end(), [&](std::size_t a, std::size_t b) { return nodes[a].q > nodes[b].q; });
  return out;
}

int DraftTree::max_depth() const {
  int d = 0;
  for (const auto& n : nodes) d = std::max(d, n.depth);
  return d;
}

DraftTree grow_tree(DraftSession& session, int root_token, const TreeConfig& cfg) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(session.model().hidden());
  DraftTree tree;
  tree.root_token = root_token;
  struct Frontier {
    int node;
    double cum;
    std::vector<double> probs;
    std::vector<float> hidden;
  };
  std::vector<Frontier> frontier(1);
  frontier[0].node = -1;
  frontier[0].cum = 0.0;
  frontier[0].hidden = session.root(root_token, frontier[0].probs);
  std::vector<std::vector<std::size_t>> ancestry;  // per node: ancestors, top first
  for (int depth = 1; depth <= cfg.depth; ++depth) {
    const auto budget = static_cast<std::size_t>(cfg.total_tokens) - tree.nodes.size();
    if (budget == 0 || frontier.empty()) break;
    struct Candidate {
      std::size_t from;
      int token;
      double q;
      double cum;
    };
    std::vector<Candidate> pool;
    for (std::size_t f = 0; f < frontier.size(); ++f)
      for (int tok : top_tokens(frontier[f].probs, cfg.width)) {
        const double q = frontier[f].probs[static_cast<std::size_t>(tok)];
        pool.push_back({f, tok, q, frontier[f].cum + std::log(std::max(q, 1e-300))});
      }
    std::stable_sort(pool.begin(), pool.end(), [](const Candidate& a, const Candidate& b) { return a.cum > b.cum; });
    const std::size_t keep = std::min({static_cast<std::size_t>(cfg.width), budget, pool.size()});
    const std::size_t first = tree.nodes.size();
    std::vector<int> tokens;
    Matrix parent_hidden(keep, d);
    std::vector<std::size_t> ids;
    std::vector<std::vector<std::size_t>> anc;
    for (std::size_t i = 0; i < keep; ++i) {
      const Candidate& c = pool[i];
      const Frontier& f = frontier[c.from];
      tree.nodes.push_back({c.token, f.node, depth, c.q, c.cum});
      std::vector<std::size_t> a;
      if (f.node >= 0) {
        a = ancestry[static_cast<std::size_t>(f.node)];
        a.push_back(static_cast<std::size_t>(f.node));
      }
      ancestry.push_back(a);
      tokens.push_back(c.token);
      std::ranges::copy(f.hidden, parent_hidden.row(i).begin());
      ids.push_back(first + i);
      anc.push_back(std::move(a));
    }
    if (depth == cfg.depth || tree.nodes.size() >= static_cast<std::size_t>(cfg.total_tokens)) break;
    Matrix logits;
    const Matrix hidden = session.expand(tokens, parent_hidden, ids, anc, &logits);
    std::vector<Frontier> next(keep);
    for (std::size_t i = 0; i < keep; ++i) {
      next[i].node = static_cast<int>(first + i);
      next[i].cum = tree.nodes[first + i].cum_logp;
      next[i].probs = softmax(logits.row(i));
      next[i].hidden.assign(hidden.row(i).begin(), hidden.row(i).end());
    }
    frontier = std::move(next);
  }
  return tree;
}

LinearTree linearize_tree(const DraftTree& tree, std::size_t committed_len) {
  const std::size_t n = tree.nodes.size();
  for (std::size_t i = 0; i < n; ++i) {
    // Walking more than n parents means a cycle.
    int cur = static_cast<int>(i);
    for (std::size_t steps = 0; cur >= 0; ++steps) {
      if (steps > n) throw std::invalid_argument("linearize_tree: cyclic parent links");
      const int p = tree.nodes[static_cast<std::size_t>(cur)].parent;
      if (p >= static_cast<int>(n) || p < -1) throw std::invalid_argument("linearize_tree: parent index out of range");
      cur = p;
    }
    const int p = tree.nodes[i].parent;
    if (p >= static_cast<int>(i)) throw std::invalid_argument("linearize_tree: parent must precede child");
    const int expect = p < 0 ? 1 : tree.nodes[static_cast<std::size_t>(p)].depth + 1;
    if (tree.nodes[i].depth != expect) throw std::invalid_argument("linearize_tree: node depth inconsistent with parent");
  }
  LinearTree lt;
  const std::size_t m = n + 1;
  lt.tokens.push_back(tree.root_token);
  lt.positions.push_back(static_cast<int>(committed_len));
  lt.ancestor_mask.assign(m * m, 0);
  lt.ancestor_mask[0] = 1;
  for (std::size_t i = 0; i < n; ++i) {
    lt.tokens.push_back(tree.nodes[i].token);
    lt.positions.push_back(static_cast<int>(committed_len) + tree.nodes[i].depth);
    const std::size_t row = i + 1;
    lt.ancestor_mask[row * m + row] = 1;
    lt.ancestor_mask[row * m + 0] = 1;
    for (int cur = tree.nodes[i].parent; cur >= 0; cur = tree.nodes[static_cast<std::size_t>(cur)].parent)
      lt.ancestor_mask[row * m + static_cast<std::size_t>(cur) + 1] = 1;
  }
  return lt;
}

VerificationResult verify_greedy(const DraftTree& tree, const Matrix& logits) {
  if (logits.rows() != tree.nodes.size() + 1) throw std::invalid_argument("verify_greedy: need one logits row per node plus root");
  VerificationResult r;
  int cur = -1;
  while (true) {
    const auto best = static_cast<int>(argmax(logits.row(static_cast<std::size_t>(cur + 1))));
    bool moved = false;
    for (std::size_t c : tree.children(cur)) {
      const bool ok = tree.nodes[c].token == best;
      r.decisions.emplace_back(c, ok);
      if (ok) {
        r.accepted_path.push_back(c);
        cur = static_cast<int>(c);
        moved = true;
        break;
      }
    }
    if (!moved) {
      r.bonus_token = best;
      return r;
    }
  }
}

VerificationResult verify_sampling(const DraftTree& tree, const std::vector<std::vector<double>>& probs, Rng& rng) {
  if (probs.size() != tree.nodes.size() + 1) throw std::invalid_argument("verify_sampling: need one distribution per node plus root");
  for (const auto& p : probs) {
    double s = 0.0;
    for (double v : p) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("verify_sampling: invalid distribution");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6) throw std::invalid_argument("verify_sampling: distribution does not sum to 1");
  }
  VerificationResult r;
  int cur = -1;
  while (true) {
    std::vector<double> p = probs[static_cast<std::size_t>(cur + 1)];
    bool moved = false;
    // Candidates are deterministic top-k picks, i.e. point-mass proposals:
    // accept with probability p(c); on rejection remove c from p and renormalise.
    for (std::size_t c : tree.children(cur)) {
      const auto tok = static_cast<std::size_t>(tree.nodes[c].token);
      if (tok >= p.size()) throw std::invalid_argument("verify_sampling: token outside distribution");
      const bool ok = p[tok] > 0.0 && rng.uniform() < p[tok];
      r.decisions.emplace_back(c, ok);
      if (ok) {
        r.accepted_path.push_back(c);
        cur = static_cast<int>(c);
        moved = true;
        break;
      }
      const double rest = 1.0 - p[tok];
      p[tok] = 0.0;
      if (rest <= 0.0) break;
      double s = 0.0;
      for (double& v : p) s += v;
      for (double& v : p) v /= s;
    }
    if (!moved) {
      r.bonus_token = static_cast<int>(sample_categorical(p, rng));
      return r;
    }
  }
}

std::string to_string(PruneRanking r) { return r == PruneRanking::last_instruction ? "last_instruction" : "all_text"; }

PruneRanking parse_prune_ranking(const std::string& s) {
  if (s == "last_instruction") return PruneRanking::last_instruction;
  if (s == "all_text") return PruneRanking::all_text;
  throw std::invalid_argument("unknown prune ranking '" + s + "'");
}

double DecodeStats::tau() const {
  return target_calls == 0 ? 0.0 : static_cast<double>(generated_tokens) / static_cast<double>(target_calls);
}

std::vector<std::size_t> select_visual_rows(const TargetModel& target, const TokenSequence& prompt, double fraction,
                                            PruneRanking ranking) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::invalid_argument("prune fraction must be within [0, 1]");
  const std::size_t lv = prompt.visual_len();
  const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(lv)));
  std::vector<std::size_t> rows(lv);
  std::iota(rows.begin(), rows.end(), 0);
  if (keep >= lv) return rows;
  if (keep == 0) return {};
  if (prompt.text_len() == 0) throw std::invalid_argument("select_visual_rows: prompt has no text positions");
  const int last_layer = target.config().num_layers - 1;
  const std::size_t last = prompt.size() - 1;
  std::vector<double> score(lv, 0.0);
  PrefillOptions opts;
  opts.keep_trace = false;
  opts.observe_wants = [&](int layer, std::size_t row) {
    return layer == last_layer && (ranking == PruneRanking::all_text ? row >= lv : row == last);
  };
  opts.observe = [&](int, std::size_t, const KeySet& keys, const std::vector<double>& p) {
    const std::size_t n = keys.count();
    const std::size_t heads = p.size() / n;
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t j = 0; j < n && keys.begin + j < lv; ++j) score[keys.begin + j] += p[h * n + j];
  };
  target.prefill(prompt, opts);
  std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  rows.resize(keep);
  std::sort(rows.begin(), rows.end());
  return rows;
}

DecodeResult vanilla_decode(const TargetModel& target, const TokenSequence& prompt, double temperature, int max_tokens,
                            int stop_token, std::uint64_t seed) {
  check_temperature(temperature);
  if (max_tokens < 0) throw std::invalid_argument("max_tokens must be >= 0");
  if (prompt.size() + static_cast<std::size_t>(max_tokens) > static_cast<std::size_t>(target.config().max_positions))
    throw std::invalid_argument("decode: prompt + max_tokens exceeds max_positions");
  DecodeResult r;
  const auto t0 = Clock::now();
  if (max_tokens == 0) return r;
  Rng rng(seed);
  PrefillOptions po;
  po.keep_trace = false;
  PrefillResult pre = target.prefill(prompt, po);
  r.stats.prefill_time = seconds_since(t0);
  r.stats.target_calls = 1;
  const auto t1 = Clock::now();
  int tok = pick_token(pre.logits.row(pre.logits.rows() - 1), temperature, rng);
  r.tokens.push_back(tok);
  while (static_cast<int>(r.tokens.size()) < max_tokens && tok != stop_token) {
    const auto logits = target.decode_step(pre.cache, tok);
    ++r.stats.target_calls;
    tok = pick_token(logits, temperature, rng);
    r.tokens.push_back(tok);
  }
  r.stats.decode_time = seconds_since(t1);
  r.stats.wall_time = seconds_since(t0);
  r.stats.generated_tokens = r.tokens.size();
  return r;
}

DecodeResult decode(const TargetModel& target, const DraftModel& draft, const TokenSequence& prompt,
                    const DecodeOptions& opts) {
  check_temperature(opts.temperature);
  opts.tree.validate();
  if (opts.max_tokens < 0) throw std::invalid_argument("max_tokens must be >= 0");
  const ModelConfig& cfg = target.config();
  if (prompt.size() + static_cast<std::size_t>(opts.max_tokens) > static_cast<std::size_t>(cfg.max_positions))
    throw std::invalid_argument("decode: prompt + max_tokens exceeds max_positions");
  DecodeResult r;
  const auto t0 = Clock::now();
  if (opts.max_tokens == 0) return r;
  Rng rng(opts.seed);
  const double temp = opts.temperature;

  // Baseline visual rows are chosen before the timed prefill.
  std::vector<std::size_t> vis_rows;
  if (opts.mode == DraftInputMode::full_visual) {
    vis_rows.resize(prompt.visual_len());
    std::iota(vis_rows.begin(), vis_rows.end(), 0);
  } else if (opts.mode == DraftInputMode::pruned) {
    vis_rows = select_visual_rows(target, prompt, opts.prune_fraction, opts.ranking);
  }

  const auto tp = Clock::now();
  PrefillResult pre = target.prefill(prompt);
  r.stats.prefill_time = seconds_since(tp);
  r.stats.target_calls = 1;
  const auto t1 = Clock::now();
  const auto& last_logits = pre.logits.row(pre.logits.rows() - 1);
  int root = pick_token(last_logits, temp, rng);
  r.tokens.push_back(root);
  auto done = [&] { return static_cast<int>(r.tokens.size()) >= opts.max_tokens || r.tokens.back() == opts.stop_token; };

  if (!done()) {
    DraftSession session(draft, opts.mode);
    const auto d = static_cast<std::size_t>(cfg.hidden_dim);
    Matrix vis(vis_rows.size(), d);
    std::vector<int> vis_pos;
    for (std::size_t i = 0; i < vis_rows.size(); ++i) {
      std::ranges::copy(prompt.visual.row(vis_rows[i]), vis.row(i).begin());
      vis_pos.push_back(static_cast<int>(vis_rows[i]));
    }
    const StateSplit states = extract_states(pre.trace, prompt, cfg);
    session.begin(vis, vis_pos, static_cast<int>(prompt.visual_len()), prompt.text, states.h_txt_penult);
    pre.trace.states.clear();

    while (!done()) {
      const std::size_t len = pre.cache.length();
      TreeConfig tc = opts.tree;
      // Keep every tree position inside the model's range.
      const int room = cfg.max_positions - 1 - static_cast<int>(len);
      if (room < 0) throw std::invalid_argument("decode: sequence exceeds max_positions");
      tc.depth = std::min(tc.depth, room);
      DraftTree tree;
      if (tc.depth >= 1) {
        tree = grow_tree(session, root, tc);
      } else {
        std::vector<double> ignored;
        session.root(root, ignored);
        tree.root_token = root;
      }
      ++r.stats.draft_steps;
      const LinearTree lt = linearize_tree(tree, len);
      const VerifyResult vr = target.verify_batch(pre.cache, lt.tokens, lt.ancestor_mask, lt.positions);
      ++r.stats.target_calls;
      VerificationResult ver;
      if (temp == 0.0) {
        ver = verify_greedy(tree, vr.logits);
      } else {
        std::vector<std::vector<double>> probs;
        for (std::size_t i = 0; i < vr.logits.rows(); ++i) probs.push_back(softmax(vr.logits.row(i), temp));
        ver = verify_sampling(tree, probs, rng);
      }
      std::vector<std::size_t> keep{0};
      std::vector<int> committed{root};
      for (std::size_t node : ver.accepted_path) {
        keep.push_back(node + 1);
        committed.push_back(tree.nodes[node].token);
      }
      target.commit_prefix(pre.cache, keep);
      Matrix kept_states(keep.size(), d);
      for (std::size_t i = 0; i < keep.size(); ++i) std::ranges::copy(vr.penult.row(keep[i]), kept_states.row(i).begin());
      session.commit(committed, kept_states);
      r.accept_lengths.push_back(ver.accepted_len());
      for (std::size_t node : ver.accepted_path) {
        if (done()) break;
        r.tokens.push_back(tree.nodes[node].token);
      }
      if (!done()) r.tokens.push_back(ver.bonus_token);
      root = ver.bonus_token;
    }
    r.stats.draft_multiplies = session.cost().multiplies;
    r.stats.draft_cache_rows = session.cache_rows();
  }
  r.stats.decode_time = seconds_since(t1);
  r.stats.wall_time = seconds_since(t0);
  r.stats.generated_tokens = r.tokens.size();
  return r;
}

std::string decode_record_json(const std::string& prompt_id, const DecodeResult& r) {
  nlohmann::json j;
  j["prompt_id"] = prompt_id;
  j["tokens"] = r.tokens;
  j["tau"] = r.stats.tau();
  j["target_calls"] = r.stats.target_calls;
  j["prefill_time_s"] = r.stats.prefill_time;
  j["decode_time_s"] = r.stats.decode_time;
  j["wall_time_s"] = r.stats.wall_time;
  return j.dump();
}

}  // namespace sparrow
