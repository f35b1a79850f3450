// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#include "sparrow/bench.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace sparrow {

std::string to_string(Method m) {
  switch (m) {
    case Method::sparrow: return "sparrow";
    case Method::full_visual_draft: return "full_visual_draft";
    case Method::pruned_draft: return "pruned_draft";
    case Method::vanilla: return "vanilla";
  }
  return "?";
}

Method parse_method(const std::string& s) {
  if (s == "sparrow") return Method::sparrow;
  if (s == "full_visual_draft" || s == "baseline") return Method::full_visual_draft;
  if (s == "pruned_draft" || s == "pruned") return Method::pruned_draft;
  if (s == "vanilla") return Method::vanilla;
  throw std::invalid_argument("unknown method '" + s + "'");
}

void derive_summary(MethodSummary& s, const MethodSummary* vanilla) {
  s.tau = s.target_calls == 0 ? 0.0 : static_cast<double>(s.generated_tokens) / static_cast<double>(s.target_calls);
  s.prefill_ratio = s.wall_time > 0.0 ? s.prefill_time / s.wall_time : 0.0;
  const std::size_t decode_calls = s.target_calls > s.prompts ? s.target_calls - s.prompts : 0;
  s.latency_per_step = decode_calls == 0 ? 0.0 : s.decode_time / static_cast<double>(decode_calls);
  s.dsr = (vanilla && s.decode_time > 0.0) ? vanilla->decode_time / s.decode_time : 0.0;
  s.esr = (vanilla && s.wall_time > 0.0) ? vanilla->wall_time / s.wall_time : 0.0;
}

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

DecodeResult run_once(const TargetModel& target, const DraftModel* draft, const Prompt& p, Method m,
                      const EngineConfig& cfg, std::uint64_t seed) {
  if (m == Method::vanilla) return vanilla_decode(target, p.seq, cfg.temperature, cfg.max_tokens, cfg.stop_token, seed);
  if (!draft) throw std::invalid_argument("run_benchmark: method " + to_string(m) + " needs a draft checkpoint");
  DecodeOptions o;
  o.tree = cfg.tree;
  o.temperature = cfg.temperature;
  o.max_tokens = cfg.max_tokens;
  o.stop_token = cfg.stop_token;
  o.seed = seed;
  o.prune_fraction = cfg.prune_fraction;
  o.ranking = cfg.ranking;
  o.mode = m == Method::sparrow ? DraftInputMode::vata
           : m == Method::full_visual_draft ? DraftInputMode::full_visual
                                            : DraftInputMode::pruned;
  return decode(target, *draft, p.seq, o);
}

}  // namespace

BenchmarkReport run_benchmark(const TargetModel& target, const DraftModel* draft, const std::vector<Prompt>& prompts,
                              int visual_len, const std::vector<Method>& methods, const EngineConfig& cfg) {
  if (cfg.reps < 1 || cfg.warmup < 0) throw std::invalid_argument("run_benchmark: reps must be >= 1, warmup >= 0");
  BenchmarkReport report;
  for (Method m : methods) {
    MethodSummary s;
    s.method = m;
    s.visual_len = visual_len;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      const std::uint64_t seed = Rng(cfg.seed).fork(i).next_u64();
      for (int w = 0; w < cfg.warmup; ++w) run_once(target, draft, prompts[i], m, cfg, seed);
      std::vector<double> pre, dec, wall;
      DecodeResult first;
      for (int r = 0; r < cfg.reps; ++r) {
        DecodeResult res = run_once(target, draft, prompts[i], m, cfg, seed);
        pre.push_back(res.stats.prefill_time);
        dec.push_back(res.stats.decode_time);
        wall.push_back(res.stats.wall_time);
        if (r == 0) first = std::move(res);
      }
      RunRecord rec;
      rec.method = m;
      rec.visual_len = visual_len;
      rec.prompt_index = i;
      rec.tokens = first.tokens;
      rec.stats = first.stats;
      rec.stats.prefill_time = median(pre);
      rec.stats.decode_time = median(dec);
      rec.stats.wall_time = median(wall);
      s.prompts += 1;
      s.generated_tokens += rec.stats.generated_tokens;
      s.target_calls += rec.stats.target_calls;
      s.prefill_time += rec.stats.prefill_time;
      s.decode_time += rec.stats.decode_time;
      s.wall_time += rec.stats.wall_time;
      report.runs.push_back(std::move(rec));
    }
    report.summary.push_back(s);
  }
  const MethodSummary* van = nullptr;
  for (const auto& s : report.summary)
    if (s.method == Method::vanilla) van = &s;
  MethodSummary van_copy;
  if (van) van_copy = *van;
  for (auto& s : report.summary) derive_summary(s, van ? &van_copy : nullptr);
  return report;
}

std::vector<TruncationPoint> layer_truncation_experiment(const TargetModel& target, const std::vector<Prompt>& prompts) {
  std::vector<TruncationPoint> out;
  for (int x = 0; x <= target.config().num_layers; ++x) out.push_back({x, grounded_accuracy(target, prompts, x)});
  return out;
}

AttentionFlow attention_flow_experiment(const TargetModel& target, const std::vector<Prompt>& prompts) {
  const ModelConfig& cfg = target.config();
  AttentionFlow f;
  f.layers = cfg.num_layers;
  f.heads = cfg.num_heads;
  const auto cells = static_cast<std::size_t>(f.layers * f.heads);
  f.visual.assign(cells, 0.0);
  f.text.assign(cells, 0.0);
  if (prompts.empty()) return f;
  for (const auto& p : prompts) {
    if (p.seq.text_len() == 0) throw std::invalid_argument("attention_flow_experiment: prompt without text positions");
    const std::size_t last = p.seq.size() - 1;
    const std::size_t lv = p.seq.visual_len();
    PrefillOptions opts;
    opts.keep_trace = false;
    opts.observe_wants = [last](int, std::size_t row) { return row == last; };
    opts.observe = [&](int layer, std::size_t, const KeySet& keys, const std::vector<double>& probs) {
      const std::size_t n = keys.count();
      for (int h = 0; h < f.heads; ++h) {
        double vis = 0.0, txt = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double pj = probs[static_cast<std::size_t>(h) * n + j];
          (keys.begin + j < lv ? vis : txt) += pj;
        }
        const auto cell = static_cast<std::size_t>(layer * f.heads + h);
        f.visual[cell] += vis;
        f.text[cell] += txt;
      }
    };
    target.prefill(p.seq, opts);
  }
  const double inv = 1.0 / static_cast<double>(prompts.size());
  for (auto& v : f.visual) v *= inv;
  for (auto& v : f.text) v *= inv;
  return f;
}

RetentionCurves retention_experiment(const TargetModel& target, const std::vector<Prompt>& prompts) {
  const auto levels = static_cast<std::size_t>(target.config().num_layers) + 1;
  RetentionCurves c;
  c.visual.assign(levels, 0.0);
  c.text.assign(levels, 0.0);
  std::size_t nv = 0, nt = 0;
  for (const auto& p : prompts) {
    const PrefillResult pre = target.prefill(p.seq);
    const Matrix& base = pre.trace.states[0];
    for (std::size_t i = 0; i < p.seq.size(); ++i) {
      const bool vis = p.seq.modality(i) == Modality::visual;
      auto& curve = vis ? c.visual : c.text;
      for (std::size_t l = 0; l < levels; ++l) curve[l] += cosine_similarity(pre.trace.states[l].row(i), base.row(i));
      (vis ? nv : nt) += 1;
    }
  }
  for (auto& v : c.visual) v = nv ? v / static_cast<double>(nv) : 0.0;
  for (auto& v : c.text) v = nt ? v / static_cast<double>(nt) : 0.0;
  return c;
}

std::vector<PruningPoint> pruning_sweep(const TargetModel& target, const DraftModel& draft,
                                        const std::vector<Prompt>& prompts, const std::vector<double>& fractions,
                                        const EngineConfig& cfg) {
  std::vector<PruningPoint> out;
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw std::invalid_argument("pruning_sweep: fraction outside [0, 1]");
    EngineConfig c = cfg;
    c.prune_fraction = f;
    c.reps = 1;
    c.warmup = 0;
    const auto rep = run_benchmark(target, &draft, prompts, 0, {Method::pruned_draft}, c);
    const auto& s = rep.summary.front();
    out.push_back({f, s.tau, s.generated_tokens, s.target_calls});
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string run_record_json(const RunRecord& r) {
  nlohmann::json j;
  j["method"] = to_string(r.method);
  j["visual_len"] = r.visual_len;
  j["prompt_index"] = r.prompt_index;
  j["tokens"] = r.tokens;
  j["generated_tokens"] = r.stats.generated_tokens;
  j["target_calls"] = r.stats.target_calls;
  j["tau"] = r.stats.tau();
  j["prefill_time_s"] = r.stats.prefill_time;
  j["decode_time_s"] = r.stats.decode_time;
  j["wall_time_s"] = r.stats.wall_time;
  j["draft_multiplies"] = r.stats.draft_multiplies;
  j["draft_cache_rows"] = r.stats.draft_cache_rows;
  return j.dump();
}

std::string summary_json(const MethodSummary& s) {
  nlohmann::json j;
  j["method"] = to_string(s.method);
  j["visual_len"] = s.visual_len;
  j["prompts"] = s.prompts;
  j["generated_tokens"] = s.generated_tokens;
  j["target_calls"] = s.target_calls;
  j["prefill_time_s"] = s.prefill_time;
  j["decode_time_s"] = s.decode_time;
  j["wall_time_s"] = s.wall_time;
  j["tau"] = s.tau;
  j["prefill_ratio"] = s.prefill_ratio;
  j["latency_per_step_s"] = s.latency_per_step;
  j["dsr"] = s.dsr;
  j["esr"] = s.esr;
  return j.dump();
}

namespace {

std::ofstream open_csv(const std::filesystem::path& path, const char* header) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << header << '\n';
  return out;
}

}  // namespace

void write_fig1a_csv(const std::filesystem::path& path, const std::vector<MethodSummary>& rows) {
  auto out = open_csv(path, "method,visual_len,tau,generated_tokens,target_calls");
  for (const auto& s : rows)
    out << to_string(s.method) << ',' << s.visual_len << ',' << format_double(s.tau) << ',' << s.generated_tokens << ','
        << s.target_calls << '\n';
}

void write_table5_csv(const std::filesystem::path& path, const std::vector<MethodSummary>& rows) {
  auto out = open_csv(path,
                      "method,visual_len,prompts,generated_tokens,target_calls,prefill_time_s,decode_time_s,"
                      "wall_time_s,tau,prefill_ratio,latency_per_step_s,dsr,esr");
  for (const auto& s : rows)
    out << to_string(s.method) << ',' << s.visual_len << ',' << s.prompts << ',' << s.generated_tokens << ','
        << s.target_calls << ',' << format_double(s.prefill_time) << ',' << format_double(s.decode_time) << ','
        << format_double(s.wall_time) << ',' << format_double(s.tau) << ',' << format_double(s.prefill_ratio) << ','
        << format_double(s.latency_per_step) << ',' << format_double(s.dsr) << ',' << format_double(s.esr) << '\n';
}

void write_fig3a_csv(const std::filesystem::path& path, const std::vector<TruncationPoint>& pts) {
  auto out = open_csv(path, "layer_x,accuracy,correct,total");
  for (const auto& p : pts)
    out << p.layer_x << ',' << format_double(p.result.accuracy()) << ',' << p.result.correct << ',' << p.result.total << '\n';
}

void write_fig3b_csv(const std::filesystem::path& path, const AttentionFlow& f) {
  auto out = open_csv(path, "layer,head,visual_attention,text_attention");
  for (int l = 0; l < f.layers; ++l)
    for (int h = 0; h < f.heads; ++h) {
      const auto cell = static_cast<std::size_t>(l * f.heads + h);
      out << l << ',' << h << ',' << format_double(f.visual[cell]) << ',' << format_double(f.text[cell]) << '\n';
    }
}

void write_retention_csv(const std::filesystem::path& path, const RetentionCurves& c) {
  auto out = open_csv(path, "layer,visual_retention,text_retention");
  for (std::size_t l = 0; l < c.visual.size(); ++l)
    out << l << ',' << format_double(c.visual[l]) << ',' << format_double(c.text[l]) << '\n';
}

void write_pruning_csv(const std::filesystem::path& path, const std::vector<PruningPoint>& pts) {
  auto out = open_csv(path, "fraction,tau,generated_tokens,target_calls");
  for (const auto& p : pts)
    out << format_double(p.fraction) << ',' << format_double(p.tau) << ',' << p.generated_tokens << ',' << p.target_calls << '\n';
}

}  // namespace sparrow
