// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#include "sparrow/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include <json.hpp>

namespace sparrow {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto res = std::from_chars(v.data(), end, out);
  if (res.ec != std::errc() || res.ptr != end) throw ConfigError("bad value for '" + key + "': '" + v + "'");
  return out;
}

int parse_int(const std::string& key, const std::string& v) { return parse_number<int>(key, v); }
double parse_double(const std::string& key, const std::string& v) { return parse_number<double>(key, v); }
std::uint64_t parse_u64(const std::string& key, const std::string& v) { return parse_number<std::uint64_t>(key, v); }

template <typename T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + f(xs[i]);
  return out;
}

struct Key {
  const char* name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename F>
auto wrap(const char* key, F f) {
  // Library parse errors surface as config errors naming the key.
  return [key, f](RunConfig& c, const std::string& v) {
    try {
      f(c, v);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
  };
}

#define SPARROW_INT_KEY(NAME, FIELD)                                                  \
  Key{NAME, [](const RunConfig& c) { return std::to_string(c.FIELD); },              \
      [](RunConfig& c, const std::string& v) { c.FIELD = parse_int(NAME, v); }}
#define SPARROW_DOUBLE_KEY(NAME, FIELD)                                               \
  Key{NAME, [](const RunConfig& c) { return format_double(c.FIELD); },                \
      [](RunConfig& c, const std::string& v) { c.FIELD = parse_double(NAME, v); }}
#define SPARROW_SEED_KEY(NAME, FIELD)                                                 \
  Key{NAME, [](const RunConfig& c) { return std::to_string(c.FIELD); },              \
      [](RunConfig& c, const std::string& v) { c.FIELD = parse_u64(NAME, v); }}

const std::vector<Key>& keys() {
  static const std::vector<Key> k = {
      SPARROW_INT_KEY("model.layers", model.num_layers),
      SPARROW_INT_KEY("model.hidden", model.hidden_dim),
      SPARROW_INT_KEY("model.heads", model.num_heads),
      SPARROW_INT_KEY("model.vocab", model.vocab_size),
      SPARROW_INT_KEY("model.max_positions", model.max_positions),
      SPARROW_INT_KEY("model.alphabet", model.visual_alphabet),
      SPARROW_INT_KEY("model.ffn", model.ffn_dim),
      SPARROW_DOUBLE_KEY("model.rope_base", model.rope_base),
      SPARROW_SEED_KEY("target.seed", target_train.seed),
      SPARROW_INT_KEY("target.steps", target_train.steps),
      SPARROW_INT_KEY("target.batch", target_train.batch),
      SPARROW_DOUBLE_KEY("target.lr", target_train.lr),
      SPARROW_INT_KEY("target.warmup", target_train.warmup),
      SPARROW_INT_KEY("target.min_visual", target_train.min_visual),
      SPARROW_INT_KEY("target.max_visual", target_train.max_visual),
      SPARROW_INT_KEY("target.min_queries", target_train.min_queries),
      SPARROW_INT_KEY("target.max_queries", target_train.max_queries),
      SPARROW_INT_KEY("target.max_visual_stride", target_train.max_visual_stride),
      SPARROW_SEED_KEY("draft.seed", draft_train.seed),
      SPARROW_INT_KEY("draft.stage1_epochs", draft_train.stage1_epochs),
      SPARROW_INT_KEY("draft.stage2_epochs", draft_train.stage2_epochs),
      SPARROW_INT_KEY("draft.examples", draft_train.examples),
      SPARROW_INT_KEY("draft.batch", draft_train.batch),
      SPARROW_DOUBLE_KEY("draft.lr", draft_train.lr),
      SPARROW_INT_KEY("draft.warmup", draft_train.warmup),
      SPARROW_DOUBLE_KEY("draft.alpha", draft_train.mtp.alpha),
      SPARROW_DOUBLE_KEY("draft.beta", draft_train.mtp.beta),
      SPARROW_INT_KEY("draft.mtp_depth", draft_train.mtp.depth),
      Key{"draft.visual_source", [](const RunConfig& c) { return to_string(c.draft_train.mtp.visual); },
          wrap("draft.visual_source",
               [](RunConfig& c, const std::string& v) { c.draft_train.mtp.visual = parse_visual_source(v); })},
      SPARROW_INT_KEY("draft.min_visual", draft_train.min_visual),
      SPARROW_INT_KEY("draft.max_visual", draft_train.max_visual),
      SPARROW_INT_KEY("draft.min_queries", draft_train.min_queries),
      SPARROW_INT_KEY("draft.max_queries", draft_train.max_queries),
      Key{"workload.kind", [](const RunConfig& c) { return to_string(c.workload.kind); },
          wrap("workload.kind", [](RunConfig& c, const std::string& v) { c.workload.kind = parse_workload_kind(v); })},
      SPARROW_SEED_KEY("workload.seed", workload.seed),
      SPARROW_INT_KEY("workload.visual_len", workload.visual_len),
      SPARROW_INT_KEY("workload.queries", workload.queries),
      SPARROW_INT_KEY("workload.text_len", workload.text_len),
      SPARROW_INT_KEY("workload.num_prompts", workload.num_prompts),
      Key{"decode.tree", [](const RunConfig& c) { return c.engine.tree.str(); },
          wrap("decode.tree", [](RunConfig& c, const std::string& v) { c.engine.tree = TreeConfig::parse(v); })},
      SPARROW_DOUBLE_KEY("decode.temperature", engine.temperature),
      SPARROW_INT_KEY("decode.max_tokens", engine.max_tokens),
      Key{"decode.stop_at_eos", [](const RunConfig& c) { return std::string(c.stop_at_eos ? "true" : "false"); },
          [](RunConfig& c, const std::string& v) {
            if (v != "true" && v != "false") throw ConfigError("bad value for 'decode.stop_at_eos': '" + v + "'");
            c.stop_at_eos = v == "true";
          }},
      SPARROW_SEED_KEY("decode.seed", engine.seed),
      SPARROW_INT_KEY("bench.reps", engine.reps),
      SPARROW_INT_KEY("bench.warmup", engine.warmup),
      Key{"bench.visual_lens",
          [](const RunConfig& c) {
            return join<int>(c.bench_visual_lens, [](const int& x) { return std::to_string(x); });
          },
          [](RunConfig& c, const std::string& v) {
            c.bench_visual_lens.clear();
            for (const auto& s : split_list(v)) c.bench_visual_lens.push_back(parse_int("bench.visual_lens", s));
          }},
      Key{"bench.methods",
          [](const RunConfig& c) {
            return join<Method>(c.bench_methods, [](const Method& m) { return to_string(m); });
          },
          wrap("bench.methods",
               [](RunConfig& c, const std::string& v) {
                 c.bench_methods.clear();
                 for (const auto& s : split_list(v)) c.bench_methods.push_back(parse_method(s));
               })},
      Key{"bench.prune_fractions",
          [](const RunConfig& c) {
            return join<double>(c.prune_fractions, [](const double& x) { return format_double(x); });
          },
          [](RunConfig& c, const std::string& v) {
            c.prune_fractions.clear();
            for (const auto& s : split_list(v)) c.prune_fractions.push_back(parse_double("bench.prune_fractions", s));
          }},
      Key{"bench.prune_ranking", [](const RunConfig& c) { return to_string(c.engine.ranking); },
          wrap("bench.prune_ranking",
               [](RunConfig& c, const std::string& v) { c.engine.ranking = parse_prune_ranking(v); })},
      SPARROW_DOUBLE_KEY("bench.prune_fraction", engine.prune_fraction),
      SPARROW_INT_KEY("analyze.prompts", analyze_prompts),
      SPARROW_INT_KEY("analyze.visual_len", analyze_visual_len),
  };
  return k;
}

#undef SPARROW_INT_KEY
#undef SPARROW_DOUBLE_KEY
#undef SPARROW_SEED_KEY

}  // namespace

KeyValues parse_key_values(const std::string& text, const std::string& origin) {
  KeyValues kv;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (!kv.emplace(key, value).second) throw ConfigError(where + ": duplicate key '" + key + "'");
  }
  return kv;
}

KeyValues load_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str(), path.string());
}

void apply_overrides(KeyValues& kv, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    const std::string key = trim(o.substr(0, eq));
    if (key.empty()) throw ConfigError("override '" + o + "' has an empty key");
    kv[key] = trim(o.substr(eq + 1));
  }
}

std::vector<std::pair<std::string, std::string>> default_key_values() {
  return config_key_values(resolve_config({}, std::nullopt));
}

std::vector<std::pair<std::string, std::string>> config_key_values(const RunConfig& c) {
  std::vector<std::pair<std::string, std::string>> out{{"seed", std::to_string(c.seed)}};
  for (const auto& k : keys()) out.emplace_back(k.name, k.get(c));
  return out;
}

std::optional<std::uint64_t> seed_from_env() {
  const char* v = std::getenv("SPARROW_SEED");
  if (!v || !*v) return std::nullopt;
  return parse_u64("SPARROW_SEED", v);
}

RunConfig resolve_config(const KeyValues& kv, std::optional<std::uint64_t> seed) {
  for (const auto& [name, value] : kv) {
    if (name == "seed") continue;
    bool known = false;
    for (const auto& k : keys()) known = known || name == k.name;
    if (!known) throw ConfigError("unknown config key '" + name + "'");
  }
  RunConfig c;
  if (seed) {
    c.seed = *seed;
  } else if (const auto it = kv.find("seed"); it != kv.end()) {
    c.seed = parse_u64("seed", it->second);
  } else if (const auto env = seed_from_env()) {
    c.seed = *env;
  }
  c.target_train.seed = c.seed;
  c.draft_train.seed = c.seed;
  c.workload.seed = c.seed;
  c.engine.seed = c.seed;
  for (const auto& k : keys())
    if (const auto it = kv.find(k.name); it != kv.end()) k.set(c, it->second);
  try {
    c.model.validate();
    c.engine.tree.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  c.engine.stop_token = c.stop_at_eos ? TaskVocab(c.model).eos : -1;
  return c;
}

std::vector<PromptRecord> read_prompt_file(const std::filesystem::path& path, const ModelConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read prompt file " + path.string());
  std::vector<PromptRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    try {
      const auto j = nlohmann::json::parse(line);
      PromptRecord r;
      r.id = j.contains("id") ? j.at("id").get<std::string>() : std::to_string(out.size());
      r.seq.text = j.at("text").get<std::vector<int>>();
      r.seq.visual = Matrix(0, static_cast<std::size_t>(cfg.hidden_dim));
      if (j.contains("visual")) {
        for (const auto& row : j.at("visual")) {
          std::vector<float> v;
          for (const auto& x : row) v.push_back(static_cast<float>(x.get<double>()));
          if (v.size() != static_cast<std::size_t>(cfg.hidden_dim))
            throw ConfigError(where + ": visual row width does not match the model");
          r.seq.visual.append_row(v);
        }
      }
      if (j.contains("symbols")) r.seq.symbols = j.at("symbols").get<std::vector<int>>();
      else r.seq.symbols.assign(r.seq.visual_len(), 0);  // unlabeled rows
      r.seq.validate(cfg);
      out.push_back(std::move(r));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  return out;
}

void write_prompt_file(const std::filesystem::path& path, const std::vector<Prompt>& prompts) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& s = prompts[i].seq;
    nlohmann::json j;
    j["id"] = std::to_string(i);
    j["text"] = s.text;
    auto vis = nlohmann::json::array();
    for (std::size_t r = 0; r < s.visual_len(); ++r) {
      auto row = nlohmann::json::array();
      for (float x : s.visual.row(r)) row.push_back(static_cast<double>(x));
      vis.push_back(std::move(row));
    }
    j["visual"] = std::move(vis);
    j["symbols"] = s.symbols;
    out << j.dump() << '\n';
  }
}

}  // namespace sparrow
