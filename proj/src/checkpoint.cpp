// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#include "sparrow/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace sparrow {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

const char* const kLayerNames[] = {"attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "w_down"};

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

const Matrix& Container::tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.value;
  throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
}

void write_container(const std::filesystem::path& path, const Container& c) {
  if (c.kind.size() != 4) throw std::invalid_argument("checkpoint: kind tag must be 4 bytes");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  out.write("SPRW", 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  out.write(c.kind.data(), 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.fields.size()));
  for (auto f : c.fields) put<std::int64_t>(out, f);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint32_t>(out, 2);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.cols()));
    out.write(reinterpret_cast<const char*>(t.value.data()), static_cast<std::streamsize>(t.value.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "SPRW", 4) != 0) throw std::runtime_error("checkpoint: bad magic in " + path.string());
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  Container c;
  c.kind.resize(4);
  in.read(c.kind.data(), 4);
  const auto nf = get<std::uint32_t>(in);
  if (nf > 1024) throw std::runtime_error("checkpoint: implausible field count");
  for (std::uint32_t i = 0; i < nf; ++i) c.fields.push_back(get<std::int64_t>(in));
  const auto nt = get<std::uint32_t>(in);
  if (nt > 65536) throw std::runtime_error("checkpoint: implausible tensor count");
  for (std::uint32_t i = 0; i < nt; ++i) {
    NamedTensor t;
    const auto len = get<std::uint32_t>(in);
    if (len > 4096) throw std::runtime_error("checkpoint: implausible tensor name length");
    t.name.resize(len);
    in.read(t.name.data(), len);
    const auto ndims = get<std::uint32_t>(in);
    if (ndims != 2) throw std::runtime_error("checkpoint: tensor '" + t.name + "' is not 2-D");
    const auto r = get<std::uint32_t>(in);
    const auto cols = get<std::uint32_t>(in);
    if (static_cast<std::uint64_t>(r) * cols > (1ULL << 28)) throw std::runtime_error("checkpoint: tensor too large");
    std::vector<float> data(static_cast<std::size_t>(r) * cols);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!in) throw std::runtime_error("checkpoint: truncated tensor '" + t.name + "'");
    t.value = Matrix(r, cols, std::move(data));
    if (!t.value.all_finite()) throw std::runtime_error("checkpoint: non-finite values in '" + t.name + "'");
    c.tensors.push_back(std::move(t));
  }
  return c;
}

std::vector<std::int64_t> config_fields(const ModelConfig& cfg) {
  if (cfg.rope_base != std::round(cfg.rope_base)) throw std::invalid_argument("checkpoint: rope_base must be integral");
  return {cfg.num_layers, cfg.hidden_dim,      cfg.num_heads, cfg.vocab_size,
          cfg.max_positions, cfg.visual_alphabet, cfg.ffn_dim, static_cast<std::int64_t>(cfg.rope_base)};
}

ModelConfig config_from_fields(const std::vector<std::int64_t>& f) {
  if (f.size() != 8) throw std::runtime_error("checkpoint: expected 8 config fields, got " + std::to_string(f.size()));
  ModelConfig cfg;
  cfg.num_layers = static_cast<int>(f[0]);
  cfg.hidden_dim = static_cast<int>(f[1]);
  cfg.num_heads = static_cast<int>(f[2]);
  cfg.vocab_size = static_cast<int>(f[3]);
  cfg.max_positions = static_cast<int>(f[4]);
  cfg.visual_alphabet = static_cast<int>(f[5]);
  cfg.ffn_dim = static_cast<int>(f[6]);
  cfg.rope_base = static_cast<double>(f[7]);
  cfg.validate();
  return cfg;
}

std::vector<NamedTensor> layer_tensors(const LayerWeights& w, const std::string& prefix) {
  std::vector<NamedTensor> out;
  const auto ts = w.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) out.push_back({prefix + kLayerNames[i], *ts[i]});
  return out;
}

void load_layer(LayerWeights& w, const Container& c, const std::string& prefix) {
  const auto ts = w.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const Matrix& src = c.tensor(prefix + kLayerNames[i]);
    if (src.rows() != ts[i]->rows() || src.cols() != ts[i]->cols())
      throw std::runtime_error("checkpoint: shape mismatch for '" + prefix + kLayerNames[i] + "'");
    *ts[i] = src;
  }
}

void save_target(const std::filesystem::path& path, const TargetModel& m) {
  Container c;
  c.kind = "TRGT";
  c.fields = config_fields(m.config());
  c.tensors.push_back({"embedding", m.embedding});
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto lt = layer_tensors(m.layers[l], "layers." + std::to_string(l) + ".");
    c.tensors.insert(c.tensors.end(), lt.begin(), lt.end());
  }
  c.tensors.push_back({"final_norm", m.final_norm});
  c.tensors.push_back({"lm_head", m.lm_head});
  write_container(path, c);
}

TargetModel load_target(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.kind != "TRGT") throw std::runtime_error("checkpoint: " + path.string() + " is not a target checkpoint");
  TargetModel m = make_target(config_from_fields(c.fields));
  auto take = [&](Matrix& dst, const std::string& name) {
    const Matrix& src = c.tensor(name);
    if (src.rows() != dst.rows() || src.cols() != dst.cols())
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
    dst = src;
  };
  take(m.embedding, "embedding");
  for (std::size_t l = 0; l < m.layers.size(); ++l) load_layer(m.layers[l], c, "layers." + std::to_string(l) + ".");
  take(m.final_norm, "final_norm");
  take(m.lm_head, "lm_head");
  return m;
}

}  // namespace sparrow
