// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "sparrow/model.hpp"
#include "sparrow/numkernel.hpp"

namespace sparrow::testing {

// Small enough for exhaustive checks, large enough for the grounded task layout.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.num_layers = 4;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.vocab_size = 64;
  c.max_positions = 512;
  c.visual_alphabet = 4;
  c.ffn_dim = 32;
  c.rope_base = 10000.0;
  return c;
}

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (auto& v : m.values()) v = static_cast<float>(scale * rng.normal());
  return m;
}

inline TokenSequence random_sequence(const ModelConfig& cfg, std::size_t visual, std::size_t text, Rng& rng) {
  TokenSequence s;
  s.visual = random_matrix(visual, static_cast<std::size_t>(cfg.hidden_dim), rng, 0.5);
  if (visual == 0) s.visual = Matrix(0, static_cast<std::size_t>(cfg.hidden_dim));
  for (std::size_t i = 0; i < visual; ++i) s.symbols.push_back(static_cast<int>(rng.below(cfg.visual_alphabet)));
  for (std::size_t i = 0; i < text; ++i) s.text.push_back(static_cast<int>(rng.below(cfg.vocab_size)));
  return s;
}

inline std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("sparrow_test_" + name);
}

}  // namespace sparrow::testing
