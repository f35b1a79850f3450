// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#include "sparrow/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace sparrow {

double Adam::step(const ParamBinding& binding, double lr) {
  const auto& weights = binding.weights();
  const auto& leaves = binding.leaves();
  if (m_.empty()) {
    for (const Matrix* w : weights) {
      m_.emplace_back(w->rows(), w->cols());
      v_.emplace_back(w->rows(), w->cols());
    }
  }
  if (m_.size() != weights.size()) throw std::logic_error("Adam: parameter set changed between steps");
  double sq = 0.0;
  for (const auto& leaf : leaves)
    for (float g : leaf->grad.values()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw std::runtime_error("Adam: non-finite gradient");
  const double scale = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < weights.size(); ++p) {
    Matrix& w = *weights[p];
    const Matrix& g = leaves[p]->grad;
    if (g.size() != w.size()) continue;  // parameter unused by this graph
    auto m = m_[p].values();
    auto v = v_[p].values();
    auto wv = w.values();
    auto gv = g.values();
    for (std::size_t i = 0; i < wv.size(); ++i) {
      const double gi = gv[i] * scale;
      m[i] = static_cast<float>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi);
      v[i] = static_cast<float>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi);
      wv[i] -= static_cast<float>(lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps));
    }
  }
  return norm;
}

}  // namespace sparrow
