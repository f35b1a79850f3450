// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#include "sparrow/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace sparrow {

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale) {
  Matrix m(r, c);
  for (float& v : m.values()) v = static_cast<float>(rng.normal() * scale);
  return m;
}
}  // namespace

float gelu_value(float x) {
  const double xd = x;
  return static_cast<float>(0.5 * xd * (1.0 + std::tanh(kGeluC * (xd + kGeluA * xd * xd * xd))));
}

double gelu_derivative(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

void rope_row(std::span<float> x, int position, int heads, double base, bool inverse) {
  if (heads <= 0 || x.size() % static_cast<std::size_t>(heads) != 0)
    throw std::invalid_argument("rope_row: width not divisible by heads");
  const std::size_t hd = x.size() / static_cast<std::size_t>(heads);
  if (hd % 2 != 0) throw std::invalid_argument("rope_row: head dim must be even");
  const std::size_t half = hd / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
    double theta = static_cast<double>(position) * freq;
    if (inverse) theta = -theta;
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    for (int h = 0; h < heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(h) * hd;
      const double a = x[off + i];
      const double b = x[off + i + half];
      x[off + i] = static_cast<float>(a * c - b * s);
      x[off + i + half] = static_cast<float>(a * s + b * c);
    }
  }
}

LayerWeights LayerWeights::random(const LayerShape& shape, Rng& rng, float out_scale) {
  const auto d = static_cast<std::size_t>(shape.hidden);
  const auto f = static_cast<std::size_t>(shape.ffn);
  const double s_in = 1.0 / std::sqrt(static_cast<double>(d));
  const double s_ffn = 1.0 / std::sqrt(static_cast<double>(f));
  LayerWeights w;
  w.attn_norm = Matrix(1, d, 1.0f);
  w.wq = random_matrix(d, d, rng, s_in);
  w.wk = random_matrix(d, d, rng, s_in);
  w.wv = random_matrix(d, d, rng, s_in);
  w.wo = random_matrix(d, d, rng, s_in * out_scale);
  w.mlp_norm = Matrix(1, d, 1.0f);
  w.w_up = random_matrix(d, f, rng, s_in);
  w.w_down = random_matrix(f, d, rng, s_ffn * out_scale);
  return w;
}

std::vector<Matrix*> LayerWeights::tensors() {
  return {&attn_norm, &wq, &wk, &wv, &wo, &mlp_norm, &w_up, &w_down};
}

std::vector<const Matrix*> LayerWeights::tensors() const {
  return {&attn_norm, &wq, &wk, &wv, &wo, &mlp_norm, &w_up, &w_down};
}

KVStore::KVStore(int heads, int head_dim, std::size_t capacity)
    : heads_(heads), head_dim_(head_dim) {
  if (heads <= 0 || head_dim <= 0) throw std::invalid_argument("KVStore: bad shape");
  reserve(capacity);
}

void KVStore::reserve(std::size_t capacity) {
  if (capacity <= capacity_) return;
  const std::size_t lanes = static_cast<std::size_t>(heads_) * head_dim_;
  std::vector<float> kt(lanes * capacity, 0.0f);
  for (std::size_t l = 0; l < lanes; ++l)
    std::copy(kt_.begin() + static_cast<std::ptrdiff_t>(l * capacity_),
              kt_.begin() + static_cast<std::ptrdiff_t>(l * capacity_ + size_),
              kt.begin() + static_cast<std::ptrdiff_t>(l * capacity));
  kt_ = std::move(kt);
  v_.resize(lanes * capacity, 0.0f);
  capacity_ = capacity;
}

void KVStore::resize(std::size_t size) {
  if (size > capacity_) reserve(std::max(size, capacity_ * 2));
  size_ = size;
}

void KVStore::set(std::size_t slot, std::span<const float> key, std::span<const float> value) {
  const std::size_t d = hidden();
  if (key.size() != d || value.size() != d) throw std::invalid_argument("KVStore::set: width mismatch");
  if (slot >= size_) resize(slot + 1);
  for (std::size_t l = 0; l < d; ++l) kt_[l * capacity_ + slot] = key[l];
  std::copy(value.begin(), value.end(), v_.begin() + static_cast<std::ptrdiff_t>(slot * d));
}

void KVStore::copy_slot(std::size_t from, std::size_t to) {
  if (from >= size_ || to >= size_) throw std::out_of_range("KVStore::copy_slot");
  const std::size_t d = hidden();
  for (std::size_t l = 0; l < d; ++l) kt_[l * capacity_ + to] = kt_[l * capacity_ + from];
  std::copy_n(v_.begin() + static_cast<std::ptrdiff_t>(from * d), d,
              v_.begin() + static_cast<std::ptrdiff_t>(to * d));
}

double KVStore::max_abs_diff(const KVStore& other, std::size_t n) const {
  if (n > size_ || n > other.size_ || hidden() != other.hidden())
    throw std::invalid_argument("KVStore::max_abs_diff: incompatible stores");
  double m = 0.0;
  const std::size_t d = hidden();
  for (std::size_t slot = 0; slot < n; ++slot)
    for (std::size_t l = 0; l < d; ++l) {
      m = std::max(m, std::abs(static_cast<double>(kt_[l * capacity_ + slot]) -
                               other.kt_[l * other.capacity_ + slot]));
      m = std::max(m, std::abs(static_cast<double>(v_[slot * d + l]) - other.v_[slot * d + l]));
    }
  return m;
}

void attend(const KVStore& kv, std::span<const float> q, const KeySet& keys, std::span<float> out,
            std::vector<double>* probs, CostMeter* cost) {
  const int heads = kv.heads();
  const int hd = kv.head_dim();
  const std::size_t n = keys.count();
  if (keys.begin > keys.end || keys.end > kv.size()) throw std::out_of_range("attend: key range");
  for (std::size_t e : keys.extras)
    if (e >= kv.size()) throw std::out_of_range("attend: extra key slot");
  if (n == 0) throw std::invalid_argument("attend: no keys");
  const std::size_t nr = keys.end - keys.begin;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  thread_local std::vector<double> s;
  thread_local std::vector<double> acc;
  s.resize(n);
  acc.resize(static_cast<std::size_t>(hd));
  if (probs) probs->assign(static_cast<std::size_t>(heads) * n, 0.0);
  for (int h = 0; h < heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * hd;
    std::fill(s.begin(), s.end(), 0.0);
    double* sp = s.data();
    for (int c = 0; c < hd; ++c) {
      const double qc = q[off + c];
      const float* lane = kv.key_lane(h, c) + keys.begin;
      for (std::size_t j = 0; j < nr; ++j) sp[j] += qc * static_cast<double>(lane[j]);
      for (std::size_t e = 0; e < keys.extras.size(); ++e)
        sp[nr + e] += qc * static_cast<double>(kv.key(h, c, keys.extras[e]));
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      sp[j] *= scale;
      mx = std::max(mx, sp[j]);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      sp[j] = std::exp(sp[j] - mx);
      sum += sp[j];
    }
    for (std::size_t j = 0; j < n; ++j) sp[j] /= sum;
    std::fill(acc.begin(), acc.end(), 0.0);
    double* ap = acc.data();
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t slot = j < nr ? keys.begin + j : keys.extras[j - nr];
      const float* vr = kv.value(slot).data() + off;
      const double pj = sp[j];
      for (int c = 0; c < hd; ++c) ap[c] += pj * static_cast<double>(vr[c]);
    }
    for (int c = 0; c < hd; ++c) out[off + c] = static_cast<float>(ap[c]);
    if (probs) std::copy(s.begin(), s.end(), probs->begin() + static_cast<std::ptrdiff_t>(h * n));
  }
  if (cost) cost->add(2 * n * kv.hidden());
}

void layer_forward_rows(const LayerWeights& w, const LayerShape& shape, Matrix& x,
                        std::span<const int> positions, KVStore& kv, std::size_t slot0,
                        const std::function<KeySet(std::size_t)>& keys_for_row,
                        const AttentionObserver* observer, CostMeter* cost) {
  const std::size_t n = x.rows();
  const auto d = static_cast<std::size_t>(shape.hidden);
  if (x.cols() != d) throw std::invalid_argument("layer_forward_rows: width mismatch");
  if (positions.size() != n) throw std::invalid_argument("layer_forward_rows: positions length mismatch");
  if (slot0 + n > kv.size()) kv.resize(slot0 + n);
  Matrix q(n, d);
  std::vector<float> k(d), v(d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto h = rmsnorm(x.row(i), w.attn_norm.row(0), kNormEps);
    matmul_row(h, w.wq, q.row(i));
    matmul_row(h, w.wk, k);
    matmul_row(h, w.wv, v);
    rope_row(q.row(i), positions[i], shape.heads, shape.rope_base);
    rope_row(k, positions[i], shape.heads, shape.rope_base);
    kv.set(slot0 + i, k, v);
  }
  std::vector<float> a(d), o(d), up(static_cast<std::size_t>(shape.ffn)), down(d);
  for (std::size_t i = 0; i < n; ++i) {
    const KeySet keys = keys_for_row(i);
    if (observer && observer->wants(i)) {
      std::vector<double> probs;
      attend(kv, q.row(i), keys, a, &probs, cost);
      observer->record(i, keys, probs);
    } else {
      attend(kv, q.row(i), keys, a, nullptr, cost);
    }
    matmul_row(a, w.wo, o);
    auto xr = x.row(i);
    for (std::size_t j = 0; j < d; ++j) xr[j] += o[j];
    const auto h2 = rmsnorm(xr, w.mlp_norm.row(0), kNormEps);
    matmul_row(h2, w.w_up, up);
    for (float& u : up) u = gelu_value(u);
    matmul_row(up, w.w_down, down);
    for (std::size_t j = 0; j < d; ++j) xr[j] += down[j];
  }
  if (cost) cost->add(n * (4 * d * d + 2 * d * static_cast<std::size_t>(shape.ffn)));
}

void head_row(std::span<const float> x, const Matrix& final_norm, const Matrix& lm_head,
              std::span<float> logits, CostMeter* cost) {
  const auto h = rmsnorm(x, final_norm.row(0), kNormEps);
  matmul_row(h, lm_head, logits);
  if (cost) cost->add(lm_head.rows() * lm_head.cols());
}

ag::Var ParamBinding::bind(Matrix& weight, bool trainable) {
  for (std::size_t i = 0; i < weights_.size(); ++i)
    if (weights_[i] == &weight) return leaves_[i];
  auto v = ag::leaf(weight, trainable);
  if (trainable) {
    weights_.push_back(&weight);
    leaves_.push_back(v);
  }
  return v;
}

void ParamBinding::clear() {
  weights_.clear();
  leaves_.clear();
}

LayerVars bind_layer(LayerWeights& w, ParamBinding& b, bool trainable) {
  return {b.bind(w.attn_norm, trainable), b.bind(w.wq, trainable),       b.bind(w.wk, trainable),
          b.bind(w.wv, trainable),        b.bind(w.wo, trainable),       b.bind(w.mlp_norm, trainable),
          b.bind(w.w_up, trainable),      b.bind(w.w_down, trainable)};
}

LayerVars constant_layer(const LayerWeights& w) {
  return {ag::constant(w.attn_norm), ag::constant(w.wq),       ag::constant(w.wk),
          ag::constant(w.wv),        ag::constant(w.wo),       ag::constant(w.mlp_norm),
          ag::constant(w.w_up),      ag::constant(w.w_down)};
}

ag::Var layer_graph(const LayerVars& p, const LayerShape& shape, const ag::Var& x,
                    const std::vector<int>& positions, const std::vector<unsigned char>& allow) {
  const auto h = ag::rmsnorm(x, p.attn_norm, kNormEps);
  const auto q = ag::rope(ag::matmul(h, p.wq), positions, shape.heads, shape.rope_base);
  const auto k = ag::rope(ag::matmul(h, p.wk), positions, shape.heads, shape.rope_base);
  const auto v = ag::matmul(h, p.wv);
  const auto a = ag::attention(q, k, v, shape.heads, allow);
  const auto x1 = ag::add(x, ag::matmul(a, p.wo));
  const auto h2 = ag::rmsnorm(x1, p.mlp_norm, kNormEps);
  const auto u = ag::gelu(ag::matmul(h2, p.w_up));
  return ag::add(x1, ag::matmul(u, p.w_down));
}

std::vector<unsigned char> causal_mask(std::size_t n) {
  std::vector<unsigned char> m(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m[i * n + j] = 1;
  return m;
}

}  // namespace sparrow
