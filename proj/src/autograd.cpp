// Copyright 2026 The Sparrow Authors
// SPDX-License-Identifier: Apache-2.0

#include "sparrow/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

#include "sparrow/layers.hpp"

namespace sparrow::ag {

void Node::ensure_grad() {
  if (grad.rows() != value.rows() || grad.cols() != value.cols()) grad = Matrix(value.rows(), value.cols());
}

namespace {

void accumulate(Node& dst, const Matrix& delta) {
  dst.ensure_grad();
  auto g = dst.grad.values();
  auto d = delta.values();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
}

Var make(Matrix value, std::vector<Var> parents) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p->requires_grad; });
  n->parents = std::move(parents);
  return n;
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

Var scalar_node(double v, std::vector<Var> parents) {
  auto n = make(Matrix(1, 1, static_cast<float>(v)), std::move(parents));
  n->scalar = v;
  return n;
}

}  // namespace

Var leaf(Matrix value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

Var constant(Matrix value) { return leaf(std::move(value), false); }

void backward(const Var& root) {
  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  if (root->value.size() == 1) root->grad.values()[0] += 1.0f;
  else std::fill(root->grad.values().begin(), root->grad.values().end(), 1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->requires_grad) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

Var matmul(const Var& a, const Var& b) {
  auto out = make(sparrow::matmul(a->value, b->value), {a, b});
  out->backward_fn = [](Node& self) {
    Node& a = *self.parents[0];
    Node& b = *self.parents[1];
    if (a.requires_grad) accumulate(a, sparrow::matmul(self.grad, transpose(b.value)));
    if (b.requires_grad) accumulate(b, sparrow::matmul(transpose(a.value), self.grad));
  };
  return out;
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "add");
  Matrix v = a->value;
  for (std::size_t i = 0; i < v.size(); ++i) v.values()[i] += b->value.values()[i];
  auto out = make(std::move(v), {a, b});
  out->backward_fn = [](Node& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) accumulate(*p, self.grad);
  };
  return out;
}

Var add_row(const Var& x, const Var& b) {
  if (b->value.rows() != 1 || b->value.cols() != x->value.cols())
    throw std::invalid_argument("add_row: bias shape mismatch");
  Matrix v = x->value;
  for (std::size_t i = 0; i < v.rows(); ++i)
    for (std::size_t j = 0; j < v.cols(); ++j) v(i, j) += b->value(0, j);
  auto out = make(std::move(v), {x, b});
  out->backward_fn = [](Node& self) {
    Node& x = *self.parents[0];
    Node& b = *self.parents[1];
    if (x.requires_grad) accumulate(x, self.grad);
    if (b.requires_grad) {
      Matrix gb(1, self.grad.cols());
      for (std::size_t i = 0; i < self.grad.rows(); ++i)
        for (std::size_t j = 0; j < self.grad.cols(); ++j) gb(0, j) += self.grad(i, j);
      accumulate(b, gb);
    }
  };
  return out;
}

Var rmsnorm(const Var& x, const Var& gain, double eps) {
  const Matrix& xv = x->value;
  if (gain->value.rows() != 1 || gain->value.cols() != xv.cols())
    throw std::invalid_argument("rmsnorm: gain shape mismatch");
  Matrix v(xv.rows(), xv.cols());
  std::vector<double> inv(xv.rows());
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    double ss = 0.0;
    for (float a : xv.row(i)) ss += static_cast<double>(a) * a;
    inv[i] = 1.0 / std::sqrt(ss / static_cast<double>(xv.cols()) + eps);
    for (std::size_t j = 0; j < xv.cols(); ++j)
      v(i, j) = static_cast<float>(static_cast<double>(gain->value(0, j)) * xv(i, j) * inv[i]);
  }
  auto out = make(std::move(v), {x, gain});
  out->backward_fn = [inv = std::move(inv)](Node& self) {
    Node& x = *self.parents[0];
    Node& g = *self.parents[1];
    const std::size_t n = x.value.rows();
    const std::size_t d = x.value.cols();
    Matrix gx(n, d);
    Matrix gg(1, d);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j)
        dot += static_cast<double>(g.value(0, j)) * self.grad(i, j) * x.value(i, j);
      const double r = inv[i];
      const double r3 = r * r * r / static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) {
        gx(i, j) = static_cast<float>(r * g.value(0, j) * self.grad(i, j) - r3 * x.value(i, j) * dot);
        gg(0, j) += static_cast<float>(static_cast<double>(self.grad(i, j)) * x.value(i, j) * r);
      }
    }
    if (x.requires_grad) accumulate(x, gx);
    if (g.requires_grad) accumulate(g, gg);
  };
  return out;
}

Var rope(const Var& x, std::vector<int> positions, int heads, double base) {
  if (positions.size() != x->value.rows()) throw std::invalid_argument("rope: positions length mismatch");
  Matrix v = x->value;
  for (std::size_t i = 0; i < v.rows(); ++i) rope_row(v.row(i), positions[i], heads, base);
  auto out = make(std::move(v), {x});
  out->backward_fn = [positions = std::move(positions), heads, base](Node& self) {
    Matrix g = self.grad;
    for (std::size_t i = 0; i < g.rows(); ++i) rope_row(g.row(i), positions[i], heads, base, /*inverse=*/true);
    accumulate(*self.parents[0], g);
  };
  return out;
}

Var gelu(const Var& x) {
  Matrix v = x->value;
  for (float& a : v.values()) a = gelu_value(a);
  auto out = make(std::move(v), {x});
  out->backward_fn = [](Node& self) {
    Node& x = *self.parents[0];
    Matrix g(x.value.rows(), x.value.cols());
    for (std::size_t i = 0; i < g.size(); ++i)
      g.values()[i] = static_cast<float>(self.grad.values()[i] * gelu_derivative(x.value.values()[i]));
    accumulate(x, g);
  };
  return out;
}

Var attention(const Var& q, const Var& k, const Var& v, int heads, std::vector<unsigned char> allow) {
  const std::size_t n = q->value.rows();
  const std::size_t d = q->value.cols();
  if (k->value.rows() != n || v->value.rows() != n || k->value.cols() != d || v->value.cols() != d)
    throw std::invalid_argument("attention: q/k/v shape mismatch");
  if (allow.size() != n * n) throw std::invalid_argument("attention: mask size mismatch");
  if (heads <= 0 || d % static_cast<std::size_t>(heads) != 0)
    throw std::invalid_argument("attention: hidden size not divisible by heads");
  const std::size_t hd = d / static_cast<std::size_t>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  // probs[h][i][j] for allowed pairs, 0 elsewhere.
  std::vector<double> probs(static_cast<std::size_t>(heads) * n * n, 0.0);
  Matrix outv(n, d);
  std::vector<double> s(n);
  std::vector<double> acc(hd);
  for (std::size_t i = 0; i < n; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) any = any || allow[i * n + j];
    if (!any) throw std::invalid_argument("attention: query row with no visible keys");
    for (int h = 0; h < heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(h) * hd;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (!allow[i * n + j]) continue;
        double dot = 0.0;
        for (std::size_t c = 0; c < hd; ++c)
          dot += static_cast<double>(q->value(i, off + c)) * k->value(j, off + c);
        s[j] = dot * scale;
        mx = std::max(mx, s[j]);
      }
      double sum = 0.0;
      double* p = probs.data() + (static_cast<std::size_t>(h) * n + i) * n;
      for (std::size_t j = 0; j < n; ++j) {
        if (!allow[i * n + j]) continue;
        p[j] = std::exp(s[j] - mx);
        sum += p[j];
      }
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        if (!allow[i * n + j]) continue;
        p[j] /= sum;
        for (std::size_t c = 0; c < hd; ++c) acc[c] += p[j] * v->value(j, off + c);
      }
      for (std::size_t c = 0; c < hd; ++c) outv(i, off + c) = static_cast<float>(acc[c]);
    }
  }
  auto out = make(std::move(outv), {q, k, v});
  out->backward_fn = [probs = std::move(probs), allow = std::move(allow), heads, hd, scale](Node& self) {
    Node& q = *self.parents[0];
    Node& k = *self.parents[1];
    Node& v = *self.parents[2];
    const std::size_t n = q.value.rows();
    const std::size_t d = q.value.cols();
    std::vector<double> gq(n * d, 0.0), gk(n * d, 0.0), gv(n * d, 0.0);
    std::vector<double> dp(n);
    for (int h = 0; h < heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(h) * hd;
      for (std::size_t i = 0; i < n; ++i) {
        const double* p = probs.data() + (static_cast<std::size_t>(h) * n + i) * n;
        double row_dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          if (!allow[i * n + j]) continue;
          double g = 0.0;
          for (std::size_t c = 0; c < hd; ++c) {
            g += static_cast<double>(self.grad(i, off + c)) * v.value(j, off + c);
            gv[j * d + off + c] += p[j] * self.grad(i, off + c);
          }
          dp[j] = g;
          row_dot += p[j] * g;
        }
        for (std::size_t j = 0; j < n; ++j) {
          if (!allow[i * n + j]) continue;
          const double ds = p[j] * (dp[j] - row_dot) * scale;
          if (ds == 0.0) continue;
          for (std::size_t c = 0; c < hd; ++c) {
            gq[i * d + off + c] += ds * k.value(j, off + c);
            gk[j * d + off + c] += ds * q.value(i, off + c);
          }
        }
      }
    }
    auto to_matrix = [n, d](const std::vector<double>& g) {
      Matrix m(n, d);
      for (std::size_t i = 0; i < g.size(); ++i) m.values()[i] = static_cast<float>(g[i]);
      return m;
    };
    if (q.requires_grad) accumulate(q, to_matrix(gq));
    if (k.requires_grad) accumulate(k, to_matrix(gk));
    if (v.requires_grad) accumulate(v, to_matrix(gv));
  };
  return out;
}

Var concat_cols(const Var& a, const Var& b) {
  if (a->value.rows() != b->value.rows()) throw std::invalid_argument("concat_cols: row mismatch");
  const std::size_t n = a->value.rows();
  const std::size_t ca = a->value.cols();
  const std::size_t cb = b->value.cols();
  Matrix v(n, ca + cb);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(a->value.row(i).begin(), a->value.row(i).end(), v.row(i).begin());
    std::copy(b->value.row(i).begin(), b->value.row(i).end(), v.row(i).begin() + static_cast<std::ptrdiff_t>(ca));
  }
  auto out = make(std::move(v), {a, b});
  out->backward_fn = [ca, cb](Node& self) {
    Node& a = *self.parents[0];
    Node& b = *self.parents[1];
    const std::size_t n = self.grad.rows();
    Matrix ga(n, ca), gb(n, cb);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < ca; ++j) ga(i, j) = self.grad(i, j);
      for (std::size_t j = 0; j < cb; ++j) gb(i, j) = self.grad(i, ca + j);
    }
    if (a.requires_grad) accumulate(a, ga);
    if (b.requires_grad) accumulate(b, gb);
  };
  return out;
}

Var concat_rows(const Var& a, const Var& b) {
  if (a->value.rows() == 0) return b;
  if (b->value.rows() == 0) return a;
  if (a->value.cols() != b->value.cols()) throw std::invalid_argument("concat_rows: column mismatch");
  Matrix v = a->value;
  v.append_rows(b->value);
  const std::size_t na = a->value.rows();
  auto out = make(std::move(v), {a, b});
  out->backward_fn = [na](Node& self) {
    Node& a = *self.parents[0];
    Node& b = *self.parents[1];
    if (a.requires_grad) accumulate(a, self.grad.slice_rows(0, na));
    if (b.requires_grad) accumulate(b, self.grad.slice_rows(na, self.grad.rows()));
  };
  return out;
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
  auto out = make(x->value.slice_rows(begin, end), {x});
  out->backward_fn = [begin](Node& self) {
    Node& x = *self.parents[0];
    x.ensure_grad();
    for (std::size_t i = 0; i < self.grad.rows(); ++i)
      for (std::size_t j = 0; j < self.grad.cols(); ++j) x.grad(begin + i, j) += self.grad(i, j);
  };
  return out;
}

Var shift_down(const Var& x) {
  const std::size_t n = x->value.rows();
  const std::size_t d = x->value.cols();
  Matrix v(n, d);
  for (std::size_t i = 1; i < n; ++i)
    std::copy(x->value.row(i - 1).begin(), x->value.row(i - 1).end(), v.row(i).begin());
  auto out = make(std::move(v), {x});
  out->backward_fn = [](Node& self) {
    Node& x = *self.parents[0];
    x.ensure_grad();
    for (std::size_t i = 1; i < self.grad.rows(); ++i)
      for (std::size_t j = 0; j < self.grad.cols(); ++j) x.grad(i - 1, j) += self.grad(i, j);
  };
  return out;
}

Var gather_rows(const Var& table, std::vector<int> ids) {
  const std::size_t d = table->value.cols();
  Matrix v(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table->value.rows())
      throw std::out_of_range("gather_rows: id out of range");
    auto r = table->value.row(static_cast<std::size_t>(ids[i]));
    std::copy(r.begin(), r.end(), v.row(i).begin());
  }
  auto out = make(std::move(v), {table});
  out->backward_fn = [ids = std::move(ids)](Node& self) {
    Node& t = *self.parents[0];
    t.ensure_grad();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < self.grad.cols(); ++j) t.grad(static_cast<std::size_t>(ids[i]), j) += self.grad(i, j);
  };
  return out;
}

Var cross_entropy(const Var& logits, std::vector<int> targets) {
  const Matrix& z = logits->value;
  if (targets.size() != z.rows()) throw std::invalid_argument("cross_entropy: target count mismatch");
  std::size_t counted = 0;
  double loss = 0.0;
  Matrix grad(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    if (targets[i] < 0) continue;
    if (static_cast<std::size_t>(targets[i]) >= z.cols()) throw std::out_of_range("cross_entropy: target id");
    ++counted;
    const auto lp = log_softmax(z.row(i));
    loss -= lp[static_cast<std::size_t>(targets[i])];
    for (std::size_t j = 0; j < z.cols(); ++j) grad(i, j) = static_cast<float>(std::exp(lp[j]));
    grad(i, static_cast<std::size_t>(targets[i])) -= 1.0f;
  }
  if (counted == 0) throw std::invalid_argument("cross_entropy: no targets");
  const double inv = 1.0 / static_cast<double>(counted);
  for (float& g : grad.values()) g = static_cast<float>(g * inv);
  auto out = scalar_node(loss * inv, {logits});
  out->backward_fn = [grad = std::move(grad)](Node& self) {
    Matrix g = grad;
    const float s = self.grad(0, 0);
    for (float& a : g.values()) a *= s;
    accumulate(*self.parents[0], g);
  };
  return out;
}

Var soft_cross_entropy(const Var& logits, Matrix target_probs) {
  const Matrix& z = logits->value;
  require_same_shape(z, target_probs, "soft_cross_entropy");
  if (z.rows() == 0) throw std::invalid_argument("soft_cross_entropy: empty input");
  double loss = 0.0;
  std::vector<double> grad(z.size());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const auto lp = log_softmax(z.row(i));
    double mass = 0.0;
    for (std::size_t j = 0; j < z.cols(); ++j) {
      const double p = target_probs(i, j);
      mass += p;
      if (p > 0.0) loss -= p * lp[j];
    }
    for (std::size_t j = 0; j < z.cols(); ++j)
      grad[i * z.cols() + j] = mass * std::exp(lp[j]) - target_probs(i, j);
  }
  const double inv = 1.0 / static_cast<double>(z.rows());
  auto out = scalar_node(loss * inv, {logits});
  out->backward_fn = [grad = std::move(grad), inv, rows = z.rows(), cols = z.cols()](Node& self) {
    Matrix g(rows, cols);
    const double s = self.grad(0, 0) * inv;
    for (std::size_t i = 0; i < grad.size(); ++i) g.values()[i] = static_cast<float>(grad[i] * s);
    accumulate(*self.parents[0], g);
  };
  return out;
}

Var smooth_l1(const Var& x, Matrix target, double beta) {
  require_same_shape(x->value, target, "smooth_l1");
  if (x->value.size() == 0) throw std::invalid_argument("smooth_l1: empty input");
  double loss = 0.0;
  std::vector<double> grad(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double diff = static_cast<double>(x->value.values()[i]) - target.values()[i];
    const double a = std::abs(diff);
    if (a < beta) {
      loss += 0.5 * diff * diff / beta;
      grad[i] = diff / beta;
    } else {
      loss += a - 0.5 * beta;
      grad[i] = diff > 0 ? 1.0 : -1.0;
    }
  }
  const double inv = 1.0 / static_cast<double>(target.size());
  auto out = scalar_node(loss * inv, {x});
  out->backward_fn = [grad = std::move(grad), inv, rows = target.rows(), cols = target.cols()](Node& self) {
    Matrix g(rows, cols);
    const double s = self.grad(0, 0) * inv;
    for (std::size_t i = 0; i < grad.size(); ++i) g.values()[i] = static_cast<float>(grad[i] * s);
    accumulate(*self.parents[0], g);
  };
  return out;
}

Var weighted_sum(const std::vector<std::pair<Var, double>>& terms) {
  double total = 0.0;
  std::vector<Var> parents;
  std::vector<double> weights;
  for (const auto& [v, w] : terms) {
    if (v->value.size() != 1) throw std::invalid_argument("weighted_sum: terms must be scalars");
    total += w * v->scalar;
    parents.push_back(v);
    weights.push_back(w);
  }
  auto out = scalar_node(total, std::move(parents));
  out->backward_fn = [weights = std::move(weights)](Node& self) {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      Node& p = *self.parents[i];
      if (!p.requires_grad) continue;
      accumulate(p, Matrix(1, 1, static_cast<float>(self.grad(0, 0) * weights[i])));
    }
  };
  return out;
}

}  // namespace sparrow::ag
