// Minimal dense f64 tensor with a dynamic tape for reverse-mode gradients.
// Just enough surface for the recognizer: matmul, bias add, layernorm, gelu,
// embedding gather, masked multi-head attention, dropout and softmax
// cross-entropy. Heavy products are delegated to Eigen maps over the
// row-major buffers; everything else is plain loops.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "parsurdu/util.hpp"

namespace parsurdu {

struct ShapeMismatch : std::runtime_error {
  explicit ShapeMismatch(const std::string& what) : std::runtime_error("shape mismatch: " + what) {}
};
struct AllPositionsIgnored : std::runtime_error {
  AllPositionsIgnored() : std::runtime_error("cross-entropy: every target position is ignored") {}
};

using Dims = std::vector<std::size_t>;

inline std::size_t dims_numel(const Dims& d) {
  return std::accumulate(d.begin(), d.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string dims_str(const Dims& d) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < d.size(); ++i) os << (i ? "," : "") << d[i];
  os << "]";
  return os.str();
}

// Dense boolean matrix used for attention masks: true = query row i may
// attend key column j. Disallowed pairs behave as additive -inf logits and
// receive exactly zero attention weight.
struct BoolMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> v;

  BoolMatrix() = default;
  BoolMatrix(std::size_t r, std::size_t c, bool fill = false)
      : rows(r), cols(c), v(r * c, fill ? 1 : 0) {}

  bool at(std::size_t i, std::size_t j) const { return v[i * cols + j] != 0; }
  void set(std::size_t i, std::size_t j, bool b) { v[i * cols + j] = b ? 1 : 0; }

  friend bool operator==(const BoolMatrix&, const BoolMatrix&) = default;
};

namespace detail {

struct TapeNode {
  Dims dims;
  std::size_t numel = 0;
  std::vector<double> store;     // owning buffer; empty for external views
  const double* data = nullptr;  // always valid, points at store or external memory
  std::vector<double> grad;      // lazily allocated, same numel as data
  bool requires_grad = false;
  bool leaf = false;
  std::vector<std::shared_ptr<TapeNode>> parents;
  std::function<void(TapeNode&)> backward;

  double* mutable_data() { return store.data(); }
  void ensure_grad() {
    if (grad.size() != numel) grad.assign(numel, 0.0);
  }
};

// Test hook: when set, the matmul backward rule flips the sign of the
// left-operand gradient so gradient checking must fail.
inline bool& backward_fault_hook() {
  static bool flag = false;
  return flag;
}

}  // namespace detail

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Dims dims) {
    auto n = std::make_shared<detail::TapeNode>();
    n->numel = dims_numel(dims);
    n->dims = std::move(dims);
    n->store.assign(n->numel, 0.0);
    n->data = n->store.data();
    return Tensor(std::move(n));
  }

  static Tensor from(Dims dims, std::vector<double> values) {
    if (dims_numel(dims) != values.size()) {
      throw ShapeMismatch("tensor init " + dims_str(dims) + " with " + std::to_string(values.size()) + " values");
    }
    auto n = std::make_shared<detail::TapeNode>();
    n->numel = values.size();
    n->dims = std::move(dims);
    n->store = std::move(values);
    n->data = n->store.data();
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  // Leaf over external storage (model parameters). The view must outlive
  // every graph built on it. Gradients live in the node and accumulate
  // across backward calls until zero_grad().
  static Tensor leaf_view(Dims dims, const double* external, bool requires_grad = true) {
    auto n = std::make_shared<detail::TapeNode>();
    n->numel = dims_numel(dims);
    n->dims = std::move(dims);
    n->data = external;
    n->leaf = true;
    n->requires_grad = requires_grad;
    if (requires_grad) n->ensure_grad();
    return Tensor(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Dims& dims() const { return node_->dims; }
  std::size_t numel() const { return node_->numel; }
  std::size_t dim(std::size_t i) const { return node_->dims.at(i); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> value() const { return {node_->data, node_->numel}; }
  double value_at(std::size_t i) const { return node_->data[i]; }
  double scalar_value() const {
    if (node_->numel != 1) throw ShapeMismatch("scalar_value on " + dims_str(node_->dims));
    return node_->data[0];
  }

  std::span<const double> grad() const {
    node_->ensure_grad();
    return {node_->grad.data(), node_->numel};
  }
  std::span<double> grad_mut() {
    node_->ensure_grad();
    return {node_->grad.data(), node_->numel};
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  detail::TapeNode* node() const { return node_.get(); }
  const std::shared_ptr<detail::TapeNode>& handle() const { return node_; }

  // Reverse-mode sweep from a scalar root. Deterministic: the traversal
  // follows parent insertion order.
  void backward() const {
    if (node_->numel != 1) throw ShapeMismatch("backward root must be scalar, got " + dims_str(node_->dims));
    std::vector<detail::TapeNode*> order;
    topo_sort(node_.get(), order);
    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward && (*it)->requires_grad) (*it)->backward(**it);
    }
  }

 private:
  explicit Tensor(std::shared_ptr<detail::TapeNode> n) : node_(std::move(n)) {}

  static void topo_sort(detail::TapeNode* root, std::vector<detail::TapeNode*>& order) {
    // Iterative post-order DFS.
    std::unordered_set<detail::TapeNode*> seen;
    std::vector<std::pair<detail::TapeNode*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::TapeNode* p = node->parents[next++].get();
        if (seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  friend Tensor make_op(Dims dims, std::vector<Tensor> parents, std::function<void(detail::TapeNode&)> backward);

  std::shared_ptr<detail::TapeNode> node_;
};

inline Tensor make_op(Dims dims, std::vector<Tensor> parents, std::function<void(detail::TapeNode&)> backward) {
  auto n = std::make_shared<detail::TapeNode>();
  n->numel = dims_numel(dims);
  n->dims = std::move(dims);
  n->store.assign(n->numel, 0.0);
  n->data = n->store.data();
  for (const Tensor& p : parents) {
    n->requires_grad = n->requires_grad || p.requires_grad();
    n->parents.push_back(p.handle());
  }
  if (n->requires_grad) n->backward = std::move(backward);
  return Tensor(n);
}

namespace detail {
inline void accumulate(TapeNode& t, std::span<const double> g) {
  if (!t.requires_grad) return;
  t.ensure_grad();
  for (std::size_t i = 0; i < t.numel; ++i) t.grad[i] += g[i];
}
}  // namespace detail

// --- elementwise -----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) throw ShapeMismatch("add " + dims_str(a.dims()) + " vs " + dims_str(b.dims()));
  Tensor out = make_op(a.dims(), {a, b}, [](detail::TapeNode& self) {
    detail::accumulate(*self.parents[0], self.grad);
    detail::accumulate(*self.parents[1], self.grad);
  });
  double* o = out.node()->mutable_data();
  const auto av = a.value();
  const auto bv = b.value();
  for (std::size_t i = 0; i < a.numel(); ++i) o[i] = av[i] + bv[i];
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor out = make_op(a.dims(), {a}, [s](detail::TapeNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < p.numel; ++i) p.grad[i] += s * self.grad[i];
  });
  double* o = out.node()->mutable_data();
  const auto av = a.value();
  for (std::size_t i = 0; i < a.numel(); ++i) o[i] = s * av[i];
  return out;
}

// Row-broadcast bias add: m is [r,c], bias is [c].
inline Tensor add_bias(const Tensor& m, const Tensor& bias) {
  if (m.dims().size() != 2 || bias.dims().size() != 1 || m.dim(1) != bias.dim(0)) {
    throw ShapeMismatch("add_bias " + dims_str(m.dims()) + " vs " + dims_str(bias.dims()));
  }
  const std::size_t r = m.dim(0), c = m.dim(1);
  Tensor out = make_op(m.dims(), {m, bias}, [r, c](detail::TapeNode& self) {
    auto& pm = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pm.requires_grad) detail::accumulate(pm, self.grad);
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) pb.grad[j] += self.grad[i * c + j];
    }
  });
  double* o = out.node()->mutable_data();
  const auto mv = m.value();
  const auto bv = bias.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) o[i * c + j] = mv[i * c + j] + bv[j];
  return out;
}

inline Tensor gelu(const Tensor& a) {
  Tensor out = make_op(a.dims(), {a}, [](detail::TapeNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    for (std::size_t i = 0; i < p.numel; ++i) {
      const double x = p.data[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      p.grad[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
  double* o = out.node()->mutable_data();
  const auto av = a.value();
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    o[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * inv_sqrt2));
  }
  return out;
}

inline Tensor relu(const Tensor& a) {
  Tensor out = make_op(a.dims(), {a}, [](detail::TapeNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < p.numel; ++i) {
      if (p.data[i] > 0.0) p.grad[i] += self.grad[i];
    }
  });
  double* o = out.node()->mutable_data();
  const auto av = a.value();
  for (std::size_t i = 0; i < a.numel(); ++i) o[i] = av[i] > 0.0 ? av[i] : 0.0;
  return out;
}

// Inverted dropout; identity when p == 0. The mask is drawn from `rng`, so
// determinism is the caller's seed discipline.
inline Tensor dropout(const Tensor& a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw std::invalid_argument("dropout probability must be < 1");
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(a.numel());
  for (auto& m : mask) m = rng.uniform() >= p ? keep_scale : 0.0;
  Tensor out = make_op(a.dims(), {a}, [mask](detail::TapeNode& self) {
    auto& pa = *self.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < pa.numel; ++i) pa.grad[i] += self.grad[i] * mask[i];
  });
  double* o = out.node()->mutable_data();
  const auto av = a.value();
  for (std::size_t i = 0; i < a.numel(); ++i) o[i] = av[i] * mask[i];
  return out;
}

// --- matmul ----------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dims().size() != 2 || b.dims().size() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeMismatch("matmul " + dims_str(a.dims()) + " x " + dims_str(b.dims()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = make_op({m, n}, {a, b}, [m, k, n](detail::TapeNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    ECMap g(self.grad.data(), m, n);
    if (pa.requires_grad) {
      pa.ensure_grad();
      EMap ga(pa.grad.data(), m, k);
      ECMap bv(pb.data, k, n);
      const double sign = detail::backward_fault_hook() ? -1.0 : 1.0;
      ga.noalias() += sign * (g * bv.transpose());
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      EMap gb(pb.grad.data(), k, n);
      ECMap av(pa.data, m, k);
      gb.noalias() += av.transpose() * g;
    }
  });
  EMap o(out.node()->mutable_data(), m, n);
  ECMap av(a.value().data(), m, k);
  ECMap bv(b.value().data(), k, n);
  o.noalias() = av * bv;
  return out;
}

// --- layer norm ------------------------------------------------------------

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  if (x.dims().size() != 2 || gamma.dims().size() != 1 || beta.dims().size() != 1 ||
      gamma.dim(0) != x.dim(1) || beta.dim(0) != x.dim(1)) {
    throw ShapeMismatch("layer_norm " + dims_str(x.dims()) + " gamma " + dims_str(gamma.dims()));
  }
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> xhat(r * c), inv_sigma(r);
  {
    const auto xv = x.value();
    for (std::size_t i = 0; i < r; ++i) {
      double mean = 0.0;
      for (std::size_t j = 0; j < c; ++j) mean += xv[i * c + j];
      mean /= static_cast<double>(c);
      double var = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double d = xv[i * c + j] - mean;
        var += d * d;
      }
      var /= static_cast<double>(c);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_sigma[i] = is;
      for (std::size_t j = 0; j < c; ++j) xhat[i * c + j] = (xv[i * c + j] - mean) * is;
    }
  }
  Tensor out = make_op({r, c}, {x, gamma, beta},
                       [r, c, xhat, inv_sigma](detail::TapeNode& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    const double* gamma_v = pg.data;
    if (pg.requires_grad) pg.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    if (px.requires_grad) px.ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      double sum_dyg = 0.0, sum_dyg_xhat = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double dy = self.grad[i * c + j];
        const double dyg = dy * gamma_v[j];
        sum_dyg += dyg;
        sum_dyg_xhat += dyg * xhat[i * c + j];
        if (pg.requires_grad) pg.grad[j] += dy * xhat[i * c + j];
        if (pb.requires_grad) pb.grad[j] += dy;
      }
      if (px.requires_grad) {
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j) {
          const double dyg = self.grad[i * c + j] * gamma_v[j];
          px.grad[i * c + j] +=
              inv_sigma[i] * (dyg - inv_c * sum_dyg - xhat[i * c + j] * inv_c * sum_dyg_xhat);
        }
      }
    }
  });
  double* o = out.node()->mutable_data();
  const auto gv = gamma.value();
  const auto bv = beta.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) o[i * c + j] = xhat[i * c + j] * gv[j] + bv[j];
  return out;
}

// --- gather / slice --------------------------------------------------------

inline Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
  if (table.dims().size() != 2) throw ShapeMismatch("embedding table must be 2-d");
  const std::size_t v = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw ShapeMismatch("embedding id " + std::to_string(id) + " outside table of " + std::to_string(v));
    }
  }
  const std::size_t t = ids.size();
  Tensor out = make_op({t, d}, {table}, [ids, d](detail::TapeNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const std::size_t row = static_cast<std::size_t>(ids[i]);
      for (std::size_t j = 0; j < d; ++j) p.grad[row * d + j] += self.grad[i * d + j];
    }
  });
  double* o = out.node()->mutable_data();
  const auto tv = table.value();
  for (std::size_t i = 0; i < t; ++i) {
    const std::size_t row = static_cast<std::size_t>(ids[i]);
    for (std::size_t j = 0; j < d; ++j) o[i * d + j] = tv[row * d + j];
  }
  return out;
}

inline Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  if (x.dims().size() != 2 || start + count > x.dim(0)) {
    throw ShapeMismatch("slice_rows [" + std::to_string(start) + "," + std::to_string(start + count) +
                        ") of " + dims_str(x.dims()));
  }
  const std::size_t c = x.dim(1);
  Tensor out = make_op({count, c}, {x}, [start, count, c](detail::TapeNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t j = 0; j < c; ++j) p.grad[(start + i) * c + j] += self.grad[i * c + j];
  });
  double* o = out.node()->mutable_data();
  const auto xv = x.value();
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < c; ++j) o[i * c + j] = xv[(start + i) * c + j];
  return out;
}

// --- masked multi-head attention -------------------------------------------

// Scaled dot-product attention over pre-projected q/k/v, fused across heads.
// mask, when given, is [Tq, S]; a fully masked query row yields an all-zero
// output row instead of NaN (its softmax weights are defined as zero).
// `saved_weights`, when non-null, receives the H x Tq x S attention weights.
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   std::size_t heads, const BoolMatrix* mask = nullptr,
                                   std::vector<double>* saved_weights = nullptr) {
  if (q.dims().size() != 2 || k.dims().size() != 2 || v.dims().size() != 2) {
    throw ShapeMismatch("attention operands must be 2-d");
  }
  const std::size_t tq = q.dim(0), d = q.dim(1), s = k.dim(0);
  if (k.dim(1) != d || v.dim(0) != s || v.dim(1) != d) {
    throw ShapeMismatch("attention q" + dims_str(q.dims()) + " k" + dims_str(k.dims()) + " v" +
                        dims_str(v.dims()));
  }
  if (heads == 0 || d % heads != 0) throw ShapeMismatch("embed width not divisible by head count");
  if (mask && (mask->rows != tq || mask->cols != s)) {
    throw ShapeMismatch("attention mask " + std::to_string(mask->rows) + "x" + std::to_string(mask->cols));
  }
  const std::size_t hd = d / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  // Forward: per head, scores -> masked softmax -> weighted sum. Weights are
  // kept for the backward sweep.
  std::vector<double> weights(heads * tq * s, 0.0);
  std::vector<double> out_values(tq * d, 0.0);
  {
    ECMap qv(q.value().data(), tq, d);
    ECMap kv(k.value().data(), s, d);
    ECMap vv(v.value().data(), s, d);
    EMap ov(out_values.data(), tq, d);
    EMat scores(tq, s);
    for (std::size_t h = 0; h < heads; ++h) {
      scores.noalias() = att_scale * (qv.middleCols(h * hd, hd) * kv.middleCols(h * hd, hd).transpose());
      EMap w(weights.data() + h * tq * s, tq, s);
      for (std::size_t i = 0; i < tq; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < s; ++j) {
          if (!mask || mask->at(i, j)) mx = std::max(mx, scores(i, j));
        }
        if (mx == -std::numeric_limits<double>::infinity()) {
          for (std::size_t j = 0; j < s; ++j) w(i, j) = 0.0;  // fully masked row
          continue;
        }
        double denom = 0.0;
        for (std::size_t j = 0; j < s; ++j) {
          if (!mask || mask->at(i, j)) {
            w(i, j) = std::exp(scores(i, j) - mx);
            denom += w(i, j);
          } else {
            w(i, j) = 0.0;
          }
        }
        for (std::size_t j = 0; j < s; ++j) w(i, j) /= denom;
      }
      ov.middleCols(h * hd, hd).noalias() = w * vv.middleCols(h * hd, hd);
    }
  }
  if (saved_weights) *saved_weights = weights;

  Tensor out = make_op({tq, d}, {q, k, v},
                       [heads, tq, s, d, hd, att_scale, weights = std::move(weights)](detail::TapeNode& self) {
    auto& pq = *self.parents[0];
    auto& pk = *self.parents[1];
    auto& pv = *self.parents[2];
    if (pq.requires_grad) pq.ensure_grad();
    if (pk.requires_grad) pk.ensure_grad();
    if (pv.requires_grad) pv.ensure_grad();
    ECMap go(self.grad.data(), tq, d);
    ECMap qv(pq.data, tq, d);
    ECMap kv(pk.data, s, d);
    ECMap vv(pv.data, s, d);
    for (std::size_t h = 0; h < heads; ++h) {
      ECMap w(weights.data() + h * tq * s, tq, s);
      const auto goh = go.middleCols(h * hd, hd);
      const auto vvh = vv.middleCols(h * hd, hd);
      if (pv.requires_grad) {
        EMap gv(pv.grad.data(), s, d);
        gv.middleCols(h * hd, hd).noalias() += w.transpose() * goh;
      }
      if (!pq.requires_grad && !pk.requires_grad) continue;
      // Softmax backward rowwise; masked entries have zero weight, hence
      // zero score gradient, and fully masked rows propagate nothing.
      EMat gw = goh * vvh.transpose();  // [tq, s]
      EMat gs(tq, s);
      for (std::size_t i = 0; i < tq; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < s; ++j) dot += gw(i, j) * w(i, j);
        for (std::size_t j = 0; j < s; ++j) gs(i, j) = w(i, j) * (gw(i, j) - dot);
      }
      const auto qvh = qv.middleCols(h * hd, hd);
      const auto kvh = kv.middleCols(h * hd, hd);
      if (pq.requires_grad) {
        EMap gq(pq.grad.data(), tq, d);
        gq.middleCols(h * hd, hd).noalias() += att_scale * (gs * kvh);
      }
      if (pk.requires_grad) {
        EMap gk(pk.grad.data(), s, d);
        gk.middleCols(h * hd, hd).noalias() += att_scale * (gs.transpose() * qvh);
      }
    }
  });
  std::copy(out_values.begin(), out_values.end(), out.node()->mutable_data());
  return out;
}

// --- softmax cross-entropy -------------------------------------------------

// Mean negative log-likelihood of `targets` under row-wise softmax of
// `logits`, skipping positions whose target equals `ignore_id`. Stabilized by
// the row max. Backward is (p - y) / n_used on counted rows.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                                    int ignore_id = -1) {
  if (logits.dims().size() != 2 || logits.dim(0) != targets.size()) {
    throw ShapeMismatch("cross-entropy logits " + dims_str(logits.dims()) + " vs " +
                        std::to_string(targets.size()) + " targets");
  }
  const std::size_t t = logits.dim(0), vocab = logits.dim(1);
  for (int y : targets) {
    if (y == ignore_id) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= vocab) {
      throw ShapeMismatch("target id " + std::to_string(y) + " outside vocab of " + std::to_string(vocab));
    }
  }
  std::size_t used = 0;
  double loss = 0.0;
  std::vector<double> probs(t * vocab, 0.0);
  {
    const auto lv = logits.value();
    for (std::size_t i = 0; i < t; ++i) {
      if (targets[i] == ignore_id) continue;
      ++used;
      double mx = lv[i * vocab];
      for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, lv[i * vocab + j]);
      double denom = 0.0;
      for (std::size_t j = 0; j < vocab; ++j) {
        probs[i * vocab + j] = std::exp(lv[i * vocab + j] - mx);
        denom += probs[i * vocab + j];
      }
      for (std::size_t j = 0; j < vocab; ++j) probs[i * vocab + j] /= denom;
      loss -= std::log(probs[i * vocab + static_cast<std::size_t>(targets[i])]);
    }
  }
  if (used == 0) throw AllPositionsIgnored();
  loss /= static_cast<double>(used);

  Tensor out = make_op({1}, {logits},
                       [t, vocab, targets, ignore_id, used, probs = std::move(probs)](detail::TapeNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double g = self.grad[0] / static_cast<double>(used);
    for (std::size_t i = 0; i < t; ++i) {
      if (targets[i] == ignore_id) continue;
      for (std::size_t j = 0; j < vocab; ++j) {
        double d = probs[i * vocab + j];
        if (j == static_cast<std::size_t>(targets[i])) d -= 1.0;
        p.grad[i * vocab + j] += g * d;
      }
    }
  });
  out.node()->mutable_data()[0] = loss;
  return out;
}

// Arithmetic mean of scalar losses; gradients flow to every contributor.
inline Tensor mean_scalars(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeMismatch("mean of zero scalars");
  Tensor acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return scale(acc, 1.0 / static_cast<double>(xs.size()));
}

}  // namespace parsurdu
