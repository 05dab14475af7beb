#pragma once

// Reverse-mode differentiation over Tensor values.
//
// Every operation returns a Var that records its parents and a backward
// rule. Nodes whose inputs are all constants record nothing, so a forward
// pass over constant leaves builds no graph at all.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "skelnet/errors.hpp"
#include "skelnet/tensor.hpp"

namespace skelnet::ad {

enum class Mode { Train, Eval };

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer() {
    if (!has_grad) {
      grad = Tensor(value.shape());
      has_grad = true;
    }
    return grad;
  }
  Node& parent(std::size_t i) { return *parents[i]; }
};

}  // namespace detail

/// Handle to a node in a computation graph.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t rank() const { return node_->value.rank(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_->has_grad; }

  /// Accumulated gradient; zeros if backward never reached this node.
  Tensor grad() const { return node_->has_grad ? node_->grad : Tensor(node_->value.shape()); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<detail::Node> node_;
};

inline Var constant(Tensor value) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

/// Leaf that accumulates a gradient during backward().
inline Var parameter(Tensor value) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

namespace detail {

inline void ensure_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite result in ") + op);
}

inline Var make_result(Tensor value, std::initializer_list<Var> parents,
                       std::function<void(Node&)> backward, const char* op) {
  ensure_finite(value, op);
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool any = false;
  for (const Var& p : parents) any = any || p.requires_grad();
  if (any) {
    n->requires_grad = true;
    for (const Var& p : parents) n->parents.push_back(p.shared());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

inline Var make_result(Tensor value, const std::vector<Var>& parents,
                       std::function<void(Node&)> backward, const char* op) {
  ensure_finite(value, op);
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool any = false;
  for (const Var& p : parents) any = any || p.requires_grad();
  if (any) {
    n->requires_grad = true;
    for (const Var& p : parents) n->parents.push_back(p.shared());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw NumericError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size())
    throw NumericError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                       shape_str(shape));
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

}  // namespace detail

/// Runs reverse accumulation from a scalar root. Each reachable node's
/// backward rule runs exactly once, after all of its consumers.
inline void backward(const Var& root) {
  using detail::Node;
  if (!root.requires_grad()) return;
  if (root.value().size() != 1) throw NumericError("backward() requires a scalar root");

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
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

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward || !n->has_grad) continue;
    n->backward(*n);
    // Interior gradients are no longer needed once propagated.
    n->grad = Tensor();
    n->has_grad = false;
  }
}

// ---------------------------------------------------------------------------
// Shape plumbing

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return detail::make_result(std::move(out), {x}, [](detail::Node& self) {
    auto& p = self.parent(0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  }, "reshape");
}

/// Swaps the last two axes (rank 2 or 3).
inline Var transpose(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 2 && s.size() != 3) throw NumericError("transpose: rank must be 2 or 3");
  const std::size_t batch = s.size() == 3 ? s[0] : 1;
  const std::size_t rows = s[s.size() - 2], cols = s[s.size() - 1];
  Shape os = s;
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  Tensor out(os);
  const double* in = x.value().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j)
        out[b * rows * cols + j * rows + i] = in[b * rows * cols + i * cols + j];
  return detail::make_result(std::move(out), {x}, [batch, rows, cols](detail::Node& self) {
    auto& p = self.parent(0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
          g[b * rows * cols + i * cols + j] += self.grad[b * rows * cols + j * rows + i];
  }, "transpose");
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw NumericError("concat: no inputs");
  Shape os = parts[0].shape();
  if (axis >= os.size()) throw NumericError("concat: axis out of range");
  std::size_t total = 0;
  for (const Var& p : parts) {
    Shape a = p.shape(), b = os;
    if (a.size() != b.size()) throw NumericError("concat: rank mismatch");
    a[axis] = b[axis] = 0;
    if (a != b) throw NumericError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                   shape_str(os));
    total += p.shape()[axis];
  }
  os[axis] = total;
  const auto split = detail::split_axis(os, axis, "concat");
  Tensor out(os);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    offsets.push_back(off);
    const std::size_t ext = p.shape()[axis];
    const double* src = p.value().data();
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(src + o * ext * split.inner, ext * split.inner,
                  out.data() + (o * split.extent + off) * split.inner);
    off += ext;
  }
  return detail::make_result(std::move(out), parts, [split, offsets](detail::Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = self.parent(k);
      if (!p.requires_grad) continue;
      auto& g = p.grad_buffer();
      const std::size_t ext = g.size() / (split.outer * split.inner);
      for (std::size_t o = 0; o < split.outer; ++o) {
        const double* src = self.grad.data() + (o * split.extent + offsets[k]) * split.inner;
        double* dst = g.data() + o * ext * split.inner;
        for (std::size_t i = 0; i < ext * split.inner; ++i) dst[i] += src[i];
      }
    }
  }, "concat");
}

inline Var slice(const Var& x, std::size_t axis, std::size_t start, std::size_t length) {
  const auto split = detail::split_axis(x.shape(), axis, "slice");
  if (start + length > split.extent) throw NumericError("slice: range out of bounds");
  Shape os = x.shape();
  os[axis] = length;
  Tensor out(os);
  const double* src = x.value().data();
  for (std::size_t o = 0; o < split.outer; ++o)
    std::copy_n(src + (o * split.extent + start) * split.inner, length * split.inner,
                out.data() + o * length * split.inner);
  return detail::make_result(std::move(out), {x}, [split, start, length](detail::Node& self) {
    auto& p = self.parent(0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t o = 0; o < split.outer; ++o) {
      double* dst = g.data() + (o * split.extent + start) * split.inner;
      const double* s = self.grad.data() + o * length * split.inner;
      for (std::size_t i = 0; i < length * split.inner; ++i) dst[i] += s[i];
    }
  }, "slice");
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Matrix product over the last two axes. Supported forms:
///   [m,k]x[k,n], [N,m,k]x[k,n] (rows folded), [N,m,k]x[N,k,n] (batched),
///   [m,k]x[N,k,n] (left operand broadcast over the batch).
inline Var matmul(const Var& a, const Var& b) {
  using detail::CMap;
  using detail::MMap;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sa.size() > 3 || sb.size() < 2 || sb.size() > 3)
    throw NumericError("matmul: operands must have rank 2 or 3");
  const std::size_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
  const std::size_t kb = sb[sb.size() - 2], n = sb[sb.size() - 1];
  if (k != kb)
    throw NumericError("matmul: inner dimension mismatch " + shape_str(sa) + " x " + shape_str(sb));

  if (sb.size() == 2) {
    const std::size_t rows = a.value().size() / k;
    Shape os = sa;
    os.back() = n;
    Tensor out(os);
    MMap(out.data(), rows, n).noalias() =
        CMap(a.value().data(), rows, k) * CMap(b.value().data(), k, n);
    return detail::make_result(std::move(out), {a, b}, [rows, k, n](detail::Node& self) {
      auto& pa = self.parent(0);
      auto& pb = self.parent(1);
      CMap g(self.grad.data(), rows, n);
      if (pa.requires_grad)
        MMap(pa.grad_buffer().data(), rows, k).noalias() +=
            g * CMap(pb.value.data(), k, n).transpose();
      if (pb.requires_grad)
        MMap(pb.grad_buffer().data(), k, n).noalias() +=
            CMap(pa.value.data(), rows, k).transpose() * g;
    }, "matmul");
  }

  const std::size_t batch = sb[0];
  const bool a_batched = sa.size() == 3;
  if (a_batched && sa[0] != batch) throw NumericError("matmul: batch size mismatch");
  Tensor out(Shape{batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    const double* ap = a.value().data() + (a_batched ? i * m * k : 0);
    MMap(out.data() + i * m * n, m, n).noalias() =
        CMap(ap, m, k) * CMap(b.value().data() + i * k * n, k, n);
  }
  return detail::make_result(std::move(out), {a, b},
                             [batch, a_batched, m, k, n](detail::Node& self) {
    auto& pa = self.parent(0);
    auto& pb = self.parent(1);
    for (std::size_t i = 0; i < batch; ++i) {
      CMap g(self.grad.data() + i * m * n, m, n);
      const std::size_t aoff = a_batched ? i * m * k : 0;
      if (pa.requires_grad)
        MMap(pa.grad_buffer().data() + aoff, m, k).noalias() +=
            g * CMap(pb.value.data() + i * k * n, k, n).transpose();
      if (pb.requires_grad)
        MMap(pb.grad_buffer().data() + i * k * n, k, n).noalias() +=
            CMap(pa.value.data() + aoff, m, k).transpose() * g;
    }
  }, "matmul");
}

// ---------------------------------------------------------------------------
// Elementwise

/// a + b for equal shapes, or a + bias where bias is rank 1 matching a's last axis.
inline Var add(const Var& a, const Var& b) {
  const bool bias = b.rank() == 1 && a.rank() >= 1 && a.shape() != b.shape() &&
                    b.shape()[0] == a.shape().back();
  if (!bias) detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  const std::size_t width = b.value().size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[bias ? i % width : i];
  return detail::make_result(std::move(out), {a, b}, [bias, width](detail::Node& self) {
    auto& pa = self.parent(0);
    auto& pb = self.parent(1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[bias ? i % width : i] += self.grad[i];
    }
  }, "add");
}

inline Var scale(const Var& x, double s) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v *= s;
  return detail::make_result(std::move(out), {x}, [s](detail::Node& self) {
    auto& p = self.parent(0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  }, "scale");
}

inline Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0)); }

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make_result(std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = self.parent(0);
    auto& pb = self.parent(1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  }, "mul");
}

namespace detail {

// Unary op whose derivative is expressible from (input, output).
template <class Fwd, class Deriv>
Var unary(const Var& x, Fwd fwd, Deriv deriv, const char* op) {
  Tensor out(x.shape());
  const double* in = x.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return make_result(std::move(out), {x}, [deriv](Node& self) {
    auto& p = self.parent(0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * deriv(p.value[i], self.value[i]);
  }, op);
}

}  // namespace detail

inline Var leaky_relu(const Var& x, double slope = 0.01) {
  return detail::unary(
      x, [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double in, double) { return in > 0.0 ? 1.0 : slope; }, "leaky_relu");
}

inline Var sigmoid(const Var& x) {
  return detail::unary(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

inline Var tanh(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; },
      "tanh");
}

inline Var log(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::log(v); }, [](double in, double) { return 1.0 / in; }, "log");
}

// ---------------------------------------------------------------------------
// Reductions

/// Softmax over the last axis, computed with max subtraction.
inline Var row_softmax(const Var& x) {
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.value().size() / width;
  Tensor out(x.shape());
  const double* in = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in + r * width;
    double* o = out.data() + r * width;
    const double mx = *std::max_element(row, row + width);
    double total = 0.0;
    for (std::size_t j = 0; j < width; ++j) total += (o[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < width; ++j) o[j] /= total;
  }
  return detail::make_result(std::move(out), {x}, [rows, width](detail::Node& self) {
    auto& p = self.parent(0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * width;
      const double* dy = self.grad.data() + r * width;
      double dot = 0.0;
      for (std::size_t j = 0; j < width; ++j) dot += y[j] * dy[j];
      for (std::size_t j = 0; j < width; ++j) g[r * width + j] += y[j] * (dy[j] - dot);
    }
  }, "row_softmax");
}

/// Maximum along `axis`; gradient flows to the argmax only (lowest index on ties).
inline Var max_over_axis(const Var& x, std::size_t axis) {
  const auto split = detail::split_axis(x.shape(), axis, "max_over_axis");
  if (split.extent == 0) throw NumericError("max_over_axis: empty axis");
  Shape os = x.shape();
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(os);
  std::vector<std::size_t> argmax(out.size());
  const double* in = x.value().data();
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t i = 0; i < split.inner; ++i) {
      std::size_t best = 0;
      double bv = in[o * split.extent * split.inner + i];
      for (std::size_t e = 1; e < split.extent; ++e) {
        const double v = in[(o * split.extent + e) * split.inner + i];
        if (v > bv) {
          bv = v;
          best = e;
        }
      }
      out[o * split.inner + i] = bv;
      argmax[o * split.inner + i] = (o * split.extent + best) * split.inner + i;
    }
  return detail::make_result(std::move(out), {x}, [argmax = std::move(argmax)](detail::Node& self) {
    auto& p = self.parent(0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += self.grad[i];
  }, "max_over_axis");
}

inline Var mean_over_axis(const Var& x, std::size_t axis) {
  const auto split = detail::split_axis(x.shape(), axis, "mean_over_axis");
  Shape os = x.shape();
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(os);
  const double* in = x.value().data();
  const double inv = 1.0 / static_cast<double>(split.extent);
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t e = 0; e < split.extent; ++e)
      for (std::size_t i = 0; i < split.inner; ++i)
        out[o * split.inner + i] += in[(o * split.extent + e) * split.inner + i] * inv;
  return detail::make_result(std::move(out), {x}, [split, inv](detail::Node& self) {
    auto& p = self.parent(0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t o = 0; o < split.outer; ++o)
      for (std::size_t e = 0; e < split.extent; ++e)
        for (std::size_t i = 0; i < split.inner; ++i)
          g[(o * split.extent + e) * split.inner + i] += self.grad[o * split.inner + i] * inv;
  }, "mean_over_axis");
}

inline Var sum(const Var& x) {
  double total = 0.0;
  for (double v : x.value().values()) total += v;
  return detail::make_result(Tensor::scalar(total), {x}, [](detail::Node& self) {
    auto& p = self.parent(0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    const double s = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s;
  }, "sum");
}

// ---------------------------------------------------------------------------
// Normalization and regularization

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

namespace detail {

inline void check_bn_shapes(const Var& x, const Var& scale, const Var& shift) {
  if (x.rank() != 2) throw NumericError("batch_norm: input must be [rows, features]");
  const std::size_t c = x.shape()[1];
  if (scale.value().size() != c || shift.value().size() != c)
    throw NumericError("batch_norm: scale/shift width mismatch");
}

inline Var batch_norm_eval(const Var& x, const Var& scale, const Var& shift,
                           const Tensor& mean, const Tensor& var, double eps) {
  const std::size_t rows = x.shape()[0], c = x.shape()[1];
  std::vector<double> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  std::vector<double> mu(mean.values().begin(), mean.values().end());
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j)
      out[r * c + j] = scale.value()[j] * (x.value()[r * c + j] - mu[j]) * inv_std[j] +
                       shift.value()[j];
  return make_result(std::move(out), {x, scale, shift},
                     [rows, c, inv_std = std::move(inv_std), mu = std::move(mu)](Node& self) {
    auto& px = self.parent(0);
    auto& ps = self.parent(1);
    auto& pb = self.parent(2);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const double dy = self.grad[r * c + j];
        if (px.requires_grad) px.grad_buffer()[r * c + j] += dy * ps.value[j] * inv_std[j];
        if (ps.requires_grad)
          ps.grad_buffer()[j] += dy * (px.value[r * c + j] - mu[j]) * inv_std[j];
        if (pb.requires_grad) pb.grad_buffer()[j] += dy;
      }
  }, "batch_norm");
}

}  // namespace detail

/// Batch normalization over rows of a [rows, features] input.
/// Train mode normalizes by batch statistics and folds them into `state`
/// with the given momentum; eval mode uses the running statistics.
inline Var batch_norm(const Var& x, const Var& scale, const Var& shift, BatchNormState& state,
                      Mode mode, double momentum = kBatchNormMomentum,
                      double eps = kBatchNormEpsilon) {
  detail::check_bn_shapes(x, scale, shift);
  if (mode == Mode::Eval)
    return detail::batch_norm_eval(x, scale, shift, state.running_mean, state.running_var, eps);

  const std::size_t rows = x.shape()[0], c = x.shape()[1];
  if (rows < 2) throw NumericError("batch_norm: train mode needs a batch of at least 2");
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  const double* in = x.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) mean[j] += in[r * c + j];
  for (auto& m : mean) m /= static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = in[r * c + j] - mean[j];
      var[j] += d * d;
    }
  for (auto& v : var) v /= static_cast<double>(rows);

  const double unbias = static_cast<double>(rows) / static_cast<double>(rows - 1);
  for (std::size_t j = 0; j < c; ++j) {
    state.running_mean[j] = (1.0 - momentum) * state.running_mean[j] + momentum * mean[j];
    state.running_var[j] = (1.0 - momentum) * state.running_var[j] + momentum * var[j] * unbias;
  }

  std::vector<double> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  Tensor xhat(x.shape());
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (in[r * c + j] - mean[j]) * inv_std[j];
      xhat[r * c + j] = h;
      out[r * c + j] = scale.value()[j] * h + shift.value()[j];
    }
  return detail::make_result(
      std::move(out), {x, scale, shift},
      [rows, c, inv_std = std::move(inv_std), xhat = std::move(xhat)](detail::Node& self) {
        auto& px = self.parent(0);
        auto& ps = self.parent(1);
        auto& pb = self.parent(2);
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const double dy = self.grad[r * c + j];
            sum_dy[j] += dy;
            sum_dy_xhat[j] += dy * xhat[r * c + j];
          }
        if (ps.requires_grad) {
          auto& g = ps.grad_buffer();
          for (std::size_t j = 0; j < c; ++j) g[j] += sum_dy_xhat[j];
        }
        if (pb.requires_grad) {
          auto& g = pb.grad_buffer();
          for (std::size_t j = 0; j < c; ++j) g[j] += sum_dy[j];
        }
        if (px.requires_grad) {
          auto& g = px.grad_buffer();
          const double n = static_cast<double>(rows);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) {
              const double dxhat = self.grad[r * c + j] * ps.value[j];
              g[r * c + j] += inv_std[j] / n *
                              (n * dxhat - ps.value[j] * sum_dy[j] -
                               xhat[r * c + j] * ps.value[j] * sum_dy_xhat[j]);
            }
        }
      },
      "batch_norm");
}

/// Eval-only batch normalization against read-only running statistics.
inline Var batch_norm(const Var& x, const Var& scale, const Var& shift,
                      const BatchNormState& state, double eps = kBatchNormEpsilon) {
  detail::check_bn_shapes(x, scale, shift);
  return detail::batch_norm_eval(x, scale, shift, state.running_mean, state.running_var, eps);
}

/// Inverted dropout. Identity in eval mode or when p == 0.
template <class Rng>
Var dropout(const Var& x, double p, Mode mode, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must lie in [0, 1)");
  if (mode == Mode::Eval || p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  std::vector<double> mask(x.value().size());
  for (auto& m : mask) m = keep(rng) ? s : 0.0;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return detail::make_result(std::move(out), {x}, [mask = std::move(mask)](detail::Node& self) {
    auto& px = self.parent(0);
    if (!px.requires_grad) return;
    auto& g = px.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  }, "dropout");
}

}  // namespace skelnet::ad
