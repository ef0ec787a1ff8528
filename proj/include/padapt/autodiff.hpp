#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "padapt/tensor.hpp"

namespace padapt {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool needs_grad() const;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// vector is already a topological order and backward() is a single reverse
/// sweep. A node only keeps its backward rule when at least one input needs a
/// gradient; frozen subgraphs therefore cost nothing on the way back.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t) {
    Node n;
    n.own = std::move(t);
    return push(std::move(n));
  }

  /// Owned input that participates in differentiation; read its gradient
  /// back with grad_of() after backward().
  Var input(Tensor t, bool requires_grad) {
    Node n;
    n.own = std::move(t);
    n.needs_grad = requires_grad;
    return push(std::move(n));
  }

  /// Leaf bound to an external parameter. The parameter must outlive the
  /// tape and stay unchanged until backward() completes. Gradients are
  /// accumulated into `param.grad` when `param.requires_grad` is set.
  Var leaf(Tensor& param) {
    Node n;
    n.ext = &param;
    n.sink = param.requires_grad ? &param : nullptr;
    n.needs_grad = param.requires_grad;
    return push(std::move(n));
  }

  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, Backward fn) {
    return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }

  Var record(const char* op, Tensor value, std::span<const Var> inputs, Backward fn) {
    if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
    Node n;
    n.own = std::move(value);
    for (const auto& v : inputs) {
      if (v.tape != this) throw Error(std::string(op) + ": input recorded on a different tape");
      if (nodes_[v.id].needs_grad) n.needs_grad = true;
    }
    if (n.needs_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ext ? *n.ext : n.own;
  }
  const Tensor& value(Var v) const { return value(v.id); }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Mutable gradient buffer of a node, zero-initialized on first access.
  std::span<double> grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value(id).numel(), 0.0);
    return n.grad;
  }
  std::span<double> grad(Var v) { return grad(v.id); }

  /// Gradient after backward(); zeros when nothing flowed into the node.
  std::vector<double> grad_of(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.empty()) return std::vector<double>(value(v.id).numel(), 0.0);
    return n.grad;
  }

  void backward(Var loss) {
    if (value(loss).numel() != 1) throw ShapeError("backward() requires a scalar loss");
    if (!nodes_[loss.id].needs_grad) return;
    grad(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.sink) {
        if (!n.sink->grad) n.sink->grad.emplace(n.sink->numel(), 0.0);
        auto& g = *n.sink->grad;
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor own;
    const Tensor* ext = nullptr;
    Tensor* sink = nullptr;
    bool needs_grad = false;
    std::vector<double> grad;
    Backward backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline bool Var::needs_grad() const { return tape->needs_grad(*this); }

namespace detail {

// C += A(m x k) * B(k x n)
inline void gemm_acc(const double* __restrict a, const double* __restrict b, double* __restrict c,
                     std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A^T * B  with A (m x k), B (m x n), C (k x n)
inline void gemm_tn_acc(const double* __restrict a, const double* __restrict b, double* __restrict c,
                        std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline std::vector<double> transposed(const double* a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_rank(const char* op, const Tensor& a, std::size_t r) {
  if (a.rank() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(a.shape()));
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_rank("matmul", A, 2);
  detail::require_rank("matmul", B, 2);
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  if (B.dim(0) != k)
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  Tensor C({m, n});
  detail::gemm_acc(A.data().data(), B.data().data(), C.data().data(), m, k, n);
  return a.tape->record("matmul", std::move(C), {a, b}, [a, b, m, k, n](Tape& t, std::size_t self) {
    auto dc = t.grad(self);
    if (a.needs_grad()) {
      auto bt = detail::transposed(t.value(b).data().data(), k, n);
      detail::gemm_acc(dc.data(), bt.data(), t.grad(a).data(), m, n, k);
    }
    if (b.needs_grad()) detail::gemm_tn_acc(t.value(a).data().data(), dc.data(), t.grad(b).data(), m, k, n);
  });
}

inline Var transpose(Var a) {
  const Tensor& A = a.value();
  detail::require_rank("transpose", A, 2);
  const std::size_t r = A.dim(0), c = A.dim(1);
  Tensor out({c, r}, detail::transposed(A.data().data(), r, c));
  return a.tape->record("transpose", std::move(out), {a}, [a, r, c](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    auto ga = t.grad(a);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_same_shape("add", A, B);
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = A[i] + B[i];
  return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    for (Var v : {a, b}) {
      if (!v.needs_grad()) continue;
      auto gv = t.grad(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

/// x[..., n] + bias[n]; the only broadcast the engine supports.
inline Var add_bias(Var x, Var bias) {
  const Tensor& X = x.value();
  const Tensor& B = bias.value();
  detail::require_rank("add_bias", B, 1);
  if (X.rank() == 0 || X.shape().back() != B.dim(0))
    throw ShapeError("add_bias: last axis of " + shape_str(X.shape()) + " does not match bias " + shape_str(B.shape()));
  const std::size_t n = B.dim(0), rows = X.numel() / n;
  Tensor out(X.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = X[r * n + j] + B[j];
  return x.tape->record("add_bias", std::move(out), {x, bias}, [x, bias, n, rows](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    if (x.needs_grad()) {
      auto gx = t.grad(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (bias.needs_grad()) {
      auto gb = t.grad(bias);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
    }
  });
}

inline Var multiply(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_same_shape("multiply", A, B);
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = A[i] * B[i];
  return a.tape->record("multiply", std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    if (a.needs_grad()) {
      auto ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (b.needs_grad()) {
      auto gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

inline Var scale(Var a, double s) {
  const Tensor& A = a.value();
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = A[i] * s;
  return a.tape->record("scale", std::move(out), {a}, [a, s](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    auto ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

/// tanh-approximated GELU.
inline double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(detail::kGeluC * (x + 0.044715 * x * x * x)));
}

inline double gelu_derivative(double x) {
  const double u = detail::kGeluC * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  const double du = detail::kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

inline Var gelu(Var a) {
  const Tensor& A = a.value();
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = gelu_value(A[i]);
  return a.tape->record("gelu", std::move(out), {a}, [a](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    const Tensor& A = t.value(a);
    auto ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * gelu_derivative(A[i]);
  });
}

// ---------------------------------------------------------------------------
// Normalizations
// ---------------------------------------------------------------------------

inline Var softmax(Var x, std::size_t axis) {
  const Tensor& X = x.value();
  const auto [outer, n, inner] = detail::split_axis(X.shape(), axis);
  Tensor out(X.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t r = 0; r < inner; ++r) {
      const std::size_t base = o * n * inner + r;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, X[base + i * inner]);
      double sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = std::exp(X[base + i * inner] - mx);
        out[base + i * inner] = e;
        sum += e;
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= sum;
    }
  }
  return x.tape->record("softmax", std::move(out), {x}, [x, outer, n, inner](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    const Tensor& Y = t.value(self);
    auto gx = t.grad(x);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t r = 0; r < inner; ++r) {
        const std::size_t base = o * n * inner + r;
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += Y[base + i * inner] * g[base + i * inner];
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t k = base + i * inner;
          gx[k] += Y[k] * (g[k] - dot);
        }
      }
    }
  });
}

/// Row-wise softmax of a T x S score matrix where row i may only attend to
/// columns j <= i + (S - T). Masked entries are exactly zero and never read.
inline Var softmax_causal(Var x) {
  const Tensor& X = x.value();
  detail::require_rank("softmax_causal", X, 2);
  const std::size_t rows = X.dim(0), cols = X.dim(1);
  if (cols < rows) throw ShapeError("softmax_causal: fewer keys than queries");
  const std::size_t offset = cols - rows;
  Tensor out(X.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t valid = i + offset + 1;
    const double* xr = X.data().data() + i * cols;
    double* yr = out.data().data() + i * cols;
    double mx = xr[0];
    for (std::size_t j = 1; j < valid; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < valid; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    for (std::size_t j = 0; j < valid; ++j) yr[j] /= sum;
  }
  return x.tape->record("softmax_causal", std::move(out), {x}, [x, rows, cols, offset](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    const Tensor& Y = t.value(self);
    auto gx = t.grad(x);
    for (std::size_t i = 0; i < rows; ++i) {
      const std::size_t valid = i + offset + 1;
      const std::size_t b = i * cols;
      double dot = 0.0;
      for (std::size_t j = 0; j < valid; ++j) dot += Y[b + j] * g[b + j];
      for (std::size_t j = 0; j < valid; ++j) gx[b + j] += Y[b + j] * (g[b + j] - dot);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each row over the last axis (population variance), then
/// applies gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = kLayerNormEps) {
  const Tensor& X = x.value();
  const Tensor& G = gain.value();
  const Tensor& B = bias.value();
  detail::require_rank("layer_norm", G, 1);
  detail::require_rank("layer_norm", B, 1);
  if (X.rank() == 0 || X.shape().back() != G.dim(0) || G.dim(0) != B.dim(0))
    throw ShapeError("layer_norm: width mismatch " + shape_str(X.shape()) + " gain " + shape_str(G.shape()));
  const std::size_t n = G.dim(0), rows = X.numel() / n;
  Tensor out(X.shape());
  std::vector<double> xhat(X.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data().data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xr[j] - mean) * is;
      xhat[r * n + j] = h;
      out[r * n + j] = G[j] * h + B[j];
    }
  }
  return x.tape->record(
      "layer_norm", std::move(out), {x, gain, bias},
      [x, gain, bias, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        const Tensor& G = t.value(gain);
        if (gain.needs_grad()) {
          auto gg = t.grad(gain);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * xhat[r * n + j];
        }
        if (bias.needs_grad()) {
          auto gb = t.grad(bias);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
        }
        if (x.needs_grad()) {
          auto gx = t.grad(x);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_d = 0.0, mean_dh = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[r * n + j] * G[j];
              mean_d += d;
              mean_dh += d * xhat[r * n + j];
            }
            mean_d *= inv_n;
            mean_dh *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[r * n + j] * G[j];
              gx[r * n + j] += inv_std[r] * (d - mean_d - xhat[r * n + j] * mean_dh);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood over positions whose mask is 1.
inline Var cross_entropy(Var logits, std::span<const std::size_t> targets, std::span<const double> mask) {
  const Tensor& L = logits.value();
  detail::require_rank("cross_entropy", L, 2);
  const std::size_t T = L.dim(0), V = L.dim(1);
  if (targets.size() != T || mask.size() != T)
    throw ShapeError("cross_entropy: targets/mask length must equal " + std::to_string(T));
  double count = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    if (mask[t] != 0.0 && mask[t] != 1.0) throw ConfigError("cross_entropy: mask values must be 0 or 1");
    if (mask[t] == 1.0) {
      if (targets[t] >= V) throw ShapeError("cross_entropy: target id out of range");
      count += 1.0;
    }
  }
  if (count == 0.0) throw ConfigError("cross_entropy: empty loss (every position is masked)");
  std::vector<double> probs(T * V, 0.0);
  double total = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    if (mask[t] == 0.0) continue;
    const double* row = L.data().data() + t * V;
    double mx = row[0];
    for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, row[v]);
    double sum = 0.0;
    for (std::size_t v = 0; v < V; ++v) sum += std::exp(row[v] - mx);
    const double lse = mx + std::log(sum);
    total += lse - row[targets[t]];
    for (std::size_t v = 0; v < V; ++v) probs[t * V + v] = std::exp(row[v] - lse);
  }
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  std::vector<double> msk(mask.begin(), mask.end());
  return logits.tape->record(
      "cross_entropy", Tensor::scalar(total / count), {logits},
      [logits, T, V, count, probs = std::move(probs), tgt = std::move(tgt), msk = std::move(msk)](Tape& t,
                                                                                                   std::size_t self) {
        const double g = t.grad(self)[0] / count;
        auto gl = t.grad(logits);
        for (std::size_t p = 0; p < T; ++p) {
          if (msk[p] == 0.0) continue;
          for (std::size_t v = 0; v < V; ++v) gl[p * V + v] += g * probs[p * V + v];
          gl[p * V + tgt[p]] -= g;
        }
      });
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

inline Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Tensor& first = parts[0].value();
  Shape out_shape = first.shape();
  if (axis >= out_shape.size()) throw ShapeError("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.value().shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != out_shape[d])
        throw ShapeError("concat: extent mismatch " + shape_str(s) + " vs " + shape_str(out_shape));
    total += s[axis];
  }
  out_shape[axis] = total;
  const auto [outer, n_total, inner] = detail::split_axis(out_shape, axis);
  Tensor out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const Tensor& P = p.value();
    const std::size_t n = P.dim(axis);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(P.data().data() + o * n * inner, n * inner, out.data().data() + (o * n_total + off) * inner);
    off += n;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape->record(
      "concat", std::move(out), parts,
      [inputs, offsets, axis, outer = outer, n_total = n_total, inner = inner](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          if (!inputs[k].needs_grad()) continue;
          const std::size_t n = t.value(inputs[k]).dim(axis);
          auto gp = t.grad(inputs[k]);
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < n * inner; ++i)
              gp[o * n * inner + i] += g[(o * n_total + offsets[k]) * inner + i];
        }
      });
}

inline Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

inline Var reshape(Var a, Shape shape) {
  const Tensor& A = a.value();
  if (shape_numel(shape) != A.numel())
    throw ShapeError("reshape: " + shape_str(A.shape()) + " -> " + shape_str(shape) + " changes element count");
  Tensor out(std::move(shape), A.vec());
  return a.tape->record("reshape", std::move(out), {a}, [a](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    auto ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

/// Contiguous range [start, start+len) along one axis.
inline Var slice(Var a, std::size_t axis, std::size_t start, std::size_t len) {
  const Tensor& A = a.value();
  const auto [outer, n, inner] = detail::split_axis(A.shape(), axis);
  if (len == 0 || start + len > n) throw ShapeError("slice: range out of bounds for " + shape_str(A.shape()));
  Shape s = A.shape();
  s[axis] = len;
  Tensor out(s);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(A.data().data() + (o * n + start) * inner, len * inner, out.data().data() + o * len * inner);
  return a.tape->record("slice", std::move(out), {a},
                        [a, outer = outer, n = n, inner = inner, start, len](Tape& t, std::size_t self) {
                          auto g = t.grad(self);
                          auto ga = t.grad(a);
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t i = 0; i < len * inner; ++i)
                              ga[(o * n + start) * inner + i] += g[o * len * inner + i];
                        });
}

/// Rows of a [V x d] table selected by id; also serves as a row gather.
inline Var embedding_lookup(Var table, std::span<const std::size_t> ids) {
  const Tensor& T = table.value();
  detail::require_rank("embedding_lookup", T, 2);
  if (ids.empty()) throw ShapeError("embedding_lookup: empty id list");
  const std::size_t V = T.dim(0), d = T.dim(1);
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= V) throw ShapeError("embedding_lookup: id " + std::to_string(ids[i]) + " out of range");
    std::copy_n(T.data().data() + ids[i] * d, d, out.data().data() + i * d);
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return table.tape->record("embedding_lookup", std::move(out), {table},
                            [table, d, idv = std::move(idv)](Tape& t, std::size_t self) {
                              auto g = t.grad(self);
                              auto gt = t.grad(table);
                              for (std::size_t i = 0; i < idv.size(); ++i)
                                for (std::size_t j = 0; j < d; ++j) gt[idv[i] * d + j] += g[i * d + j];
                            });
}

/// Mean over one axis; the axis is removed from the result.
inline Var mean(Var a, std::size_t axis) {
  const Tensor& A = a.value();
  const auto [outer, n, inner] = detail::split_axis(A.shape(), axis);
  Shape s = A.shape();
  s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(s);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t r = 0; r < inner; ++r) {
      double sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) sum += A[(o * n + i) * inner + r];
      out[o * inner + r] = sum / static_cast<double>(n);
    }
  return a.tape->record("mean", std::move(out), {a}, [a, outer = outer, n = n, inner = inner](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    auto ga = t.grad(a);
    const double w = 1.0 / static_cast<double>(n);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < inner; ++r) ga[(o * n + i) * inner + r] += g[o * inner + r] * w;
  });
}

inline Var sum(Var a) {
  const Tensor& A = a.value();
  double s = 0.0;
  for (double v : A.data()) s += v;
  return a.tape->record("sum", Tensor::scalar(s), {a}, [a](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (auto& v : t.grad(a)) v += g;
  });
}

// ---------------------------------------------------------------------------
// Finite-difference checking
// ---------------------------------------------------------------------------

using ScalarFn = std::function<Var(Tape&, Var)>;

/// max_i |analytic_i - central_i| / max(1, |analytic_i|) for f at x.
inline double grad_check(const ScalarFn& f, const Tensor& x, double h = 1e-5) {
  std::vector<double> analytic;
  {
    Tape tape;
    Var xv = tape.input(x, true);
    Var y = f(tape, xv);
    if (y.value().numel() != 1) throw ShapeError("grad_check: function must be scalar-valued");
    tape.backward(y);
    analytic = tape.grad_of(xv);
  }
  auto eval = [&](const Tensor& at) {
    Tape tape;
    return f(tape, tape.input(at, false)).value().item();
  };
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = eval(probe);
    probe[i] = orig - h;
    const double fm = eval(probe);
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace padapt
