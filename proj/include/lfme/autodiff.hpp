#pragma once

// Tape-based reverse-mode differentiation over dense Tensors.
//
// A Tape records one forward pass. Values enter as constants (no gradient),
// or as leaves bound to a Parameter whose grad buffer receives the
// accumulated gradient when Tape::backward runs. Nodes are appended in
// evaluation order, so the tape is topologically sorted by construction.

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lfme/errors.hpp"
#include "lfme/tensor.hpp"

namespace lfme {

/// A trainable tensor and its gradient buffer. Gradients accumulate across
/// backward calls until zero_grad().
struct Parameter {
  Tensor value;
  std::vector<double> grad;

  Parameter() = default;
  explicit Parameter(Tensor v) : value(std::move(v)), grad(value.size(), 0.0) {}

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

/// Floor applied to probabilities before taking logs in cross-entropy.
inline constexpr double kLogFloor = 1e-12;

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Tensor value;
    std::vector<double> grad;
    std::vector<std::size_t> parents;
    const char* op = "const";
    BackwardFn backward;
    Parameter* sink = nullptr;
    bool requires_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
  }

  Var leaf(Parameter& p) {
    Node n;
    n.value = p.value;
    n.op = "leaf";
    n.sink = &p;
    n.requires_grad = true;
    return push(std::move(n));
  }

  /// Records an op result. The backward closure runs only if some parent
  /// requires a gradient.
  Var record(Tensor value, const char* op, std::vector<std::size_t> parents,
             BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    n.op = op;
    for (auto p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
    n.parents = std::move(parents);
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of node `id`, allocated on first touch. Only call for
  /// nodes that require gradients.
  std::vector<double>& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Propagates d(loss)/d(node) back through the tape and adds leaf gradients
  /// into their Parameters. Node-level gradients are recomputed from scratch
  /// on each call, so calling twice doubles the Parameter gradients.
  void backward(Var loss) {
    if (loss.tape != this) throw ValidationError("backward: loss belongs to a different tape");
    if (nodes_[loss.id].value.size() != 1) {
      throw ValidationError("backward: loss must be a scalar, got shape " +
                            shape_str(nodes_[loss.id].value.shape()));
    }
    for (auto& n : nodes_) n.grad.clear();
    if (!nodes_[loss.id].requires_grad) return;
    grad(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.sink) {
        auto& g = n.sink->grad;
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
      }
    }
  }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->node(id).value; }

namespace detail {

inline void require_same_tape(Var a, Var b, const char* op) {
  if (a.tape != b.tape) throw ValidationError(std::string(op) + ": operands on different tapes");
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         shape_str(a.shape()));
  }
}

/// Batch size used by batch-mean reductions: rows of a matrix, 1 otherwise.
inline std::size_t batch_of(const Tensor& t) { return t.rank() == 2 ? t.shape()[0] : 1; }

}  // namespace detail

/// Same values, no graph linkage: gradients never pass through.
inline Var detach(Var t) { return t.tape->constant(t.value()); }

inline Var matmul(Var a, Var b) {
  detail::require_same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0]) {
    throw DimensionError("matmul: cannot multiply " + shape_str(av.shape()) +
                         " by " + shape_str(bv.shape()));
  }
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  Tensor out({m, n});
  kernels::matmul(av.data(), bv.data(), out.data(), m, k, n);
  return a.tape->record(
      std::move(out), "matmul", {a.id, b.id},
      [ai = a.id, bi = b.id, m, k, n](Tape& t, std::size_t self) {
        const auto& g = t.node(self).grad;
        const auto& A = t.node(ai).value.values();
        const auto& B = t.node(bi).value.values();
        if (t.requires_grad(ai)) {
          auto& ga = t.grad(ai);  // g * B^T
          for (std::size_t i = 0; i < m; ++i) {
            const double* grow = g.data() + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const double* brow = B.data() + p * n;
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              ga[i * k + p] += acc;
            }
          }
        }
        if (t.requires_grad(bi)) {
          auto& gb = t.grad(bi);  // A^T * g
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = A[i * k + p];
              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
            }
        }
      });
}

/// x[B x n] + bias[n], broadcast over rows.
inline Var add_bias(Var x, Var bias) {
  detail::require_same_tape(x, bias, "add_bias");
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  detail::require_matrix(xv, "add_bias");
  const std::size_t rows = xv.shape()[0], n = xv.shape()[1];
  if (bv.size() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) +
                         " does not match " + shape_str(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out(r, j) += bv[j];
  return x.tape->record(std::move(out), "add_bias", {x.id, bias.id},
                        [xi = x.id, bi = bias.id, rows, n](Tape& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          if (t.requires_grad(xi)) {
                            auto& gx = t.grad(xi);
                            for (std::size_t j = 0; j < g.size(); ++j) gx[j] += g[j];
                          }
                          if (t.requires_grad(bi)) {
                            auto& gb = t.grad(bi);
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
                          }
                        });
}

inline Var relu(Var x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  return x.tape->record(std::move(out), "relu", {x.id},
                        [xi = x.id](Tape& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          const auto& xv = t.node(xi).value.values();
                          auto& gx = t.grad(xi);
                          for (std::size_t j = 0; j < g.size(); ++j)
                            if (xv[j] > 0.0) gx[j] += g[j];
                        });
}

inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b, "add");
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const auto& bv = b.value().values();
  for (std::size_t j = 0; j < out.size(); ++j) out[j] += bv[j];
  return a.tape->record(std::move(out), "add", {a.id, b.id},
                        [ai = a.id, bi = b.id](Tape& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          for (auto id : {ai, bi}) {
                            if (!t.requires_grad(id)) continue;
                            auto& gi = t.grad(id);
                            for (std::size_t j = 0; j < g.size(); ++j) gi[j] += g[j];
                          }
                        });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= s;
  return a.tape->record(std::move(out), "scale", {a.id},
                        [ai = a.id, s](Tape& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          auto& ga = t.grad(ai);
                          for (std::size_t j = 0; j < g.size(); ++j) ga[j] += s * g[j];
                        });
}

/// Sum of all entries, as a 1-element tensor.
inline Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().values()) total += v;
  return a.tape->record(Tensor({1}, {total}), "sum", {a.id},
                        [ai = a.id](Tape& t, std::size_t self) {
                          const double g = t.node(self).grad[0];
                          for (auto& v : t.grad(ai)) v += g;
                        });
}

/// Mean of all entries; 0 for an empty tensor.
inline Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) return a.tape->constant(Tensor({1}, {0.0}));
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

/// sum_i w_i v_i / n for a per-sample vector v and constant weights w.
inline Var weighted_mean(Var v, std::span<const double> w) {
  const auto& vv = v.value().values();
  if (w.size() != vv.size()) {
    throw DimensionError("weighted_mean: " + std::to_string(w.size()) +
                         " weights for " + std::to_string(vv.size()) + " values");
  }
  if (vv.empty()) return v.tape->constant(Tensor({1}, {0.0}));
  const double inv_n = 1.0 / static_cast<double>(vv.size());
  double total = 0.0;
  for (std::size_t i = 0; i < vv.size(); ++i) total += w[i] * vv[i];
  std::vector<double> weights(w.begin(), w.end());
  return v.tape->record(Tensor({1}, {total * inv_n}), "weighted_mean", {v.id},
                        [vi = v.id, weights = std::move(weights), inv_n](Tape& t, std::size_t self) {
                          const double g = t.node(self).grad[0];
                          auto& gv = t.grad(vi);
                          for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += g * weights[i] * inv_n;
                        });
}

/// Row-wise softmax over the last dimension.
inline Var softmax(Var z) {
  Tensor out = kernels::softmax(z.value());
  const std::size_t k = out.cols();
  return z.tape->record(std::move(out), "softmax", {z.id},
                        [zi = z.id, k](Tape& t, std::size_t self) {
                          const auto& node = t.node(self);
                          const auto& q = node.value.values();
                          const auto& g = node.grad;
                          auto& gz = t.grad(zi);
                          for (std::size_t r = 0; r * k < q.size(); ++r) {
                            const std::size_t o = r * k;
                            double dot = 0.0;
                            for (std::size_t c = 0; c < k; ++c) dot += g[o + c] * q[o + c];
                            for (std::size_t c = 0; c < k; ++c) gz[o + c] += q[o + c] * (g[o + c] - dot);
                          }
                        });
}

/// Per-row cross-entropy -sum_c target_c log(max(q_c, floor)) -> shape {B}.
/// The target is a constant soft label; no gradient flows to it.
inline Var cross_entropy_rows(Var q, const Tensor& target) {
  const Tensor& qv = q.value();
  detail::require_same_shape(qv, target, "cross_entropy");
  const std::size_t b = qv.rows(), k = qv.cols();
  Tensor out({b});
  for (std::size_t r = 0; r < b; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double y = target(r, c);
      if (y != 0.0) acc -= y * std::log(std::max(qv(r, c), kLogFloor));
    }
    out[r] = acc;
  }
  return q.tape->record(std::move(out), "cross_entropy", {q.id},
                        [qi = q.id, target, k](Tape& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          const auto& qv = t.node(qi).value.values();
                          auto& gq = t.grad(qi);
                          for (std::size_t j = 0; j < qv.size(); ++j) {
                            const double y = target[j];
                            if (y != 0.0 && qv[j] > kLogFloor) gq[j] -= g[j / k] * y / qv[j];
                          }
                        });
}

/// Throws unless every row of `y` is one-hot.
inline void require_one_hot(const Tensor& y) {
  const std::size_t k = y.cols();
  for (std::size_t r = 0; r < y.rows(); ++r) {
    int ones = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const double v = y(r, c);
      if (v == 1.0) {
        ++ones;
      } else if (v != 0.0) {
        throw ValidationError("cross_entropy: label row " + std::to_string(r) + " is not one-hot");
      }
    }
    if (ones != 1) throw ValidationError("cross_entropy: label row " + std::to_string(r) + " is not one-hot");
  }
}

/// Batch-mean cross-entropy H(q, y) against one-hot labels.
inline Var cross_entropy(Var q, const Tensor& y) {
  require_one_hot(y);
  return mean(cross_entropy_rows(q, y));
}

/// Batch-mean cross-entropy against an arbitrary soft target.
inline Var soft_cross_entropy(Var q, const Tensor& target) {
  return mean(cross_entropy_rows(q, target));
}

/// Per-row squared L2 distance ||a_r - b_r||^2 -> shape {B}.
inline Var sq_dist_rows(Var a, Var b) {
  detail::require_same_tape(a, b, "sq_dist");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_same_shape(av, bv, "mse");
  const std::size_t rows = detail::batch_of(av);
  const std::size_t k = rows ? av.size() / rows : 0;
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double d = av[r * k + c] - bv[r * k + c];
      acc += d * d;
    }
    out[r] = acc;
  }
  return a.tape->record(std::move(out), "sq_dist", {a.id, b.id},
                        [ai = a.id, bi = b.id, k](Tape& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          const auto& av = t.node(ai).value.values();
                          const auto& bv = t.node(bi).value.values();
                          const bool ga_on = t.requires_grad(ai), gb_on = t.requires_grad(bi);
                          for (std::size_t j = 0; j < av.size(); ++j) {
                            const double d = 2.0 * g[j / k] * (av[j] - bv[j]);
                            if (ga_on) t.grad(ai)[j] += d;
                            if (gb_on) t.grad(bi)[j] -= d;
                          }
                        });
}

/// Sum of squared differences divided by the batch size.
inline Var mse(Var a, Var b) { return mean(sq_dist_rows(a, b)); }

}  // namespace lfme
