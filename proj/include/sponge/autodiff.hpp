// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "sponge/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace sponge {

template <typename Scalar>
class Tape;

/// Handle to a tensor recorded on a Tape. Cheap to copy; only valid while
/// its tape is alive.
template <typename Scalar>
struct Var {
  Tape<Scalar> *tape = nullptr;
  std::size_t id = 0;

  const Matrix<Scalar> &value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

/// Single-use reverse-mode tape. Nodes are appended in evaluation order, so
/// every operand precedes its result and a reverse sweep is a valid
/// topological traversal.
///
/// Only nodes that (transitively) depend on a `variable` carry a backward
/// closure; constants such as frozen model weights cost nothing in the
/// reverse sweep.
template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using Backprop = std::function<void(Tape &, std::size_t)>;

  Tape() = default;
  Tape(const Tape &) = delete;
  Tape &operator=(const Tape &) = delete;

  Var<Scalar> constant(Mat value) { return push("constant", std::move(value), false, nullptr); }

  Var<Scalar> variable(Mat value) { return push("variable", std::move(value), true, nullptr); }

  /// Records the result of a primitive. `backprop` is dropped when no
  /// operand needs a gradient.
  Var<Scalar> record(std::string_view op, Mat value, std::initializer_list<Var<Scalar>> operands,
                     Backprop backprop) {
    bool needs = false;
    for (const auto &v : operands) {
      check_owned(v, op);
      needs = needs || nodes_[v.id].requires_grad;
    }
    return push(op, std::move(value), needs, needs ? std::move(backprop) : nullptr);
  }

  Var<Scalar> record(std::string_view op, Mat value, std::span<const Var<Scalar>> operands,
                     Backprop backprop) {
    bool needs = false;
    for (const auto &v : operands) {
      check_owned(v, op);
      needs = needs || nodes_[v.id].requires_grad;
    }
    return push(op, std::move(value), needs, needs ? std::move(backprop) : nullptr);
  }

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
  void backward(Var<Scalar> loss) {
    check_owned(loss, "backward");
    const Mat &v = nodes_[loss.id].value;
    if (v.rows() != 1 || v.cols() != 1) {
      throw ShapeError("backward: loss must be scalar (1x1), got " + shape_string(v));
    }
    for (auto &n : nodes_) {
      n.grad.resize(0, 0);
    }
    if (!nodes_[loss.id].requires_grad) {
      backward_done_ = true;
      return;
    }
    grad_ref(loss.id).setConstant(Scalar(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node &n = nodes_[i];
      if (n.backprop && n.grad.size() != 0) {
        n.backprop(*this, i);
      }
    }
    backward_done_ = true;
  }

  const Mat &value(std::size_t id) const { return nodes_.at(id).value; }

  /// Gradient of the last `backward` loss with respect to `v`; zeros when
  /// `v` does not influence the loss.
  Mat grad(Var<Scalar> v) const {
    const Node &n = nodes_.at(v.id);
    if (n.grad.size() == 0) {
      return Mat::Zero(n.value.rows(), n.value.cols());
    }
    return n.grad;
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  std::string_view op_name(std::size_t id) const { return nodes_.at(id).op; }

  std::size_t size() const { return nodes_.size(); }

  // Backprop helpers: closures read the result gradient with `out_grad` and
  // push adjoints into operands with `accumulate`.
  const Mat &out_grad(std::size_t id) const { return nodes_[id].grad; }

  template <typename Expr>
  void accumulate(std::size_t id, const Expr &adjoint) {
    if (!nodes_[id].requires_grad) {
      return;
    }
    grad_ref(id) += adjoint;
  }

 private:
  struct Node {
    std::string_view op;
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backprop backprop;
  };

  Var<Scalar> push(std::string_view op, Mat value, bool requires_grad, Backprop backprop) {
    nodes_.push_back(Node{op, std::move(value), Mat(), requires_grad, std::move(backprop)});
    return Var<Scalar>{this, nodes_.size() - 1};
  }

  Mat &grad_ref(std::size_t id) {
    Node &n = nodes_[id];
    if (n.grad.size() == 0) {
      n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    }
    return n.grad;
  }

  void check_owned(const Var<Scalar> &v, std::string_view op) const {
    if (v.tape != this || v.id >= nodes_.size()) {
      throw std::invalid_argument(std::string(op) + ": operand not recorded on this tape");
    }
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  const auto &A = a.value();
  const auto &B = b.value();
  if (A.cols() != B.rows()) {
    throw_shape_mismatch("matmul", A.rows(), A.cols(), B.rows(), B.cols());
  }
  Matrix<Scalar> out = A * B;
  return a.tape->record("matmul", std::move(out), {a, b}, [a, b](Tape<Scalar> &t, std::size_t self) {
    const auto &g = t.out_grad(self);
    if (t.requires_grad(a.id)) {
      t.accumulate(a.id, g * t.value(b.id).transpose());
    }
    if (t.requires_grad(b.id)) {
      t.accumulate(b.id, t.value(a.id).transpose() * g);
    }
  });
}

/// Elementwise sum. `b` may also be a single row, broadcast over the rows
/// of `a` (bias add).
template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  const auto &A = a.value();
  const auto &B = b.value();
  if (A.rows() == B.rows() && A.cols() == B.cols()) {
    Matrix<Scalar> out = A + B;
    return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape<Scalar> &t, std::size_t self) {
      t.accumulate(a.id, t.out_grad(self));
      t.accumulate(b.id, t.out_grad(self));
    });
  }
  if (B.rows() == 1 && A.cols() == B.cols()) {
    Matrix<Scalar> out = A.rowwise() + B.row(0);
    return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape<Scalar> &t, std::size_t self) {
      t.accumulate(a.id, t.out_grad(self));
      t.accumulate(b.id, t.out_grad(self).colwise().sum());
    });
  }
  throw_shape_mismatch("add", A.rows(), A.cols(), B.rows(), B.cols());
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  const auto &A = a.value();
  const auto &B = b.value();
  if (A.rows() != B.rows() || A.cols() != B.cols()) {
    throw_shape_mismatch("sub", A.rows(), A.cols(), B.rows(), B.cols());
  }
  Matrix<Scalar> out = A - B;
  return a.tape->record("sub", std::move(out), {a, b}, [a, b](Tape<Scalar> &t, std::size_t self) {
    t.accumulate(a.id, t.out_grad(self));
    t.accumulate(b.id, -t.out_grad(self));
  });
}

/// Elementwise (Hadamard) product.
template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  const auto &A = a.value();
  const auto &B = b.value();
  if (A.rows() != B.rows() || A.cols() != B.cols()) {
    throw_shape_mismatch("mul", A.rows(), A.cols(), B.rows(), B.cols());
  }
  Matrix<Scalar> out = A.cwiseProduct(B);
  return a.tape->record("mul", std::move(out), {a, b}, [a, b](Tape<Scalar> &t, std::size_t self) {
    const auto &g = t.out_grad(self);
    if (t.requires_grad(a.id)) {
      t.accumulate(a.id, g.cwiseProduct(t.value(b.id)));
    }
    if (t.requires_grad(b.id)) {
      t.accumulate(b.id, g.cwiseProduct(t.value(a.id)));
    }
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  Matrix<Scalar> out = a.value() * s;
  return a.tape->record("scale", std::move(out), {a}, [a, s](Tape<Scalar> &t, std::size_t self) {
    t.accumulate(a.id, t.out_grad(self) * s);
  });
}

namespace detail {
template <typename Scalar>
constexpr Scalar kGeluC = Scalar(0.7978845608028654);  // sqrt(2/pi)
template <typename Scalar>
constexpr Scalar kGeluA = Scalar(0.044715);
}  // namespace detail

/// GELU, tanh approximation (smooth everywhere, which the gradient checks
/// rely on).
template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> a) {
  using detail::kGeluA;
  using detail::kGeluC;
  const auto &X = a.value();
  Matrix<Scalar> out(X.rows(), X.cols());
  for (Eigen::Index i = 0; i < X.size(); ++i) {
    const Scalar x = X.data()[i];
    const Scalar u = kGeluC<Scalar> * (x + kGeluA<Scalar> * x * x * x);
    out.data()[i] = Scalar(0.5) * x * (Scalar(1) + std::tanh(u));
  }
  return a.tape->record("gelu", std::move(out), {a}, [a](Tape<Scalar> &t, std::size_t self) {
    const auto &X = t.value(a.id);
    const auto &g = t.out_grad(self);
    Matrix<Scalar> d(X.rows(), X.cols());
    for (Eigen::Index i = 0; i < X.size(); ++i) {
      const Scalar x = X.data()[i];
      const Scalar u = kGeluC<Scalar> * (x + kGeluA<Scalar> * x * x * x);
      const Scalar th = std::tanh(u);
      const Scalar du = kGeluC<Scalar> * (Scalar(1) + Scalar(3) * kGeluA<Scalar> * x * x);
      d.data()[i] = g.data()[i] * (Scalar(0.5) * (Scalar(1) + th) +
                                   Scalar(0.5) * x * (Scalar(1) - th * th) * du);
    }
    t.accumulate(a.id, d);
  });
}

/// Row-wise layer normalization with learned gain and bias (both 1 x d).
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gain, Var<Scalar> bias, Scalar eps = Scalar(1e-5)) {
  const auto &X = x.value();
  const Eigen::Index d = X.cols();
  if (gain.rows() != 1 || gain.cols() != d) {
    throw_shape_mismatch("layer_norm", X.rows(), d, gain.rows(), gain.cols());
  }
  if (bias.rows() != 1 || bias.cols() != d) {
    throw_shape_mismatch("layer_norm", X.rows(), d, bias.rows(), bias.cols());
  }
  Matrix<Scalar> xhat(X.rows(), d);
  ColVector<Scalar> inv_std(X.rows());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const Scalar mu = X.row(r).mean();
    const Scalar var = (X.row(r).array() - mu).square().mean();
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (X.row(r).array() - mu) * inv_std(r);
  }
  Matrix<Scalar> out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() +
                       bias.value().row(0).array();
  return x.tape->record(
      "layer_norm", std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<Scalar> &t,
                                                                           std::size_t self) {
        const auto &g = t.out_grad(self);
        if (t.requires_grad(gain.id)) {
          t.accumulate(gain.id, g.cwiseProduct(xhat).colwise().sum());
        }
        if (t.requires_grad(bias.id)) {
          t.accumulate(bias.id, g.colwise().sum());
        }
        if (t.requires_grad(x.id)) {
          const auto &G = t.value(gain.id);
          Matrix<Scalar> dxhat = g.array().rowwise() * G.row(0).array();
          Matrix<Scalar> dx(dxhat.rows(), dxhat.cols());
          for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
            const Scalar m1 = dxhat.row(r).mean();
            const Scalar m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
            dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
          }
          t.accumulate(x.id, dx);
        }
      });
}

/// Embedding lookup: row `ids[i]` of `table` becomes row i of the result.
template <typename Scalar>
Var<Scalar> gather_rows(Var<Scalar> table, std::span<const TokenId> ids) {
  const auto &T = table.value();
  Matrix<Scalar> out(static_cast<Eigen::Index>(ids.size()), T.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= T.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(ids[i]) + " out of range for table " +
                       shape_string(T));
    }
    out.row(static_cast<Eigen::Index>(i)) = T.row(ids[i]);
  }
  std::vector<TokenId> idx(ids.begin(), ids.end());
  return table.tape->record("gather_rows", std::move(out), {table},
                            [table, idx = std::move(idx)](Tape<Scalar> &t, std::size_t self) {
                              const auto &g = t.out_grad(self);
                              const auto &T = t.value(table.id);
                              Matrix<Scalar> d = Matrix<Scalar>::Zero(T.rows(), T.cols());
                              for (std::size_t i = 0; i < idx.size(); ++i) {
                                d.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
                              }
                              t.accumulate(table.id, d);
                            });
}

namespace detail {
/// Numerically stable softmax of row `r` restricted to the first `width`
/// columns; columns at or beyond `width` are exactly zero.
template <typename Scalar>
void softmax_row(const Matrix<Scalar> &X, Matrix<Scalar> &Y, Eigen::Index r, Eigen::Index width) {
  const Scalar m = X.row(r).head(width).maxCoeff();
  Scalar s = 0;
  for (Eigen::Index c = 0; c < width; ++c) {
    const Scalar e = std::exp(X(r, c) - m);
    Y(r, c) = e;
    s += e;
  }
  for (Eigen::Index c = 0; c < width; ++c) {
    Y(r, c) /= s;
  }
  for (Eigen::Index c = width; c < X.cols(); ++c) {
    Y(r, c) = 0;
  }
}

template <typename Scalar>
auto softmax_backprop(Var<Scalar> x) {
  return [x](Tape<Scalar> &t, std::size_t self) {
    const auto &Y = t.value(self);
    const auto &g = t.out_grad(self);
    ColVector<Scalar> dot = g.cwiseProduct(Y).rowwise().sum();
    Matrix<Scalar> d = Y.cwiseProduct(g - dot.replicate(1, g.cols()));
    t.accumulate(x.id, d);
  };
}
}  // namespace detail

template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> x) {
  const auto &X = x.value();
  Matrix<Scalar> Y(X.rows(), X.cols());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    detail::softmax_row(X, Y, r, X.cols());
  }
  return x.tape->record("softmax", std::move(Y), {x}, detail::softmax_backprop(x));
}

/// Softmax over attention scores with a causal mask: row i may attend to
/// columns j <= i + (cols - rows). Masked entries are exactly zero.
template <typename Scalar>
Var<Scalar> causal_softmax_rows(Var<Scalar> x) {
  const auto &X = x.value();
  const Eigen::Index offset = X.cols() - X.rows();
  if (offset < 0) {
    throw ShapeError("causal_softmax: more queries than keys " + shape_string(X));
  }
  Matrix<Scalar> Y(X.rows(), X.cols());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    detail::softmax_row(X, Y, r, r + offset + 1);
  }
  return x.tape->record("causal_softmax", std::move(Y), {x}, detail::softmax_backprop(x));
}

/// Euclidean norm of each row, returned as a column (n x 1).
template <typename Scalar>
Var<Scalar> row_l2norm(Var<Scalar> x) {
  const auto &X = x.value();
  ColVector<Scalar> n = X.rowwise().norm();
  Matrix<Scalar> out = n;
  return x.tape->record("row_l2norm", std::move(out), {x}, [x](Tape<Scalar> &t, std::size_t self) {
    const auto &X = t.value(x.id);
    const auto &N = t.value(self);
    const auto &g = t.out_grad(self);
    Matrix<Scalar> d(X.rows(), X.cols());
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      if (N(r, 0) > Scalar(0)) {
        d.row(r) = X.row(r) * (g(r, 0) / N(r, 0));
      } else {
        d.row(r).setZero();
      }
    }
    t.accumulate(x.id, d);
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> x) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  return x.tape->record("sum", std::move(out), {x}, [x](Tape<Scalar> &t, std::size_t self) {
    const auto &X = t.value(x.id);
    t.accumulate(x.id, Matrix<Scalar>::Constant(X.rows(), X.cols(), t.out_grad(self)(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> x) {
  const auto &X = x.value();
  if (X.size() == 0) {
    throw ShapeError("mean: empty tensor " + shape_string(X));
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = X.mean();
  return x.tape->record("mean", std::move(out), {x}, [x](Tape<Scalar> &t, std::size_t self) {
    const auto &X = t.value(x.id);
    const Scalar g = t.out_grad(self)(0, 0) / static_cast<Scalar>(X.size());
    t.accumulate(x.id, Matrix<Scalar>::Constant(X.rows(), X.cols(), g));
  });
}

template <typename Scalar>
Var<Scalar> transpose(Var<Scalar> x) {
  Matrix<Scalar> out = x.value().transpose();
  return x.tape->record("transpose", std::move(out), {x}, [x](Tape<Scalar> &t, std::size_t self) {
    t.accumulate(x.id, t.out_grad(self).transpose());
  });
}

template <typename Scalar>
Var<Scalar> concat_rows(Var<Scalar> a, Var<Scalar> b) {
  const auto &A = a.value();
  const auto &B = b.value();
  if (A.cols() != B.cols()) {
    throw_shape_mismatch("concat_rows", A.rows(), A.cols(), B.rows(), B.cols());
  }
  Matrix<Scalar> out(A.rows() + B.rows(), A.cols());
  out.topRows(A.rows()) = A;
  out.bottomRows(B.rows()) = B;
  const Eigen::Index ra = A.rows();
  return a.tape->record("concat_rows", std::move(out), {a, b}, [a, b, ra](Tape<Scalar> &t, std::size_t self) {
    const auto &g = t.out_grad(self);
    t.accumulate(a.id, g.topRows(ra));
    t.accumulate(b.id, g.bottomRows(g.rows() - ra));
  });
}

template <typename Scalar>
Var<Scalar> concat_cols(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) {
    throw ShapeError("concat_cols: no operands");
  }
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const auto &p : parts) {
    if (p.rows() != rows) {
      throw_shape_mismatch("concat_cols", rows, parts[0].cols(), p.rows(), p.cols());
    }
    cols += p.cols();
  }
  Matrix<Scalar> out(rows, cols);
  std::vector<Var<Scalar>> ops(parts.begin(), parts.end());
  Eigen::Index c = 0;
  for (const auto &p : ops) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  Tape<Scalar> *tape = parts[0].tape;
  return tape->record("concat_cols", std::move(out), std::span<const Var<Scalar>>(ops),
                      [ops](Tape<Scalar> &t, std::size_t self) {
                        const auto &g = t.out_grad(self);
                        Eigen::Index c = 0;
                        for (const auto &p : ops) {
                          const Eigen::Index w = t.value(p.id).cols();
                          t.accumulate(p.id, g.middleCols(c, w));
                          c += w;
                        }
                      });
}

template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> x, Eigen::Index first, Eigen::Index count) {
  const auto &X = x.value();
  if (first < 0 || count < 0 || first + count > X.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(first) + ", " + std::to_string(first + count) +
                     ") out of range for " + shape_string(X));
  }
  Matrix<Scalar> out = X.middleRows(first, count);
  return x.tape->record("slice_rows", std::move(out), {x}, [x, first, count](Tape<Scalar> &t, std::size_t self) {
    const auto &X = t.value(x.id);
    Matrix<Scalar> d = Matrix<Scalar>::Zero(X.rows(), X.cols());
    d.middleRows(first, count) = t.out_grad(self);
    t.accumulate(x.id, d);
  });
}

template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> x, Eigen::Index first, Eigen::Index count) {
  const auto &X = x.value();
  if (first < 0 || count < 0 || first + count > X.cols()) {
    throw ShapeError("slice_cols: cols [" + std::to_string(first) + ", " + std::to_string(first + count) +
                     ") out of range for " + shape_string(X));
  }
  Matrix<Scalar> out = X.middleCols(first, count);
  return x.tape->record("slice_cols", std::move(out), {x}, [x, first, count](Tape<Scalar> &t, std::size_t self) {
    const auto &X = t.value(x.id);
    Matrix<Scalar> d = Matrix<Scalar>::Zero(X.rows(), X.cols());
    d.middleCols(first, count) = t.out_grad(self);
    t.accumulate(x.id, d);
  });
}

/// Mean next-token cross-entropy: rows of `logits` against `targets`.
template <typename Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, std::span<const TokenId> targets) {
  const auto &Z = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != Z.rows() || Z.rows() == 0) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_string(Z));
  }
  Matrix<Scalar> P(Z.rows(), Z.cols());
  Scalar total = 0;
  for (Eigen::Index r = 0; r < Z.rows(); ++r) {
    const TokenId y = targets[static_cast<std::size_t>(r)];
    if (y < 0 || y >= Z.cols()) {
      throw ShapeError("cross_entropy: target " + std::to_string(y) + " out of range for " + shape_string(Z));
    }
    detail::softmax_row(Z, P, r, Z.cols());
    const Scalar m = Z.row(r).maxCoeff();
    const Scalar lse = m + std::log((Z.row(r).array() - m).exp().sum());
    total += lse - Z(r, y);
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = total / static_cast<Scalar>(Z.rows());
  std::vector<TokenId> tgt(targets.begin(), targets.end());
  return logits.tape->record("cross_entropy", std::move(out), {logits},
                             [logits, tgt = std::move(tgt), P = std::move(P)](Tape<Scalar> &t, std::size_t self) {
                               const Scalar g = t.out_grad(self)(0, 0) / static_cast<Scalar>(P.rows());
                               Matrix<Scalar> d = P;
                               for (std::size_t r = 0; r < tgt.size(); ++r) {
                                 d(static_cast<Eigen::Index>(r), tgt[r]) -= Scalar(1);
                               }
                               t.accumulate(logits.id, d * g);
                             });
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradientCheck {
  double max_relative_error = 0.0;
  Eigen::Index worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

enum class Stencil {
  /// (f(x+h) - f(x-h)) / 2h, error O(h^2).
  central,
  /// (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h, error O(h^4).
  five_point,
};

/// Compares the tape gradient of `f` at `x` against finite differences,
/// coordinate by coordinate: |analytic - numeric| / (|analytic| + 1e-8).
///
/// `f` is called as `f(tape, x_var)` and must return a scalar Var; it is
/// re-evaluated on a fresh tape for every perturbed point.
template <typename Scalar, typename F>
GradientCheck finite_difference_check(F &&f, const Matrix<Scalar> &x, Scalar h,
                                      Stencil stencil = Stencil::central) {
  if (!(h > Scalar(0))) {
    throw std::invalid_argument("finite_difference_check: step must be positive");
  }
  Matrix<Scalar> analytic;
  {
    Tape<Scalar> tape;
    Var<Scalar> xv = tape.variable(x);
    Var<Scalar> loss = f(tape, xv);
    tape.backward(loss);
    analytic = tape.grad(xv);
  }
  auto eval = [&f](const Matrix<Scalar> &point) {
    Tape<Scalar> tape;
    Var<Scalar> xv = tape.variable(point);
    return static_cast<double>(f(tape, xv).value()(0, 0));
  };
  GradientCheck result;
  Matrix<Scalar> probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const Scalar orig = probe.data()[i];
    auto at = [&](int k) {
      probe.data()[i] = orig + static_cast<Scalar>(k) * h;
      return eval(probe);
    };
    const double hd = static_cast<double>(h);
    double numeric = 0.0;
    if (stencil == Stencil::central) {
      numeric = (at(1) - at(-1)) / (2.0 * hd);
    } else {
      numeric = (-at(2) + 8.0 * at(1) - 8.0 * at(-1) + at(-2)) / (12.0 * hd);
    }
    probe.data()[i] = orig;
    const double a = static_cast<double>(analytic.data()[i]);
    const double rel = std::abs(a - numeric) / (std::abs(a) + 1e-8);
    if (rel > result.max_relative_error || result.worst_index < 0) {
      result.max_relative_error = rel;
      result.worst_index = i;
      result.analytic_at_worst = a;
      result.numeric_at_worst = numeric;
    }
  }
  return result;
}

}  // namespace sponge
