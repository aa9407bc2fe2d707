// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records every operation of one forward pass. Each node owns its
// value and (lazily) its gradient; backward() walks the tape in reverse.
// Parameters live outside the tape in a ParameterStore and are attached as
// leaves; their gradients are flushed into a GradBuffer after backward.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "bridgepath/params.hpp"

namespace bridgepath::ag {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
class Tape;

template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Mat<S>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  S scalar() const { return value()(0, 0); }
};

template <class S>
class Tape {
 public:
  using Matrix = Mat<S>;
  using Backward = std::function<void(Tape&, const Matrix&)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  const Matrix& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if constexpr (std::is_same_v<S, double>) {
      if (n.external) return *n.external;
    }
    return n.value;
  }

  // Gradient of the last backward() with respect to node `id`; empty when
  // nothing flowed into it.
  const Matrix& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  Var<S> constant(Matrix v) { return push(std::move(v), false, nullptr); }

  // A leaf that collects gradient but is not a stored parameter.
  Var<S> input(Matrix v) { return push(std::move(v), grad_enabled_, nullptr); }

  Var<S> param(const ParameterStore& store, ParamId pid) {
    const auto p = static_cast<std::size_t>(pid);
    if (param_leaf_.size() <= p) param_leaf_.resize(p + 1, -1);
    if (param_leaf_[p] >= 0) return {this, param_leaf_[p]};
    Var<S> v;
    if constexpr (std::is_same_v<S, double>) {
      v = push(Matrix{}, grad_enabled_, nullptr);
      nodes_.back().external = &store.value(pid);
    } else {
      v = push(store.value(pid).template cast<S>(), grad_enabled_, nullptr);
    }
    param_leaf_[p] = v.id;
    return v;
  }

  // Records an op result. `backward` receives the output gradient.
  Var<S> record(Matrix v, std::initializer_list<Var<S>> inputs, Backward backward) {
    bool rg = false;
    if (grad_enabled_) {
      for (const auto& in : inputs) rg = rg || requires_grad(in.id);
    }
    return push(std::move(v), rg, rg ? std::move(backward) : Backward{});
  }
  Var<S> record(Matrix v, const std::vector<Var<S>>& inputs, Backward backward) {
    bool rg = false;
    if (grad_enabled_) {
      for (const auto& in : inputs) rg = rg || requires_grad(in.id);
    }
    return push(std::move(v), rg, rg ? std::move(backward) : Backward{});
  }

  void accumulate(Var<S> v, const Matrix& g) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  // Seeds d(output)/d(output) = 1 on a 1x1 node and propagates.
  void backward(Var<S> output) {
    if (output.rows() != 1 || output.cols() != 1) {
      throw std::invalid_argument("backward: output must be a scalar");
    }
    seed(output, Matrix::Ones(1, 1));
    propagate();
  }

  // Adds an upstream gradient to an arbitrary node; call propagate() after
  // all seeds are in place.
  void seed(Var<S> v, const Matrix& g) { accumulate(v, g); }

  void propagate() {
    if (!grad_enabled_) throw std::logic_error("backward on a tape with gradients disabled");
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
    }
  }

  // Adds parameter-leaf gradients into `out` (scaled by `weight`).
  void flush(GradBuffer& out, double weight = 1.0) const {
    for (std::size_t p = 0; p < param_leaf_.size(); ++p) {
      const int id = param_leaf_[p];
      if (id < 0) continue;
      const Matrix& g = nodes_[static_cast<std::size_t>(id)].grad;
      if (g.size() == 0) continue;
      if constexpr (std::is_same_v<S, double>) {
        out.add(static_cast<ParamId>(p), g, weight);
      } else {
        out.add(static_cast<ParamId>(p), g.template cast<double>(), weight);
      }
    }
  }

 private:
  struct Node {
    Matrix value;
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>* external = nullptr;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var<S> push(Matrix v, bool rg, Backward bw) {
    nodes_.push_back(Node{std::move(v), nullptr, Matrix{}, rg, std::move(bw)});
    return {this, static_cast<int>(nodes_.size() - 1)};
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;
  std::vector<int> param_leaf_;
};

namespace detail {
inline void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}
}  // namespace detail

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  auto& t = *a.tape;
  return t.record(a.value() * b.value(), {a, b}, [a, b](Tape<S>& t, const Mat<S>& g) {
    if (t.requires_grad(a.id)) t.accumulate(a, g * b.value().transpose());
    if (t.requires_grad(b.id)) t.accumulate(b, a.value().transpose() * g);
  });
}

// a * b^T
template <class S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  detail::require(a.cols() == b.cols(), "matmul_nt: dimension mismatch");
  auto& t = *a.tape;
  return t.record(a.value() * b.value().transpose(), {a, b}, [a, b](Tape<S>& t, const Mat<S>& g) {
    if (t.requires_grad(a.id)) t.accumulate(a, g * b.value());
    if (t.requires_grad(b.id)) t.accumulate(b, g.transpose() * a.value());
  });
}

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  auto& t = *a.tape;
  return t.record(a.value() + b.value(), {a, b}, [a, b](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  auto& t = *a.tape;
  return t.record(a.value() - b.value(), {a, b}, [a, b](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(a, g);
    if (t.requires_grad(b.id)) t.accumulate(b, -g);
  });
}

// a + r, with the 1 x n row r broadcast over rows.
template <class S>
Var<S> add_rowvec(Var<S> a, Var<S> r) {
  detail::require(r.rows() == 1 && r.cols() == a.cols(), "add_rowvec: shape mismatch");
  auto& t = *a.tape;
  Mat<S> out = a.value();
  out.rowwise() += r.value().row(0);
  return t.record(std::move(out), {a, r}, [a, r](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(a, g);
    if (t.requires_grad(r.id)) t.accumulate(r, g.colwise().sum());
  });
}

template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  auto& t = *a.tape;
  return t.record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape<S>& t, const Mat<S>& g) {
    if (t.requires_grad(a.id)) t.accumulate(a, g.cwiseProduct(b.value()));
    if (t.requires_grad(b.id)) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

// Elementwise a * r with the 1 x n row r broadcast over rows.
template <class S>
Var<S> mul_rowvec(Var<S> a, Var<S> r) {
  detail::require(r.rows() == 1 && r.cols() == a.cols(), "mul_rowvec: shape mismatch");
  auto& t = *a.tape;
  Mat<S> out = a.value();
  out.array().rowwise() *= r.value().row(0).array();
  return t.record(std::move(out), {a, r}, [a, r](Tape<S>& t, const Mat<S>& g) {
    if (t.requires_grad(a.id)) {
      Mat<S> ga = g;
      ga.array().rowwise() *= r.value().row(0).array();
      t.accumulate(a, ga);
    }
    if (t.requires_grad(r.id)) t.accumulate(r, g.cwiseProduct(a.value()).colwise().sum());
  });
}

// Multiplies by a constant matrix (dropout masks).
template <class S>
Var<S> mul_const(Var<S> a, Mat<S> c) {
  detail::require(a.rows() == c.rows() && a.cols() == c.cols(), "mul_const: shape mismatch");
  auto& t = *a.tape;
  Mat<S> out = a.value().cwiseProduct(c);
  return t.record(std::move(out), {a}, [a, c = std::move(c)](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(a, g.cwiseProduct(c));
  });
}

template <class S>
Var<S> scale(Var<S> a, S s) {
  auto& t = *a.tape;
  return t.record(a.value() * s, {a}, [a, s](Tape<S>& t, const Mat<S>& g) { t.accumulate(a, g * s); });
}

template <class S>
Var<S> relu(Var<S> a) {
  auto& t = *a.tape;
  return t.record(a.value().cwiseMax(S(0)), {a}, [a](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(a, (a.value().array() > S(0)).select(g, S(0)));
  });
}

// Row-wise layer normalization with affine 1 x n gamma/beta.
template <class S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
  detail::require(gamma.cols() == x.cols() && beta.cols() == x.cols(), "layer_norm: shape mismatch");
  auto& t = *x.tape;
  const auto n = x.cols();
  const Mat<S>& xv = x.value();
  Mat<S> xhat(xv.rows(), n);
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(xv.rows());
  for (Eigen::Index i = 0; i < xv.rows(); ++i) {
    const S mean = xv.row(i).mean();
    const S var = (xv.row(i).array() - mean).square().mean();
    inv_std(i) = S(1) / std::sqrt(var + eps);
    xhat.row(i) = (xv.row(i).array() - mean) * inv_std(i);
  }
  Mat<S> out = xhat;
  out.array().rowwise() *= gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return t.record(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<S>& t,
                                                                                     const Mat<S>& g) {
                    if (t.requires_grad(gamma.id)) t.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                    if (t.requires_grad(beta.id)) t.accumulate(beta, g.colwise().sum());
                    if (!t.requires_grad(x.id)) return;
                    const S nn = static_cast<S>(xhat.cols());
                    Mat<S> gx(g.rows(), g.cols());
                    for (Eigen::Index i = 0; i < g.rows(); ++i) {
                      const auto dxhat = (g.row(i).array() * gamma.value().row(0).array()).eval();
                      const S s1 = dxhat.sum();
                      const S s2 = (dxhat * xhat.row(i).array()).sum();
                      gx.row(i) = (inv_std(i) / nn) * (nn * dxhat - s1 - xhat.row(i).array() * s2);
                    }
                    t.accumulate(x, gx);
                  });
}

namespace detail {
template <class S>
Mat<S> softmax_rows(const Mat<S>& a) {
  Mat<S> out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const S m = a.row(i).maxCoeff();
    out.row(i) = (a.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}
}  // namespace detail

// Row-wise softmax. `mask`, when non-empty, holds 1 for allowed entries and 0
// for blocked ones; every row must allow at least one entry.
template <class S>
Var<S> softmax(Var<S> a, const Mat<S>& mask = Mat<S>{}) {
  auto& t = *a.tape;
  Mat<S> y;
  if (mask.size() == 0) {
    y = detail::softmax_rows(a.value());
  } else {
    detail::require(mask.rows() == a.rows() && mask.cols() == a.cols(), "softmax: mask shape mismatch");
    const Mat<S>& av = a.value();
    y.resize(av.rows(), av.cols());
    for (Eigen::Index i = 0; i < av.rows(); ++i) {
      S m = -std::numeric_limits<S>::infinity();
      for (Eigen::Index j = 0; j < av.cols(); ++j) {
        if (mask(i, j) != S(0)) m = std::max(m, av(i, j));
      }
      detail::require(std::isfinite(m), "softmax: row fully masked");
      S z = 0;
      for (Eigen::Index j = 0; j < av.cols(); ++j) {
        y(i, j) = mask(i, j) != S(0) ? std::exp(av(i, j) - m) : S(0);
        z += y(i, j);
      }
      y.row(i) /= z;
    }
  }
  Mat<S> yc = y;
  return t.record(std::move(y), {a}, [a, yc = std::move(yc)](Tape<S>& t, const Mat<S>& g) {
    const auto dot = g.cwiseProduct(yc).rowwise().sum().eval();
    Mat<S> ga = g;
    ga.colwise() -= dot;
    t.accumulate(a, ga.cwiseProduct(yc));
  });
}

namespace detail {
template <class S>
Mat<S> log_softmax_rows(const Mat<S>& a) {
  Mat<S> out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const S m = a.row(i).maxCoeff();
    const S lse = m + std::log((a.row(i).array() - m).exp().sum());
    out.row(i) = a.row(i).array() - lse;
  }
  return out;
}
}  // namespace detail

template <class S>
Var<S> log_softmax(Var<S> a) {
  auto& t = *a.tape;
  Mat<S> y = detail::log_softmax_rows(a.value());
  Mat<S> p = y.array().exp();
  return t.record(std::move(y), {a}, [a, p = std::move(p)](Tape<S>& t, const Mat<S>& g) {
    const auto gsum = g.rowwise().sum().eval();
    Mat<S> ga = p;
    ga.array().colwise() *= gsum.array();
    t.accumulate(a, g - ga);
  });
}

// Rows of `table` selected by `ids` (embedding lookup, broadcasting).
template <class S>
Var<S> gather_rows(Var<S> table, std::vector<int> ids) {
  auto& t = *table.tape;
  const Mat<S>& tv = table.value();
  Mat<S> out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    detail::require(ids[i] >= 0 && ids[i] < tv.rows(), "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  return t.record(std::move(out), {table}, [table, ids = std::move(ids)](Tape<S>& t, const Mat<S>& g) {
    Mat<S> gt = Mat<S>::Zero(table.rows(), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(table, gt);
  });
}

template <class S>
Var<S> slice_cols(Var<S> a, Eigen::Index start, Eigen::Index count) {
  detail::require(start >= 0 && start + count <= a.cols(), "slice_cols: out of range");
  auto& t = *a.tape;
  Mat<S> out = a.value().middleCols(start, count);
  return t.record(std::move(out), {a}, [a, start, count](Tape<S>& t, const Mat<S>& g) {
    Mat<S> ga = Mat<S>::Zero(a.rows(), a.cols());
    ga.middleCols(start, count) = g;
    t.accumulate(a, ga);
  });
}

template <class S>
Var<S> slice_rows(Var<S> a, Eigen::Index start, Eigen::Index count) {
  detail::require(start >= 0 && start + count <= a.rows(), "slice_rows: out of range");
  auto& t = *a.tape;
  Mat<S> out = a.value().middleRows(start, count);
  return t.record(std::move(out), {a}, [a, start, count](Tape<S>& t, const Mat<S>& g) {
    Mat<S> ga = Mat<S>::Zero(a.rows(), a.cols());
    ga.middleRows(start, count) = g;
    t.accumulate(a, ga);
  });
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  auto& t = *parts.front().tape;
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    detail::require(p.rows() == parts.front().rows(), "concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat<S> out(parts.front().rows(), cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return t.record(std::move(out), parts, [parts](Tape<S>& t, const Mat<S>& g) {
    Eigen::Index c = 0;
    for (const auto& p : parts) {
      if (t.requires_grad(p.id)) t.accumulate(p, g.middleCols(c, p.cols()));
      c += p.cols();
    }
  });
}

template <class S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  auto& t = *parts.front().tape;
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    detail::require(p.cols() == parts.front().cols(), "concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat<S> out(rows, parts.front().cols());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return t.record(std::move(out), parts, [parts](Tape<S>& t, const Mat<S>& g) {
    Eigen::Index r = 0;
    for (const auto& p : parts) {
      if (t.requires_grad(p.id)) t.accumulate(p, g.middleRows(r, p.rows()));
      r += p.rows();
    }
  });
}

// 1 x n column means.
template <class S>
Var<S> mean_rows(Var<S> a) {
  detail::require(a.rows() > 0, "mean_rows: empty input");
  auto& t = *a.tape;
  return t.record(a.value().colwise().mean(), {a}, [a](Tape<S>& t, const Mat<S>& g) {
    Mat<S> ga = g.replicate(a.rows(), 1) / static_cast<S>(a.rows());
    t.accumulate(a, ga);
  });
}

template <class S>
Var<S> sum(Var<S> a) {
  auto& t = *a.tape;
  Mat<S> out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), {a}, [a](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(a, Mat<S>::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

template <class S>
Var<S> squared_norm(Var<S> a) {
  auto& t = *a.tape;
  Mat<S> out(1, 1);
  out(0, 0) = a.value().squaredNorm();
  return t.record(std::move(out), {a}, [a](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(a, a.value() * (S(2) * g(0, 0)));
  });
}

// n x 1 column of squared row norms.
template <class S>
Var<S> row_squared_norm(Var<S> a) {
  auto& t = *a.tape;
  return t.record(a.value().rowwise().squaredNorm(), {a}, [a](Tape<S>& t, const Mat<S>& g) {
    Mat<S> ga = a.value() * S(2);
    ga.array().colwise() *= g.col(0).array();
    t.accumulate(a, ga);
  });
}

// log(sum(exp(a))) over every entry.
template <class S>
Var<S> logsumexp(Var<S> a) {
  auto& t = *a.tape;
  const S m = a.value().maxCoeff();
  Mat<S> e = (a.value().array() - m).exp();
  const S z = e.sum();
  Mat<S> out(1, 1);
  out(0, 0) = m + std::log(z);
  e /= z;
  return t.record(std::move(out), {a}, [a, e = std::move(e)](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(a, e * g(0, 0));
  });
}

// Mean over rows of -logp(i, targets[i]).
template <class S>
Var<S> nll(Var<S> logp, std::vector<int> targets) {
  detail::require(static_cast<Eigen::Index>(targets.size()) == logp.rows(), "nll: length mismatch");
  detail::require(!targets.empty(), "nll: no targets");
  auto& t = *logp.tape;
  S total = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) total -= logp.value()(static_cast<Eigen::Index>(i), targets[i]);
  Mat<S> out(1, 1);
  out(0, 0) = total / static_cast<S>(targets.size());
  return t.record(std::move(out), {logp}, [logp, targets = std::move(targets)](Tape<S>& t, const Mat<S>& g) {
    Mat<S> gl = Mat<S>::Zero(logp.rows(), logp.cols());
    const S w = -g(0, 0) / static_cast<S>(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) gl(static_cast<Eigen::Index>(i), targets[i]) = w;
    t.accumulate(logp, gl);
  });
}

// Mean over rows of KL(p || q) given row log-distributions log p and log q.
template <class S>
Var<S> kl_rows(Var<S> logp, Var<S> logq) {
  detail::require(logp.rows() == logq.rows() && logp.cols() == logq.cols(), "kl_rows: shape mismatch");
  auto& t = *logp.tape;
  const Mat<S> p = logp.value().array().exp();
  const Mat<S> diff = logp.value() - logq.value();
  const S n = static_cast<S>(logp.rows());
  Mat<S> out(1, 1);
  out(0, 0) = p.cwiseProduct(diff).sum() / n;
  return t.record(std::move(out), {logp, logq}, [logp, logq, p, diff, n](Tape<S>& t, const Mat<S>& g) {
    const S w = g(0, 0) / n;
    if (t.requires_grad(logp.id)) t.accumulate(logp, (p.cwiseProduct(diff) + p) * w);
    if (t.requires_grad(logq.id)) t.accumulate(logq, -p * w);
  });
}

// Copies the value into a gradient-free constant.
template <class S>
Var<S> detach(Var<S> a) {
  return a.tape->constant(a.value());
}

}  // namespace bridgepath::ag
