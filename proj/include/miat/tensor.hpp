#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "miat/common.hpp"

namespace miat {

class Tensor;

namespace detail {

// One node of the computation tape. Interior nodes keep references to their
// parents plus a closure that scatters the node's gradient into them; the
// tape is therefore acyclic by construction and backward() walks it in
// reverse topological order exactly once.
struct Node {
  int rows = 0;
  int cols = 0;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on demand, same length as value
  bool requires_grad = false;
  std::string name;  // non-empty for named parameters
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::size_t size() const { return value.size(); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }

  // Iterative teardown so long LSTM/attention chains cannot overflow the
  // stack through recursive shared_ptr destruction.
  ~Node() {
    std::vector<std::shared_ptr<Node>> pending(std::move(parents));
    while (!pending.empty()) {
      std::shared_ptr<Node> p = std::move(pending.back());
      pending.pop_back();
      if (p && p.use_count() == 1) {
        for (auto& gp : p->parents) pending.push_back(std::move(gp));
        p->parents.clear();
      }
    }
  }
};

inline void check_finite(std::span<const double> xs, const char* op) {
#if MIAT_CHECK_FINITE
  for (double x : xs) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + op);
  }
#else
  (void)xs;
  (void)op;
#endif
}

}  // namespace detail

// Dense row-major matrix of 64-bit floats with reverse-mode autodiff.
// Rank is fixed at two: vectors are 1xN rows and scalars 1x1. A Tensor is a
// cheap handle; copies share the underlying node (and its parameters).
class Tensor {
 public:
  Tensor() = default;

  Tensor(int rows, int cols, std::vector<double> data, bool requires_grad = false) {
    if (rows <= 0 || cols <= 0) throw ShapeError("dimensions must be positive");
    if (static_cast<std::size_t>(rows) * cols != data.size())
      throw ShapeError("data length does not match shape");
    node_ = std::make_shared<detail::Node>();
    node_->rows = rows;
    node_->cols = cols;
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
    detail::check_finite(node_->value, "tensor construction");
  }

  static Tensor zeros(int rows, int cols, bool requires_grad = false) {
    return Tensor(rows, cols, std::vector<double>(static_cast<std::size_t>(rows) * cols, 0.0),
                  requires_grad);
  }

  static Tensor full(int rows, int cols, double fill, bool requires_grad = false) {
    return Tensor(rows, cols, std::vector<double>(static_cast<std::size_t>(rows) * cols, fill),
                  requires_grad);
  }

  static Tensor identity(int n) {
    Tensor t = zeros(n, n);
    for (int i = 0; i < n; ++i) t.node_->value[static_cast<std::size_t>(i) * n + i] = 1.0;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(1, 1, {v}, requires_grad);
  }

  static Tensor row(std::vector<double> data, bool requires_grad = false) {
    const int n = static_cast<int>(data.size());
    return Tensor(1, n, std::move(data), requires_grad);
  }

  static Tensor randn(int rows, int cols, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    std::vector<double> data(static_cast<std::size_t>(rows) * cols);
    for (auto& x : data) x = rng.normal() * stddev;
    return Tensor(rows, cols, std::move(data), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  int rows() const { return node_->rows; }
  int cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> value() const { return node_->value; }
  std::span<double> mutable_value() { return node_->value; }
  double at(int r, int c) const { return node_->value[static_cast<std::size_t>(r) * cols() + c]; }
  double item() const {
    if (size() != 1) throw UsageError("item() requires a scalar tensor");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  const std::string& name() const { return node_->name; }
  Tensor& set_name(std::string name) {
    node_->name = std::move(name);
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  bool same_shape(const Tensor& other) const {
    return rows() == other.rows() && cols() == other.cols();
  }

  std::shared_ptr<detail::Node> node() const { return node_; }

  friend void backward(const Tensor& loss);
  friend class OpBuilder;

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Builds an interior tape node. Parents that do not require grad are kept
// for value access but receive no gradient.
class OpBuilder {
 public:
  OpBuilder(const char* op, int rows, int cols) : op_(op) {
    node_ = std::make_shared<detail::Node>();
    node_->rows = rows;
    node_->cols = cols;
    node_->op = op;
    node_->value.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  }

  OpBuilder& input(const Tensor& t) {
    node_->parents.push_back(t.node());
    if (t.requires_grad()) node_->requires_grad = true;
    return *this;
  }

  std::span<double> out() { return node_->value; }

  Tensor finish(std::function<void(detail::Node&)> backward_fn) {
    detail::check_finite(node_->value, op_);
    if (node_->requires_grad) {
      node_->backward_fn = std::move(backward_fn);
    } else {
      node_->parents.clear();  // no grad anywhere below: drop the tape
    }
    return Tensor(node_);
  }

 private:
  const char* op_;
  std::shared_ptr<detail::Node> node_;
};

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shapes " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  detail::check_finite(a.value(), "add");
  detail::check_finite(b.value(), "add");
  OpBuilder ob("add", a.rows(), a.cols());
  ob.input(a).input(b);
  auto out = ob.out();
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return ob.finish([](detail::Node& n) {
    for (int k = 0; k < 2; ++k) {
      auto& p = *n.parents[k];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  detail::check_finite(a.value(), "sub");
  detail::check_finite(b.value(), "sub");
  OpBuilder ob("sub", a.rows(), a.cols());
  ob.input(a).input(b);
  auto out = ob.out();
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return ob.finish([](detail::Node& n) {
    auto& pa = *n.parents[0];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
    }
    auto& pb = *n.parents[1];
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] -= n.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  detail::check_finite(a.value(), "mul");
  detail::check_finite(b.value(), "mul");
  OpBuilder ob("mul", a.rows(), a.cols());
  ob.input(a).input(b);
  auto out = ob.out();
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return ob.finish([](detail::Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] += n.grad[i] * pa.value[i];
    }
  });
}

// x [M x d] plus a broadcast row vector [1 x d]; the only broadcast form.
inline Tensor add_rowvec(const Tensor& x, const Tensor& bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols())
    throw ShapeError("add_rowvec: bias must be 1x" + std::to_string(x.cols()));
  detail::check_finite(x.value(), "add_rowvec");
  detail::check_finite(bias.value(), "add_rowvec");
  OpBuilder ob("add_rowvec", x.rows(), x.cols());
  ob.input(x).input(bias);
  auto out = ob.out();
  auto xv = x.value(), bv = bias.value();
  const int c = x.cols();
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(i) * c + j] = xv[static_cast<std::size_t>(i) * c + j] + bv[j];
  return ob.finish([](detail::Node& n) {
    auto& px = *n.parents[0];
    auto& pb = *n.parents[1];
    const int c = n.cols;
    if (px.requires_grad) {
      px.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) px.grad[i] += n.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int i = 0; i < n.rows; ++i)
        for (int j = 0; j < c; ++j) pb.grad[j] += n.grad[static_cast<std::size_t>(i) * c + j];
    }
  });
}

inline Tensor scale(const Tensor& x, double c) {
  detail::check_finite(x.value(), "scale");
  OpBuilder ob("scale", x.rows(), x.cols());
  ob.input(x);
  auto out = ob.out();
  auto xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
  return ob.finish([c](detail::Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * c;
  });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  detail::check_finite(x.value(), "add_scalar");
  OpBuilder ob("add_scalar", x.rows(), x.cols());
  ob.input(x);
  auto out = ob.out();
  auto xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + c;
  return ob.finish([](detail::Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
  });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline void matmul_accum(std::span<const double> a, std::span<const double> b,
                         std::span<double> out, int m, int k, int n, bool transpose_a,
                         bool transpose_b) {
  // out[m x n] += op(a) * op(b); ikj order keeps the inner loop contiguous.
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      const double av = transpose_a ? a[static_cast<std::size_t>(kk) * m + i]
                                    : a[static_cast<std::size_t>(i) * k + kk];
      if (av == 0.0) continue;
      if (transpose_b) {
        for (int j = 0; j < n; ++j)
          out[static_cast<std::size_t>(i) * n + j] += av * b[static_cast<std::size_t>(j) * k + kk];
      } else {
        const double* brow = b.data() + static_cast<std::size_t>(kk) * n;
        double* orow = out.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()));
  detail::check_finite(a.value(), "matmul");
  detail::check_finite(b.value(), "matmul");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  OpBuilder ob("matmul", m, n);
  ob.input(a).input(b);
  matmul_accum(a.value(), b.value(), ob.out(), m, k, n, false, false);
  return ob.finish([m, k, n](detail::Node& node) {
    auto& pa = *node.parents[0];
    auto& pb = *node.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      // dA = dC * B^T
      matmul_accum(node.grad, pb.value, pa.grad, m, n, k, false, true);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      // dB = A^T * dC
      matmul_accum(pa.value, node.grad, pb.grad, k, m, n, true, false);
    }
  });
}

inline Tensor transpose(const Tensor& x) {
  detail::check_finite(x.value(), "transpose");
  const int r = x.rows(), c = x.cols();
  OpBuilder ob("transpose", c, r);
  ob.input(x);
  auto out = ob.out();
  auto xv = x.value();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(j) * r + i] = xv[static_cast<std::size_t>(i) * c + j];
  return ob.finish([r, c](detail::Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        p.grad[static_cast<std::size_t>(i) * c + j] += n.grad[static_cast<std::size_t>(j) * r + i];
  });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) {
  detail::check_finite(x.value(), "relu");
  OpBuilder ob("relu", x.rows(), x.cols());
  ob.input(x);
  auto out = ob.out();
  auto xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return ob.finish([](detail::Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      if (p.value[i] > 0.0) p.grad[i] += n.grad[i];
  });
}

inline Tensor sigmoid(const Tensor& x) {
  detail::check_finite(x.value(), "sigmoid");
  OpBuilder ob("sigmoid", x.rows(), x.cols());
  ob.input(x);
  auto out = ob.out();
  auto xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  return ob.finish([](detail::Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const double y = n.value[i];
      p.grad[i] += n.grad[i] * y * (1.0 - y);
    }
  });
}

inline Tensor tanh(const Tensor& x) {
  detail::check_finite(x.value(), "tanh");
  OpBuilder ob("tanh", x.rows(), x.cols());
  ob.input(x);
  auto out = ob.out();
  auto xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
  return ob.finish([](detail::Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const double y = n.value[i];
      p.grad[i] += n.grad[i] * (1.0 - y * y);
    }
  });
}

// ---------------------------------------------------------------------------
// Row-wise softmax family and layer norm
// ---------------------------------------------------------------------------

inline Tensor softmax_rows(const Tensor& x) {
  if (x.cols() < 1) throw ShapeError("softmax_rows: empty rows");
  detail::check_finite(x.value(), "softmax_rows");
  OpBuilder ob("softmax_rows", x.rows(), x.cols());
  ob.input(x);
  auto out = ob.out();
  auto xv = x.value();
  const int c = x.cols();
  for (int i = 0; i < x.rows(); ++i) {
    const double* row = xv.data() + static_cast<std::size_t>(i) * c;
    double* orow = out.data() + static_cast<std::size_t>(i) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (int j = 0; j < c; ++j) orow[j] /= sum;
  }
  return ob.finish([c](detail::Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < n.rows; ++i) {
      const double* y = n.value.data() + static_cast<std::size_t>(i) * c;
      const double* dy = n.grad.data() + static_cast<std::size_t>(i) * c;
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += dy[j] * y[j];
      double* dx = p.grad.data() + static_cast<std::size_t>(i) * c;
      for (int j = 0; j < c; ++j) dx[j] += y[j] * (dy[j] - dot);
    }
  });
}

inline Tensor log_softmax_rows(const Tensor& x) {
  if (x.cols() < 1) throw ShapeError("log_softmax_rows: empty rows");
  detail::check_finite(x.value(), "log_softmax_rows");
  OpBuilder ob("log_softmax_rows", x.rows(), x.cols());
  ob.input(x);
  auto out = ob.out();
  auto xv = x.value();
  const int c = x.cols();
  for (int i = 0; i < x.rows(); ++i) {
    const double* row = xv.data() + static_cast<std::size_t>(i) * c;
    double* orow = out.data() + static_cast<std::size_t>(i) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    for (int j = 0; j < c; ++j) orow[j] = row[j] - lse;
  }
  return ob.finish([c](detail::Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < n.rows; ++i) {
      const double* y = n.value.data() + static_cast<std::size_t>(i) * c;
      const double* dy = n.grad.data() + static_cast<std::size_t>(i) * c;
      double total = 0.0;
      for (int j = 0; j < c; ++j) total += dy[j];
      double* dx = p.grad.data() + static_cast<std::size_t>(i) * c;
      for (int j = 0; j < c; ++j) dx[j] += dy[j] - std::exp(y[j]) * total;
    }
  });
}

// Per-row normalization with the biased (divide-by-d) variance estimator.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  const int d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d)
    throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(d));
  detail::check_finite(x.value(), "layer_norm");
  OpBuilder ob("layer_norm", x.rows(), d);
  ob.input(x).input(gain).input(bias);
  auto out = ob.out();
  auto xv = x.value(), gv = gain.value(), bv = bias.value();
  for (int i = 0; i < x.rows(); ++i) {
    const double* row = xv.data() + static_cast<std::size_t>(i) * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    double* orow = out.data() + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) orow[j] = (row[j] - mean) * inv * gv[j] + bv[j];
  }
  return ob.finish([d, eps](detail::Node& n) {
    auto& px = *n.parents[0];
    auto& pg = *n.parents[1];
    auto& pb = *n.parents[2];
    if (px.requires_grad) px.ensure_grad();
    if (pg.requires_grad) pg.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (int i = 0; i < n.rows; ++i) {
      const double* row = px.value.data() + static_cast<std::size_t>(i) * d;
      const double* dy = n.grad.data() + static_cast<std::size_t>(i) * d;
      double mean = 0.0;
      for (int j = 0; j < d; ++j) mean += row[j];
      mean /= d;
      double var = 0.0;
      for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= d;
      const double inv = 1.0 / std::sqrt(var + eps);
      if (pg.requires_grad || pb.requires_grad) {
        for (int j = 0; j < d; ++j) {
          const double xhat = (row[j] - mean) * inv;
          if (pg.requires_grad) pg.grad[j] += dy[j] * xhat;
          if (pb.requires_grad) pb.grad[j] += dy[j];
        }
      }
      if (px.requires_grad) {
        // dxhat = dy * gain; fold the mean/variance terms per row.
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int j = 0; j < d; ++j) {
          const double xhat = (row[j] - mean) * inv;
          const double dxh = dy[j] * pg.value[j];
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xhat;
        }
        double* dx = px.grad.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) {
          const double xhat = (row[j] - mean) * inv;
          const double dxh = dy[j] * pg.value[j];
          dx[j] += inv * (dxh - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions, concatenation, slicing, gathering
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
  detail::check_finite(x.value(), "sum");
  OpBuilder ob("sum", 1, 1);
  ob.input(x);
  double total = 0.0;
  for (double v : x.value()) total += v;
  ob.out()[0] = total;
  return ob.finish([](detail::Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (auto& g : p.grad) g += n.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int r = parts[0].rows();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw ShapeError("concat_cols: row counts differ");
    total += p.cols();
  }
  OpBuilder ob("concat_cols", r, total);
  std::vector<int> widths;
  widths.reserve(parts.size());
  for (const auto& p : parts) {
    ob.input(p);
    widths.push_back(p.cols());
  }
  auto out = ob.out();
  int off = 0;
  for (const auto& p : parts) {
    auto pv = p.value();
    const int c = p.cols();
    for (int i = 0; i < r; ++i)
      std::copy_n(pv.data() + static_cast<std::size_t>(i) * c, c,
                  out.data() + static_cast<std::size_t>(i) * total + off);
    off += c;
  }
  return ob.finish([widths, total](detail::Node& n) {
    int off = 0;
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      auto& p = *n.parents[k];
      const int c = widths[k];
      if (p.requires_grad) {
        p.ensure_grad();
        for (int i = 0; i < n.rows; ++i)
          for (int j = 0; j < c; ++j)
            p.grad[static_cast<std::size_t>(i) * c + j] +=
                n.grad[static_cast<std::size_t>(i) * total + off + j];
      }
      off += c;
    }
  });
}

inline Tensor concat_cols(std::initializer_list<Tensor> parts) {
  std::vector<Tensor> v(parts);
  return concat_cols(std::span<const Tensor>(v));
}

inline Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const int c = parts[0].cols();
  int total = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows: column counts differ");
    total += p.rows();
  }
  OpBuilder ob("concat_rows", total, c);
  std::vector<int> heights;
  heights.reserve(parts.size());
  for (const auto& p : parts) {
    ob.input(p);
    heights.push_back(p.rows());
  }
  auto out = ob.out();
  std::size_t off = 0;
  for (const auto& p : parts) {
    auto pv = p.value();
    std::copy(pv.begin(), pv.end(), out.begin() + off);
    off += pv.size();
  }
  return ob.finish([heights, c](detail::Node& n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      auto& p = *n.parents[k];
      const std::size_t len = static_cast<std::size_t>(heights[k]) * c;
      if (p.requires_grad) {
        p.ensure_grad();
        for (std::size_t i = 0; i < len; ++i) p.grad[i] += n.grad[off + i];
      }
      off += len;
    }
  });
}

inline Tensor concat_rows(std::initializer_list<Tensor> parts) {
  std::vector<Tensor> v(parts);
  return concat_rows(std::span<const Tensor>(v));
}

inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
  if (c0 < 0 || c1 > x.cols() || c0 >= c1) throw ShapeError("slice_cols: bad range");
  const int r = x.rows(), w = c1 - c0, c = x.cols();
  OpBuilder ob("slice_cols", r, w);
  ob.input(x);
  auto out = ob.out();
  auto xv = x.value();
  for (int i = 0; i < r; ++i)
    std::copy_n(xv.data() + static_cast<std::size_t>(i) * c + c0, w,
                out.data() + static_cast<std::size_t>(i) * w);
  return ob.finish([c0, w, c](detail::Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < n.rows; ++i)
      for (int j = 0; j < w; ++j)
        p.grad[static_cast<std::size_t>(i) * c + c0 + j] += n.grad[static_cast<std::size_t>(i) * w + j];
  });
}

inline Tensor slice_rows(const Tensor& x, int r0, int r1) {
  if (r0 < 0 || r1 > x.rows() || r0 >= r1) throw ShapeError("slice_rows: bad range");
  const int h = r1 - r0, c = x.cols();
  OpBuilder ob("slice_rows", h, c);
  ob.input(x);
  auto out = ob.out();
  auto xv = x.value();
  std::copy_n(xv.data() + static_cast<std::size_t>(r0) * c, static_cast<std::size_t>(h) * c,
              out.data());
  return ob.finish([r0, c](detail::Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const std::size_t base = static_cast<std::size_t>(r0) * c;
    for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[base + i] += n.grad[i];
  });
}

// Row lookup (embedding). Backward scatter-adds into the table rows.
inline Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  if (ids.empty()) throw ShapeError("gather_rows: empty index list");
  const int c = table.cols();
  for (int id : ids)
    if (id < 0 || id >= table.rows())
      throw DataError("gather_rows: index " + std::to_string(id) + " out of range");
  OpBuilder ob("gather_rows", static_cast<int>(ids.size()), c);
  ob.input(table);
  auto out = ob.out();
  auto tv = table.value();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * c, c,
                out.data() + i * c);
  std::vector<int> idx(ids.begin(), ids.end());
  return ob.finish([idx, c](detail::Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < c; ++j)
        p.grad[static_cast<std::size_t>(idx[i]) * c + j] += n.grad[i * c + j];
  });
}

inline Tensor gather_rows(const Tensor& table, std::initializer_list<int> ids) {
  std::vector<int> v(ids);
  return gather_rows(table, std::span<const int>(v));
}

// ---------------------------------------------------------------------------
// Dropout and loss kernels
// ---------------------------------------------------------------------------

// Zeroes each element with probability `rate` and scales survivors by
// 1/(1-rate) when training; identity in eval mode. The RNG is explicit.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0,1)");
  detail::check_finite(x.value(), "dropout");
  if (!training || rate == 0.0) return x;
  OpBuilder ob("dropout", x.rows(), x.cols());
  ob.input(x);
  auto out = ob.out();
  auto xv = x.value();
  const double keep = 1.0 - rate;
  auto mask = std::make_shared<std::vector<double>>(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double m = rng.uniform() < rate ? 0.0 : 1.0 / keep;
    (*mask)[i] = m;
    out[i] = xv[i] * m;
  }
  return ob.finish([mask](detail::Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * (*mask)[i];
  });
}

// Negative log-likelihood over log-probability rows: -sum_t logp[t, id_t].
inline Tensor nll_loss(const Tensor& log_probs, std::span<const int> targets) {
  if (static_cast<int>(targets.size()) != log_probs.rows())
    throw DataError("nll_loss: target count does not match rows");
  for (int t : targets)
    if (t < 0 || t >= log_probs.cols())
      throw DataError("nll_loss: target " + std::to_string(t) + " outside vocabulary");
  detail::check_finite(log_probs.value(), "nll_loss");
  OpBuilder ob("nll_loss", 1, 1);
  ob.input(log_probs);
  double total = 0.0;
  const int c = log_probs.cols();
  auto lv = log_probs.value();
  for (std::size_t i = 0; i < targets.size(); ++i) total -= lv[i * c + targets[i]];
  ob.out()[0] = total;
  std::vector<int> idx(targets.begin(), targets.end());
  return ob.finish([idx, c](detail::Node& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      p.grad[i * c + idx[i]] -= n.grad[0];
  });
}

inline Tensor nll_loss(const Tensor& log_probs, std::initializer_list<int> targets) {
  std::vector<int> v(targets);
  return nll_loss(log_probs, std::span<const int>(v));
}

// Summed binary cross-entropy on logits, computed in the numerically stable
// form max(x,0) - x*y + log1p(exp(-|x|)).
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  require_same_shape(logits, targets, "bce_with_logits");
  detail::check_finite(logits.value(), "bce_with_logits");
  OpBuilder ob("bce_with_logits", 1, 1);
  ob.input(logits).input(targets);
  auto xv = logits.value(), yv = targets.value();
  double total = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double x = xv[i], y = yv[i];
    total += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  ob.out()[0] = total;
  return ob.finish([](detail::Node& n) {
    auto& px = *n.parents[0];
    auto& py = *n.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (std::size_t i = 0; i < px.value.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-px.value[i]));
        px.grad[i] += n.grad[0] * (s - py.value[i]);
      }
    }
    if (py.requires_grad) {
      py.ensure_grad();
      for (std::size_t i = 0; i < py.value.size(); ++i)
        py.grad[i] += n.grad[0] * (-px.value[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

inline void backward(const Tensor& loss) {
  if (loss.size() != 1) throw UsageError("backward() requires a scalar loss");
  auto root = loss.node();
  if (!root->requires_grad)
    throw UsageError("backward() on a graph with no differentiable leaves");

  // Iterative post-order DFS; parents are pushed in declaration order so the
  // resulting topological order (and therefore every accumulation) is
  // deterministic.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next].get();
      ++next;
      if (parent->requires_grad && visited.insert(parent).second)
        stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward_fn) {
      node->ensure_grad();
      node->backward_fn(*node);
    }
  }
}

}  // namespace miat
