#pragma once

// Dense 2-D tensors with tape-free reverse-mode automatic differentiation.
//
// Every tensor is a row-major matrix (scalars are 1x1, vectors are 1xn or nx1).
// An op whose inputs require gradients records its parents and a backward
// closure on the result node; `backward` walks the reachable graph in reverse
// topological order and returns the gradients of all reached leaves.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "geostars/error.hpp"

namespace geostars {

namespace detail {

struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;
  std::vector<double> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::string name;

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  // Long recurrent chains would otherwise recurse once per node on teardown.
  ~Node() {
    std::vector<std::shared_ptr<Node>> stack = std::move(parents);
    while (!stack.empty()) {
      std::shared_ptr<Node> p = std::move(stack.back());
      stack.pop_back();
      if (p && p.use_count() == 1) {
        for (auto& q : p->parents) stack.push_back(std::move(q));
        p->parents.clear();
      }
    }
  }
};

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<Matrix>;
using ConstMapMatrix = Eigen::Map<const Matrix>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor from_data(std::size_t rows, std::size_t cols, std::vector<double> data) {
    require(data.size() == rows * cols, "Tensor: data length does not match shape");
    auto n = std::make_shared<detail::Node>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(data);
    return Tensor(std::move(n));
  }
  static Tensor zeros(std::size_t rows, std::size_t cols) {
    return from_data(rows, cols, std::vector<double>(rows * cols, 0.0));
  }
  static Tensor full(std::size_t rows, std::size_t cols, double v) {
    return from_data(rows, cols, std::vector<double>(rows * cols, v));
  }
  static Tensor scalar(double v) { return from_data(1, 1, {v}); }

  /// Trainable leaf.
  static Tensor parameter(std::string name, std::size_t rows, std::size_t cols,
                          std::vector<double> data) {
    Tensor t = from_data(rows, cols, std::move(data));
    t.node_->requires_grad = true;
    t.node_->name = std::move(name);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }
  std::vector<std::size_t> shape() const { return {node_->rows, node_->cols}; }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() {
    require(node_->leaf, "Tensor: only leaf tensors may be mutated in place");
    return node_->value;
  }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * node_->cols + c]; }
  double item() const {
    require(size() == 1, "Tensor::item on non-scalar");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    require(node_->leaf, "Tensor: requires_grad can only be toggled on leaves");
    node_->requires_grad = on;
  }
  bool is_leaf() const { return node_->leaf; }
  const std::string& name() const { return node_->name; }
  void set_name(std::string n) { node_->name = std::move(n); }
  const char* op() const { return node_->op; }

  /// Gradient buffer from the most recent backward pass that reached this tensor.
  std::span<const double> grad() const { return node_->grad; }

  /// Value copy without history; never requires grad.
  Tensor detach() const { return from_data(rows(), cols(), node_->value); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

using GradMap = std::map<std::string, Tensor>;

namespace detail {
inline bool& grad_disabled();
}

/// Scope in which ops record no history (evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_disabled()) { detail::grad_disabled() = true; }
  ~NoGradGuard() { detail::grad_disabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

inline bool& grad_disabled() {
  thread_local bool disabled = false;
  return disabled;
}

inline void check_finite(const char* op, std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(op, "non-finite value in forward output");
  }
}

inline Tensor make_result(const char* op, std::size_t rows, std::size_t cols,
                          std::vector<double> value, std::initializer_list<Tensor> inputs,
                          std::function<void(Node&)> bw) {
  check_finite(op, value);
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(value);
  n->op = op;
  n->leaf = false;
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (any && !grad_disabled()) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const Tensor& t : inputs) n->parents.push_back(t.node_ptr());
    n->backward = std::move(bw);
  }
  return Tensor(std::move(n));
}

inline Tensor make_result_n(const char* op, std::size_t rows, std::size_t cols,
                            std::vector<double> value, const std::vector<Tensor>& inputs,
                            std::function<void(Node&)> bw) {
  check_finite(op, value);
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(value);
  n->op = op;
  n->leaf = false;
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (any && !grad_disabled()) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const Tensor& t : inputs) n->parents.push_back(t.node_ptr());
    n->backward = std::move(bw);
  }
  return Tensor(std::move(n));
}

inline ConstMapMatrix cmap(const Node& n) { return {n.value.data(), Eigen::Index(n.rows), Eigen::Index(n.cols)}; }
inline ConstMapMatrix cmap_grad(const Node& n) { return {n.grad.data(), Eigen::Index(n.rows), Eigen::Index(n.cols)}; }
inline MapMatrix map_grad(Node& n) { return {n.grad.data(), Eigen::Index(n.rows), Eigen::Index(n.cols)}; }

inline void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ContractError(std::string(op) + ": shape mismatch");
  }
}

}  // namespace detail

/// Numerically stable softmax over the entries flagged in `support` (all entries when empty).
/// Entries outside the support are exactly zero.
inline std::vector<double> softmax_row(std::span<const double> v, std::span<const std::uint8_t> support = {}) {
  require(support.empty() || support.size() == v.size(), "softmax_row: support size mismatch");
  auto on = [&](std::size_t j) { return support.empty() || support[j] != 0; };
  double mx = -INFINITY;
  for (std::size_t j = 0; j < v.size(); ++j) {
    if (on(j) && v[j] > mx) mx = v[j];
  }
  require(mx != -INFINITY, "softmax_row: empty support");
  std::vector<double> out(v.size(), 0.0);
  double z = 0.0;
  for (std::size_t j = 0; j < v.size(); ++j) {
    if (on(j)) {
      out[j] = std::exp(v[j] - mx);
      z += out[j];
    }
  }
  for (double& x : out) x /= z;
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  std::vector<double> out(a.rows() * b.cols());
  detail::MapMatrix(out.data(), Eigen::Index(a.rows()), Eigen::Index(b.cols())).noalias() =
      detail::cmap(*a.node()) * detail::cmap(*b.node());
  return detail::make_result("matmul", a.rows(), b.cols(), std::move(out), {a, b}, [](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    detail::Node& B = *self.parents[1];
    auto g = detail::cmap_grad(self);
    if (A.requires_grad) detail::map_grad(A).noalias() += g * detail::cmap(B).transpose();
    if (B.requires_grad) detail::map_grad(B).noalias() += detail::cmap(A).transpose() * g;
  });
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  auto v = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  return detail::make_result("transpose", c, r, std::move(out), {a}, [r, c](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) A.grad[i * c + j] += self.grad[j * r + i];
  });
}

/// Row-major reinterpretation with a new shape of equal size.
inline Tensor reshape(const Tensor& a, std::size_t rows, std::size_t cols) {
  require(rows * cols == a.size(), "reshape: size mismatch");
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result("reshape", rows, cols, std::move(out), {a}, [](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    for (std::size_t k = 0; k < self.grad.size(); ++k) A.grad[k] += self.grad[k];
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "add");
  std::vector<double> out(a.size());
  auto x = a.data(), y = b.data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = x[k] + y[k];
  return detail::make_result("add", a.rows(), a.cols(), std::move(out), {a, b}, [](detail::Node& self) {
    for (int p = 0; p < 2; ++p) {
      detail::Node& P = *self.parents[p];
      if (!P.requires_grad) continue;
      for (std::size_t k = 0; k < self.grad.size(); ++k) P.grad[k] += self.grad[k];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  auto x = a.data(), y = b.data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = x[k] - y[k];
  return detail::make_result("sub", a.rows(), a.cols(), std::move(out), {a, b}, [](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    detail::Node& B = *self.parents[1];
    for (std::size_t k = 0; k < self.grad.size(); ++k) {
      if (A.requires_grad) A.grad[k] += self.grad[k];
      if (B.requires_grad) B.grad[k] -= self.grad[k];
    }
  });
}

/// Elementwise (Hadamard) product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  auto x = a.data(), y = b.data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = x[k] * y[k];
  return detail::make_result("mul", a.rows(), a.cols(), std::move(out), {a, b}, [](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    detail::Node& B = *self.parents[1];
    for (std::size_t k = 0; k < self.grad.size(); ++k) {
      if (A.requires_grad) A.grad[k] += self.grad[k] * B.value[k];
      if (B.requires_grad) B.grad[k] += self.grad[k] * A.value[k];
    }
  });
}

/// a[m x n] + row[1 x n] broadcast over rows.
inline Tensor add_row(const Tensor& a, const Tensor& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: row must be 1 x cols(a)");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.size());
  auto x = a.data(), r = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + r[j];
  return detail::make_result("add_row", m, n, std::move(out), {a, row}, [m, n](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    detail::Node& R = *self.parents[1];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double g = self.grad[i * n + j];
        if (A.requires_grad) A.grad[i * n + j] += g;
        if (R.requires_grad) R.grad[j] += g;
      }
  });
}

/// a[m x n] * row[1 x n] broadcast over rows.
inline Tensor mul_row(const Tensor& a, const Tensor& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "mul_row: row must be 1 x cols(a)");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.size());
  auto x = a.data(), r = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * r[j];
  return detail::make_result("mul_row", m, n, std::move(out), {a, row}, [m, n](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    detail::Node& R = *self.parents[1];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double g = self.grad[i * n + j];
        if (A.requires_grad) A.grad[i * n + j] += g * R.value[j];
        if (R.requires_grad) R.grad[j] += g * A.value[i * n + j];
      }
  });
}

/// a[m x n] * col[m x 1] broadcast over columns.
inline Tensor mul_col(const Tensor& a, const Tensor& col) {
  require(col.cols() == 1 && col.rows() == a.rows(), "mul_col: col must be rows(a) x 1");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.size());
  auto x = a.data(), c = col.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * c[i];
  return detail::make_result("mul_col", m, n, std::move(out), {a, col}, [m, n](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    detail::Node& C = *self.parents[1];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double g = self.grad[i * n + j];
        if (A.requires_grad) A.grad[i * n + j] += g * C.value[i];
        if (C.requires_grad) C.grad[i] += g * A.value[i * n + j];
      }
  });
}

/// a * s where s is a 1x1 tensor.
inline Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  require(s.size() == 1, "mul_scalar: s must be 1x1");
  const double sv = s.item();
  std::vector<double> out(a.size());
  auto x = a.data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = x[k] * sv;
  return detail::make_result("mul_scalar", a.rows(), a.cols(), std::move(out), {a, s}, [](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    detail::Node& S = *self.parents[1];
    for (std::size_t k = 0; k < self.grad.size(); ++k) {
      if (A.requires_grad) A.grad[k] += self.grad[k] * S.value[0];
      if (S.requires_grad) S.grad[0] += self.grad[k] * A.value[k];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  auto x = a.data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = x[k] * s;
  return detail::make_result("scale", a.rows(), a.cols(), std::move(out), {a}, [s](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    for (std::size_t k = 0; k < self.grad.size(); ++k) A.grad[k] += self.grad[k] * s;
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  auto x = a.data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = x[k] + s;
  return detail::make_result("add_scalar", a.rows(), a.cols(), std::move(out), {a}, [](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    for (std::size_t k = 0; k < self.grad.size(); ++k) A.grad[k] += self.grad[k];
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const Tensor& p : parts) {
    require(p.rows() == m, "concat_cols: row counts differ");
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    auto v = p.data();
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < pc; ++j) out[i * n + off + j] = v[i * pc + j];
    off += pc;
  }
  return detail::make_result_n("concat_cols", m, n, std::move(out), parts, [m, n](detail::Node& self) {
    std::size_t off = 0;
    for (auto& pp : self.parents) {
      detail::Node& P = *pp;
      const std::size_t pc = P.cols;
      if (P.requires_grad) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < pc; ++j) P.grad[i * pc + j] += self.grad[i * n + off + j];
      }
      off += pc;
    }
  });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const Tensor& p : parts) {
    require(p.cols() == n, "concat_rows: column counts differ");
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::make_result_n("concat_rows", m, n, std::move(out), parts, [](detail::Node& self) {
    std::size_t off = 0;
    for (auto& pp : self.parents) {
      detail::Node& P = *pp;
      if (P.requires_grad) {
        for (std::size_t k = 0; k < P.value.size(); ++k) P.grad[k] += self.grad[off + k];
      }
      off += P.value.size();
    }
  });
}

/// Columns [begin, end).
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require(begin < end && end <= a.cols(), "slice_cols: bad range");
  const std::size_t m = a.rows(), n = a.cols(), w = end - begin;
  std::vector<double> out(m * w);
  auto v = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = v[i * n + begin + j];
  return detail::make_result("slice_cols", m, w, std::move(out), {a}, [m, n, w, begin](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) A.grad[i * n + begin + j] += self.grad[i * w + j];
  });
}

/// Rows [begin, end).
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require(begin < end && end <= a.rows(), "slice_rows: bad range");
  const std::size_t n = a.cols();
  std::vector<double> out(a.data().begin() + begin * n, a.data().begin() + end * n);
  return detail::make_result("slice_rows", end - begin, n, std::move(out), {a}, [n, begin](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    for (std::size_t k = 0; k < self.grad.size(); ++k) A.grad[begin * n + k] += self.grad[k];
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return detail::make_result("sum", 1, 1, {s}, {a}, [](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    for (double& g : A.grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  require(a.size() > 0, "mean: empty tensor");
  const double inv = 1.0 / static_cast<double>(a.size());
  double s = 0.0;
  for (double x : a.data()) s += x;
  return detail::make_result("mean", 1, 1, {s * inv}, {a}, [inv](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    for (double& g : A.grad) g += self.grad[0] * inv;
  });
}

/// Inner product of two equally shaped tensors, as a 1x1 tensor.
inline Tensor inner(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  auto x = a.data();
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = x[k] >= 0 ? 1.0 / (1.0 + std::exp(-x[k])) : std::exp(x[k]) / (1.0 + std::exp(x[k]));
  }
  return detail::make_result("sigmoid", a.rows(), a.cols(), std::move(out), {a}, [](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    for (std::size_t k = 0; k < self.grad.size(); ++k) {
      const double y = self.value[k];
      A.grad[k] += self.grad[k] * y * (1.0 - y);
    }
  });
}

inline Tensor tanh(const Tensor& a) {
  std::vector<double> out(a.size());
  auto x = a.data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = std::tanh(x[k]);
  return detail::make_result("tanh", a.rows(), a.cols(), std::move(out), {a}, [](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    for (std::size_t k = 0; k < self.grad.size(); ++k) {
      const double y = self.value[k];
      A.grad[k] += self.grad[k] * (1.0 - y * y);
    }
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  auto x = a.data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = x[k] > 0 ? x[k] : 0.0;
  return detail::make_result("relu", a.rows(), a.cols(), std::move(out), {a}, [](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    for (std::size_t k = 0; k < self.grad.size(); ++k) {
      if (A.value[k] > 0) A.grad[k] += self.grad[k];
    }
  });
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.size());
  auto x = a.data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = std::exp(x[k]);
  return detail::make_result("exp", a.rows(), a.cols(), std::move(out), {a}, [](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    for (std::size_t k = 0; k < self.grad.size(); ++k) A.grad[k] += self.grad[k] * self.value[k];
  });
}

inline Tensor sqrt(const Tensor& a) {
  std::vector<double> out(a.size());
  auto x = a.data();
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (x[k] < 0) throw NumericError("sqrt", "negative input");
    out[k] = std::sqrt(x[k]);
  }
  return detail::make_result("sqrt", a.rows(), a.cols(), std::move(out), {a}, [](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    for (std::size_t k = 0; k < self.grad.size(); ++k) A.grad[k] += self.grad[k] * 0.5 / self.value[k];
  });
}

/// Row-wise softmax restricted to `support` (row-major r x c mask, empty = full support).
inline Tensor softmax_rows(const Tensor& a, std::span<const std::uint8_t> support = {}) {
  const std::size_t m = a.rows(), n = a.cols();
  require(support.empty() || support.size() == m * n, "softmax_rows: support shape mismatch");
  std::vector<double> out(m * n);
  auto v = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    auto row = softmax_row(v.subspan(i * n, n), support.empty() ? support : support.subspan(i * n, n));
    std::copy(row.begin(), row.end(), out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return detail::make_result("softmax_rows", m, n, std::move(out), {a}, [m, n](detail::Node& self) {
    detail::Node& A = *self.parents[0];
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.value[i * n + j] * self.grad[i * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        const double y = self.value[i * n + j];
        A.grad[i * n + j] += y * (self.grad[i * n + j] - dot);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

/// Back-propagates from a scalar loss. Returns the gradient of every named
/// requires-grad leaf reached from `loss`; unreached leaves are absent (zero).
/// Fused LSTM cell. `pre` (n x 4H) holds gate pre-activations laid out
/// [input | forget | cell | output]; `c_prev` (n x H) may be undefined for a
/// zero initial state. Returns [h | c] as n x 2H.
inline Tensor lstm_cell(const Tensor& pre, const Tensor& c_prev) {
  require(pre.cols() % 4 == 0, "lstm_cell: pre-activation width must be 4H");
  const std::size_t n = pre.rows(), H = pre.cols() / 4;
  const bool has_prev = c_prev.defined();
  if (has_prev) require(c_prev.rows() == n && c_prev.cols() == H, "lstm_cell: cell state shape mismatch");
  auto sig = [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); };
  // Per entry: i, f, g, o, tanh(c), c_prev.
  auto cache = std::make_shared<std::vector<double>>(n * H * 6);
  std::vector<double> out(n * 2 * H);
  auto p = pre.data();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < H; ++k) {
      const double* row = p.data() + r * 4 * H;
      const double i = sig(row[k]), f = sig(row[H + k]), g = std::tanh(row[2 * H + k]), o = sig(row[3 * H + k]);
      const double cp = has_prev ? c_prev.data()[r * H + k] : 0.0;
      const double c = f * cp + i * g;
      const double tc = std::tanh(c);
      double* e = cache->data() + (r * H + k) * 6;
      e[0] = i, e[1] = f, e[2] = g, e[3] = o, e[4] = tc, e[5] = cp;
      out[r * 2 * H + k] = o * tc;
      out[r * 2 * H + H + k] = c;
    }
  }
  auto bw = [cache, n, H, has_prev](detail::Node& self) {
    detail::Node& P = *self.parents[0];
    detail::Node* C = has_prev ? self.parents[1].get() : nullptr;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t k = 0; k < H; ++k) {
        const double* e = cache->data() + (r * H + k) * 6;
        const double i = e[0], f = e[1], g = e[2], o = e[3], tc = e[4], cp = e[5];
        const double gh = self.grad[r * 2 * H + k];
        const double dc = self.grad[r * 2 * H + H + k] + gh * o * (1.0 - tc * tc);
        if (P.requires_grad) {
          double* gp = P.grad.data() + r * 4 * H;
          gp[k] += dc * g * i * (1.0 - i);
          gp[H + k] += dc * cp * f * (1.0 - f);
          gp[2 * H + k] += dc * i * (1.0 - g * g);
          gp[3 * H + k] += gh * tc * o * (1.0 - o);
        }
        if (C != nullptr && C->requires_grad) C->grad[r * H + k] += dc * f;
      }
    }
  };
  if (has_prev) return detail::make_result("lstm_cell", n, 2 * H, std::move(out), {pre, c_prev}, std::move(bw));
  return detail::make_result("lstm_cell", n, 2 * H, std::move(out), {pre}, std::move(bw));
}

inline GradMap backward(const Tensor& loss) {
  require(loss.defined() && loss.size() == 1, "backward: loss must be a scalar tensor");
  GradMap out;
  if (!loss.requires_grad()) return out;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      detail::Node* p = node->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (detail::Node* n : order) n->grad.assign(n->value.size(), 0.0);
  loss.node()->grad[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->leaf || !n->backward) continue;
    for (double g : n->grad) {
      if (!std::isfinite(g)) throw NumericError(n->op, "non-finite gradient");
    }
    n->backward(*n);
  }

  std::size_t unnamed = 0;
  for (detail::Node* n : order) {
    if (!n->leaf) continue;
    for (double g : n->grad) {
      if (!std::isfinite(g)) throw NumericError(n->name.empty() ? "leaf" : n->name, "non-finite gradient");
    }
    std::string key = n->name.empty() ? "<unnamed:" + std::to_string(unnamed++) + ">" : n->name;
    out.emplace(std::move(key), Tensor::from_data(n->rows, n->cols, n->grad));
  }
  return out;
}

}  // namespace geostars
