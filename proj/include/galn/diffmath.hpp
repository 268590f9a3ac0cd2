#pragma once

// Dense 2-D tensors with tape-based reverse-mode differentiation.
//
// Every tensor is a row-major rows x cols matrix of doubles. Vectors are
// stored as single columns (D x 1) and scalars as 1 x 1. Values are
// immutable once a Node is built; gradients only ever accumulate.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "galn/errors.hpp"

namespace galn {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  constexpr std::size_t size() const { return rows * cols; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[' << s.rows << " x " << s.cols << ']';
  return os.str();
}

/// Plain value-type tensor used for parameters and optimizer state.
struct Tensor {
  Shape shape;
  std::vector<double> values;

  static Tensor zeros(Shape s) { return {s, std::vector<double>(s.size(), 0.0)}; }
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

namespace detail {

struct NodeData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::string op;
  std::vector<std::shared_ptr<NodeData>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(const NodeData&)> backward;
};

}  // namespace detail

class Node {
 public:
  Node() = default;

  static Node leaf(Shape shape, std::vector<double> values, bool requires_grad = true) {
    if (values.size() != shape.size()) {
      throw DimensionError("leaf: " + std::to_string(values.size()) + " values for shape " +
                           to_string(shape));
    }
    auto d = std::make_shared<detail::NodeData>();
    d->shape = shape;
    d->values = std::move(values);
    d->grad.assign(d->values.size(), 0.0);
    d->requires_grad = requires_grad;
    d->op = "leaf";
    return Node(std::move(d));
  }

  static Node leaf(const Tensor& t, bool requires_grad = true) {
    return leaf(t.shape, t.values, requires_grad);
  }

  static Node constant(Shape shape, std::vector<double> values) {
    return leaf(shape, std::move(values), false);
  }

  static Node column(std::vector<double> values, bool requires_grad = true) {
    const Shape s{values.size(), 1};
    return leaf(s, std::move(values), requires_grad);
  }

  static Node scalar(double v, bool requires_grad = false) {
    return leaf({1, 1}, {v}, requires_grad);
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  std::size_t rows() const { return d_->shape.rows; }
  std::size_t cols() const { return d_->shape.cols; }
  std::size_t size() const { return d_->values.size(); }
  std::span<const double> values() const { return d_->values; }
  std::span<const double> grad() const { return d_->grad; }
  double at(std::size_t r, std::size_t c) const { return d_->values[r * cols() + c]; }
  double grad_at(std::size_t r, std::size_t c) const { return d_->grad[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw ContractError("item: node of shape " + to_string(shape()) + " is not scalar");
    return d_->values[0];
  }
  bool requires_grad() const { return d_->requires_grad; }
  bool is_leaf() const { return d_->is_leaf; }
  const std::string& op_name() const { return d_->op; }
  void zero_grad() { std::fill(d_->grad.begin(), d_->grad.end(), 0.0); }

  /// Column j as a plain vector.
  std::vector<double> column_values(std::size_t j) const {
    std::vector<double> out(rows());
    for (std::size_t r = 0; r < rows(); ++r) out[r] = at(r, j);
    return out;
  }

  const std::shared_ptr<detail::NodeData>& data() const { return d_; }

 private:
  explicit Node(std::shared_ptr<detail::NodeData> d) : d_(std::move(d)) {}
  friend Node make_node(Shape, std::vector<double>, std::string, std::vector<Node>,
                        std::function<void(const detail::NodeData&)>);

  std::shared_ptr<detail::NodeData> d_;
};

inline Node make_node(Shape shape, std::vector<double> values, std::string op,
                      std::vector<Node> parents,
                      std::function<void(const detail::NodeData&)> backward) {
  auto d = std::make_shared<detail::NodeData>();
  d->shape = shape;
  d->values = std::move(values);
  d->grad.assign(d->values.size(), 0.0);
  d->op = std::move(op);
  d->is_leaf = false;
  for (const auto& p : parents) {
    d->requires_grad = d->requires_grad || p.requires_grad();
    d->parents.push_back(p.data());
  }
  if (d->requires_grad) d->backward = std::move(backward);
  return Node(std::move(d));
}

namespace detail {

inline void check_temperature(std::string_view op, double t) {
  if (!(t > 0.0) || !std::isfinite(t)) {
    std::ostringstream os;
    os << op << ": temperature must be positive and finite, got " << t;
    throw ParameterError(os.str());
  }
}

[[noreturn]] inline void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " +
                       to_string(b));
}

inline double* grad_of(const std::shared_ptr<NodeData>& p) {
  return p->requires_grad ? p->grad.data() : nullptr;
}

}  // namespace detail

// --------------------------------------------------------------------------
// Operations

inline Node matmul(const Node& a, const Node& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) detail::shape_mismatch("matmul", a.shape(), b.shape());
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  return make_node({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](const detail::NodeData& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    const double* g = self.grad.data();
    if (double* ga = detail::grad_of(pa)) {
      const double* bv = pb->values.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (double* gb = detail::grad_of(pb)) {
      const double* av = pa->values.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
    }
  });
}

namespace detail {

// a (+/-) b where b is either a's shape or a rows x 1 column broadcast over columns.
inline Node add_or_sub(const Node& a, const Node& b, double sign, const char* op) {
  const bool broadcast = b.cols() == 1 && a.cols() != 1 && b.rows() == a.rows();
  if (!(a.shape() == b.shape()) && !broadcast) shape_mismatch(op, a.shape(), b.shape());
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += sign * bv[broadcast ? i : i * c + j];
  return make_node(a.shape(), std::move(out), op, {a, b},
                   [r, c, sign, broadcast](const NodeData& self) {
                     const double* g = self.grad.data();
                     if (double* ga = grad_of(self.parents[0]))
                       for (std::size_t i = 0; i < r * c; ++i) ga[i] += g[i];
                     if (double* gb = grad_of(self.parents[1]))
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j)
                           gb[broadcast ? i : i * c + j] += sign * g[i * c + j];
                   });
}

}  // namespace detail

/// Elementwise sum. `b` may also be a rows x 1 column, added to every column of `a`.
inline Node add(const Node& a, const Node& b) { return detail::add_or_sub(a, b, 1.0, "add"); }
inline Node sub(const Node& a, const Node& b) { return detail::add_or_sub(a, b, -1.0, "sub"); }

inline Node scale(const Node& a, double factor) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  return make_node(a.shape(), std::move(out), "scale", {a}, [factor](const detail::NodeData& self) {
    if (double* ga = detail::grad_of(self.parents[0]))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += factor * self.grad[i];
  });
}

inline Node elementwise_mul(const Node& a, const Node& b) {
  if (!(a.shape() == b.shape())) detail::shape_mismatch("elementwise_mul", a.shape(), b.shape());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return make_node(a.shape(), std::move(out), "elementwise_mul", {a, b}, [](const detail::NodeData& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    if (double* ga = detail::grad_of(pa))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * pb->values[i];
    if (double* gb = detail::grad_of(pb))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i] * pa->values[i];
  });
}

inline Node exp(const Node& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.values()[i]);
  return make_node(a.shape(), std::move(out), "exp", {a}, [](const detail::NodeData& self) {
    if (double* ga = detail::grad_of(self.parents[0]))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * self.values[i];
  });
}

inline Node log(const Node& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.values()[i];
    if (!(x > 0.0)) {
      std::ostringstream os;
      os << "log: non-positive input " << x << " at flat index " << i;
      throw DomainError(os.str());
    }
    out[i] = std::log(x);
  }
  return make_node(a.shape(), std::move(out), "log", {a}, [](const detail::NodeData& self) {
    const auto& pa = self.parents[0];
    if (double* ga = detail::grad_of(pa))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] / pa->values[i];
  });
}

namespace detail {

inline Node reduce_axis(const Node& a, int axis, bool mean, const char* op) {
  if (axis != 0 && axis != 1) {
    throw ParameterError(std::string(op) + ": axis must be 0 or 1, got " + std::to_string(axis));
  }
  const std::size_t r = a.rows(), c = a.cols();
  const Shape out_shape = axis == 0 ? Shape{1, c} : Shape{r, 1};
  const double n = static_cast<double>(axis == 0 ? r : c);
  std::vector<double> out(out_shape.size(), 0.0);
  const auto av = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += av[i * c + j];
  if (mean)
    for (auto& v : out) v /= n;
  return make_node(out_shape, std::move(out), op, {a}, [r, c, axis, mean, n](const NodeData& self) {
    if (double* ga = grad_of(self.parents[0])) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const double g = self.grad[axis == 0 ? j : i];
          ga[i * c + j] += mean ? g / n : g;
        }
    }
  });
}

inline std::vector<double> row_logsumexp(std::span<const double> v, std::size_t r, std::size_t c,
                                         double inv_t) {
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t jm = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (v[i * c + j] > v[i * c + jm]) jm = j;
    const double mx = v[i * c + jm] * inv_t;
    // The max term contributes exactly 1; log1p keeps precision when the rest is tiny.
    double acc = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      if (j != jm) acc += std::exp(v[i * c + j] * inv_t - mx);
    out[i] = mx + std::log1p(acc);
  }
  return out;
}

}  // namespace detail

/// Reduce over `axis`: 0 collapses rows (result 1 x cols), 1 collapses columns (rows x 1).
inline Node sum_axis(const Node& a, int axis) { return detail::reduce_axis(a, axis, false, "sum_axis"); }
inline Node mean_axis(const Node& a, int axis) { return detail::reduce_axis(a, axis, true, "mean_axis"); }

/// Row-wise log(sum_j exp(x_ij / temperature)), computed with the max shift. Result is rows x 1.
inline Node logsumexp_rows(const Node& a, double temperature = 1.0) {
  detail::check_temperature("logsumexp_rows", temperature);
  if (a.cols() == 0) throw DimensionError("logsumexp_rows: empty rows in " + to_string(a.shape()));
  const std::size_t r = a.rows(), c = a.cols();
  const double inv_t = 1.0 / temperature;
  auto out = detail::row_logsumexp(a.values(), r, c, inv_t);
  return make_node({r, 1}, std::move(out), "logsumexp_rows", {a}, [r, c, inv_t](const detail::NodeData& self) {
    const auto& pa = self.parents[0];
    if (double* ga = detail::grad_of(pa)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const double p = std::exp(pa->values[i * c + j] * inv_t - self.values[i]);
          ga[i * c + j] += self.grad[i] * p * inv_t;
        }
    }
  });
}

/// Row-wise softmax of x / temperature, evaluated as exp(x/t - logsumexp).
inline Node softmax_rows(const Node& a, double temperature = 1.0) {
  detail::check_temperature("softmax_rows", temperature);
  if (a.cols() == 0) throw DimensionError("softmax_rows: empty rows in " + to_string(a.shape()));
  const std::size_t r = a.rows(), c = a.cols();
  const double inv_t = 1.0 / temperature;
  const auto lse = detail::row_logsumexp(a.values(), r, c, inv_t);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = std::exp(a.values()[i * c + j] * inv_t - lse[i]);
  return make_node(a.shape(), std::move(out), "softmax_rows", {a}, [r, c, inv_t](const detail::NodeData& self) {
    if (double* ga = detail::grad_of(self.parents[0])) {
      const double* y = self.values.data();
      const double* g = self.grad.data();
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += inv_t * y[i * c + j] * (g[i * c + j] - dot);
      }
    }
  });
}

/// Scale every column to unit L2 norm. Columns with norm <= 1e-10 are a DomainError.
inline Node l2_normalize_cols(const Node& a) {
  const std::size_t r = a.rows(), c = a.cols();
  const auto av = a.values();
  std::vector<double> norms(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) norms[j] += av[i * c + j] * av[i * c + j];
  for (std::size_t j = 0; j < c; ++j) {
    norms[j] = std::sqrt(norms[j]);
    if (!(norms[j] > 1e-10)) {
      std::ostringstream os;
      os << "l2_normalize_cols: column " << j << " has norm " << norms[j];
      throw DomainError(os.str());
    }
  }
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = av[i * c + j] / norms[j];
  return make_node(a.shape(), std::move(out), "l2_normalize_cols", {a},
                   [r, c, norms = std::move(norms)](const detail::NodeData& self) {
                     if (double* ga = detail::grad_of(self.parents[0])) {
                       const double* y = self.values.data();
                       const double* g = self.grad.data();
                       for (std::size_t j = 0; j < c; ++j) {
                         double dot = 0.0;
                         for (std::size_t i = 0; i < r; ++i) dot += y[i * c + j] * g[i * c + j];
                         for (std::size_t i = 0; i < r; ++i)
                           ga[i * c + j] += (g[i * c + j] - y[i * c + j] * dot) / norms[j];
                       }
                     }
                   });
}

inline Node transpose(const Node& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.values()[i * c + j];
  return make_node({c, r}, std::move(out), "transpose", {a}, [r, c](const detail::NodeData& self) {
    if (double* ga = detail::grad_of(self.parents[0]))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
  });
}

inline Node concat_cols(std::span<const Node> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) detail::shape_mismatch("concat_cols", parts[0].shape(), p.shape());
    offsets.push_back(total);
    total += p.cols();
  }
  std::vector<double> out(r * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t pc = parts[k].cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pc; ++j) out[i * total + offsets[k] + j] = parts[k].values()[i * pc + j];
  }
  std::vector<Node> parents(parts.begin(), parts.end());
  return make_node({r, total}, std::move(out), "concat_cols", std::move(parents),
                   [r, total, offsets = std::move(offsets)](const detail::NodeData& self) {
                     for (std::size_t k = 0; k < self.parents.size(); ++k) {
                       double* gp = detail::grad_of(self.parents[k]);
                       if (!gp) continue;
                       const std::size_t pc = self.parents[k]->shape.cols;
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] += self.grad[i * total + offsets[k] + j];
                     }
                   });
}

inline Node concat_cols(std::initializer_list<Node> parts) {
  return concat_cols(std::span<const Node>(parts.begin(), parts.size()));
}

inline Node relu(const Node& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, a.values()[i]);
  return make_node(a.shape(), std::move(out), "relu", {a}, [](const detail::NodeData& self) {
    const auto& pa = self.parents[0];
    if (double* ga = detail::grad_of(pa))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (pa->values[i] > 0.0) ga[i] += self.grad[i];
  });
}

/// Rows of `a` selected by `ids`, in order; repeated ids are allowed.
inline Node gather_rows(const Node& a, std::span<const std::size_t> ids) {
  const std::size_t c = a.cols();
  std::vector<double> out(ids.size() * c);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= a.rows()) {
      throw IndexError("gather_rows: index " + std::to_string(ids[r]) + " out of range for " +
                       to_string(a.shape()));
    }
    std::copy_n(a.values().begin() + static_cast<std::ptrdiff_t>(ids[r] * c), c, out.begin() + static_cast<std::ptrdiff_t>(r * c));
  }
  return make_node({ids.size(), c}, std::move(out), "gather_rows", {a},
                   [c, ids = std::vector<std::size_t>(ids.begin(), ids.end())](const detail::NodeData& self) {
                     if (double* ga = detail::grad_of(self.parents[0]))
                       for (std::size_t r = 0; r < ids.size(); ++r)
                         for (std::size_t j = 0; j < c; ++j) ga[ids[r] * c + j] += self.grad[r * c + j];
                   });
}

// --------------------------------------------------------------------------
// Dispatch by kind, used where every op must be enumerated (gradient suites).

enum class OpKind {
  matmul,
  add,
  sub,
  scale,
  elementwise_mul,
  exp,
  log,
  sum_axis,
  mean_axis,
  softmax_rows,
  logsumexp_rows,
  l2_normalize_cols,
  transpose,
  concat_cols,
  relu,
  gather_rows,
};

inline constexpr OpKind kAllOpKinds[] = {
    OpKind::matmul,         OpKind::add,          OpKind::sub,           OpKind::scale,
    OpKind::elementwise_mul, OpKind::exp,         OpKind::log,           OpKind::sum_axis,
    OpKind::mean_axis,      OpKind::softmax_rows, OpKind::logsumexp_rows, OpKind::l2_normalize_cols,
    OpKind::transpose,      OpKind::concat_cols,  OpKind::relu,          OpKind::gather_rows,
};

inline std::string_view op_name(OpKind k) {
  switch (k) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::scale: return "scale";
    case OpKind::elementwise_mul: return "elementwise_mul";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::sum_axis: return "sum_axis";
    case OpKind::mean_axis: return "mean_axis";
    case OpKind::softmax_rows: return "softmax_rows";
    case OpKind::logsumexp_rows: return "logsumexp_rows";
    case OpKind::l2_normalize_cols: return "l2_normalize_cols";
    case OpKind::transpose: return "transpose";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::relu: return "relu";
    case OpKind::gather_rows: return "gather_rows";
  }
  return "unknown";
}

struct OpParams {
  int axis = 0;
  double temperature = 1.0;
  double factor = 1.0;
  std::vector<std::size_t> indices;
};

inline Node tensor_op(OpKind kind, std::span<const Node> in, const OpParams& params = {}) {
  const std::size_t arity = [&] {
    switch (kind) {
      case OpKind::matmul:
      case OpKind::add:
      case OpKind::sub:
      case OpKind::elementwise_mul: return std::size_t{2};
      case OpKind::concat_cols: return in.size();
      default: return std::size_t{1};
    }
  }();
  if (in.size() != arity || in.empty()) {
    throw ContractError(std::string(op_name(kind)) + ": expected " + std::to_string(arity) +
                        " inputs, got " + std::to_string(in.size()));
  }
  switch (kind) {
    case OpKind::matmul: return matmul(in[0], in[1]);
    case OpKind::add: return add(in[0], in[1]);
    case OpKind::sub: return sub(in[0], in[1]);
    case OpKind::scale: return scale(in[0], params.factor);
    case OpKind::elementwise_mul: return elementwise_mul(in[0], in[1]);
    case OpKind::exp: return exp(in[0]);
    case OpKind::log: return log(in[0]);
    case OpKind::sum_axis: return sum_axis(in[0], params.axis);
    case OpKind::mean_axis: return mean_axis(in[0], params.axis);
    case OpKind::softmax_rows: return softmax_rows(in[0], params.temperature);
    case OpKind::logsumexp_rows: return logsumexp_rows(in[0], params.temperature);
    case OpKind::l2_normalize_cols: return l2_normalize_cols(in[0]);
    case OpKind::transpose: return transpose(in[0]);
    case OpKind::concat_cols: return concat_cols(in);
    case OpKind::relu: return relu(in[0]);
    case OpKind::gather_rows: return gather_rows(in[0], params.indices);
  }
  throw ContractError("tensor_op: unknown kind");
}

// --------------------------------------------------------------------------
// Reverse pass

/// Populate gradients of every reachable node that requires them. Interior
/// gradients are recomputed from scratch on each call; leaf gradients accumulate.
inline void backward(const Node& root) {
  if (!root.defined() || root.size() != 1) {
    throw ContractError("backward: root must be scalar, got shape " +
                        (root.defined() ? to_string(root.shape()) : std::string("<undefined>")));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<detail::NodeData*> order;
  std::unordered_set<const detail::NodeData*> seen;
  std::vector<std::pair<detail::NodeData*, std::size_t>> stack;
  stack.emplace_back(root.data().get(), 0);
  seen.insert(root.data().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::NodeData* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order)
    if (!n->is_leaf) std::fill(n->grad.begin(), n->grad.end(), 0.0);
  root.data()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward) (*it)->backward(**it);
}

// --------------------------------------------------------------------------
// Finite-difference gradient checking

struct GradReport {
  std::string op_name;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t probe_count = 0;
};

/// Compare the autodiff gradient of scalar `f` at `x` against central
/// differences. Inputs larger than `max_probes` coordinates are checked on a
/// seeded random subset of `max_probes` coordinates.
inline GradReport grad_check(std::string name, const std::function<Node(const Node&)>& f, const Node& x,
                             double h = 1e-5, std::size_t max_probes = 64, std::uint64_t seed = 0) {
  if (!(h > 0.0)) throw ParameterError("grad_check: step size must be positive");
  if (max_probes < 32) max_probes = 32;
  const std::vector<double> base(x.values().begin(), x.values().end());
  const Node leaf = Node::leaf(x.shape(), base, true);
  const Node y = f(leaf);
  if (!y.defined() || y.size() != 1) {
    throw ContractError("grad_check(" + name + "): f must return a scalar");
  }
  backward(y);

  std::vector<std::size_t> probes(base.size());
  for (std::size_t i = 0; i < probes.size(); ++i) probes[i] = i;
  if (probes.size() > max_probes) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < max_probes; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng() % (probes.size() - i));
      std::swap(probes[i], probes[j]);
    }
    probes.resize(max_probes);
  }

  auto eval = [&](std::size_t i, double delta) {
    std::vector<double> v = base;
    v[i] += delta;
    return f(Node::leaf(x.shape(), std::move(v), false)).item();
  };

  GradReport rep{std::move(name), 0.0, 0.0, probes.size()};
  for (std::size_t i : probes) {
    const double numeric = (eval(i, h) - eval(i, -h)) / (2.0 * h);
    const double analytic = leaf.grad()[i];
    const double abs_err = std::abs(analytic - numeric);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
    rep.max_rel_err = std::max(rep.max_rel_err, abs_err / denom);
  }
  return rep;
}

}  // namespace galn
