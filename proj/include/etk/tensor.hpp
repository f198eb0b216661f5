#pragma once

// Dense double-precision tensors with tape-free reverse-mode differentiation.
//
// A Tensor is a shared handle onto a graph node. Operations on tensors that
// require gradients record their parents and a local backward rule; backward()
// walks the reachable subgraph in reverse topological order.
//
// Closed operation set: matmul, add/sub/mul (with leading-batch broadcast of a
// suffix-shaped right operand), exp, log, tanh, sum, mean, sum_last, concat,
// slice, transpose (axis swap), reshape, softmax_last, layer_norm_last.
// The chosen nonlinearity is tanh.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace etk {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

inline thread_local bool g_grad_enabled = true;

}  // namespace detail

/// RAII guard disabling graph recording on the current thread.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
  ~NoGradGuard() { detail::g_grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::g_grad_enabled; }

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape.empty()) shape = {1};
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    if (numel(shape) != data.size())
      throw ShapeError("shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double v) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  const std::vector<double>& data() const { return node_->data; }
  /// Mutable access, reserved for optimizers and loaders updating leaves.
  std::vector<double>& mutable_data() { return node_->data; }
  const std::vector<double>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  const char* op() const { return node_->op; }

  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }

  /// Copy of the values with no graph history.
  Tensor detach() const { return Tensor(shape(), data()); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  if (!g_grad_enabled) return false;
  for (auto* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

// Builds an output tensor and, when needed, wires its backward rule.
inline Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                          std::vector<Tensor> inputs, std::function<void(Node&)> fn) {
  bool rg = false;
  if (g_grad_enabled)
    for (auto& t : inputs) rg = rg || t.requires_grad();
  Tensor out(std::move(shape), std::move(data), rg);
  out.node()->op = op;
  if (rg) {
    for (auto& t : inputs) out.node()->parents.push_back(t.node_ptr());
    out.node()->backward_fn = std::move(fn);
  }
  return out;
}

inline Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

// Right operand b broadcasts over a when b.shape is a suffix of a.shape.
inline std::size_t broadcast_inner(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return numel(a);
  if (b.size() <= a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin())) return numel(b);
  if (b.size() == 1 && b[0] == 1) return 1;
  throw ShapeError(std::string(op) + ": cannot combine " + shape_str(a) + " with " +
                   shape_str(b));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t inner = detail::broadcast_inner(a.shape(), b.shape(), "add");
  std::vector<double> out(a.data());
  const auto& bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % inner];
  return detail::make_result(a.shape(), std::move(out), "add", {a, b},
                             [inner](detail::Node& n) {
                               auto& pa = detail::parent(n, 0);
                               auto& pb = detail::parent(n, 1);
                               if (pa.requires_grad) {
                                 pa.ensure_grad();
                                 for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
                               }
                               if (pb.requires_grad) {
                                 pb.ensure_grad();
                                 for (std::size_t i = 0; i < n.grad.size(); ++i)
                                   pb.grad[i % inner] += n.grad[i];
                               }
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  const std::size_t inner = detail::broadcast_inner(a.shape(), b.shape(), "sub");
  std::vector<double> out(a.data());
  const auto& bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i % inner];
  return detail::make_result(a.shape(), std::move(out), "sub", {a, b},
                             [inner](detail::Node& n) {
                               auto& pa = detail::parent(n, 0);
                               auto& pb = detail::parent(n, 1);
                               if (pa.requires_grad) {
                                 pa.ensure_grad();
                                 for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
                               }
                               if (pb.requires_grad) {
                                 pb.ensure_grad();
                                 for (std::size_t i = 0; i < n.grad.size(); ++i)
                                   pb.grad[i % inner] -= n.grad[i];
                               }
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  const std::size_t inner = detail::broadcast_inner(a.shape(), b.shape(), "mul");
  std::vector<double> out(a.data());
  const auto& bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i % inner];
  return detail::make_result(a.shape(), std::move(out), "mul", {a, b},
                             [inner](detail::Node& n) {
                               auto& pa = detail::parent(n, 0);
                               auto& pb = detail::parent(n, 1);
                               if (pa.requires_grad) {
                                 pa.ensure_grad();
                                 for (std::size_t i = 0; i < n.grad.size(); ++i)
                                   pa.grad[i] += n.grad[i] * pb.data[i % inner];
                               }
                               if (pb.requires_grad) {
                                 pb.ensure_grad();
                                 for (std::size_t i = 0; i < n.grad.size(); ++i)
                                   pb.grad[i % inner] += n.grad[i] * pa.data[i];
                               }
                             });
}

/// Multiplication by a constant; equivalent to mul with a constant tensor.
inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (auto& v : out) v *= c;
  return detail::make_result(a.shape(), std::move(out), "scale", {a}, [c](detail::Node& n) {
    auto& pa = detail::parent(n, 0);
    pa.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += c * n.grad[i];
  });
}

/// Addition of a constant; equivalent to add with a constant tensor.
inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (auto& v : out) v += c;
  return detail::make_result(a.shape(), std::move(out), "add_scalar", {a}, [](detail::Node& n) {
    auto& pa = detail::parent(n, 0);
    pa.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
  });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

// ---------------------------------------------------------------------------
// Elementwise unary ops

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
  return detail::make_result(a.shape(), std::move(out), "exp", {a}, [](detail::Node& n) {
    auto& pa = detail::parent(n, 0);
    pa.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * n.data[i];
  });
}

inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(a.data()[i] > 0.0)) throw std::domain_error("log of non-positive value");
    out[i] = std::log(a.data()[i]);
  }
  return detail::make_result(a.shape(), std::move(out), "log", {a}, [](detail::Node& n) {
    auto& pa = detail::parent(n, 0);
    pa.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] / pa.data[i];
  });
}

inline Tensor tanh(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.data()[i]);
  return detail::make_result(a.shape(), std::move(out), "tanh", {a}, [](detail::Node& n) {
    auto& pa = detail::parent(n, 0);
    pa.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      pa.grad[i] += n.grad[i] * (1.0 - n.data[i] * n.data[i]);
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result({1}, {s}, "sum", {a}, [](detail::Node& n) {
    auto& pa = detail::parent(n, 0);
    pa.ensure_grad();
    for (auto& g : pa.grad) g += n.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.size());
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result({1}, {s * inv}, "mean", {a}, [inv](detail::Node& n) {
    auto& pa = detail::parent(n, 0);
    pa.ensure_grad();
    for (auto& g : pa.grad) g += n.grad[0] * inv;
  });
}

/// Sum over the last dimension, keeping it with extent 1.
inline Tensor sum_last(const Tensor& a) {
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.size() / d;
  Shape s = a.shape();
  s.back() = 1;
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r] += a.data()[r * d + j];
  return detail::make_result(std::move(s), std::move(out), "sum_last", {a}, [d](detail::Node& n) {
    auto& pa = detail::parent(n, 0);
    pa.ensure_grad();
    for (std::size_t i = 0; i < pa.grad.size(); ++i) pa.grad[i] += n.grad[i / d];
  });
}

// ---------------------------------------------------------------------------
// Shape ops

inline Tensor reshape(const Tensor& a, Shape s) {
  if (numel(s) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(s));
  return detail::make_result(std::move(s), a.data(), "reshape", {a}, [](detail::Node& n) {
    auto& pa = detail::parent(n, 0);
    pa.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
  });
}

namespace detail {

// Index bookkeeping for an axis split as [outer, extent, inner].
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace detail

/// Swap two axes (defaults to the last two).
inline Tensor transpose(const Tensor& a, std::size_t ax0, std::size_t ax1) {
  const Shape& in = a.shape();
  if (ax0 >= in.size() || ax1 >= in.size())
    throw ShapeError("transpose: axis out of range for " + shape_str(in));
  if (ax0 > ax1) std::swap(ax0, ax1);
  Shape out_s = in;
  std::swap(out_s[ax0], out_s[ax1]);
  // Decompose as [A, n0, B, n1, C] -> [A, n1, B, n0, C].
  std::size_t A = 1, B = 1, C = 1;
  for (std::size_t i = 0; i < ax0; ++i) A *= in[i];
  for (std::size_t i = ax0 + 1; i < ax1; ++i) B *= in[i];
  for (std::size_t i = ax1 + 1; i < in.size(); ++i) C *= in[i];
  const std::size_t n0 = in[ax0], n1 = in[ax1];
  std::vector<std::size_t> perm(a.size());
  std::size_t o = 0;
  for (std::size_t ia = 0; ia < A; ++ia)
    for (std::size_t i1 = 0; i1 < n1; ++i1)
      for (std::size_t ib = 0; ib < B; ++ib)
        for (std::size_t i0 = 0; i0 < n0; ++i0)
          for (std::size_t ic = 0; ic < C; ++ic)
            perm[o++] = (((ia * n0 + i0) * B + ib) * n1 + i1) * C + ic;
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[perm[i]];
  return detail::make_result(std::move(out_s), std::move(out), "transpose", {a},
                             [perm = std::move(perm)](detail::Node& n) {
                               auto& pa = detail::parent(n, 0);
                               pa.ensure_grad();
                               for (std::size_t i = 0; i < n.grad.size(); ++i)
                                 pa.grad[perm[i]] += n.grad[i];
                             });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(a.shape()));
  return transpose(a, a.rank() - 2, a.rank() - 1);
}

inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.rank() || begin >= end || end > a.dim(axis))
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
  const auto v = detail::axis_view(a.shape(), axis);
  const std::size_t len = end - begin;
  Shape s = a.shape();
  s[axis] = len;
  std::vector<double> out(v.outer * len * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o)
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>((o * v.extent + begin) * v.inner),
                len * v.inner, out.begin() + static_cast<std::ptrdiff_t>(o * len * v.inner));
  return detail::make_result(std::move(s), std::move(out), "slice", {a},
                             [v, begin, len](detail::Node& n) {
                               auto& pa = detail::parent(n, 0);
                               pa.ensure_grad();
                               for (std::size_t o = 0; o < v.outer; ++o)
                                 for (std::size_t k = 0; k < len * v.inner; ++k)
                                   pa.grad[(o * v.extent + begin) * v.inner + k] +=
                                       n.grad[o * len * v.inner + k];
                             });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape s = parts[0].shape();
  if (axis >= s.size()) throw ShapeError("concat axis out of range for " + shape_str(s));
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape q = p.shape();
    if (q.size() != s.size()) throw ShapeError("concat rank mismatch: " + shape_str(q) + " vs " + shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && q[i] != s[i])
        throw ShapeError("concat shape mismatch: " + shape_str(q) + " vs " + shape_str(s));
    extents.push_back(q[axis]);
    total += q[axis];
  }
  s[axis] = total;
  const auto v = detail::axis_view(s, axis);
  std::vector<double> out(numel(s));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t len = extents[k];
    for (std::size_t o = 0; o < v.outer; ++o)
      std::copy_n(parts[k].data().begin() + static_cast<std::ptrdiff_t>(o * len * v.inner),
                  len * v.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * v.inner));
    offset += len;
  }
  return detail::make_result(std::move(s), std::move(out), "concat", parts,
                             [v, total, extents](detail::Node& n) {
                               std::size_t off = 0;
                               for (std::size_t k = 0; k < extents.size(); ++k) {
                                 auto& p = detail::parent(n, k);
                                 const std::size_t len = extents[k];
                                 if (p.requires_grad) {
                                   p.ensure_grad();
                                   for (std::size_t o = 0; o < v.outer; ++o)
                                     for (std::size_t j = 0; j < len * v.inner; ++j)
                                       p.grad[o * len * v.inner + j] +=
                                           n.grad[(o * total + off) * v.inner + j];
                                 }
                                 off += len;
                               }
                             });
}

// ---------------------------------------------------------------------------
// Matrix product.
//
// Supported forms: [m,k]x[k,n], [B,m,k]x[B,k,n], and [...,m,k]x[k,n] where the
// right operand is shared across all leading batch entries.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  auto mismatch = [&] {
    return ShapeError("matmul: shape mismatch " + shape_str(as) + " x " + shape_str(bs));
  };
  if (as.size() < 2 || bs.size() < 2 || bs.size() > 3) throw mismatch();
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t kb = bs[bs.size() - 2], n = bs.back();
  if (k != kb) throw mismatch();
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];
  bool shared = bs.size() == 2;
  if (!shared) {
    if (as.size() != 3 || as[0] != bs[0]) throw mismatch();
  }
  Shape os(as.begin(), as.end() - 1);
  os.push_back(n);
  std::vector<double> out(batch * m * n, 0.0);
  const double* A = a.data().data();
  const double* Bm = b.data().data();
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const double* Ab = A + bi * m * k;
    const double* Bb = Bm + (shared ? 0 : bi * k * n);
    double* C = out.data() + bi * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      double* Ci = C + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = Ab[i * k + p];
        const double* Bp = Bb + p * n;
        for (std::size_t j = 0; j < n; ++j) Ci[j] += aip * Bp[j];
      }
    }
  }
  return detail::make_result(
      std::move(os), std::move(out), "matmul", {a, b},
      [batch, m, k, n, shared](detail::Node& nd) {
        auto& pa = detail::parent(nd, 0);
        auto& pb = detail::parent(nd, 1);
        const double* G = nd.grad.data();
        if (pa.requires_grad) {
          pa.ensure_grad();
          // dA = G B^T
          for (std::size_t bi = 0; bi < batch; ++bi) {
            const double* Bb = pb.data.data() + (shared ? 0 : bi * k * n);
            const double* Gb = G + bi * m * n;
            double* dA = pa.grad.data() + bi * m * k;
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                const double* Bp = Bb + p * n;
                const double* Gi = Gb + i * n;
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) s += Gi[j] * Bp[j];
                dA[i * k + p] += s;
              }
          }
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          // dB = A^T G
          for (std::size_t bi = 0; bi < batch; ++bi) {
            const double* Ab = pa.data.data() + bi * m * k;
            const double* Gb = G + bi * m * n;
            double* dB = pb.grad.data() + (shared ? 0 : bi * k * n);
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                const double aip = Ab[i * k + p];
                const double* Gi = Gb + i * n;
                double* dBp = dB + p * n;
                for (std::size_t j = 0; j < n; ++j) dBp[j] += aip * Gi[j];
              }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Row-wise normalizers

/// Softmax along the last dimension, computed with max subtraction.
inline Tensor softmax_last(const Tensor& x) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = x.data().data() + r * d;
    double* yi = out.data() + r * d;
    const double mx = *std::max_element(xi, xi + d);
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += (yi[j] = std::exp(xi[j] - mx));
    for (std::size_t j = 0; j < d; ++j) yi[j] /= s;
  }
  return detail::make_result(x.shape(), std::move(out), "softmax", {x}, [d, rows](detail::Node& n) {
    auto& pa = detail::parent(n, 0);
    pa.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = n.data.data() + r * d;
      const double* g = n.grad.data() + r * d;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < d; ++j) pa.grad[r * d + j] += y[j] * (g[j] - dot);
    }
  });
}

/// Layer normalization over the last dimension (no affine part).
inline Tensor layer_norm_last(const Tensor& x, double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = x.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xi[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (xi[j] - mu) * inv_std[r];
  }
  return detail::make_result(
      x.shape(), std::move(out), "layer_norm", {x},
      [d, rows, inv_std = std::move(inv_std)](detail::Node& n) {
        auto& pa = detail::parent(n, 0);
        pa.ensure_grad();
        const double dd = static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = n.data.data() + r * d;
          const double* g = n.grad.data() + r * d;
          double gs = 0.0, gy = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            gs += g[j];
            gy += g[j] * y[j];
          }
          for (std::size_t j = 0; j < d; ++j)
            pa.grad[r * d + j] += inv_std[r] * (g[j] - gs / dd - y[j] * gy / dd);
        }
      });
}

// ---------------------------------------------------------------------------
// Backward pass

namespace detail {

inline std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents precede children
}

}  // namespace detail

/// Populates grad on every requires_grad tensor reachable from `loss`.
/// Gradients of the reachable subgraph are reset before propagation.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1) throw ShapeError("backward needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw std::logic_error("backward: loss does not depend on any gradient-requiring tensor");
  auto order = detail::topo_order(loss.node());
  for (auto* nd : order) nd->grad.assign(nd->data.size(), 0.0);
  loss.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

/// Runs backward and returns the gradient for each requested leaf.
/// Throws if a leaf is not part of the loss graph.
inline std::vector<std::vector<double>> gradients(const Tensor& loss, const std::vector<Tensor>& leaves) {
  if (loss.size() != 1) throw ShapeError("gradients needs a scalar loss, got " + shape_str(loss.shape()));
  std::unordered_set<detail::Node*> reachable;
  if (loss.requires_grad())
    for (auto* nd : detail::topo_order(loss.node())) reachable.insert(nd);
  for (const auto& leaf : leaves)
    if (!reachable.count(leaf.node())) throw std::invalid_argument("gradients: leaf not in graph");
  backward(loss);
  std::vector<std::vector<double>> out;
  out.reserve(leaves.size());
  for (const auto& leaf : leaves) out.push_back(leaf.grad());
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
};

/// Compares reverse-mode gradients of f at x with central differences.
/// pass iff max_i |g_auto - g_fd| / max(1, |g_fd|) <= tol.
inline GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                                         const Tensor& x, double tol, double h = 1e-4) {
  Tensor leaf(x.shape(), x.data(), true);
  Tensor y = f(leaf);
  if (y.size() != 1) throw ShapeError("finite_diff_check: f must return a scalar");
  if (!std::isfinite(y.item())) throw std::domain_error("finite_diff_check: f(x) is not finite");
  std::vector<double> g_auto(x.size(), 0.0);
  if (y.requires_grad()) {
    backward(y);
    if (leaf.has_grad()) g_auto = leaf.grad();
  }
  GradCheckReport rep;
  NoGradGuard ng;
  std::vector<double> xp = x.data();
  for (std::size_t i = 0; i < xp.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double fp = f(Tensor(x.shape(), xp)).item();
    xp[i] = orig - h;
    const double fm = f(Tensor(x.shape(), xp)).item();
    xp[i] = orig;
    const double g_fd = (fp - fm) / (2.0 * h);
    const double rel = std::abs(g_auto[i] - g_fd) / std::max(1.0, std::abs(g_fd));
    rep.max_rel_err = std::max(rep.max_rel_err, rel);
  }
  rep.pass = std::isfinite(rep.max_rel_err) && rep.max_rel_err <= tol;
  return rep;
}

// ---------------------------------------------------------------------------
// Small composites built from the closed set

/// Broadcasts [..., 1] to [..., d] through a product with a ones row.
inline Tensor expand_last(const Tensor& x, std::size_t d) {
  if (x.shape().back() != 1) throw ShapeError("expand_last needs trailing extent 1, got " + shape_str(x.shape()));
  return matmul(x, Tensor::full({1, d}, 1.0));
}

/// Mean over the last dimension, keeping it with extent 1.
inline Tensor mean_last(const Tensor& x) {
  return scale(sum_last(x), 1.0 / static_cast<double>(x.shape().back()));
}

/// Rows rescaled to unit L2 norm: x * exp(-0.5 log(sum x^2)).
inline Tensor normalize_rows(const Tensor& x) {
  const std::size_t d = x.shape().back();
  Tensor sq = sum_last(mul(x, x));
  for (double v : sq.data())
    if (!(v > 0.0)) throw std::domain_error("normalize_rows: zero-norm row");
  Tensor inv = exp(scale(log(sq), -0.5));
  return mul(x, expand_last(inv, d));
}

}  // namespace etk
