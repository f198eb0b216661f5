#pragma once

// Layers, parameter registry and the Adam optimizer shared by all models.

#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "etk/rng.hpp"
#include "etk/tensor.hpp"

namespace etk {

/// Named, ordered parameter list. Order defines checkpoint layout.
using ParamList = std::vector<std::pair<std::string, Tensor>>;

inline Tensor param_normal(Shape s, double sigma, Rng& rng) {
  const auto n = numel(s);
  return Tensor(std::move(s), rng.normals(n, sigma), true);
}

inline Tensor param_zeros(Shape s) { return Tensor::zeros(std::move(s), true); }

inline Tensor param_full(Shape s, double v) {
  Tensor t = Tensor::full(std::move(s), v);
  t.set_requires_grad(true);
  return t;
}

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0)
      : weight(param_normal({in, out}, gain / std::sqrt(static_cast<double>(in)), rng)),
        bias(param_zeros({out})) {}

  static Linear zero(std::size_t in, std::size_t out) {
    Linear l;
    l.weight = param_zeros({in, out});
    l.bias = param_zeros({out});
    return l;
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

/// Elementwise affine after layer normalization.
struct LayerNorm {
  Tensor gain;
  Tensor shift;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d) : gain(param_full({d}, 1.0)), shift(param_zeros({d})) {}

  Tensor operator()(const Tensor& x) const { return add(mul(layer_norm_last(x), gain), shift); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".gain", gain);
    out.emplace_back(prefix + ".shift", shift);
  }
};

/// Scaled dot-product attention. q: [B,nq,d]; k,v: [B,nk,d] or shared [nk,d].
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.shape().back()));
  Tensor scores = scale(matmul(q, transpose(k)), inv);
  return matmul(softmax_last(scores), v);
}

/// Multi-head attention with separate query and key/value sources.
struct MultiHeadAttention {
  Linear to_q, to_k, to_v, to_out;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t d_query, std::size_t d_kv, std::size_t d_model, std::size_t n_heads,
                     Rng& rng, bool zero_value = false)
      : to_q(d_query, d_model, rng),
        to_k(d_kv, d_model, rng),
        to_v(zero_value ? Linear::zero(d_kv, d_model) : Linear(d_kv, d_model, rng)),
        to_out(d_model, d_query, rng),
        heads(n_heads) {
    if (d_model % n_heads != 0) throw std::invalid_argument("d_model must be divisible by heads");
  }

  Tensor operator()(const Tensor& query, const Tensor& context) const {
    Tensor q = to_q(query), k = to_k(context), v = to_v(context);
    if (heads == 1) return to_out(attention(q, k, v));
    const std::size_t d = q.shape().back(), dh = d / heads;
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t lo = h * dh, hi = lo + dh;
      outs.push_back(attention(slice(q, q.rank() - 1, lo, hi), slice(k, k.rank() - 1, lo, hi),
                               slice(v, v.rank() - 1, lo, hi)));
    }
    return to_out(concat(outs, q.rank() - 1));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    to_q.collect(out, prefix + ".q");
    to_k.collect(out, prefix + ".k");
    to_v.collect(out, prefix + ".v");
    to_out.collect(out, prefix + ".out");
  }
};

/// Two-layer tanh perceptron.
struct Mlp {
  Linear fc1, fc2;

  Mlp() = default;
  Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, double out_gain = 1.0)
      : fc1(in, hidden, rng), fc2(hidden, out, rng, out_gain) {}

  Tensor operator()(const Tensor& x) const { return fc2(tanh(fc1(x))); }

  void collect(ParamList& out, const std::string& prefix) const {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }
};

/// Sinusoidal embedding of a diffusion step, [dim] values.
inline Tensor step_embedding(int t, std::size_t dim, double max_period = 1000.0) {
  std::vector<double> v(dim);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(max_period) * static_cast<double>(i) / static_cast<double>(half));
    v[i] = std::sin(t * freq);
    v[half + i] = std::cos(t * freq);
  }
  return Tensor({dim}, std::move(v));
}

/// Mean squared error over all elements.
inline Tensor mse(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("mse: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  Tensor d = sub(pred, target);
  return mean(mul(d, d));
}

class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 0.0;  // global L2 clip, 0 disables
  };

  Adam(std::vector<Tensor> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }
  Adam(const ParamList& params, Options opt) : Adam(tensors_of(params), opt) {}

  static std::vector<Tensor> tensors_of(const ParamList& pl) {
    std::vector<Tensor> out;
    for (auto& [_, t] : pl) out.push_back(t);
    return out;
  }

  void set_lr(double lr) { opt_.lr = lr; }
  double lr() const { return opt_.lr; }

  /// Applies one update using the current grad fields. Returns false if any
  /// gradient was non-finite (no update applied then).
  bool step() {
    double norm2 = 0.0;
    for (auto& p : params_) {
      if (!p.has_grad()) continue;
      for (double g : p.grad()) norm2 += g * g;
    }
    if (!std::isfinite(norm2)) {
      zero_grad();
      return false;
    }
    double factor = 1.0;
    if (opt_.grad_clip > 0.0 && norm2 > opt_.grad_clip * opt_.grad_clip)
      factor = opt_.grad_clip / std::sqrt(norm2);
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      auto& d = p.mutable_data();
      const auto& g = p.grad();
      for (std::size_t i = 0; i < d.size(); ++i) {
        const double gi = g[i] * factor;
        m_[k][i] = opt_.beta1 * m_[k][i] + (1.0 - opt_.beta1) * gi;
        v_[k][i] = opt_.beta2 * v_[k][i] + (1.0 - opt_.beta2) * gi * gi;
        d[i] -= opt_.lr * (m_[k][i] / bc1) / (std::sqrt(v_[k][i] / bc2) + opt_.eps);
      }
    }
    zero_grad();
    return true;
  }

  /// Clears grads so parameters untouched by the next loss are not updated.
  void zero_grad() {
    for (auto& p : params_) p.node()->grad.clear();
  }

 private:
  std::vector<Tensor> params_;
  Options opt_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

inline void set_trainable(const ParamList& pl, bool trainable) {
  for (auto [_, t] : pl) t.set_requires_grad(trainable);
}

}  // namespace etk
