#pragma once

// Lip / expression encoders and the reconstruction renderer, pretrained by
// self-driven reconstruction with conditional latent dropout.
//
// Each encoder reads the frame through a region adapter: the lip adapter sees
// the frame under the lip mask, the expression adapter sees it under the
// face-minus-lip gate. The renderer maps (x_ref, l, e) back to a frame as
// gain * x_ref + bias + mlp([l; e]).

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "etk/masks.hpp"
#include "etk/nn.hpp"
#include "etk/rng.hpp"
#include "etk/synth_world.hpp"
#include "etk/tensor.hpp"

namespace etk {

enum class DropConfig { drop_lip, drop_expr, both };

inline const char* to_string(DropConfig c) {
  switch (c) {
    case DropConfig::drop_lip: return "drop_lip";
    case DropConfig::drop_expr: return "drop_expr";
    case DropConfig::both: return "both";
  }
  return "?";
}

struct EncoderDims {
  std::size_t h = 8, w = 8, c = 4;
  std::size_t d_lip = 8, d_exp = 8;
  std::size_t adapter = 32;
  std::size_t hidden = 64;
  std::size_t render_hidden = 128;

  std::size_t frame() const { return h * w * c; }
};

/// Masked mean squared error; the mean runs over active entries only.
inline Tensor masked_mse(const Tensor& pred, const Tensor& target, const Tensor& mask_row) {
  if (pred.shape() != target.shape())
    throw ShapeError("masked_mse: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  double active = 0.0;
  for (double v : mask_row.data()) active += v;
  if (active <= 0.0) throw std::invalid_argument("masked_mse: empty mask");
  Tensor d = mul(sub(pred, target), mask_row);
  const double rows = static_cast<double>(pred.size() / mask_row.size());
  return scale(sum(mul(d, d)), 1.0 / (active * rows));
}

class EncoderPair {
 public:
  EncoderPair() = default;
  EncoderPair(const EncoderDims& dims, const RegionMasks& masks, Rng& rng) : dims_(dims) {
    if (masks.h != dims.h || masks.w != dims.w) throw ShapeError("encoder masks do not match frame grid");
    const std::size_t F = dims.frame();
    lip_mask_ = reshape(RegionMasks::expand(masks.lip, dims.c), {F});
    gate_mask_ = reshape(RegionMasks::expand(masks.expression_gate(), dims.c), {F});
    lip_adapter = Linear(F, dims.adapter, rng);
    lip_net = Mlp(dims.adapter, dims.hidden, dims.d_lip, rng);
    expr_adapter = Linear(F, dims.adapter, rng);
    expr_net = Mlp(dims.adapter, dims.hidden, dims.d_exp, rng);
    ref_gain = param_full({F}, 1.0);
    ref_bias = param_zeros({F});
    render_net = Mlp(dims.d_lip + dims.d_exp, dims.render_hidden, F, rng, 0.1);
    null_lip = param_normal({dims.d_lip}, 1.0, rng);
    null_exp = param_normal({dims.d_exp}, 1.0, rng);
  }

  const EncoderDims& dims() const { return dims_; }
  const Tensor& lip_mask() const { return lip_mask_; }
  const Tensor& gate_mask() const { return gate_mask_; }

  /// frames: [N, F] or [N, h, w, c].
  Tensor encode_lip(const Tensor& frames) const { return lip_net(lip_adapter(mul(flat(frames), lip_mask_))); }
  Tensor encode_expr(const Tensor& frames) const { return expr_net(expr_adapter(mul(flat(frames), gate_mask_))); }

  std::pair<Tensor, Tensor> encode(const Tensor& frames) const { return {encode_lip(frames), encode_expr(frames)}; }

  /// x_ref: [N, F] (or [F], broadcast over N); l: [N, d_lip]; e: [N, d_exp].
  Tensor render(const Tensor& x_ref, const Tensor& l, const Tensor& e) const {
    if (l.rank() != 2 || e.rank() != 2 || l.dim(0) != e.dim(0) || l.dim(1) != dims_.d_lip || e.dim(1) != dims_.d_exp)
      throw ShapeError("render: latents " + shape_str(l.shape()) + ", " + shape_str(e.shape()));
    Tensor ref = x_ref.rank() == 1 ? x_ref : flat(x_ref);
    if (ref.shape().back() != dims_.frame()) throw ShapeError("render: x_ref " + shape_str(x_ref.shape()));
    Tensor base = add(mul(ref, ref_gain), ref_bias);
    Tensor delta = render_net(concat({l, e}, 1));
    return ref.rank() == 1 ? add(delta, base) : add(base, delta);
  }

  /// Replaces rows of a latent by the learned null embedding.
  static Tensor null_rows(const Tensor& null, std::size_t n) {
    return expand_rows(null, n);
  }

  /// Reconstruction loss for one dropout configuration; target and pred are [N, F].
  Tensor config_loss(const Tensor& pred, const Tensor& target, DropConfig config) const {
    switch (config) {
      case DropConfig::drop_expr: return masked_mse(pred, target, lip_mask_);
      case DropConfig::drop_lip: return masked_mse(pred, target, gate_mask_);
      case DropConfig::both: return mse(pred, target);
    }
    throw std::invalid_argument("unknown dropout configuration");
  }

  /// Forward pass of one self-driven reconstruction step; returns the loss graph.
  Tensor dropout_pretrain_step(const Tensor& driving, const Tensor& reference, DropConfig config) const {
    Tensor drv = flat(driving), ref = flat(reference);
    const std::size_t n = drv.dim(0);
    Tensor l = config == DropConfig::drop_lip ? null_rows(null_lip, n) : encode_lip(drv);
    Tensor e = config == DropConfig::drop_expr ? null_rows(null_exp, n) : encode_expr(drv);
    return config_loss(render(ref, l, e), drv, config);
  }

  ParamList params() const {
    ParamList pl;
    lip_adapter.collect(pl, "lip_adapter");
    lip_net.collect(pl, "lip_net");
    expr_adapter.collect(pl, "expr_adapter");
    expr_net.collect(pl, "expr_net");
    pl.emplace_back("ref_gain", ref_gain);
    pl.emplace_back("ref_bias", ref_bias);
    render_net.collect(pl, "render_net");
    pl.emplace_back("null_lip", null_lip);
    pl.emplace_back("null_exp", null_exp);
    return pl;
  }

  /// Affine re-parameterization making latents zero-mean / unit-variance per
  /// dimension on `frames`, folded into the encoder output layers, the
  /// renderer's first layer and the null embeddings. Encoder outputs change,
  /// renders of re-encoded frames do not.
  void standardize(const Tensor& frames) {
    NoGradGuard ng;
    fold(encode_lip(frames), lip_net.fc2, null_lip, 0);
    fold(encode_expr(frames), expr_net.fc2, null_exp, dims_.d_lip);
  }

  Linear lip_adapter, expr_adapter;
  Mlp lip_net, expr_net;
  Tensor ref_gain, ref_bias;
  Mlp render_net;
  Tensor null_lip, null_exp;

 private:
  Tensor flat(const Tensor& frames) const {
    const std::size_t F = dims_.frame();
    if (frames.size() % F != 0) throw ShapeError("encoder input " + shape_str(frames.shape()) + " is not a frame batch");
    if (frames.rank() == 2 && frames.dim(1) == F) return frames;
    if (frames.rank() == 3 && frames.size() == F) return reshape(frames, {1, F});
    if (frames.rank() == 4 && frames.dim(1) == dims_.h && frames.dim(2) == dims_.w && frames.dim(3) == dims_.c)
      return reshape(frames, {frames.dim(0), F});
    throw ShapeError("encoder input " + shape_str(frames.shape()) + " does not match frame dims");
  }

  static Tensor expand_rows(const Tensor& v, std::size_t n) {
    return matmul(Tensor::full({n, 1}, 1.0), reshape(v, {1, v.size()}));
  }

  void fold(const Tensor& z, Linear& out_layer, Tensor& null, std::size_t offset) {
    const std::size_t n = z.dim(0), d = z.dim(1);
    std::vector<double> mu(d, 0.0), sd(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) mu[j] += z.data()[i * d + j] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double c = z.data()[i * d + j] - mu[j];
        sd[j] += c * c / static_cast<double>(n);
      }
    for (auto& s : sd) s = std::sqrt(s) + 1e-8;
    // encoder: z' = (z - mu) / sd
    auto& W = out_layer.weight.mutable_data();
    auto& b = out_layer.bias.mutable_data();
    const std::size_t in = out_layer.in_features();
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t i = 0; i < in; ++i) W[i * d + j] /= sd[j];
      b[j] = (b[j] - mu[j]) / sd[j];
    }
    auto& nl = null.mutable_data();
    for (std::size_t j = 0; j < d; ++j) nl[j] = (nl[j] - mu[j]) / sd[j];
    // renderer: z = sd * z' + mu feeds fc1 rows [offset, offset + d)
    auto& R = render_net.fc1.weight.mutable_data();
    auto& rb = render_net.fc1.bias.mutable_data();
    const std::size_t hid = render_net.fc1.out_features();
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < hid; ++k) {
        double& r = R[(offset + j) * hid + k];
        rb[k] += mu[j] * r;
        r *= sd[j];
      }
  }

  EncoderDims dims_;
  Tensor lip_mask_, gate_mask_;
};

struct PretrainOptions {
  std::size_t steps = 2000;
  std::size_t batch = 16;
  double lr = 2e-3;
  std::uint64_t seed = 1;
  std::size_t standardize_samples = 1024;
};

struct PretrainRecord {
  std::size_t step;
  DropConfig config;
  double loss;
};

/// Self-driven pairs: driving frame and portrait of the same identity.
inline std::pair<Tensor, Tensor> self_driven_batch(const synth::World& world, std::size_t n, Rng& rng) {
  const std::size_t F = world.params().frame_size();
  std::vector<double> drv, ref;
  drv.reserve(n * F);
  ref.reserve(n * F);
  for (std::size_t i = 0; i < n; ++i) {
    auto s = world.random_sequence(1, rng);
    drv.insert(drv.end(), s.frames.data().begin(), s.frames.data().end());
    ref.insert(ref.end(), s.portrait.data().begin(), s.portrait.data().end());
  }
  return {Tensor({n, F}, std::move(drv)), Tensor({n, F}, std::move(ref))};
}

inline EncoderDims encoder_dims_for(const synth::WorldParams& p) {
  EncoderDims d;
  d.h = p.h;
  d.w = p.w_sp;
  d.c = p.c;
  d.d_lip = p.d_lip;
  d.d_exp = p.d_exp;
  return d;
}

/// Trains the pair with uniformly mixed dropout configurations, then
/// standardizes the latent spaces. Returns the per-step losses.
inline std::vector<PretrainRecord> pretrain_encoders(EncoderPair& pair, const synth::World& world,
                                                     const PretrainOptions& opt) {
  Rng rng(opt.seed);
  Rng data = rng.fork(1);
  Adam adam(pair.params(), {.lr = opt.lr, .grad_clip = 5.0});
  std::vector<PretrainRecord> log;
  log.reserve(opt.steps);
  for (std::size_t step = 0; step < opt.steps; ++step) {
    const auto config = static_cast<DropConfig>(rng.below(3));
    auto [drv, ref] = self_driven_batch(world, opt.batch, data);
    Tensor loss = pair.dropout_pretrain_step(drv, ref, config);
    backward(loss);
    adam.step();
    log.push_back({step, config, loss.item()});
  }
  Rng probe = rng.fork(2);
  auto [frames, _] = self_driven_batch(world, opt.standardize_samples, probe);
  pair.standardize(frames);
  return log;
}

}  // namespace etk
