#pragma once

// Talking-head denoiser over frame latents X [f, h, w, c].
//
// Cells are tokens of width d. Each stage runs
//   spatial self-attention -> lip cross-attention -> EDI ->
//   temporal self-attention -> temporal expression cross-attention -> FFN
// with pre-norm residuals. Expression enters only through the EDI block and the
// temporal cross-attention, both gated by (1 - M_lip) * M_face.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "etk/diffusion.hpp"
#include "etk/masks.hpp"
#include "etk/nn.hpp"
#include "etk/rng.hpp"
#include "etk/tensor.hpp"

namespace etk {

struct EthdDims {
  std::size_t h = 8, w = 8, c = 4;
  std::size_t d_lip = 8, d_exp = 8;
  std::size_t d_model = 16, heads = 2, stages = 2;
  std::size_t step_dim = 16;

  std::size_t cells() const { return h * w; }
  std::size_t frame() const { return h * w * c; }
};

/// Expands a per-frame latent z [f, k] into n tokens [f, n, d], each a
/// separate linear map of z plus a learned position.
struct LatentTokens {
  Linear proj;
  Tensor pos;  // [n, d]

  LatentTokens() = default;
  LatentTokens(std::size_t k, std::size_t n, std::size_t d, Rng& rng)
      : proj(k, n * d, rng), pos(param_normal({n, d}, 1.0, rng)) {}

  std::size_t count() const { return pos.dim(0); }

  Tensor operator()(const Tensor& z) const {
    if (z.rank() != 2 || z.dim(1) != proj.in_features())
      throw ShapeError("latent tokens: expected [f, " + std::to_string(proj.in_features()) + "], got " +
                       shape_str(z.shape()));
    return add(reshape(proj(z), {z.dim(0), pos.dim(0), pos.dim(1)}), pos);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    proj.collect(out, prefix + ".proj");
    out.emplace_back(prefix + ".pos", pos);
  }
};

/// Gate (1 - M_lip) * M_face as a constant [rows..., cells, d] tensor.
inline Tensor cell_gate(const RegionMasks& m, std::size_t d) { return RegionMasks::expand(m.expression_gate(), d); }

/// Subtractive expression injection. H: [f, cells, d]; e_dri: [f, d_exp];
/// e_ref: [d_exp] or [f, d_exp]; gate: [cells, d].
struct EdiBlock {
  LayerNorm ln;
  LatentTokens tokens;
  MultiHeadAttention attn;

  EdiBlock() = default;
  EdiBlock(std::size_t d_exp, std::size_t d, std::size_t heads, Rng& rng)
      : ln(d), tokens(d_exp, d_exp, d, rng), attn(d, d, d, heads, rng, /*zero_value=*/true) {}

  Tensor cross(const Tensor& q, const Tensor& e) const { return attn(q, tokens(e)); }

  Tensor operator()(const Tensor& H, const Tensor& e_dri, const Tensor& e_ref, const Tensor& gate) const {
    const std::size_t f = H.dim(0);
    if (H.rank() != 3 || e_dri.rank() != 2 || e_dri.dim(0) != f || e_dri.dim(1) != tokens.proj.in_features())
      throw ShapeError("edi: H " + shape_str(H.shape()) + ", e_dri " + shape_str(e_dri.shape()));
    Tensor ref = e_ref.rank() == 1 ? matmul(Tensor::full({f, 1}, 1.0), reshape(e_ref, {1, e_ref.size()})) : e_ref;
    if (ref.shape() != e_dri.shape()) throw ShapeError("edi: e_ref " + shape_str(e_ref.shape()));
    Tensor q = ln(H);
    return add(H, mul(sub(cross(q, e_dri), cross(q, ref)), gate));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    ln.collect(out, prefix + ".ln");
    tokens.collect(out, prefix + ".tokens");
    attn.collect(out, prefix + ".attn");
  }
};

/// Each cell's f-sequence cross-attends to the per-frame expression tokens.
/// H: [cells, f, d]; e_dri: [f, d_exp]; gate: [cells, f, d].
struct TemporalExprCross {
  LayerNorm ln;
  Linear embed;
  MultiHeadAttention attn;

  TemporalExprCross() = default;
  TemporalExprCross(std::size_t d_exp, std::size_t d, std::size_t heads, Rng& rng)
      : ln(d), embed(d_exp, d, rng), attn(d, d, d, heads, rng, /*zero_value=*/true) {}

  Tensor operator()(const Tensor& H, const Tensor& e_dri, const Tensor& gate) const {
    if (H.rank() != 3 || e_dri.rank() != 2 || e_dri.dim(0) != H.dim(1) || e_dri.dim(1) != embed.in_features())
      throw ShapeError("temporal cross: H " + shape_str(H.shape()) + ", e_dri " + shape_str(e_dri.shape()));
    return add(H, mul(attn(ln(H), embed(e_dri)), gate));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    ln.collect(out, prefix + ".ln");
    embed.collect(out, prefix + ".embed");
    attn.collect(out, prefix + ".attn");
  }
};

/// Per-frame conditions for one clip.
struct EthdCond {
  Tensor x_ref;  // [F] or [h, w, c]
  Tensor l_a;    // [f, d_lip]
  Tensor e_ref;  // [d_exp]
  Tensor e_dri;  // [f, d_exp]
};

struct EthdStage {
  LayerNorm ln_sp;
  MultiHeadAttention spatial;
  LayerNorm ln_lip;
  LatentTokens lip_tokens;
  MultiHeadAttention lip;
  EdiBlock edi;
  LayerNorm ln_tm;
  MultiHeadAttention temporal;
  TemporalExprCross texpr;
  LayerNorm ln_ff;
  Mlp ff;

  EthdStage() = default;
  EthdStage(const EthdDims& d, Rng& rng)
      : ln_sp(d.d_model),
        spatial(d.d_model, d.d_model, d.d_model, d.heads, rng),
        ln_lip(d.d_model),
        lip_tokens(d.d_lip, d.d_lip, d.d_model, rng),
        lip(d.d_model, d.d_model, d.d_model, d.heads, rng, /*zero_value=*/true),
        edi(d.d_exp, d.d_model, d.heads, rng),
        ln_tm(d.d_model),
        temporal(d.d_model, d.d_model, d.d_model, d.heads, rng),
        texpr(d.d_exp, d.d_model, d.heads, rng),
        ln_ff(d.d_model),
        ff(d.d_model, 2 * d.d_model, d.d_model, rng, 0.5) {}

  /// H: [f, cells, d]; gates [cells, d] and [cells, f, d].
  Tensor operator()(Tensor H, const EthdCond& c, const Tensor& gate_sp, const Tensor& gate_tm) const {
    Tensor n = ln_sp(H);
    H = add(H, spatial(n, n));
    H = add(H, lip(ln_lip(H), lip_tokens(c.l_a)));
    H = edi(H, c.e_dri, c.e_ref, gate_sp);
    Tensor T = transpose(H, 0, 1);  // [cells, f, d]
    Tensor tn = ln_tm(T);
    T = add(T, temporal(tn, tn));
    T = texpr(T, c.e_dri, gate_tm);
    H = transpose(T, 0, 1);
    return add(H, ff(ln_ff(H)));
  }

  void collect(ParamList& out, const std::string& p) const {
    ln_sp.collect(out, p + ".ln_sp");
    spatial.collect(out, p + ".spatial");
    ln_lip.collect(out, p + ".ln_lip");
    lip_tokens.collect(out, p + ".lip_tokens");
    lip.collect(out, p + ".lip");
    edi.collect(out, p + ".edi");
    ln_tm.collect(out, p + ".ln_tm");
    temporal.collect(out, p + ".temporal");
    texpr.collect(out, p + ".texpr");
    ln_ff.collect(out, p + ".ln_ff");
    ff.collect(out, p + ".ff");
  }
};

class EthdBackbone {
 public:
  EthdBackbone() = default;
  EthdBackbone(const EthdDims& d, const RegionMasks& masks, Rng& rng) : dims_(d), masks_(masks) {
    if (masks.h != d.h || masks.w != d.w) throw ShapeError("ethd: masks do not match the latent grid");
    in = Linear(2 * d.c, d.d_model, rng);
    cell_pos = param_normal({d.cells(), d.d_model}, 0.5, rng);
    step = Linear(d.step_dim, d.d_model, rng);
    for (std::size_t s = 0; s < d.stages; ++s) stages.emplace_back(d, rng);
    ln_out = LayerNorm(d.d_model);
    out = Linear(d.d_model, d.c, rng, 0.5);
    skip = Linear(2 * d.c, d.c, rng, 0.5);
    gate_sp_ = cell_gate(masks, d.d_model);
  }

  const EthdDims& dims() const { return dims_; }
  const RegionMasks& masks() const { return masks_; }

  /// Clean-frame prediction for X_t [f, h, w, c].
  Tensor operator()(const Tensor& x_t, int t, const EthdCond& c) const {
    const auto& d = dims_;
    if (x_t.rank() != 4 || x_t.dim(1) != d.h || x_t.dim(2) != d.w || x_t.dim(3) != d.c)
      throw ShapeError("ethd: X_t " + shape_str(x_t.shape()));
    const std::size_t f = x_t.dim(0), cells = d.cells();
    if (c.x_ref.size() != d.frame()) throw ShapeError("ethd: x_ref " + shape_str(c.x_ref.shape()));
    if (c.l_a.shape() != Shape{f, d.d_lip} || c.e_dri.shape() != Shape{f, d.d_exp} || c.e_ref.size() != d.d_exp)
      throw ShapeError("ethd: conditions do not match f=" + std::to_string(f) + " (l_a " + shape_str(c.l_a.shape()) +
                       ", e_dri " + shape_str(c.e_dri.shape()) + ")");
    std::vector<double> ref(f * d.frame());
    for (std::size_t i = 0; i < f; ++i)
      std::copy(c.x_ref.data().begin(), c.x_ref.data().end(), ref.begin() + static_cast<std::ptrdiff_t>(i * d.frame()));
    Tensor feat = concat({reshape(x_t, {f, cells, d.c}), Tensor({f, cells, d.c}, std::move(ref))}, 2);
    Tensor temb = reshape(step(reshape(step_embedding(t, d.step_dim), {1, d.step_dim})), {d.d_model});
    Tensor H = add(add(in(feat), cell_pos), temb);
    EthdCond cc = c;
    cc.e_ref = reshape(c.e_ref, {d.d_exp});
    const Tensor gate_tm = temporal_gate(f);
    for (const auto& s : stages) H = s(H, cc, gate_sp_, gate_tm);
    Tensor y = add(out(ln_out(H)), skip(feat));
    return reshape(y, {f, d.h, d.w, d.c});
  }

  ParamList params() const {
    ParamList pl;
    in.collect(pl, "in");
    pl.emplace_back("cell_pos", cell_pos);
    step.collect(pl, "step");
    for (std::size_t s = 0; s < stages.size(); ++s) stages[s].collect(pl, "stage" + std::to_string(s));
    ln_out.collect(pl, "ln_out");
    out.collect(pl, "out");
    skip.collect(pl, "skip");
    return pl;
  }

  /// Gate laid out as [cells, f, d] for the temporal blocks.
  Tensor temporal_gate(std::size_t f) const {
    const auto g = masks_.expression_gate();
    const std::size_t d = dims_.d_model;
    std::vector<double> v(g.size() * f * d);
    for (std::size_t i = 0; i < g.size(); ++i) std::fill_n(v.begin() + static_cast<std::ptrdiff_t>(i * f * d), f * d, g[i]);
    return Tensor({g.size(), f, d}, std::move(v));
  }

  Linear in;
  Tensor cell_pos;
  Linear step;
  std::vector<EthdStage> stages;
  LayerNorm ln_out;
  Linear out, skip;

 private:
  EthdDims dims_;
  RegionMasks masks_;
  Tensor gate_sp_;
};

// ---------------------------------------------------------------------------
// Training

/// One training sequence with frozen V-AID outputs precomputed.
struct EthdSample {
  std::size_t emotion = 0;
  Tensor frames;  // [L, h, w, c]
  Tensor x_ref;   // [F]
  Tensor e_ref;   // [d_exp], expression encoding of x_ref
  Tensor l_a;     // [L, d_lip], audio-lip projection
  Tensor e_v;     // [L, d_exp], expression encoding of the frames
  Tensor e_a;     // [L, d_exp], Di-CTE output from audio

  std::size_t length() const { return frames.dim(0); }
};

struct EthdTrainOptions {
  std::size_t steps = 3000;
  std::size_t clip = 8;
  std::size_t batch = 1;
  double lr = 5e-3;
  double p_gt = 0.6;
  std::uint64_t seed = 17;
};

inline Tensor clip_rows(const Tensor& x, std::size_t begin, std::size_t len) { return slice(x, 0, begin, begin + len); }

/// e_dri for one training clip: the video encoding with probability p_gt,
/// otherwise the audio-derived Di-CTE latents.
inline bool draw_ground_truth_expression(Rng& rng, double p_gt) { return rng.bernoulli(p_gt); }

/// Mean x0 loss over `batch` random clips. Conditions are frozen inputs.
/// Model: any callable (X_t, t, EthdCond) -> x0 prediction.
template <class Model>
Tensor ethd_train_step(const Model& model, const std::vector<EthdSample>& data,
                              const diffusion::NoiseSchedule& sched, const EthdTrainOptions& opt, Rng& rng) {
  if (data.empty()) throw std::invalid_argument("ethd_train_step: empty batch");
  Tensor total;
  for (std::size_t b = 0; b < opt.batch; ++b) {
    const auto& s = data[rng.below(data.size())];
    const std::size_t f = std::min(opt.clip, s.length());
    const std::size_t begin = rng.below(s.length() - f + 1);
    const bool gt = draw_ground_truth_expression(rng, opt.p_gt);
    EthdCond c{s.x_ref, clip_rows(s.l_a, begin, f), s.e_ref, clip_rows(gt ? s.e_v : s.e_a, begin, f)};
    Tensor x0 = clip_rows(s.frames, begin, f);
    const int t = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(sched.T())));
    Tensor eps(x0.shape(), rng.normals(x0.size()));
    Tensor loss = mse(model(diffusion::forward_marginal(x0, t, eps, sched), t, c), x0);
    total = total.defined() ? add(total, loss) : loss;
  }
  return scale(total, 1.0 / static_cast<double>(opt.batch));
}

inline std::vector<double> train_ethd(EthdBackbone& model, const std::vector<EthdSample>& data,
                                      const diffusion::NoiseSchedule& sched, const EthdTrainOptions& opt) {
  Rng rng(opt.seed);
  Adam adam(model.params(), {.lr = opt.lr, .grad_clip = 5.0});
  std::vector<double> log;
  log.reserve(opt.steps);
  for (std::size_t step = 0; step < opt.steps; ++step) {
    Tensor loss = ethd_train_step(model, data, sched, opt, rng);
    backward(loss);
    adam.step();
    log.push_back(loss.item());
  }
  return log;
}

/// DDIM sampling of one clip with fixed conditions.
inline Tensor ethd_sample(const EthdBackbone& model, const EthdCond& c, const diffusion::NoiseSchedule& sched,
                          int steps, std::uint64_t seed) {
  const auto& d = model.dims();
  return diffusion::sample([&](const Tensor& x, int t) { return model(x, t, c); }, sched,
                           {c.l_a.dim(0), d.h, d.w, d.c}, seed, {.steps = steps});
}

}  // namespace etk
