#pragma once

// Audio-side models aligned to the vision encoders: the audio-to-lip
// Perceiver projector, contrastive + MSE lip alignment, the CLUB mutual
// information bound between lip and expression latents, and the Di-CTE
// sequence denoiser producing frame-level expression latents.

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "etk/diffusion.hpp"
#include "etk/encoders.hpp"
#include "etk/nn.hpp"
#include "etk/rng.hpp"
#include "etk/synth_world.hpp"
#include "etk/tensor.hpp"

namespace etk {

// ---------------------------------------------------------------------------
// Losses

/// Standard InfoNCE over cosine similarities; row i of l_hat is positive with row i of l.
inline Tensor infonce_loss(const Tensor& l_hat, const Tensor& l, double tau) {
  if (l_hat.rank() != 2 || l_hat.shape() != l.shape())
    throw ShapeError("infonce_loss: " + shape_str(l_hat.shape()) + " vs " + shape_str(l.shape()));
  if (!(tau > 0.0)) throw std::invalid_argument("infonce_loss: tau must be positive");
  const std::size_t n = l.dim(0);
  Tensor s = scale(matmul(normalize_rows(l_hat), transpose(normalize_rows(l))), 1.0 / tau);
  std::vector<double> eye(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
  // log-sum-exp with a constant shift; cosine / tau is bounded by 1 / tau.
  const double shift = 1.0 / tau;
  Tensor lse = add_scalar(log(sum_last(exp(add_scalar(s, -shift)))), shift);
  Tensor pos = sum_last(mul(s, Tensor({n, n}, std::move(eye))));
  return mean(sub(lse, pos));
}

struct LipAlignment {
  Tensor total, contrastive, mse;
};

inline LipAlignment lip_alignment_loss(const Tensor& l_hat, const Tensor& l, double tau, double alpha, double beta) {
  LipAlignment r;
  r.contrastive = infonce_loss(l_hat, l, tau);
  Tensor d = sub(l_hat, l);
  r.mse = scale(sum(mul(d, d)), 1.0 / static_cast<double>(l.dim(0)));
  r.total = add(scale(r.contrastive, alpha), scale(r.mse, beta));
  return r;
}

// ---------------------------------------------------------------------------
// Audio-to-lip projector

struct ProjectorDims {
  std::size_t window = 8, d_audio = 16, d_lip = 8;
  std::size_t d_model = 32, heads = 2, blocks = 4;
};

struct PerceiverBlock {
  LayerNorm ln_q, ln_kv, ln_ff;
  MultiHeadAttention attn;
  Mlp ff;

  PerceiverBlock() = default;
  PerceiverBlock(std::size_t d, std::size_t heads, Rng& rng)
      : ln_q(d), ln_kv(d), ln_ff(d), attn(d, d, d, heads, rng), ff(d, 2 * d, d, rng, 0.5) {}

  /// q: [n, 1, d]; x: [n, w, d]. Keys/values are concat(q, x) along tokens.
  Tensor operator()(const Tensor& q, const Tensor& x) const {
    Tensor kv = concat({q, x}, 1);
    Tensor h = add(q, attn(ln_q(q), ln_kv(kv)));
    return add(h, ff(ln_ff(h)));
  }

  void collect(ParamList& out, const std::string& p) const {
    ln_q.collect(out, p + ".ln_q");
    ln_kv.collect(out, p + ".ln_kv");
    ln_ff.collect(out, p + ".ln_ff");
    attn.collect(out, p + ".attn");
    ff.collect(out, p + ".ff");
  }
};

class AudioLipProjector {
 public:
  AudioLipProjector() = default;
  AudioLipProjector(const ProjectorDims& d, Rng& rng) : dims_(d) {
    embed = Linear(d.d_audio, d.d_model, rng);
    pos = param_normal({d.window, d.d_model}, 0.1, rng);
    proj = Linear(d.d_model, d.d_model, rng);
    query = param_normal({1, d.d_model}, 1.0, rng);
    for (std::size_t i = 0; i < d.blocks; ++i) blocks.emplace_back(d.d_model, d.heads, rng);
    out_ln = LayerNorm(d.d_model);
    out = Linear(d.d_model, d.d_lip, rng);
  }

  const ProjectorDims& dims() const { return dims_; }

  /// windows: [n, w, d_audio] -> [n, d_lip]; each window is processed independently.
  Tensor operator()(const Tensor& windows) const {
    if (windows.rank() != 3 || windows.dim(1) != dims_.window || windows.dim(2) != dims_.d_audio)
      throw ShapeError("project_lip: expected [n, " + std::to_string(dims_.window) + ", " +
                       std::to_string(dims_.d_audio) + "], got " + shape_str(windows.shape()));
    const std::size_t n = windows.dim(0);
    Tensor x = proj(tanh(add(embed(windows), pos)));
    Tensor q = reshape(matmul(Tensor::full({n, 1}, 1.0), query), {n, 1, dims_.d_model});
    for (const auto& b : blocks) q = b(q, x);
    return out(out_ln(reshape(q, {n, dims_.d_model})));
  }

  ParamList params() const {
    ParamList pl;
    embed.collect(pl, "embed");
    pl.emplace_back("pos", pos);
    proj.collect(pl, "proj");
    pl.emplace_back("query", query);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(pl, "block" + std::to_string(i));
    out_ln.collect(pl, "out_ln");
    out.collect(pl, "out");
    return pl;
  }

  Linear embed;
  Tensor pos;
  Linear proj;
  Tensor query;
  std::vector<PerceiverBlock> blocks;
  LayerNorm out_ln;
  Linear out;

 private:
  ProjectorDims dims_;
};

inline Tensor project_lip(const AudioLipProjector& p, const Tensor& windows) { return p(windows); }

// ---------------------------------------------------------------------------
// CLUB estimator

class ClubEstimator {
 public:
  ClubEstimator() = default;
  ClubEstimator(std::size_t d_lip, std::size_t d_exp, std::size_t hidden, Rng& rng)
      : mu_net(d_lip, hidden, d_exp, rng), logvar_net(d_lip, hidden, d_exp, rng, 0.1) {}

  Tensor mu(const Tensor& l) const { return mu_net(l); }
  /// Log-variance softly clamped to [-8, 8].
  Tensor logvar(const Tensor& l) const { return scale(tanh(scale(logvar_net(l), 1.0 / 8.0)), 8.0); }

  /// Mean Gaussian log-likelihood of e given l (constant term dropped).
  Tensor loglik(const Tensor& l, const Tensor& e) const {
    check(l, e);
    Tensor m = mu(l), lv = logvar(l);
    Tensor d = sub(e, m);
    Tensor ll = scale(add(mul(mul(d, d), exp(scale(lv, -1.0))), lv), -0.5);
    return scale(sum(ll), 1.0 / static_cast<double>(l.dim(0)));
  }

  /// (1/N) sum_i log q(e_i|l_i) - (1/N^2) sum_{i,j} log q(e_j|l_i).
  Tensor upper_bound(const Tensor& l, const Tensor& e) const {
    check(l, e);
    const std::size_t n = l.dim(0), d = e.dim(1);
    if (n < 2) throw std::invalid_argument("club_upper_bound needs N >= 2");
    Tensor m = mu(l);
    Tensor inv = exp(scale(logvar(l), -1.0));
    Tensor diff = sub(e, m);
    Tensor pos = mul(mul(diff, diff), inv);
    Tensor avg = Tensor::full({1, n}, 1.0 / static_cast<double>(n));
    Tensor m1 = reshape(matmul(avg, e), {d});
    Tensor m2 = reshape(matmul(avg, mul(e, e)), {d});
    // mean_j (e_j - mu_i)^2 = m2 - 2 mu_i m1 + mu_i^2
    Tensor neg = mul(add(sub(mul(m, m), scale(mul(m, m1), 2.0)), m2), inv);
    return scale(sum(sub(neg, pos)), 0.5 / static_cast<double>(n));
  }

  ParamList params() const {
    ParamList pl;
    mu_net.collect(pl, "mu");
    logvar_net.collect(pl, "logvar");
    return pl;
  }

  Mlp mu_net, logvar_net;

 private:
  static void check(const Tensor& l, const Tensor& e) {
    if (l.rank() != 2 || e.rank() != 2 || l.dim(0) != e.dim(0))
      throw ShapeError("club: " + shape_str(l.shape()) + " vs " + shape_str(e.shape()));
  }
};

inline Tensor club_upper_bound(const ClubEstimator& est, const Tensor& l, const Tensor& e) {
  return est.upper_bound(l, e);
}

/// Maximizes the estimator log-likelihood on fixed samples for `steps` updates.
inline void fit_club(const ClubEstimator& est, Adam& opt, const Tensor& l, const Tensor& e, std::size_t steps) {
  Tensor ld = l.detach(), ed = e.detach();
  for (std::size_t k = 0; k < steps; ++k) {
    backward(scale(est.loglik(ld, ed), -1.0));
    opt.step();
  }
}

// ---------------------------------------------------------------------------
// Di-CTE sequence denoiser

struct DiCteDims {
  std::size_t window = 8, d_audio = 16, d_exp = 8, frame = 256;
  std::size_t audio_feat = 16, d_model = 32, heads = 2, step_dim = 16;
  std::size_t train_length = 220;
  std::size_t guide = 20;
  diffusion::NoiseSchedule schedule;  // scales the skip path's noisy-latent input
};

/// Inputs of one sequence for the denoiser.
struct DiCteInput {
  Tensor e_t;       // [L, d_exp] noisy latents
  int t = 0;
  Tensor ctx;       // [L, d_exp] clean context values (zeros where absent)
  Tensor ctx_mask;  // [L, 1] 1 where context is present
  Tensor x_ref;     // [F]
  Tensor windows;   // [L, w, d_audio]
  Tensor e_cond;    // [d_exp]
};

class DiCteDenoiser {
 public:
  DiCteDenoiser() = default;
  DiCteDenoiser(const DiCteDims& d, Rng& rng) : dims_(d) {
    audio = Linear(d.window * d.d_audio, d.audio_feat, rng);
    in = Linear(2 * d.d_exp + 1 + d.audio_feat, d.d_model, rng);
    cond = Linear(d.d_exp, d.d_model, rng);
    ref = Linear(d.frame, d.d_model, rng, 0.5);
    step = Linear(d.step_dim, d.d_model, rng);
    ln_attn = LayerNorm(d.d_model);
    attn = MultiHeadAttention(d.d_model, d.d_model, d.d_model, d.heads, rng);
    ln_ff = LayerNorm(d.d_model);
    ff = Mlp(d.d_model, 2 * d.d_model, d.d_model, rng, 0.5);
    ln_out = LayerNorm(d.d_model);
    out = Linear(d.d_model, d.d_exp, rng);
    skip = Linear(3 * d.d_exp + 1 + d.audio_feat, d.d_exp, rng, 0.1);
  }

  const DiCteDims& dims() const { return dims_; }

  /// Clean-latent prediction [L, d_exp].
  Tensor operator()(const DiCteInput& x) const {
    const std::size_t L = x.e_t.dim(0);
    if (x.e_t.rank() != 2 || x.e_t.dim(1) != dims_.d_exp || x.ctx.shape() != x.e_t.shape() ||
        x.ctx_mask.shape() != Shape{L, 1} || x.windows.shape() != Shape{L, dims_.window, dims_.d_audio} ||
        x.e_cond.size() != dims_.d_exp || x.x_ref.size() != dims_.frame)
      throw ShapeError("dicte: inconsistent input shapes (e_t " + shape_str(x.e_t.shape()) + ", windows " +
                       shape_str(x.windows.shape()) + ")");
    Tensor a = tanh(audio(reshape(x.windows, {L, dims_.window * dims_.d_audio})));
    Tensor feat = concat({x.e_t, x.ctx, x.ctx_mask, a}, 1);
    Tensor g = add(add(cond(reshape(x.e_cond, {1, dims_.d_exp})), ref(reshape(x.x_ref, {1, dims_.frame}))),
                   step(reshape(step_embedding(x.t, dims_.step_dim), {1, dims_.step_dim})));
    Tensor h = tanh(add(in(feat), reshape(g, {dims_.d_model})));
    Tensor hn = ln_attn(h);
    h = add(h, attn(hn, hn));
    h = add(h, ff(ln_ff(h)));
    // The skip path also sees sqrt(ab) e_t, the step-dependent linear guess of x0.
    const double ab = dims_.schedule.alpha_bar(x.t);
    return add(out(ln_out(h)), skip(concat({feat, scale(x.e_t, std::sqrt(ab))}, 1)));
  }

  ParamList params() const {
    ParamList pl;
    audio.collect(pl, "audio");
    in.collect(pl, "in");
    cond.collect(pl, "cond");
    ref.collect(pl, "ref");
    step.collect(pl, "step");
    ln_attn.collect(pl, "ln_attn");
    attn.collect(pl, "attn");
    ln_ff.collect(pl, "ln_ff");
    ff.collect(pl, "ff");
    ln_out.collect(pl, "ln_out");
    out.collect(pl, "out");
    skip.collect(pl, "skip");
    return pl;
  }

  Linear audio, in, cond, ref, step;
  LayerNorm ln_attn;
  MultiHeadAttention attn;
  LayerNorm ln_ff;
  Mlp ff;
  LayerNorm ln_out;
  Linear out, skip;  // skip: per-frame linear path from the input features

 private:
  DiCteDims dims_;
};

// ---------------------------------------------------------------------------
// Training data in encoder space

/// One sequence with vision-encoder targets. Ground-truth world factors are
/// kept for oracle checks only.
struct VaidSample {
  std::size_t emotion = 0;
  Tensor audio;     // [L + w - 1, d_audio]
  Tensor l_v;       // [L, d_lip]
  Tensor e_v;       // [L, d_exp]
  Tensor x_ref;     // [F]
  Tensor lip_true;  // [L, d_lip]
  Tensor energy;    // [L]

  std::size_t length() const { return l_v.dim(0); }
};

/// Windows [len, w, d] for frames [begin, begin + len) of an audio track.
inline Tensor audio_windows(const Tensor& audio, std::size_t begin, std::size_t len, std::size_t w) {
  const std::size_t d = audio.dim(1);
  if (begin + len + w - 1 > audio.dim(0)) throw std::out_of_range("audio_windows: range exceeds the track");
  std::vector<double> v(len * w * d);
  for (std::size_t t = 0; t < len; ++t)
    std::copy_n(audio.data().begin() + static_cast<std::ptrdiff_t>((begin + t) * d), w * d,
                v.begin() + static_cast<std::ptrdiff_t>(t * w * d));
  return Tensor({len, w, d}, std::move(v));
}

inline VaidSample to_vaid_sample(const synth::Sequence& s, const EncoderPair& enc) {
  NoGradGuard ng;
  VaidSample v;
  v.emotion = s.emotion;
  v.audio = s.audio;
  v.l_v = enc.encode_lip(s.frames);
  v.e_v = enc.encode_expr(s.frames);
  v.x_ref = reshape(s.portrait, {s.portrait.size()});
  v.lip_true = s.lip;
  v.energy = s.energy;
  return v;
}

inline std::vector<VaidSample> make_vaid_dataset(const synth::World& world, const EncoderPair& enc, std::size_t n,
                                                 std::size_t len, std::uint64_t seed) {
  std::vector<VaidSample> out;
  out.reserve(n);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    Rng r = rng.fork(i);
    out.push_back(to_vaid_sample(world.random_sequence(len, r), enc));
  }
  return out;
}

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t len) { return slice(x, 0, begin, begin + len); }

/// Picks rows `idx` of x [n, d] through a selection-matrix product (keeps the graph).
inline Tensor select_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
  const std::size_t n = x.dim(0);
  std::vector<double> s(idx.size() * n, 0.0);
  for (std::size_t i = 0; i < idx.size(); ++i) s[i * n + idx[i]] = 1.0;
  return matmul(Tensor({idx.size(), n}, std::move(s)), x);
}

// ---------------------------------------------------------------------------
// Di-CTE training and generation

struct DiCteBatchItem {
  DiCteInput input;
  Tensor target;  // [L, d_exp]
};

/// Builds one noised training item; with probability prefix_ratio the first
/// `guide` frames are supplied as clean context.
inline DiCteBatchItem dicte_training_item(const DiCteDenoiser& d, const VaidSample& s, std::size_t begin,
                                          std::size_t len, const diffusion::NoiseSchedule& sched,
                                          double prefix_ratio, Rng& rng) {
  const auto& dims = d.dims();
  DiCteBatchItem item;
  item.target = slice_rows(s.e_v, begin, len);
  const int t = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(sched.T())));
  Tensor eps({len, dims.d_exp}, rng.normals(len * dims.d_exp));
  auto& in = item.input;
  in.t = t;
  in.e_t = diffusion::forward_marginal(item.target, t, eps, sched);
  std::vector<double> ctx(len * dims.d_exp, 0.0), mask(len, 0.0);
  if (rng.bernoulli(prefix_ratio)) {
    const std::size_t g = std::min(dims.guide, len);
    for (std::size_t i = 0; i < g; ++i) {
      mask[i] = 1.0;
      for (std::size_t j = 0; j < dims.d_exp; ++j) ctx[i * dims.d_exp + j] = item.target.data()[i * dims.d_exp + j];
    }
  }
  in.ctx = Tensor({len, dims.d_exp}, std::move(ctx));
  in.ctx_mask = Tensor({len, 1}, std::move(mask));
  in.x_ref = s.x_ref;
  in.windows = audio_windows(s.audio, begin, len, dims.window);
  in.e_cond = reshape(slice_rows(s.e_v, 0, 1), {dims.d_exp});
  return item;
}

/// Mean denoising loss over a batch of sequences; also returns per-item predictions.
inline Tensor dicte_train_step(const DiCteDenoiser& d, const std::vector<const VaidSample*>& batch,
                               const diffusion::NoiseSchedule& sched, Rng& rng, double prefix_ratio = 0.8,
                               std::vector<Tensor>* predictions = nullptr) {
  if (batch.empty()) throw std::invalid_argument("dicte_train_step: empty batch");
  Tensor total;
  for (const auto* s : batch) {
    const std::size_t len = std::min(s->length(), d.dims().train_length);
    const std::size_t begin = s->length() > len ? rng.below(s->length() - len + 1) : 0;
    auto item = dicte_training_item(d, *s, begin, len, sched, prefix_ratio, rng);
    Tensor pred = d(item.input);
    Tensor l = diffusion::denoising_loss(diffusion::PredKind::x0, item.target, pred);
    total = total.defined() ? add(total, l) : l;
    if (predictions) predictions->push_back(pred);
  }
  return scale(total, 1.0 / static_cast<double>(batch.size()));
}

struct DiCteGeneration {
  Tensor latents;                   // [length, d_exp]
  std::vector<double> splice_rms;   // one entry per continuation chunk
};

/// DDIM sampling of one chunk. `guide` (may be undefined) supplies clean
/// context for the first rows; those rows of the initial noise are replaced by
/// forward-diffused copies of the guide at the starting step.
inline Tensor dicte_sample_chunk(const DiCteDenoiser& d, const Tensor& x_ref, const Tensor& windows,
                                 const Tensor& e_cond, const Tensor& guide, const diffusion::NoiseSchedule& sched,
                                 int steps, Rng& rng) {
  NoGradGuard ng;
  const auto& dims = d.dims();
  const std::size_t L = windows.dim(0), de = dims.d_exp;
  const auto ts = diffusion::ddim_timesteps(sched.T(), steps);
  std::vector<double> x = rng.normals(L * de);
  std::vector<double> ctx(L * de, 0.0), mask(L, 0.0);
  if (guide.defined()) {
    const std::size_t g = guide.dim(0);
    Tensor eps({g, de}, rng.normals(g * de));
    Tensor noised = diffusion::forward_marginal(guide, ts[0], eps, sched);
    for (std::size_t i = 0; i < g * de; ++i) {
      x[i] = noised.data()[i];
      ctx[i] = guide.data()[i];
    }
    for (std::size_t i = 0; i < g; ++i) mask[i] = 1.0;
  }
  DiCteInput in;
  in.ctx = Tensor({L, de}, std::move(ctx));
  in.ctx_mask = Tensor({L, 1}, std::move(mask));
  in.x_ref = x_ref;
  in.windows = windows;
  in.e_cond = e_cond;
  Tensor state({L, de}, std::move(x));
  for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
    in.e_t = state;
    in.t = ts[i];
    state = diffusion::ddim_step(state, d(in), ts[i], ts[i + 1], 0.0, sched);
  }
  return state;
}

/// Expression latents for `length` frames. audio: [length + w - 1, d_audio].
inline DiCteGeneration dicte_generate(const DiCteDenoiser& d, const Tensor& x_ref, const Tensor& audio,
                                      const Tensor& e_cond, std::size_t length, const diffusion::NoiseSchedule& sched,
                                      int steps, std::uint64_t seed) {
  if (length == 0) throw std::invalid_argument("dicte_generate: length must be >= 1");
  const auto& dims = d.dims();
  const std::size_t de = dims.d_exp, chunk = dims.train_length, g = dims.guide;
  if (audio.dim(0) < length + dims.window - 1) throw std::invalid_argument("dicte_generate: audio shorter than length");
  Rng rng(seed);
  DiCteGeneration out;
  std::vector<double> all;
  all.reserve(length * de);
  std::size_t done = 0;
  while (done < length) {
    const std::size_t n_new = std::min(chunk, length - done);
    if (done == 0) {
      Tensor y = dicte_sample_chunk(d, x_ref, audio_windows(audio, 0, n_new, dims.window), e_cond, {}, sched, steps, rng);
      all.insert(all.end(), y.data().begin(), y.data().end());
    } else {
      const std::size_t gl = std::min(g, done);
      std::vector<double> gv(all.end() - static_cast<std::ptrdiff_t>(gl * de), all.end());
      Tensor guide({gl, de}, gv);
      Tensor y = dicte_sample_chunk(d, x_ref, audio_windows(audio, done - gl, gl + n_new, dims.window), e_cond,
                                    guide, sched, steps, rng);
      double s = 0.0;
      for (std::size_t i = 0; i < gl * de; ++i) s += std::pow(y.data()[i] - gv[i], 2);
      out.splice_rms.push_back(std::sqrt(s / static_cast<double>(gl * de)));
      all.insert(all.end(), y.data().begin() + static_cast<std::ptrdiff_t>(gl * de), y.data().end());
    }
    done += n_new;
  }
  out.latents = Tensor({length, de}, std::move(all));
  return out;
}

/// Di-CTE alone on ground-truth expression latents; returns per-step losses.
inline std::vector<double> train_dicte(DiCteDenoiser& d, const std::vector<VaidSample>& data,
                                       const diffusion::NoiseSchedule& sched, std::size_t steps,
                                       std::size_t seq_batch = 2, double lr = 3e-3, std::uint64_t seed = 13) {
  if (data.empty()) throw std::invalid_argument("train_dicte: empty dataset");
  Rng rng(seed);
  Adam opt(d.params(), {.lr = lr, .grad_clip = 5.0});
  std::vector<double> log;
  log.reserve(steps);
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<const VaidSample*> batch;
    for (std::size_t i = 0; i < seq_batch; ++i) batch.push_back(&data[rng.below(data.size())]);
    Tensor loss = dicte_train_step(d, batch, sched, rng);
    backward(loss);
    opt.step();
    log.push_back(loss.item());
  }
  return log;
}

// ---------------------------------------------------------------------------
// Joint training

struct VaidWeights {
  double tau = 0.07, alpha = 1.0, beta = 1.0;
  double club = 1.0;
};

struct JointTrainOptions {
  std::size_t steps = 1500;
  std::size_t seq_batch = 2;     // sequences per Di-CTE step
  std::size_t lip_batch = 220;   // frames per lip-alignment step, also the CLUB batch
  double lr = 1e-3;        // projector
  double dicte_lr = 3e-3;
  double club_lr = 3e-3;
  std::size_t club_inner = 5;
  std::size_t club_warmup = 200;
  double prefix_ratio = 0.8;
  std::uint64_t seed = 11;
  VaidWeights weights;
  std::function<void(std::size_t)> on_step;  // called after each update
};

struct JointLogRecord {
  std::size_t step;
  double lip_total, lip_contrastive, lip_mse, expr, club, total;
};

struct VaidModels {
  AudioLipProjector projector;
  DiCteDenoiser dicte;
  ClubEstimator club;
};

struct VaidDims {
  ProjectorDims projector;
  DiCteDims dicte;
  std::size_t club_hidden = 32;
};

inline VaidDims vaid_dims_for(const synth::WorldParams& p) {
  VaidDims d;
  d.projector.window = p.window;
  d.projector.d_audio = p.d_audio;
  d.projector.d_lip = p.d_lip;
  d.dicte.window = p.window;
  d.dicte.d_audio = p.d_audio;
  d.dicte.d_exp = p.d_exp;
  d.dicte.frame = p.frame_size();
  return d;
}

inline VaidModels make_vaid_models(const VaidDims& d, std::uint64_t seed) {
  Rng rng(seed);
  Rng r1 = rng.fork(1), r2 = rng.fork(2), r3 = rng.fork(3);
  return {AudioLipProjector(d.projector, r1), DiCteDenoiser(d.dicte, r2),
          ClubEstimator(d.projector.d_lip, d.dicte.d_exp, d.club_hidden, r3)};
}

/// Joint optimization of lip alignment, Di-CTE denoising and the CLUB
/// penalty. Each step: forward both models, fit the CLUB estimator on the
/// detached (l_a, e_a) pairs, read the bound, and update the main models.
inline std::vector<JointLogRecord> joint_train(VaidModels& m, const std::vector<VaidSample>& data,
                                               const diffusion::NoiseSchedule& sched, const JointTrainOptions& opt) {
  if (data.empty()) throw std::invalid_argument("joint_train: empty dataset");
  Rng rng(opt.seed);
  Adam proj_opt(m.projector.params(), {.lr = opt.lr, .grad_clip = 5.0});
  Adam dicte_opt(m.dicte.params(), {.lr = opt.dicte_lr, .grad_clip = 5.0});
  const ParamList club_params = m.club.params();
  Adam club_opt(club_params, {.lr = opt.club_lr, .grad_clip = 5.0});
  const std::size_t w = m.projector.dims().window;

  struct Forward {
    LipAlignment lip;
    Tensor expr_loss, l_a, e_a;
  };
  auto forward = [&](Rng& r) {
    std::vector<const VaidSample*> batch;
    for (std::size_t i = 0; i < opt.seq_batch; ++i) batch.push_back(&data[r.below(data.size())]);
    std::vector<Tensor> preds;
    Forward f;
    f.expr_loss = dicte_train_step(m.dicte, batch, sched, r, opt.prefix_ratio, &preds);
    // Lip frames come from the same sequences so that (l_a, e_a) pair up per
    // frame; predictions cover whole sequences (length <= train_length).
    std::vector<double> win, lv;
    std::vector<std::size_t> rows, offsets(batch.size(), 0);
    for (std::size_t b = 1; b < batch.size(); ++b) offsets[b] = offsets[b - 1] + preds[b - 1].dim(0);
    const std::size_t dl = batch[0]->l_v.dim(1);
    for (std::size_t k = 0; k < opt.lip_batch; ++k) {
      const std::size_t b = k % batch.size();
      const auto* s = batch[b];
      const std::size_t t = r.below(preds[b].dim(0));
      auto wt = audio_windows(s->audio, t, 1, w);
      win.insert(win.end(), wt.data().begin(), wt.data().end());
      lv.insert(lv.end(), s->l_v.data().begin() + static_cast<std::ptrdiff_t>(t * dl),
                s->l_v.data().begin() + static_cast<std::ptrdiff_t>((t + 1) * dl));
      rows.push_back(offsets[b] + t);
    }
    const std::size_t n = opt.lip_batch;
    f.l_a = m.projector(Tensor({n, w, batch[0]->audio.dim(1)}, std::move(win)));
    f.lip = lip_alignment_loss(f.l_a, Tensor({n, dl}, std::move(lv)), opt.weights.tau, opt.weights.alpha,
                               opt.weights.beta);
    f.e_a = select_rows(concat(preds, 0), rows);
    return f;
  };

  for (const auto& s : data)
    if (s.length() > m.dicte.dims().train_length)
      throw std::invalid_argument("joint_train: sequences must not exceed the Di-CTE training length");

  // Warm-up fit of the estimator on the initial models.
  {
    Rng wr = rng.fork(99);
    for (std::size_t k = 0; k < opt.club_warmup; ++k) {
      Forward f;
      {
        NoGradGuard ng;
        f = forward(wr);
      }
      fit_club(m.club, club_opt, f.l_a, f.e_a, 1);
    }
  }

  std::vector<JointLogRecord> log;
  log.reserve(opt.steps);
  for (std::size_t step = 0; step < opt.steps; ++step) {
    Forward f = forward(rng);
    fit_club(m.club, club_opt, f.l_a, f.e_a, opt.club_inner);
    set_trainable(club_params, false);
    Tensor bound = m.club.upper_bound(f.l_a, f.e_a);
    set_trainable(club_params, true);
    Tensor total = add(add(f.lip.total, f.expr_loss), scale(bound, opt.weights.club));
    backward(total);
    proj_opt.step();
    dicte_opt.step();
    log.push_back({step, f.lip.total.item(), f.lip.contrastive.item(), f.lip.mse.item(), f.expr_loss.item(),
                   bound.item(), total.item()});
    if (opt.on_step) opt.on_step(step);
  }
  return log;
}

}  // namespace etk
