#pragma once

// Noise schedules, forward marginals, DDIM reverse steps and denoising losses.
//
// Step indexing: t = 0 is clean data (alpha_bar[0] = 1), t = T is the most
// noisy step. The canonical network output is a clean-signal (x0) prediction;
// epsilon predictions are reached through convert_pred().

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "etk/nn.hpp"
#include "etk/rng.hpp"
#include "etk/tensor.hpp"

namespace etk::diffusion {

class NoiseSchedule {
 public:
  NoiseSchedule() : NoiseSchedule(1000, 1e-4, 0.02) {}

  /// Linear beta schedule over T steps.
  NoiseSchedule(int T, double beta_start, double beta_end) : T_(T) {
    if (T < 1) throw std::invalid_argument("schedule needs T >= 1");
    if (!(beta_start > 0.0) || beta_start > beta_end || !(beta_end < 1.0))
      throw std::invalid_argument("schedule needs 0 < beta_start <= beta_end < 1");
    beta_.assign(T + 1, 0.0);
    alpha_.assign(T + 1, 1.0);
    alpha_bar_.assign(T + 1, 1.0);
    for (int t = 1; t <= T; ++t) {
      const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
      beta_[t] = beta_start + (beta_end - beta_start) * frac;
      alpha_[t] = 1.0 - beta_[t];
      alpha_bar_[t] = alpha_bar_[t - 1] * alpha_[t];
    }
  }

  int T() const { return T_; }
  /// Tables are indexed by step in [0, T]; index 0 holds the clean-data convention.
  double beta(int t) const { return beta_.at(check(t)); }
  double alpha(int t) const { return alpha_.at(check(t)); }
  double alpha_bar(int t) const { return alpha_bar_.at(check(t)); }
  const std::vector<double>& alpha_bar_table() const { return alpha_bar_; }

  int check(int t) const {
    if (t < 0 || t > T_)
      throw std::out_of_range("step " + std::to_string(t) + " outside [0, " + std::to_string(T_) + "]");
    return t;
  }

 private:
  int T_;
  std::vector<double> beta_, alpha_, alpha_bar_;
};

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  return NoiseSchedule(T, beta_start, beta_end);
}

struct DiffusionState {
  Tensor x_t;
  int t = 0;
};

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. Differentiable in x0.
inline Tensor forward_marginal(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  if (eps.shape() != x0.shape())
    throw ShapeError("forward_marginal: eps " + shape_str(eps.shape()) + " vs x0 " + shape_str(x0.shape()));
  const double ab = s.alpha_bar(t);
  return add(scale(x0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

enum class PredKind { eps, x0 };

/// Converts an eps prediction to x0 or vice versa at step t.
inline Tensor convert_pred(PredKind kind_in, const Tensor& value, const Tensor& x_t, int t,
                           const NoiseSchedule& s) {
  s.check(t);
  if (value.shape() != x_t.shape())
    throw ShapeError("convert_pred: " + shape_str(value.shape()) + " vs " + shape_str(x_t.shape()));
  const double ab = s.alpha_bar(t);
  if (kind_in == PredKind::eps) {
    if (t == 0) throw std::invalid_argument("convert_pred: eps is undefined at t = 0");
    return scale(sub(x_t, scale(value, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
  }
  if (t == 0) throw std::invalid_argument("convert_pred: eps is undefined at t = 0");
  return scale(sub(x_t, scale(value, std::sqrt(ab))), 1.0 / std::sqrt(1.0 - ab));
}

/// One DDIM update from t to t_prev given a clean-signal prediction.
/// `noise` is only read when eta > 0.
inline Tensor ddim_step(const Tensor& x_t, const Tensor& x0_pred, int t, int t_prev, double eta,
                        const NoiseSchedule& s, const Tensor& noise = {}) {
  s.check(t);
  s.check(t_prev);
  if (!(t_prev < t)) throw std::invalid_argument("ddim_step: need t_prev < t");
  if (eta < 0.0 || eta > 1.0) throw std::invalid_argument("ddim_step: eta outside [0,1]");
  if (x0_pred.shape() != x_t.shape())
    throw ShapeError("ddim_step: prediction " + shape_str(x0_pred.shape()) + " vs state " +
                     shape_str(x_t.shape()));
  const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t_prev);
  const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
  const double c_x0 = std::sqrt(ab_prev);
  const double c_eps = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  const auto& xt = x_t.data();
  const auto& x0 = x0_pred.data();
  const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
  std::vector<double> out(xt.size());
  const bool use_noise = sigma > 0.0;
  if (use_noise && (!noise.defined() || noise.shape() != x_t.shape()))
    throw ShapeError("ddim_step: eta > 0 needs noise shaped like the state");
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double eps = (xt[i] - sa * x0[i]) / sn;
    out[i] = c_x0 * x0[i] + c_eps * eps;
    if (use_noise) out[i] += sigma * noise.data()[i];
  }
  if (t_prev == 0 && !use_noise) return Tensor(x_t.shape(), x0);  // abar_0 = 1 collapses the update
  return Tensor(x_t.shape(), std::move(out));
}

/// Uniform sub-sequence from T down to 0 with `steps` transitions.
inline std::vector<int> ddim_timesteps(int T, int steps) {
  if (steps < 1) throw std::invalid_argument("need at least one sampling step");
  if (steps > T) throw std::invalid_argument("more sampling steps than schedule steps");
  std::vector<int> ts(static_cast<std::size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i)
    ts[static_cast<std::size_t>(i)] =
        static_cast<int>(std::lround(static_cast<double>(T) * (steps - i) / steps));
  return ts;
}

/// MSE between target and prediction (same loss for either parameterization).
inline Tensor denoising_loss(PredKind, const Tensor& target, const Tensor& pred) { return mse(pred, target); }

using Denoiser = std::function<Tensor(const Tensor& x_t, int t)>;

struct SampleOptions {
  int steps = 25;
  double eta = 0.0;
};

/// Draws x_T from seeded Gaussian noise and runs DDIM along the sub-sequence.
/// Noise usage: x_T first, then one draw per transition when eta > 0.
inline Tensor sample(const Denoiser& denoiser, const NoiseSchedule& s, const Shape& shape,
                     std::uint64_t seed, SampleOptions opt = {}) {
  NoGradGuard ng;
  Rng rng(seed);
  const auto ts = ddim_timesteps(s.T(), opt.steps);
  Tensor x(shape, rng.normals(numel(shape)));
  for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
    Tensor x0 = denoiser(x, ts[i]);
    if (x0.shape() != shape)
      throw ShapeError("denoiser returned " + shape_str(x0.shape()) + ", expected " + shape_str(shape));
    Tensor noise;
    if (opt.eta > 0.0) noise = Tensor(shape, rng.normals(numel(shape)));
    x = ddim_step(x, x0, ts[i], ts[i + 1], opt.eta, s, noise);
  }
  return x;
}

}  // namespace etk::diffusion
