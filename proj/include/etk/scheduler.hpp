#pragma once

// Non-autoregressive long-sequence sampling: overlapping clips are denoised
// from one shared noisy state, their x0 predictions fused with center-heavy
// weights, and a single global DDIM step advances the state.

#include <cmath>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "etk/diffusion.hpp"
#include "etk/rng.hpp"
#include "etk/tensor.hpp"

namespace etk::sched {

struct Clip {
  std::size_t start = 0, end = 0;  // [start, end)
  std::size_t size() const { return end - start; }
  bool operator==(const Clip&) const = default;
};

struct WindowPlan {
  std::vector<Clip> clips;
  std::size_t length = 0, window = 0, overlap = 0;
};

struct WindowPreset {
  std::size_t window, overlap;
};
inline constexpr WindowPreset kDefaultWindows{120, 24};
inline constexpr WindowPreset kShortWindows{32, 12};

/// Clips at multiples of the stride window - overlap; the last clip is moved
/// left so it ends exactly at `length`.
inline WindowPlan plan_windows(std::size_t length, std::size_t window, std::size_t overlap) {
  if (length < 1) throw std::invalid_argument("plan_windows: length must be >= 1");
  if (window < 1) throw std::invalid_argument("plan_windows: window must be >= 1");
  if (overlap >= window) throw std::invalid_argument("plan_windows: overlap must be < window");
  WindowPlan p{{}, length, window, overlap};
  if (length <= window) {
    p.clips.push_back({0, length});
    return p;
  }
  if (overlap < 1) throw std::invalid_argument("plan_windows: clips must overlap by at least one frame");
  const std::size_t stride = window - overlap;
  for (std::size_t start = 0;; start += stride) {
    if (start + window >= length) {
      p.clips.push_back({length - window, length});
      break;
    }
    p.clips.push_back({start, start + window});
  }
  return p;
}

inline constexpr double kWeightFloor = 1e-3;

/// Raised cosine over an n-frame clip plus a positive floor.
inline double raw_fusion_weight(std::size_t p, std::size_t n) {
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  return 0.5 - 0.5 * std::cos(kTwoPi * static_cast<double>(p + 1) / static_cast<double>(n + 1)) + kWeightFloor;
}

struct FusionWeights {
  std::vector<std::vector<double>> per_clip;  // normalized, indexed by clip-local position
  std::vector<double> normalizer;             // per global frame, sum of raw covering weights
};

inline FusionWeights fusion_weights(const WindowPlan& plan) {
  FusionWeights fw;
  fw.normalizer.assign(plan.length, 0.0);
  for (const auto& c : plan.clips)
    for (std::size_t p = 0; p < c.size(); ++p) fw.normalizer[c.start + p] += raw_fusion_weight(p, c.size());
  for (const auto& c : plan.clips) {
    std::vector<double> w(c.size());
    for (std::size_t p = 0; p < c.size(); ++p) w[p] = raw_fusion_weight(p, c.size()) / fw.normalizer[c.start + p];
    fw.per_clip.push_back(std::move(w));
  }
  return fw;
}

/// Worker count from ETK_THREADS (default 1, clamped to [1, 64]).
inline std::size_t thread_count() {
  const char* v = std::getenv("ETK_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) return 1;
  return static_cast<std::size_t>(std::min(n, 64L));
}

/// x0 prediction for the rows [clip.start, clip.end) of the global state.
using ClipDenoiser = std::function<Tensor(const Tensor& x_clip, int t, const Clip& clip)>;

struct LongOptions {
  std::size_t window = kDefaultWindows.window;
  std::size_t overlap = kDefaultWindows.overlap;
  int steps = 25;
  std::size_t threads = 0;  // 0: read ETK_THREADS
};

/// Samples [length, frame_shape...]. The initial noise is drawn exactly as
/// diffusion::sample draws it, so a single-clip plan reproduces sample().
inline Tensor generate_long(const ClipDenoiser& denoiser, const Shape& frame_shape, std::size_t length,
                            const diffusion::NoiseSchedule& s, std::uint64_t seed, const LongOptions& opt = {}) {
  NoGradGuard ng;
  const auto plan = plan_windows(length, opt.window, opt.overlap);
  const auto fw = fusion_weights(plan);
  const std::size_t per = numel(frame_shape);
  Shape shape{length};
  shape.insert(shape.end(), frame_shape.begin(), frame_shape.end());
  Rng rng(seed);
  Tensor x(shape, rng.normals(length * per));
  const auto ts = diffusion::ddim_timesteps(s.T(), opt.steps);
  const std::size_t workers = std::max<std::size_t>(1, std::min(opt.threads ? opt.threads : thread_count(), plan.clips.size()));
  std::vector<Tensor> preds(plan.clips.size());

  for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
    const int t = ts[i];
    auto run = [&](std::size_t k) {
      NoGradGuard inner;
      const auto& c = plan.clips[k];
      Tensor y = denoiser(slice(x, 0, c.start, c.end), t, c);
      Shape cs{c.size()};
      cs.insert(cs.end(), frame_shape.begin(), frame_shape.end());
      if (y.shape() != cs) throw ShapeError("generate_long: denoiser returned " + shape_str(y.shape()));
      preds[k] = y;
    };
    if (workers == 1) {
      for (std::size_t k = 0; k < plan.clips.size(); ++k) run(k);
    } else {
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> errors(workers);
      for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          try {
            for (std::size_t k = w; k < plan.clips.size(); k += workers) run(k);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      for (auto& th : pool) th.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }
    // Fixed clip order keeps the reduction deterministic.
    std::vector<double> x0(length * per, 0.0);
    for (std::size_t k = 0; k < plan.clips.size(); ++k) {
      const auto& c = plan.clips[k];
      const auto& y = preds[k].data();
      for (std::size_t p = 0; p < c.size(); ++p) {
        const double w = fw.per_clip[k][p];
        double* dst = x0.data() + (c.start + p) * per;
        const double* src = y.data() + p * per;
        if (k == 0)
          for (std::size_t j = 0; j < per; ++j) dst[j] = w * src[j];
        else
          for (std::size_t j = 0; j < per; ++j) dst[j] += w * src[j];
      }
    }
    x = diffusion::ddim_step(x, Tensor(shape, std::move(x0)), t, ts[i + 1], 0.0, s);
  }
  return x;
}

}  // namespace etk::sched
