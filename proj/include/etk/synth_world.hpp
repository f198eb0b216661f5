#pragma once

// Deterministic synthetic talking-head world with known factor structure.
//
// Per sequence: an identity code, an emotion id, a smooth per-frame audio
// trajectory, and an independently drawn portrait. For frame t with audio
// window A_t (w consecutive audio frames):
//
//   pooled  p_t = sum_k kernel[k] * A_t[k]                (unit variance per dim)
//   lip     l_t = W_lip p_t                               (depends on the window)
//   energy  s_t = tanh(1.5 * v . p_t),  v in null(W_lip)  (independent of l_t)
//   expr    e_t = W_exp [onehot(emotion); s_t]
//   frame   X_t = background(identity) | face_base + tanh(A_exp e_t) | face_base + tanh(A_lip l_t)
//
// where the three regions are background, face-minus-lip and lip cells of the
// fixed face geometry. Because p_t is isotropic Gaussian and v is orthogonal
// to the rows of W_lip, lip and expression ground truth are independent.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "etk/masks.hpp"
#include "etk/rng.hpp"
#include "etk/tensor.hpp"

namespace etk::synth {

inline constexpr std::size_t kEmotionCount = 8;

struct WorldParams {
  std::size_t d_audio = 16;
  std::size_t window = 8;
  std::size_t d_lip = 8;
  std::size_t d_exp = 8;
  std::size_t h = 8;
  std::size_t w_sp = 8;
  std::size_t c = 4;
  std::size_t identity_rank = 4;
  std::size_t d_emotion_features = 16;
  std::size_t emotion_count = kEmotionCount;
  double audio_smoothness = 0.8;  // AR(1) coefficient of the audio trajectory
  std::uint64_t seed = 7;

  std::size_t frame_size() const { return h * w_sp * c; }

  void validate() const {
    if (!d_audio || !window || !d_lip || !d_exp || !h || !w_sp || !c || !identity_rank || !d_emotion_features)
      throw std::invalid_argument("world dims must be >= 1");
    if (emotion_count != kEmotionCount) throw std::invalid_argument("emotion_count must be 8");
    if (d_lip >= d_audio) throw std::invalid_argument("d_lip must be < d_audio (energy lives in the null space)");
    if (!(audio_smoothness >= 0.0 && audio_smoothness < 1.0))
      throw std::invalid_argument("audio_smoothness must be in [0,1)");
  }
};

/// One generated sequence. Tensor shapes use len = number of frames.
struct Sequence {
  std::size_t emotion = 0;
  std::size_t ref_emotion = 0;
  Tensor identity;           // [identity_rank]
  Tensor audio;              // [len + window - 1, d_audio]
  Tensor windows;            // [len, window, d_audio]
  Tensor lip;                // [len, d_lip]
  Tensor expr;               // [len, d_exp]
  Tensor energy;             // [len]
  Tensor frames;             // [len, h, w_sp, c]
  Tensor portrait;           // [h, w_sp, c], the reference image x_ref
  Tensor emotion_features;   // [d_emotion_features], utterance-level audio emotion cue

  std::size_t length() const { return lip.dim(0); }
};

class World {
 public:
  explicit World(WorldParams p) : p_(p) {
    p_.validate();
    Rng rng(p_.seed);
    masks_ = build_masks(default_landmarks(), p_.h, p_.w_sp);

    // Window pooling kernel, scaled so pooled audio has unit variance under the
    // AR(1) audio prior.
    kernel_.resize(p_.window);
    for (auto& k : kernel_) k = 0.2 + rng.uniform();
    double var = 0.0;
    for (std::size_t i = 0; i < p_.window; ++i)
      for (std::size_t j = 0; j < p_.window; ++j)
        var += kernel_[i] * kernel_[j] *
               std::pow(p_.audio_smoothness, static_cast<double>(i > j ? i - j : j - i));
    for (auto& k : kernel_) k /= std::sqrt(var);

    W_lip_ = random_matrix(p_.d_lip, p_.d_audio, 1.0 / std::sqrt(static_cast<double>(p_.d_audio)), rng);
    lip_rank_ = W_lip_.fullPivLu().rank();

    // Energy direction: unit vector orthogonal to the row space of W_lip.
    Eigen::VectorXd r(p_.d_audio);
    for (auto& v : r) v = rng.normal();
    Eigen::MatrixXd WWt = W_lip_ * W_lip_.transpose();
    Eigen::VectorXd v = r - W_lip_.transpose() * WWt.ldlt().solve(W_lip_ * r);
    energy_dir_ = v / v.norm();

    W_exp_ = Eigen::MatrixXd(p_.d_exp, p_.emotion_count + 1);
    for (Eigen::Index i = 0; i < W_exp_.rows(); ++i) {
      for (std::size_t j = 0; j < p_.emotion_count; ++j) W_exp_(i, static_cast<Eigen::Index>(j)) = rng.normal();
      W_exp_(i, static_cast<Eigen::Index>(p_.emotion_count)) = 0.6 * rng.normal();
    }

    const std::size_t lip_vals = count(masks_.lip) * p_.c;
    const std::size_t expr_vals = count(masks_.expression_gate()) * p_.c;
    A_lip_ = random_matrix(lip_vals, p_.d_lip, 1.2 / std::sqrt(static_cast<double>(p_.d_lip)), rng);
    A_exp_ = random_matrix(expr_vals, p_.d_exp, 1.0 / std::sqrt(static_cast<double>(p_.d_exp * 2)), rng);
    face_base_ = rng.normals(p_.frame_size(), 0.3);
    identity_basis_ = random_matrix(p_.frame_size(), p_.identity_rank, 1.0, rng);
    emotion_proto_ = random_matrix(p_.emotion_count, p_.d_emotion_features, 1.0, rng);
  }

  const WorldParams& params() const { return p_; }
  const RegionMasks& masks() const { return masks_; }
  const std::vector<double>& kernel() const { return kernel_; }
  const Eigen::MatrixXd& lip_map() const { return W_lip_; }
  const Eigen::MatrixXd& expr_map() const { return W_exp_; }
  const Eigen::VectorXd& energy_direction() const { return energy_dir_; }
  Eigen::Index lip_map_rank() const { return lip_rank_; }

  /// Pooled audio statistic of one window [window, d_audio].
  Eigen::VectorXd pooled(const double* window) const {
    Eigen::VectorXd p = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p_.d_audio));
    for (std::size_t k = 0; k < p_.window; ++k)
      for (std::size_t j = 0; j < p_.d_audio; ++j) p(static_cast<Eigen::Index>(j)) += kernel_[k] * window[k * p_.d_audio + j];
    return p;
  }

  std::vector<double> lip_of(const double* window) const { return to_vec(W_lip_ * pooled(window)); }
  double energy_of(const double* window) const { return std::tanh(1.5 * energy_dir_.dot(pooled(window))); }

  std::vector<double> expr_of(std::size_t emotion, double energy) const {
    if (emotion >= p_.emotion_count) throw std::out_of_range("emotion id out of range");
    Eigen::VectorXd e = W_exp_.col(static_cast<Eigen::Index>(emotion)) +
                        energy * W_exp_.col(static_cast<Eigen::Index>(p_.emotion_count));
    return to_vec(e);
  }

  /// Renders one frame latent [h*w_sp*c] from identity code, lip and expression.
  std::vector<double> render(const std::vector<double>& identity, const std::vector<double>& lip,
                             const std::vector<double>& expr) const {
    const auto gate = masks_.expression_gate();
    Eigen::Map<const Eigen::VectorXd> l(lip.data(), static_cast<Eigen::Index>(lip.size()));
    Eigen::Map<const Eigen::VectorXd> e(expr.data(), static_cast<Eigen::Index>(expr.size()));
    Eigen::Map<const Eigen::VectorXd> z(identity.data(), static_cast<Eigen::Index>(identity.size()));
    const Eigen::VectorXd lip_part = A_lip_ * l;
    const Eigen::VectorXd exp_part = A_exp_ * e;
    const Eigen::VectorXd bg = identity_basis_ * z;
    std::vector<double> out(p_.frame_size());
    std::size_t li = 0, ei = 0;
    for (std::size_t cell = 0; cell < masks_.cells(); ++cell)
      for (std::size_t ch = 0; ch < p_.c; ++ch) {
        const std::size_t k = cell * p_.c + ch;
        if (masks_.lip[cell] > 0.5)
          out[k] = face_base_[k] + std::tanh(lip_part(static_cast<Eigen::Index>(li++)));
        else if (gate[cell] > 0.5)
          out[k] = face_base_[k] + std::tanh(exp_part(static_cast<Eigen::Index>(ei++)));
        else
          out[k] = 0.5 * bg(static_cast<Eigen::Index>(k));
      }
    return out;
  }

  std::vector<double> emotion_features(std::size_t emotion, Rng& rng) const {
    std::vector<double> f(p_.d_emotion_features);
    for (std::size_t j = 0; j < f.size(); ++j)
      f[j] = emotion_proto_(static_cast<Eigen::Index>(emotion), static_cast<Eigen::Index>(j)) + 0.5 * rng.normal();
    return f;
  }

  /// Smooth audio trajectory of n frames (AR(1) per dimension, unit variance).
  std::vector<double> audio_trajectory(std::size_t n, Rng& rng) const {
    const double rho = p_.audio_smoothness, s = std::sqrt(1.0 - rho * rho);
    std::vector<double> a(n * p_.d_audio);
    for (std::size_t j = 0; j < p_.d_audio; ++j) a[j] = rng.normal();
    for (std::size_t t = 1; t < n; ++t)
      for (std::size_t j = 0; j < p_.d_audio; ++j)
        a[t * p_.d_audio + j] = rho * a[(t - 1) * p_.d_audio + j] + s * rng.normal();
    return a;
  }

  /// Builds a sequence from explicit factors; the audio trajectory must hold
  /// len + window - 1 frames.
  Sequence make_sequence(std::size_t emotion, const std::vector<double>& identity, std::vector<double> audio,
                         std::size_t ref_emotion, const std::vector<double>& ref_window,
                         double ref_energy, std::vector<double> emotion_feats) const {
    const std::size_t d = p_.d_audio, w = p_.window;
    if (audio.size() % d != 0 || audio.size() / d < w) throw std::invalid_argument("audio too short for one window");
    const std::size_t len = audio.size() / d - w + 1;
    Sequence s;
    s.emotion = emotion;
    s.ref_emotion = ref_emotion;
    s.identity = Tensor({identity.size()}, identity);
    std::vector<double> windows(len * w * d), lip, expr, energy(len), frames;
    lip.reserve(len * p_.d_lip);
    expr.reserve(len * p_.d_exp);
    frames.reserve(len * p_.frame_size());
    for (std::size_t t = 0; t < len; ++t) {
      const double* win = audio.data() + t * d;
      std::copy_n(win, w * d, windows.begin() + static_cast<std::ptrdiff_t>(t * w * d));
      auto l = lip_of(win);
      energy[t] = energy_of(win);
      auto e = expr_of(emotion, energy[t]);
      auto f = render(identity, l, e);
      lip.insert(lip.end(), l.begin(), l.end());
      expr.insert(expr.end(), e.begin(), e.end());
      frames.insert(frames.end(), f.begin(), f.end());
    }
    s.audio = Tensor({len + w - 1, d}, std::move(audio));
    s.windows = Tensor({len, w, d}, std::move(windows));
    s.lip = Tensor({len, p_.d_lip}, std::move(lip));
    s.expr = Tensor({len, p_.d_exp}, std::move(expr));
    s.energy = Tensor({len}, std::move(energy));
    s.frames = Tensor({len, p_.h, p_.w_sp, p_.c}, std::move(frames));
    s.portrait = Tensor({p_.h, p_.w_sp, p_.c}, render(identity, lip_of(ref_window.data()), expr_of(ref_emotion, ref_energy)));
    const std::size_t n_feats = emotion_feats.size();
    s.emotion_features = Tensor({n_feats}, std::move(emotion_feats));
    return s;
  }

  /// Random sequence; fully determined by the world and the rng state.
  Sequence random_sequence(std::size_t len, Rng& rng, int force_emotion = -1, int force_ref_emotion = -1) const {
    if (len < 1) throw std::invalid_argument("sequence length must be >= 1");
    const std::size_t emotion = force_emotion >= 0 ? static_cast<std::size_t>(force_emotion) : rng.below(p_.emotion_count);
    const std::size_t ref_emotion =
        force_ref_emotion >= 0 ? static_cast<std::size_t>(force_ref_emotion) : rng.below(p_.emotion_count);
    auto identity = rng.normals(p_.identity_rank);
    auto audio = audio_trajectory(len + p_.window - 1, rng);
    auto ref_audio = audio_trajectory(p_.window, rng);
    const double ref_energy = energy_of(ref_audio.data());
    auto feats = emotion_features(emotion, rng);
    return make_sequence(emotion, identity, std::move(audio), ref_emotion, ref_audio, ref_energy, std::move(feats));
  }

 private:
  static Eigen::MatrixXd random_matrix(std::size_t r, std::size_t c, double sigma, Rng& rng) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = sigma * rng.normal();
    return m;
  }
  static std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }
  static std::size_t count(const std::vector<double>& m) {
    std::size_t n = 0;
    for (double v : m) n += v > 0.5;
    return n;
  }

  WorldParams p_;
  RegionMasks masks_;
  std::vector<double> kernel_;
  Eigen::MatrixXd W_lip_, W_exp_, A_lip_, A_exp_, identity_basis_, emotion_proto_;
  Eigen::VectorXd energy_dir_;
  Eigen::Index lip_rank_ = 0;
  std::vector<double> face_base_;
};

inline World make_world(const WorldParams& p) { return World(p); }

/// n sequences of seq_len frames; deterministic per (world, seed).
inline std::vector<Sequence> sample_batch(const World& world, std::size_t n, std::size_t seq_len, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_batch needs n >= 1");
  Rng rng(seed);
  std::vector<Sequence> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng r = rng.fork(i);
    out.push_back(world.random_sequence(seq_len, r));
  }
  return out;
}

}  // namespace etk::synth
