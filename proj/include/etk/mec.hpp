#pragma once

// Emotion control from several sources. Video drives expression frame by
// frame; image, text and audio give one utterance-level condition e_cond that
// the Di-CTE model expands into a sequence.

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "etk/encoders.hpp"
#include "etk/nn.hpp"
#include "etk/synth_world.hpp"
#include "etk/vaid.hpp"

namespace etk::mec {

inline constexpr std::array<const char*, 8> kEmotionNames = {"happy",     "angry",   "sad",     "surprised",
                                                             "fear",      "disgusted", "worried", "neutral"};

/// World emotion id of a keyword, or nullopt.
inline std::optional<std::size_t> emotion_index(const std::string& keyword) {
  for (std::size_t i = 0; i < kEmotionNames.size(); ++i)
    if (keyword == kEmotionNames[i]) return i;
  return std::nullopt;
}

using SynonymTable = std::map<std::string, std::vector<std::string>>;

inline const SynonymTable& default_synonyms() {
  static const SynonymTable t = {
      {"happy", {"joyful", "cheerful", "glad", "delighted"}},
      {"angry", {"furious", "mad", "irritated"}},
      {"sad", {"unhappy", "sorrowful", "gloomy"}},
      {"surprised", {"astonished", "amazed", "shocked"}},
      {"fear", {"afraid", "scared", "frightened"}},
      {"disgusted", {"disgust", "revolted", "repulsed"}},
      {"worried", {"anxious", "nervous", "concerned"}},
      {"neutral", {"calm", "plain", "expressionless"}},
  };
  return t;
}

/// Earliest keyword or synonym occurrence in the lowercased prompt; a longer
/// term wins when two start at the same position. No match gives "neutral".
inline std::string extract_keyword(const std::string& prompt, const SynonymTable& synonyms = default_synonyms()) {
  std::string text = prompt;
  for (auto& ch : text) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  std::size_t best_pos = std::string::npos, best_len = 0;
  std::string best = "neutral";
  auto consider = [&](const std::string& term, const std::string& key) {
    const auto pos = text.find(term);
    if (pos == std::string::npos) return;
    if (pos < best_pos || (pos == best_pos && term.size() > best_len)) {
      best_pos = pos;
      best_len = term.size();
      best = key;
    }
  };
  for (const char* k : kEmotionNames) {
    consider(k, k);
    if (auto it = synonyms.find(k); it != synonyms.end())
      for (const auto& s : it->second) consider(s, k);
  }
  return best;
}

// ---------------------------------------------------------------------------

/// Per-emotion expression-latent centroids.
struct EmotionCodebook {
  std::array<Tensor, 8> entries;  // [d_exp] each

  const Tensor& lookup(const std::string& keyword) const {
    auto i = emotion_index(keyword);
    if (!i) throw std::invalid_argument("unknown emotion keyword '" + keyword + "'");
    return entries[*i];
  }

  /// Throws unless every pair of entries is more than `min_dist` apart.
  void validate(double min_dist = 0.1) const {
    for (std::size_t i = 0; i < 8; ++i) {
      if (!entries[i].defined()) throw std::invalid_argument("codebook entry missing for " + std::string(kEmotionNames[i]));
      for (std::size_t j = 0; j < i; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < entries[i].size(); ++k) s += std::pow(entries[i][k] - entries[j][k], 2);
        if (!(std::sqrt(s) > min_dist))
          throw std::invalid_argument(std::string("codebook entries too close: ") + kEmotionNames[i] + " / " +
                                      kEmotionNames[j]);
      }
    }
  }
};

/// Centroid of the expression encodings of `per_emotion` single frames per emotion.
inline EmotionCodebook build_codebook(const synth::World& world, const EncoderPair& enc, std::size_t per_emotion,
                                      std::uint64_t seed) {
  EmotionCodebook cb;
  Rng rng(seed);
  const std::size_t F = world.params().frame_size();
  for (std::size_t e = 0; e < 8; ++e) {
    std::vector<double> frames;
    frames.reserve(per_emotion * F);
    for (std::size_t i = 0; i < per_emotion; ++i) {
      auto s = world.random_sequence(1, rng, static_cast<int>(e));
      frames.insert(frames.end(), s.frames.data().begin(), s.frames.data().end());
    }
    NoGradGuard ng;
    Tensor z = enc.encode_expr(Tensor({per_emotion, F}, std::move(frames)));
    const std::size_t d = z.dim(1);
    std::vector<double> mu(d, 0.0);
    for (std::size_t i = 0; i < per_emotion; ++i)
      for (std::size_t k = 0; k < d; ++k) mu[k] += z.data()[i * d + k] / static_cast<double>(per_emotion);
    cb.entries[e] = Tensor({d}, std::move(mu));
  }
  cb.validate();
  return cb;
}

// ---------------------------------------------------------------------------

/// Linear softmax classifier over utterance-level audio emotion features.
class AudioEmotionClassifier {
 public:
  AudioEmotionClassifier() = default;
  AudioEmotionClassifier(std::size_t d_features, Rng& rng) : fc(d_features, 8, rng) {}

  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }
  std::size_t feature_dim() const { return fc.in_features(); }

  /// Logits [N, 8] for features [N, d].
  Tensor logits(const Tensor& x) const {
    if (x.rank() != 2 || x.dim(1) != feature_dim())
      throw ShapeError("audio classifier expects [N, " + std::to_string(feature_dim()) + "], got " + shape_str(x.shape()));
    return fc(x);
  }

  std::size_t classify(const Tensor& features) const {
    if (!trained_) throw std::logic_error("audio emotion classifier is not trained");
    if (features.size() != feature_dim())
      throw ShapeError("audio classifier expects " + std::to_string(feature_dim()) + " features, got " +
                       shape_str(features.shape()));
    NoGradGuard ng;
    auto z = logits(reshape(features, {1, feature_dim()})).data();
    return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
  }

  std::string classify_keyword(const Tensor& features) const { return kEmotionNames[classify(features)]; }

  ParamList params() const {
    ParamList pl;
    fc.collect(pl, "fc");
    return pl;
  }

  Linear fc;

 private:
  bool trained_ = false;
};

/// Cross-entropy of logits [N, 8] against integer labels.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<double> onehot(n * k, 0.0);
  for (std::size_t i = 0; i < n; ++i) onehot[i * k + labels[i]] = 1.0;
  Tensor logp = log(softmax_last(logits));
  return scale(sum(mul(logp, Tensor({n, k}, std::move(onehot)))), -1.0 / static_cast<double>(n));
}

/// Labelled emotion-feature samples from the world.
inline std::pair<Tensor, std::vector<std::size_t>> emotion_feature_set(const synth::World& world, std::size_t n,
                                                                       Rng& rng) {
  const std::size_t d = world.params().d_emotion_features;
  std::vector<double> x;
  std::vector<std::size_t> y;
  x.reserve(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t e = rng.below(8);
    auto f = world.emotion_features(e, rng);
    x.insert(x.end(), f.begin(), f.end());
    y.push_back(e);
  }
  return {Tensor({n, d}, std::move(x)), std::move(y)};
}

inline AudioEmotionClassifier train_audio_classifier(const synth::World& world, std::size_t steps, std::size_t batch,
                                                     std::uint64_t seed) {
  Rng rng(seed);
  AudioEmotionClassifier clf(world.params().d_emotion_features, rng);
  Adam adam(clf.params(), {.lr = 1e-2});
  for (std::size_t s = 0; s < steps; ++s) {
    auto [x, y] = emotion_feature_set(world, batch, rng);
    backward(cross_entropy(clf.logits(x), y));
    adam.step();
  }
  clf.mark_trained();
  return clf;
}

inline double classifier_accuracy(const AudioEmotionClassifier& clf, const Tensor& x, const std::vector<std::size_t>& y) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < y.size(); ++i) hits += clf.classify(slice(x, 0, i, i + 1)) == y[i];
  return static_cast<double>(hits) / static_cast<double>(y.size());
}

// ---------------------------------------------------------------------------

enum class SourceKind { none, video, image, text, audio };

inline const char* to_string(SourceKind k) {
  switch (k) {
    case SourceKind::none: return "none";
    case SourceKind::video: return "video";
    case SourceKind::image: return "image";
    case SourceKind::text: return "text";
    case SourceKind::audio: return "audio";
  }
  return "?";
}

struct EmotionSource {
  SourceKind kind = SourceKind::none;
  Tensor frames;     // video: [L, h, w, c]
  Tensor image;      // image: one frame
  std::string text;  // text prompt
  Tensor features;   // audio: utterance-level emotion features

  static EmotionSource from_video(Tensor f) { return {SourceKind::video, std::move(f), {}, {}, {}}; }
  static EmotionSource from_image(Tensor i) { return {SourceKind::image, {}, std::move(i), {}, {}}; }
  static EmotionSource from_text(std::string t) { return {SourceKind::text, {}, {}, std::move(t), {}}; }
  static EmotionSource from_audio(Tensor f) { return {SourceKind::audio, {}, {}, {}, std::move(f)}; }
};

/// Models needed to turn a source into per-frame expression latents.
struct EmotionResolver {
  const EncoderPair* encoders = nullptr;
  const DiCteDenoiser* dicte = nullptr;
  const EmotionCodebook* codebook = nullptr;
  const AudioEmotionClassifier* classifier = nullptr;  // only for audio sources
  diffusion::NoiseSchedule schedule;
  int steps = 25;
};

/// Utterance-level condition for non-video sources.
inline Tensor utterance_condition(const EmotionSource& src, const EmotionResolver& r, const Tensor& x_ref) {
  NoGradGuard ng;
  const std::size_t F = r.encoders->dims().frame();
  auto encode_one = [&](const Tensor& img) {
    if (img.size() != F) throw ShapeError("emotion image must hold one frame, got " + shape_str(img.shape()));
    return reshape(r.encoders->encode_expr(reshape(img, {1, F})), {r.encoders->dims().d_exp});
  };
  switch (src.kind) {
    case SourceKind::none: return encode_one(x_ref);
    case SourceKind::image: return encode_one(src.image);
    case SourceKind::text:
      if (src.text.empty()) throw std::invalid_argument("empty emotion text");
      return r.codebook->lookup(extract_keyword(src.text));
    case SourceKind::audio:
      if (!r.classifier) throw std::logic_error("audio emotion source needs a classifier");
      return r.codebook->lookup(r.classifier->classify_keyword(src.features));
    case SourceKind::video: break;
  }
  throw std::invalid_argument("video sources have no utterance condition");
}

/// e_dri [length, d_exp]. audio: [length + w - 1, d_audio] speech track.
inline Tensor resolve_emotion_source(const EmotionSource& src, const EmotionResolver& r, const Tensor& x_ref,
                                     const Tensor& audio, std::size_t length, std::uint64_t seed) {
  if (!r.encoders) throw std::logic_error("emotion resolver needs encoders");
  if (src.kind == SourceKind::video) {
    if (!src.frames.defined() || src.frames.rank() != 4)
      throw ShapeError("video emotion source must be [L, h, w, c]");
    if (src.frames.dim(0) != length)
      throw std::invalid_argument("video emotion source has " + std::to_string(src.frames.dim(0)) +
                                  " frames, need exactly " + std::to_string(length));
    NoGradGuard ng;
    return r.encoders->encode_expr(src.frames);
  }
  if (!r.dicte) throw std::logic_error("utterance emotion sources need a Di-CTE model");
  Tensor e_cond = utterance_condition(src, r, x_ref);
  return dicte_generate(*r.dicte, reshape(x_ref, {x_ref.size()}), audio, e_cond, length, r.schedule, r.steps, seed)
      .latents;
}

}  // namespace etk::mec
