#pragma once

// The two-stage pipeline: data synthesis, encoder pretraining, V-AID joint
// training, ETHD training on frozen V-AID outputs, MEC construction,
// long-sequence generation and the evaluation suite. Every stage is a pure
// function of the config and its inputs.

#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"

#include "etk/checkpoint.hpp"
#include "etk/config.hpp"
#include "etk/encoders.hpp"
#include "etk/ethd.hpp"
#include "etk/evalkit.hpp"
#include "etk/mec.hpp"
#include "etk/scheduler.hpp"
#include "etk/synth_world.hpp"
#include "etk/vaid.hpp"

namespace etk::pipeline {

using nlohmann::json;

inline synth::World make_world(const Config& c) { return synth::World(c.world); }

// ---------------------------------------------------------------------------
// Data

struct Dataset {
  std::vector<synth::Sequence> vaid, ethd;
};

inline Dataset synthesize(const synth::World& world, const Config& c) {
  Dataset d;
  Rng rng(c.data.seed);
  Rng rv = rng.fork(1), re = rng.fork(2);
  for (std::size_t i = 0; i < c.data.vaid_sequences; ++i) {
    Rng r = rv.fork(i);
    d.vaid.push_back(world.random_sequence(c.data.vaid_length, r));
  }
  for (std::size_t i = 0; i < c.data.ethd_sequences; ++i) {
    Rng r = re.fork(i);
    d.ethd.push_back(world.random_sequence(c.data.ethd_length, r));
  }
  return d;
}

namespace detail {

inline const char* kSeqFields[] = {"identity", "audio", "lip", "expr", "energy", "frames", "portrait", "emotion_features"};

inline std::vector<const Tensor*> seq_tensors(const synth::Sequence& s) {
  return {&s.identity, &s.audio, &s.lip, &s.expr, &s.energy, &s.frames, &s.portrait, &s.emotion_features};
}

}  // namespace detail

inline ckpt::Container dataset_container(const Dataset& d, const Config& c) {
  ckpt::Container out{"dataset", c.hash(), json::object(), {}};
  for (const auto& [split, seqs] : {std::pair{"vaid", &d.vaid}, std::pair{"ethd", &d.ethd}}) {
    json labels = json::array();
    for (std::size_t i = 0; i < seqs->size(); ++i) {
      const auto& s = (*seqs)[i];
      labels.push_back({{"emotion", s.emotion}, {"ref_emotion", s.ref_emotion}});
      const auto ts = detail::seq_tensors(s);
      for (std::size_t k = 0; k < ts.size(); ++k)
        out.tensors.push_back({std::string(split) + "." + std::to_string(i) + "." + detail::kSeqFields[k], *ts[k]});
    }
    out.meta[split] = labels;
  }
  return out;
}

inline Dataset dataset_from(const ckpt::Container& c, const synth::World& world) {
  Dataset d;
  std::size_t next = 0;
  for (const auto& [split, seqs] : {std::pair{"vaid", &d.vaid}, std::pair{"ethd", &d.ethd}}) {
    const auto& labels = c.meta.at(split);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      synth::Sequence s;
      s.emotion = labels[i].at("emotion").get<std::size_t>();
      s.ref_emotion = labels[i].at("ref_emotion").get<std::size_t>();
      std::vector<Tensor*> ts = {&s.identity, &s.audio, &s.lip, &s.expr, &s.energy, &s.frames, &s.portrait, &s.emotion_features};
      for (auto* t : ts) {
        if (next >= c.tensors.size()) throw ckpt::CheckpointError(ckpt::CheckpointError::Kind::layout, "dataset truncated");
        *t = c.tensors[next++].value;
      }
      s.windows = audio_windows(s.audio, 0, s.lip.dim(0), world.params().window);
      seqs->push_back(std::move(s));
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Models

inline EncoderPair make_encoders(const synth::World& world, const Config& c) {
  Rng rng(c.model_seed);
  Rng r = rng.fork(10);
  return EncoderPair(encoder_dims_for(world.params()), world.masks(), r);
}

inline VaidDims vaid_dims(const Config& c) {
  auto d = vaid_dims_for(c.world);
  d.dicte.d_model = c.dicte_d_model;
  return d;
}

inline VaidModels make_vaid(const Config& c) { return make_vaid_models(vaid_dims(c), c.model_seed + 20); }

inline ParamList vaid_params(const VaidModels& m) {
  ParamList pl;
  for (auto& [n, t] : m.projector.params()) pl.emplace_back("projector." + n, t);
  for (auto& [n, t] : m.dicte.params()) pl.emplace_back("dicte." + n, t);
  for (auto& [n, t] : m.club.params()) pl.emplace_back("club." + n, t);
  return pl;
}

inline EthdDims ethd_dims(const Config& c) {
  EthdDims d = c.ethd_dims;
  d.h = c.world.h;
  d.w = c.world.w_sp;
  d.c = c.world.c;
  d.d_lip = c.world.d_lip;
  d.d_exp = c.world.d_exp;
  return d;
}

inline EthdBackbone make_ethd(const synth::World& world, const Config& c) {
  Rng rng(c.model_seed);
  Rng r = rng.fork(30);
  return EthdBackbone(ethd_dims(c), world.masks(), r);
}

struct MecBundle {
  mec::EmotionCodebook codebook;
  mec::AudioEmotionClassifier classifier;
};

inline MecBundle build_mec(const synth::World& world, const EncoderPair& enc, const Config& c) {
  return {mec::build_codebook(world, enc, c.mec.codebook_samples, c.model_seed + 40),
          mec::train_audio_classifier(world, c.mec.classifier_steps, c.mec.classifier_batch, c.model_seed + 41)};
}

inline ckpt::Container mec_container(const MecBundle& m, const Config& c) {
  ckpt::Container out{"mec", c.hash(), json::object(), {}};
  json keys = json::array();
  for (std::size_t i = 0; i < 8; ++i) {
    keys.push_back(mec::kEmotionNames[i]);
    out.tensors.push_back({std::string("codebook.") + mec::kEmotionNames[i], m.codebook.entries[i]});
  }
  out.meta["codebook_keys"] = keys;
  out.meta["classifier_trained"] = m.classifier.trained();
  for (auto& [n, t] : m.classifier.params()) out.tensors.push_back({"classifier." + n, t.detach()});
  return out;
}

inline MecBundle mec_from(const ckpt::Container& c, const Config& cfg) {
  MecBundle m;
  for (std::size_t i = 0; i < 8; ++i) m.codebook.entries[i] = c.get(std::string("codebook.") + mec::kEmotionNames[i]);
  m.codebook.validate();
  Rng rng(0);
  m.classifier = mec::AudioEmotionClassifier(cfg.world.d_emotion_features, rng);
  ckpt::Container cls{"", "", json::object(), {}};
  for (const auto& t : c.tensors)
    if (t.name.rfind("classifier.", 0) == 0) cls.tensors.push_back({t.name.substr(11), t.value});
  ckpt::into_params(cls, m.classifier.params());
  if (c.meta.value("classifier_trained", false)) m.classifier.mark_trained();
  return m;
}

// ---------------------------------------------------------------------------
// Training stages

inline std::vector<PretrainRecord> train_encoders(EncoderPair& enc, const synth::World& world, const Config& c) {
  return pretrain_encoders(enc, world, c.encoders);
}

inline std::vector<VaidSample> vaid_samples(const std::vector<synth::Sequence>& seqs, const EncoderPair& enc) {
  std::vector<VaidSample> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(to_vaid_sample(s, enc));
  return out;
}

inline std::vector<JointLogRecord> train_vaid(VaidModels& m, const EncoderPair& enc, const Dataset& d,
                                              const diffusion::NoiseSchedule& sched, const Config& c,
                                              std::function<void(std::size_t)> on_step = {}) {
  auto opt = c.vaid;
  opt.on_step = std::move(on_step);
  return joint_train(m, vaid_samples(d.vaid, enc), sched, opt);
}

/// ETHD training items with frozen V-AID outputs: l_a from the projector and
/// e_a from Di-CTE conditioned on the sequence's first-frame expression.
inline std::vector<EthdSample> ethd_samples(const std::vector<synth::Sequence>& seqs, const EncoderPair& enc,
                                            const VaidModels& vaid, const diffusion::NoiseSchedule& sched,
                                            const Config& c) {
  NoGradGuard ng;
  std::vector<EthdSample> out;
  const std::size_t w = c.world.window, F = c.world.frame_size();
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = seqs[i];
    const std::size_t L = s.length();
    EthdSample e;
    e.emotion = s.emotion;
    e.frames = s.frames;
    e.x_ref = reshape(s.portrait, {F});
    e.e_ref = reshape(enc.encode_expr(reshape(s.portrait, {1, F})), {c.world.d_exp});
    e.l_a = vaid.projector(audio_windows(s.audio, 0, L, w));
    e.e_v = enc.encode_expr(s.frames);
    e.e_a = dicte_generate(vaid.dicte, e.x_ref, s.audio, reshape(slice_rows(e.e_v, 0, 1), {c.world.d_exp}), L, sched,
                           c.inference.steps, c.model_seed * 1000 + i)
                .latents;
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generation

struct Models {
  EncoderPair enc;
  VaidModels vaid;
  EthdBackbone ethd;
  MecBundle mec;
};

struct Driving {
  Tensor audio;  // [L + w - 1, d_audio]
  Tensor x_ref;  // [F]
};

/// A held-out driving track and portrait drawn from the world.
inline Driving driving_from_world(const synth::World& world, std::size_t length, std::uint64_t seed,
                                  int ref_emotion = -1) {
  Rng rng(seed);
  auto s = world.random_sequence(length, rng, -1, ref_emotion);
  return {s.audio, reshape(s.portrait, {world.params().frame_size()})};
}

struct GenerateRequest {
  std::size_t length = 250;
  std::uint64_t seed = 0;
  mec::EmotionSource source;
  std::size_t window = sched::kDefaultWindows.window, overlap = sched::kDefaultWindows.overlap;
  int steps = 25;
  std::size_t threads = 0;
};

struct Generation {
  Tensor frames;  // [L, h, w, c]
  Tensor l_a;     // [L, d_lip]
  Tensor e_dri;   // [L, d_exp]
  json metrics;
};

inline mec::EmotionResolver resolver(const Models& m, const diffusion::NoiseSchedule& sched, int steps) {
  return {&m.enc, &m.vaid.dicte, &m.mec.codebook, &m.mec.classifier, sched, steps};
}

inline Tensor frames_2d(const Tensor& frames) { return reshape(frames, {frames.dim(0), frames.size() / frames.dim(0)}); }

inline Generation generate(const Models& m, const Driving& drv, const GenerateRequest& req,
                           const diffusion::NoiseSchedule& sched) {
  NoGradGuard ng;
  const auto& d = m.ethd.dims();
  const std::size_t L = req.length, w = m.vaid.projector.dims().window;
  if (L < 1) throw std::invalid_argument("generate: length must be >= 1");
  if (drv.audio.dim(0) < L + w - 1) throw std::invalid_argument("generate: driving audio shorter than length");
  Generation g;
  g.l_a = m.vaid.projector(audio_windows(drv.audio, 0, L, w));
  g.e_dri = mec::resolve_emotion_source(req.source, resolver(m, sched, req.steps), drv.x_ref, drv.audio, L,
                                        req.seed + 1);
  const Tensor e_ref = reshape(m.enc.encode_expr(reshape(drv.x_ref, {1, d.frame()})), {d.d_exp});
  auto clip_fn = [&](const Tensor& x, int t, const sched::Clip& c) {
    EthdCond cond{drv.x_ref, slice_rows(g.l_a, c.start, c.size()), e_ref, slice_rows(g.e_dri, c.start, c.size())};
    return m.ethd(x, t, cond);
  };
  g.frames = sched::generate_long(clip_fn, {d.h, d.w, d.c}, L, sched, req.seed,
                                  {.window = req.window, .overlap = req.overlap, .steps = req.steps, .threads = req.threads});

  const Tensor flat = frames_2d(g.frames);
  const Tensor l_gen = m.enc.encode_lip(flat), e_gen = m.enc.encode_expr(flat);
  double lip_err = 0;
  for (std::size_t i = 0; i < l_gen.size(); ++i) lip_err += std::pow(l_gen.data()[i] - g.l_a.data()[i], 2);
  std::vector<double> e_mean(d.d_exp, 0.0);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t k = 0; k < d.d_exp; ++k) e_mean[k] += e_gen.data()[i * d.d_exp + k] / static_cast<double>(L);
  std::size_t nearest = 0;
  double best = 1e300;
  for (std::size_t k = 0; k < 8; ++k) {
    double s = 0;
    for (std::size_t j = 0; j < d.d_exp; ++j) s += std::pow(e_mean[j] - m.mec.codebook.entries[k][j], 2);
    if (s < best) best = s, nearest = k;
  }
  g.metrics = {{"length", L},
               {"window", req.window},
               {"overlap", req.overlap},
               {"steps", req.steps},
               {"seed", req.seed},
               {"emotion_source", mec::to_string(req.source.kind)},
               {"lip_latent_rmse", std::sqrt(lip_err / static_cast<double>(l_gen.size()))},
               {"nearest_emotion", mec::kEmotionNames[nearest]}};
  if (req.source.kind == mec::SourceKind::text) g.metrics["keyword"] = mec::extract_keyword(req.source.text);
  if (L >= 200) {
    auto rep = eval::drift_metric(flat, 100);
    g.metrics["drift_slope"] = rep.slope;
    g.metrics["drift_slope_stderr"] = rep.slope_stderr;
    g.metrics["rms_first100"] = eval::segment_rms(flat, 0, 100);
    g.metrics["rms_final100"] = eval::segment_rms(flat, L - 100, L);
  }
  return g;
}

inline ckpt::Container generation_container(const Generation& g, const Config& c) {
  ckpt::Container out{"latents", c.hash(), g.metrics, {}};
  out.tensors = {{"frames", g.frames}, {"l_a", g.l_a}, {"e_dri", g.e_dri}};
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Lip retrieval top-1 over n held-out frames, one per sequence.
inline double lip_retrieval(const VaidModels& v, const EncoderPair& enc, const synth::World& world, std::size_t n,
                            std::uint64_t seed) {
  NoGradGuard ng;
  auto held = make_vaid_dataset(world, enc, n, 1, seed);
  std::vector<Tensor> la, lv;
  const std::size_t w = world.params().window;
  for (const auto& s : held) {
    la.push_back(v.projector(audio_windows(s.audio, 0, 1, w)));
    lv.push_back(s.l_v);
  }
  return eval::retrieval_sync_accuracy(concat(la, 0), concat(lv, 0));
}

struct RoleSeparation {
  double base_lip = 0, base_face = 0;
  double zero_lip_lip = 0, zero_lip_face = 0;
  double zero_exp_lip = 0, zero_exp_face = 0;

  double lip_ratio() const { return zero_lip_lip / base_lip; }
  double face_change_when_lip_zeroed() const { return std::abs(zero_lip_face / base_face - 1.0); }
  double face_ratio() const { return zero_exp_face / base_face; }
  double lip_change_when_exp_zeroed() const { return std::abs(zero_exp_lip / base_lip - 1.0); }
};

/// Region MSE of sampled clips against ground truth with all conditions,
/// with l_a zeroed and with e_dri zeroed.
inline RoleSeparation role_separation(const EthdBackbone& m, const std::vector<EthdSample>& held,
                                      const diffusion::NoiseSchedule& sched, int steps, std::size_t clip,
                                      std::uint64_t seed) {
  NoGradGuard ng;
  const auto& d = m.dims();
  const Tensor lip = reshape(RegionMasks::expand(m.masks().lip, d.c), {d.frame()});
  const Tensor face = reshape(RegionMasks::expand(m.masks().expression_gate(), d.c), {d.frame()});
  RoleSeparation r;
  const double n = static_cast<double>(held.size());
  for (std::size_t i = 0; i < held.size(); ++i) {
    const auto& s = held[i];
    const std::size_t f = std::min(clip, s.length());
    EthdCond c{s.x_ref, slice_rows(s.l_a, 0, f), s.e_ref, slice_rows(s.e_v, 0, f)};
    const Tensor target = frames_2d(slice_rows(s.frames, 0, f));
    auto run = [&](const EthdCond& cc, double& lip_acc, double& face_acc) {
      Tensor y = frames_2d(ethd_sample(m, cc, sched, steps, seed + i));
      lip_acc += masked_mse(y, target, lip).item() / n;
      face_acc += masked_mse(y, target, face).item() / n;
    };
    run(c, r.base_lip, r.base_face);
    EthdCond zl = c;
    zl.l_a = Tensor::zeros(c.l_a.shape());
    run(zl, r.zero_lip_lip, r.zero_lip_face);
    EthdCond ze = c;
    ze.e_dri = Tensor::zeros(c.e_dri.shape());
    run(ze, r.zero_exp_lip, r.zero_exp_face);
  }
  return r;
}

struct TransferResult {
  std::size_t trials = 0, hits = 0;
  double rate() const { return trials ? static_cast<double>(hits) / static_cast<double>(trials) : 0.0; }
};

/// Portrait with emotion A, driven by a text prompt naming emotion B != A.
/// A trial counts when the mean expression encoding of the generated frames
/// is closer to B's codebook entry than to A's.
inline TransferResult emotion_transfer(const Models& m, const synth::World& world,
                                       const diffusion::NoiseSchedule& sched, std::size_t trials, std::size_t length,
                                       int steps, std::uint64_t seed) {
  NoGradGuard ng;
  Rng rng(seed);
  TransferResult res;
  const std::size_t de = world.params().d_exp;
  for (std::size_t i = 0; i < trials; ++i) {
    const std::size_t a = rng.below(8);
    const std::size_t b = (a + 1 + rng.below(7)) % 8;
    Driving drv = driving_from_world(world, length, rng.fork(i).below(1ULL << 62), static_cast<int>(a));
    GenerateRequest req;
    req.length = length;
    req.seed = seed + 7919 * i;
    req.steps = steps;
    req.source = mec::EmotionSource::from_text(mec::kEmotionNames[b]);
    Tensor frames;
    {
      const auto& d = m.ethd.dims();
      Tensor l_a = m.vaid.projector(audio_windows(drv.audio, 0, length, world.params().window));
      Tensor e_dri = mec::resolve_emotion_source(req.source, resolver(m, sched, steps), drv.x_ref, drv.audio, length,
                                                 req.seed + 1);
      Tensor e_ref = reshape(m.enc.encode_expr(reshape(drv.x_ref, {1, d.frame()})), {de});
      frames = ethd_sample(m.ethd, {drv.x_ref, l_a, e_ref, e_dri}, sched, steps, req.seed);
    }
    Tensor e = m.enc.encode_expr(frames_2d(frames));
    double da = 0, db = 0;
    for (std::size_t k = 0; k < de; ++k) {
      double mu = 0;
      for (std::size_t t = 0; t < length; ++t) mu += e.data()[t * de + k] / static_cast<double>(length);
      da += std::pow(mu - m.mec.codebook.entries[a][k], 2);
      db += std::pow(mu - m.mec.codebook.entries[b][k], 2);
    }
    ++res.trials;
    res.hits += db < da;
  }
  return res;
}

}  // namespace etk::pipeline
