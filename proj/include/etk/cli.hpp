#pragma once

// Command-line driver. Stages and their artifacts under --out:
//
//   synth              dataset.etk, sources/<emotion>.{audio,image,video}.etk
//   pretrain-encoders  encoders.etk, logs/encoders.jsonl
//   train-vaid         vaid.etk, mec.etk, logs/vaid.jsonl
//   train-ethd         ethd.etk, logs/ethd.jsonl
//   generate           latents.etk, generate.json
//   eval               eval.json
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage, 3 missing prerequisite,
// 4 config error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "etk/pipeline.hpp"

namespace etk::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum Exit : int { kOk = 0, kFailure = 1, kUsage = 2, kMissing = 3, kConfig = 4 };

class MissingPrerequisite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config, out = "run";
  std::optional<std::uint64_t> seed;
  std::size_t length = 250;
  std::optional<std::size_t> window, overlap;
  std::optional<int> steps;
  std::string emotion_text, emotion_audio, emotion_image, emotion_video;
};

namespace detail {

inline void write_text(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << s;
}

inline ckpt::Container require(const fs::path& p, const std::string& kind, const std::string& stage) {
  if (!fs::exists(p)) throw MissingPrerequisite(stage + " needs " + p.string() + "; run the earlier stage first");
  return ckpt::load(p.string(), kind);
}

template <class Records, class Fn>
std::string jsonl(const Records& rs, Fn&& to_json) {
  std::string out;
  for (const auto& r : rs) out += to_json(r).dump() + "\n";
  return out;
}

struct Loaded {
  synth::World world;
  pipeline::Models models;
};

inline Loaded load_models(const fs::path& out, const Config& cfg, const std::string& stage) {
  Loaded l{pipeline::make_world(cfg), {}};
  l.models.enc = pipeline::make_encoders(l.world, cfg);
  l.models.vaid = pipeline::make_vaid(cfg);
  l.models.ethd = pipeline::make_ethd(l.world, cfg);
  ckpt::into_params(require(out / "encoders.etk", "encoders", stage), l.models.enc.params());
  ckpt::into_params(require(out / "vaid.etk", "vaid", stage), pipeline::vaid_params(l.models.vaid));
  ckpt::into_params(require(out / "ethd.etk", "ethd", stage), l.models.ethd.params());
  l.models.mec = pipeline::mec_from(require(out / "mec.etk", "mec", stage), cfg);
  return l;
}

inline mec::EmotionSource emotion_source(const Options& o) {
  int given = !o.emotion_text.empty() + !o.emotion_audio.empty() + !o.emotion_image.empty() + !o.emotion_video.empty();
  if (given > 1) throw CLI::ValidationError("at most one --emotion-* source may be given");
  if (!o.emotion_text.empty()) return mec::EmotionSource::from_text(o.emotion_text);
  if (!o.emotion_audio.empty())
    return mec::EmotionSource::from_audio(ckpt::load(o.emotion_audio, "source").get("features"));
  if (!o.emotion_image.empty()) return mec::EmotionSource::from_image(ckpt::load(o.emotion_image, "source").get("image"));
  if (!o.emotion_video.empty()) return mec::EmotionSource::from_video(ckpt::load(o.emotion_video, "source").get("frames"));
  return {};
}

inline void apply_inference_flags(const Options& o, Config& cfg) {
  if (o.window) cfg.inference.window = *o.window;
  if (o.overlap) cfg.inference.overlap = *o.overlap;
  if (o.steps) cfg.inference.steps = *o.steps;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stages

inline void stage_synth(const Options& o, Config cfg) {
  if (o.seed) cfg.data.seed = *o.seed;
  const fs::path out = o.out;
  fs::create_directories(out / "sources");
  auto world = pipeline::make_world(cfg);
  auto data = pipeline::synthesize(world, cfg);
  ckpt::save((out / "dataset.etk").string(), pipeline::dataset_container(data, cfg));
  Rng rng(cfg.data.seed);
  Rng src = rng.fork(3);
  for (std::size_t e = 0; e < 8; ++e) {
    const std::string name = mec::kEmotionNames[e];
    auto feats = world.emotion_features(e, src);
    ckpt::Container a{"source", cfg.hash(), {{"emotion", name}}, {{"features", Tensor({feats.size()}, feats)}}};
    ckpt::save((out / "sources" / (name + ".audio.etk")).string(), a);
    auto s = world.random_sequence(1, src, static_cast<int>(e));
    const auto& wp = world.params();
    ckpt::Container im{"source", cfg.hash(), {{"emotion", name}}, {{"image", reshape(s.frames, {wp.h, wp.w_sp, wp.c})}}};
    ckpt::save((out / "sources" / (name + ".image.etk")).string(), im);
    auto v = world.random_sequence(o.length, src, static_cast<int>(e));
    ckpt::save((out / "sources" / (name + ".video.etk")).string(),
               ckpt::Container{"source", cfg.hash(), {{"emotion", name}}, {{"frames", v.frames}}});
  }
  std::cout << "synth: " << data.vaid.size() << " + " << data.ethd.size() << " sequences -> " << out.string() << "\n";
}

inline void stage_pretrain(const Options& o, Config cfg) {
  if (o.seed) cfg.encoders.seed = *o.seed;
  const fs::path out = o.out;
  auto world = pipeline::make_world(cfg);
  auto enc = pipeline::make_encoders(world, cfg);
  auto log = pipeline::train_encoders(enc, world, cfg);
  ckpt::save_params((out / "encoders.etk").string(), enc.params(), "encoders", cfg.hash());
  detail::write_text(out / "logs" / "encoders.jsonl", detail::jsonl(log, [](const PretrainRecord& r) {
                       return json{{"step", r.step}, {"config", to_string(r.config)}, {"loss", r.loss}};
                     }));
  std::cout << "pretrain-encoders: final loss " << log.back().loss << "\n";
}

inline void stage_train_vaid(const Options& o, Config cfg) {
  if (o.seed) cfg.vaid.seed = *o.seed;
  const fs::path out = o.out;
  auto world = pipeline::make_world(cfg);
  auto data = pipeline::dataset_from(detail::require(out / "dataset.etk", "dataset", "train-vaid"), world);
  auto enc = pipeline::make_encoders(world, cfg);
  ckpt::into_params(detail::require(out / "encoders.etk", "encoders", "train-vaid"), enc.params());
  diffusion::NoiseSchedule sched;
  auto models = pipeline::make_vaid(cfg);
  auto log = pipeline::train_vaid(models, enc, data, sched, cfg);
  ckpt::save_params((out / "vaid.etk").string(), pipeline::vaid_params(models), "vaid", cfg.hash());
  ckpt::save((out / "mec.etk").string(), pipeline::mec_container(pipeline::build_mec(world, enc, cfg), cfg));
  detail::write_text(out / "logs" / "vaid.jsonl", detail::jsonl(log, [](const JointLogRecord& r) {
                       return json{{"step", r.step},         {"lip_total", r.lip_total}, {"lip_contrastive", r.lip_contrastive},
                                   {"lip_mse", r.lip_mse},   {"expr", r.expr},           {"club", r.club},
                                   {"total", r.total}};
                     }));
  std::cout << "train-vaid: final total " << log.back().total << "\n";
}

inline void stage_train_ethd(const Options& o, Config cfg) {
  if (o.seed) cfg.ethd.seed = *o.seed;
  const fs::path out = o.out;
  auto world = pipeline::make_world(cfg);
  auto vaid_ck = detail::require(out / "vaid.etk", "vaid", "train-ethd");
  auto data = pipeline::dataset_from(detail::require(out / "dataset.etk", "dataset", "train-ethd"), world);
  auto enc = pipeline::make_encoders(world, cfg);
  ckpt::into_params(detail::require(out / "encoders.etk", "encoders", "train-ethd"), enc.params());
  auto vaid = pipeline::make_vaid(cfg);
  ckpt::into_params(vaid_ck, pipeline::vaid_params(vaid));
  diffusion::NoiseSchedule sched;
  auto samples = pipeline::ethd_samples(data.ethd, enc, vaid, sched, cfg);
  auto model = pipeline::make_ethd(world, cfg);
  auto log = train_ethd(model, samples, sched, cfg.ethd);
  ckpt::save_params((out / "ethd.etk").string(), model.params(), "ethd", cfg.hash());
  std::vector<std::pair<std::size_t, double>> rows;
  for (std::size_t i = 0; i < log.size(); ++i) rows.emplace_back(i, log[i]);
  detail::write_text(out / "logs" / "ethd.jsonl", detail::jsonl(rows, [](const auto& r) {
                       return json{{"step", r.first}, {"loss", r.second}};
                     }));
  std::cout << "train-ethd: final loss " << log.back() << "\n";
}

inline void stage_generate(const Options& o, Config cfg) {
  detail::apply_inference_flags(o, cfg);
  const fs::path out = o.out;
  pipeline::GenerateRequest req;
  req.source = detail::emotion_source(o);
  auto loaded = detail::load_models(out, cfg, "generate");
  req.length = o.length;
  req.seed = o.seed.value_or(0);
  req.window = cfg.inference.window;
  req.overlap = cfg.inference.overlap;
  req.steps = cfg.inference.steps;
  auto drv = pipeline::driving_from_world(loaded.world, req.length, req.seed + 17);
  diffusion::NoiseSchedule sched;
  auto g = pipeline::generate(loaded.models, drv, req, sched);
  ckpt::save((out / "latents.etk").string(), pipeline::generation_container(g, cfg));
  detail::write_text(out / "generate.json", g.metrics.dump(2) + "\n");
  std::cout << g.metrics.dump() << "\n";
}

inline void stage_eval(const Options& o, Config cfg) {
  detail::apply_inference_flags(o, cfg);
  const fs::path out = o.out;
  auto loaded = detail::load_models(out, cfg, "eval");
  auto& m = loaded.models;
  const std::uint64_t seed = o.seed.value_or(1000);
  diffusion::NoiseSchedule sched;
  json report;
  report["lip_retrieval_top1_n64"] = pipeline::lip_retrieval(m.vaid, m.enc, loaded.world, 64, seed);

  Rng rng(seed);
  std::vector<synth::Sequence> held;
  for (std::size_t i = 0; i < 8; ++i) {
    Rng r = rng.fork(i);
    held.push_back(loaded.world.random_sequence(8, r));
  }
  auto samples = pipeline::ethd_samples(held, m.enc, m.vaid, sched, cfg);
  auto rs = pipeline::role_separation(m.ethd, samples, sched, cfg.inference.steps, 8, seed);
  report["role_separation"] = {{"base_lip_mse", rs.base_lip},        {"base_face_mse", rs.base_face},
                               {"zero_l_lip_mse", rs.zero_lip_lip},  {"zero_l_face_mse", rs.zero_lip_face},
                               {"zero_e_lip_mse", rs.zero_exp_lip},  {"zero_e_face_mse", rs.zero_exp_face}};

  // Expression Frechet distance between generated and real clips.
  std::vector<Tensor> real, gen;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    NoGradGuard ng;
    Tensor y = ethd_sample(m.ethd, {s.x_ref, s.l_a, s.e_ref, s.e_v}, sched, cfg.inference.steps, seed + i);
    gen.push_back(m.enc.encode_expr(pipeline::frames_2d(y)));
    real.push_back(s.e_v);
  }
  report["expression_frechet"] = eval::frechet_distance(eval::FeatureSet::from_samples(concat(real, 0)),
                                                        eval::FeatureSet::from_samples(concat(gen, 0)));
  auto tr = pipeline::emotion_transfer(m, loaded.world, sched, 10, 8, cfg.inference.steps, seed);
  report["emotion_transfer_rate_10"] = tr.rate();
  detail::write_text(out / "eval.json", report.dump(2) + "\n");
  std::cout << report.dump() << "\n";
}

// ---------------------------------------------------------------------------

/// Parses argv and runs one stage. Never throws.
inline int run(int argc, const char* const* argv) {
  CLI::App app{"desk-scale emotional talking-head pipeline"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* s) {
    s->add_option("--config", o.config, "config file (key = value)");
    s->add_option("--out", o.out, "artifact directory");
    s->add_option("--seed", o.seed, "stage seed override");
  };
  std::vector<std::pair<std::string, void (*)(const Options&, Config)>> stages = {
      {"synth", stage_synth},           {"pretrain-encoders", stage_pretrain}, {"train-vaid", stage_train_vaid},
      {"train-ethd", stage_train_ethd}, {"generate", stage_generate},          {"eval", stage_eval}};
  std::vector<CLI::App*> subs;
  for (const auto& [name, fn] : stages) {
    auto* s = app.add_subcommand(name);
    common(s);
    if (name == "generate" || name == "eval") {
      s->add_option("--window", o.window);
      s->add_option("--overlap", o.overlap);
      s->add_option("--steps", o.steps);
    }
    if (name == "generate" || name == "synth") {
      s->add_option("--length", o.length, "frames to generate; for synth, the video source length")->check(CLI::PositiveNumber);
    }
    if (name == "generate") {
      s->add_option("--emotion-text", o.emotion_text);
      s->add_option("--emotion-audio", o.emotion_audio, "source file with a 'features' tensor");
      s->add_option("--emotion-image", o.emotion_image, "source file with an 'image' tensor");
      s->add_option("--emotion-video", o.emotion_video, "source file with a 'frames' tensor");
    }
    subs.push_back(s);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }
  try {
    Config cfg = o.config.empty() ? Config::paper() : load_config(o.config);
    for (std::size_t i = 0; i < subs.size(); ++i)
      if (subs[i]->parsed()) {
        fs::create_directories(o.out);
        stages[i].second(o, cfg);
      }
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const MissingPrerequisite& e) {
    std::cerr << "missing prerequisite: " << e.what() << "\n";
    return kMissing;
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace etk::cli
