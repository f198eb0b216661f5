// Acceptance run: one PASS/FAIL line per criterion, exit code 1 if any fails.
// Trained-model criteria share one desk-scale training run.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "etk/cli.hpp"
#include "etk/pipeline.hpp"

using namespace etk;
namespace fs = std::filesystem;

namespace {

int failures = 0;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void report(int id, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %2d: %s\n", pass ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
  failures += !pass;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensor randn(Shape s, Rng& rng, double sigma = 1.0) {
  const auto n = numel(s);
  return Tensor(std::move(s), rng.normals(n, sigma));
}

void randomize_values(MultiHeadAttention& a, Rng& rng) {
  a.to_v = Linear(a.to_v.in_features(), a.to_v.out_features(), rng);
}

RegionMasks tiny_masks() { return RegionMasks{2, 2, {0, 0, 0, 1}, {0, 1, 1, 1}}; }

// ---------------------------------------------------------------------------

void criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  int checks = 0, passed = 0;
  auto check = [&](const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
    auto r = finite_diff_check(f, x, 1e-4);
    worst = std::max(worst, r.max_rel_err);
    ++checks;
    passed += r.pass;
  };
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Tensor target = randn({5, 3}, rng);
    check([&](const Tensor& x) { return infonce_loss(x, target, 0.5); }, randn({5, 3}, rng));
    check([&](const Tensor& x) { return lip_alignment_loss(x, target, 0.5, 1.0, 1.0).total; }, randn({5, 3}, rng));
    ClubEstimator est(3, 2, 6, rng);
    Tensor e = randn({5, 2}, rng), l = randn({5, 3}, rng);
    check([&](const Tensor& x) { return est.upper_bound(x, e); }, l);
    check([&](const Tensor& x) { return est.upper_bound(l, x); }, e);

    DiCteDims dd;
    dd.window = 2, dd.d_audio = 2, dd.d_exp = 2, dd.frame = 4, dd.audio_feat = 3, dd.d_model = 4, dd.step_dim = 4;
    dd.train_length = 6, dd.guide = 2;
    dd.schedule = diffusion::NoiseSchedule(50, 1e-3, 0.05);
    DiCteDenoiser dn(dd, rng);
    VaidSample s;
    s.audio = randn({6, 2}, rng);
    s.l_v = randn({5, 2}, rng);
    s.e_v = randn({5, 2}, rng);
    s.x_ref = randn({4}, rng);
    Rng ir(seed + 1);
    auto item = dicte_training_item(dn, s, 0, 5, dd.schedule, 1.0, ir);
    check([&](const Tensor& x) {
      DiCteInput in = item.input;
      in.e_t = x;
      return diffusion::denoising_loss(diffusion::PredKind::x0, item.target, dn(in));
    }, item.input.e_t);

    const auto masks = tiny_masks();
    EdiBlock edi(2, 4, 2, rng);
    randomize_values(edi.attn, rng);
    Tensor e_dri = randn({2, 2}, rng), e_ref = randn({2}, rng), tgt = randn({2, 4, 4}, rng);
    check([&](const Tensor& h) { return mse(edi(h, e_dri, e_ref, cell_gate(masks, 4)), tgt); }, randn({2, 4, 4}, rng));
    Tensor h_fixed = randn({2, 4, 4}, rng);
    check([&](const Tensor& x) { return mse(edi(h_fixed, x, e_ref, cell_gate(masks, 4)), tgt); }, e_dri);

    EthdDims ed;
    ed.h = ed.w = 2, ed.c = 2, ed.d_lip = 2, ed.d_exp = 2, ed.d_model = 4, ed.heads = 2, ed.step_dim = 4;
    EthdBackbone bb(ed, masks, rng);
    for (auto& st : bb.stages) {
      randomize_values(st.lip, rng);
      randomize_values(st.edi.attn, rng);
      randomize_values(st.texpr.attn, rng);
    }
    TemporalExprCross tc(2, 4, 2, rng);
    randomize_values(tc.attn, rng);
    Tensor tg = randn({4, 3, 4}, rng), te = randn({3, 2}, rng);
    check([&](const Tensor& h) { return mse(tc(h, te, bb.temporal_gate(3)), tg); }, randn({4, 3, 4}, rng));
    Tensor th = randn({4, 3, 4}, rng);
    check([&](const Tensor& x) { return mse(tc(th, x, bb.temporal_gate(3)), tg); }, te);

    EthdCond c{randn({8}, rng), randn({2, 2}, rng), randn({2}, rng), randn({2, 2}, rng)};
    Tensor xt = randn({2, 2, 2, 2}, rng), x0 = randn({2, 2, 2, 2}, rng);
    const int t = 1 + static_cast<int>(rng.below(1000));
    check([&](const Tensor& x) { return mse(bb(x, t, c), x0); }, xt);
    check([&](const Tensor& x) {
      auto cc = c;
      cc.l_a = x;
      return mse(bb(xt, t, cc), x0);
    }, c.l_a);
  }
  const double secs = seconds_since(t0);
  report(1, passed == checks && secs < 120,
         fmt("finite differences %d/%d within 1e-4 (max rel err %.2e), 10 seeds x 11 checks, %.1f s", passed, checks,
             worst, secs));
}

void criterion2() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto masks = tiny_masks();
  const auto g = masks.expression_gate();
  int ok = 0;
  for (int i = 0; i < 100; ++i) {
    Rng rng(5000 + static_cast<std::uint64_t>(i));
    const std::size_t f = 1 + rng.below(4), d = 4;
    EdiBlock edi(3, d, 2, rng);
    randomize_values(edi.attn, rng);
    Tensor H = randn({f, 4, d}, rng), e = randn({f, 3}, rng);
    bool good = edi(H, e, e, cell_gate(masks, d)).data() == H.data();
    Tensor y = edi(H, e, randn({f, 3}, rng), cell_gate(masks, d));
    for (std::size_t fr = 0; fr < f; ++fr)
      for (std::size_t cell = 0; cell < 4; ++cell)
        for (std::size_t k = 0; k < d; ++k) {
          const std::size_t idx = (fr * 4 + cell) * d + k;
          if (g[cell] == 0.0) good = good && y.data()[idx] == H.data()[idx];
        }
    ok += good;
  }
  const double secs = seconds_since(t0);
  report(2, ok == 100 && secs < 10, fmt("EDI identity and gating bit-exact on %d/100 instances, %.2f s", ok, secs));
}

void criterion3() {
  const auto t0 = std::chrono::steady_clock::now();
  diffusion::NoiseSchedule s;
  Tensor target({5}, {0.5, -1.0, 2.0, 3.25, -0.75});
  double point_err = 0;
  for (int steps : {1, 5, 25}) {
    auto y = diffusion::sample([&](const Tensor&, int) { return target; }, s, {5}, 99, {.steps = steps});
    for (std::size_t i = 0; i < 5; ++i) point_err = std::max(point_err, std::abs(y.data()[i] - target.data()[i]));
  }
  // Exact Gaussian posterior mean; 100 steps brings the sampler to the target law.
  const double mu = 1.5, sigma = 0.5;
  auto den = [&](const Tensor& x, int t) {
    const double ab = s.alpha_bar(t), k = std::sqrt(ab) * sigma * sigma / (ab * sigma * sigma + 1.0 - ab);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = mu + k * (x.data()[i] - std::sqrt(ab) * mu);
    return Tensor(x.shape(), std::move(out));
  };
  auto y = diffusion::sample(den, s, {10000}, 2024, {.steps = 100}).data();
  double m = 0, v = 0;
  for (double x : y) m += x / 10000.0;
  for (double x : y) v += (x - m) * (x - m) / 10000.0;
  const double mean_rel = std::abs(m - mu) / mu, var_rel = std::abs(v - sigma * sigma) / (sigma * sigma);
  const double secs = seconds_since(t0);
  report(3, point_err <= 1e-10 && mean_rel < 0.05 && var_rel < 0.10 && secs < 60,
         fmt("point mass max err %.1e (steps 1/5/25); Gaussian mean err %.2f%%, variance err %.2f%% over 10k; %.1f s",
             point_err, 100 * mean_rel, 100 * var_rel, secs));
}

void criterion4() {
  const auto t0 = std::chrono::steady_clock::now();
  diffusion::NoiseSchedule s;
  auto toy = [](const Tensor& x, int t) {
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = 0.6 * std::tanh(x.data()[i]) + 1e-4 * t;
    return Tensor(x.shape(), std::move(y));
  };
  int equal = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t len = 10 + 9 * seed;
    auto a = sched::generate_long([&](const Tensor& x, int t, const sched::Clip&) { return toy(x, t); }, {3}, len, s,
                                  seed, {.window = 120, .overlap = 24});
    auto b = diffusion::sample(toy, s, {len, 3}, seed);
    equal += a.data() == b.data();
  }
  Rng rng(77);
  int sweep_ok = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t window = 2 + rng.below(127), overlap = 1 + rng.below(window - 1), length = 1 + rng.below(2000);
    const auto plan = sched::plan_windows(length, window, overlap);
    const auto fw = sched::fusion_weights(plan);
    std::vector<int> cover(length, 0);
    std::vector<double> total(length, 0.0);
    for (std::size_t k = 0; k < plan.clips.size(); ++k)
      for (std::size_t p = 0; p < plan.clips[k].size(); ++p) {
        ++cover[plan.clips[k].start + p];
        total[plan.clips[k].start + p] += fw.per_clip[k][p];
      }
    bool good = true;
    for (std::size_t i = 0; i < length; ++i) good = good && cover[i] >= 1 && std::abs(total[i] - 1.0) <= 1e-12;
    sweep_ok += good;
  }
  const double secs = seconds_since(t0);
  report(4, equal == 10 && sweep_ok == 1000 && secs < 30,
         fmt("single-window equivalence %d/10 seeds bit-exact; coverage and partition of unity %d/1000; %.1f s", equal,
             sweep_ok, secs));
}

void criterion10() {
  Rng rng(3);
  Tensor x = randn({300, 5}, rng);
  const double same = eval::frechet_distance(x, x);
  Eigen::VectorXd a = Eigen::VectorXd::Zero(5), b = Eigen::VectorXd::Zero(5);
  b(1) = 1.0;
  Eigen::MatrixXd I = Eigen::MatrixXd::Identity(5, 5);
  const double shift =
      eval::frechet_distance(eval::FeatureSet::from_moments(a, I), eval::FeatureSet::from_moments(b, I));
  report(10, std::abs(same) <= 1e-8 && std::abs(shift - 1.0) <= 1e-6,
         fmt("identical set %.2e; unit mean shift gives %.9f", same, shift));
}

// ---------------------------------------------------------------------------
// Trained-model criteria

struct Trained {
  Config cfg = Config::desk();
  synth::World world{cfg.world};
  diffusion::NoiseSchedule sched;
  pipeline::Models m;
  std::vector<JointLogRecord> vaid_log;
  double vaid_secs = 0;
};

void train_all(Trained& tr) {
  auto t0 = std::chrono::steady_clock::now();
  tr.m.enc = pipeline::make_encoders(tr.world, tr.cfg);
  pipeline::train_encoders(tr.m.enc, tr.world, tr.cfg);
  const auto data = pipeline::synthesize(tr.world, tr.cfg);
  std::printf("  encoders trained in %.1f s\n", seconds_since(t0));
  t0 = std::chrono::steady_clock::now();
  tr.m.vaid = pipeline::make_vaid(tr.cfg);
  tr.vaid_log = pipeline::train_vaid(tr.m.vaid, tr.m.enc, data, tr.sched, tr.cfg);
  tr.vaid_secs = seconds_since(t0);
  std::printf("  V-AID trained in %.1f s\n", tr.vaid_secs);
  t0 = std::chrono::steady_clock::now();
  tr.m.mec = pipeline::build_mec(tr.world, tr.m.enc, tr.cfg);
  auto samples = pipeline::ethd_samples(data.ethd, tr.m.enc, tr.m.vaid, tr.sched, tr.cfg);
  tr.m.ethd = pipeline::make_ethd(tr.world, tr.cfg);
  auto log = train_ethd(tr.m.ethd, samples, tr.sched, tr.cfg.ethd);
  std::printf("  MEC built and ETHD trained in %.1f s (loss %.4f -> %.4f)\n", seconds_since(t0), log.front(), log.back());
  std::fflush(stdout);
}

void criterion5(const Trained& tr) {
  const auto& log = tr.vaid_log;
  double early = 0, late = 0;
  for (std::size_t i = 50; i < 150; ++i) early += log[i].club / 100.0;
  for (std::size_t i = log.size() - 100; i < log.size(); ++i) late += log[i].club / 100.0;
  const double acc = pipeline::lip_retrieval(tr.m.vaid, tr.m.enc, tr.world, 64, 777);
  const double drop = 1.0 - late / early;
  report(5, acc > 0.95 && drop >= 0.5 && log.size() <= 5000 && tr.vaid_secs < 600,
         fmt("retrieval top-1 %.3f at N=64; CLUB %.4f (steps 50-149) -> %.4f (last 100), drop %.0f%%; %zu steps, %.0f s",
             acc, early, late, 100 * drop, log.size(), tr.vaid_secs));
}

std::vector<EthdSample> held_ethd(const Trained& tr, std::size_t n, std::size_t len, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<synth::Sequence> seqs;
  for (std::size_t i = 0; i < n; ++i) {
    Rng r = rng.fork(i);
    seqs.push_back(tr.world.random_sequence(len, r));
  }
  return pipeline::ethd_samples(seqs, tr.m.enc, tr.m.vaid, tr.sched, tr.cfg);
}

void criterion6(const Trained& tr) {
  auto held = held_ethd(tr, 16, 8, 4242);
  const auto t0 = std::chrono::steady_clock::now();
  auto r = pipeline::role_separation(tr.m.ethd, held, tr.sched, 25, 8, 99);
  const double secs = seconds_since(t0);
  const bool pass = r.lip_ratio() >= 3 && r.face_change_when_lip_zeroed() < 0.5 && r.face_ratio() >= 3 &&
                    r.lip_change_when_exp_zeroed() < 0.5 && secs < 120;
  report(6, pass,
         fmt("zero l_a: lip MSE x%.2f, face change %.0f%%; zero e_dri: face MSE x%.2f, lip change %.0f%% "
             "(base lip %.4f, face %.4f); %.1f s",
             r.lip_ratio(), 100 * r.face_change_when_lip_zeroed(), r.face_ratio(), 100 * r.lip_change_when_exp_zeroed(),
             r.base_lip, r.base_face, secs));
}

void criterion7(const Trained& tr) {
  const auto t0 = std::chrono::steady_clock::now();
  auto res = pipeline::emotion_transfer(tr.m, tr.world, tr.sched, 100, 8, 25, 31337);
  report(7, res.rate() >= 0.9,
         fmt("closer to the driving emotion's centroid in %zu/%zu trials; %.1f s", res.hits, res.trials,
             seconds_since(t0)));
}

void criterion8(const Trained& tr) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t L = 1500;
  auto drv = pipeline::driving_from_world(tr.world, L, 2718);
  pipeline::GenerateRequest req;
  req.length = L;
  req.seed = 5;
  auto g = pipeline::generate(tr.m, drv, req, tr.sched);
  const double secs = seconds_since(t0);
  const double slope = g.metrics["drift_slope"], se = g.metrics["drift_slope_stderr"];
  const double first = g.metrics["rms_first100"], last = g.metrics["rms_final100"];
  report(8, slope <= 3 * se && last <= 1.2 * first && secs < 300,
         fmt("1500 frames, window 120/24: drift slope %.2e (3 SE %.2e); final-100 RMS %.4f vs first-100 %.4f (x%.3f); %.0f s",
             slope, 3 * se, last, first, last / first, secs));
}

void criterion9(const Trained& tr) {
  const auto t0 = std::chrono::steady_clock::now();
  auto held = make_vaid_dataset(tr.world, tr.m.enc, 8, 440, 9090);
  double mean = 0, worst = 0;
  for (std::size_t i = 0; i < held.size(); ++i) {
    const auto& s = held[i];
    auto g = dicte_generate(tr.m.vaid.dicte, s.x_ref, s.audio, reshape(slice_rows(s.e_v, 0, 1), {s.e_v.dim(1)}), 440,
                            tr.sched, 25, 100 + i);
    mean += g.splice_rms.at(0) / static_cast<double>(held.size());
    worst = std::max(worst, g.splice_rms.at(0));
  }
  const double secs = seconds_since(t0);
  report(9, mean < 0.1 && secs < 60,
         fmt("440-frame Di-CTE splice RMS over the 20 guide frames: mean %.4f, max %.4f over 8 tracks; %.1f s", mean,
             worst, secs));
}

// ---------------------------------------------------------------------------

bool same_tree(const fs::path& a, const fs::path& b, std::size_t& files) {
  std::vector<fs::path> rel;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), a));
  std::size_t nb = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) nb += e.is_regular_file();
  files = rel.size();
  if (nb != rel.size()) return false;
  for (const auto& r : rel)
    if (!fs::exists(b / r) || ckpt::read_file((a / r).string()) != ckpt::read_file((b / r).string())) return false;
  return true;
}

void criterion11(const std::string& config) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path root = fs::temp_directory_path() / "etk_acceptance_repro";
  fs::remove_all(root);
  int rc = 0;
  for (const char* run : {"a", "b"}) {
    const std::string out = (root / run).string();
    std::vector<std::vector<std::string>> cmds = {
        {"synth", "--seed", "42", "--length", "40"},
        {"pretrain-encoders"},
        {"train-vaid"},
        {"train-ethd"},
        {"generate", "--length", "70", "--emotion-text", "happy"},
        {"eval"}};
    for (auto& c : cmds) {
      std::vector<std::string> args = {"etk"};
      args.insert(args.end(), c.begin(), c.end());
      args.insert(args.end(), {"--config", config, "--out", out});
      std::vector<const char*> argv;
      for (auto& s : args) argv.push_back(s.c_str());
      rc |= cli::run(static_cast<int>(argv.size()), argv.data());
    }
  }
  std::size_t files = 0;
  const bool same = rc == 0 && same_tree(root / "a", root / "b", files);
  report(11, same,
         fmt("all six stages run twice with the same config and seeds: exit %d, %zu artifacts byte-identical: %s; %.1f s",
             rc, files, same ? "yes" : "no", seconds_since(t0)));
  fs::remove_all(root);
}

}  // namespace

int main(int argc, char** argv) {
  const std::string smoke = argc > 1 ? argv[1] : "configs/smoke.toml";
  criterion1();
  criterion2();
  criterion3();
  criterion4();
  criterion10();
  criterion11(smoke);
  Trained tr;
  train_all(tr);
  criterion5(tr);
  criterion6(tr);
  criterion7(tr);
  criterion8(tr);
  criterion9(tr);
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
