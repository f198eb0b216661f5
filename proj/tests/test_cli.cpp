#include <gtest/gtest.h>

#include <filesystem>

#include "etk/cli.hpp"

using namespace etk;
namespace fs = std::filesystem;

namespace {

const std::string kSmoke = std::string(ETK_CONFIG_DIR) + "/smoke.toml";

int etk_run(std::vector<std::string> args) {
  args.insert(args.begin(), "etk");
  std::vector<const char*> argv;
  for (auto& a : args) argv.push_back(a.c_str());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) { fs::remove_all(path); }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& sub = "") const { return (sub.empty() ? path : path / sub).string(); }
};

}  // namespace

TEST(Cli, UsageErrors) {
  TempDir d("etk_cli_usage");
  EXPECT_EQ(etk_run({}), cli::kUsage);
  EXPECT_EQ(etk_run({"fly"}), cli::kUsage);
  EXPECT_EQ(etk_run({"synth", "--bogus"}), cli::kUsage);
  EXPECT_EQ(etk_run({"synth", "--length", "0", "--out", d.str()}), cli::kUsage);
  EXPECT_EQ(etk_run({"generate", "--emotion-text", "happy", "--emotion-image", "x.etk", "--out", d.str()}),
            cli::kUsage);
}

TEST(Cli, MissingPrerequisitesAndBadConfig) {
  TempDir d("etk_cli_missing");
  EXPECT_EQ(etk_run({"train-vaid", "--config", kSmoke, "--out", d.str()}), cli::kMissing);
  EXPECT_EQ(etk_run({"generate", "--config", kSmoke, "--out", d.str()}), cli::kMissing);
  EXPECT_EQ(etk_run({"eval", "--config", kSmoke, "--out", d.str()}), cli::kMissing);
  EXPECT_EQ(etk_run({"synth", "--config", d.str("absent.toml"), "--out", d.str()}), cli::kConfig);
  fs::create_directories(d.path);
  std::ofstream(d.str("bad.toml")) << "[vaid]\nwarp = 9\n";
  EXPECT_EQ(etk_run({"synth", "--config", d.str("bad.toml"), "--out", d.str()}), cli::kConfig);
}

TEST(Cli, SynthIsDeterministic) {
  TempDir a("etk_cli_synth_a"), b("etk_cli_synth_b");
  ASSERT_EQ(etk_run({"synth", "--seed", "42", "--config", kSmoke, "--out", a.str()}), cli::kOk);
  ASSERT_EQ(etk_run({"synth", "--seed", "42", "--config", kSmoke, "--out", b.str()}), cli::kOk);
  EXPECT_EQ(ckpt::read_file(a.str("dataset.etk")), ckpt::read_file(b.str("dataset.etk")));
  EXPECT_EQ(ckpt::read_file(a.str("sources/sad.video.etk")), ckpt::read_file(b.str("sources/sad.video.etk")));
  ASSERT_EQ(etk_run({"synth", "--seed", "43", "--config", kSmoke, "--out", b.str()}), cli::kOk);
  EXPECT_NE(ckpt::read_file(a.str("dataset.etk")), ckpt::read_file(b.str("dataset.etk")));
}

TEST(Cli, FullPipelineProducesRequestedLength) {
  TempDir d("etk_cli_full");
  for (const char* stage : {"synth", "pretrain-encoders", "train-vaid", "train-ethd"})
    ASSERT_EQ(etk_run({stage, "--config", kSmoke, "--out", d.str()}), cli::kOk) << stage;
  ASSERT_EQ(etk_run({"generate", "--length", "250", "--emotion-text", "happy", "--config", kSmoke, "--out", d.str()}),
            cli::kOk);
  auto c = ckpt::load(d.str("latents.etk"), "latents");
  EXPECT_EQ(c.get("frames").dim(0), 250u);
  EXPECT_TRUE(fs::exists(d.str("generate.json")));

  for (const char* kind : {"audio", "image"})
    EXPECT_EQ(etk_run({"generate", "--length", "40", std::string("--emotion-") + kind,
                       d.str(std::string("sources/angry.") + kind + ".etk"), "--config", kSmoke, "--out", d.str()}),
              cli::kOk)
        << kind;
  // The synthesized video source holds the default 250 frames.
  EXPECT_EQ(etk_run({"generate", "--length", "250", "--emotion-video", d.str("sources/angry.video.etk"), "--config",
                     kSmoke, "--out", d.str()}),
            cli::kOk);
  EXPECT_EQ(etk_run({"generate", "--length", "100", "--emotion-video", d.str("sources/angry.video.etk"), "--config",
                     kSmoke, "--out", d.str()}),
            cli::kFailure);
  // A checkpoint from another kind is rejected rather than misread.
  fs::copy_file(d.str("vaid.etk"), d.str("ethd.etk"), fs::copy_options::overwrite_existing);
  EXPECT_EQ(etk_run({"generate", "--length", "40", "--config", kSmoke, "--out", d.str()}), cli::kFailure);
}
