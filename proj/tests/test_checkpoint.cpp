#include <gtest/gtest.h>

#include <filesystem>

#include "etk/checkpoint.hpp"
#include "etk/ethd.hpp"

using namespace etk;
using ckpt::CheckpointError;
namespace fs = std::filesystem;

namespace {

Tensor randn(Shape s, Rng& rng) {
  const auto n = numel(s);
  return Tensor(std::move(s), rng.normals(n, 1.0));
}

EthdDims tiny_dims() {
  EthdDims d;
  d.h = d.w = 2, d.c = 2, d.d_lip = 2, d.d_exp = 2, d.d_model = 4, d.heads = 2, d.step_dim = 4;
  return d;
}

RegionMasks tiny_masks() { return RegionMasks{2, 2, {0, 0, 0, 1}, {0, 1, 1, 1}}; }

ckpt::Container sample_container() {
  Rng rng(1);
  ckpt::Container c{"dataset", "00ff", {{"labels", {1, 2, 3}}}, {}};
  c.tensors.push_back({"a", randn({2, 3}, rng)});
  c.tensors.push_back({"c", Tensor({1}, {0.25})});
  c.tensors.push_back({"b", randn({5}, rng)});
  return c;
}

CheckpointError::Kind error_kind(const std::string& bytes, const std::string& kind = "") {
  try {
    ckpt::deserialize(bytes, kind);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error";
  return CheckpointError::Kind::io;
}

}  // namespace

TEST(Checkpoint, Fnv1aKnownValues) {
  EXPECT_EQ(ckpt::fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(ckpt::hex64(ckpt::fnv1a("a")), "af63dc4c8601ec8c");
}

TEST(Checkpoint, ContainerRoundTripIsByteStable) {
  const auto c = sample_container();
  const auto bytes = ckpt::serialize(c);
  ASSERT_EQ(bytes.compare(0, 8, "ETKCKPT1"), 0);
  const auto back = ckpt::deserialize(bytes, "dataset");
  EXPECT_EQ(back.config_hash, "00ff");
  EXPECT_EQ(back.meta, c.meta);
  ASSERT_EQ(back.tensors.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.tensors[i].name, c.tensors[i].name);
    EXPECT_EQ(back.tensors[i].value.shape(), c.tensors[i].value.shape());
    for (std::size_t k = 0; k < c.tensors[i].value.size(); ++k)
      EXPECT_NEAR(back.tensors[i].value.data()[k], c.tensors[i].value.data()[k], 1e-6);
  }
  EXPECT_EQ(ckpt::serialize(back), bytes);
}

TEST(Checkpoint, ModelRoundTripPreservesForwardPass) {
  Rng rng(4);
  EthdBackbone a(tiny_dims(), tiny_masks(), rng), b(tiny_dims(), tiny_masks(), rng);
  // Non-zero value projections so every parameter reaches the output.
  for (auto& [name, t] : a.params()) {
    Tensor p = t;
    for (auto& v : p.mutable_data()) v = rng.normal(0.0, 0.3);
  }
  const fs::path dir = fs::temp_directory_path() / "etk_ckpt_test";
  fs::create_directories(dir);
  const auto p1 = (dir / "one.etk").string(), p2 = (dir / "two.etk").string();
  ckpt::save_params(p1, a.params(), "ethd", "abc");
  ckpt::load_params(p1, b.params(), "ethd");
  ckpt::save_params(p2, b.params(), "ethd", "abc");
  EXPECT_EQ(ckpt::read_file(p1), ckpt::read_file(p2));

  EthdCond c{randn({8}, rng), randn({3, 2}, rng), randn({2}, rng), randn({3, 2}, rng)};
  Tensor x = randn({3, 2, 2, 2}, rng);
  NoGradGuard ng;
  const auto ya = a(x, 300, c), yb = b(x, 300, c);
  double worst = 0;
  for (std::size_t i = 0; i < ya.size(); ++i) worst = std::max(worst, std::abs(ya.data()[i] - yb.data()[i]));
  EXPECT_LE(worst, 1e-6) << "max abs diff " << worst;
  RecordProperty("max_abs_diff", std::to_string(worst));
  fs::remove_all(dir);
}

TEST(Checkpoint, EmptyModelRoundTrip) {
  const ParamList none;
  const auto bytes = ckpt::serialize(ckpt::from_params(none, "empty", ""));
  const auto back = ckpt::deserialize(bytes, "empty");
  EXPECT_TRUE(back.tensors.empty());
  EXPECT_NO_THROW(ckpt::into_params(back, none));
}

TEST(Checkpoint, TypedErrors) {
  using K = CheckpointError::Kind;
  const auto good = ckpt::serialize(sample_container());
  EXPECT_EQ(error_kind(good, "ethd"), K::kind_mismatch);
  EXPECT_EQ(error_kind("short"), K::parse);
  EXPECT_EQ(error_kind("XXXXXXXX" + good.substr(8)), K::parse);
  EXPECT_EQ(error_kind(good.substr(0, good.size() - 3)), K::truncated);
  EXPECT_EQ(error_kind(good + "pad!"), K::layout);

  auto corrupt = good;
  corrupt[16] = '[';  // header no longer an object
  EXPECT_EQ(error_kind(corrupt), K::parse);
  corrupt = good;
  corrupt[17] = '#';
  EXPECT_EQ(error_kind(corrupt), K::parse);

  auto v2 = good;
  const auto at = v2.find("\"format_version\":1");
  ASSERT_NE(at, std::string::npos);
  v2[at + 17] = '2';
  EXPECT_EQ(error_kind(v2), K::version);

  auto huge = good;
  huge[15] = '\x7f';
  EXPECT_EQ(error_kind(huge), K::truncated);

  EXPECT_THROW(ckpt::load("/nonexistent/x.etk"), CheckpointError);
}

TEST(Checkpoint, IntoParamsRejectsMismatch) {
  Rng rng(2);
  EthdBackbone a(tiny_dims(), tiny_masks(), rng);
  auto c = ckpt::from_params(a.params(), "ethd", "");
  c.tensors.pop_back();
  EXPECT_THROW(ckpt::into_params(c, a.params()), CheckpointError);
  c = ckpt::from_params(a.params(), "ethd", "");
  c.tensors[0].name = "renamed";
  EXPECT_THROW(ckpt::into_params(c, a.params()), CheckpointError);
}
