#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <utility>

#include "ssmil/checkpoint.hpp"
#include "ssmil/config.hpp"
#include "ssmil/error.hpp"
#include "test_util.hpp"

using namespace ssmil;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ssmil_ckpt_" + name);
  fs::remove_all(p);
  return p;
}

void expect_f32_equal(std::span<const double> a, std::span<const double> b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(static_cast<float>(a[i]), b[i]);
}

}  // namespace

TEST(Fnv1a, KnownVectors) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a("foobar"), 0x85944171f73967e8ULL);
  EXPECT_EQ(fnv1a("bar", fnv1a("foo")), fnv1a("foobar"));
  EXPECT_EQ(hex64(0xaf63dc4c8601ec8cULL), "af63dc4c8601ec8c");
  EXPECT_EQ(hex64(1), "0000000000000001");
}

TEST(Checkpoint, EncoderRoundTrip) {
  const Mlp enc = init_mlp({{9, 7, 5}, Activation::relu, Activation::tanh}, 4);
  const fs::path dir = scratch_dir("encoder");
  write_checkpoint(dir, encoder_checkpoint(enc, {{"method", "simclr"}}));
  const Checkpoint back = read_checkpoint(dir);
  EXPECT_EQ(back.kind, "encoder");
  EXPECT_EQ(back.meta.at("method"), "simclr");
  const Mlp restored = encoder_from_checkpoint(back);
  EXPECT_EQ(restored.arch().widths, enc.arch().widths);
  EXPECT_EQ(restored.hidden, Activation::relu);
  EXPECT_EQ(restored.output, Activation::tanh);
  const ConstParamList a = params_of(enc, "e"), b = params_of(restored, "e");
  for (std::size_t t = 0; t < a.size(); ++t) expect_f32_equal(a[t].values, b[t].values);

  const Mlp rounded = round_to_f32(enc);
  const ConstParamList r = params_of(rounded, "e");
  for (std::size_t t = 0; t < r.size(); ++t) EXPECT_TRUE(std::ranges::equal(r[t].values, b[t].values));

  // Rewriting the restored network reproduces identical bytes.
  const std::uint64_t h = checkpoint_hash(dir);
  const fs::path dir2 = scratch_dir("encoder2");
  write_checkpoint(dir2, encoder_checkpoint(restored, {{"method", "simclr"}}));
  EXPECT_EQ(checkpoint_hash(dir2), h);
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST(Checkpoint, MilRoundTripKeepsPredictions) {
  MilModel m = init_mil({.input_dim = 8, .reduced_dim = 4, .attention_hidden = 5, .n_classes = 3}, 6);
  std::mt19937_64 rng(6);
  m.scaler = FeatureScaler::fit(test::random_matrix(20, 8, rng, 2.0));
  const fs::path dir = scratch_dir("mil");
  write_checkpoint(dir, mil_checkpoint(m));
  const MilModel back = mil_from_checkpoint(read_checkpoint(dir));
  const ConstParamList a = mil_params(std::as_const(m)), b = mil_params(back);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t t = 0; t < a.size(); ++t) expect_f32_equal(a[t].values, b[t].values);
  expect_f32_equal(m.scaler.mean.values(), back.scaler.mean.values());
  expect_f32_equal(m.scaler.inv_std.values(), back.scaler.inv_std.values());
  const Matrix x = test::random_matrix(6, 8, rng);
  const BagPrediction p = predict_bag(x, m), q = predict_bag(x, back);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(p.probabilities[c], q.probabilities[c], 1e-5);
  fs::remove_all(dir);
}

TEST(Checkpoint, CorruptionIsDetected) {
  const Mlp enc = init_mlp({{4, 3}}, 1);
  const fs::path dir = scratch_dir("corrupt");
  write_checkpoint(dir, encoder_checkpoint(enc));
  const std::uint64_t before = checkpoint_hash(dir);
  fs::resize_file(dir / "params.bin", fs::file_size(dir / "params.bin") - 4);
  EXPECT_THROW(read_checkpoint(dir), Error);
  EXPECT_NE(checkpoint_hash(dir), before);
  EXPECT_THROW(read_checkpoint(scratch_dir("absent")), Error);
  fs::remove_all(dir);
}

TEST(Config, DefaultsResolve) {
  const ConfigMap m;
  const ExperimentConfig c = resolve(m);
  EXPECT_EQ(c.cv.k, 5u);
  EXPECT_EQ(c.cv.runs, 3u);
  EXPECT_EQ(c.synthetic.n_classes * c.synthetic.n_bags_per_class, 200u);
  EXPECT_EQ(c.mil.accumulation, 10u);
  EXPECT_EQ(c.mil.instance_cap, 500u);
  EXPECT_DOUBLE_EQ(c.mil.lr, 0.015);
}

TEST(Config, TextRoundTrip) {
  ConfigMap m;
  m.set("ssl.method", "dino");
  m.set("cv.runs", "2");
  m.set("ssl.flip_probability", "0.25");
  const ConfigMap back = ConfigMap::parse_text(m.to_text());
  EXPECT_EQ(back, m);
  EXPECT_EQ(back.hash(), m.hash());
  EXPECT_NE(ConfigMap().hash(), m.hash());
  EXPECT_EQ(back.get("ssl.method"), "dino");
  EXPECT_EQ(back.count("cv.runs"), 2u);
  EXPECT_DOUBLE_EQ(back.real("ssl.flip_probability"), 0.25);

  const ConfigMap commented = ConfigMap::parse_text("# note\n  cv.k = 4   # inline\n\n");
  EXPECT_EQ(commented.count("cv.k"), 4u);

  const fs::path file = fs::temp_directory_path() / "ssmil_config_test.txt";
  std::ofstream(file) << m.to_text();
  EXPECT_EQ(ConfigMap::parse_file(file), m);
  fs::remove(file);
}

TEST(Config, RejectsBadInput) {
  ConfigMap m;
  EXPECT_THROW(m.set("no.such.key", "1"), InvalidParameter);
  EXPECT_THROW(ConfigMap::parse_text("cv.k 4\n"), Error);
  EXPECT_THROW(ConfigMap::parse_text("bogus = 1\n"), InvalidParameter);
  m.set("cv.k", "four");
  EXPECT_THROW(resolve(m), Error);
  ConfigMap p;
  p.set("ssl.flip_probability", "1.5");
  EXPECT_THROW(resolve(p), InvalidParameter);
  ConfigMap t;
  t.set("ssl.method", "byol");
  EXPECT_THROW(resolve(t), Error);
}
