#include <gtest/gtest.h>

#include <algorithm>

#include "dermagan/dataset.hpp"
#include "dermagan/error.hpp"
#include "dermagan/inversion.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace dermagan;
using namespace dermagan::testing;

namespace {

bool non_increasing(const std::vector<LossPoint>& trace) {
  for (std::size_t i = 1; i < trace.size(); ++i)
    if (trace[i].l2 > trace[i - 1].l2) return false;
  return true;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

}  // namespace

class InversionFixture : public ::testing::Test {
 protected:
  GanCheckpoint ckpt = GanCheckpoint::initialize(small_config());
  StyleGenerator& g = ckpt.generator_ema;
  FeatureEmbedder embedder;

  LatentCode some_w(std::uint64_t seed) { return map_latent(g, sample_z(16, seed)); }
};

TEST_F(InversionFixture, OracleInitializerReconstructsExactly) {
  auto w = some_w(3);
  auto image = synthesize(g, w);
  auto r = invert(image, g, [&](const ImageTensor&) { return w; }, nullptr, 0, embedder);
  ASSERT_EQ(r.loss_trace.size(), 1u);
  EXPECT_LT(r.loss_trace[0].l2, 1e-12);
  EXPECT_LT(r.loss_trace[0].lpips, 1e-8);
  EXPECT_TRUE(r.weight_offsets.empty());
}

TEST_F(InversionFixture, UntrainedHypernetChangesNothing) {
  auto hyper = HypernetModel::create(g, 8);
  auto w = some_w(5);
  auto image = synthesize(g, some_w(6));
  auto target = image.pixels.unsqueeze(0);
  auto ws = latents_to_batch(std::span(&w, 1), g->num_styles());
  torch::NoGradGuard guard;
  auto base = g->synthesize(ws, NoiseMode::fixed);
  auto offsets = hyper.net->forward(target, base);
  ASSERT_FALSE(offsets.empty());
  for (const auto& [layer, t] : offsets) EXPECT_EQ(t.abs().max().item<float>(), 0.0f) << layer;
  EXPECT_LT(max_abs_diff(g->synthesize(ws, NoiseMode::fixed, offsets), base), 1e-6);

  // Only medium and fine conv layers are targeted.
  auto coarse = g->layers_for("coarse");
  for (int layer : hyper.target_layers) {
    EXPECT_EQ(std::count(coarse.begin(), coarse.end(), layer), 0);
    EXPECT_NE(g->synthesis->layer_info()[layer].kind, LayerKind::to_rgb);
  }

  auto r = invert(image, g, [&](const ImageTensor&) { return w; }, &hyper, 4, embedder);
  ASSERT_EQ(r.loss_trace.size(), 5u);
  for (const auto& p : r.loss_trace) EXPECT_EQ(p.l2, r.loss_trace[0].l2);
}

TEST_F(InversionFixture, TraceIsNonIncreasingWithNoisyHypernet) {
  auto hyper = HypernetModel::create(g, 8);
  {
    torch::NoGradGuard guard;
    torch::manual_seed(11);
    for (auto& p : hyper.net->named_parameters())
      if (p.key().rfind("head", 0) == 0) p.value().normal_(0, 0.05);
  }
  int rejected = 0, accepted = 0;
  for (int i = 0; i < 6; ++i) {
    auto w = some_w(20 + i);
    auto image = synthesize(g, some_w(40 + i));
    auto r = invert(image, g, [&](const ImageTensor&) { return w; }, &hyper, 5, embedder);
    ASSERT_EQ(r.loss_trace.size(), 6u);
    EXPECT_TRUE(non_increasing(r.loss_trace));
    for (std::size_t t = 1; t < r.loss_trace.size(); ++t)
      (r.loss_trace[t].l2 == r.loss_trace[t - 1].l2 ? rejected : accepted)++;
  }
  EXPECT_GT(rejected + accepted, 0);
}

TEST_F(InversionFixture, InvertRejectsBadInput) {
  auto w = some_w(1);
  auto init = [&](const ImageTensor&) { return w; };
  EXPECT_THROW(invert(make_image(torch::zeros({3, 16, 16})), g, init, nullptr, 0, embedder),
               InvalidArgument);
  EXPECT_THROW(invert(synthesize(g, w), g, init, nullptr, -1, embedder), InvalidArgument);
}

TEST_F(InversionFixture, OptimizeLatentBasics) {
  auto w = some_w(2);
  auto image = synthesize(g, w);
  auto zero = optimize_latent(image, g, some_w(3), 0, 0.05, embedder);
  ASSERT_EQ(zero.loss_trace.size(), 1u);
  EXPECT_TRUE(torch::equal(zero.latent.values, some_w(3).values.to(torch::kFloat64)));

  auto exact = optimize_latent(image, g, w, 5, 0.05, embedder);
  EXPECT_LT(exact.loss_trace.front().l2, 1e-12);
  EXPECT_LT(exact.loss_trace.back().l2, 1e-12);

  auto moved = optimize_latent(image, g, some_w(9), 25, 0.05, embedder);
  ASSERT_EQ(moved.loss_trace.size(), 26u);
  EXPECT_TRUE(non_increasing(moved.loss_trace));
  EXPECT_LT(moved.loss_trace.back().l2, moved.loss_trace.front().l2);
  EXPECT_THROW(optimize_latent(image, g, sample_z(16, 1), 1, 0.05, embedder), InvalidArgument);
}

TEST_F(InversionFixture, GeneratedImagesInvertBetterThanToyImages) {
  TempDir dir;
  auto manifest = make_toy_dataset(
      {.n_per_class = 5, .classes = parse_class_spec("a"), .seed = 3, .resolution = 32}, dir.path());
  auto start = LatentCode{LatentSpace::W, g->mean_w.to(torch::kFloat64).clone()};
  std::vector<double> synthetic, real;
  for (int i = 0; i < 5; ++i) {
    auto fake = synthesize(g, some_w(60 + i));
    synthetic.push_back(optimize_latent(fake, g, start, 30, 0.05, embedder).loss_trace.back().l2);
    auto toy = manifest.load_image(manifest.entries[i]);
    real.push_back(optimize_latent(toy, g, start, 30, 0.05, embedder).loss_trace.back().l2);
  }
  EXPECT_LT(median(synthetic), median(real));
}

TEST(InversionLoss, GradientMatchesFiniteDifferencesAt16) {
  auto ckpt = GanCheckpoint::initialize(tiny_config(16));
  auto& g = ckpt.generator_ema;
  g->to(torch::kFloat64);
  FeatureEmbedder embedder;
  torch::manual_seed(8);
  auto ws = torch::randn({2, g->num_styles(), 4}, torch::kFloat64).requires_grad_(true);
  auto target = torch::rand({2, 3, 16, 16}, torch::kFloat64) * 2 - 1;
  auto r = grad_check([&] { return inversion_loss(g, ws, target, embedder, 0.8); }, {ws});
  EXPECT_LT(r.norm_relative, 1e-3);
  EXPECT_LT(r.worst_component, 1e-3);
}

TEST(ReconstructionLoss, ZeroForIdenticalImages) {
  FeatureEmbedder embedder;
  auto x = torch::rand({3, 3, 32, 32}) * 2 - 1;
  auto loss = reconstruction_loss(x, x, embedder, 0.8);
  EXPECT_EQ(loss.sizes(), (std::vector<std::int64_t>{3}));
  EXPECT_LT(loss.abs().max().item<double>(), 1e-7);
  auto y = x.flip({3});
  EXPECT_GT(reconstruction_loss(x, y, embedder, 0.8).min().item<double>(), 0.0);
}

TEST(InversionTraining, ShortRunsProduceUsableModels) {
  TempDir dir;
  auto manifest = make_toy_dataset(
      {.n_per_class = 10, .classes = parse_class_spec("a;b"), .seed = 5, .resolution = 32},
      dir / "toy");
  auto ckpt = GanCheckpoint::initialize(small_config());
  FeatureEmbedder embedder;
  InversionTrainOptions opt;
  opt.steps = 4;
  opt.batch = 4;
  EncoderTrainReport enc_report;
  auto encoder = train_encoder(manifest, ckpt, embedder, opt, &enc_report);
  EXPECT_TRUE(std::isfinite(enc_report.final_val_l2));
  EXPECT_GT(enc_report.mean_w_val_l2, 0.0);
  EXPECT_EQ(enc_report.loss_curve.size(), 4u);

  auto image = manifest.load_image(manifest.entries[0]);
  auto code = encoder.encode(image);
  EXPECT_EQ(code.space, LatentSpace::Wplus);
  EXPECT_EQ(code.values.size(0), ckpt.generator_ema->num_styles());

  encoder.save(dir / "enc.dgarc");
  auto enc_back = EncoderModel::load(dir / "enc.dgarc");
  EXPECT_TRUE(torch::equal(enc_back.encode(image).values, code.values));

  opt.steps = 2;
  HypernetTrainReport hyp_report;
  auto hyper = train_hypernet(manifest, ckpt, encoder, embedder, opt, &hyp_report);
  EXPECT_TRUE(std::isfinite(hyp_report.refined_val_l2));
  hyper.save(dir / "hyp.dgarc");
  auto hyp_back = HypernetModel::load(dir / "hyp.dgarc", ckpt.generator_ema);
  EXPECT_EQ(hyp_back.target_layers, hyper.target_layers);

  auto a = invert(image, ckpt.generator_ema, encoder, &hyper, 3, embedder);
  auto b = invert(image, ckpt.generator_ema, enc_back, &hyp_back, 3, embedder);
  ASSERT_EQ(a.loss_trace.size(), 4u);
  for (std::size_t i = 0; i < a.loss_trace.size(); ++i)
    EXPECT_EQ(a.loss_trace[i].l2, b.loss_trace[i].l2);

  a.source_id = "img-0";
  a.save(dir / "inv.dgarc");
  auto loaded = InversionResult::load(dir / "inv.dgarc");
  EXPECT_EQ(loaded.source_id, "img-0");
  EXPECT_TRUE(torch::equal(loaded.latent.values, a.latent.values));
  EXPECT_EQ(loaded.weight_offsets.size(), a.weight_offsets.size());
  EXPECT_EQ(loaded.loss_trace.size(), a.loss_trace.size());
}
