#include <gtest/gtest.h>

#include <algorithm>

#include "dermagan/dataset.hpp"
#include "dermagan/error.hpp"
#include "dermagan/metrics.hpp"
#include "support.hpp"

using namespace dermagan;

namespace {

GaussianFit gaussian_1d(double mean, double variance) {
  GaussianFit g;
  g.mean = Eigen::VectorXd::Constant(1, mean);
  g.covariance = Eigen::MatrixXd::Constant(1, 1, variance);
  g.n_samples = 100;
  return g;
}

std::vector<ImageTensor> toy_images(int n, int resolution, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<ImageTensor> out;
  for (int i = 0; i < n; ++i) {
    ToyBlobParams p;
    p.lesion_radius = 0.1 + 0.2 * u(rng);
    p.lesion_pigment = u(rng);
    p.skin_tone = u(rng);
    p.texture_seed = rng();
    out.push_back(render_toy_blob(p, resolution));
  }
  return out;
}

ImageTensor add_noise(const ImageTensor& img, double amplitude, std::uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  return make_image(img.pixels + amplitude * at::randn(img.pixels.sizes(), gen));
}

}  // namespace

TEST(FitGaussian, HandComputedExample) {
  Eigen::MatrixXd x(2, 2);
  x << 0, 0, 2, 0;
  auto g = fit_gaussian(x);
  EXPECT_DOUBLE_EQ(g.mean(0), 1.0);
  EXPECT_DOUBLE_EQ(g.mean(1), 0.0);
  EXPECT_DOUBLE_EQ(g.covariance(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(g.covariance(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(g.covariance(1, 1), 0.0);
  EXPECT_EQ(g.n_samples, 2);
}

TEST(FitGaussian, IdenticalRowsAndColumnMeans) {
  Eigen::MatrixXd same(3, 4);
  same.rowwise() = Eigen::RowVector4d(1, 2, 3, 4);
  EXPECT_EQ(fit_gaussian(same).covariance, Eigen::MatrixXd::Zero(4, 4));

  Eigen::MatrixXd r = Eigen::MatrixXd::Random(50, 6);
  auto g = fit_gaussian(r);
  EXPECT_LT((g.mean - r.colwise().mean().transpose()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(fit_gaussian(Eigen::MatrixXd::Zero(1, 3)), InvalidArgument);
}

TEST(Frechet, ClosedForms) {
  EXPECT_NEAR(frechet_distance(gaussian_1d(0, 1), gaussian_1d(1, 1)), 1.0, 1e-8);
  EXPECT_NEAR(frechet_distance(gaussian_1d(0, 1), gaussian_1d(0, 4)), 1.0, 1e-8);
  EXPECT_NEAR(frechet_distance(gaussian_1d(2, 9), gaussian_1d(-1, 1)), 9.0 + 4.0, 1e-8);
}

TEST(Frechet, IdentitySymmetryNonNegativity) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::MatrixXd xa = Eigen::MatrixXd::Random(40, 5);
    Eigen::MatrixXd xb = Eigen::MatrixXd::Random(40, 5) * 1.5;
    xb.col(0).array() += 0.3;
    auto a = fit_gaussian(xa), b = fit_gaussian(xb);
    EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-6);
    EXPECT_NEAR(frechet_distance(a, b), frechet_distance(b, a), 1e-9);
    EXPECT_GE(frechet_distance(a, b), -1e-6);
  }
}

TEST(Frechet, CommutingCovariancesMatchSimplifiedForm) {
  // Shared eigenbasis Q: S_a = Q diag(da) Q^T, S_b = Q diag(db) Q^T.
  std::srand(11);
  Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(Eigen::MatrixXd::Random(6, 6))
                          .householderQ();
  Eigen::VectorXd da(6), db(6);
  da << 4, 2, 1, 0.5, 0.1, 0.05;
  db << 1, 3, 0.2, 0.5, 2, 0.7;
  GaussianFit a, b;
  a.mean = Eigen::VectorXd::Random(6);
  b.mean = Eigen::VectorXd::Random(6);
  a.covariance = q * da.asDiagonal() * q.transpose();
  b.covariance = q * db.asDiagonal() * q.transpose();
  Eigen::MatrixXd ra = q * da.cwiseSqrt().asDiagonal() * q.transpose();
  Eigen::MatrixXd rb = q * db.cwiseSqrt().asDiagonal() * q.transpose();
  double expected = (a.mean - b.mean).squaredNorm() + (ra - rb).squaredNorm();
  EXPECT_NEAR(frechet_distance(a, b), expected, 1e-8);
}

TEST(Frechet, DimensionMismatchAndSqrtFailure) {
  GaussianFit a = gaussian_1d(0, 1);
  GaussianFit b;
  b.mean = Eigen::VectorXd::Zero(2);
  b.covariance = Eigen::MatrixXd::Identity(2, 2);
  EXPECT_THROW((void)frechet_distance(a, b), InvalidArgument);
  EXPECT_THROW(psd_sqrt(Eigen::MatrixXd::Constant(1, 1, -1.0)), Error);
  EXPECT_NEAR(psd_sqrt(Eigen::MatrixXd::Constant(1, 1, -1e-9))(0, 0), 0.0, 1e-12);
}

TEST(Embed, RowsFollowInputOrder) {
  FeatureEmbedder embedder;
  auto images = toy_images(4, 32, 1);
  auto single = embed(std::span(images).subspan(0, 1), embedder);
  EXPECT_EQ(single.rows(), 1);
  EXPECT_EQ(single.cols(), embedder.embedding_dim());

  std::vector<ImageTensor> dup{images[1], images[1]};
  auto d = embed(dup, embedder);
  EXPECT_EQ(d.row(0), d.row(1));

  auto base = embed(images, embedder);
  std::vector<ImageTensor> perm{images[2], images[0], images[3], images[1]};
  auto p = embed(perm, embedder);
  const int order[] = {2, 0, 3, 1};
  for (int i = 0; i < 4; ++i) EXPECT_LT((p.row(i) - base.row(order[i])).cwiseAbs().maxCoeff(), 1e-9);

  EXPECT_THROW(embed(std::span<const ImageTensor>{}, embedder), InvalidArgument);
  EXPECT_THROW(embedder.check_resolution(4), InvalidArgument);
}

TEST(Fid, IdentityNoiseMonotonicityAndShuffle) {
  FeatureEmbedder embedder;
  auto real = toy_images(40, 32, 2);
  EXPECT_NEAR(fid(real, real, embedder), 0.0, 1e-6);

  double prev = 0;
  for (double amp : {0.05, 0.2, 0.5}) {
    std::vector<ImageTensor> noisy;
    for (std::size_t i = 0; i < real.size(); ++i) noisy.push_back(add_noise(real[i], amp, i));
    double d = fid(real, noisy, embedder);
    EXPECT_GT(d, prev) << "amplitude " << amp;
    prev = d;
  }

  auto other = toy_images(40, 32, 3);
  auto shuffled = other;
  std::shuffle(shuffled.begin(), shuffled.end(), std::mt19937_64(1));
    // Embeddings are float32, so only the summation order may differ.
  const double unshuffled = fid(real, other, embedder);
  EXPECT_NEAR(unshuffled, fid(real, shuffled, embedder), 1e-6 * unshuffled);
  EXPECT_THROW(fid(std::span(real).subspan(0, 1), other, embedder), InvalidArgument);
}

TEST(Lpips, IdentitySymmetryAndFlip) {
  FeatureEmbedder embedder;
  auto images = toy_images(6, 32, 4);
  for (std::size_t i = 0; i + 1 < images.size(); ++i) {
    const auto& a = images[i];
    const auto& b = images[i + 1];
    auto same = lpips(a, a, embedder);
    EXPECT_EQ(same.value, 0.0);
    EXPECT_EQ(same.per_layer.size(), embedder.num_taps());
    double ab = lpips(a, b, embedder).value;
    EXPECT_GT(ab, 0.0);
    EXPECT_NEAR(ab, lpips(b, a, embedder).value, 1e-12);
    auto fa = make_image(a.pixels.flip({2}));
    auto fb = make_image(b.pixels.flip({2}));
    EXPECT_NEAR(lpips(fa, fb, embedder).value, ab, 1e-5 * std::max(1.0, ab));
  }
  auto small = make_image(torch::zeros({3, 16, 16}));
  EXPECT_THROW(lpips(images[0], small, embedder), InvalidArgument);
}

TEST(Lpips, NoiseMonotonicityAndBatchAgreement) {
  FeatureEmbedder embedder;
  auto images = toy_images(5, 32, 6);
  for (std::size_t i = 0; i < images.size(); ++i) {
    double prev = 0;
    for (double amp : {0.02, 0.1, 0.4}) {
      double d = lpips(images[i], add_noise(images[i], amp, 100 + i), embedder).value;
      EXPECT_GT(d, prev);
      prev = d;
    }
  }
  auto a = stack_images(images);
  auto b = a.flip({0});
  auto batch = lpips_batch(a, b, embedder);
  for (std::size_t i = 0; i < images.size(); ++i)
    EXPECT_NEAR(batch[i].item<double>(),
                lpips(images[i], images[images.size() - 1 - i], embedder).value, 1e-5);
}

TEST(Lpips, ChannelWeightsScaleDistance) {
  FeatureEmbedder embedder;
  auto images = toy_images(2, 32, 7);
  double base = lpips(images[0], images[1], embedder).value;
  std::vector<torch::Tensor> doubled;
  for (const auto& w : embedder.channel_weights()) doubled.push_back(w * 2);
  embedder.set_channel_weights(doubled);
  EXPECT_NEAR(lpips(images[0], images[1], embedder).value, 2 * base, 1e-6 * std::max(1.0, base));
  EXPECT_THROW(embedder.set_channel_weights({}), InvalidArgument);
}
