#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <torch/torch.h>
#include <vector>

#include "dermagan/image.hpp"

namespace dermagan {

struct EmbedderConfig {
  std::uint64_t seed = 20240917;
  std::vector<int> channels{16, 32, 64};
};

/// Fixed random-weight convolutional feature extractor with one tap per
/// stage (conv3x3 -> ReLU, 2x2 average pooling between stages).
///
/// Kernels are mirror-symmetric along the horizontal axis and padding is
/// symmetric, so features of a flipped image are the flipped features; LPIPS
/// computed with this backbone is therefore invariant to flipping both inputs.
class FeatureEmbedder {
 public:
  explicit FeatureEmbedder(EmbedderConfig config = {});

  /// Activations at each tap for a [N, 3, H, W] batch. Differentiable with
  /// respect to the input; computed in the input's floating dtype.
  [[nodiscard]] std::vector<torch::Tensor> taps(const torch::Tensor& batch) const;

  /// Spatial means of every tap, concatenated: [N, embedding_dim].
  [[nodiscard]] torch::Tensor embed_batch(const torch::Tensor& batch) const;
  [[nodiscard]] int embedding_dim() const;
  [[nodiscard]] std::size_t num_taps() const { return kernels_.size(); }

  /// LPIPS channel weights, one vector per tap (unit by default).
  [[nodiscard]] const std::vector<torch::Tensor>& channel_weights() const { return weights_; }
  void set_channel_weights(std::vector<torch::Tensor> weights);

  /// Throws InvalidArgument unless the resolution survives every pooling stage.
  void check_resolution(std::int64_t resolution) const;

 private:
  EmbedderConfig config_;
  std::vector<torch::Tensor> kernels_;
  std::vector<torch::Tensor> weights_;
};

/// Row i is the embedding of images[i].
Eigen::MatrixXd embed(std::span<const ImageTensor> images, const FeatureEmbedder& embedder);

struct GaussianFit {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  std::int64_t n_samples = 0;
};

/// Sample mean and unbiased sample covariance of the rows of `features`.
GaussianFit fit_gaussian(const Eigen::MatrixXd& features);

/// Squared Frechet distance between two Gaussians:
///   |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
/// The trace of the square root is taken from the eigenvalues of the
/// symmetric matrix S_a^{1/2} S_b S_a^{1/2}; eigenvalues down to
/// -1e-6 * max(1, largest) are clipped to zero, anything more negative is an
/// error.
double frechet_distance(const GaussianFit& a, const GaussianFit& b);

/// Symmetric positive semi-definite square root with the same clipping rule.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m);

double fid(std::span<const ImageTensor> real, std::span<const ImageTensor> fake,
           const FeatureEmbedder& embedder);

struct LpipsScore {
  double value = 0;
  std::vector<double> per_layer;
};

LpipsScore lpips(const ImageTensor& a, const ImageTensor& b, const FeatureEmbedder& embedder);

/// Batched differentiable LPIPS: [N] distances for [N, 3, H, W] inputs.
torch::Tensor lpips_batch(const torch::Tensor& a, const torch::Tensor& b,
                          const FeatureEmbedder& embedder);

}  // namespace dermagan
