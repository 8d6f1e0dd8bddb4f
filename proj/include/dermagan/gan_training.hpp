#pragma once

#include <cstdint>
#include <functional>
#include <optional>

#include "dermagan/dataset.hpp"
#include "dermagan/generator.hpp"
#include "dermagan/metrics.hpp"

namespace dermagan {

struct GanStepLog {
  std::int64_t step = 0;
  double d_loss = 0;
  double g_loss = 0;
  std::optional<double> r1;
};

struct GanTrainOptions {
  double lr = 0.001;
  int batch = 16;
  std::int64_t iterations = 0;
  bool hflip = true;
  bool random_crop = true;
  int crop_padding = 2;
  double r1_gamma = 10.0;
  int r1_interval = 16;
  double ema_decay = 0.999;
  std::int64_t fid_interval = 0;  // 0 disables periodic FID
  int fid_samples = 256;
  int mean_w_samples = kMeanWSamples;
  std::uint64_t seed = 0;
  std::function<void(const GanStepLog&)> on_step;
  std::function<void(const FidPoint&)> on_fid;
};

/// Non-saturating generator loss softplus(-D(G(ws))), averaged over the batch.
torch::Tensor generator_loss(StyleGenerator& generator, Discriminator& discriminator,
                             const torch::Tensor& ws);

/// softplus(D(fake)) + softplus(-D(real)) plus, when r1_gamma > 0, the R1
/// penalty gamma/2 * |grad_x D(real)|^2. Averaged over the batch.
torch::Tensor discriminator_loss(Discriminator& discriminator, const torch::Tensor& fakes,
                                 const torch::Tensor& reals, double r1_gamma,
                                 double* r1_out = nullptr);

/// Adversarial training on the manifest's train split. With `resume`, training
/// continues from that checkpoint (optimizer moments start fresh).
GanCheckpoint train_gan(const DatasetManifest& manifest, const GeneratorConfig& config,
                        const GanTrainOptions& options,
                        std::optional<GanCheckpoint> resume = std::nullopt,
                        const FeatureEmbedder* embedder = nullptr);

/// Random horizontal flip plus reflect-pad-and-crop jitter, per sample.
torch::Tensor augment_reals(const torch::Tensor& batch, bool hflip, bool random_crop, int padding,
                            at::Generator& gen);

}  // namespace dermagan
