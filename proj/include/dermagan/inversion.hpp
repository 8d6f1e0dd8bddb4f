#pragma once

// Real-image inversion. A feed-forward encoder predicts an initial W / Wplus
// code; a hypernetwork then refines the reconstruction over a few steps by
// predicting multiplicative per-channel offsets for the medium and fine
// synthesis convolutions. Latent optimization is available as a fallback.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "dermagan/dataset.hpp"
#include "dermagan/generator.hpp"
#include "dermagan/metrics.hpp"

namespace dermagan {

struct LossPoint {
  double l2 = 0;
  double lpips = 0;
};

struct InversionResult {
  LatentCode latent;
  WeightOffsets weight_offsets;  // layer -> [C_out, C_in]; empty when unrefined
  std::vector<LossPoint> loss_trace;
  std::string source_id;

  void save(const std::filesystem::path& path) const;
  static InversionResult load(const std::filesystem::path& path);
};

class EncoderImpl : public torch::nn::Module {
 public:
  EncoderImpl(const GeneratorConfig& config, int num_styles, bool wplus, int width);
  /// images [B, 3, R, R] -> styles [B, L, D].
  torch::Tensor forward(const torch::Tensor& images);

  torch::Tensor mean_w;

 private:
  torch::nn::Sequential backbone_{nullptr};
  torch::nn::Linear base_head_{nullptr};
  torch::nn::Linear delta_head_{nullptr};
  int num_styles_;
  int latent_dim_;
  bool wplus_;
};
TORCH_MODULE(Encoder);

struct EncoderModel {
  Encoder net{nullptr};
  GeneratorConfig generator_config;
  int num_styles = 0;
  bool wplus = true;
  int width = 32;

  static EncoderModel create(StyleGenerator& generator, bool wplus = true, int width = 32);
  [[nodiscard]] LatentCode encode(const ImageTensor& image) const;

  void save(const std::filesystem::path& path) const;
  static EncoderModel load(const std::filesystem::path& path);
};

class HypernetImpl : public torch::nn::Module {
 public:
  HypernetImpl(std::vector<LayerInfo> targets, int resolution, int width);
  /// Offset increments for (target, current reconstruction) pairs; each
  /// tensor is [B, C_out, C_in]. Heads start at zero, so an untrained
  /// hypernet leaves the generator unchanged.
  WeightOffsets forward(const torch::Tensor& target, const torch::Tensor& current);

  [[nodiscard]] const std::vector<LayerInfo>& targets() const { return targets_; }

 private:
  std::vector<LayerInfo> targets_;
  torch::nn::Sequential backbone_{nullptr};
  std::vector<torch::nn::Linear> heads_;
};
TORCH_MODULE(Hypernet);

struct HypernetModel {
  Hypernet net{nullptr};
  std::vector<int> target_layers;
  int resolution = 0;
  int width = 32;
  int refinement_steps = 5;

  /// Targets the medium and fine conv layers (coarse layers and toRGB stay frozen).
  static HypernetModel create(StyleGenerator& generator, int width = 32, int refinement_steps = 5);

  void save(const std::filesystem::path& path) const;
  static HypernetModel load(const std::filesystem::path& path, StyleGenerator& generator);
};

struct InversionTrainOptions {
  int steps = 2000;
  int batch = 16;
  double lr = 1e-3;
  double lpips_weight = 0.8;
  int train_refinement_steps = 3;  // hypernet only
  std::uint64_t seed = 0;
  int log_interval = 100;
  std::function<void(int step, double loss)> on_log;
};

struct EncoderTrainReport {
  double mean_w_val_l2 = 0;  // reconstructions from mean_w: the sanity floor
  double initial_val_l2 = 0;
  double final_val_l2 = 0;
  std::vector<double> loss_curve;
};

struct HypernetTrainReport {
  double encoder_val_l2 = 0;
  double refined_val_l2 = 0;
  std::vector<double> loss_curve;
};

/// Mean squared error plus `lpips_weight` times LPIPS, per image ([B]).
torch::Tensor reconstruction_loss(const torch::Tensor& recon, const torch::Tensor& target,
                                  const FeatureEmbedder& embedder, double lpips_weight);

EncoderModel train_encoder(const DatasetManifest& manifest, const GanCheckpoint& checkpoint,
                           const FeatureEmbedder& embedder, const InversionTrainOptions& options,
                           EncoderTrainReport* report = nullptr, bool wplus = true);

HypernetModel train_hypernet(const DatasetManifest& manifest, const GanCheckpoint& checkpoint,
                             const EncoderModel& encoder, const FeatureEmbedder& embedder,
                             const InversionTrainOptions& options,
                             HypernetTrainReport* report = nullptr);

using LatentInitializer = std::function<LatentCode(const ImageTensor&)>;

/// Encoder pass followed by up to `steps` hypernet refinements. A refinement
/// is kept only if it does not increase L2; otherwise the previous offsets are
/// retained and the trace records a plateau. loss_trace has steps + 1 points.
InversionResult invert(const ImageTensor& image, StyleGenerator& generator,
                       const LatentInitializer& initializer, const HypernetModel* hypernet,
                       int steps, const FeatureEmbedder& embedder);

InversionResult invert(const ImageTensor& image, StyleGenerator& generator,
                       const EncoderModel& encoder, const HypernetModel* hypernet, int steps,
                       const FeatureEmbedder& embedder);

/// The inversion objective for a batch of styles: mean over the batch of
/// mse(G(ws), target) + lpips_weight * lpips(G(ws), target).
torch::Tensor inversion_loss(StyleGenerator& generator, const torch::Tensor& ws,
                             const torch::Tensor& target, const FeatureEmbedder& embedder,
                             double lpips_weight);

/// Adam on the latent code. Returns the best iterate; loss_trace holds the
/// best-so-far loss after each iteration (iters + 1 points).
InversionResult optimize_latent(const ImageTensor& image, StyleGenerator& generator,
                                const LatentCode& init, int iters, double lr,
                                const FeatureEmbedder& embedder, double lpips_weight = 0.8);

}  // namespace dermagan
