#pragma once

// Style-based generator: mapping network Z -> W, a synthesis network of
// modulated convolutions driven by one style vector per layer, and a
// residual discriminator. Sized for CPU training on toy data.

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <map>
#include <optional>
#include <string>
#include <torch/torch.h>
#include <vector>

#include "dermagan/image.hpp"

namespace dermagan {

enum class LatentSpace { Z, W, Wplus };

std::string_view to_string(LatentSpace space);

/// A latent code held in double precision. Z and W codes are [D]; Wplus
/// codes are [L, D], one row per style input of the synthesis network.
struct LatentCode {
  LatentSpace space = LatentSpace::W;
  torch::Tensor values;

  [[nodiscard]] std::int64_t dim() const { return values.size(-1); }
  [[nodiscard]] std::int64_t rows() const { return values.dim() == 2 ? values.size(0) : 1; }
  void validate() const;
};

enum class NoiseMode { fixed, random };

/// Per-layer multiplicative weight offsets, keyed by synthesis layer index.
/// Each tensor is [C_out, C_in] (one image) or [B, C_out, C_in] (batched);
/// the effective weight is weight * (1 + offset).
using WeightOffsets = std::map<int, torch::Tensor>;

struct GeneratorConfig {
  int latent_dim = 64;
  int mapping_layers = 8;
  int base_channels = 128;
  int resolution = 64;
  double mapping_lr_ratio = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
  [[nodiscard]] int channels_at(int res) const;
  [[nodiscard]] nlohmann::json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);
};

enum class LayerKind { conv, conv_up, to_rgb };

struct LayerInfo {
  int index = 0;
  int resolution = 0;
  LayerKind kind = LayerKind::conv;
  int in_channels = 0;
  int out_channels = 0;
};

/// Equalized-learning-rate fully connected layer.
class EqualLinearImpl : public torch::nn::Module {
 public:
  EqualLinearImpl(int in, int out, double lr_mul = 1.0, double bias_init = 0.0);
  torch::Tensor forward(const torch::Tensor& x) const;
  [[nodiscard]] torch::Tensor effective_weight() const { return weight * weight_gain_; }

  torch::Tensor weight, bias;

 private:
  double weight_gain_;
  double lr_mul_;
};
TORCH_MODULE(EqualLinear);

/// One synthesis layer: a style affine A (D -> C_in), and a convolution whose
/// weights are scaled per input channel by A(w) and, for conv layers,
/// demodulated so each output filter has unit norm.
class ModulatedConvImpl : public torch::nn::Module {
 public:
  ModulatedConvImpl(const LayerInfo& info, int latent_dim, int kernel, bool demodulate,
                    bool use_noise, std::uint64_t noise_seed);

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& w, NoiseMode noise_mode,
                        const torch::Tensor& offsets = {});

  /// Per-channel modulation scales A(w): [B, C_in].
  [[nodiscard]] torch::Tensor styles(const torch::Tensor& w) const;
  /// The demodulated weights for given scales: [B, C_out, C_in, k, k].
  [[nodiscard]] torch::Tensor demodulated_weight(const torch::Tensor& styles,
                                                 const torch::Tensor& offsets = {}) const;
  /// Effective style affine weight matrix [C_in, D] (the rows factorized).
  [[nodiscard]] torch::Tensor affine_matrix() const { return affine->effective_weight(); }

  [[nodiscard]] const LayerInfo& info() const { return info_; }

  EqualLinear affine{nullptr};
  torch::Tensor weight, bias, noise_strength, fixed_noise;

 private:
  LayerInfo info_;
  bool demodulate_;
  bool use_noise_;
  double weight_gain_;
};
TORCH_MODULE(ModulatedConv);

class MappingNetworkImpl : public torch::nn::Module {
 public:
  explicit MappingNetworkImpl(const GeneratorConfig& config);
  torch::Tensor forward(const torch::Tensor& z);

 private:
  std::vector<EqualLinear> layers_;
};
TORCH_MODULE(MappingNetwork);

class SynthesisNetworkImpl : public torch::nn::Module {
 public:
  explicit SynthesisNetworkImpl(const GeneratorConfig& config);

  /// ws: [B, L, D]. Output [B, 3, R, R] through a tanh head.
  torch::Tensor forward(const torch::Tensor& ws, NoiseMode noise_mode,
                        const WeightOffsets& offsets = {});

  [[nodiscard]] int num_styles() const { return static_cast<int>(layers_.size()); }
  [[nodiscard]] const std::vector<LayerInfo>& layer_info() const { return info_; }
  [[nodiscard]] ModulatedConv layer(int index) const { return layers_.at(index); }

  torch::Tensor const_input;

 private:
  std::vector<ModulatedConv> layers_;
  std::vector<LayerInfo> info_;
};
TORCH_MODULE(SynthesisNetwork);

class StyleGeneratorImpl : public torch::nn::Module {
 public:
  explicit StyleGeneratorImpl(GeneratorConfig config);

  /// z: [B, D] -> w: [B, D], truncated toward mean_w by psi.
  torch::Tensor map(const torch::Tensor& z, double psi = 1.0);
  /// ws: [B, D] (broadcast to every layer) or [B, L, D].
  torch::Tensor synthesize(const torch::Tensor& ws, NoiseMode noise_mode = NoiseMode::fixed,
                           const WeightOffsets& offsets = {});

  [[nodiscard]] int num_styles() const { return synthesis->num_styles(); }
  [[nodiscard]] const GeneratorConfig& config() const { return config_; }
  [[nodiscard]] std::vector<int> layers_for(std::string_view group) const;

  MappingNetwork mapping{nullptr};
  SynthesisNetwork synthesis{nullptr};
  torch::Tensor mean_w;

 private:
  GeneratorConfig config_;
};
TORCH_MODULE(StyleGenerator);

class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(const GeneratorConfig& config);
  /// images: [B, 3, R, R] -> logits [B].
  torch::Tensor forward(const torch::Tensor& images);

 private:
  struct Block {
    torch::Tensor conv1, bias1, conv2, bias2, skip;
  };
  torch::Tensor from_rgb_, from_rgb_bias_;
  std::vector<Block> blocks_;
  torch::Tensor final_conv_, final_conv_bias_;
  EqualLinear fc_{nullptr}, out_{nullptr};
};
TORCH_MODULE(Discriminator);

/// Copies parameters and buffers between two modules of identical structure.
void copy_weights(const torch::nn::Module& src, torch::nn::Module& dst);

/// Content fingerprint (FNV-1a over parameters and buffers).
std::string fingerprint(const torch::nn::Module& module);

struct FidPoint {
  std::int64_t step = 0;
  double fid = 0;
};

/// A trained (or freshly initialized) model. `generator_ema` holds the
/// exponential moving average of the generator weights and is what sampling,
/// inversion and factorization use.
struct GanCheckpoint {
  GeneratorConfig config;
  StyleGenerator generator{nullptr};
  StyleGenerator generator_ema{nullptr};
  Discriminator discriminator{nullptr};
  std::int64_t step = 0;
  std::vector<FidPoint> fid_history;

  static GanCheckpoint initialize(const GeneratorConfig& config);
  [[nodiscard]] std::string id() const;

  void save(const std::filesystem::path& path) const;
  static GanCheckpoint load(const std::filesystem::path& path);
};

inline constexpr int kMeanWSamples = 10000;
inline constexpr std::uint64_t kMeanWSeed = 0x5eedULL;

/// Fills `generator->mean_w` with the average of `samples` mapped latents.
void estimate_mean_w(StyleGenerator& generator, int samples, std::uint64_t seed);

LatentCode sample_z(int latent_dim, std::uint64_t seed);
LatentCode map_latent(StyleGenerator& generator, const LatentCode& z, double psi = 1.0);
/// Repeats a W code into a Wplus code with identical rows.
LatentCode broadcast_to_wplus(const LatentCode& w, int num_styles);
ImageTensor synthesize(StyleGenerator& generator, const LatentCode& w,
                       NoiseMode noise_mode = NoiseMode::fixed, const WeightOffsets& offsets = {});
/// Stacks W or Wplus codes into a float32 [B, L, D] batch.
torch::Tensor latents_to_batch(std::span<const LatentCode> codes, int num_styles);

std::vector<ImageTensor> sample_grid(const GanCheckpoint& checkpoint, int n, std::uint64_t seed,
                                     double psi = 1.0);

}  // namespace dermagan
