#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <torch/torch.h>
#include <vector>

namespace dermagan {

/// A square RGB image with values in [-1, 1], stored channel-first as a
/// float32 tensor of shape [3, H, W].
struct ImageTensor {
  torch::Tensor pixels;
  std::string source_id;

  [[nodiscard]] int resolution() const { return static_cast<int>(pixels.size(-1)); }
};

/// Builds an ImageTensor from a [3, H, W] (or [1, 3, H, W]) tensor, clamping
/// into [-1, 1].
ImageTensor make_image(const torch::Tensor& chw, std::string source_id = {});

/// Stacks images into a [N, 3, H, W] float32 batch.
torch::Tensor stack_images(std::span<const ImageTensor> images);

/// Converts [-1, 1] to 8-bit; the only place values leave the model range.
std::vector<std::uint8_t> to_rgb8(const ImageTensor& image);
ImageTensor from_rgb8(std::span<const std::uint8_t> rgb, int width, int height,
                      std::string source_id = {});

std::string encode_png(const ImageTensor& image);
ImageTensor decode_png(std::string_view bytes, std::string source_id = {});

void write_png(const std::filesystem::path& path, const ImageTensor& image);
ImageTensor read_png(const std::filesystem::path& path, std::string source_id = {});

/// Resamples to `resolution`×`resolution` (area averaging when shrinking,
/// bilinear when enlarging; non-square inputs are center-cropped first).
ImageTensor standardize(const ImageTensor& image, int resolution);

/// Reads every *.png in a directory, sorted by filename.
std::vector<ImageTensor> read_png_dir(const std::filesystem::path& dir);

}  // namespace dermagan
