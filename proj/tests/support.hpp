#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "dermagan/generator.hpp"

namespace dermagan::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("dermagan-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  [[nodiscard]] const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// A generator small enough for finite-difference checks.
inline GeneratorConfig tiny_config(int resolution = 8) {
  GeneratorConfig c;
  c.latent_dim = 4;
  c.mapping_layers = 1;
  c.base_channels = 2;
  c.resolution = resolution;
  c.seed = 3;
  return c;
}

/// A generator that is cheap but not degenerate (used for pipeline-shaped tests).
inline GeneratorConfig small_config(int resolution = 32) {
  GeneratorConfig c;
  c.latent_dim = 16;
  c.mapping_layers = 2;
  c.base_channels = 16;
  c.resolution = resolution;
  c.seed = 1;
  return c;
}

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
}

}  // namespace dermagan::testing
