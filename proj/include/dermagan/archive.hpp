#pragma once

// Named-array archive used for every persisted model artifact.
//
// Layout (all integers little-endian):
//   bytes 0..7   magic "DGARC001"
//   bytes 8..15  u64 length N of the JSON header
//   N bytes      JSON header: {"meta": {...}, "arrays": [{"name", "dtype",
//                "shape", "offset", "nbytes"}, ...]}
//   rest         concatenated raw array payloads, offsets relative to the
//                start of this section

#include <Eigen/Dense>
#include <filesystem>
#include <json.hpp>
#include <map>
#include <string>
#include <torch/torch.h>

namespace dermagan {

class Archive {
 public:
  nlohmann::json meta = nlohmann::json::object();

  void put(const std::string& name, const torch::Tensor& tensor);
  void put(const std::string& name, const Eigen::MatrixXd& matrix);
  void put(const std::string& name, const Eigen::VectorXd& vector);

  [[nodiscard]] bool contains(const std::string& name) const;
  [[nodiscard]] torch::Tensor tensor(const std::string& name) const;
  [[nodiscard]] Eigen::MatrixXd matrix(const std::string& name) const;
  [[nodiscard]] Eigen::VectorXd vector(const std::string& name) const;
  [[nodiscard]] std::vector<std::string> names() const;

  /// Stores every parameter and buffer of `module` under `prefix`.
  void put_module(const std::string& prefix, const torch::nn::Module& module);
  /// Copies arrays stored by put_module back into `module`; shapes must match.
  void load_module(const std::string& prefix, torch::nn::Module& module) const;

  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);

 private:
  std::map<std::string, torch::Tensor> arrays_;
};

/// Writes `contents` to `path` via a sibling temporary file and rename.
void atomic_write(const std::filesystem::path& path, std::string_view contents);

}  // namespace dermagan
