#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dermagan/image.hpp"

namespace dermagan {

enum class Split { train, val, test };

std::string_view to_string(Split split);
Split parse_split(std::string_view text);

struct ManifestEntry {
  std::string path;  // relative to DatasetManifest::root
  int label = 0;
  Split split = Split::train;
};

/// Labeled image collection. Serialized as line-delimited JSON: a header
/// record {"class_names": [...], "resolution": R} followed by one
/// {"path", "label", "split"} record per image.
struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> class_names;
  int resolution = 64;
  std::filesystem::path root;

  [[nodiscard]] int num_classes() const { return static_cast<int>(class_names.size()); }
  [[nodiscard]] std::vector<ManifestEntry> entries_in(Split split) const;
  [[nodiscard]] std::size_t count(Split split) const;
  [[nodiscard]] std::filesystem::path resolve(const ManifestEntry& entry) const;

  /// Decodes an entry and resamples it to the manifest resolution.
  [[nodiscard]] ImageTensor load_image(const ManifestEntry& entry) const;

  /// Writes the manifest; entry paths are rewritten relative to the new
  /// file's directory.
  void save(const std::filesystem::path& file) const;
};

/// Checks label range, split disjointness, resolution bounds and (optionally)
/// that every path exists.
void validate_manifest(const DatasetManifest& manifest, bool check_files = true);

DatasetManifest load_manifest(const std::filesystem::path& file);

/// One split held in memory: images [N, 3, R, R] in [-1, 1], labels [N].
struct LoadedSplit {
  torch::Tensor images;
  torch::Tensor labels;
  std::vector<std::string> ids;
  [[nodiscard]] std::int64_t size() const { return static_cast<std::int64_t>(ids.size()); }
};

LoadedSplit load_split(const DatasetManifest& manifest, Split split);

// ---------------------------------------------------------------------------
// Procedural toy data

/// Lesion-like blob on a skin-toned background. Each field stands in for
/// one semantic factor: size, pigment, background colour, geometry, position.
struct ToyBlobParams {
  double lesion_radius = 0.2;   // semi-major axis, fraction of width, [0, 0.5]
  double lesion_pigment = 0.5;  // [0, 1], 1 is darkest
  double skin_tone = 0.3;       // [0, 1], 1 is darkest
  double eccentricity = 0.0;    // [0, 1)
  double center_dx = 0.0;       // fraction of width, [-0.5, 0.5]
  double center_dy = 0.0;
  std::uint64_t texture_seed = 0;

  void validate() const;
};

ImageTensor render_toy_blob(const ToyBlobParams& params, int resolution);

/// Analytic lesion area in pixels: pi * a * b with a = radius * W and
/// b = a * sqrt(1 - e^2).
double expected_lesion_area(const ToyBlobParams& params, int resolution);

/// Counts lesion pixels by thresholding luminance halfway between the
/// background (median) and the lesion core (2nd percentile). Returns 0 when
/// no pixel is meaningfully darker than the background.
std::int64_t measure_lesion_area(const ImageTensor& image);

struct ParamRange {
  double lo = 0;
  double hi = 0;
};

struct ToyClassSpec {
  std::string name;
  ParamRange radius{0.10, 0.30};
  ParamRange pigment{0.20, 0.90};
  ParamRange skin{0.00, 1.00};
  ParamRange eccentricity{0.00, 0.60};
  ParamRange dx{-0.10, 0.10};
  ParamRange dy{-0.10, 0.10};
};

/// Parses "name:radius=0.05-0.15,pigment=0.2-0.4;name2:..." (unlisted
/// parameters keep their defaults; a bare "name" is accepted).
std::vector<ToyClassSpec> parse_class_spec(std::string_view text);

struct ToyDatasetOptions {
  int n_per_class = 10;
  std::vector<ToyClassSpec> classes;
  std::uint64_t seed = 0;
  int resolution = 64;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
};

/// Renders a stratified toy dataset into `out_dir` (images/ + manifest.jsonl)
/// and returns its manifest.
DatasetManifest make_toy_dataset(const ToyDatasetOptions& options,
                                 const std::filesystem::path& out_dir);

/// Holds `<dir>/.dermagan.lock` for its lifetime; throws if already held.
class DirectoryLock {
 public:
  explicit DirectoryLock(std::filesystem::path dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path lock_file_;
};

}  // namespace dermagan
