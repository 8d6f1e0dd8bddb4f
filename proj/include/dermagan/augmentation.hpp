#pragma once

// Synthetic augmentation: invert training images, push them along curated
// directions, inherit the source label, and score each result with LPIPS
// against the unedited reconstruction so low-fidelity edits can be filtered.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dermagan/dataset.hpp"
#include "dermagan/factorization.hpp"
#include "dermagan/inversion.hpp"

namespace dermagan {

enum class LpipsFilterMode { per_image, per_transformation };

std::string_view to_string(LpipsFilterMode mode);
LpipsFilterMode parse_lpips_filter_mode(std::string_view text);

struct AugmentationPlan {
  std::vector<SemanticDirection> directions;
  double alpha = 4.0;
  double dead_zone = 0.25;  // |m| < dead_zone * alpha is never drawn
  int per_transformation_count = 1;
  double lpips_threshold = 0.2;
  LpipsFilterMode filter_mode = LpipsFilterMode::per_transformation;
  std::uint64_t seed = 0;
  std::optional<double> forced_magnitude;  // overrides sampling (tests, previews)
  std::optional<LayerRange> layer_range;

  void validate() const;
};

/// Uniform over [-alpha, -dead_zone*alpha] U [dead_zone*alpha, alpha].
double sample_magnitude(double alpha, double dead_zone, std::mt19937_64& rng);

struct AugmentationRecord {
  std::string synthetic_id;
  std::string source_id;
  int direction_id = 0;
  double magnitude = 0;
  int inherited_label = 0;
  double lpips_to_source = 0;
  bool fidelity_pass = true;
  std::optional<bool> classifier_pass;
};

nlohmann::json to_json(const AugmentationRecord& r);
AugmentationRecord record_from_json(const nlohmann::json& j);
void write_records(const std::filesystem::path& file, const std::vector<AugmentationRecord>& records);
std::vector<AugmentationRecord> read_records(const std::filesystem::path& file);

/// Models needed to invert and edit sources.
struct InversionArtifacts {
  StyleGenerator generator{nullptr};
  const EncoderModel* encoder = nullptr;
  const HypernetModel* hypernet = nullptr;
  int steps = 5;
};

struct AugmentationOutput {
  std::vector<AugmentationRecord> records;
  std::vector<std::string> skipped_sources;
  std::filesystem::path images_dir;
};

/// Writes <out_dir>/images/<synthetic_id>.png and <out_dir>/records.jsonl.
/// per_transformation_count sources are drawn per direction from the train
/// split (each source at most once per direction while sources remain).
AugmentationOutput generate_augmented_set(const DatasetManifest& manifest,
                                          const AugmentationPlan& plan,
                                          const InversionArtifacts& models,
                                          const FeatureEmbedder& embedder,
                                          const std::filesystem::path& out_dir);

using RecordPartition = std::pair<std::vector<AugmentationRecord>, std::vector<AugmentationRecord>>;

/// per_image keeps records with lpips <= threshold; per_transformation keeps
/// every record of a direction whose mean lpips <= threshold.
RecordPartition filter_by_lpips(const std::vector<AugmentationRecord>& records, double threshold,
                                LpipsFilterMode mode);

using Predictor = std::function<std::vector<int>(const std::vector<ImageTensor>&)>;

/// Keeps records whose predicted class equals the inherited label and sets
/// classifier_pass on every record. Images are read from `images_dir` and
/// carry their synthetic_id as source_id.
RecordPartition filter_by_classifier(const std::vector<AugmentationRecord>& records,
                                     const std::filesystem::path& images_dir,
                                     const Predictor& predictor, int resolution);

/// Original manifest plus n_augment synthetic train entries, stratified over
/// the directions present in `kept` (n / |directions| each, remainder to the
/// lowest direction ids). The draw depends on (seed, n_augment) only.
DatasetManifest compose_training_set(const DatasetManifest& manifest,
                                     const std::vector<AugmentationRecord>& kept,
                                     const std::filesystem::path& images_dir, int n_augment,
                                     std::uint64_t seed);

}  // namespace dermagan
