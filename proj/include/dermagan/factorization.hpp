#pragma once

// Closed-form discovery of latent edit directions: stack the style-affine
// weights of selected synthesis layers into one matrix and take its SVD. The
// right singular vectors are directions in W along which the stacked
// modulation responds most strongly.

#include <Eigen/Dense>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dermagan/generator.hpp"

namespace dermagan {

class FeatureEmbedder;

enum class RowNormalization { none, row_l2 };

std::string_view to_string(RowNormalization n);
RowNormalization parse_row_normalization(std::string_view text);

struct WeightMatrix {
  Eigen::MatrixXd matrix;                                  // M x D
  std::map<int, std::pair<Eigen::Index, Eigen::Index>> layer_slices;  // [begin, end)
  RowNormalization normalization = RowNormalization::row_l2;
};

/// Rows are the style-affine weight rows of each selected layer, in ascending
/// layer order.
WeightMatrix build_weight_matrix(StyleGenerator& generator, std::span<const int> layers,
                                 RowNormalization normalization);

/// Parses "all", "coarse", "medium", "fine", or a list like "0-3,5,8".
std::vector<int> parse_layer_spec(std::string_view spec, StyleGenerator& generator);

struct FactorizationResult {
  Eigen::MatrixXd directions;       // D x D, column k is direction k
  Eigen::VectorXd singular_values;  // descending
  Eigen::MatrixXd left;             // M x D thin U, kept for reconstruction checks
  std::vector<int> layer_range;
  RowNormalization normalization = RowNormalization::row_l2;
  std::string checkpoint_id;
  std::string checkpoint_path;  // where the generator was loaded from, if known
  std::vector<bool> degenerate;  // direction shares its singular value with a neighbour

  [[nodiscard]] int dim() const { return static_cast<int>(directions.rows()); }

  void save(const std::filesystem::path& path) const;
  static FactorizationResult load(const std::filesystem::path& path);
};

/// SVD of the weight matrix. Each direction's sign is fixed so that its
/// largest-magnitude component is positive (the matching column of U is
/// flipped with it). Requires M >= D and finite entries.
FactorizationResult factorize(const WeightMatrix& weights);

enum class DirectionStatus { unreviewed, relevant, duplicate, rejected };

std::string_view to_string(DirectionStatus s);
DirectionStatus parse_direction_status(std::string_view text);

struct SemanticDirection {
  Eigen::VectorXd vector;
  double singular_value = 0;
  int index = 0;
  std::optional<std::string> name;
  DirectionStatus status = DirectionStatus::unreviewed;
  std::optional<int> duplicate_of;
};

SemanticDirection direction_at(const FactorizationResult& result, int index);

/// Restricts a Wplus edit to style rows [begin, end).
struct LayerRange {
  int begin = 0;
  int end = 0;
};

/// w + magnitude * direction. For Wplus codes with a layer range only the rows
/// in that range move.
LatentCode apply_direction(const LatentCode& w, const SemanticDirection& direction,
                           double magnitude, std::optional<LayerRange> layers = std::nullopt);

enum class ChangeMetric { mean_abs_pixel, lpips };

struct DirectionRank {
  int index = 0;
  double mean_image_change = 0;
};

/// Mean image change between synthesize(w) and synthesize(w + magnitude * d)
/// over the probes, one entry per direction, sorted by change descending.
std::vector<DirectionRank> rank_directions(const FactorizationResult& result,
                                           StyleGenerator& generator,
                                           std::span<const LatentCode> probes, double magnitude,
                                           ChangeMetric metric = ChangeMetric::mean_abs_pixel,
                                           const FeatureEmbedder* embedder = nullptr);

}  // namespace dermagan
