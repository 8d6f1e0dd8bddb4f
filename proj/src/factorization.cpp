#include "dermagan/factorization.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dermagan/archive.hpp"
#include "dermagan/error.hpp"
#include "dermagan/metrics.hpp"

namespace dermagan {

std::string_view to_string(RowNormalization n) {
  return n == RowNormalization::none ? "none" : "row_l2";
}

RowNormalization parse_row_normalization(std::string_view text) {
  if (text == "none") return RowNormalization::none;
  if (text == "row_l2") return RowNormalization::row_l2;
  throw InvalidArgument("unknown normalization '" + std::string(text) + "'");
}

std::string_view to_string(DirectionStatus s) {
  switch (s) {
    case DirectionStatus::unreviewed: return "unreviewed";
    case DirectionStatus::relevant: return "relevant";
    case DirectionStatus::duplicate: return "duplicate";
    case DirectionStatus::rejected: return "rejected";
  }
  return "unreviewed";
}

DirectionStatus parse_direction_status(std::string_view text) {
  if (text == "unreviewed") return DirectionStatus::unreviewed;
  if (text == "relevant") return DirectionStatus::relevant;
  if (text == "duplicate") return DirectionStatus::duplicate;
  if (text == "rejected") return DirectionStatus::rejected;
  throw InvalidArgument("unknown direction status '" + std::string(text) + "'");
}

namespace {

Eigen::MatrixXd to_eigen(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat64).contiguous();
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
      c.data_ptr<double>(), c.size(0), c.size(1));
  return m;
}

}  // namespace

WeightMatrix build_weight_matrix(StyleGenerator& generator, std::span<const int> layers,
                                 RowNormalization normalization) {
  if (layers.empty()) throw InvalidArgument("build_weight_matrix: empty layer range");
  std::vector<int> sorted(layers.begin(), layers.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());

  std::vector<Eigen::MatrixXd> blocks;
  WeightMatrix out;
  out.normalization = normalization;
  Eigen::Index rows = 0;
  for (int idx : sorted) {
    if (idx < 0 || idx >= generator->num_styles())
      throw InvalidArgument("build_weight_matrix: invalid layer index " + std::to_string(idx));
    blocks.push_back(to_eigen(generator->synthesis->layer(idx)->affine_matrix()));
    out.layer_slices[idx] = {rows, rows + blocks.back().rows()};
    rows += blocks.back().rows();
  }
  const auto d = blocks.front().cols();
  out.matrix.resize(rows, d);
  Eigen::Index r = 0;
  for (const auto& b : blocks) {
    out.matrix.middleRows(r, b.rows()) = b;
    r += b.rows();
  }
  if (normalization == RowNormalization::row_l2) {
    for (Eigen::Index i = 0; i < out.matrix.rows(); ++i) {
      const double n = out.matrix.row(i).norm();
      if (n > 0) out.matrix.row(i) /= n;
    }
  }
  return out;
}

std::vector<int> parse_layer_spec(std::string_view spec, StyleGenerator& generator) {
  if (spec == "all" || spec == "coarse" || spec == "medium" || spec == "fine") {
    auto out = generator->layers_for(spec);
    if (out.empty()) throw InvalidArgument("layer group '" + std::string(spec) + "' is empty");
    return out;
  }
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos < spec.size()) {
    auto end = spec.find(',', pos);
    if (end == std::string_view::npos) end = spec.size();
    const std::string item(spec.substr(pos, end - pos));
    pos = end + 1;
    if (item.empty()) continue;
    try {
      const auto dash = item.find('-');
      if (dash == std::string::npos) {
        out.push_back(std::stoi(item));
      } else {
        const int lo = std::stoi(item.substr(0, dash)), hi = std::stoi(item.substr(dash + 1));
        if (hi < lo) throw InvalidArgument("inverted layer range '" + item + "'");
        for (int i = lo; i <= hi; ++i) out.push_back(i);
      }
    } catch (const std::logic_error&) {
      throw InvalidArgument("bad layer spec '" + item + "'");
    }
  }
  if (out.empty()) throw InvalidArgument("empty layer spec");
  for (int i : out)
    if (i < 0 || i >= generator->num_styles())
      throw InvalidArgument("layer index " + std::to_string(i) + " out of range");
  return out;
}

FactorizationResult factorize(const WeightMatrix& weights) {
  const auto& a = weights.matrix;
  if (!a.allFinite()) throw InvalidArgument("factorize: non-finite entries");
  if (a.rows() < a.cols()) throw InvalidArgument("factorize: need at least as many rows as columns");
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeFullV);

  FactorizationResult r;
  r.singular_values = svd.singularValues();
  r.directions = svd.matrixV();
  r.left = svd.matrixU();
  r.normalization = weights.normalization;
  for (const auto& [layer, slice] : weights.layer_slices) r.layer_range.push_back(layer);

  for (Eigen::Index k = 0; k < r.directions.cols(); ++k) {
    Eigen::Index arg = 0;
    r.directions.col(k).cwiseAbs().maxCoeff(&arg);
    if (r.directions(arg, k) < 0) {
      r.directions.col(k) *= -1.0;
      r.left.col(k) *= -1.0;
    }
  }
  const auto n = r.singular_values.size();
  const double tol = 1e-9 * std::max(1e-300, n ? r.singular_values(0) : 0.0);
  r.degenerate.assign(static_cast<std::size_t>(n), false);
  for (Eigen::Index k = 0; k + 1 < n; ++k) {
    if (std::abs(r.singular_values(k) - r.singular_values(k + 1)) <= tol)
      r.degenerate[k] = r.degenerate[k + 1] = true;
  }
  return r;
}

void FactorizationResult::save(const std::filesystem::path& path) const {
  Archive ar;
  ar.meta["kind"] = "factorization";
  ar.meta["checkpoint_id"] = checkpoint_id;
  ar.meta["checkpoint_path"] = checkpoint_path;
  ar.meta["layer_range"] = layer_range;
  ar.meta["normalization"] = to_string(normalization);
  ar.meta["degenerate"] = degenerate;
  ar.put("directions", directions);
  ar.put("singular_values", singular_values);
  ar.put("left", left);
  ar.save(path);
}

FactorizationResult FactorizationResult::load(const std::filesystem::path& path) {
  auto ar = Archive::load(path);
  if (ar.meta.value("kind", "") != "factorization")
    throw IoError("not a factorization archive: " + path.string());
  FactorizationResult r;
  r.checkpoint_id = ar.meta.at("checkpoint_id").get<std::string>();
  r.checkpoint_path = ar.meta.value("checkpoint_path", "");
  r.layer_range = ar.meta.at("layer_range").get<std::vector<int>>();
  r.normalization = parse_row_normalization(ar.meta.at("normalization").get<std::string>());
  r.degenerate = ar.meta.at("degenerate").get<std::vector<bool>>();
  r.directions = ar.matrix("directions");
  r.singular_values = ar.vector("singular_values");
  r.left = ar.matrix("left");
  return r;
}

SemanticDirection direction_at(const FactorizationResult& result, int index) {
  if (index < 0 || index >= result.directions.cols())
    throw InvalidArgument("direction index " + std::to_string(index) + " out of range");
  SemanticDirection d;
  d.vector = result.directions.col(index);
  d.singular_value = result.singular_values(index);
  d.index = index;
  return d;
}

LatentCode apply_direction(const LatentCode& w, const SemanticDirection& direction,
                           double magnitude, std::optional<LayerRange> layers) {
  if (w.space == LatentSpace::Z) throw InvalidArgument("apply_direction: expected a W or Wplus code");
  if (direction.vector.size() != w.dim())
    throw InvalidArgument("apply_direction: dimension mismatch");
  auto vec = torch::from_blob(const_cast<double*>(direction.vector.data()),
                              {direction.vector.size()}, torch::kFloat64)
                 .clone();
  LatentCode out{w.space, w.values.to(torch::kFloat64).clone()};
  if (w.space == LatentSpace::W || !layers) {
    out.values += magnitude * vec;
    return out;
  }
  if (layers->begin < 0 || layers->end > w.rows() || layers->begin >= layers->end)
    throw InvalidArgument("apply_direction: invalid layer range");
  out.values.narrow(0, layers->begin, layers->end - layers->begin) += magnitude * vec;
  return out;
}

std::vector<DirectionRank> rank_directions(const FactorizationResult& result,
                                           StyleGenerator& generator,
                                           std::span<const LatentCode> probes, double magnitude,
                                           ChangeMetric metric, const FeatureEmbedder* embedder) {
  if (probes.empty()) throw InvalidArgument("rank_directions: need at least one probe latent");
  if (metric == ChangeMetric::lpips && !embedder)
    throw InvalidArgument("rank_directions: lpips metric needs an embedder");
  torch::NoGradGuard guard;
  const int styles = generator->num_styles();
  const auto base_ws = latents_to_batch(probes, styles);
  const auto base = generator->synthesize(base_ws, NoiseMode::fixed);

  std::vector<DirectionRank> out;
  for (int k = 0; k < result.dim(); ++k) {
    const auto dir = direction_at(result, k);
    std::vector<LatentCode> edited;
    edited.reserve(probes.size());
    for (const auto& p : probes) edited.push_back(apply_direction(p, dir, magnitude));
    const auto imgs = generator->synthesize(latents_to_batch(edited, styles), NoiseMode::fixed);
    double change = 0;
    if (metric == ChangeMetric::mean_abs_pixel)
      change = (imgs - base).abs().mean().item<double>();
    else
      change = lpips_batch(imgs.to(torch::kFloat64), base.to(torch::kFloat64), *embedder).mean().item<double>();
    out.push_back({k, change});
  }
  std::stable_sort(out.begin(), out.end(), [](const DirectionRank& a, const DirectionRank& b) {
    return a.mean_image_change > b.mean_image_change;
  });
  return out;
}

}  // namespace dermagan
