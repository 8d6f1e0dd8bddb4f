#include "dermagan/augmentation.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "dermagan/archive.hpp"
#include "dermagan/error.hpp"

namespace dermagan {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(LpipsFilterMode mode) {
  return mode == LpipsFilterMode::per_image ? "per_image" : "per_transformation";
}

LpipsFilterMode parse_lpips_filter_mode(std::string_view text) {
  if (text == "per_image") return LpipsFilterMode::per_image;
  if (text == "per_transformation") return LpipsFilterMode::per_transformation;
  throw InvalidArgument("unknown lpips filter mode '" + std::string(text) + "'");
}

void AugmentationPlan::validate() const {
  if (directions.empty()) throw InvalidArgument("augmentation plan: no curated directions");
  for (const auto& d : directions)
    if (d.status != DirectionStatus::relevant)
      throw InvalidArgument("augmentation plan: direction " + std::to_string(d.index) +
                            " is not marked relevant");
  if (per_transformation_count < 1)
    throw InvalidArgument("augmentation plan: per_transformation_count must be >= 1");
  if (!(lpips_threshold > 0)) throw InvalidArgument("augmentation plan: lpips_threshold must be > 0");
  if (!(alpha > 0) || dead_zone < 0 || dead_zone >= 1)
    throw InvalidArgument("augmentation plan: invalid magnitude distribution");
}

double sample_magnitude(double alpha, double dead_zone, std::mt19937_64& rng) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  const double mag = alpha * (dead_zone + (1.0 - dead_zone) * u);
  return (rng() & 1U) ? mag : -mag;
}

json to_json(const AugmentationRecord& r) {
  json j{{"synthetic_id", r.synthetic_id},       {"source_id", r.source_id},
         {"direction_id", r.direction_id},       {"magnitude", r.magnitude},
         {"inherited_label", r.inherited_label}, {"lpips_to_source", r.lpips_to_source},
         {"fidelity_pass", r.fidelity_pass}};
  j["classifier_pass"] = r.classifier_pass ? json(*r.classifier_pass) : json(nullptr);
  return j;
}

AugmentationRecord record_from_json(const json& j) {
  AugmentationRecord r;
  r.synthetic_id = j.at("synthetic_id").get<std::string>();
  r.source_id = j.at("source_id").get<std::string>();
  r.direction_id = j.at("direction_id").get<int>();
  r.magnitude = j.at("magnitude").get<double>();
  r.inherited_label = j.at("inherited_label").get<int>();
  r.lpips_to_source = j.at("lpips_to_source").get<double>();
  r.fidelity_pass = j.at("fidelity_pass").get<bool>();
  if (j.contains("classifier_pass") && !j.at("classifier_pass").is_null())
    r.classifier_pass = j.at("classifier_pass").get<bool>();
  return r;
}

void write_records(const fs::path& file, const std::vector<AugmentationRecord>& records) {
  std::ostringstream out;
  for (const auto& r : records) out << to_json(r).dump() << '\n';
  atomic_write(file, out.str());
}

std::vector<AugmentationRecord> read_records(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open records file " + file.string());
  std::vector<AugmentationRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(record_from_json(json::parse(line)));
  return out;
}

AugmentationOutput generate_augmented_set(const DatasetManifest& manifest,
                                          const AugmentationPlan& plan,
                                          const InversionArtifacts& models,
                                          const FeatureEmbedder& embedder, const fs::path& out_dir) {
  plan.validate();
  if (!models.encoder) throw InvalidArgument("augmentation: inversion models not trained");
  const auto sources = manifest.entries_in(Split::train);
  if (sources.empty()) throw InvalidArgument("augmentation: empty train split");
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("augmentation: cannot create " + out_dir.string());
  DirectoryLock lock(out_dir);

  struct Job {
    std::size_t source;
    std::size_t direction;
    double magnitude;
    std::string synthetic_id;
  };
  std::mt19937_64 rng(plan.seed);
  std::vector<Job> jobs;
  for (std::size_t d = 0; d < plan.directions.size(); ++d) {
    std::vector<std::size_t> order;
    for (int i = 0; i < plan.per_transformation_count; ++i) {
      if (order.empty()) {
        order.resize(sources.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        std::reverse(order.begin(), order.end());
      }
      const auto src = order.back();
      order.pop_back();
      const double m = plan.forced_magnitude ? *plan.forced_magnitude
                                             : sample_magnitude(plan.alpha, plan.dead_zone, rng);
      char id[64];
      std::snprintf(id, sizeof(id), "syn_d%03d_%06d", plan.directions[d].index, i);
      jobs.push_back({src, d, m, id});
    }
  }
  // Invert each source once.
  std::stable_sort(jobs.begin(), jobs.end(), [](const Job& a, const Job& b) { return a.source < b.source; });

  AugmentationOutput out;
  out.images_dir = out_dir / "images";
  auto G = models.generator;
  std::optional<std::size_t> current;
  std::optional<InversionResult> inv;
  ImageTensor recon;
  bool failed = false;
  for (const auto& job : jobs) {
    if (current != job.source) {
      current = job.source;
      failed = false;
      try {
        auto image = manifest.load_image(sources[job.source]);
        inv = invert(image, G, *models.encoder, models.hypernet, models.steps, embedder);
        recon = synthesize(G, inv->latent, NoiseMode::fixed, inv->weight_offsets);
      } catch (const Error& e) {
        failed = true;
        out.skipped_sources.push_back(sources[job.source].path);
        std::cerr << "augmentation: skipping " << sources[job.source].path << ": " << e.what() << '\n';
      }
    }
    if (failed) continue;
    const auto& dir = plan.directions[job.direction];
    auto edited = synthesize(G, apply_direction(inv->latent, dir, job.magnitude, plan.layer_range),
                             NoiseMode::fixed, inv->weight_offsets);
    edited.source_id = job.synthetic_id;
    write_png(out.images_dir / (job.synthetic_id + ".png"), edited);
    AugmentationRecord r;
    r.synthetic_id = job.synthetic_id;
    r.source_id = sources[job.source].path;
    r.direction_id = dir.index;
    r.magnitude = job.magnitude;
    r.inherited_label = sources[job.source].label;
    r.lpips_to_source = lpips(edited, recon, embedder).value;
    r.fidelity_pass = r.lpips_to_source <= plan.lpips_threshold;
    out.records.push_back(std::move(r));
  }
  std::sort(out.records.begin(), out.records.end(),
            [](const AugmentationRecord& a, const AugmentationRecord& b) { return a.synthetic_id < b.synthetic_id; });
  write_records(out_dir / "records.jsonl", out.records);
  return out;
}

RecordPartition filter_by_lpips(const std::vector<AugmentationRecord>& records, double threshold,
                                LpipsFilterMode mode) {
  RecordPartition out;
  std::map<int, std::pair<double, int>> per_direction;
  for (const auto& r : records) {
    auto& [sum, n] = per_direction[r.direction_id];
    sum += r.lpips_to_source;
    ++n;
  }
  for (const auto& r : records) {
    bool keep = r.lpips_to_source <= threshold;
    if (mode == LpipsFilterMode::per_transformation) {
      const auto& [sum, n] = per_direction[r.direction_id];
      keep = sum / n <= threshold;
    }
    (keep ? out.first : out.second).push_back(r);
  }
  return out;
}

RecordPartition filter_by_classifier(const std::vector<AugmentationRecord>& records,
                                     const fs::path& images_dir, const Predictor& predictor,
                                     int resolution) {
  RecordPartition out;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < records.size(); start += kChunk) {
    const auto n = std::min(kChunk, records.size() - start);
    std::vector<ImageTensor> images;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& r = records[start + i];
      auto im = read_png(images_dir / (r.synthetic_id + ".png"), r.synthetic_id);
      if (im.resolution() != resolution)
        throw InvalidArgument("filter_by_classifier: resolution mismatch for " + r.synthetic_id);
      images.push_back(std::move(im));
    }
    const auto pred = predictor(images);
    if (pred.size() != n) throw Error("filter_by_classifier: predictor returned wrong count");
    for (std::size_t i = 0; i < n; ++i) {
      auto r = records[start + i];
      r.classifier_pass = pred[i] == r.inherited_label;
      (*r.classifier_pass ? out.first : out.second).push_back(std::move(r));
    }
  }
  return out;
}

DatasetManifest compose_training_set(const DatasetManifest& manifest,
                                     const std::vector<AugmentationRecord>& kept,
                                     const fs::path& images_dir, int n_augment,
                                     std::uint64_t seed) {
  if (n_augment < 0) throw InvalidArgument("compose_training_set: n_augment must be >= 0");
  DatasetManifest out = manifest;
  if (n_augment == 0) return out;

  std::map<int, std::vector<const AugmentationRecord*>> by_direction;
  for (const auto& r : kept) by_direction[r.direction_id].push_back(&r);
  if (by_direction.empty()) throw InvalidArgument("compose_training_set: insufficient records");
  const int k = static_cast<int>(by_direction.size());

  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(n_augment));
  std::set<std::string> existing;
  for (const auto& e : manifest.entries) existing.insert(e.path);
  const auto root = fs::absolute(manifest.root);
  int slot = 0;
  for (auto& [dir, recs] : by_direction) {
    const int want = n_augment / k + (slot < n_augment % k ? 1 : 0);
    ++slot;
    if (want > static_cast<int>(recs.size()))
      throw InvalidArgument("compose_training_set: insufficient records for direction " +
                            std::to_string(dir) + " (need " + std::to_string(want) + ", have " +
                            std::to_string(recs.size()) + ")");
    auto pool = recs;
    std::sort(pool.begin(), pool.end(), [](auto* a, auto* b) { return a->synthetic_id < b->synthetic_id; });
    std::shuffle(pool.begin(), pool.end(), rng);
    for (int i = 0; i < want; ++i) {
      const auto file = fs::absolute(images_dir / (pool[i]->synthetic_id + ".png")).lexically_normal();
      const auto rel = file.lexically_relative(root).generic_string();
      if (!existing.insert(rel).second)
        throw InvalidArgument("compose_training_set: duplicate entry " + rel);
      out.entries.push_back({rel, pool[i]->inherited_label, Split::train});
    }
  }
  return out;
}

}  // namespace dermagan
