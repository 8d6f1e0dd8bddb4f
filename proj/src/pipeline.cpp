#include "dermagan/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "dermagan/archive.hpp"
#include "dermagan/augmentation.hpp"
#include "dermagan/classifier.hpp"
#include "dermagan/dataset.hpp"
#include "dermagan/gan_training.hpp"
#include "dermagan/inversion.hpp"
#include "dermagan/metrics.hpp"

namespace dermagan {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& pipeline_stages() {
  static const std::vector<std::string> stages{"dataset", "gan",     "factorize", "invert",
                                               "curate",  "augment", "classify"};
  return stages;
}

namespace {

// Artifact ids; a stage is complete when its last id is registered.
constexpr const char* kDataset = "dataset";
constexpr const char* kCheckpoint = "gan-checkpoint";
constexpr const char* kFactorization = "factorization";
constexpr const char* kRanking = "direction-rank";
constexpr const char* kEncoder = "encoder";
constexpr const char* kHypernet = "hypernet";
constexpr const char* kRecords = "augment-records";
constexpr const char* kReport = "ablation-report";

struct Context {
  json config;
  fs::path base_dir;
  const PipelineOptions& options;
  ArtifactStore& store;
  FeatureEmbedder embedder;

  void log(const std::string& msg) const {
    if (options.log) options.log(msg);
  }
  json section(const char* name) const { return config.value(name, json::object()); }
  std::uint64_t seed() const { return config.value("seed", std::uint64_t{0}); }
  fs::path dir(const std::string& name) const {
    auto d = store.root() / name;
    fs::create_directories(d);
    return d;
  }
  DatasetManifest manifest() const { return load_manifest(store.absolute(store.get(kDataset))); }
  GanCheckpoint checkpoint() const { return GanCheckpoint::load(store.absolute(store.get(kCheckpoint))); }
  FactorizationResult factorization() const {
    return FactorizationResult::load(store.absolute(store.get(kFactorization)));
  }
  CurationState curation() const {
    const auto f = factorization();
    return CurationState(store.root() / "curation" / kFactorization, kFactorization, f.dim());
  }
};

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << s;
}

void stage_dataset(Context& c) {
  const auto cfg = c.section("dataset");
  const auto out = c.dir("data");
  DatasetManifest m;
  if (cfg.contains("manifest")) {
    m = load_manifest(c.base_dir / cfg.at("manifest").get<std::string>());
    validate_manifest(m);
    m.save(out / "manifest.jsonl");
  } else {
    const auto toy = cfg.value("toy", json::object());
    ToyDatasetOptions opt;
    opt.n_per_class = toy.value("n_per_class", 100);
    opt.classes = parse_class_spec(toy.value("classes", std::string("small:radius=0.08-0.16;large:radius=0.2-0.3")));
    opt.resolution = toy.value("resolution", 32);
    opt.seed = toy.value("seed", c.seed());
    m = make_toy_dataset(opt, out);
  }
  c.store.add(kDataset, ArtifactKind::dataset, out / "manifest.jsonl", {},
              {{"n_images", m.entries.size()}, {"classes", m.class_names}, {"resolution", m.resolution}});
}

void stage_gan(Context& c) {
  const auto cfg = c.section("gan");
  const auto manifest = c.manifest();
  json gc = cfg;
  gc["resolution"] = manifest.resolution;
  if (!gc.contains("seed")) gc["seed"] = c.seed();
  const auto config = GeneratorConfig::from_json(gc);
  GanTrainOptions opt;
  opt.lr = cfg.value("lr", 0.002);
  opt.batch = cfg.value("batch", 16);
  opt.iterations = cfg.value("iterations", std::int64_t{1000});
  opt.fid_interval = cfg.value("fid_interval", std::int64_t{0});
  opt.seed = c.seed();
  const auto log_every = std::max<std::int64_t>(1, opt.iterations / 10);
  opt.on_step = [&](const GanStepLog& s) {
    if ((s.step + 1) % log_every == 0) c.log("gan: step " + std::to_string(s.step + 1) + "/" + std::to_string(opt.iterations));
  };
  const auto ck = train_gan(manifest, config, opt, std::nullopt, &c.embedder);
  const auto file = c.dir("gan") / "checkpoint.dgarc";
  ck.save(file);
  c.store.add(kCheckpoint, ArtifactKind::checkpoint, file, {kDataset},
              {{"checkpoint_id", ck.id()}, {"step", ck.step}});
}

void stage_factorize(Context& c) {
  const auto cfg = c.section("factorize");
  const auto rank_cfg = c.section("rank");
  auto ck = c.checkpoint();
  auto G = ck.generator_ema;
  const auto layers = parse_layer_spec(cfg.value("layers", std::string("all")), G);
  const auto norm = parse_row_normalization(cfg.value("normalization", std::string("row_l2")));
  auto f = factorize(build_weight_matrix(G, layers, norm));
  f.checkpoint_id = ck.id();
  const auto file = c.dir("factorization") / "factorization.dgarc";
  f.save(file);
  c.store.add(kFactorization, ArtifactKind::factorization, file, {kCheckpoint},
              {{"checkpoint_id", ck.id()}, {"dim", f.dim()}});

  std::vector<LatentCode> probes;
  const int n_probes = rank_cfg.value("probes", 16);
  for (int i = 0; i < n_probes; ++i) probes.push_back(map_latent(G, sample_z(ck.config.latent_dim, c.seed() * 1000 + i)));
  const auto metric = rank_cfg.value("metric", std::string("pixel")) == "lpips" ? ChangeMetric::lpips
                                                                                 : ChangeMetric::mean_abs_pixel;
  const auto ranks = rank_directions(f, G, probes, rank_cfg.value("magnitude", 3.0), metric, &c.embedder);
  json arr = json::array();
  for (const auto& r : ranks) arr.push_back({{"index", r.index}, {"mean_image_change", r.mean_image_change}});
  const auto rank_file = c.store.root() / "factorization" / "ranking.json";
  atomic_write(rank_file, json{{"ranks", arr}}.dump(2));
  c.store.add(kRanking, ArtifactKind::report, rank_file, {kFactorization},
              {{"type", "direction_rank"}, {"factorization_id", kFactorization}});
}

void stage_invert(Context& c) {
  const auto cfg = c.section("invert");
  const auto manifest = c.manifest();
  const auto ck = c.checkpoint();
  InversionTrainOptions opt;
  opt.batch = cfg.value("batch", 16);
  opt.lr = cfg.value("lr", 1e-3);
  opt.seed = c.seed();
  opt.on_log = [&](int step, double loss) { c.log("invert: step " + std::to_string(step) + " loss " + std::to_string(loss)); };
  opt.steps = cfg.value("encoder_steps", 1000);
  EncoderTrainReport er;
  const auto encoder = train_encoder(manifest, ck, c.embedder, opt, &er, cfg.value("wplus", true));
  const auto dir = c.dir("inversion");
  encoder.save(dir / "encoder.dgarc");
  c.store.add(kEncoder, ArtifactKind::encoder, dir / "encoder.dgarc", {kCheckpoint, kDataset},
              {{"val_l2", er.final_val_l2}, {"mean_w_val_l2", er.mean_w_val_l2}});
  opt.steps = cfg.value("hypernet_steps", 500);
  HypernetTrainReport hr;
  const auto hypernet = train_hypernet(manifest, ck, encoder, c.embedder, opt, &hr);
  hypernet.save(dir / "hypernet.dgarc");
  c.store.add(kHypernet, ArtifactKind::hypernet, dir / "hypernet.dgarc", {kEncoder, kCheckpoint, kDataset},
              {{"encoder_val_l2", hr.encoder_val_l2}, {"refined_val_l2", hr.refined_val_l2}});
}

/// Returns false when the pipeline has to wait for human curation.
bool stage_curate(Context& c) {
  auto curation = c.curation();
  std::optional<int> k = c.options.auto_curate;
  const auto cfg = c.section("curate");
  if (!k && cfg.contains("auto_curate") && !cfg.at("auto_curate").is_null()) k = cfg.at("auto_curate").get<int>();
  if (k) {
    std::ifstream in(c.store.absolute(c.store.get(kRanking)));
    const auto ranks = json::parse(in).at("ranks");
    if (*k < 1 || *k > static_cast<int>(ranks.size())) throw InvalidArgument("auto-curate: K out of range");
    for (int i = 0; i < *k; ++i) {
      const int index = ranks.at(i).at("index").get<int>();
      curation.apply({index, DirectionStatus::relevant, "auto-" + std::to_string(index), std::nullopt,
                      std::string("auto-curated: rank ") + std::to_string(i + 1)});
    }
    c.log("curate: auto-curated the top " + std::to_string(*k) + " directions");
  }
  const auto n = curation.relevant(c.factorization()).size();
  if (n == 0) {
    c.log("curate: no relevant directions yet; review them (serve + POST /curation) and rerun with --resume");
    return false;
  }
  return true;
}

void stage_augment(Context& c) {
  const auto cfg = c.section("augment");
  const auto manifest = c.manifest();
  auto ck = c.checkpoint();
  const auto f = c.factorization();
  const auto encoder = EncoderModel::load(c.store.absolute(c.store.get(kEncoder)));
  const auto hypernet = HypernetModel::load(c.store.absolute(c.store.get(kHypernet)), ck.generator_ema);

  AugmentationPlan plan;
  plan.directions = c.curation().relevant(f);
  plan.alpha = cfg.value("alpha", plan.alpha);
  plan.dead_zone = cfg.value("dead_zone", plan.dead_zone);
  plan.per_transformation_count = cfg.value("per_transformation_count", 100);
  plan.lpips_threshold = cfg.value("lpips_threshold", plan.lpips_threshold);
  plan.filter_mode = parse_lpips_filter_mode(cfg.value("filter_mode", std::string("per_transformation")));
  plan.seed = c.seed();
  const auto dir = c.dir("augment");
  InversionArtifacts models{ck.generator_ema, &encoder, &hypernet, cfg.value("inversion_steps", 5)};
  auto out = generate_augmented_set(manifest, plan, models, c.embedder, dir);
  c.log("augment: " + std::to_string(out.records.size()) + " synthetic images");

  auto kept = out.records;
  if (cfg.value("lpips_filter", false)) kept = filter_by_lpips(out.records, plan.lpips_threshold, plan.filter_mode).first;

  const auto sizes = cfg.value("n_augment", std::vector<int>{static_cast<int>(kept.size())});
  const bool clf_filter = cfg.value("classifier_filter", false);
  const auto clf = c.section("classifier");
  const auto seeds = clf.value("seeds", std::vector<std::uint64_t>{0, 1, 2});
  json composed = json::array();
  for (int n : sizes) {
    const auto name = "augmented-" + std::to_string(n);
    auto m = compose_training_set(manifest, kept, out.images_dir, n, c.seed());
    m.save(dir / (name + ".jsonl"));
    composed.push_back(name);
    if (!clf_filter) continue;
    auto cc = classifier_config_from_json(clf.value("config", json::object()));
    cc.n_classes = m.num_classes();
    cc.resolution = m.resolution;
    const auto model = train_classifier(m, cc, train_spec_from_json(clf.value("spec", json::object())), seeds.at(0)).model;
    std::set<std::string> used;
    for (const auto& e : m.entries) used.insert(fs::path(e.path).stem().string());
    std::vector<AugmentationRecord> in_set;
    for (const auto& r : kept)
      if (used.count(r.synthetic_id)) in_set.push_back(r);
    const auto [pass, fail] = filter_by_classifier(in_set, out.images_dir, make_predictor(model), m.resolution);
    c.log(name + ": classifier filter rejected " + std::to_string(fail.size()) + " of " + std::to_string(in_set.size()));
    auto filtered = compose_training_set(manifest, pass, out.images_dir, static_cast<int>(pass.size()), c.seed());
    filtered.save(dir / (name + "-filter.jsonl"));
    composed.push_back(name + "-filter");
  }
  std::vector<int> direction_ids;
  for (const auto& d : plan.directions) direction_ids.push_back(d.index);
  // Records and composed sets share one registration so the stage is atomic.
  c.store.add(kRecords, ArtifactKind::records, dir / "records.jsonl",
              {kDataset, kCheckpoint, kFactorization, kEncoder, kHypernet},
              {{"n_records", out.records.size()},
               {"n_kept", kept.size()},
               {"skipped", out.skipped_sources},
               {"magnitude_distribution",
                {{"type", "uniform_excluding_dead_zone"}, {"alpha", plan.alpha}, {"dead_zone", plan.dead_zone}}},
               {"per_transformation_count", plan.per_transformation_count},
               {"directions", direction_ids},
               {"lpips_threshold", plan.lpips_threshold},
               {"filter_mode", to_string(plan.filter_mode)}});
  for (const auto& name : composed)
    c.store.add(name.get<std::string>(), ArtifactKind::dataset, dir / (name.get<std::string>() + ".jsonl"),
                {kDataset, kRecords});
}

void stage_classify(Context& c) {
  const auto cfg = c.section("classifier");
  const auto base = c.manifest();
  std::vector<NamedManifest> augmented;
  std::vector<std::string> parents{kDataset};
  for (const auto& r : c.store.list(ArtifactKind::dataset)) {
    if (r.id == kDataset) continue;
    augmented.push_back({r.id, load_manifest(c.store.absolute(r))});
    parents.push_back(r.id);
  }
  auto cc = classifier_config_from_json(cfg.value("config", json::object()));
  cc.n_classes = base.num_classes();
  cc.resolution = base.resolution;
  const auto spec = train_spec_from_json(cfg.value("spec", json::object()));
  const auto seeds = cfg.value("seeds", std::vector<std::uint64_t>{0, 1, 2});
  const auto table = run_ablation(base, augmented, cc, spec, seeds, [&](const std::string& s) { c.log("classify: " + s); });
  const auto dir = c.dir("reports");
  write_text(dir / "accuracy.tsv", table.accuracy_tsv());
  write_text(dir / "auc.tsv", table.auc_tsv());
  atomic_write(dir / "ablation.json", table.to_json().dump(2));
  c.store.add(kReport, ArtifactKind::report, dir / "ablation.json", parents, {{"type", "ablation"}});
  c.log("classify:\n" + table.accuracy_tsv());
}

}  // namespace

PipelineResult run_pipeline(const json& config, const fs::path& base_dir, const PipelineOptions& options) {
  if (options.stop_after) {
    const auto& s = pipeline_stages();
    if (std::find(s.begin(), s.end(), *options.stop_after) == s.end())
      throw InvalidArgument("unknown stage '" + *options.stop_after + "'");
  }
  PipelineResult result;
  result.workdir = base_dir / config.value("workdir", std::string("pipeline-out"));
  const bool existed = fs::exists(result.workdir / "index.json");
  ArtifactStore store(result.workdir);
  if (existed && !options.resume && !store.list().empty())
    throw InvalidArgument("work directory " + result.workdir.string() + " already holds artifacts; use --resume");
  DirectoryLock lock(result.workdir);
  Context c{config, base_dir, options, store, FeatureEmbedder{}};

  const std::vector<std::pair<std::string, const char*>> done_marker{
      {"dataset", kDataset}, {"gan", kCheckpoint},    {"factorize", kRanking},
      {"invert", kHypernet}, {"curate", nullptr},      {"augment", kRecords},
      {"classify", kReport}};
  for (const auto& [stage, marker] : done_marker) {
    if (marker && store.contains(marker)) {
      result.skipped.push_back(stage);
      c.log(stage + ": already complete");
    } else {
      c.log(stage + ": running");
      if (stage == "dataset") stage_dataset(c);
      else if (stage == "gan") stage_gan(c);
      else if (stage == "factorize") stage_factorize(c);
      else if (stage == "invert") stage_invert(c);
      else if (stage == "curate") {
        if (!stage_curate(c)) {
          result.awaiting_curation = true;
          return result;
        }
      } else if (stage == "augment") stage_augment(c);
      else if (stage == "classify") stage_classify(c);
      result.executed.push_back(stage);
    }
    if (options.stop_after && *options.stop_after == stage) return result;
  }
  result.finished = true;
  return result;
}

PipelineResult run_pipeline(const fs::path& config_file, const PipelineOptions& options) {
  std::ifstream in(config_file);
  if (!in) throw IoError("cannot open pipeline config " + config_file.string());
  json config;
  try {
    config = json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidArgument("malformed pipeline config: " + std::string(e.what()));
  }
  return run_pipeline(config, fs::absolute(config_file).parent_path(), options);
}

}  // namespace dermagan
