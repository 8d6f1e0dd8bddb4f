// Command-line front end for every pipeline stage.

#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iostream>

#include "dermagan/archive.hpp"
#include "dermagan/augmentation.hpp"
#include "dermagan/classifier.hpp"
#include "dermagan/dataset.hpp"
#include "dermagan/error.hpp"
#include "dermagan/factorization.hpp"
#include "dermagan/gan_training.hpp"
#include "dermagan/inversion.hpp"
#include "dermagan/metrics.hpp"
#include "dermagan/pipeline.hpp"
#include "dermagan/server.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dermagan;

namespace {

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidArgument("malformed JSON in " + p.string() + ": " + e.what());
  }
}

void print(const json& j) { std::cout << j.dump(2) << std::endl; }

void log_line(const std::string& s) { std::cerr << s << std::endl; }

// Resolves a path from a plan file relative to the plan's directory.
fs::path rel(const fs::path& base, const json& j, const char* key) {
  if (!j.contains(key)) throw InvalidArgument(std::string("plan is missing '") + key + "'");
  fs::path p = j.at(key).get<std::string>();
  return p.is_absolute() ? p : base / p;
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(std::max(1u, std::thread::hardware_concurrency()));
  CLI::App app{"Latent-direction discovery and synthetic augmentation for lesion images"};
  app.require_subcommand(1);

  // dataset ------------------------------------------------------------------
  auto* dataset = app.add_subcommand("dataset", "Dataset manifests and toy data");
  dataset->require_subcommand(1);
  ToyDatasetOptions toy;
  std::string toy_classes = "small:radius=0.08-0.16;large:radius=0.2-0.3";
  fs::path toy_out;
  auto* make_toy = dataset->add_subcommand("make-toy", "Render a procedural toy dataset");
  make_toy->add_option("--n-per-class", toy.n_per_class)->required();
  make_toy->add_option("--classes", toy_classes, "e.g. small:radius=0.05-0.15;large:radius=0.2-0.3");
  make_toy->add_option("--seed", toy.seed);
  make_toy->add_option("--resolution", toy.resolution);
  make_toy->add_option("--out", toy_out)->required();
  make_toy->callback([&] {
    toy.classes = parse_class_spec(toy_classes);
    const auto m = make_toy_dataset(toy, toy_out);
    print({{"manifest", (toy_out / "manifest.jsonl").string()},
           {"train", m.count(Split::train)},
           {"val", m.count(Split::val)},
           {"test", m.count(Split::test)}});
  });
  fs::path validate_path;
  auto* validate = dataset->add_subcommand("validate", "Check a manifest");
  validate->add_option("manifest", validate_path)->required();
  validate->callback([&] {
    const auto m = load_manifest(validate_path);
    validate_manifest(m);
    print({{"valid", true},
           {"classes", m.class_names},
           {"resolution", m.resolution},
           {"train", m.count(Split::train)},
           {"val", m.count(Split::val)},
           {"test", m.count(Split::test)}});
  });

  // gan ----------------------------------------------------------------------
  auto* gan = app.add_subcommand("gan", "Train and sample the style-based GAN");
  gan->require_subcommand(1);
  fs::path gan_manifest, gan_config, gan_out;
  bool gan_resume = false;
  auto* gan_train = gan->add_subcommand("train", "Adversarial training");
  gan_train->add_option("--manifest", gan_manifest)->required();
  gan_train->add_option("--config", gan_config)->required();
  gan_train->add_option("--out", gan_out)->required();
  gan_train->add_flag("--resume", gan_resume, "Continue from <out>/checkpoint.dgarc");
  gan_train->callback([&] {
    const auto manifest = load_manifest(gan_manifest);
    auto cfg = read_json(gan_config);
    cfg["resolution"] = manifest.resolution;
    const auto config = GeneratorConfig::from_json(cfg);
    GanTrainOptions opt;
    opt.lr = cfg.value("lr", opt.lr);
    opt.batch = cfg.value("batch", opt.batch);
    opt.iterations = cfg.value("iterations", std::int64_t{1000});
    opt.r1_gamma = cfg.value("r1_gamma", opt.r1_gamma);
    opt.ema_decay = cfg.value("ema_decay", opt.ema_decay);
    opt.fid_interval = cfg.value("fid_interval", opt.fid_interval);
    opt.seed = cfg.value("seed", opt.seed);
    fs::create_directories(gan_out);
    const auto file = gan_out / "checkpoint.dgarc";
    std::optional<GanCheckpoint> resume;
    if (gan_resume && fs::exists(file)) {
      resume = GanCheckpoint::load(file);
      opt.iterations = std::max<std::int64_t>(0, opt.iterations - resume->step);
      log_line("resuming at step " + std::to_string(resume->step));
    }
    const auto every = std::max<std::int64_t>(1, opt.iterations / 20);
    opt.on_step = [&](const GanStepLog& s) {
      if ((s.step + 1) % every == 0)
        log_line("step " + std::to_string(s.step + 1) + " d_loss " + std::to_string(s.d_loss) + " g_loss " +
                 std::to_string(s.g_loss));
    };
    opt.on_fid = [](const FidPoint& p) { log_line("fid@" + std::to_string(p.step) + " " + std::to_string(p.fid)); };
    FeatureEmbedder embedder;
    const auto ck = train_gan(manifest, config, opt, std::move(resume), &embedder);
    ck.save(file);
    print({{"checkpoint", file.string()}, {"id", ck.id()}, {"step", ck.step}});
  });
  fs::path sample_ckpt, sample_out;
  int sample_n = 16;
  std::uint64_t sample_seed = 0;
  double sample_psi = 1.0;
  auto* gan_sample = gan->add_subcommand("sample", "Write generated images");
  gan_sample->add_option("--ckpt", sample_ckpt)->required();
  gan_sample->add_option("--n", sample_n);
  gan_sample->add_option("--seed", sample_seed);
  gan_sample->add_option("--psi", sample_psi, "Truncation");
  gan_sample->add_option("--out", sample_out)->required();
  gan_sample->callback([&] {
    const auto ck = GanCheckpoint::load(sample_ckpt);
    fs::create_directories(sample_out);
    const auto images = sample_grid(ck, sample_n, sample_seed, sample_psi);
    for (std::size_t i = 0; i < images.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "sample_%05zu.png", i);
      write_png(sample_out / name, images[i]);
    }
    print({{"written", images.size()}, {"out", sample_out.string()}});
  });

  // factorize / directions ------------------------------------------------------
  fs::path fz_ckpt, fz_out;
  std::string fz_layers = "all", fz_norm = "row_l2";
  auto* fz = app.add_subcommand("factorize", "Closed-form direction discovery");
  fz->add_option("--ckpt", fz_ckpt)->required();
  fz->add_option("--layers", fz_layers, "all|coarse|medium|fine or a list like 0-3,5");
  fz->add_option("--normalization", fz_norm, "row_l2|none");
  fz->add_option("--out", fz_out)->required();
  fz->callback([&] {
    auto ck = GanCheckpoint::load(fz_ckpt);
    auto G = ck.generator_ema;
    const auto layers = parse_layer_spec(fz_layers, G);
    auto r = factorize(build_weight_matrix(G, layers, parse_row_normalization(fz_norm)));
    r.checkpoint_id = ck.id();
    r.checkpoint_path = fs::absolute(fz_ckpt).string();
    r.save(fz_out);
    json sv = json::array();
    for (int i = 0; i < std::min(10, r.dim()); ++i) sv.push_back(r.singular_values(i));
    print({{"factorization", fz_out.string()}, {"dim", r.dim()}, {"layers", r.layer_range}, {"top_singular_values", sv}});
  });
  auto* directions = app.add_subcommand("directions", "Inspect discovered directions");
  directions->require_subcommand(1);
  fs::path rank_fz, rank_ckpt;
  int rank_probes = 16;
  double rank_magnitude = 3.0;
  std::string rank_metric = "pixel";
  std::uint64_t rank_seed = 0;
  auto* rank = directions->add_subcommand("rank", "Rank directions by mean image change");
  rank->add_option("--factorization", rank_fz)->required();
  rank->add_option("--probes", rank_probes);
  rank->add_option("--ckpt", rank_ckpt, "Defaults to the checkpoint recorded in the factorization");
  rank->add_option("--magnitude", rank_magnitude);
  rank->add_option("--metric", rank_metric, "pixel|lpips");
  rank->add_option("--seed", rank_seed);
  rank->callback([&] {
    const auto f = FactorizationResult::load(rank_fz);
    const fs::path ckpath = rank_ckpt.empty() ? fs::path(f.checkpoint_path) : rank_ckpt;
    if (ckpath.empty()) throw InvalidArgument("factorization does not record its checkpoint; pass --ckpt");
    auto ck = GanCheckpoint::load(ckpath);
    if (ck.id() != f.checkpoint_id) throw InvalidArgument("checkpoint does not match the factorization");
    auto G = ck.generator_ema;
    std::vector<LatentCode> probes;
    for (int i = 0; i < rank_probes; ++i)
      probes.push_back(map_latent(G, sample_z(ck.config.latent_dim, rank_seed * 1000 + i)));
    FeatureEmbedder embedder;
    const auto ranks = rank_directions(f, G, probes, rank_magnitude,
                                       rank_metric == "lpips" ? ChangeMetric::lpips : ChangeMetric::mean_abs_pixel,
                                       &embedder);
    json arr = json::array();
    for (const auto& r : ranks)
      arr.push_back({{"index", r.index},
                     {"mean_image_change", r.mean_image_change},
                     {"singular_value", f.singular_values(r.index)}});
    print({{"ranks", arr}});
  });

  // invert -------------------------------------------------------------------
  auto* inv = app.add_subcommand("invert", "Real-image inversion");
  inv->require_subcommand(1);
  fs::path inv_manifest, inv_ckpt, inv_encoder, inv_hypernet, inv_out, inv_image, inv_png;
  InversionTrainOptions inv_opt;
  bool inv_w_only = false;
  auto add_train_opts = [&](CLI::App* c) {
    c->add_option("--manifest", inv_manifest)->required();
    c->add_option("--ckpt", inv_ckpt)->required();
    c->add_option("--out", inv_out)->required();
    c->add_option("--steps", inv_opt.steps);
    c->add_option("--batch", inv_opt.batch);
    c->add_option("--lr", inv_opt.lr);
    c->add_option("--seed", inv_opt.seed);
  };
  auto* train_enc = inv->add_subcommand("train-encoder", "Train the feed-forward encoder");
  add_train_opts(train_enc);
  train_enc->add_flag("--w-only", inv_w_only, "Predict one W code instead of Wplus");
  train_enc->callback([&] {
    const auto m = load_manifest(inv_manifest);
    const auto ck = GanCheckpoint::load(inv_ckpt);
    FeatureEmbedder embedder;
    inv_opt.on_log = [](int step, double loss) { log_line("step " + std::to_string(step) + " loss " + std::to_string(loss)); };
    EncoderTrainReport rep;
    const auto enc = train_encoder(m, ck, embedder, inv_opt, &rep, !inv_w_only);
    enc.save(inv_out);
    print({{"encoder", inv_out.string()},
           {"mean_w_val_l2", rep.mean_w_val_l2},
           {"initial_val_l2", rep.initial_val_l2},
           {"final_val_l2", rep.final_val_l2}});
  });
  auto* train_hyp = inv->add_subcommand("train-hypernet", "Train the refinement hypernetwork");
  add_train_opts(train_hyp);
  train_hyp->add_option("--encoder", inv_encoder)->required();
  train_hyp->add_option("--refinement-steps", inv_opt.train_refinement_steps);
  train_hyp->callback([&] {
    const auto m = load_manifest(inv_manifest);
    const auto ck = GanCheckpoint::load(inv_ckpt);
    const auto enc = EncoderModel::load(inv_encoder);
    FeatureEmbedder embedder;
    inv_opt.on_log = [](int step, double loss) { log_line("step " + std::to_string(step) + " loss " + std::to_string(loss)); };
    HypernetTrainReport rep;
    const auto h = train_hypernet(m, ck, enc, embedder, inv_opt, &rep);
    h.save(inv_out);
    print({{"hypernet", inv_out.string()}, {"encoder_val_l2", rep.encoder_val_l2}, {"refined_val_l2", rep.refined_val_l2}});
  });
  int run_steps = 5;
  auto* inv_run = inv->add_subcommand("run", "Invert one image");
  inv_run->add_option("--image", inv_image)->required();
  inv_run->add_option("--steps", run_steps);
  inv_run->add_option("--out", inv_out)->required();
  inv_run->add_option("--ckpt", inv_ckpt)->required();
  inv_run->add_option("--encoder", inv_encoder)->required();
  inv_run->add_option("--hypernet", inv_hypernet);
  inv_run->add_option("--png", inv_png, "Also write the reconstruction");
  inv_run->callback([&] {
    auto ck = GanCheckpoint::load(inv_ckpt);
    auto G = ck.generator_ema;
    const auto enc = EncoderModel::load(inv_encoder);
    std::optional<HypernetModel> h;
    if (!inv_hypernet.empty()) h = HypernetModel::load(inv_hypernet, G);
    FeatureEmbedder embedder;
    const auto image = standardize(read_png(inv_image, inv_image.filename().string()), ck.config.resolution);
    const auto r = invert(image, G, enc, h ? &*h : nullptr, run_steps, embedder);
    r.save(inv_out);
    if (!inv_png.empty()) write_png(inv_png, synthesize(G, r.latent, NoiseMode::fixed, r.weight_offsets));
    json trace = json::array();
    for (const auto& p : r.loss_trace) trace.push_back({{"l2", p.l2}, {"lpips", p.lpips}});
    print({{"inversion", inv_out.string()}, {"loss_trace", trace}});
  });

  // metrics ------------------------------------------------------------------
  auto* metrics = app.add_subcommand("metrics", "Perceptual metrics");
  metrics->require_subcommand(1);
  fs::path fid_real, fid_fake, lp_a, lp_b;
  auto* fid_cmd = metrics->add_subcommand("fid", "Frechet distance between two image directories");
  fid_cmd->add_option("--real", fid_real)->required();
  fid_cmd->add_option("--fake", fid_fake)->required();
  fid_cmd->callback([&] {
    FeatureEmbedder embedder;
    const auto real = read_png_dir(fid_real);
    const auto fake = read_png_dir(fid_fake);
    print({{"fid", fid(real, fake, embedder)}, {"n_real", real.size()}, {"n_fake", fake.size()}});
  });
  auto* lp_cmd = metrics->add_subcommand("lpips", "Perceptual distance between two images");
  lp_cmd->add_option("--a", lp_a)->required();
  lp_cmd->add_option("--b", lp_b)->required();
  lp_cmd->callback([&] {
    FeatureEmbedder embedder;
    const auto s = lpips(read_png(lp_a), read_png(lp_b), embedder);
    json per = json::array();
    for (double v : s.per_layer) per.push_back(v);
    print({{"lpips", s.value}, {"per_layer", per}});
  });

  // augment ------------------------------------------------------------------
  auto* aug = app.add_subcommand("augment", "Synthetic augmentation");
  aug->require_subcommand(1);
  fs::path plan_file, aug_out;
  auto* aug_run = aug->add_subcommand("run", "Generate edited images from a plan file");
  aug_run->add_option("--plan", plan_file)->required();
  aug_run->add_option("--out", aug_out)->required();
  aug_run->callback([&] {
    const auto j = read_json(plan_file);
    const auto base = fs::absolute(plan_file).parent_path();
    const auto manifest = load_manifest(rel(base, j, "manifest"));
    auto ck = GanCheckpoint::load(rel(base, j, "checkpoint"));
    const auto f = FactorizationResult::load(rel(base, j, "factorization"));
    const auto enc = EncoderModel::load(rel(base, j, "encoder"));
    std::optional<HypernetModel> h;
    if (j.contains("hypernet")) h = HypernetModel::load(rel(base, j, "hypernet"), ck.generator_ema);
    AugmentationPlan plan;
    for (const auto& d : j.at("directions")) {
      auto dir = direction_at(f, d.at("index").get<int>());
      dir.status = DirectionStatus::relevant;
      if (d.contains("name")) dir.name = d.at("name").get<std::string>();
      plan.directions.push_back(std::move(dir));
    }
    plan.alpha = j.value("alpha", plan.alpha);
    plan.dead_zone = j.value("dead_zone", plan.dead_zone);
    plan.per_transformation_count = j.value("per_transformation_count", plan.per_transformation_count);
    plan.lpips_threshold = j.value("lpips_threshold", plan.lpips_threshold);
    plan.filter_mode = parse_lpips_filter_mode(j.value("filter_mode", std::string("per_transformation")));
    plan.seed = j.value("seed", plan.seed);
    if (j.contains("layer_range")) {
      const auto r = j.at("layer_range").get<std::vector<int>>();
      plan.layer_range = LayerRange{r.at(0), r.at(1)};
    }
    FeatureEmbedder embedder;
    InversionArtifacts models{ck.generator_ema, &enc, h ? &*h : nullptr, j.value("inversion_steps", 5)};
    const auto out = generate_augmented_set(manifest, plan, models, embedder, aug_out);
    std::size_t pass = 0;
    for (const auto& r : out.records) pass += r.fidelity_pass;
    print({{"records", (aug_out / "records.jsonl").string()},
           {"n", out.records.size()},
           {"fidelity_pass", pass},
           {"skipped_sources", out.skipped_sources}});
  });
  std::string filter_mode = "lpips", lpips_mode = "per_transformation";
  fs::path filter_records, filter_model, filter_images, filter_out;
  double filter_threshold = 0.2;
  auto* aug_filter = aug->add_subcommand("filter", "Split records into kept and rejected");
  aug_filter->add_option("--mode", filter_mode, "lpips|classifier")->required();
  aug_filter->add_option("--records", filter_records)->required();
  aug_filter->add_option("--out", filter_out, "Kept records")->required();
  aug_filter->add_option("--threshold", filter_threshold);
  aug_filter->add_option("--lpips-mode", lpips_mode, "per_image|per_transformation");
  aug_filter->add_option("--model", filter_model, "Classifier archive (classifier mode)");
  aug_filter->add_option("--images", filter_images, "Defaults to <records dir>/images");
  aug_filter->callback([&] {
    const auto records = read_records(filter_records);
    RecordPartition part;
    if (filter_mode == "lpips") {
      part = filter_by_lpips(records, filter_threshold, parse_lpips_filter_mode(lpips_mode));
    } else if (filter_mode == "classifier") {
      if (filter_model.empty()) throw InvalidArgument("classifier mode needs --model");
      const auto model = ClassifierModel::load(filter_model);
      const auto images = filter_images.empty() ? filter_records.parent_path() / "images" : filter_images;
      part = filter_by_classifier(records, images, make_predictor(model), model.config().resolution);
    } else {
      throw InvalidArgument("unknown filter mode '" + filter_mode + "'");
    }
    write_records(filter_out, part.first);
    print({{"kept", part.first.size()}, {"rejected", part.second.size()}, {"out", filter_out.string()}});
  });
  int compose_n = 0;
  std::uint64_t compose_seed = 0;
  fs::path compose_manifest, compose_records, compose_images, compose_out;
  auto* aug_compose = aug->add_subcommand("compose", "Baseline manifest plus N synthetic images");
  aug_compose->add_option("--n", compose_n)->required();
  aug_compose->add_option("--seed", compose_seed);
  aug_compose->add_option("--manifest", compose_manifest)->required();
  aug_compose->add_option("--records", compose_records)->required();
  aug_compose->add_option("--images", compose_images, "Defaults to <records dir>/images");
  aug_compose->add_option("--out", compose_out)->required();
  aug_compose->callback([&] {
    const auto manifest = load_manifest(compose_manifest);
    const auto images = compose_images.empty() ? compose_records.parent_path() / "images" : compose_images;
    const auto m = compose_training_set(manifest, read_records(compose_records), images, compose_n, compose_seed);
    m.save(compose_out);
    print({{"manifest", compose_out.string()}, {"train", m.count(Split::train)}});
  });

  // clf ----------------------------------------------------------------------
  auto* clf = app.add_subcommand("clf", "Lesion classifier");
  clf->require_subcommand(1);
  fs::path clf_manifest, clf_config, clf_out, clf_model;
  std::uint64_t clf_seed = 0;
  std::string clf_split = "test";
  auto load_clf_config = [&](const DatasetManifest& m) {
    json j = clf_config.empty() ? json::object() : read_json(clf_config);
    auto c = classifier_config_from_json(j.value("config", json::object()));
    c.n_classes = m.num_classes();
    c.resolution = m.resolution;
    return std::make_pair(c, train_spec_from_json(j.value("spec", json::object())));
  };
  auto* clf_train = clf->add_subcommand("train", "Train one classifier");
  clf_train->add_option("--manifest", clf_manifest)->required();
  clf_train->add_option("--config", clf_config, "JSON with 'config' and 'spec' objects");
  clf_train->add_option("--seed", clf_seed);
  clf_train->add_option("--out", clf_out)->required();
  clf_train->callback([&] {
    const auto m = load_manifest(clf_manifest);
    const auto [config, spec] = load_clf_config(m);
    const auto t = train_classifier(m, config, spec, clf_seed, [](const EpochLog& e) {
      log_line("epoch " + std::to_string(e.epoch) + " loss " + std::to_string(e.train_loss) + " val_bacc " +
               std::to_string(e.val_balanced_accuracy));
    });
    fs::create_directories(clf_out);
    t.model.save(clf_out / "classifier.dgarc");
    atomic_write(clf_out / "run.json", t.run.to_json().dump(2));
    print({{"model", (clf_out / "classifier.dgarc").string()},
           {"best_epoch", t.run.best_epoch},
           {"test", t.run.test_report ? t.run.test_report->to_json() : json(nullptr)}});
  });
  auto* clf_eval = clf->add_subcommand("eval", "Evaluate a classifier");
  clf_eval->add_option("--model", clf_model)->required();
  clf_eval->add_option("--manifest", clf_manifest)->required();
  clf_eval->add_option("--split", clf_split);
  clf_eval->callback([&] {
    const auto model = ClassifierModel::load(clf_model);
    print(evaluate(model, load_manifest(clf_manifest), parse_split(clf_split)).to_json());
  });
  std::vector<std::string> ablate_aug;
  std::vector<std::uint64_t> ablate_seeds{0, 1, 2};
  auto* clf_ablate = clf->add_subcommand("ablate", "Baseline vs augmented datasets over seeds");
  clf_ablate->add_option("--base", clf_manifest)->required();
  clf_ablate->add_option("--augmented", ablate_aug, "name=manifest, repeatable")->required();
  clf_ablate->add_option("--config", clf_config);
  clf_ablate->add_option("--seeds", ablate_seeds)->delimiter(',');
  clf_ablate->add_option("--out", clf_out)->required();
  clf_ablate->callback([&] {
    const auto base = load_manifest(clf_manifest);
    std::vector<NamedManifest> augmented;
    for (const auto& a : ablate_aug) {
      const auto eq = a.find('=');
      if (eq == std::string::npos) throw InvalidArgument("--augmented expects name=manifest");
      augmented.push_back({a.substr(0, eq), load_manifest(a.substr(eq + 1))});
    }
    const auto [config, spec] = load_clf_config(base);
    const auto table = run_ablation(base, augmented, config, spec, ablate_seeds, log_line);
    fs::create_directories(clf_out);
    atomic_write(clf_out / "accuracy.tsv", table.accuracy_tsv());
    atomic_write(clf_out / "auc.tsv", table.auc_tsv());
    atomic_write(clf_out / "ablation.json", table.to_json().dump(2));
    std::cout << table.accuracy_tsv() << '\n' << table.auc_tsv();
  });

  // pipeline / serve -----------------------------------------------------------
  auto* pipeline = app.add_subcommand("pipeline", "Run every stage from one config");
  pipeline->require_subcommand(1);
  fs::path pipe_config;
  PipelineOptions pipe_opt;
  int auto_curate = 0;
  std::string stop_after;
  int exit_code = 0;
  auto* pipe_run = pipeline->add_subcommand("run", "Run or resume the pipeline");
  pipe_run->add_option("--config", pipe_config)->required();
  pipe_run->add_flag("--resume", pipe_opt.resume);
  auto* ac = pipe_run->add_option("--auto-curate", auto_curate, "Mark the top-K ranked directions relevant");
  pipe_run->add_option("--stop-after", stop_after, "Halt after this stage");
  pipe_run->callback([&] {
    if (ac->count()) pipe_opt.auto_curate = auto_curate;
    if (!stop_after.empty()) pipe_opt.stop_after = stop_after;
    pipe_opt.log = log_line;
    const auto r = run_pipeline(pipe_config, pipe_opt);
    print({{"workdir", r.workdir.string()},
           {"executed", r.executed},
           {"skipped", r.skipped},
           {"awaiting_curation", r.awaiting_curation},
           {"finished", r.finished}});
    if (r.awaiting_curation) exit_code = 3;
  });
  fs::path serve_store;
  std::string serve_host = "127.0.0.1";
  int serve_port = 8080;
  ServiceOptions serve_opt;
  fs::path serve_static;
  auto* serve = app.add_subcommand("serve", "HTTP API over an artifact store");
  serve->add_option("--store", serve_store)->required();
  serve->add_option("--host", serve_host);
  serve->add_option("--port", serve_port);
  serve->add_option("--inversion-steps", serve_opt.inversion_steps);
  serve->add_option("--static", serve_static, "Directory served under /ui");
  serve->callback([&] {
    if (!serve_static.empty()) serve_opt.static_dir = serve_static;
    ArtifactStore store(serve_store);
    ApiServer server(store, serve_opt);
    const int port = server.bind(serve_host, serve_port);
    log_line("listening on http://" + serve_host + ":" + std::to_string(port));
    server.listen();
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return exit_code;
}
