// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. The toy GAN, encoder and hypernet are trained once and
// cached in the directory given as the first argument.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <httplib.h>

#include "dermagan/augmentation.hpp"
#include "dermagan/classifier.hpp"
#include "dermagan/dataset.hpp"
#include "dermagan/factorization.hpp"
#include "dermagan/gan_training.hpp"
#include "dermagan/inversion.hpp"
#include "dermagan/metrics.hpp"
#include "dermagan/server.hpp"
#include "dermagan/store.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace dermagan;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Report {
 public:
  void run(const std::string& name, double budget_s, const std::function<Outcome()>& check) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double t = seconds_since(t0);
    if (t > budget_s) {
      o.pass = false;
      o.detail += "; over the " + fmt(budget_s) + " s budget";
    }
    std::printf("%s  %-28s %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), t);
    std::fflush(stdout);
    failures_ += o.pass ? 0 : 1;
  }
  [[nodiscard]] int failures() const { return failures_; }

 private:
  int failures_ = 0;
};

void info(const std::string& line) {
  std::printf("      %s\n", line.c_str());
  std::fflush(stdout);
}

// ---------------------------------------------------------------------------
// Toy models, trained once per cache directory.

constexpr int kLatent = 64;
constexpr int kResolution = 32;
const char* kBlobClasses =
    "blob:radius=0.08-0.32,pigment=0-1,skin=0-1,eccentricity=0-0.7,dx=-0.15-0.15,dy=-0.15-0.15";

struct ToyModels {
  DatasetManifest manifest;
  GanCheckpoint checkpoint;
  EncoderModel encoder;
  std::optional<HypernetModel> hypernet;
  FactorizationResult factorization;
  std::vector<DirectionRank> ranks;
  fs::path checkpoint_file, encoder_file, hypernet_file;
};

ToyModels prepare_toy(const fs::path& cache, const FeatureEmbedder& embedder) {
  ToyModels t;
  const auto data = cache / "blob";
  if (fs::exists(data / "manifest.jsonl")) {
    t.manifest = load_manifest(data / "manifest.jsonl");
  } else {
    info("rendering 2000 toy blob images");
    t.manifest = make_toy_dataset(
        {.n_per_class = 2000, .classes = parse_class_spec(kBlobClasses), .seed = 1, .resolution = kResolution}, data);
  }

  t.checkpoint_file = cache / "gan.dgarc";
  if (fs::exists(t.checkpoint_file)) {
    t.checkpoint = GanCheckpoint::load(t.checkpoint_file);
    info("loaded cached toy GAN (step " + std::to_string(t.checkpoint.step) + ")");
  } else {
    GeneratorConfig config;
    config.latent_dim = kLatent;
    config.mapping_layers = 4;
    config.base_channels = 64;
    config.resolution = kResolution;
    GanTrainOptions opt;
    opt.iterations = 3000;
    opt.batch = 16;
    opt.lr = 0.002;
    opt.fid_interval = 750;
    opt.fid_samples = 500;
    opt.on_fid = [](const FidPoint& p) { info("gan: FID at step " + std::to_string(p.step) + " = " + fmt(p.fid)); };
    const auto t0 = Clock::now();
    t.checkpoint = train_gan(t.manifest, config, opt, std::nullopt, &embedder);
    const double minutes = seconds_since(t0) / 60;
    info("trained toy GAN in " + fmt(minutes, 3) + " min (budget 60 min)");
    if (minutes > 60) info("WARNING: toy GAN training exceeded its 60 min budget");
    t.checkpoint.save(t.checkpoint_file);
  }

  t.encoder_file = cache / "encoder.dgarc";
  t.hypernet_file = cache / "hypernet.dgarc";
  if (fs::exists(t.encoder_file) && fs::exists(t.hypernet_file)) {
    t.encoder = EncoderModel::load(t.encoder_file);
    t.hypernet = HypernetModel::load(t.hypernet_file, t.checkpoint.generator_ema);
  } else {
    const auto t0 = Clock::now();
    InversionTrainOptions opt;
    opt.steps = 300;
    opt.batch = 16;
    opt.lr = 1e-3;
    EncoderTrainReport er;
    t.encoder = train_encoder(t.manifest, t.checkpoint, embedder, opt, &er);
    t.encoder.save(t.encoder_file);
    opt.steps = 100;
    HypernetTrainReport hr;
    t.hypernet = train_hypernet(t.manifest, t.checkpoint, t.encoder, embedder, opt, &hr);
    t.hypernet->save(t.hypernet_file);
    info("trained encoder (val L2 " + fmt(er.final_val_l2) + ") and hypernet (val L2 " +
         fmt(hr.refined_val_l2) + ") in " + fmt(seconds_since(t0) / 60, 3) + " min");
  }

  auto G = t.checkpoint.generator_ema;
  t.factorization = factorize(build_weight_matrix(G, parse_layer_spec("all", G), RowNormalization::row_l2));
  t.factorization.checkpoint_id = t.checkpoint.id();
  std::vector<LatentCode> probes;
  for (int i = 0; i < 16; ++i) probes.push_back(map_latent(G, sample_z(kLatent, i)));
  t.ranks = rank_directions(t.factorization, G, probes, 3.0);
  return t;
}

// ---------------------------------------------------------------------------
// Criterion helpers.

struct SvdCheck {
  double orthonormality = 0;
  double reconstruction = 0;
  bool descending = true;
};

SvdCheck check_svd(const FactorizationResult& r, const Eigen::MatrixXd& w) {
  SvdCheck c;
  const auto d = r.directions.cols();
  c.orthonormality =
      (r.directions.transpose() * r.directions - Eigen::MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff();
  const Eigen::MatrixXd rebuilt = r.left * r.singular_values.asDiagonal() * r.directions.transpose();
  c.reconstruction = (rebuilt - w).norm() / w.norm();
  for (Eigen::Index i = 1; i < r.singular_values.size(); ++i)
    c.descending = c.descending && r.singular_values(i) <= r.singular_values(i - 1);
  return c;
}

GaussianFit gaussian_1d(double mean, double variance) {
  GaussianFit g;
  g.mean = Eigen::VectorXd::Constant(1, mean);
  g.covariance = Eigen::MatrixXd::Constant(1, 1, variance);
  g.n_samples = 100;
  return g;
}

ImageTensor add_noise(const ImageTensor& img, double amplitude, std::uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  return make_image(img.pixels + amplitude * at::randn(img.pixels.sizes(), gen));
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxx == 0 || syy == 0 ? 0.0 : sxy / std::sqrt(sxx * syy);
}

AugmentationRecord fixture_record(std::string id, int direction, double score, int label = 0) {
  AugmentationRecord r;
  r.synthetic_id = std::move(id);
  r.source_id = "src/" + r.synthetic_id;
  r.direction_id = direction;
  r.lpips_to_source = score;
  r.inherited_label = label;
  r.fidelity_pass = score <= 0.2;
  return r;
}

std::set<std::string> ids_of(const std::vector<AugmentationRecord>& records) {
  std::set<std::string> out;
  for (const auto& r : records) out.insert(r.synthetic_id);
  return out;
}

// Balanced accuracy identity and confusion totals; returns an error message or "".
std::string report_identity_error(const EvalReport& r) {
  double sum = 0;
  int n = 0;
  for (std::size_t k = 0; k < r.per_class_recall.size(); ++k)
    if (r.class_defined[k]) {
      sum += r.per_class_recall[k];
      ++n;
    }
  if (n == 0 || std::abs(r.balanced_accuracy - sum / n) > 1e-12) return "balanced accuracy != mean recall";
  std::int64_t total = 0;
  for (const auto& row : r.confusion)
    for (auto c : row) total += c;
  if (total != r.n_test) return "confusion total != n_test";
  return "";
}

// ---------------------------------------------------------------------------

Outcome svd_suite(const ToyModels& toy) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> dim(2, 64), extra(0, 200);
  std::normal_distribution<double> normal;
  double worst_orth = 0, worst_rec = 0;
  bool descending = true;
  for (int trial = 0; trial < 100; ++trial) {
    const int d = dim(rng);
    const int rows = d + extra(rng);
    WeightMatrix w;
    w.normalization = RowNormalization::none;
    w.matrix.resize(rows, d);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < d; ++j) w.matrix(i, j) = normal(rng);
    const auto c = check_svd(factorize(w), w.matrix);
    worst_orth = std::max(worst_orth, c.orthonormality);
    worst_rec = std::max(worst_rec, c.reconstruction);
    descending = descending && c.descending;
  }
  auto G = toy.checkpoint.generator_ema;
  int gan_factorizations = 0;
  for (const char* spec : {"all", "coarse", "medium", "fine"})
    for (auto norm : {RowNormalization::row_l2, RowNormalization::none}) {
      const auto w = build_weight_matrix(G, parse_layer_spec(spec, G), norm);
      const auto c = check_svd(factorize(w), w.matrix);
      worst_orth = std::max(worst_orth, c.orthonormality);
      worst_rec = std::max(worst_rec, c.reconstruction);
      descending = descending && c.descending;
      ++gan_factorizations;
    }
  const bool pass = worst_orth < 1e-5 && worst_rec < 1e-5 && descending;
  return {pass, "100 random + " + std::to_string(gan_factorizations) + " toy-GAN factorizations; max |VtV-I| " +
                    fmt(worst_orth, 3) + ", max rel. recon " + fmt(worst_rec, 3) +
                    (descending ? ", descending" : ", NOT descending")};
}

Outcome frechet_oracle(const ToyModels& toy, const FeatureEmbedder& embedder) {
  const double shift = frechet_distance(gaussian_1d(0, 1), gaussian_1d(1, 1));
  const double scale = frechet_distance(gaussian_1d(0, 1), gaussian_1d(0, 4));
  std::vector<ImageTensor> images;
  const auto test = toy.manifest.entries_in(Split::test);
  for (int i = 0; i < 100; ++i) images.push_back(toy.manifest.load_image(test.at(i)));
  const double self = fid(images, images, embedder);
  const bool pass = std::abs(shift - 1.0) < 1e-8 && std::abs(scale - 1.0) < 1e-8 && std::abs(self) < 1e-6;
  return {pass, "N(0,1)|N(1,1) " + fmt(shift, 12) + ", N(0,1)|N(0,4) " + fmt(scale, 12) +
                    ", fid(X,X) on 100 toy images " + fmt(self, 3)};
}

Outcome lpips_properties(const ToyModels& toy, const FeatureEmbedder& embedder) {
  const auto test = toy.manifest.entries_in(Split::test);
  std::vector<ImageTensor> images;
  for (int i = 0; i < 20; ++i) images.push_back(toy.manifest.load_image(test.at(i)));
  bool identity = true, monotone = true;
  double worst_asym = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    identity = identity && lpips(images[i], images[i], embedder).value == 0.0;
    const auto& other = images[(i + 1) % images.size()];
    worst_asym = std::max(worst_asym,
                          std::abs(lpips(images[i], other, embedder).value - lpips(other, images[i], embedder).value));
    double prev = 0;
    for (double amp : {0.02, 0.1, 0.4}) {
      const double d = lpips(images[i], add_noise(images[i], amp, 100 + i), embedder).value;
      monotone = monotone && d > prev;
      prev = d;
    }
  }
  const bool pass = identity && monotone && worst_asym <= 1e-12;
  return {pass, std::string("20 toy images; identity ") + (identity ? "exact" : "BROKEN") + ", max asymmetry " +
                    fmt(worst_asym, 3) + ", noise levels 0.02/0.1/0.4 " +
                    (monotone ? "strictly increasing" : "NOT increasing")};
}

Outcome gradient_checks() {
  using testing::count_parameters;
  using testing::grad_check;
  using testing::parameters_of;
  auto ck = GanCheckpoint::initialize(testing::tiny_config());
  ck.generator->to(torch::kFloat64);
  ck.discriminator->to(torch::kFloat64);
  auto& G = ck.generator;
  auto& D = ck.discriminator;
  const auto g_params = count_parameters(*G);
  const auto d_params = count_parameters(*D);
  torch::manual_seed(4);
  const auto ws = torch::randn({2, testing::tiny_config().latent_dim}, torch::kFloat64);
  const auto reals = torch::rand({2, 3, 8, 8}, torch::kFloat64) * 2 - 1;
  const auto fakes = G->synthesize(ws, NoiseMode::fixed).detach();

  auto inv_ck = GanCheckpoint::initialize(testing::tiny_config(16));
  auto& g16 = inv_ck.generator_ema;
  g16->to(torch::kFloat64);
  FeatureEmbedder embedder;
  auto styles = torch::randn({2, g16->num_styles(), 4}, torch::kFloat64).requires_grad_(true);
  const auto target = torch::rand({2, 3, 16, 16}, torch::kFloat64) * 2 - 1;

  const std::vector<std::pair<std::string, testing::GradCheckResult>> results{
      {"G", grad_check([&] { return generator_loss(G, D, ws); }, parameters_of(*G))},
      {"D+R1", grad_check([&] { return discriminator_loss(D, fakes, reals, 10.0); }, parameters_of(*D))},
      {"inversion", grad_check([&] { return inversion_loss(g16, styles, target, embedder, 0.8); }, {styles})}};
  bool pass = g_params <= 1000 && d_params <= 1000;
  std::string detail = "params G " + std::to_string(g_params) + ", D " + std::to_string(d_params);
  for (const auto& [name, r] : results) {
    pass = pass && r.norm_relative < 1e-3 && r.worst_component < 1e-3;
    detail += "; " + name + " rel " + fmt(r.norm_relative, 2) + " worst " + fmt(r.worst_component, 2) + " (" +
              std::to_string(r.entries) + " entries)";
  }
  return {pass, detail};
}

Outcome inversion_monotonicity(ToyModels& toy, const FeatureEmbedder& embedder) {
  auto G = toy.checkpoint.generator_ema;
  const auto test = toy.manifest.entries_in(Split::test);
  int monotone = 0;
  double encoder_l2 = 0, refined_l2 = 0;
  std::vector<double> final_l2;
  for (int i = 0; i < 100; ++i) {
    const auto r = invert(toy.manifest.load_image(test.at(i)), G, toy.encoder, &*toy.hypernet, 5, embedder);
    bool ok = true;
    for (std::size_t k = 1; k < r.loss_trace.size(); ++k) ok = ok && r.loss_trace[k].l2 <= r.loss_trace[k - 1].l2;
    monotone += ok ? 1 : 0;
    encoder_l2 += r.loss_trace.front().l2;
    refined_l2 += r.loss_trace.back().l2;
    final_l2.push_back(r.loss_trace.back().l2);
  }
  encoder_l2 /= 100;
  refined_l2 /= 100;

  // Round-trip fidelity on the generator's own samples, reported but not gated.
  std::vector<double> generated, real;
  for (int i = 0; i < 20; ++i) {
    const auto fake = synthesize(G, map_latent(G, sample_z(kLatent, 5000 + i)));
    generated.push_back(invert(fake, G, toy.encoder, &*toy.hypernet, 5, embedder).loss_trace.back().l2);
    real.push_back(final_l2[i]);
  }
  std::sort(generated.begin(), generated.end());
  std::sort(real.begin(), real.end());
  info("median refined L2 over 20 images: generated " + fmt((generated[9] + generated[10]) / 2) + ", toy " +
       fmt((real[9] + real[10]) / 2));

  const bool pass = monotone == 100 && refined_l2 < encoder_l2;
  return {pass, std::to_string(monotone) + "/100 traces non-increasing; mean L2 encoder " + fmt(encoder_l2) +
                    " -> refined " + fmt(refined_l2) + " (reduction " + fmt(encoder_l2 - refined_l2, 3) + ")"};
}

Outcome edit_identity(ToyModels& toy) {
  auto G = toy.checkpoint.generator_ema;
  const int styles = G->num_styles();
  bool identity = true;
  double worst_composition = 0;
  for (int p = 0; p < 20; ++p) {
    const auto w = map_latent(G, sample_z(kLatent, 300 + p));
    const auto wplus = broadcast_to_wplus(w, styles);
    for (int k = 0; k < 10; ++k) {
      const auto d = direction_at(toy.factorization, toy.ranks[k].index);
      for (const auto& code : {w, wplus}) {
        identity = identity && torch::equal(apply_direction(code, d, 0.0).values, code.values);
        const double a = 0.37 * (k + 1), b = -1.9 + 0.2 * p;
        const auto twice = apply_direction(apply_direction(code, d, a), d, b);
        const auto once = apply_direction(code, d, a + b);
        worst_composition = std::max(worst_composition, testing::max_abs_diff(twice.values, once.values));
      }
      const LayerRange range{1, styles - 1};
      identity = identity && torch::equal(apply_direction(wplus, d, 0.0, range).values, wplus.values);
    }
  }

  const bool pass = identity && worst_composition <= 1e-12;
  return {pass, std::string("20 probes x 10 directions, W and Wplus; magnitude 0 ") +
                    (identity ? "exact" : "NOT exact") + ", max |(a then b) - (a+b)| " + fmt(worst_composition, 3)};
}

// The same identity through the HTTP API: a zero edit returns the reconstruction bytes.
Outcome edit_identity_http(ToyModels& toy, const fs::path& cache) {
  const auto root = cache / "service-store";
  fs::remove_all(root);
  ArtifactStore store(root);
  toy.checkpoint.save(root / "gan.dgarc");
  toy.factorization.save(root / "factorization.dgarc");
  toy.encoder.save(root / "encoder.dgarc");
  toy.hypernet->save(root / "hypernet.dgarc");
  store.add("gan", ArtifactKind::checkpoint, "gan.dgarc", {});
  store.add("factorization", ArtifactKind::factorization, "factorization.dgarc", {"gan"});
  store.add("encoder", ArtifactKind::encoder, "encoder.dgarc", {"gan"});
  store.add("hypernet", ArtifactKind::hypernet, "hypernet.dgarc", {"encoder", "gan"});
  ApiServer server(store);
  const int port = server.bind("127.0.0.1", 0);
  server.start();
  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(120);
  const auto png = encode_png(toy.manifest.load_image(toy.manifest.entries_in(Split::test).at(0)));
  const auto inv = cli.Post("/invert", png, "image/png");
  bool http_ok = inv && inv->status == 200;
  if (http_ok) {
    const auto id = nlohmann::json::parse(inv->body).at("inversion_id").get<std::string>();
    const auto recon = cli.Get("/inversions/" + id + "/reconstruction.png");
    const auto body = nlohmann::json{{"inversion_id", id}, {"direction_index", toy.ranks[0].index}, {"magnitude", 0.0}};
    const auto edit = cli.Post("/edit", body.dump(), "application/json");
    http_ok = recon && edit && recon->status == 200 && edit->status == 200 && recon->body == edit->body &&
              std::stod(edit->get_header_value("X-Lpips-To-Source")) == 0.0;
  }
  server.stop();

  return {http_ok, std::string("POST /edit at magnitude 0 vs GET reconstruction.png: ") +
                       (http_ok ? "byte-identical, LPIPS 0" : "DIFFERS")};
}

Outcome factorization_semantics(ToyModels& toy) {
  auto G = toy.checkpoint.generator_ema;
  std::vector<LatentCode> probes;
  for (int i = 0; i < 20; ++i) probes.push_back(map_latent(G, sample_z(kLatent, 1000 + i)));
  const auto ranks = rank_directions(toy.factorization, G, probes, 3.0);
  double top = 0, bottom = 0;
  for (int i = 0; i < 5; ++i) {
    top += ranks[i].mean_image_change / 5;
    bottom += ranks[ranks.size() - 1 - i].mean_image_change / 5;
  }
  double best_r = 0;
  int best_index = -1;
  for (int t = 0; t < 10; ++t) {
    const auto d = direction_at(toy.factorization, ranks[t].index);
    double mean_r = 0;
    for (const auto& p : probes) {
      std::vector<double> xs, ys;
      for (int k = -4; k <= 4; ++k) {
        const double m = 3.0 * k / 4.0;
        xs.push_back(m);
        ys.push_back(static_cast<double>(measure_lesion_area(synthesize(G, apply_direction(p, d, m)))));
      }
      mean_r += pearson(xs, ys) / static_cast<double>(probes.size());
    }
    if (std::abs(mean_r) > std::abs(best_r)) {
      best_r = mean_r;
      best_index = ranks[t].index;
    }
  }
  const bool pass = top > bottom && std::abs(best_r) > 0.5;
  return {pass, "mean change top-5 " + fmt(top) + " vs bottom-5 " + fmt(bottom) + "; best top-10 direction " +
                    std::to_string(best_index) + " mean Pearson r with lesion area " + fmt(best_r, 3) +
                    " (sweep -3..3, 20 probes)"};
}

Outcome end_to_end(ToyModels& toy, const fs::path& cache, const FeatureEmbedder& embedder,
                   std::vector<EvalReport>& reports_out) {
  const auto root = cache / "e2e";
  fs::remove_all(root);
  // Train on light skin only; test on the full skin range.
  ToyDatasetOptions train_opt{.n_per_class = 150,
                              .classes = parse_class_spec("low:pigment=0.1-0.4,skin=0-0.3;high:pigment=0.6-0.95,skin=0-0.3"),
                              .seed = 11,
                              .resolution = kResolution,
                              .val_fraction = 0.2,
                              .test_fraction = 0};
  auto manifest = make_toy_dataset(train_opt, root);
  auto shifted_opt = train_opt;
  shifted_opt.n_per_class = 200;
  shifted_opt.seed = 12;
  shifted_opt.val_fraction = 0;
  shifted_opt.classes = parse_class_spec("low:pigment=0.1-0.4,skin=0-1;high:pigment=0.6-0.95,skin=0-1");
  const auto shifted = make_toy_dataset(shifted_opt, root / "shifted");
  for (auto e : shifted.entries) {
    e.path = "shifted/" + e.path;
    e.split = Split::test;
    manifest.entries.push_back(e);
  }
  manifest.save(root / "manifest.jsonl");
  manifest = load_manifest(root / "manifest.jsonl");

  auto G = toy.checkpoint.generator_ema;
  AugmentationPlan plan;
  plan.alpha = 4;
  plan.per_transformation_count = 60;
  plan.seed = 5;
  for (int i = 0; i < 5; ++i) {
    auto d = direction_at(toy.factorization, toy.ranks[i].index);
    d.status = DirectionStatus::relevant;
    plan.directions.push_back(d);
  }
  const auto out = generate_augmented_set(manifest, plan, {G, &toy.encoder, &*toy.hypernet, 3}, embedder, root / "aug");
  const auto augmented = compose_training_set(manifest, out.records, out.images_dir,
                                              static_cast<int>(out.records.size()), 0);

  ClassifierConfig cc;
  cc.width = 16;
  cc.resolution = kResolution;
  cc.n_classes = 2;
  TrainSpec spec;
  spec.max_epochs = 30;
  spec.patience = 10;
  spec.batch_size = 32;
  spec.lr = 1e-3;
  const auto table = run_ablation(manifest, {{"augmented", augmented}}, cc, spec, {0, 1, 2});
  for (const auto& row : table.rows) reports_out.insert(reports_out.end(), row.reports.begin(), row.reports.end());
  const auto& base = table.rows.at(0);
  const auto& aug = table.rows.at(1);
  const double gain = aug.mean_balanced_accuracy - base.mean_balanced_accuracy;
  const bool pass = gain > 0.02 && gain > base.std_balanced_accuracy;
  return {pass, "train " + std::to_string(manifest.count(Split::train)) + " light-skin images + " +
                    std::to_string(out.records.size()) + " synthetic; balanced accuracy baseline " +
                    fmt(base.mean_balanced_accuracy) + " +- " + fmt(base.std_balanced_accuracy, 2) + ", augmented " +
                    fmt(aug.mean_balanced_accuracy) + " +- " + fmt(aug.std_balanced_accuracy, 2) + ", gain " +
                    fmt(100 * gain, 3) + " pp (3 seeds)"};
}

Outcome filter_behavior(const fs::path& cache) {
  const auto dir = cache / "filter-fixture";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::vector<AugmentationRecord> recs;
  std::map<std::string, int> truth;
  for (int i = 0; i < 70; ++i) {
    auto r = fixture_record("syn_" + std::to_string(i), i % 3, 0.1, i % 2);
    write_png(dir / (r.synthetic_id + ".png"), make_image(torch::zeros({3, 32, 32})));
    truth[r.synthetic_id] = r.inherited_label;
    recs.push_back(r);
  }
  Predictor oracle = [&](const std::vector<ImageTensor>& images) {
    std::vector<int> out;
    for (const auto& im : images) out.push_back(truth.at(im.source_id));
    return out;
  };
  Predictor anti = [&](const std::vector<ImageTensor>& images) {
    auto out = oracle(images);
    for (auto& p : out) p = 1 - p;
    return out;
  };
  const auto [kept, rejected] = filter_by_classifier(recs, dir, oracle, 32);
  const auto [anti_kept, anti_rejected] = filter_by_classifier(recs, dir, anti, 32);
  const bool oracle_ok = kept.size() == recs.size() && rejected.empty();
  const bool anti_ok = anti_kept.empty() && anti_rejected.size() == recs.size();

  // Direction means: 0.17 (kept whole), 0.22 (rejected whole), 0.20 (kept).
  const std::vector<AugmentationRecord> scores{
      fixture_record("d0a", 0, 0.10), fixture_record("d0b", 0, 0.10), fixture_record("d0c", 0, 0.31),
      fixture_record("d1a", 1, 0.19), fixture_record("d1b", 1, 0.25), fixture_record("d1c", 1, 0.22),
      fixture_record("d2a", 2, 0.15), fixture_record("d2b", 2, 0.25)};
  const auto [lp_kept, lp_rejected] = filter_by_lpips(scores, 0.2, LpipsFilterMode::per_transformation);
  const bool partition_ok = ids_of(lp_kept) == std::set<std::string>{"d0a", "d0b", "d0c", "d2a", "d2b"} &&
                            ids_of(lp_rejected) == std::set<std::string>{"d1a", "d1b", "d1c"};
  fs::remove_all(dir);
  return {oracle_ok && anti_ok && partition_ok,
          "oracle rejects " + std::to_string(rejected.size()) + "/70, anti-oracle rejects " +
              std::to_string(anti_rejected.size()) + "/70, per-transformation 0.2 partition " +
              (partition_ok ? "matches" : "DIFFERS")};
}

Outcome metric_identities(const std::vector<EvalReport>& e2e_reports) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> u(0, 1);
  int checked = 0;
  std::string error;
  for (int trial = 0; trial < 50 && error.empty(); ++trial) {
    const int k = 2 + trial % 6;
    const int n = 20 + trial * 7;
    std::vector<int> labels;
    Eigen::MatrixXd scores(n, k);
    for (int i = 0; i < n; ++i) {
      labels.push_back(static_cast<int>(rng() % k));
      for (int c = 0; c < k; ++c) scores(i, c) = normal(rng) + (c == labels.back() ? 0.7 : 0.0);
    }
    const auto r = evaluate_scores(labels, scores);
    error = report_identity_error(r);
    if (r.n_test != n) error = "n_test mismatch";
    ++checked;
  }
  for (const auto& r : e2e_reports) {
    if (!error.empty()) break;
    error = report_identity_error(r);
    ++checked;
  }

  int auc_trials = 0;
  bool auc_invariant = true;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> scores, cubed, logistic;
    std::vector<bool> positive;
    for (int i = 0; i < 200; ++i) {
      positive.push_back(u(rng) < 0.3);
      const double s = std::round((u(rng) * 0.6 + (positive.back() ? 0.3 : 0.0)) * 50) / 50;
      scores.push_back(s);
      cubed.push_back(std::pow(s, 3) + 2 * s);
      logistic.push_back(1 / (1 + std::exp(-7 * (s - 0.5))));
    }
    const double a = *roc_auc(scores, positive);
    auc_invariant = auc_invariant && a == *roc_auc(cubed, positive) && a == *roc_auc(logistic, positive);
    ++auc_trials;
  }
  const bool pass = error.empty() && auc_invariant;
  return {pass, std::to_string(checked) + " reports (" + std::to_string(e2e_reports.size()) +
                    " from the end-to-end run)" + (error.empty() ? "" : ": " + error) +
                    "; AUC under 2 monotone maps on " + std::to_string(auc_trials) + " score sets " +
                    (auc_invariant ? "unchanged" : "CHANGED")};
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  const fs::path cache = argc > 1 ? fs::path(argv[1]) : fs::current_path() / "acceptance-cache";
  fs::create_directories(cache);
  FeatureEmbedder embedder;
  Report report;

  // Criteria that need no trained model run first.
  report.run("gradient checks", 120, gradient_checks);
  report.run("filter behavior", 60, [&] { return filter_behavior(cache); });

  const auto t0 = Clock::now();
  auto toy = prepare_toy(cache, embedder);
  info("toy models ready in " + fmt(seconds_since(t0), 4) + " s");

  report.run("SVD suite", 10, [&] { return svd_suite(toy); });
  report.run("Frechet oracle", 5, [&] { return frechet_oracle(toy, embedder); });
  report.run("LPIPS properties", 30, [&] { return lpips_properties(toy, embedder); });
  report.run("inversion monotonicity", 600, [&] { return inversion_monotonicity(toy, embedder); });
  report.run("edit identity/linearity", 5, [&] { return edit_identity(toy); });
  report.run("edit identity over HTTP", 60, [&] { return edit_identity_http(toy, cache); });
  report.run("factorization semantics", 300, [&] { return factorization_semantics(toy); });
  std::vector<EvalReport> e2e_reports;
  report.run("end-to-end augmentation gain", 1800, [&] { return end_to_end(toy, cache, embedder, e2e_reports); });
  report.run("metric identities", 60, [&] { return metric_identities(e2e_reports); });

  std::printf("%d criteria failed\n", report.failures());
  return report.failures() == 0 ? 0 : 1;
}
