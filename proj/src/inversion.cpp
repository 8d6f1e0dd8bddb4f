#include "dermagan/inversion.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

#include "dermagan/archive.hpp"
#include "dermagan/error.hpp"

namespace dermagan {

namespace nn = torch::nn;

namespace {

nn::Sequential conv_pyramid(int in_channels, int resolution, int width) {
  nn::Sequential seq;
  seq->push_back(nn::Conv2d(nn::Conv2dOptions(in_channels, width, 3).padding(1)));
  seq->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
  int c = width;
  for (int r = resolution; r > 4; r /= 2) {
    const int next = std::min(2 * c, 4 * width);
    seq->push_back(nn::Conv2d(nn::Conv2dOptions(c, next, 3).stride(2).padding(1)));
    seq->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
    c = next;
  }
  seq->push_back(nn::Flatten());
  seq->push_back(nn::Linear(c * 16, 256));
  seq->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
  return seq;
}

/// Freezes a module's parameters for the lifetime of the guard.
class FreezeGuard {
 public:
  explicit FreezeGuard(torch::nn::Module& m) {
    for (auto& p : m.parameters()) {
      saved_.emplace_back(p, p.requires_grad());
      p.requires_grad_(false);
    }
  }
  ~FreezeGuard() {
    for (auto& [p, flag] : saved_) p.requires_grad_(flag);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<std::pair<torch::Tensor, bool>> saved_;
};

double mse(const torch::Tensor& a, const torch::Tensor& b) {
  return (a - b).pow(2).mean().item<double>();
}

void check_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw DivergenceError("non-finite loss during " + what);
}

WeightOffsets add_offsets(const WeightOffsets& base, const WeightOffsets& inc) {
  WeightOffsets out;
  for (const auto& [k, v] : inc) {
    auto it = base.find(k);
    out[k] = it == base.end() ? v : it->second + v;
  }
  return out;
}

WeightOffsets detach(const WeightOffsets& o) {
  WeightOffsets out;
  for (const auto& [k, v] : o) out[k] = v.detach();
  return out;
}

void check_image(const ImageTensor& image, StyleGenerator& generator) {
  if (image.resolution() != generator->config().resolution)
    throw InvalidArgument("inversion: image resolution " + std::to_string(image.resolution()) +
                          " does not match generator resolution " +
                          std::to_string(generator->config().resolution));
}

}  // namespace

// ---------------------------------------------------------------------------

EncoderImpl::EncoderImpl(const GeneratorConfig& config, int num_styles, bool wplus, int width)
    : num_styles_(num_styles), latent_dim_(config.latent_dim), wplus_(wplus) {
  torch::manual_seed(config.seed + 104729);
  backbone_ = register_module("backbone", conv_pyramid(3, config.resolution, width));
  base_head_ = register_module("base_head", nn::Linear(256, latent_dim_));
  delta_head_ = register_module("delta_head", nn::Linear(256, num_styles_ * latent_dim_));
  {
    torch::NoGradGuard guard;
    base_head_->weight.mul_(0.1);
    base_head_->bias.zero_();
    delta_head_->weight.mul_(0.01);
    delta_head_->bias.zero_();
  }
  mean_w = register_buffer("mean_w", torch::zeros({latent_dim_}));
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& images) {
  auto h = backbone_->forward(images);
  auto w = mean_w + base_head_->forward(h);  // [B, D]
  auto ws = w.unsqueeze(1).expand({-1, num_styles_, -1});
  if (wplus_) ws = ws + delta_head_->forward(h).view({-1, num_styles_, latent_dim_});
  return ws;
}

EncoderModel EncoderModel::create(StyleGenerator& generator, bool wplus, int width) {
  EncoderModel m;
  m.generator_config = generator->config();
  m.num_styles = generator->num_styles();
  m.wplus = wplus;
  m.width = width;
  m.net = Encoder(m.generator_config, m.num_styles, wplus, width);
  {
    torch::NoGradGuard guard;
    m.net->mean_w.copy_(generator->mean_w);
  }
  return m;
}

LatentCode EncoderModel::encode(const ImageTensor& image) const {
  if (image.resolution() != generator_config.resolution)
    throw InvalidArgument("encoder: resolution mismatch");
  torch::NoGradGuard guard;
  auto encoder = net;
  auto ws = encoder->forward(image.pixels.unsqueeze(0)).squeeze(0).to(torch::kFloat64);
  if (wplus) return {LatentSpace::Wplus, ws};
  return {LatentSpace::W, ws[0].clone()};
}

void EncoderModel::save(const std::filesystem::path& path) const {
  Archive ar;
  ar.meta["kind"] = "encoder";
  ar.meta["generator_config"] = generator_config.to_json();
  ar.meta["num_styles"] = num_styles;
  ar.meta["wplus"] = wplus;
  ar.meta["width"] = width;
  ar.put_module("E/", *net);
  ar.save(path);
}

EncoderModel EncoderModel::load(const std::filesystem::path& path) {
  auto ar = Archive::load(path);
  if (ar.meta.value("kind", "") != "encoder") throw IoError("not an encoder archive: " + path.string());
  EncoderModel m;
  m.generator_config = GeneratorConfig::from_json(ar.meta.at("generator_config"));
  m.num_styles = ar.meta.at("num_styles").get<int>();
  m.wplus = ar.meta.at("wplus").get<bool>();
  m.width = ar.meta.at("width").get<int>();
  m.net = Encoder(m.generator_config, m.num_styles, m.wplus, m.width);
  ar.load_module("E/", *m.net);
  return m;
}

HypernetImpl::HypernetImpl(std::vector<LayerInfo> targets, int resolution, int width)
    : targets_(std::move(targets)) {
  torch::manual_seed(1299709 + resolution);
  backbone_ = register_module("backbone", conv_pyramid(6, resolution, width));
  for (const auto& t : targets_) {
    auto head = nn::Linear(256, t.out_channels * t.in_channels);
    {
      torch::NoGradGuard guard;
      head->weight.zero_();
      head->bias.zero_();
    }
    heads_.push_back(register_module("head" + std::to_string(t.index), head));
  }
}

WeightOffsets HypernetImpl::forward(const torch::Tensor& target, const torch::Tensor& current) {
  auto h = backbone_->forward(torch::cat({target, current}, 1));
  WeightOffsets out;
  for (std::size_t i = 0; i < targets_.size(); ++i)
    out[targets_[i].index] =
        heads_[i]->forward(h).view({-1, targets_[i].out_channels, targets_[i].in_channels});
  return out;
}

namespace {

std::vector<LayerInfo> hypernet_targets(StyleGenerator& generator, const std::vector<int>& layers) {
  std::vector<LayerInfo> out;
  for (int i : layers) out.push_back(generator->synthesis->layer_info().at(i));
  return out;
}

}  // namespace

HypernetModel HypernetModel::create(StyleGenerator& generator, int width, int refinement_steps) {
  HypernetModel m;
  for (const auto& group : {"medium", "fine"})
    for (int i : generator->layers_for(group))
      if (generator->synthesis->layer_info()[i].kind != LayerKind::to_rgb) m.target_layers.push_back(i);
  if (m.target_layers.empty())
    throw InvalidArgument("hypernet: generator has no medium/fine conv layers");
  m.resolution = generator->config().resolution;
  m.width = width;
  m.refinement_steps = refinement_steps;
  m.net = Hypernet(hypernet_targets(generator, m.target_layers), m.resolution, width);
  return m;
}

void HypernetModel::save(const std::filesystem::path& path) const {
  Archive ar;
  ar.meta["kind"] = "hypernet";
  ar.meta["target_layers"] = target_layers;
  ar.meta["resolution"] = resolution;
  ar.meta["width"] = width;
  ar.meta["refinement_steps"] = refinement_steps;
  ar.put_module("H/", *net);
  ar.save(path);
}

HypernetModel HypernetModel::load(const std::filesystem::path& path, StyleGenerator& generator) {
  auto ar = Archive::load(path);
  if (ar.meta.value("kind", "") != "hypernet") throw IoError("not a hypernet archive: " + path.string());
  HypernetModel m;
  m.target_layers = ar.meta.at("target_layers").get<std::vector<int>>();
  m.resolution = ar.meta.at("resolution").get<int>();
  m.width = ar.meta.at("width").get<int>();
  m.refinement_steps = ar.meta.at("refinement_steps").get<int>();
  m.net = Hypernet(hypernet_targets(generator, m.target_layers), m.resolution, m.width);
  ar.load_module("H/", *m.net);
  return m;
}

// ---------------------------------------------------------------------------

void InversionResult::save(const std::filesystem::path& path) const {
  Archive ar;
  ar.meta["kind"] = "inversion";
  ar.meta["space"] = to_string(latent.space);
  ar.meta["source_id"] = source_id;
  auto trace = nlohmann::json::array();
  for (const auto& p : loss_trace) trace.push_back({{"l2", p.l2}, {"lpips", p.lpips}});
  ar.meta["loss_trace"] = trace;
  ar.put("latent", latent.values);
  std::vector<int> layers;
  for (const auto& [k, v] : weight_offsets) {
    ar.put("offset/" + std::to_string(k), v);
    layers.push_back(k);
  }
  ar.meta["offset_layers"] = layers;
  ar.save(path);
}

InversionResult InversionResult::load(const std::filesystem::path& path) {
  auto ar = Archive::load(path);
  if (ar.meta.value("kind", "") != "inversion") throw IoError("not an inversion archive: " + path.string());
  InversionResult r;
  const auto space = ar.meta.at("space").get<std::string>();
  r.latent.space = space == "Wplus" ? LatentSpace::Wplus : space == "W" ? LatentSpace::W : LatentSpace::Z;
  r.latent.values = ar.tensor("latent");
  r.source_id = ar.meta.at("source_id").get<std::string>();
  for (const auto& p : ar.meta.at("loss_trace"))
    r.loss_trace.push_back({p.at("l2").get<double>(), p.at("lpips").get<double>()});
  for (int k : ar.meta.at("offset_layers").get<std::vector<int>>())
    r.weight_offsets[k] = ar.tensor("offset/" + std::to_string(k));
  return r;
}

torch::Tensor reconstruction_loss(const torch::Tensor& recon, const torch::Tensor& target,
                                  const FeatureEmbedder& embedder, double lpips_weight) {
  auto l2 = (recon - target).pow(2).mean({1, 2, 3});
  if (lpips_weight == 0.0) return l2;
  return l2 + lpips_weight * lpips_batch(recon, target, embedder);
}

torch::Tensor inversion_loss(StyleGenerator& generator, const torch::Tensor& ws,
                             const torch::Tensor& target, const FeatureEmbedder& embedder,
                             double lpips_weight) {
  auto recon = generator->synthesize(ws, NoiseMode::fixed);
  return reconstruction_loss(recon, target.to(recon.scalar_type()), embedder, lpips_weight).mean();
}

namespace {

/// Mean L2 over `images` for the styles produced by `styles_of`.
template <typename StylesFn>
double mean_l2(StyleGenerator& g, const torch::Tensor& images, StylesFn styles_of) {
  torch::NoGradGuard guard;
  double total = 0;
  const auto n = images.size(0);
  for (int64_t s = 0; s < n; s += 64) {
    const auto m = std::min<int64_t>(64, n - s);
    auto x = images.narrow(0, s, m);
    auto recon = g->synthesize(styles_of(x), NoiseMode::fixed);
    total += (recon - x).pow(2).mean({1, 2, 3}).sum().item().toDouble();
  }
  return total / static_cast<double>(n);
}

torch::Tensor validation_images(const DatasetManifest& manifest, const LoadedSplit& train) {
  auto val = load_split(manifest, Split::val);
  if (val.size() > 0) return val.images;
  return train.images.narrow(0, 0, std::min<int64_t>(64, train.size()));
}

}  // namespace

EncoderModel train_encoder(const DatasetManifest& manifest, const GanCheckpoint& checkpoint,
                           const FeatureEmbedder& embedder, const InversionTrainOptions& opt,
                           EncoderTrainReport* report, bool wplus) {
  auto G = checkpoint.generator_ema;
  if (manifest.resolution != G->config().resolution)
    throw InvalidArgument("train_encoder: manifest resolution does not match generator");
  const auto train = load_split(manifest, Split::train);
  if (train.size() == 0) throw InvalidArgument("train_encoder: empty train split");
  const auto val = validation_images(manifest, train);

  FreezeGuard freeze(*G);
  auto model = EncoderModel::create(G, wplus);
  EncoderTrainReport rep;
  const int styles = G->num_styles();
  rep.mean_w_val_l2 = mean_l2(G, val, [&](const torch::Tensor& x) {
    return G->mean_w.view({1, 1, -1}).expand({x.size(0), styles, -1});
  });
  auto encoder_styles = [&](const torch::Tensor& x) { return model.net->forward(x); };
  rep.initial_val_l2 = mean_l2(G, val, encoder_styles);

  torch::optim::Adam adam(model.net->parameters(), torch::optim::AdamOptions(opt.lr));
  auto gen = at::detail::createCPUGenerator(opt.seed);
  for (int step = 0; step < opt.steps; ++step) {
    auto idx = at::randint(train.size(), {opt.batch}, gen);
    auto x = train.images.index_select(0, idx);
    auto recon = G->synthesize(model.net->forward(x), NoiseMode::fixed);
    auto loss = reconstruction_loss(recon, x, embedder, opt.lpips_weight).mean();
    adam.zero_grad();
    loss.backward();
    adam.step();
    const double v = loss.item<double>();
    check_finite(v, "encoder training at step " + std::to_string(step));
    rep.loss_curve.push_back(v);
    if (opt.on_log && opt.log_interval > 0 && step % opt.log_interval == 0) opt.on_log(step, v);
  }
  rep.final_val_l2 = mean_l2(G, val, encoder_styles);
  if (report) *report = rep;
  return model;
}

HypernetModel train_hypernet(const DatasetManifest& manifest, const GanCheckpoint& checkpoint,
                             const EncoderModel& encoder, const FeatureEmbedder& embedder,
                             const InversionTrainOptions& opt, HypernetTrainReport* report) {
  auto G = checkpoint.generator_ema;
  if (manifest.resolution != G->config().resolution)
    throw InvalidArgument("train_hypernet: manifest resolution does not match generator");
  const auto train = load_split(manifest, Split::train);
  if (train.size() == 0) throw InvalidArgument("train_hypernet: empty train split");
  const auto val = validation_images(manifest, train);

  FreezeGuard freeze(*G);
  auto enc = encoder.net;
  FreezeGuard freeze_e(*enc);
  auto model = HypernetModel::create(G);
  HypernetTrainReport rep;
  torch::optim::Adam adam(model.net->parameters(), torch::optim::AdamOptions(opt.lr));
  auto gen = at::detail::createCPUGenerator(opt.seed);
  for (int step = 0; step < opt.steps; ++step) {
    auto idx = at::randint(train.size(), {opt.batch}, gen);
    auto x = train.images.index_select(0, idx);
    torch::Tensor ws, recon;
    {
      torch::NoGradGuard guard;
      ws = enc->forward(x);
      recon = G->synthesize(ws, NoiseMode::fixed);
    }
    WeightOffsets offsets;
    double last = 0;
    for (int t = 0; t < opt.train_refinement_steps; ++t) {
      auto proposed = add_offsets(offsets, model.net->forward(x, recon));
      auto out = G->synthesize(ws, NoiseMode::fixed, proposed);
      auto loss = reconstruction_loss(out, x, embedder, opt.lpips_weight).mean();
      adam.zero_grad();
      loss.backward();
      adam.step();
      last = loss.item<double>();
      check_finite(last, "hypernet training at step " + std::to_string(step));
      offsets = detach(proposed);
      recon = out.detach();
    }
    rep.loss_curve.push_back(last);
    if (opt.on_log && opt.log_interval > 0 && step % opt.log_interval == 0) opt.on_log(step, last);
  }

  {
    torch::NoGradGuard guard;
    double enc = 0, refined = 0;
    for (int64_t i = 0; i < val.size(0); ++i) {
      auto r = invert(make_image(val[i]), G, encoder, &model, model.refinement_steps, embedder);
      enc += r.loss_trace.front().l2;
      refined += r.loss_trace.back().l2;
    }
    rep.encoder_val_l2 = enc / static_cast<double>(val.size(0));
    rep.refined_val_l2 = refined / static_cast<double>(val.size(0));
  }
  if (report) *report = rep;
  return model;
}

// ---------------------------------------------------------------------------

InversionResult invert(const ImageTensor& image, StyleGenerator& generator,
                       const LatentInitializer& initializer, const HypernetModel* hypernet,
                       int steps, const FeatureEmbedder& embedder) {
  check_image(image, generator);
  if (steps < 0) throw InvalidArgument("invert: steps must be >= 0");
  torch::NoGradGuard guard;
  InversionResult r;
  r.source_id = image.source_id;
  r.latent = initializer(image);
  const auto target = image.pixels.unsqueeze(0);
  const auto ws = latents_to_batch(std::span(&r.latent, 1), generator->num_styles());

  auto measure = [&](const torch::Tensor& recon) {
    return LossPoint{mse(recon, target), lpips_batch(recon.to(torch::kFloat64),
                                                     target.to(torch::kFloat64), embedder)
                                             .item<double>()};
  };
  auto recon = generator->synthesize(ws, NoiseMode::fixed);
  r.loss_trace.push_back(measure(recon));
  WeightOffsets offsets;
  Hypernet hnet = hypernet ? hypernet->net : Hypernet{nullptr};
  for (int t = 0; t < steps; ++t) {
    if (hypernet) {
      auto proposed = add_offsets(offsets, hnet->forward(target, recon));
      auto out = generator->synthesize(ws, NoiseMode::fixed, proposed);
      auto point = measure(out);
      if (point.l2 <= r.loss_trace.back().l2) {
        offsets = std::move(proposed);
        recon = out;
        r.loss_trace.push_back(point);
        continue;
      }
    }
    r.loss_trace.push_back(r.loss_trace.back());
  }
  for (const auto& [k, v] : offsets) r.weight_offsets[k] = v.squeeze(0).clone();
  return r;
}

InversionResult invert(const ImageTensor& image, StyleGenerator& generator,
                       const EncoderModel& encoder, const HypernetModel* hypernet, int steps,
                       const FeatureEmbedder& embedder) {
  return invert(
      image, generator, [&](const ImageTensor& im) { return encoder.encode(im); }, hypernet, steps,
      embedder);
}

InversionResult optimize_latent(const ImageTensor& image, StyleGenerator& generator,
                                const LatentCode& init, int iters, double lr,
                                const FeatureEmbedder& embedder, double lpips_weight) {
  check_image(image, generator);
  if (init.space == LatentSpace::Z) throw InvalidArgument("optimize_latent: init must be W or Wplus");
  init.validate();
  if (iters < 0) throw InvalidArgument("optimize_latent: iters must be >= 0");
  FreezeGuard freeze(*generator);

  const int styles = generator->num_styles();
  auto target = image.pixels.unsqueeze(0);
  auto to_ws = [&](const torch::Tensor& v) {
    return init.space == LatentSpace::W ? v.view({1, 1, -1}).expand({1, styles, -1}) : v.unsqueeze(0);
  };
  auto evaluate = [&](const torch::Tensor& v) {
    torch::NoGradGuard guard;
    auto recon = generator->synthesize(to_ws(v), NoiseMode::fixed);
    auto l2 = (recon - target.to(recon.scalar_type())).pow(2).mean().item<double>();
    auto lp = lpips_batch(recon.to(torch::kFloat64), target.to(torch::kFloat64), embedder).item<double>();
    return LossPoint{l2, lp};
  };

  InversionResult r;
  r.source_id = image.source_id;
  auto latent = init.values.to(torch::kFloat64).clone().requires_grad_(true);
  auto best_values = latent.detach().clone();
  LossPoint best = evaluate(best_values);
  auto objective = [&](const LossPoint& p) { return p.l2 + lpips_weight * p.lpips; };
  r.loss_trace.push_back(best);

  torch::optim::Adam adam(std::vector<torch::Tensor>{latent}, torch::optim::AdamOptions(lr));
  for (int it = 0; it < iters; ++it) {
    auto loss = inversion_loss(generator, to_ws(latent), target, embedder, lpips_weight);
    adam.zero_grad();
    loss.backward();
    if (!std::isfinite(loss.item<double>()))
      throw DivergenceError("optimize_latent diverged at iteration " + std::to_string(it) +
                            " (best l2 " + std::to_string(best.l2) + ")");
    adam.step();
    auto point = evaluate(latent.detach());
    if (objective(point) <= objective(best)) {
      best = point;
      best_values = latent.detach().clone();
    }
    r.loss_trace.push_back(best);
  }
  r.latent = {init.space, best_values};
  return r;
}

}  // namespace dermagan
