#include "dermagan/gan_training.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

#include "dermagan/error.hpp"

namespace dermagan {

namespace F = torch::nn::functional;

torch::Tensor generator_loss(StyleGenerator& generator, Discriminator& discriminator,
                             const torch::Tensor& ws) {
  auto fakes = generator->synthesize(ws, NoiseMode::fixed);
  return F::softplus(-discriminator->forward(fakes)).mean();
}

torch::Tensor discriminator_loss(Discriminator& discriminator, const torch::Tensor& fakes,
                                 const torch::Tensor& reals, double r1_gamma, double* r1_out) {
  auto loss = F::softplus(discriminator->forward(fakes)).mean();
  if (r1_gamma > 0) {
    auto x = reals.detach().requires_grad_(true);
    auto logits = discriminator->forward(x);
    auto grad = torch::autograd::grad({logits.sum()}, {x}, {}, true, true)[0];
    auto penalty = grad.pow(2).sum({1, 2, 3}).mean();
    if (r1_out) *r1_out = penalty.item<double>();
    loss = loss + F::softplus(-logits).mean() + 0.5 * r1_gamma * penalty;
  } else {
    loss = loss + F::softplus(-discriminator->forward(reals)).mean();
  }
  return loss;
}

torch::Tensor augment_reals(const torch::Tensor& batch, bool hflip, bool random_crop, int padding,
                            at::Generator& gen) {
  if (!hflip && !(random_crop && padding > 0)) return batch;
  const auto n = batch.size(0), r = batch.size(2);
  auto coins = at::rand({n, 3}, gen);
  auto acc = coins.accessor<float, 2>();
  std::vector<torch::Tensor> out;
  out.reserve(n);
  auto padded = random_crop && padding > 0
                    ? F::pad(batch, F::PadFuncOptions({padding, padding, padding, padding}).mode(torch::kReflect))
                    : batch;
  for (int64_t i = 0; i < n; ++i) {
    auto img = padded[i];
    if (random_crop && padding > 0) {
      const auto span = 2 * padding + 1;
      const auto ox = std::min<int64_t>(2 * padding, static_cast<int64_t>(acc[i][1] * span));
      const auto oy = std::min<int64_t>(2 * padding, static_cast<int64_t>(acc[i][2] * span));
      img = img.narrow(1, oy, r).narrow(2, ox, r);
    }
    if (hflip && acc[i][0] < 0.5) img = img.flip({2});
    out.push_back(img);
  }
  return torch::stack(out);
}

namespace {

void set_requires_grad(torch::nn::Module& m, bool flag) {
  for (auto& p : m.parameters()) p.requires_grad_(flag);
}

void check_finite(double v, const char* what, std::int64_t step) {
  if (!std::isfinite(v))
    throw DivergenceError(std::string("non-finite ") + what + " at step " + std::to_string(step));
}

std::vector<ImageTensor> tensor_to_images(const torch::Tensor& batch) {
  std::vector<ImageTensor> out;
  for (int64_t i = 0; i < batch.size(0); ++i) out.push_back(make_image(batch[i]));
  return out;
}

}  // namespace

GanCheckpoint train_gan(const DatasetManifest& manifest, const GeneratorConfig& config,
                        const GanTrainOptions& opt, std::optional<GanCheckpoint> resume,
                        const FeatureEmbedder* embedder) {
  config.validate();
  if (manifest.resolution != config.resolution)
    throw InvalidArgument("train_gan: manifest resolution does not match generator resolution");
  const auto train = load_split(manifest, Split::train);
  if (train.size() < 2) throw InvalidArgument("train_gan: need at least 2 training images");
  if (opt.batch < 1) throw InvalidArgument("train_gan: batch must be >= 1");

  GanCheckpoint ck = resume ? std::move(*resume) : GanCheckpoint::initialize(config);
  if (resume && ck.config.to_json() != config.to_json())
    throw InvalidArgument("train_gan: resume checkpoint has a different config");

  auto gen = at::detail::createCPUGenerator(opt.seed + static_cast<std::uint64_t>(ck.step));
  const FeatureEmbedder default_embedder;
  const FeatureEmbedder& emb = embedder ? *embedder : default_embedder;

  auto& G = ck.generator;
  auto& G_ema = ck.generator_ema;
  auto& D = ck.discriminator;
  const double betas_lr = opt.lr;
  torch::optim::Adam g_opt(G->parameters(), torch::optim::AdamOptions(betas_lr).betas({0.0, 0.99}).eps(1e-8));
  torch::optim::Adam d_opt(D->parameters(), torch::optim::AdamOptions(betas_lr).betas({0.0, 0.99}).eps(1e-8));
  const int d = config.latent_dim;

  auto maybe_fid = [&](std::int64_t step) {
    if (opt.fid_interval <= 0 || step % opt.fid_interval != 0) return;
    torch::NoGradGuard guard;
    const int n = std::min<int>(opt.fid_samples, static_cast<int>(train.size()));
    auto z = at::normal(0.0, 1.0, {n, d}, gen);
    auto fakes = G_ema->synthesize(G_ema->map(z), NoiseMode::fixed);
    auto idx = at::randperm(train.size(), gen).narrow(0, 0, n);
    auto real_imgs = tensor_to_images(train.images.index_select(0, idx));
    auto fake_imgs = tensor_to_images(fakes);
    FidPoint p{step, fid(real_imgs, fake_imgs, emb)};
    ck.fid_history.push_back(p);
    if (opt.on_fid) opt.on_fid(p);
  };

  const std::int64_t end = ck.step + opt.iterations;
  while (ck.step < end) {
    const auto step = ck.step;
    GanStepLog log;
    log.step = step;

    // Discriminator.
    set_requires_grad(*G, false);
    set_requires_grad(*D, true);
    {
      torch::Tensor fakes;
      {
        torch::NoGradGuard guard;
        auto z = at::normal(0.0, 1.0, {opt.batch, d}, gen);
        fakes = G->synthesize(G->map(z), NoiseMode::random);
      }
      auto idx = at::randint(train.size(), {opt.batch}, gen);
      auto reals = augment_reals(train.images.index_select(0, idx), opt.hflip, opt.random_crop,
                                 opt.crop_padding, gen);
      const bool do_r1 = opt.r1_gamma > 0 && opt.r1_interval > 0 && step % opt.r1_interval == 0;
      double r1 = 0;
      d_opt.zero_grad();
      auto loss = discriminator_loss(D, fakes, reals, do_r1 ? opt.r1_gamma * opt.r1_interval : 0.0,
                                     do_r1 ? &r1 : nullptr);
      loss.backward();
      log.d_loss = loss.item<double>();
      check_finite(log.d_loss, "discriminator loss", step);
      if (do_r1) log.r1 = r1;
      d_opt.step();
    }

    // Generator.
    set_requires_grad(*G, true);
    set_requires_grad(*D, false);
    {
      auto z = at::normal(0.0, 1.0, {opt.batch, d}, gen);
      auto fakes = G->synthesize(G->map(z), NoiseMode::random);
      auto loss = F::softplus(-D->forward(fakes)).mean();
      g_opt.zero_grad();
      loss.backward();
      log.g_loss = loss.item<double>();
      check_finite(log.g_loss, "generator loss", step);
      g_opt.step();
    }
    set_requires_grad(*D, true);

    // EMA with a warm-up so short runs are not dominated by the init.
    {
      torch::NoGradGuard guard;
      const double beta = std::min(opt.ema_decay, (1.0 + step) / (10.0 + step));
      auto src = G->named_parameters(true);
      for (auto& p : G_ema->named_parameters(true)) p.value().lerp_(src[p.key()], 1.0 - beta);
    }

    ++ck.step;
    if (opt.on_step) opt.on_step(log);
    maybe_fid(ck.step);
  }

  set_requires_grad(*G, true);
  estimate_mean_w(G, opt.mean_w_samples, config.seed ^ kMeanWSeed);
  estimate_mean_w(G_ema, opt.mean_w_samples, config.seed ^ kMeanWSeed);
  return ck;
}

}  // namespace dermagan
