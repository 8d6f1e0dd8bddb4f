#include "dermagan/generator.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <cstring>

#include "dermagan/archive.hpp"
#include "dermagan/error.hpp"

namespace dermagan {

namespace F = torch::nn::functional;
using nlohmann::json;

namespace {

constexpr double kSqrt2 = 1.4142135623730951;

torch::Tensor lrelu(const torch::Tensor& x) { return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2)) * kSqrt2; }

torch::Tensor normal(std::vector<int64_t> shape, at::Generator& gen) {
  return at::normal(0.0, 1.0, shape, gen);
}

bool is_pow2(int v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace

std::string_view to_string(LatentSpace space) {
  switch (space) {
    case LatentSpace::Z: return "Z";
    case LatentSpace::W: return "W";
    case LatentSpace::Wplus: return "Wplus";
  }
  return "W";
}

void LatentCode::validate() const {
  if (!values.defined()) throw InvalidArgument("latent code: undefined values");
  const bool matrix = space == LatentSpace::Wplus;
  if (values.dim() != (matrix ? 2 : 1))
    throw InvalidArgument(std::string("latent code: wrong rank for ") + std::string(to_string(space)));
  if (!torch::isfinite(values).all().item<bool>())
    throw InvalidArgument("latent code: non-finite values");
}

void GeneratorConfig::validate() const {
  if (latent_dim < 1) throw InvalidArgument("generator config: latent_dim must be >= 1");
  if (mapping_layers < 1) throw InvalidArgument("generator config: mapping_layers must be >= 1");
  if (base_channels < 1) throw InvalidArgument("generator config: base_channels must be >= 1");
  if (!is_pow2(resolution) || resolution < 4)
    throw InvalidArgument("generator config: resolution must be a power of two >= 4");
  if (!(mapping_lr_ratio > 0.0 && mapping_lr_ratio <= 1.0))
    throw InvalidArgument("generator config: mapping_lr_ratio must be in (0, 1]");
}

int GeneratorConfig::channels_at(int res) const {
  const long scaled = static_cast<long>(base_channels) * 16 / res;
  return static_cast<int>(std::max(1L, std::min<long>(base_channels, scaled)));
}

json GeneratorConfig::to_json() const {
  return {{"latent_dim", latent_dim},         {"mapping_layers", mapping_layers},
          {"base_channels", base_channels},   {"resolution", resolution},
          {"mapping_lr_ratio", mapping_lr_ratio}, {"seed", seed}};
}

GeneratorConfig GeneratorConfig::from_json(const json& j) {
  GeneratorConfig c;
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.mapping_layers = j.value("mapping_layers", c.mapping_layers);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.resolution = j.value("resolution", c.resolution);
  c.mapping_lr_ratio = j.value("mapping_lr_ratio", c.mapping_lr_ratio);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

EqualLinearImpl::EqualLinearImpl(int in, int out, double lr_mul, double bias_init)
    : weight_gain_(lr_mul / std::sqrt(static_cast<double>(in))), lr_mul_(lr_mul) {
  weight = register_parameter("weight", torch::randn({out, in}) / lr_mul);
  bias = register_parameter("bias", torch::full({out}, bias_init / lr_mul));
}

torch::Tensor EqualLinearImpl::forward(const torch::Tensor& x) const {
  return torch::addmm(bias * lr_mul_, x, (weight * weight_gain_).t());
}

ModulatedConvImpl::ModulatedConvImpl(const LayerInfo& info, int latent_dim, int kernel,
                                     bool demodulate, bool use_noise, std::uint64_t noise_seed)
    : info_(info),
      demodulate_(demodulate),
      use_noise_(use_noise),
      weight_gain_(1.0 / std::sqrt(static_cast<double>(info.in_channels * kernel * kernel))) {
  affine = register_module("affine", EqualLinear(latent_dim, info.in_channels, 1.0, 1.0));
  weight = register_parameter("weight", torch::randn({info.out_channels, info.in_channels, kernel, kernel}));
  bias = register_parameter("bias", torch::zeros({info.out_channels}));
  if (use_noise_) {
    noise_strength = register_parameter("noise_strength", torch::zeros({1}));
    auto gen = at::detail::createCPUGenerator(noise_seed);
    fixed_noise = register_buffer("fixed_noise", normal({1, 1, info.resolution, info.resolution}, gen));
  }
}

torch::Tensor ModulatedConvImpl::styles(const torch::Tensor& w) const {
  return affine->forward(w);
}

torch::Tensor ModulatedConvImpl::demodulated_weight(const torch::Tensor& s,
                                                    const torch::Tensor& offsets) const {
  const auto b = s.size(0);
  auto wt = (weight * weight_gain_).unsqueeze(0);  // [1, O, I, k, k]
  if (offsets.defined()) {
    auto off = offsets.dim() == 2 ? offsets.unsqueeze(0) : offsets;
    wt = wt * (1.0 + off.unsqueeze(-1).unsqueeze(-1));
  }
  wt = wt * s.view({b, 1, -1, 1, 1});
  if (demodulate_) wt = wt * torch::rsqrt(wt.pow(2).sum({2, 3, 4}, true) + 1e-8);
  return wt;
}

torch::Tensor ModulatedConvImpl::forward(const torch::Tensor& x_in, const torch::Tensor& w,
                                         NoiseMode noise_mode, const torch::Tensor& offsets) {
  auto x = x_in;
  if (info_.kind == LayerKind::conv_up)
    x = F::interpolate(x, F::InterpolateFuncOptions()
                              .scale_factor(std::vector<double>{2.0, 2.0})
                              .mode(torch::kBilinear)
                              .align_corners(false));
  const auto b = x.size(0);
  const auto s = styles(w);
  const int pad = static_cast<int>(weight.size(-1) / 2);
  const auto wg = weight * weight_gain_;
  const auto xs = x * s.view({b, -1, 1, 1});
  // Scale activations instead of weights; equivalent to the per-sample
  // weight modulation and avoids a grouped convolution.
  auto y = torch::conv2d(xs, wg, {}, 1, pad);
  torch::Tensor demod_extra;
  if (offsets.defined()) {
    if (info_.kind == LayerKind::to_rgb) throw InvalidArgument("weight offsets not supported on toRGB layers");
    // weight * (1 + off) = weight + weight * off: only the offset part needs
    // the per-sample grouped convolution, and zero offsets add exact zeros.
    auto off = offsets.dim() == 2 ? offsets.unsqueeze(0).expand({b, -1, -1}) : offsets;
    auto dw = wg.unsqueeze(0) * off.unsqueeze(-1).unsqueeze(-1);  // [B, O, I, k, k]
    y = y + torch::conv2d(xs.reshape({1, -1, x.size(2), x.size(3)}),
                          dw.reshape({-1, dw.size(2), dw.size(3), dw.size(4)}), {}, 1, pad, 1, b)
                .reshape({b, -1, x.size(2), x.size(3)});
    if (demodulate_) {
      auto wsq = wg.pow(2).sum({2, 3}).unsqueeze(0);  // [1, O, I]
      demod_extra = torch::einsum("bi,boi->bo", {s.pow(2), wsq * ((1.0 + off).pow(2) - 1.0)});
    }
  }
  if (demodulate_) {
    auto wsq = wg.pow(2).sum({2, 3});  // [O, I]
    auto energy = torch::mm(s.pow(2), wsq.t());  // [B, O]
    if (demod_extra.defined()) energy = energy + demod_extra;
    y = y * torch::rsqrt(energy + 1e-8).view({b, -1, 1, 1});
  }
  if (use_noise_) {
    auto n = noise_mode == NoiseMode::fixed
                 ? fixed_noise.to(y.scalar_type())
                 : torch::randn({b, 1, y.size(2), y.size(3)}, y.options());
    y = y + noise_strength * n;
  }
  y = y + bias.view({1, -1, 1, 1});
  return info_.kind == LayerKind::to_rgb ? y : lrelu(y);
}

MappingNetworkImpl::MappingNetworkImpl(const GeneratorConfig& c) {
  for (int i = 0; i < c.mapping_layers; ++i)
    layers_.push_back(register_module("fc" + std::to_string(i),
                                      EqualLinear(c.latent_dim, c.latent_dim, c.mapping_lr_ratio)));
}

torch::Tensor MappingNetworkImpl::forward(const torch::Tensor& z) {
  auto x = z * torch::rsqrt(z.pow(2).mean(1, true) + 1e-8);
  for (auto& l : layers_) x = lrelu(l->forward(x));
  return x;
}

SynthesisNetworkImpl::SynthesisNetworkImpl(const GeneratorConfig& c) {
  const int c4 = c.channels_at(4);
  const_input = register_parameter("const_input", torch::randn({1, c4, 4, 4}));
  auto add = [&](LayerKind kind, int res, int in, int out) {
    LayerInfo info{static_cast<int>(layers_.size()), res, kind, in, out};
    const bool rgb = kind == LayerKind::to_rgb;
    auto layer = ModulatedConv(info, c.latent_dim, rgb ? 1 : 3, !rgb, !rgb,
                               c.seed * 1000003ULL + static_cast<std::uint64_t>(info.index) + 1);
    layers_.push_back(register_module("layer" + std::to_string(info.index), layer));
    info_.push_back(info);
  };
  add(LayerKind::conv, 4, c4, c4);
  add(LayerKind::to_rgb, 4, c4, 3);
  for (int res = 8; res <= c.resolution; res *= 2) {
    const int in = c.channels_at(res / 2), out = c.channels_at(res);
    add(LayerKind::conv_up, res, in, out);
    add(LayerKind::conv, res, out, out);
    add(LayerKind::to_rgb, res, out, 3);
  }
}

torch::Tensor SynthesisNetworkImpl::forward(const torch::Tensor& ws, NoiseMode noise_mode,
                                            const WeightOffsets& offsets) {
  if (ws.dim() != 3 || ws.size(1) != num_styles())
    throw InvalidArgument("synthesis: expected [B, " + std::to_string(num_styles()) + ", D] styles");
  const auto b = ws.size(0);
  auto x = const_input.expand({b, -1, -1, -1});
  torch::Tensor img;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto it = offsets.find(static_cast<int>(i));
    const torch::Tensor off = it == offsets.end() ? torch::Tensor() : it->second.to(ws.scalar_type());
    auto out = layers_[i]->forward(x, ws.select(1, static_cast<int64_t>(i)), noise_mode, off);
    if (info_[i].kind == LayerKind::to_rgb) {
      if (img.defined())
        img = F::interpolate(img, F::InterpolateFuncOptions()
                                      .scale_factor(std::vector<double>{2.0, 2.0})
                                      .mode(torch::kBilinear)
                                      .align_corners(false)) + out;
      else
        img = out;
    } else {
      x = out;
    }
  }
  return torch::tanh(img);
}

StyleGeneratorImpl::StyleGeneratorImpl(GeneratorConfig config) : config_(std::move(config)) {
  config_.validate();
  torch::manual_seed(config_.seed);
  mapping = register_module("mapping", MappingNetwork(config_));
  synthesis = register_module("synthesis", SynthesisNetwork(config_));
  mean_w = register_buffer("mean_w", torch::zeros({config_.latent_dim}));
}

torch::Tensor StyleGeneratorImpl::map(const torch::Tensor& z, double psi) {
  if (z.dim() != 2 || z.size(1) != config_.latent_dim)
    throw InvalidArgument("map: expected [B, " + std::to_string(config_.latent_dim) + "] input");
  auto w = mapping->forward(z.to(mean_w.scalar_type()));
  if (psi == 1.0) return w;
  return mean_w + psi * (w - mean_w);
}

torch::Tensor StyleGeneratorImpl::synthesize(const torch::Tensor& ws_in, NoiseMode noise_mode,
                                             const WeightOffsets& offsets) {
  auto ws = ws_in.to(mean_w.scalar_type());
  if (ws.size(-1) != config_.latent_dim)
    throw InvalidArgument("synthesize: latent dimension mismatch");
  if (ws.dim() == 2) ws = ws.unsqueeze(1).expand({-1, num_styles(), -1});
  return synthesis->forward(ws, noise_mode, offsets);
}

std::vector<int> StyleGeneratorImpl::layers_for(std::string_view group) const {
  std::vector<int> out;
  for (const auto& info : synthesis->layer_info()) {
    const bool coarse = info.resolution <= 8;
    const bool fine = !coarse && info.resolution == config_.resolution;
    const bool medium = !coarse && !fine;
    const bool take = group == "all" || (group == "coarse" && coarse) ||
                      (group == "medium" && medium) || (group == "fine" && fine);
    if (take) out.push_back(info.index);
  }
  if (group != "all" && group != "coarse" && group != "medium" && group != "fine")
    throw InvalidArgument("unknown layer group '" + std::string(group) + "'");
  return out;
}

// ---------------------------------------------------------------------------

DiscriminatorImpl::DiscriminatorImpl(const GeneratorConfig& c) {
  torch::manual_seed(c.seed + 7919);
  const int top = c.channels_at(c.resolution);
  from_rgb_ = register_parameter("from_rgb", torch::randn({top, 3, 1, 1}));
  from_rgb_bias_ = register_parameter("from_rgb_bias", torch::zeros({top}));
  int idx = 0;
  for (int res = c.resolution; res > 4; res /= 2, ++idx) {
    const int in = c.channels_at(res), out = c.channels_at(res / 2);
    const auto p = "block" + std::to_string(idx) + "_";
    Block b;
    b.conv1 = register_parameter(p + "conv1", torch::randn({in, in, 3, 3}));
    b.bias1 = register_parameter(p + "bias1", torch::zeros({in}));
    b.conv2 = register_parameter(p + "conv2", torch::randn({out, in, 3, 3}));
    b.bias2 = register_parameter(p + "bias2", torch::zeros({out}));
    b.skip = register_parameter(p + "skip", torch::randn({out, in, 1, 1}));
    blocks_.push_back(b);
  }
  const int c4 = c.channels_at(4);
  final_conv_ = register_parameter("final_conv", torch::randn({c4, c4 + 1, 3, 3}));
  final_conv_bias_ = register_parameter("final_conv_bias", torch::zeros({c4}));
  fc_ = register_module("fc", EqualLinear(c4 * 16, c4));
  out_ = register_module("out", EqualLinear(c4, 1));
}

namespace {

torch::Tensor eq_conv(const torch::Tensor& x, const torch::Tensor& w, const torch::Tensor& b = {}) {
  const double gain = 1.0 / std::sqrt(static_cast<double>(w.size(1) * w.size(2) * w.size(3)));
  return torch::conv2d(x, w * gain, b, 1, w.size(-1) / 2);
}

torch::Tensor minibatch_stddev(const torch::Tensor& x) {
  const auto b = x.size(0);
  int64_t g = std::min<int64_t>(4, b);
  while (b % g != 0) --g;
  auto y = x.reshape({g, -1, x.size(1), x.size(2), x.size(3)});
  y = (y - y.mean(0)).pow(2).mean(0);
  y = (y + 1e-8).sqrt().mean({1, 2, 3});  // [B / g]
  y = y.reshape({-1, 1, 1, 1}).repeat({g, 1, x.size(2), x.size(3)});
  return torch::cat({x, y}, 1);
}

}  // namespace

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& images) {
  auto x = lrelu(eq_conv(images, from_rgb_, from_rgb_bias_));
  for (auto& b : blocks_) {
    auto skip = eq_conv(F::avg_pool2d(x, F::AvgPool2dFuncOptions(2)), b.skip);
    auto h = lrelu(eq_conv(x, b.conv1, b.bias1));
    h = F::avg_pool2d(lrelu(eq_conv(h, b.conv2, b.bias2)), F::AvgPool2dFuncOptions(2));
    x = (h + skip) * (1.0 / kSqrt2);
  }
  x = minibatch_stddev(x);
  x = lrelu(eq_conv(x, final_conv_, final_conv_bias_));
  x = lrelu(fc_->forward(x.flatten(1)));
  return out_->forward(x).squeeze(1);
}

// ---------------------------------------------------------------------------

void copy_weights(const torch::nn::Module& src, torch::nn::Module& dst) {
  torch::NoGradGuard guard;
  auto sp = src.named_parameters(true);
  auto dp = dst.named_parameters(true);
  for (auto& p : dp) p.value().copy_(sp[p.key()]);
  auto sb = src.named_buffers(true);
  auto db = dst.named_buffers(true);
  for (auto& b : db) b.value().copy_(sb[b.key()]);
}

std::string fingerprint(const torch::nn::Module& module) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const torch::Tensor& t) {
    auto c = t.detach().contiguous();
    const auto* p = static_cast<const unsigned char*>(c.data_ptr());
    for (int64_t i = 0; i < c.numel() * c.element_size(); ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : module.named_parameters(true)) mix(p.value());
  for (const auto& b : module.named_buffers(true)) mix(b.value());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void estimate_mean_w(StyleGenerator& generator, int samples, std::uint64_t seed) {
  torch::NoGradGuard guard;
  auto gen = at::detail::createCPUGenerator(seed);
  const int d = generator->config().latent_dim;
  auto sum = torch::zeros({d}, torch::kFloat64);
  for (int done = 0; done < samples;) {
    const int n = std::min(1000, samples - done);
    auto z = at::normal(0.0, 1.0, {n, d}, gen).to(generator->mean_w.scalar_type());
    sum += generator->map(z).to(torch::kFloat64).sum(0);
    done += n;
  }
  generator->mean_w.copy_(sum / samples);
}

GanCheckpoint GanCheckpoint::initialize(const GeneratorConfig& config) {
  config.validate();
  GanCheckpoint ck;
  ck.config = config;
  ck.generator = StyleGenerator(config);
  ck.generator_ema = StyleGenerator(config);
  copy_weights(*ck.generator, *ck.generator_ema);
  ck.discriminator = Discriminator(config);
  estimate_mean_w(ck.generator, kMeanWSamples, config.seed ^ kMeanWSeed);
  copy_weights(*ck.generator, *ck.generator_ema);
  return ck;
}

std::string GanCheckpoint::id() const {
  return "gan-" + fingerprint(*generator_ema) + "-s" + std::to_string(step);
}

void GanCheckpoint::save(const std::filesystem::path& path) const {
  Archive ar;
  ar.meta["kind"] = "gan_checkpoint";
  ar.meta["config"] = config.to_json();
  ar.meta["step"] = step;
  ar.meta["id"] = id();
  auto hist = json::array();
  for (const auto& f : fid_history) hist.push_back({{"step", f.step}, {"fid", f.fid}});
  ar.meta["fid_history"] = hist;
  std::vector<double> mw(generator_ema->mean_w.numel());
  auto mwd = generator_ema->mean_w.to(torch::kFloat64).contiguous();
  std::memcpy(mw.data(), mwd.data_ptr<double>(), mw.size() * sizeof(double));
  ar.meta["mean_w"] = mw;
  ar.put_module("G/", *generator);
  ar.put_module("G_ema/", *generator_ema);
  ar.put_module("D/", *discriminator);
  ar.save(path);
}

GanCheckpoint GanCheckpoint::load(const std::filesystem::path& path) {
  auto ar = Archive::load(path);
  if (ar.meta.value("kind", "") != "gan_checkpoint")
    throw IoError("not a GAN checkpoint: " + path.string());
  auto ck = initialize(GeneratorConfig::from_json(ar.meta.at("config")));
  ar.load_module("G/", *ck.generator);
  ar.load_module("G_ema/", *ck.generator_ema);
  ar.load_module("D/", *ck.discriminator);
  ck.step = ar.meta.at("step").get<std::int64_t>();
  for (const auto& f : ar.meta.at("fid_history"))
    ck.fid_history.push_back({f.at("step").get<std::int64_t>(), f.at("fid").get<double>()});
  return ck;
}

// ---------------------------------------------------------------------------

LatentCode sample_z(int latent_dim, std::uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  return {LatentSpace::Z, at::normal(0.0, 1.0, {latent_dim}, gen, torch::kFloat64)};
}

LatentCode map_latent(StyleGenerator& generator, const LatentCode& z, double psi) {
  if (z.space != LatentSpace::Z) throw InvalidArgument("map_latent: expected a Z-space code");
  z.validate();
  if (!(psi >= 0.0 && psi <= 1.0)) throw InvalidArgument("map_latent: psi must be in [0, 1]");
  torch::NoGradGuard guard;
  auto w = generator->map(z.values.unsqueeze(0), psi).squeeze(0);
  return {LatentSpace::W, w.to(torch::kFloat64)};
}

LatentCode broadcast_to_wplus(const LatentCode& w, int num_styles) {
  if (w.space == LatentSpace::Wplus) return w;
  if (w.space != LatentSpace::W) throw InvalidArgument("broadcast_to_wplus: expected a W code");
  return {LatentSpace::Wplus, w.values.unsqueeze(0).repeat({num_styles, 1})};
}

torch::Tensor latents_to_batch(std::span<const LatentCode> codes, int num_styles) {
  std::vector<torch::Tensor> rows;
  for (const auto& c : codes) {
    if (c.space == LatentSpace::Z) throw InvalidArgument("expected W or Wplus codes");
    auto v = c.space == LatentSpace::W ? c.values.unsqueeze(0).expand({num_styles, -1}) : c.values;
    if (v.size(0) != num_styles) throw InvalidArgument("Wplus row count does not match style inputs");
    rows.push_back(v);
  }
  return torch::stack(rows).to(torch::kFloat32);
}

ImageTensor synthesize(StyleGenerator& generator, const LatentCode& w, NoiseMode noise_mode,
                       const WeightOffsets& offsets) {
  if (w.space == LatentSpace::Z) throw InvalidArgument("synthesize: expected a W or Wplus code");
  w.validate();
  if (w.dim() != generator->config().latent_dim)
    throw InvalidArgument("synthesize: dimension mismatch");
  if (w.space == LatentSpace::Wplus && w.rows() != generator->num_styles())
    throw InvalidArgument("synthesize: Wplus row count does not match style inputs");
  torch::NoGradGuard guard;
  auto ws = w.values.unsqueeze(0);
  return make_image(generator->synthesize(ws, noise_mode, offsets));
}

std::vector<ImageTensor> sample_grid(const GanCheckpoint& checkpoint, int n, std::uint64_t seed,
                                     double psi) {
  if (n < 1) throw InvalidArgument("sample_grid: n must be >= 1");
  torch::NoGradGuard guard;
  auto g = checkpoint.generator_ema;
  auto gen = at::detail::createCPUGenerator(seed);
  auto z = at::normal(0.0, 1.0, {n, checkpoint.config.latent_dim}, gen);
  std::vector<ImageTensor> out;
  for (int start = 0; start < n; start += 64) {
    const int m = std::min(64, n - start);
    auto imgs = g->synthesize(g->map(z.narrow(0, start, m), psi), NoiseMode::fixed);
    for (int i = 0; i < m; ++i)
      out.push_back(make_image(imgs[i], "sample_" + std::to_string(seed) + "_" + std::to_string(start + i)));
  }
  return out;
}

}  // namespace dermagan
