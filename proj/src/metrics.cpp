#include "dermagan/metrics.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

#include "dermagan/error.hpp"

namespace dermagan {

namespace F = torch::nn::functional;

FeatureEmbedder::FeatureEmbedder(EmbedderConfig config) : config_(std::move(config)) {
  if (config_.channels.empty()) throw InvalidArgument("embedder: at least one tap required");
  auto gen = at::detail::createCPUGenerator(config_.seed);
  int in = 3;
  for (int out : config_.channels) {
    auto k = at::normal(0.0, 1.0, {out, in, 3, 3}, gen, torch::kFloat64);
    k = 0.5 * (k + k.flip({3}));
    k = k * std::sqrt(2.0 / (in * 9.0)) / k.std();
    kernels_.push_back(k);
    weights_.push_back(torch::ones({out}, torch::kFloat64));
    in = out;
  }
}

void FeatureEmbedder::set_channel_weights(std::vector<torch::Tensor> weights) {
  if (weights.size() != kernels_.size()) throw InvalidArgument("embedder: one weight vector per tap");
  for (std::size_t i = 0; i < weights.size(); ++i)
    if (weights[i].numel() != kernels_[i].size(0))
      throw InvalidArgument("embedder: channel weight size mismatch");
  weights_ = std::move(weights);
}

void FeatureEmbedder::check_resolution(std::int64_t r) const {
  const std::int64_t factor = std::int64_t{1} << (kernels_.size() - 1);
  if (r < 2 * factor || r % factor != 0)
    throw InvalidArgument("embedder: resolution " + std::to_string(r) +
                          " incompatible with backbone");
}

std::vector<torch::Tensor> FeatureEmbedder::taps(const torch::Tensor& batch) const {
  if (batch.dim() != 4 || batch.size(1) != 3 || batch.size(2) != batch.size(3))
    throw InvalidArgument("embedder: expected [N, 3, R, R] input");
  check_resolution(batch.size(2));
  std::vector<torch::Tensor> out;
  auto x = batch;
  for (std::size_t i = 0; i < kernels_.size(); ++i) {
    if (i > 0) x = F::avg_pool2d(x, F::AvgPool2dFuncOptions(2));
    x = torch::relu(torch::conv2d(x, kernels_[i].to(x.scalar_type()), {}, 1, 1));
    out.push_back(x);
  }
  return out;
}

torch::Tensor FeatureEmbedder::embed_batch(const torch::Tensor& batch) const {
  std::vector<torch::Tensor> pooled;
  for (const auto& t : taps(batch)) pooled.push_back(t.mean({2, 3}));
  return torch::cat(pooled, 1);
}

int FeatureEmbedder::embedding_dim() const {
  int d = 0;
  for (int c : config_.channels) d += c;
  return d;
}

Eigen::MatrixXd embed(std::span<const ImageTensor> images, const FeatureEmbedder& embedder) {
  if (images.empty()) throw InvalidArgument("embed: empty image list");
  torch::NoGradGuard guard;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), embedder.embedding_dim());
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const auto n = std::min(kChunk, images.size() - start);
    auto feats = embedder.embed_batch(stack_images(images.subspan(start, n)).to(torch::kFloat64))
                     .contiguous();
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
        feats.data_ptr<double>(), feats.size(0), feats.size(1));
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) = m;
  }
  return out;
}

GaussianFit fit_gaussian(const Eigen::MatrixXd& features) {
  if (features.rows() < 2) throw InvalidArgument("fit_gaussian: need at least 2 samples");
  GaussianFit g;
  g.n_samples = features.rows();
  g.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - g.mean.transpose();
  g.covariance = (centered.transpose() * centered) / static_cast<double>(features.rows() - 1);
  g.covariance = 0.5 * (g.covariance + g.covariance.transpose());
  return g;
}

namespace {

Eigen::VectorXd clipped_eigenvalues(const Eigen::VectorXd& ev) {
  const double scale = std::max(1.0, ev.size() ? ev.maxCoeff() : 0.0);
  Eigen::VectorXd out = ev;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (!std::isfinite(ev(i)) || ev(i) < -1e-6 * scale)
      throw Error("matrix square root failed: eigenvalue " + std::to_string(ev(i)));
    out(i) = std::max(0.0, ev(i));
  }
  return out;
}

}  // namespace

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw Error("matrix square root failed: eigensolver");
  const Eigen::VectorXd root = clipped_eigenvalues(es.eigenvalues()).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

double frechet_distance(const GaussianFit& a, const GaussianFit& b) {
  if (a.mean.size() != b.mean.size() || a.covariance.rows() != b.covariance.rows())
    throw InvalidArgument("frechet_distance: dimension mismatch");
  const Eigen::MatrixXd root_a = psd_sqrt(a.covariance);
  const Eigen::MatrixXd inner = root_a * b.covariance * root_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()),
                                                    Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw Error("matrix square root failed: eigensolver");
  const double tr_sqrt = clipped_eigenvalues(es.eigenvalues()).cwiseSqrt().sum();
  const double mean_term = (a.mean - b.mean).squaredNorm();
  return mean_term + a.covariance.trace() + b.covariance.trace() - 2.0 * tr_sqrt;
}

double fid(std::span<const ImageTensor> real, std::span<const ImageTensor> fake,
           const FeatureEmbedder& embedder) {
  if (real.size() < 2 || fake.size() < 2) throw InvalidArgument("fid: need at least 2 images per set");
  return frechet_distance(fit_gaussian(embed(real, embedder)), fit_gaussian(embed(fake, embedder)));
}

namespace {

torch::Tensor unit_normalize(const torch::Tensor& f) {
  return f / (f.pow(2).sum(1, true).sqrt() + 1e-10);
}

std::vector<torch::Tensor> lpips_layers(const torch::Tensor& a, const torch::Tensor& b,
                                        const FeatureEmbedder& embedder) {
  if (a.sizes() != b.sizes()) throw InvalidArgument("lpips: resolution mismatch");
  const auto fa = embedder.taps(a);
  const auto fb = embedder.taps(b);
  std::vector<torch::Tensor> layers;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    auto d = (unit_normalize(fa[i]) - unit_normalize(fb[i])).pow(2);
    auto w = embedder.channel_weights()[i].to(d.scalar_type()).view({1, -1, 1, 1});
    layers.push_back((d * w).sum(1).mean({1, 2}));
  }
  return layers;
}

}  // namespace

LpipsScore lpips(const ImageTensor& a, const ImageTensor& b, const FeatureEmbedder& embedder) {
  if (a.pixels.sizes() != b.pixels.sizes()) throw InvalidArgument("lpips: resolution mismatch");
  torch::NoGradGuard guard;
  const auto layers = lpips_layers(a.pixels.unsqueeze(0).to(torch::kFloat64),
                                   b.pixels.unsqueeze(0).to(torch::kFloat64), embedder);
  LpipsScore s;
  for (const auto& l : layers) {
    s.per_layer.push_back(l.item<double>());
    s.value += s.per_layer.back();
  }
  return s;
}

torch::Tensor lpips_batch(const torch::Tensor& a, const torch::Tensor& b,
                          const FeatureEmbedder& embedder) {
  auto layers = lpips_layers(a, b, embedder);
  auto total = layers.front();
  for (std::size_t i = 1; i < layers.size(); ++i) total = total + layers[i];
  return total;
}

}  // namespace dermagan
