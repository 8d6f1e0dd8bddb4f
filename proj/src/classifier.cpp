#include "dermagan/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "dermagan/archive.hpp"
#include "dermagan/error.hpp"

namespace dermagan {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

json nan_to_null(double v) { return std::isnan(v) ? json(nullptr) : json(v); }
double null_to_nan(const json& j) { return j.is_null() ? kNaN : j.get<double>(); }

double nan_mean(const std::vector<double>& v) {
  double sum = 0;
  int n = 0;
  for (double x : v)
    if (!std::isnan(x)) {
      sum += x;
      ++n;
    }
  return n ? sum / n : kNaN;
}

}  // namespace

void ClassifierConfig::validate() const {
  if (architecture != "cnn6")
    throw InvalidArgument("classifier: unknown architecture '" + architecture + "'");
  if (n_classes < 2) throw InvalidArgument("classifier: n_classes must be >= 2");
  if (!(dropout >= 0 && dropout < 1)) throw InvalidArgument("classifier: dropout must be in [0, 1)");
  if (pretrained_init) throw InvalidArgument("classifier: no pretrained weights are available for cnn6");
  if (width < 1) throw InvalidArgument("classifier: width must be >= 1");
  if (resolution < 8) throw InvalidArgument("classifier: resolution must be >= 8");
}

json to_json(const ClassifierConfig& c) {
  return {{"architecture", c.architecture}, {"n_classes", c.n_classes},
          {"dropout", c.dropout},           {"pretrained_init", c.pretrained_init},
          {"width", c.width},               {"resolution", c.resolution}};
}

ClassifierConfig classifier_config_from_json(const json& j) {
  ClassifierConfig c;
  c.architecture = j.value("architecture", c.architecture);
  c.n_classes = j.value("n_classes", c.n_classes);
  c.dropout = j.value("dropout", c.dropout);
  c.pretrained_init = j.value("pretrained_init", c.pretrained_init);
  c.width = j.value("width", c.width);
  c.resolution = j.value("resolution", c.resolution);
  return c;
}

std::string_view to_string(Sampling s) {
  return s == Sampling::uniform ? "uniform" : "weighted_oversampling";
}

Sampling parse_sampling(std::string_view text) {
  if (text == "uniform") return Sampling::uniform;
  if (text == "weighted_oversampling" || text == "weighted") return Sampling::weighted_oversampling;
  throw InvalidArgument("unknown sampling mode '" + std::string(text) + "'");
}

void TrainSpec::validate() const {
  if (!(lr > 0)) throw InvalidArgument("train spec: lr must be > 0");
  if (weight_decay < 0) throw InvalidArgument("train spec: weight_decay must be >= 0");
  if (max_epochs < 1) throw InvalidArgument("train spec: max_epochs must be >= 1");
  if (patience < 0 || patience >= max_epochs)
    throw InvalidArgument("train spec: patience must be < max_epochs");
  if (batch_size < 1) throw InvalidArgument("train spec: batch_size must be >= 1");
  if (!(augment.cutout_fraction > 0 && augment.cutout_fraction < 1))
    throw InvalidArgument("train spec: cutout_fraction must be in (0, 1)");
}

json to_json(const TrainSpec& s) {
  return {{"lr", s.lr},
          {"weight_decay", s.weight_decay},
          {"max_epochs", s.max_epochs},
          {"patience", s.patience},
          {"batch_size", s.batch_size},
          {"sampling", std::string(to_string(s.sampling))},
          {"basic_augmentations",
           {{"hflip", s.augment.hflip},
            {"vflip", s.augment.vflip},
            {"cutout", s.augment.cutout},
            {"cutout_fraction", s.augment.cutout_fraction}}}};
}

TrainSpec train_spec_from_json(const json& j) {
  TrainSpec s;
  s.lr = j.value("lr", s.lr);
  s.weight_decay = j.value("weight_decay", s.weight_decay);
  s.max_epochs = j.value("max_epochs", s.max_epochs);
  s.patience = j.value("patience", s.patience);
  s.batch_size = j.value("batch_size", s.batch_size);
  if (j.contains("sampling")) s.sampling = parse_sampling(j.at("sampling").get<std::string>());
  if (j.contains("basic_augmentations")) {
    const auto& a = j.at("basic_augmentations");
    s.augment.hflip = a.value("hflip", s.augment.hflip);
    s.augment.vflip = a.value("vflip", s.augment.vflip);
    s.augment.cutout = a.value("cutout", s.augment.cutout);
    s.augment.cutout_fraction = a.value("cutout_fraction", s.augment.cutout_fraction);
  }
  return s;
}

// ---------------------------------------------------------------------------

BatchSampler::BatchSampler(std::vector<int> labels, int n_classes, int batch_size, Sampling mode,
                           std::uint64_t seed)
    : labels_(std::move(labels)), batch_size_(batch_size), mode_(mode), rng_(seed) {
  if (labels_.empty()) throw InvalidArgument("batch sampler: empty training pool");
  if (batch_size < 1) throw InvalidArgument("batch sampler: batch_size must be >= 1");
  std::vector<std::int64_t> counts(n_classes, 0);
  for (int l : labels_) {
    if (l < 0 || l >= n_classes) throw InvalidArgument("batch sampler: label out of range");
    ++counts[l];
  }
  if (mode_ == Sampling::weighted_oversampling) {
    for (int k = 0; k < n_classes; ++k)
      if (counts[k] == 0)
        throw InvalidArgument("class " + std::to_string(k) +
                              " has no training examples: oversampling undefined");
    std::vector<double> w(labels_.size());
    for (std::size_t i = 0; i < labels_.size(); ++i) w[i] = 1.0 / static_cast<double>(counts[labels_[i]]);
    weighted_ = std::discrete_distribution<std::size_t>(w.begin(), w.end());
  }
}

int BatchSampler::batches_per_epoch() const {
  return static_cast<int>((labels_.size() + batch_size_ - 1) / batch_size_);
}

std::vector<std::int64_t> BatchSampler::next() {
  std::vector<std::int64_t> out;
  out.reserve(batch_size_);
  if (mode_ == Sampling::weighted_oversampling) {
    for (int i = 0; i < batch_size_; ++i) out.push_back(static_cast<std::int64_t>(weighted_(rng_)));
    return out;
  }
  for (int i = 0; i < batch_size_; ++i) {
    if (cursor_ == order_.size()) {
      order_.resize(labels_.size());
      std::iota(order_.begin(), order_.end(), std::int64_t{0});
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
      if (i > 0) break;  // no batch straddles two shuffles
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

// ---------------------------------------------------------------------------

ClassifierNetImpl::ClassifierNetImpl(const ClassifierConfig& config) {
  config.validate();
  const int w = config.width;
  const int channels[6] = {w, w, 2 * w, 2 * w, 4 * w, 4 * w};
  torch::nn::Sequential seq;
  int in = 3;
  for (int b = 0; b < 6; ++b) {
    seq->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, channels[b], 3).padding(1).bias(false)));
    seq->push_back(torch::nn::BatchNorm2d(channels[b]));
    seq->push_back(torch::nn::ReLU());
    if (b % 2 == 1 && b < 5) seq->push_back(torch::nn::MaxPool2d(torch::nn::MaxPool2dOptions(2)));
    in = channels[b];
  }
  seq->push_back(torch::nn::AdaptiveAvgPool2d(torch::nn::AdaptiveAvgPool2dOptions(1)));
  seq->push_back(torch::nn::Flatten());
  features = register_module("features", seq);
  dropout = register_module("dropout", torch::nn::Dropout(config.dropout));
  head = register_module("head", torch::nn::Linear(in, config.n_classes));
}

torch::Tensor ClassifierNetImpl::forward(const torch::Tensor& x) {
  return head(dropout(features->forward(x)));
}

std::int64_t parameter_count(const torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

ClassifierModel::ClassifierModel(const ClassifierConfig& config)
    : config_(config), net_(ClassifierNet(config)) {}

torch::Tensor ClassifierModel::predict_scores(const torch::Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != 3)
    throw InvalidArgument("classifier: expected images [N, 3, R, R]");
  if (images.size(2) != config_.resolution || images.size(3) != config_.resolution)
    throw InvalidArgument("classifier: image resolution " + std::to_string(images.size(2)) +
                          " does not match model resolution " + std::to_string(config_.resolution));
  torch::NoGradGuard no_grad;
  auto net = net_;
  const bool was_training = net->is_training();
  net->eval();
  std::vector<torch::Tensor> parts;
  constexpr std::int64_t kChunk = 128;
  for (std::int64_t s = 0; s < images.size(0); s += kChunk)
    parts.push_back(torch::softmax(net->forward(images.slice(0, s, s + kChunk)), 1));
  if (was_training) net->train();
  if (parts.empty()) return torch::zeros({0, config_.n_classes});
  return torch::cat(parts, 0);
}

std::vector<int> ClassifierModel::predict(const torch::Tensor& images) const {
  const auto idx = predict_scores(images).argmax(1).to(torch::kInt64).contiguous();
  std::vector<int> out(static_cast<std::size_t>(idx.size(0)));
  const auto* p = idx.data_ptr<std::int64_t>();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<int>(p[i]);
  return out;
}

void ClassifierModel::save(const fs::path& file) const {
  Archive ar;
  ar.meta["kind"] = "classifier";
  ar.meta["config"] = to_json(config_);
  ar.put_module("net", *net_);
  ar.save(file);
}

ClassifierModel ClassifierModel::load(const fs::path& file) {
  const auto ar = Archive::load(file);
  if (ar.meta.value("kind", "") != "classifier")
    throw InvalidArgument(file.string() + " is not a classifier archive");
  ClassifierModel model(classifier_config_from_json(ar.meta.at("config")));
  ar.load_module("net", *model.net_);
  return model;
}

Predictor make_predictor(const ClassifierModel& model) {
  return [model](const std::vector<ImageTensor>& images) {
    return model.predict(stack_images(images));
  };
}

// ---------------------------------------------------------------------------

json EvalReport::to_json() const {
  json recall = json::array(), auc = json::array();
  for (double r : per_class_recall) recall.push_back(nan_to_null(r));
  for (double a : auc_roc) auc.push_back(nan_to_null(a));
  return {{"balanced_accuracy", balanced_accuracy},
          {"per_class_recall", recall},
          {"auc_roc", auc},
          {"average_auc", nan_to_null(average_auc)},
          {"confusion", confusion},
          {"n_test", n_test},
          {"class_defined", class_defined},
          {"has_undefined", has_undefined}};
}

EvalReport EvalReport::from_json(const json& j) {
  EvalReport r;
  r.balanced_accuracy = j.at("balanced_accuracy").get<double>();
  for (const auto& v : j.at("per_class_recall")) r.per_class_recall.push_back(null_to_nan(v));
  for (const auto& v : j.at("auc_roc")) r.auc_roc.push_back(null_to_nan(v));
  r.average_auc = null_to_nan(j.at("average_auc"));
  r.confusion = j.at("confusion").get<std::vector<std::vector<std::int64_t>>>();
  r.n_test = j.at("n_test").get<std::int64_t>();
  r.class_defined = j.at("class_defined").get<std::vector<bool>>();
  r.has_undefined = j.at("has_undefined").get<bool>();
  return r;
}

std::optional<double> roc_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw InvalidArgument("roc_auc: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double n_pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (positive[i]) {
      n_pos += 1;
      rank_sum += rank[i];
    }
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  return (rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg);
}

EvalReport evaluate_scores(const std::vector<int>& labels, const Eigen::MatrixXd& scores) {
  const auto n = static_cast<Eigen::Index>(labels.size());
  if (n == 0) throw InvalidArgument("evaluate: empty split");
  if (scores.rows() != n) throw InvalidArgument("evaluate: scores/labels size mismatch");
  const int k = static_cast<int>(scores.cols());
  if (k < 2) throw InvalidArgument("evaluate: need at least two classes");
  if (!scores.allFinite()) throw InvalidArgument("evaluate: non-finite scores");

  EvalReport r;
  r.n_test = n;
  r.confusion.assign(k, std::vector<std::int64_t>(k, 0));
  for (Eigen::Index i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k) throw InvalidArgument("evaluate: label out of range");
    Eigen::Index pred;
    scores.row(i).maxCoeff(&pred);
    ++r.confusion[labels[i]][pred];
  }
  r.per_class_recall.assign(k, kNaN);
  r.auc_roc.assign(k, kNaN);
  r.class_defined.assign(k, false);
  for (int c = 0; c < k; ++c) {
    const auto total = std::accumulate(r.confusion[c].begin(), r.confusion[c].end(), std::int64_t{0});
    if (total == 0) {
      r.has_undefined = true;
      continue;
    }
    r.class_defined[c] = true;
    r.per_class_recall[c] = static_cast<double>(r.confusion[c][c]) / static_cast<double>(total);
    std::vector<double> s(n);
    std::vector<bool> pos(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      s[i] = scores(i, c);
      pos[i] = labels[i] == c;
    }
    if (auto a = roc_auc(s, pos)) r.auc_roc[c] = *a;
  }
  r.balanced_accuracy = nan_mean(r.per_class_recall);
  r.average_auc = nan_mean(r.auc_roc);
  return r;
}

EvalReport evaluate(const ClassifierModel& model, const LoadedSplit& data) {
  if (data.size() == 0) throw InvalidArgument("evaluate: empty split");
  const auto probs = model.predict_scores(data.images).to(torch::kFloat64).contiguous();
  Eigen::MatrixXd scores(probs.size(0), probs.size(1));
  const auto* p = probs.data_ptr<double>();
  for (Eigen::Index i = 0; i < scores.rows(); ++i)
    for (Eigen::Index c = 0; c < scores.cols(); ++c) scores(i, c) = p[i * scores.cols() + c];
  const auto lbl = data.labels.to(torch::kInt64).contiguous();
  std::vector<int> labels(static_cast<std::size_t>(lbl.size(0)));
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(lbl.data_ptr<std::int64_t>()[i]);
  return evaluate_scores(labels, scores);
}

EvalReport evaluate(const ClassifierModel& model, const DatasetManifest& manifest, Split split) {
  if (manifest.num_classes() != model.config().n_classes)
    throw InvalidArgument("evaluate: manifest class count does not match the model");
  return evaluate(model, load_split(manifest, split));
}

// ---------------------------------------------------------------------------

json ExperimentRun::to_json() const {
  json epochs_json = json::array();
  for (const auto& e : epochs)
    epochs_json.push_back({{"epoch", e.epoch},
                           {"train_loss", e.train_loss},
                           {"train_accuracy", e.train_accuracy},
                           {"val_balanced_accuracy", e.val_balanced_accuracy}});
  return {{"dataset", {{"name", dataset_name},
                       {"n_train", n_train},
                       {"n_val", n_val},
                       {"n_test", n_test},
                       {"train_class_counts", train_class_counts}}},
          {"config", dermagan::to_json(config)},
          {"spec", dermagan::to_json(spec)},
          {"seed", seed},
          {"epochs", epochs_json},
          {"best_epoch", best_epoch},
          {"best_val_balanced_accuracy", best_val_balanced_accuracy},
          {"stopped_early", stopped_early},
          {"test_report", test_report ? test_report->to_json() : json(nullptr)}};
}

torch::Tensor apply_basic_augmentations(const torch::Tensor& batch, const BasicAugmentations& aug,
                                        std::mt19937_64& rng) {
  auto out = batch.clone();
  const auto n = out.size(0);
  const auto h = out.size(2), w = out.size(3);
  std::bernoulli_distribution coin(0.5);
  const auto side = std::max<std::int64_t>(1, static_cast<std::int64_t>(aug.cutout_fraction * static_cast<double>(w)));
  for (std::int64_t i = 0; i < n; ++i) {
    auto img = out[i];
    if (aug.hflip && coin(rng)) img.copy_(img.flip({2}));
    if (aug.vflip && coin(rng)) img.copy_(img.flip({1}));
    if (aug.cutout) {
      std::uniform_int_distribution<std::int64_t> ry(0, h - 1), rx(0, w - 1);
      const auto cy = ry(rng), cx = rx(rng);
      const auto y0 = std::max<std::int64_t>(0, cy - side / 2), x0 = std::max<std::int64_t>(0, cx - side / 2);
      const auto y1 = std::min(h, y0 + side), x1 = std::min(w, x0 + side);
      img.slice(1, y0, y1).slice(2, x0, x1).zero_();
    }
  }
  return out;
}

namespace {

std::vector<int> labels_of(const LoadedSplit& s) {
  const auto l = s.labels.to(torch::kInt64).contiguous();
  std::vector<int> out(static_cast<std::size_t>(l.size(0)));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<int>(l.data_ptr<std::int64_t>()[i]);
  return out;
}

std::vector<torch::Tensor> snapshot(const torch::nn::Module& m) {
  std::vector<torch::Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.detach().clone());
  for (const auto& b : m.buffers()) out.push_back(b.detach().clone());
  return out;
}

void restore(torch::nn::Module& m, const std::vector<torch::Tensor>& saved) {
  torch::NoGradGuard no_grad;
  std::size_t i = 0;
  for (auto& p : m.parameters()) p.copy_(saved[i++]);
  for (auto& b : m.buffers()) b.copy_(saved[i++]);
}

}  // namespace

TrainedClassifier train_classifier(const DatasetManifest& manifest, const ClassifierConfig& config,
                                   const TrainSpec& spec, std::uint64_t seed,
                                   const EpochCallback& on_epoch) {
  config.validate();
  spec.validate();
  if (manifest.num_classes() != config.n_classes)
    throw InvalidArgument("train_classifier: n_classes does not match the manifest (" +
                          std::to_string(manifest.num_classes()) + " classes)");
  if (manifest.resolution != config.resolution)
    throw InvalidArgument("train_classifier: config resolution does not match the manifest");
  if (manifest.count(Split::train) == 0) throw InvalidArgument("train_classifier: empty train split");
  if (manifest.count(Split::val) == 0) throw InvalidArgument("train_classifier: empty val split");

  const auto train = load_split(manifest, Split::train);
  const auto val = load_split(manifest, Split::val);
  const auto train_labels = labels_of(train);

  torch::manual_seed(seed);
  TrainedClassifier out{ClassifierModel(config), {}};
  auto& run = out.run;
  run.dataset_name = manifest.root.filename().string();
  run.train_class_counts.assign(config.n_classes, 0);
  for (int l : train_labels) ++run.train_class_counts.at(l);
  run.n_train = train.size();
  run.n_val = val.size();
  run.n_test = static_cast<std::int64_t>(manifest.count(Split::test));
  run.config = config;
  run.spec = spec;
  run.seed = seed;

  auto net = out.model.net();
  BatchSampler sampler(train_labels, config.n_classes, spec.batch_size, spec.sampling, seed ^ 0xba7c4ULL);
  std::mt19937_64 aug_rng(seed ^ 0xa11ULL);
  torch::optim::Adam opt(net->parameters(),
                         torch::optim::AdamOptions(spec.lr).weight_decay(spec.weight_decay));

  std::vector<torch::Tensor> best_state = snapshot(*net);
  run.best_val_balanced_accuracy = -1;
  for (int epoch = 1; epoch <= spec.max_epochs; ++epoch) {
    net->train();
    double loss_sum = 0;
    std::int64_t correct = 0, seen = 0;
    for (int b = 0; b < sampler.batches_per_epoch(); ++b) {
      const auto idx = torch::tensor(sampler.next(), torch::kInt64);
      auto x = apply_basic_augmentations(train.images.index_select(0, idx), spec.augment, aug_rng);
      const auto y = train.labels.index_select(0, idx).to(torch::kInt64);
      const auto logits = net->forward(x);
      const auto loss = torch::nn::functional::cross_entropy(logits, y);
      const double lv = loss.item<double>();
      if (!std::isfinite(lv))
        throw DivergenceError("classifier training diverged at epoch " + std::to_string(epoch));
      opt.zero_grad();
      loss.backward();
      opt.step();
      loss_sum += lv * static_cast<double>(y.size(0));
      correct += logits.argmax(1).eq(y).sum().item<std::int64_t>();
      seen += y.size(0);
    }
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(seen);
    log.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    log.val_balanced_accuracy = evaluate(out.model, val).balanced_accuracy;
    run.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
    if (log.val_balanced_accuracy > run.best_val_balanced_accuracy) {
      run.best_val_balanced_accuracy = log.val_balanced_accuracy;
      run.best_epoch = epoch;
      best_state = snapshot(*net);
    } else if (epoch - run.best_epoch >= spec.patience && epoch < spec.max_epochs) {
      run.stopped_early = true;
      break;
    }
  }
  restore(*net, best_state);
  net->eval();
  if (run.n_test > 0) run.test_report = evaluate(out.model, manifest, Split::test);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

void fill_row(AblationRow& row, int n_classes) {
  std::vector<double> acc;
  for (const auto& r : row.reports) acc.push_back(r.balanced_accuracy);
  row.mean_balanced_accuracy = std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size());
  double ss = 0;
  for (double a : acc) ss += (a - row.mean_balanced_accuracy) * (a - row.mean_balanced_accuracy);
  row.std_balanced_accuracy = acc.size() > 1 ? std::sqrt(ss / static_cast<double>(acc.size() - 1)) : 0.0;
  row.mean_auc.assign(n_classes, kNaN);
  for (int c = 0; c < n_classes; ++c) {
    std::vector<double> v;
    for (const auto& r : row.reports) v.push_back(r.auc_roc.at(c));
    row.mean_auc[c] = nan_mean(v);
  }
  std::vector<double> avg;
  for (const auto& r : row.reports) avg.push_back(r.average_auc);
  row.mean_average_auc = nan_mean(avg);
}

std::string fmt(double v) {
  if (std::isnan(v)) return "NA";
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << v;
  return s.str();
}

}  // namespace

std::string AblationTable::accuracy_tsv() const {
  std::ostringstream s;
  s << "dataset\tn_seeds\tbalanced_accuracy_mean\tbalanced_accuracy_std\tdelta_vs_baseline\n";
  for (const auto& r : rows)
    s << r.dataset << '\t' << r.reports.size() << '\t' << fmt(r.mean_balanced_accuracy) << '\t'
      << fmt(r.std_balanced_accuracy) << '\t' << (r.delta_vs_baseline >= 0 ? "+" : "")
      << fmt(r.delta_vs_baseline) << '\n';
  return s.str();
}

std::string AblationTable::auc_tsv() const {
  std::ostringstream s;
  s << "dataset";
  for (const auto& c : class_names) s << '\t' << c;
  s << "\taverage\n";
  for (const auto& r : rows) {
    s << r.dataset;
    for (double a : r.mean_auc) s << '\t' << fmt(a);
    s << '\t' << fmt(r.mean_average_auc) << '\n';
  }
  return s.str();
}

json AblationTable::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows) {
    json reports = json::array();
    for (const auto& rep : r.reports) reports.push_back(rep.to_json());
    json auc = json::array();
    for (double a : r.mean_auc) auc.push_back(nan_to_null(a));
    rows_json.push_back({{"dataset", r.dataset},
                         {"reports", reports},
                         {"mean_balanced_accuracy", r.mean_balanced_accuracy},
                         {"std_balanced_accuracy", r.std_balanced_accuracy},
                         {"delta_vs_baseline", r.delta_vs_baseline},
                         {"mean_auc", auc},
                         {"mean_average_auc", nan_to_null(r.mean_average_auc)}});
  }
  return {{"class_names", class_names}, {"seeds", seeds}, {"rows", rows_json}};
}

AblationTable run_ablation(const DatasetManifest& base, const std::vector<NamedManifest>& augmented,
                           const ClassifierConfig& config, const TrainSpec& spec,
                           const std::vector<std::uint64_t>& seeds,
                           const std::function<void(const std::string&)>& log) {
  if (augmented.empty()) throw InvalidArgument("run_ablation: need at least one augmented manifest");
  if (seeds.empty()) throw InvalidArgument("run_ablation: need at least one seed");
  AblationTable table;
  table.class_names = base.class_names;
  table.seeds = seeds;
  std::vector<NamedManifest> all{{"baseline", base}};
  all.insert(all.end(), augmented.begin(), augmented.end());
  for (const auto& m : all) {
    if (m.manifest.class_names != base.class_names)
      throw InvalidArgument("run_ablation: class names of '" + m.name + "' differ from the baseline");
    AblationRow row;
    row.dataset = m.name;
    for (auto seed : seeds) {
      auto trained = train_classifier(m.manifest, config, spec, seed);
      if (!trained.run.test_report) throw InvalidArgument("run_ablation: '" + m.name + "' has no test split");
      row.reports.push_back(*trained.run.test_report);
      if (log)
        log(m.name + " seed " + std::to_string(seed) + ": balanced accuracy " +
            fmt(trained.run.test_report->balanced_accuracy) + " (best epoch " +
            std::to_string(trained.run.best_epoch) + ")");
    }
    fill_row(row, base.num_classes());
    table.rows.push_back(std::move(row));
  }
  for (auto& r : table.rows) r.delta_vs_baseline = r.mean_balanced_accuracy - table.rows[0].mean_balanced_accuracy;
  return table;
}

}  // namespace dermagan
