#pragma once

// Lesion classifier: a small named CNN, class-balanced batch sampling, early
// stopping on validation balanced accuracy, and the evaluation metric suite.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>
#include <torch/torch.h>

#include "dermagan/augmentation.hpp"
#include "dermagan/dataset.hpp"

namespace dermagan {

struct ClassifierConfig {
  std::string architecture = "cnn6";
  int n_classes = 2;
  double dropout = 0.1;
  bool pretrained_init = false;
  int width = 42;  // first-block channels; 42 gives ~490k parameters
  int resolution = 64;

  void validate() const;
};

nlohmann::json to_json(const ClassifierConfig& c);
ClassifierConfig classifier_config_from_json(const nlohmann::json& j);

enum class Sampling { weighted_oversampling, uniform };

std::string_view to_string(Sampling s);
Sampling parse_sampling(std::string_view text);

struct BasicAugmentations {
  bool hflip = true;
  bool vflip = true;
  bool cutout = false;
  double cutout_fraction = 0.25;  // side of the erased square, fraction of width
};

struct TrainSpec {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  int max_epochs = 100;
  int patience = 25;
  int batch_size = 32;
  Sampling sampling = Sampling::weighted_oversampling;
  BasicAugmentations augment;

  void validate() const;
};

nlohmann::json to_json(const TrainSpec& s);
TrainSpec train_spec_from_json(const nlohmann::json& j);

/// Draws index batches from a labelled pool. Weighted oversampling picks
/// each example with probability proportional to 1 / count(label), so
/// batches are class-balanced in expectation; uniform walks a fresh shuffle.
class BatchSampler {
 public:
  BatchSampler(std::vector<int> labels, int n_classes, int batch_size, Sampling mode,
               std::uint64_t seed);

  std::vector<std::int64_t> next();
  [[nodiscard]] int batches_per_epoch() const;

 private:
  std::vector<int> labels_;
  int batch_size_;
  Sampling mode_;
  std::mt19937_64 rng_;
  std::discrete_distribution<std::size_t> weighted_;
  std::vector<std::int64_t> order_;
  std::size_t cursor_ = 0;
};

class ClassifierNetImpl : public torch::nn::Module {
 public:
  explicit ClassifierNetImpl(const ClassifierConfig& config);
  torch::Tensor forward(const torch::Tensor& x);  // logits [B, K]

  torch::nn::Sequential features{nullptr};
  torch::nn::Dropout dropout{nullptr};
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(ClassifierNet);

std::int64_t parameter_count(const torch::nn::Module& module);

class ClassifierModel {
 public:
  explicit ClassifierModel(const ClassifierConfig& config);

  /// Softmax class probabilities [N, K] for images [N, 3, R, R].
  torch::Tensor predict_scores(const torch::Tensor& images) const;
  std::vector<int> predict(const torch::Tensor& images) const;

  [[nodiscard]] const ClassifierConfig& config() const { return config_; }
  [[nodiscard]] ClassifierNet net() const { return net_; }

  void save(const std::filesystem::path& file) const;
  static ClassifierModel load(const std::filesystem::path& file);

 private:
  ClassifierConfig config_;
  ClassifierNet net_{nullptr};
};

Predictor make_predictor(const ClassifierModel& model);

struct EvalReport {
  double balanced_accuracy = 0;
  std::vector<double> per_class_recall;  // NaN where undefined
  std::vector<double> auc_roc;           // NaN where undefined
  double average_auc = 0;
  std::vector<std::vector<std::int64_t>> confusion;  // [true][predicted]
  std::int64_t n_test = 0;
  std::vector<bool> class_defined;  // false when the class is absent from the split
  bool has_undefined = false;

  [[nodiscard]] nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

/// One-vs-rest ROC AUC by the Mann-Whitney statistic with mid-ranks for ties.
/// Returns nullopt when either side is empty.
std::optional<double> roc_auc(const std::vector<double>& scores, const std::vector<bool>& positive);

/// Builds a report from true labels and per-class scores [N, K]; the
/// prediction is the arg-max score.
EvalReport evaluate_scores(const std::vector<int>& labels, const Eigen::MatrixXd& scores);

EvalReport evaluate(const ClassifierModel& model, const DatasetManifest& manifest,
                    Split split = Split::test);
EvalReport evaluate(const ClassifierModel& model, const LoadedSplit& data);

struct EpochLog {
  int epoch = 0;  // 1-based
  double train_loss = 0;
  double train_accuracy = 0;
  double val_balanced_accuracy = 0;
};

struct ExperimentRun {
  std::string dataset_name;
  std::vector<std::int64_t> train_class_counts;
  std::int64_t n_train = 0;
  std::int64_t n_val = 0;
  std::int64_t n_test = 0;
  ClassifierConfig config;
  TrainSpec spec;
  std::uint64_t seed = 0;
  std::vector<EpochLog> epochs;
  int best_epoch = 0;
  double best_val_balanced_accuracy = 0;
  bool stopped_early = false;
  std::optional<EvalReport> test_report;

  [[nodiscard]] nlohmann::json to_json() const;
};

struct TrainedClassifier {
  ClassifierModel model;
  ExperimentRun run;
};

using EpochCallback = std::function<void(const EpochLog&)>;

TrainedClassifier train_classifier(const DatasetManifest& manifest, const ClassifierConfig& config,
                                   const TrainSpec& spec, std::uint64_t seed,
                                   const EpochCallback& on_epoch = {});

/// Random hflip / vflip / cutout applied per sample.
torch::Tensor apply_basic_augmentations(const torch::Tensor& batch, const BasicAugmentations& aug,
                                        std::mt19937_64& rng);

struct AblationRow {
  std::string dataset;
  std::vector<EvalReport> reports;  // one per seed
  double mean_balanced_accuracy = 0;
  double std_balanced_accuracy = 0;  // sample standard deviation over seeds
  double delta_vs_baseline = 0;
  std::vector<double> mean_auc;  // per class, NaN where undefined in every seed
  double mean_average_auc = 0;
};

struct AblationTable {
  std::vector<std::string> class_names;
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;  // rows[0] is the baseline

  /// Dataset, mean/std balanced accuracy and delta per row.
  [[nodiscard]] std::string accuracy_tsv() const;
  /// Dataset, one AUC column per class and the average.
  [[nodiscard]] std::string auc_tsv() const;
  [[nodiscard]] nlohmann::json to_json() const;
};

struct NamedManifest {
  std::string name;
  DatasetManifest manifest;
};

AblationTable run_ablation(const DatasetManifest& base, const std::vector<NamedManifest>& augmented,
                           const ClassifierConfig& config, const TrainSpec& spec,
                           const std::vector<std::uint64_t>& seeds,
                           const std::function<void(const std::string&)>& log = {});

}  // namespace dermagan
