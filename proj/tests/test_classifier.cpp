#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dermagan/classifier.hpp"
#include "dermagan/error.hpp"
#include "support.hpp"

using namespace dermagan;
using namespace dermagan::testing;

namespace {

Eigen::MatrixXd one_hot(const std::vector<int>& predicted, int k) {
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(predicted.size()), k);
  for (std::size_t i = 0; i < predicted.size(); ++i) s(static_cast<Eigen::Index>(i), predicted[i]) = 1;
  return s;
}

double mean_defined_recall(const EvalReport& r) {
  double sum = 0;
  int n = 0;
  for (std::size_t k = 0; k < r.per_class_recall.size(); ++k)
    if (r.class_defined[k]) {
      sum += r.per_class_recall[k];
      ++n;
    }
  return sum / n;
}

void check_report_invariants(const EvalReport& r, const std::vector<int>& labels) {
  EXPECT_DOUBLE_EQ(r.balanced_accuracy, mean_defined_recall(r));
  std::int64_t total = 0;
  for (std::size_t t = 0; t < r.confusion.size(); ++t) {
    std::int64_t row = 0;
    for (auto c : r.confusion[t]) row += c;
    EXPECT_EQ(row, std::count(labels.begin(), labels.end(), static_cast<int>(t)));
    total += row;
  }
  EXPECT_EQ(total, r.n_test);
  EXPECT_EQ(r.n_test, static_cast<std::int64_t>(labels.size()));
  for (std::size_t k = 0; k < r.auc_roc.size(); ++k)
    if (r.class_defined[k]) {
      EXPECT_GE(r.auc_roc[k], 0.0);
      EXPECT_LE(r.auc_roc[k], 1.0);
    }
}

ClassifierConfig small_classifier(int resolution = 32) {
  ClassifierConfig c;
  c.width = 8;
  c.resolution = resolution;
  return c;
}

TrainSpec quick_spec(int epochs, int patience) {
  TrainSpec s;
  s.max_epochs = epochs;
  s.patience = patience;
  s.batch_size = 8;
  return s;
}

DatasetManifest separable_toy(const TempDir& dir, int n_per_class = 20) {
  return make_toy_dataset({.n_per_class = n_per_class,
                           .classes = parse_class_spec("light:skin=0-0.1,pigment=0-0.1;"
                                                       "dark:skin=0.9-1,pigment=0.9-1"),
                           .seed = 1,
                           .resolution = 32},
                          dir / "sep");
}

}  // namespace

TEST(Metrics, PerfectPredictions) {
  std::vector<int> labels{0, 1, 2, 2, 1, 0, 0};
  auto r = evaluate_scores(labels, one_hot(labels, 3));
  EXPECT_EQ(r.balanced_accuracy, 1.0);
  EXPECT_EQ(r.average_auc, 1.0);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t p = 0; p < 3; ++p)
      if (t != p) {
        EXPECT_EQ(r.confusion[t][p], 0);
      }
  EXPECT_FALSE(r.has_undefined);
  check_report_invariants(r, labels);
}

TEST(Metrics, RandomPredictionsGiveChance) {
  std::mt19937_64 rng(7);
  std::vector<int> labels, predicted;
  for (int i = 0; i < 1000; ++i) {
    labels.push_back(i % 2);
    predicted.push_back(static_cast<int>(rng() & 1U));
  }
  auto r = evaluate_scores(labels, one_hot(predicted, 2));
  EXPECT_NEAR(r.balanced_accuracy, 0.5, 0.05);
  check_report_invariants(r, labels);
}

TEST(Metrics, BalancedAccuracyIdentityOnRandomReports) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 50; ++trial) {
    const int k = 2 + trial % 6;
    const int n = 20 + trial * 7;
    std::vector<int> labels;
    Eigen::MatrixXd scores(n, k);
    for (int i = 0; i < n; ++i) {
      labels.push_back(static_cast<int>(rng() % k));
      for (int c = 0; c < k; ++c) scores(i, c) = normal(rng) + (c == labels.back() ? 0.7 : 0.0);
    }
    auto r = evaluate_scores(labels, scores);
    check_report_invariants(r, labels);
  }
}

TEST(Metrics, RocAucHandExamples) {
  EXPECT_DOUBLE_EQ(*roc_auc({0.1, 0.4, 0.35, 0.8}, {false, false, true, true}), 0.75);
  EXPECT_DOUBLE_EQ(*roc_auc({0.5, 0.5}, {true, false}), 0.5);
  EXPECT_DOUBLE_EQ(*roc_auc({0.9, 0.1}, {true, false}), 1.0);
  EXPECT_DOUBLE_EQ(*roc_auc({0.1, 0.9}, {true, false}), 0.0);
  EXPECT_FALSE(roc_auc({0.1, 0.2}, {true, true}).has_value());
}

TEST(Metrics, AucInvariantUnderMonotoneTransform) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 1);
  // Random strictly increasing piecewise-linear map on [0, 1].
  std::vector<double> knots_x{0}, knots_y{0};
  for (int i = 1; i <= 10; ++i) {
    knots_x.push_back(i / 10.0);
    knots_y.push_back(knots_y.back() + 0.01 + u(rng));
  }
  auto f = [&](double x) {
    auto it = std::upper_bound(knots_x.begin(), knots_x.end(), x);
    const auto j = std::min<std::size_t>(static_cast<std::size_t>(it - knots_x.begin()), 10) - 1;
    const double t = (x - knots_x[j]) / (knots_x[j + 1] - knots_x[j]);
    return std::exp(knots_y[j] + t * (knots_y[j + 1] - knots_y[j]));
  };
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> scores, mapped;
    std::vector<bool> positive;
    for (int i = 0; i < 200; ++i) {
      positive.push_back(u(rng) < 0.3);
      double s = std::round((u(rng) * 0.6 + (positive.back() ? 0.3 : 0.0)) * 50) / 50;  // with ties
      scores.push_back(s);
      mapped.push_back(f(s));
    }
    EXPECT_DOUBLE_EQ(*roc_auc(scores, positive), *roc_auc(mapped, positive));
  }
}

TEST(Metrics, AbsentClassIsUndefinedAndExcluded) {
  std::vector<int> labels{0, 0, 1, 1};
  Eigen::MatrixXd scores(4, 3);
  scores << 0.9, 0.05, 0.05, 0.2, 0.7, 0.1, 0.1, 0.8, 0.1, 0.1, 0.1, 0.8;
  auto r = evaluate_scores(labels, scores);
  EXPECT_TRUE(r.has_undefined);
  EXPECT_FALSE(r.class_defined[2]);
  EXPECT_TRUE(std::isnan(r.per_class_recall[2]));
  EXPECT_TRUE(std::isnan(r.auc_roc[2]));
  EXPECT_DOUBLE_EQ(r.per_class_recall[0], 0.5);
  EXPECT_DOUBLE_EQ(r.per_class_recall[1], 0.5);
  EXPECT_DOUBLE_EQ(r.balanced_accuracy, 0.5);
  EXPECT_TRUE(std::isfinite(r.average_auc));

  auto back = EvalReport::from_json(r.to_json());
  EXPECT_TRUE(std::isnan(back.per_class_recall[2]));
  EXPECT_EQ(back.confusion, r.confusion);
  EXPECT_EQ(back.balanced_accuracy, r.balanced_accuracy);
  EXPECT_EQ(back.class_defined, r.class_defined);
}

TEST(Sampler, WeightedOversamplingBalancesBatches) {
  std::vector<int> labels(100, 0);
  for (int i = 0; i < 10; ++i) labels[i * 10] = 1;
  BatchSampler sampler(labels, 2, 32, Sampling::weighted_oversampling, 5);
  std::int64_t minority = 0, total = 0;
  for (int b = 0; b < 100; ++b) {
    for (auto i : sampler.next()) {
      minority += labels[static_cast<std::size_t>(i)] == 1;
      ++total;
    }
  }
  const double frac = static_cast<double>(minority) / static_cast<double>(total);
  EXPECT_GE(frac, 0.45);
  EXPECT_LE(frac, 0.55);
  EXPECT_EQ(sampler.batches_per_epoch(), 4);
}

TEST(Sampler, UniformWalksEachExampleOncePerEpoch) {
  std::vector<int> labels{0, 1, 0, 1, 0, 1, 0, 1};
  BatchSampler sampler(labels, 2, 3, Sampling::uniform, 1);
  EXPECT_EQ(sampler.batches_per_epoch(), 3);
  std::vector<int> hits(8, 0);
  for (int b = 0; b < 3; ++b)
    for (auto i : sampler.next()) ++hits[static_cast<std::size_t>(i)];
  for (int h : hits) EXPECT_GE(h, 1);
}

TEST(Sampler, EmptyClassIsAnError) {
  EXPECT_THROW(BatchSampler({0, 0, 0}, 2, 2, Sampling::weighted_oversampling, 1), InvalidArgument);
}

TEST(Config, ValidationAndSize) {
  ClassifierConfig c;
  EXPECT_NO_THROW(c.validate());
  ClassifierModel desk(c);
  const auto params = parameter_count(*desk.net());
  EXPECT_GT(params, 400000);
  EXPECT_LT(params, 600000);

  auto bad = c;
  bad.pretrained_init = true;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = c;
  bad.dropout = 1.0;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = c;
  bad.architecture = "densenet169";
  EXPECT_THROW(bad.validate(), InvalidArgument);
  EXPECT_EQ(to_json(classifier_config_from_json(to_json(c))), to_json(c));

  TrainSpec s;
  EXPECT_EQ(s.max_epochs, 100);
  EXPECT_EQ(s.patience, 25);
  EXPECT_EQ(s.weight_decay, 1e-4);
  s.patience = 100;
  EXPECT_THROW(s.validate(), InvalidArgument);
  s.patience = 25;
  s.lr = 0;
  EXPECT_THROW(s.validate(), InvalidArgument);
  TrainSpec d;
  d.sampling = Sampling::uniform;
  EXPECT_EQ(to_json(train_spec_from_json(to_json(d))), to_json(d));
}

TEST(BasicAugmentations, ShapeAndIdentity) {
  auto batch = torch::rand({4, 3, 16, 16});
  std::mt19937_64 rng(2);
  BasicAugmentations none{false, false, false, 0.25};
  EXPECT_TRUE(torch::equal(apply_basic_augmentations(batch, none, rng), batch));
  BasicAugmentations all{true, true, true, 0.25};
  auto out = apply_basic_augmentations(batch, all, rng);
  EXPECT_EQ(out.sizes(), batch.sizes());
  // Flips permute pixels; cutout only zeroes some.
  EXPECT_LE(out.abs().sum().item<double>(), batch.abs().sum().item<double>() + 1e-3);
}

TEST(Training, OneEpochIsLoggedOnce) {
  TempDir dir;
  auto m = separable_toy(dir, 10);
  std::vector<EpochLog> seen;
  auto trained = train_classifier(m, small_classifier(), quick_spec(1, 0), 0,
                                  [&](const EpochLog& l) { seen.push_back(l); });
  EXPECT_EQ(trained.run.epochs.size(), 1u);
  EXPECT_EQ(seen.size(), 1u);
  EXPECT_EQ(trained.run.best_epoch, 1);
  ASSERT_TRUE(trained.run.test_report.has_value());
  EXPECT_EQ(trained.run.test_report->n_test, static_cast<std::int64_t>(m.count(Split::test)));
  EXPECT_EQ(trained.run.n_test, static_cast<std::int64_t>(m.count(Split::test)));
}

TEST(Training, SeparableDataReachesFullTrainingAccuracy) {
  TempDir dir;
  auto m = separable_toy(dir);
  auto trained = train_classifier(m, small_classifier(), quick_spec(20, 19), 1);
  double best = 0;
  for (const auto& e : trained.run.epochs) best = std::max(best, e.train_accuracy);
  EXPECT_EQ(best, 1.0);
  EXPECT_EQ(trained.run.best_val_balanced_accuracy, 1.0);
  EXPECT_EQ(evaluate(trained.model, m, Split::test).balanced_accuracy, 1.0);
}

TEST(Training, EarlyStoppingBound) {
  TempDir dir;
  // Labels independent of the image content: validation accuracy stalls.
  auto m = make_toy_dataset({.n_per_class = 16, .classes = parse_class_spec("a;b"), .seed = 4,
                             .resolution = 32},
                            dir / "noise");
  for (int seed = 0; seed < 2; ++seed) {
    auto spec = quick_spec(30, 3);
    auto trained = train_classifier(m, small_classifier(), spec, seed);
    const auto& run = trained.run;
    EXPECT_LE(static_cast<int>(run.epochs.size()), run.best_epoch + spec.patience + 1);
    if (run.stopped_early) {
      EXPECT_LT(static_cast<int>(run.epochs.size()), spec.max_epochs);
    }
    double max_val = 0;
    for (const auto& e : run.epochs) max_val = std::max(max_val, e.val_balanced_accuracy);
    EXPECT_EQ(run.best_val_balanced_accuracy, max_val);
  }
}

TEST(Training, IsDeterministicPerSeedAndRoundTrips) {
  TempDir dir;
  auto m = separable_toy(dir, 10);
  auto a = train_classifier(m, small_classifier(), quick_spec(2, 1), 3);
  auto b = train_classifier(m, small_classifier(), quick_spec(2, 1), 3);
  EXPECT_EQ(a.run.epochs.back().train_loss, b.run.epochs.back().train_loss);
  EXPECT_EQ(a.run.to_json()["epochs"], b.run.to_json()["epochs"]);

  a.model.save(dir / "clf.dgarc");
  auto loaded = ClassifierModel::load(dir / "clf.dgarc");
  auto test = load_split(m, Split::test);
  EXPECT_TRUE(torch::equal(loaded.predict_scores(test.images), a.model.predict_scores(test.images)));
  auto scores = loaded.predict_scores(test.images);
  EXPECT_LT((scores.sum(1) - 1).abs().max().item<double>(), 1e-5);

  auto predictor = make_predictor(loaded);
  std::vector<ImageTensor> images;
  for (const auto& e : m.entries_in(Split::test)) images.push_back(m.load_image(e));
  EXPECT_EQ(predictor(images), loaded.predict(test.images));
}

TEST(Training, PreconditionErrors) {
  TempDir dir;
  auto m = separable_toy(dir, 10);
  EXPECT_THROW(train_classifier(m, small_classifier(64), quick_spec(1, 0), 0), InvalidArgument);
  auto three = small_classifier();
  three.n_classes = 3;
  EXPECT_THROW(train_classifier(m, three, quick_spec(1, 0), 0), InvalidArgument);

  auto no_dark = m;
  std::erase_if(no_dark.entries, [](const ManifestEntry& e) { return e.split == Split::train && e.label == 1; });
  try {
    train_classifier(no_dark, small_classifier(), quick_spec(1, 0), 0);
    FAIL() << "expected an error";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("oversampling undefined"), std::string::npos);
  }
}

TEST(Ablation, SelfComparisonHasZeroDelta) {
  TempDir dir;
  auto m = separable_toy(dir, 10);
  auto table = run_ablation(m, {{"same", m}}, small_classifier(), quick_spec(2, 1), {0, 1});
  ASSERT_EQ(table.rows.size(), 2u);
  EXPECT_EQ(table.rows[0].dataset, "baseline");
  EXPECT_EQ(table.rows[0].delta_vs_baseline, 0.0);
  EXPECT_NEAR(table.rows[1].delta_vs_baseline, 0.0, 1e-12);
  EXPECT_EQ(table.rows[1].reports.size(), 2u);
  EXPECT_EQ(table.seeds, (std::vector<std::uint64_t>{0, 1}));
}

TEST(Ablation, ElevenRowTable) {
  TempDir dir;
  auto m = separable_toy(dir, 5);
  std::vector<NamedManifest> augmented;
  for (const char* size : {"2k", "4k", "6k", "8k", "10k"})
    for (const char* suffix : {"", "-filter"}) augmented.push_back({std::string("SA-") + size + suffix, m});
  auto table = run_ablation(m, augmented, small_classifier(), quick_spec(1, 0), {0});
  ASSERT_EQ(table.rows.size(), 11u);

  auto acc = table.accuracy_tsv();
  EXPECT_EQ(std::count(acc.begin(), acc.end(), '\n'), 12);  // header + 11 rows
  EXPECT_EQ(acc.substr(0, acc.find('\n')), "dataset\tn_seeds\tbalanced_accuracy_mean\tbalanced_accuracy_std\tdelta_vs_baseline");
  auto auc = table.auc_tsv();
  auto header = auc.substr(0, auc.find('\n'));
  EXPECT_EQ(header, "dataset\tlight\tdark\taverage");
  EXPECT_EQ(table.to_json()["rows"].size(), 11u);
}
