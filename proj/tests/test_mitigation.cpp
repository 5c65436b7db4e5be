#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "filterbench/metrics.hpp"
#include "filterbench/mitigation.hpp"
#include "filterbench/protocol.hpp"
#include "filterbench/rng.hpp"
#include "filterbench/synth.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace filterbench;
using testutil::kind_of;
using testutil::TempDir;

namespace {

DatasetManifest make_manifest(int n) {
  std::vector<ImageRecord> recs;
  for (int a = 0; a < n; ++a)
    for (int b = 1; b <= 3; ++b)
      recs.push_back({"q" + std::to_string(a) + "_" + std::to_string(b), "q" + std::to_string(a), b,
                      Gender::U, {}});
  return DatasetManifest::from_records(recs, 3);
}

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

Eigen::MatrixXd unit_rows(Eigen::MatrixXd m) {
  m.rowwise().normalize();
  return m;
}

// Rows y = A x + b.
Eigen::MatrixXd affine_rows(const Eigen::MatrixXd& x, const Eigen::MatrixXd& a, const Eigen::VectorXd& b) {
  return (x * a.transpose()).rowwise() + b.transpose();
}

double max_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::max(std::abs(analytic), std::abs(numeric)));
}

void expect_trace_invariants(const TrainingTrace& t, const TrainConfig& cfg) {
  ASSERT_EQ(t.val_loss.size(), t.epochs_run);
  ASSERT_EQ(t.train_loss.size(), t.epochs_run);
  ASSERT_LT(t.best_epoch, t.epochs_run);
  const auto best = std::min_element(t.val_loss.begin(), t.val_loss.end());
  EXPECT_LE(t.val_loss[t.best_epoch], *best + cfg.min_improvement);
  EXPECT_LE(t.epochs_run - 1 - t.best_epoch, cfg.patience);
  if (t.epochs_run < cfg.max_epochs) EXPECT_EQ(t.epochs_run - 1 - t.best_epoch, cfg.patience);
}

}  // namespace

TEST(Splits, Sizes) {
  const auto s = make_splits(make_manifest(1000), 1);
  EXPECT_EQ(s.train.size(), 700u);
  EXPECT_EQ(s.val.size(), 100u);
  EXPECT_EQ(s.test.size(), 200u);
  const auto small = make_splits(make_manifest(10), 1);
  EXPECT_EQ(small.train.size(), 7u);
  EXPECT_EQ(small.val.size(), 1u);
  EXPECT_EQ(small.test.size(), 2u);
  EXPECT_EQ(kind_of([] { make_splits(make_manifest(9), 1); }), ErrorKind::TooFewSubjects);
}

TEST(Splits, DisjointAndSeeded) {
  const auto m = make_manifest(200);
  std::vector<SplitSpec> runs;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = make_splits(m, seed);
    std::set<std::string> all;
    for (const auto* part : {&s.train, &s.val, &s.test}) all.insert(part->begin(), part->end());
    EXPECT_EQ(all.size(), 200u);
    EXPECT_EQ(make_splits(m, seed).test, s.test);
    runs.push_back(s);
  }
  for (std::size_t a = 0; a < runs.size(); ++a)
    for (std::size_t b = a + 1; b < runs.size(); ++b) EXPECT_NE(runs[a].test, runs[b].test);
}

TEST(Gradients, CrossEntropyMatchesFiniteDifferences) {
  Rng rng(1);
  const Eigen::MatrixXd w = random_matrix(rng, 3, 8, 0.5);
  const Eigen::VectorXd b = random_matrix(rng, 3, 1, 0.5);
  const Eigen::MatrixXd x = random_matrix(rng, 20, 8);
  std::vector<int> y(20);
  for (auto& v : y) v = static_cast<int>(rng.uniform_below(3));
  Eigen::MatrixXd gw;
  Eigen::VectorXd gb;
  softmax_cross_entropy(w, b, x, y, &gw, &gb);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      Eigen::MatrixXd wp = w, wm = w;
      wp(i, j) += h;
      wm(i, j) -= h;
      const double num = (softmax_cross_entropy(wp, b, x, y) - softmax_cross_entropy(wm, b, x, y)) / (2 * h);
      EXPECT_LT(max_rel_error(gw(i, j), num), 1e-4) << i << "," << j;
    }
  for (Eigen::Index i = 0; i < b.size(); ++i) {
    Eigen::VectorXd bp = b, bm = b;
    bp(i) += h;
    bm(i) -= h;
    const double num = (softmax_cross_entropy(w, bp, x, y) - softmax_cross_entropy(w, bm, x, y)) / (2 * h);
    EXPECT_LT(max_rel_error(gb(i), num), 1e-4);
  }
}

TEST(Gradients, MseMatchesFiniteDifferences) {
  Rng rng(2);
  const Eigen::MatrixXd m = random_matrix(rng, 8, 8, 0.3);
  const Eigen::VectorXd b = random_matrix(rng, 8, 1, 0.3);
  const Eigen::MatrixXd x = random_matrix(rng, 15, 8);
  const Eigen::MatrixXd y = random_matrix(rng, 15, 8);
  Eigen::MatrixXd gm;
  Eigen::VectorXd gb;
  const double loss = mean_squared_error(m, b, x, y, &gm, &gb);
  EXPECT_NEAR(loss, ((x * m.transpose()).rowwise() + b.transpose() - y).squaredNorm() / 15.0, 1e-12);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      Eigen::MatrixXd mp = m, mm = m;
      mp(i, j) += h;
      mm(i, j) -= h;
      const double num = (mean_squared_error(mp, b, x, y) - mean_squared_error(mm, b, x, y)) / (2 * h);
      EXPECT_LT(max_rel_error(gm(i, j), num), 1e-4);
    }
  for (Eigen::Index i = 0; i < b.size(); ++i) {
    Eigen::VectorXd bp = b, bm = b;
    bp(i) += h;
    bm(i) -= h;
    const double num = (mean_squared_error(m, bp, x, y) - mean_squared_error(m, bm, x, y)) / (2 * h);
    EXPECT_LT(max_rel_error(gb(i), num), 1e-4);
  }
}

TEST(Classifier, SeparableTwoClass) {
  Rng rng(3);
  auto cluster = [&](double sign, int n) {
    Eigen::MatrixXd x = random_matrix(rng, n, 16, 0.05);
    x.col(0).array() += sign;
    return unit_rows(x);
  };
  LabeledEmbeddings train, val;
  train.features.resize(400, 16);
  train.features << cluster(1, 200), cluster(-1, 200);
  val.features.resize(100, 16);
  val.features << cluster(1, 50), cluster(-1, 50);
  for (int i = 0; i < 400; ++i) train.labels.push_back(i < 200 ? 0 : 1);
  for (int i = 0; i < 100; ++i) val.labels.push_back(i < 50 ? 0 : 1);
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.max_epochs = 100;
  cfg.patience = 10;
  const auto clf = train_filter_classifier(train, val, {"orig", "f:x"}, cfg);
  EXPECT_EQ(accuracy(clf, val), 1.0);
  expect_trace_invariants(clf.trace, cfg);

  const std::vector<float> centroid{1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  EXPECT_EQ(clf.classify(centroid), "orig");

  // Predictions do not depend on evaluation order.
  std::vector<std::size_t> forward, backward;
  for (Eigen::Index r = 0; r < val.features.rows(); ++r) {
    const Eigen::VectorXf v = val.features.row(r).cast<float>();
    forward.push_back(clf.predict_index(std::span<const float>(v.data(), 16)));
  }
  for (Eigen::Index r = val.features.rows() - 1; r >= 0; --r) {
    const Eigen::VectorXf v = val.features.row(r).cast<float>();
    backward.push_back(clf.predict_index(std::span<const float>(v.data(), 16)));
  }
  std::reverse(backward.begin(), backward.end());
  EXPECT_EQ(forward, backward);
}

TEST(Classifier, SingleClassIsTrivial) {
  Rng rng(4);
  LabeledEmbeddings train{unit_rows(random_matrix(rng, 30, 4)), std::vector<int>(30, 0)};
  LabeledEmbeddings val{unit_rows(random_matrix(rng, 10, 4)), std::vector<int>(10, 0)};
  TrainConfig cfg;
  cfg.max_epochs = 5;
  const auto clf = train_filter_classifier(train, val, {"orig"}, cfg);
  EXPECT_EQ(accuracy(clf, val), 1.0);
}

TEST(Classifier, ZeroWeightsPickClassZero) {
  FilterClassifier clf;
  clf.weights = Eigen::MatrixXd::Zero(3, 4);
  clf.bias = Eigen::VectorXd::Zero(3);
  clf.classes = {"orig", "f:a", "f:b"};
  EXPECT_EQ(clf.predict_index(std::vector<float>{0.1f, 0.2f, 0.3f, 0.4f}), 0u);
  EXPECT_EQ(kind_of([&] { clf.predict_index(std::vector<float>{1, 2}); }), ErrorKind::DimMismatch);
}

TEST(Classifier, MissingClass) {
  Rng rng(5);
  LabeledEmbeddings train{random_matrix(rng, 20, 4), std::vector<int>(20, 0)};
  for (int i = 0; i < 10; ++i) train.labels[i] = 1;
  LabeledEmbeddings val = train;
  EXPECT_EQ(kind_of([&] { train_filter_classifier(train, val, {"orig", "f:a", "f:b"}, TrainConfig{}); }),
            ErrorKind::MissingClass);
}

TEST(RestorationMap, IdentityFilter) {
  Rng rng(6);
  const auto x = unit_rows(random_matrix(rng, 600, 24));
  const auto v = unit_rows(random_matrix(rng, 100, 24));
  TrainConfig cfg;
  const auto map = train_restoration_map(x, x, v, v, cfg);
  EXPECT_LT(map.trace.val_loss[map.trace.best_epoch], 1e-8);
  expect_trace_invariants(map.trace, cfg);
}

TEST(RestorationMap, RecoversAffineFilter) {
  Rng rng(7);
  const Eigen::Index d = 32;
  const Eigen::MatrixXd a = Eigen::MatrixXd::Identity(d, d) + random_matrix(rng, d, d, 0.3 / std::sqrt(d));
  const Eigen::VectorXd b = random_matrix(rng, d, 1, 1 / std::sqrt(d));
  const auto orig = unit_rows(random_matrix(rng, 5000, d));
  const auto val_orig = unit_rows(random_matrix(rng, 500, d));
  const auto filt = affine_rows(orig, a, b);
  const auto val_filt = affine_rows(val_orig, a, b);
  TrainConfig cfg;
  const auto map = train_restoration_map(filt, orig, val_filt, val_orig, cfg);
  EXPECT_LT(map.trace.val_loss[map.trace.best_epoch], 1e-6);
  double worst = 1.0;
  for (Eigen::Index r = 0; r < val_filt.rows(); ++r) {
    const Eigen::VectorXf in = val_filt.row(r).cast<float>();
    const auto out = map.apply(std::span<const float>(in.data(), d));
    const Eigen::VectorXf ref = val_orig.row(r).cast<float>();
    worst = std::min(worst, cosine_similarity(out, std::span<const float>(ref.data(), d)));
  }
  EXPECT_GT(worst, 0.999);

  const auto exact = closed_form_map(filt, orig);
  Eigen::MatrixXd got(d, d + 1), want(d, d + 1);
  got << map.matrix, map.bias;
  want << exact.matrix, exact.bias;
  EXPECT_LT((got - want).norm() / want.norm(), 1e-3);
}

TEST(RestorationMap, AdamAlsoConverges) {
  Rng rng(8);
  const auto x = unit_rows(random_matrix(rng, 400, 8));
  const Eigen::MatrixXd y = 0.5 * x;
  TrainConfig cfg;
  cfg.map_optimizer = MapOptimizer::Adam;
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 64;
  cfg.max_epochs = 400;
  const auto map = train_restoration_map(x, y, x, y, cfg);
  EXPECT_LT(map.trace.val_loss[map.trace.best_epoch], 1e-5);
  expect_trace_invariants(map.trace, cfg);
}

TEST(ClosedForm, SignedBasis) {
  const Eigen::Index d = 6;
  Eigen::MatrixXd x(2 * d, d);
  x << Eigen::MatrixXd::Identity(d, d), -Eigen::MatrixXd::Identity(d, d);
  const auto map = closed_form_map(x, x);
  EXPECT_LT((map.matrix - Eigen::MatrixXd::Identity(d, d)).norm(), 1e-6);
  EXPECT_LT(map.bias.norm(), 1e-6);
}

TEST(ClosedForm, Doubling) {
  Rng rng(9);
  const auto x = random_matrix(rng, 200, 10);
  const auto map = closed_form_map(x, 2 * x, 0.0);
  EXPECT_LT((map.matrix - 2 * Eigen::MatrixXd::Identity(10, 10)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT(map.bias.cwiseAbs().maxCoeff(), 1e-10);
}

TEST(ClosedForm, ResidualMatchesDenseSolver) {
  Rng rng(10);
  const auto x = random_matrix(rng, 1000, 64);
  const auto y = random_matrix(rng, 1000, 64);
  const auto map = closed_form_map(x, y, 0.0);
  const Eigen::MatrixXd ref = oracle::least_squares(x, y);
  const double got = mean_squared_error(map.matrix, map.bias, x, y);
  const double want = mean_squared_error(ref.leftCols(64), ref.col(64), x, y);
  EXPECT_NEAR(got, want, 1e-8);
}

TEST(ClosedForm, SingularSystem) {
  const Eigen::MatrixXd x = Eigen::MatrixXd::Zero(5, 3);
  EXPECT_EQ(kind_of([&] { closed_form_map(x, x, 0.0); }), ErrorKind::SingularSystem);
}

TEST(ApplyMitigation, OriginalsPassThrough) {
  SyntheticDatasetSpec spec{.subjects = 20, .images_per_subject = 3, .dim = 8, .seed = 2};
  const auto ds = gen_embeddings(spec);
  FilterClassifier clf;
  clf.weights = Eigen::MatrixXd::Zero(2, 8);
  clf.bias = Eigen::VectorXd::Zero(2);
  clf.classes = {"orig", "f:a"};
  for (auto routing : {MitigationRouting::ClassifierGated, MitigationRouting::OracleLabel}) {
    EXPECT_EQ(apply_mitigation(ds.store, clf, {}, routing), ds.store);
  }
  auto filtered = ds.store;
  apply_synthetic_filter(filtered, "a", {.kind = SyntheticFilterKind::AffineEmbedding, .seed = 1});
  EXPECT_EQ(kind_of([&] { apply_mitigation(filtered, clf, {}, MitigationRouting::OracleLabel); }),
            ErrorKind::MissingMap);
}

TEST(ApplyMitigation, OracleMapsRestoreBaseline) {
  SyntheticDatasetSpec spec{.subjects = 200, .images_per_subject = 3, .dim = 64, .intra_noise = 1.0,
                            .inter_separation = 3.0, .seed = 11};
  const auto ds = gen_embeddings(spec);
  auto store = ds.store;
  const SyntheticFilterSpec f{.kind = SyntheticFilterKind::AffineEmbedding, .seed = 77, .strength = 1.0};
  apply_synthetic_filter(store, "a", f);
  const auto t = affine_transform(64, 77);
  LinearMap inverse;
  inverse.matrix = t.matrix.inverse();
  inverse.bias = -inverse.matrix * t.offset;
  inverse.filter_id = "a";
  FilterClassifier clf;
  clf.weights = Eigen::MatrixXd::Zero(2, 64);
  clf.bias = Eigen::VectorXd::Zero(2);
  clf.classes = {"orig", "f:a"};
  const auto restored = apply_mitigation(store, clf, {{"f:a", inverse}}, MitigationRouting::OracleLabel);

  const auto fvo = build_protocol(ds.manifest, ProtocolMode::filt_vs_orig("a"));
  const auto ovo = build_protocol(ds.manifest, ProtocolMode::orig_vs_orig());
  const double baseline = d_prime(score_protocol(ovo, ds.store));
  const double pre = d_prime(score_protocol(fvo, store));
  const double post = d_prime(score_protocol(fvo, restored));
  EXPECT_LT(pre, baseline);
  EXPECT_NEAR(post, baseline, 0.01 * baseline);
}

TEST_F(TempDir, ModelFilesRoundTrip) {
  Rng rng(12);
  LinearMap map;
  map.matrix = random_matrix(rng, 5, 5);
  map.bias = random_matrix(rng, 5, 1);
  save_linear_map(map, dir / "m.lmap1");
  const auto m2 = load_linear_map(dir / "m.lmap1");
  EXPECT_EQ(m2.matrix, map.matrix.cast<float>().cast<double>());
  EXPECT_EQ(m2.bias, map.bias.cast<float>().cast<double>());
  EXPECT_EQ(std::filesystem::file_size(dir / "m.lmap1"), 5 + 4 + 4 * (25 + 5));

  FilterClassifier clf;
  clf.weights = random_matrix(rng, 3, 5);
  clf.bias = random_matrix(rng, 3, 1);
  clf.classes = {"orig", "f:a", "f:bb"};
  save_classifier(clf, dir / "c.lcls1");
  const auto c2 = load_classifier(dir / "c.lcls1");
  EXPECT_EQ(c2.classes, clf.classes);
  EXPECT_EQ(c2.weights, clf.weights.cast<float>().cast<double>());
  EXPECT_EQ(c2.bias, clf.bias.cast<float>().cast<double>());
  EXPECT_EQ(kind_of([&] { load_linear_map(dir / "none"); }), ErrorKind::MissingInput);
}

TEST(Experiment, SmallEndToEnd) {
  SyntheticDatasetSpec spec{.subjects = 60, .images_per_subject = 3, .dim = 32, .intra_noise = 1.0,
                            .inter_separation = 3.0, .seed = 5};
  auto ds = gen_embeddings(spec);
  apply_synthetic_filter(ds.store, "a", {.kind = SyntheticFilterKind::AffineEmbedding, .seed = 8});
  apply_synthetic_filter(ds.store, "b", {.kind = SyntheticFilterKind::AffineEmbedding, .seed = 9});
  MitigationOptions opts;
  opts.filters = {"a", "b"};
  opts.splits = 2;
  opts.seed = 3;
  opts.keep_models = true;
  opts.train.learning_rate = 1e-2;
  opts.train.max_epochs = 500;
  opts.fmr_targets = {1e-2};
  const auto report = run_mitigation(ds.manifest, ds.store, opts);
  ASSERT_EQ(report.splits.size(), 2u);
  ASSERT_EQ(report.models.size(), 2u);
  EXPECT_EQ(report.models[0].classifier.classes, (std::vector<std::string>{"orig", "f:a", "f:b"}));
  for (const auto& s : report.splits) {
    EXPECT_GT(s.detection_accuracy, 0.95);
    ASSERT_EQ(s.filters.size(), 2u);
    for (const auto& f : s.filters) {
      EXPECT_GT(f.d_prime_mapping, f.d_prime_pre);
      EXPECT_LE(f.fnmr_mapping[0], f.fnmr_pre[0]);
    }
  }
  EXPECT_EQ(run_mitigation(ds.manifest, ds.store, opts).splits[1].filters[0].d_prime_mapping,
            report.splits[1].filters[0].d_prime_mapping);
  const auto j = to_json(report);
  EXPECT_TRUE(j.is_object());
}
