#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "filterbench/data_model.hpp"

namespace filterbench {

// ---- subject-disjoint splits ----

struct SplitSpec {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
  std::uint64_t seed = 0;
};

// Shuffles subjects and partitions them 70/10/20: val and test take
// round(0.1 N) and round(0.2 N), train the remainder. Each list is sorted.
// Throws TooFewSubjects below 10 subjects.
SplitSpec make_splits(const DatasetManifest& manifest, std::uint64_t seed);

// ---- training ----

enum class MapOptimizer {
  // Full-batch gradient descent with Nesterov momentum and adaptive restart;
  // step 1/L from the largest eigenvalue of the input second-moment matrix.
  Accelerated,
  // Minibatch Adam with learning_rate / batch_size.
  Adam,
};

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 256;
  std::size_t max_epochs = 2000;
  std::size_t patience = 50;
  std::uint64_t seed = 0;
  // A validation loss counts as an improvement only when it is lower than
  // the best so far by at least this much.
  double min_improvement = 1e-9;
  MapOptimizer map_optimizer = MapOptimizer::Accelerated;

  void validate() const;
};

struct TrainingTrace {
  std::vector<double> train_loss;  // per epoch
  std::vector<double> val_loss;    // per epoch
  std::size_t best_epoch = 0;      // 0-based index into val_loss
  std::size_t epochs_run = 0;
};

// Samples as rows.
struct LabeledEmbeddings {
  Eigen::MatrixXd features;
  std::vector<int> labels;
};

// Mean softmax cross-entropy of logits W x + b; gradients written when the
// output pointers are non-null.
double softmax_cross_entropy(const Eigen::MatrixXd& weights, const Eigen::VectorXd& bias,
                             const Eigen::MatrixXd& features, std::span<const int> labels,
                             Eigen::MatrixXd* grad_weights = nullptr,
                             Eigen::VectorXd* grad_bias = nullptr);

// Mean over samples of |M x + b - y|^2 (rows of inputs / targets).
double mean_squared_error(const Eigen::MatrixXd& matrix, const Eigen::VectorXd& bias,
                          const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets,
                          Eigen::MatrixXd* grad_matrix = nullptr,
                          Eigen::VectorXd* grad_bias = nullptr);

struct FilterClassifier {
  Eigen::MatrixXd weights;  // K x D
  Eigen::VectorXd bias;     // K
  std::vector<std::string> classes;  // variant tags; classes[0] == "orig"
  TrainingTrace trace;

  std::size_t dim() const noexcept { return static_cast<std::size_t>(weights.cols()); }
  // argmax of W x + b, lowest index on ties. Throws DimMismatch.
  std::size_t predict_index(std::span<const float> embedding) const;
  const std::string& classify(std::span<const float> embedding) const;
};

// Single linear layer trained with Adam on softmax cross-entropy; early
// stopping on validation loss returns the best-validation parameters.
// Throws MissingClass, DivergenceDetected.
FilterClassifier train_filter_classifier(const LabeledEmbeddings& train, const LabeledEmbeddings& val,
                                         std::vector<std::string> classes, const TrainConfig& cfg);

double accuracy(const FilterClassifier& classifier, const LabeledEmbeddings& data);

struct LinearMap {
  Eigen::MatrixXd matrix;  // D x D
  Eigen::VectorXd bias;    // D
  std::string filter_id;
  double train_mse = 0.0;
  TrainingTrace trace;

  std::vector<float> apply(std::span<const float> x) const;
};

// Pairs as rows: filtered inputs and the original embeddings they should map
// to. Throws EmptyInput, DivergenceDetected.
LinearMap train_restoration_map(const Eigen::MatrixXd& train_filtered, const Eigen::MatrixXd& train_original,
                                const Eigen::MatrixXd& val_filtered, const Eigen::MatrixXd& val_original,
                                const TrainConfig& cfg);

// Exact minimizer of sum |M x + b - y|^2 via normal equations with ridge on
// the diagonal. Throws SingularSystem.
LinearMap closed_form_map(const Eigen::MatrixXd& filtered, const Eigen::MatrixXd& original,
                          double ridge = 1e-8);

enum class MitigationRouting {
  ClassifierGated,  // detect the filter, then apply its map
  OracleLabel,      // use each entry's true variant
};

// Originals pass through; filtered entries (as detected or labelled) are
// mapped by the matching restoration map. Keys are preserved.
// Throws MissingMap.
EmbeddingStore apply_mitigation(const EmbeddingStore& store, const FilterClassifier& classifier,
                                const std::map<std::string, LinearMap>& maps,
                                MitigationRouting routing = MitigationRouting::ClassifierGated);

// ---- model files ----

// LMAP1: magic, u32 D, D*D f32 row-major matrix, D f32 bias.
void save_linear_map(const LinearMap& map, const std::filesystem::path& path);
LinearMap load_linear_map(const std::filesystem::path& path);

// LCLS1: magic, u32 K, u32 D, K labels (u16 length + bytes), K*D f32
// row-major weights, K f32 bias.
void save_classifier(const FilterClassifier& classifier, const std::filesystem::path& path);
FilterClassifier load_classifier(const std::filesystem::path& path);

// ---- experiment ----

// Gathers the embeddings of the given subjects' images for one variant, in
// manifest order. Throws MissingEmbedding.
Eigen::MatrixXd gather(const DatasetManifest& manifest, const EmbeddingStore& store,
                       std::span<const std::string> subjects, const Variant& variant);

struct MitigationOptions {
  std::vector<std::string> filters;
  std::size_t splits = 5;
  std::uint64_t seed = 0;
  TrainConfig train;
  std::vector<double> fmr_targets = {1e-4, 1e-5};
  MitigationRouting routing = MitigationRouting::ClassifierGated;
  int threads = 0;
  bool keep_models = false;
};

struct FilterOutcome {
  std::string filter_id;
  double d_prime_pre = 0.0;
  double d_prime_mapping = 0.0;
  std::vector<double> fnmr_pre;      // parallel to fmr_targets
  std::vector<double> fnmr_mapping;  // parallel to fmr_targets
  double map_val_mse = 0.0;
};

struct SplitOutcome {
  std::uint64_t seed = 0;
  double detection_accuracy = 0.0;
  std::vector<FilterOutcome> filters;
};

struct TrainedSplit {
  FilterClassifier classifier;
  std::map<std::string, LinearMap> maps;  // keyed by variant tag
};

struct MitigationReport {
  std::vector<double> fmr_targets;
  std::vector<SplitOutcome> splits;
  // One per split when keep_models is set.
  std::vector<TrainedSplit> models;
};

// Repeats the detect-and-restore experiment over seeded subject-disjoint
// splits: classifier over {original} + filters, one restoration map per
// filter, then filtered-vs-original FNMR before and after mapping on the
// test subjects.
MitigationReport run_mitigation(const DatasetManifest& manifest, const EmbeddingStore& store,
                                const MitigationOptions& opts);

// Table-3 style summary: per filter and over all filters, mean +/- sample std
// across splits of detection accuracy, FNMR_pre and FNMR_mapping.
nlohmann::json to_json(const MitigationReport& report);

}  // namespace filterbench
