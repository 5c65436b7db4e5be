#include "filterbench/mitigation.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

#include <Eigen/Eigenvalues>

#include "filterbench/binary_io.hpp"
#include "filterbench/error.hpp"
#include "filterbench/metrics.hpp"
#include "filterbench/protocol.hpp"
#include "filterbench/rng.hpp"

namespace filterbench {

SplitSpec make_splits(const DatasetManifest& manifest, std::uint64_t seed) {
  const std::size_t n = manifest.subject_count();
  if (n < 10) {
    throw Error(ErrorKind::TooFewSubjects, "splits need at least 10 subjects, have " + std::to_string(n));
  }
  std::vector<std::string> subjects = manifest.subjects();
  Rng rng(seed);
  rng.shuffle(std::span<std::string>(subjects));
  const auto n_val = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
  const auto n_test = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n)));
  const std::size_t n_train = n - n_val - n_test;

  SplitSpec s;
  s.seed = seed;
  s.train.assign(subjects.begin(), subjects.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(subjects.begin() + static_cast<std::ptrdiff_t>(n_train),
               subjects.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(subjects.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), subjects.end());
  for (auto* part : {&s.train, &s.val, &s.test}) std::sort(part->begin(), part->end());
  return s;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error(ErrorKind::Validation, "learning_rate must be > 0");
  if (patience < 1) throw Error(ErrorKind::Validation, "patience must be >= 1");
  if (batch_size < 1) throw Error(ErrorKind::Validation, "batch_size must be >= 1");
  if (max_epochs < 1) throw Error(ErrorKind::Validation, "max_epochs must be >= 1");
}

// ---- losses ----

double softmax_cross_entropy(const Eigen::MatrixXd& weights, const Eigen::VectorXd& bias,
                             const Eigen::MatrixXd& features, std::span<const int> labels,
                             Eigen::MatrixXd* grad_weights, Eigen::VectorXd* grad_bias) {
  const Eigen::Index n = features.rows();
  Eigen::MatrixXd logits = features * weights.transpose();
  logits.rowwise() += bias.transpose();
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    auto row = logits.row(i);
    const double peak = row.maxCoeff();
    row.array() -= peak;
    row = row.array().exp().matrix();
    const double z = row.sum();
    row /= z;
    loss -= std::log(std::max(row(labels[static_cast<std::size_t>(i)]), 1e-300));
  }
  // logits now holds probabilities; subtract one-hot for the gradient.
  if (grad_weights || grad_bias) {
    for (Eigen::Index i = 0; i < n; ++i) logits(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
    const double inv_n = 1.0 / static_cast<double>(n);
    if (grad_weights) *grad_weights = logits.transpose() * features * inv_n;
    if (grad_bias) *grad_bias = logits.colwise().sum().transpose() * inv_n;
  }
  return loss / static_cast<double>(n);
}

double mean_squared_error(const Eigen::MatrixXd& matrix, const Eigen::VectorXd& bias,
                          const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets,
                          Eigen::MatrixXd* grad_matrix, Eigen::VectorXd* grad_bias) {
  const double inv_n = 1.0 / static_cast<double>(inputs.rows());
  Eigen::MatrixXd residual = inputs * matrix.transpose();
  residual.rowwise() += bias.transpose();
  residual -= targets;
  if (grad_matrix) *grad_matrix = 2.0 * inv_n * residual.transpose() * inputs;
  if (grad_bias) *grad_bias = 2.0 * inv_n * residual.colwise().sum().transpose();
  return residual.squaredNorm() * inv_n;
}

namespace {

struct AdamState {
  Eigen::MatrixXd m_w, v_w;
  Eigen::VectorXd m_b, v_b;
  long step = 0;

  AdamState(Eigen::Index rows, Eigen::Index cols)
      : m_w(Eigen::MatrixXd::Zero(rows, cols)), v_w(Eigen::MatrixXd::Zero(rows, cols)),
        m_b(Eigen::VectorXd::Zero(rows)), v_b(Eigen::VectorXd::Zero(rows)) {}

  void update(Eigen::MatrixXd& w, Eigen::VectorXd& b, const Eigen::MatrixXd& gw,
              const Eigen::VectorXd& gb, double lr) {
    constexpr double beta1 = 0.9;
    constexpr double beta2 = 0.999;
    constexpr double eps = 1e-8;
    ++step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    m_w = beta1 * m_w + (1.0 - beta1) * gw;
    v_w = beta2 * v_w + (1.0 - beta2) * gw.cwiseAbs2();
    m_b = beta1 * m_b + (1.0 - beta1) * gb;
    v_b = beta2 * v_b + (1.0 - beta2) * gb.cwiseAbs2();
    w.array() -= lr * (m_w.array() / c1) / ((v_w.array() / c2).sqrt() + eps);
    b.array() -= lr * (m_b.array() / c1) / ((v_b.array() / c2).sqrt() + eps);
  }
};

// Tracks the best validation epoch and decides when to stop.
class EarlyStopping {
public:
  EarlyStopping(std::size_t patience, double min_improvement)
      : patience_(patience), min_improvement_(min_improvement) {}

  // Returns true when this epoch is the new best.
  bool observe(std::size_t epoch, double val_loss) {
    if (!std::isfinite(val_loss)) {
      throw Error(ErrorKind::DivergenceDetected, "validation loss became non-finite at epoch " +
                                                     std::to_string(epoch));
    }
    if (val_loss < best_ - min_improvement_ || epoch == 0) {
      best_ = val_loss;
      best_epoch_ = epoch;
      return true;
    }
    return false;
  }

  bool should_stop(std::size_t epoch) const { return epoch - best_epoch_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }

private:
  std::size_t patience_;
  double min_improvement_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
};

Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& m, std::span<const std::size_t> idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(idx[i]));
  }
  return out;
}

void check_finite_loss(double loss, std::size_t epoch) {
  if (!std::isfinite(loss)) {
    throw Error(ErrorKind::DivergenceDetected, "training loss became non-finite at epoch " +
                                                   std::to_string(epoch));
  }
}

}  // namespace

// ---- classifier ----

std::size_t FilterClassifier::predict_index(std::span<const float> embedding) const {
  if (embedding.size() != dim()) {
    throw Error(ErrorKind::DimMismatch, "classifier dim " + std::to_string(dim()) + ", embedding dim " +
                                            std::to_string(embedding.size()));
  }
  const Eigen::VectorXd x =
      Eigen::Map<const Eigen::VectorXf>(embedding.data(), static_cast<Eigen::Index>(embedding.size()))
          .cast<double>();
  const Eigen::VectorXd scores = weights * x + bias;
  std::size_t best = 0;
  for (Eigen::Index k = 1; k < scores.size(); ++k) {
    if (scores(k) > scores(static_cast<Eigen::Index>(best))) best = static_cast<std::size_t>(k);
  }
  return best;
}

const std::string& FilterClassifier::classify(std::span<const float> embedding) const {
  return classes.at(predict_index(embedding));
}

FilterClassifier train_filter_classifier(const LabeledEmbeddings& train, const LabeledEmbeddings& val,
                                         std::vector<std::string> classes, const TrainConfig& cfg) {
  cfg.validate();
  const auto k = static_cast<Eigen::Index>(classes.size());
  const Eigen::Index d = train.features.cols();
  if (k == 0) throw Error(ErrorKind::Validation, "classifier needs at least one class");
  if (train.features.rows() == 0) throw Error(ErrorKind::EmptyInput, "no training samples");
  if (static_cast<std::size_t>(train.features.rows()) != train.labels.size() ||
      static_cast<std::size_t>(val.features.rows()) != val.labels.size()) {
    throw Error(ErrorKind::Validation, "feature/label count mismatch");
  }
  if (val.features.rows() > 0 && val.features.cols() != d) {
    throw Error(ErrorKind::DimMismatch, "train and validation dims differ");
  }
  std::vector<std::size_t> per_class(classes.size(), 0);
  for (int y : train.labels) {
    if (y < 0 || y >= k) throw Error(ErrorKind::Validation, "label out of range");
    ++per_class[static_cast<std::size_t>(y)];
  }
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    if (per_class[c] == 0) throw Error(ErrorKind::MissingClass, "no training sample for class " + classes[c]);
  }
  for (int y : val.labels) {
    if (y < 0 || y >= k) throw Error(ErrorKind::Validation, "validation label out of range");
  }

  FilterClassifier model;
  model.classes = std::move(classes);
  model.weights = Eigen::MatrixXd::Zero(k, d);
  model.bias = Eigen::VectorXd::Zero(k);
  if (k == 1) return model;

  const auto& val_set = val.features.rows() > 0 ? val : train;
  AdamState adam(k, d);
  EarlyStopping stopper(cfg.patience, cfg.min_improvement);
  Rng rng(cfg.seed);
  const auto n = static_cast<std::size_t>(train.features.rows());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  Eigen::MatrixXd best_w = model.weights;
  Eigen::VectorXd best_b = model.bias;
  Eigen::MatrixXd gw;
  Eigen::VectorXd gb;
  std::vector<int> batch_labels;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double weighted_loss = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, n - start);
      std::span<const std::size_t> idx(order.data() + start, len);
      const Eigen::MatrixXd xb = gather_rows(train.features, idx);
      batch_labels.resize(len);
      for (std::size_t i = 0; i < len; ++i) batch_labels[i] = train.labels[idx[i]];
      const double loss = softmax_cross_entropy(model.weights, model.bias, xb, batch_labels, &gw, &gb);
      check_finite_loss(loss, epoch);
      weighted_loss += loss * static_cast<double>(len);
      adam.update(model.weights, model.bias, gw, gb, cfg.learning_rate);
    }
    const double val_loss = softmax_cross_entropy(model.weights, model.bias, val_set.features, val_set.labels);
    model.trace.train_loss.push_back(weighted_loss / static_cast<double>(n));
    model.trace.val_loss.push_back(val_loss);
    model.trace.epochs_run = epoch + 1;
    if (stopper.observe(epoch, val_loss)) {
      best_w = model.weights;
      best_b = model.bias;
    } else if (stopper.should_stop(epoch)) {
      break;
    }
  }
  model.trace.best_epoch = stopper.best_epoch();
  model.weights = std::move(best_w);
  model.bias = std::move(best_b);
  return model;
}

double accuracy(const FilterClassifier& classifier, const LabeledEmbeddings& data) {
  if (data.features.rows() == 0) throw Error(ErrorKind::EmptyInput, "accuracy of no samples");
  Eigen::MatrixXd scores = data.features * classifier.weights.transpose();
  scores.rowwise() += classifier.bias.transpose();
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < scores.cols(); ++c) {
      if (scores(i, c) > scores(i, best)) best = c;
    }
    correct += best == data.labels[static_cast<std::size_t>(i)] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(scores.rows());
}

// ---- restoration maps ----

std::vector<float> LinearMap::apply(std::span<const float> x) const {
  if (static_cast<Eigen::Index>(x.size()) != matrix.cols()) {
    throw Error(ErrorKind::DimMismatch, "map dim " + std::to_string(matrix.cols()) + ", input dim " +
                                            std::to_string(x.size()));
  }
  const Eigen::VectorXd in =
      Eigen::Map<const Eigen::VectorXf>(x.data(), static_cast<Eigen::Index>(x.size())).cast<double>();
  const Eigen::VectorXd out = matrix * in + bias;
  std::vector<float> y(static_cast<std::size_t>(out.size()));
  for (Eigen::Index i = 0; i < out.size(); ++i) y[static_cast<std::size_t>(i)] = static_cast<float>(out(i));
  return y;
}

namespace {

// Second moments of the bias-augmented inputs z = [x; 1]; the MSE of the
// affine map W = [M b] is tr(W Szz W^T) - 2 tr(W Szy) + syy.
struct MomentStats {
  Eigen::MatrixXd szz;  // (D+1) x (D+1)
  Eigen::MatrixXd szy;  // (D+1) x D
  double syy = 0.0;

  MomentStats(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();
    Eigen::MatrixXd z(n, d + 1);
    z.leftCols(d) = x;
    z.col(d).setOnes();
    const double inv_n = 1.0 / static_cast<double>(n);
    szz = (z.transpose() * z) * inv_n;
    szy = (z.transpose() * y) * inv_n;
    syy = y.squaredNorm() * inv_n;
  }

  double loss(const Eigen::MatrixXd& w) const {
    return (w * szz).cwiseProduct(w).sum() - 2.0 * w.cwiseProduct(szy.transpose()).sum() + syy;
  }

  Eigen::MatrixXd gradient(const Eigen::MatrixXd& w) const { return 2.0 * (w * szz - szy.transpose()); }
};

void validate_pairs(const Eigen::MatrixXd& filtered, const Eigen::MatrixXd& original) {
  if (filtered.rows() == 0) throw Error(ErrorKind::EmptyInput, "no training pairs");
  if (filtered.rows() != original.rows() || filtered.cols() != original.cols()) {
    throw Error(ErrorKind::DimMismatch, "filtered and original pair matrices differ in shape");
  }
}

LinearMap to_map(const Eigen::MatrixXd& w) {
  const Eigen::Index d = w.rows();
  LinearMap m;
  m.matrix = w.leftCols(d);
  m.bias = w.col(d);
  return m;
}

// Optimizes in standardized coordinates x~ = (x - mean) / scale, where the
// augmented second-moment matrix is close to a correlation matrix, then maps
// the result back to the original coordinates.
LinearMap train_accelerated(const Eigen::MatrixXd& xf, const Eigen::MatrixXd& xo,
                            const Eigen::MatrixXd& vf, const Eigen::MatrixXd& vo, const TrainConfig& cfg) {
  const Eigen::Index d = xf.cols();
  const Eigen::RowVectorXd mean = xf.colwise().mean();
  Eigen::RowVectorXd scale = ((xf.rowwise() - mean).colwise().squaredNorm() / static_cast<double>(xf.rows()))
                                 .cwiseSqrt();
  for (Eigen::Index j = 0; j < d; ++j) {
    if (!(scale(j) > 0.0)) scale(j) = 1.0;
  }
  auto standardize = [&](const Eigen::MatrixXd& x) -> Eigen::MatrixXd {
    return (x.rowwise() - mean).array().rowwise() / scale.array();
  };
  const MomentStats train(standardize(xf), xo);
  const MomentStats val = vf.rows() > 0 ? MomentStats(standardize(vf), vo) : train;

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(train.szz, Eigen::EigenvaluesOnly);
  const double lipschitz = 2.0 * eig.eigenvalues().maxCoeff();
  if (!(lipschitz > 0.0) || !std::isfinite(lipschitz)) {
    throw Error(ErrorKind::DivergenceDetected, "degenerate input second moments");
  }
  const double step = 1.0 / lipschitz;

  // Identity map in original coordinates.
  Eigen::MatrixXd w(d, d + 1);
  w.leftCols(d) = scale.asDiagonal();
  w.col(d) = mean.transpose();
  Eigen::MatrixXd lookahead = w;
  Eigen::MatrixXd best = w;
  double momentum_t = 1.0;

  TrainingTrace trace;
  EarlyStopping stopper(cfg.patience, cfg.min_improvement);
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const Eigen::MatrixXd grad = train.gradient(lookahead);
    Eigen::MatrixXd next = lookahead - step * grad;
    const double next_t = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * momentum_t * momentum_t));
    // Adaptive restart: drop momentum when it points uphill.
    if (grad.cwiseProduct(next - w).sum() > 0.0) {
      momentum_t = 1.0;
      lookahead = next;
    } else {
      lookahead = next + ((momentum_t - 1.0) / next_t) * (next - w);
      momentum_t = next_t;
    }
    w = std::move(next);

    const double train_loss = std::max(0.0, train.loss(w));
    const double val_loss = std::max(0.0, val.loss(w));
    check_finite_loss(train_loss, epoch);
    trace.train_loss.push_back(train_loss);
    trace.val_loss.push_back(val_loss);
    trace.epochs_run = epoch + 1;
    if (stopper.observe(epoch, val_loss)) {
      best = w;
    } else if (stopper.should_stop(epoch)) {
      break;
    }
  }
  trace.best_epoch = stopper.best_epoch();

  LinearMap map;
  map.matrix = best.leftCols(d).array().rowwise() / scale.array();
  map.bias = best.col(d) - map.matrix * mean.transpose();
  map.trace = std::move(trace);
  return map;
}

LinearMap train_adam(const Eigen::MatrixXd& xf, const Eigen::MatrixXd& xo, const Eigen::MatrixXd& vf,
                     const Eigen::MatrixXd& vo, const TrainConfig& cfg) {
  const Eigen::Index d = xf.cols();
  const bool has_val = vf.rows() > 0;
  LinearMap map;
  map.matrix = Eigen::MatrixXd::Identity(d, d);
  map.bias = Eigen::VectorXd::Zero(d);
  Eigen::MatrixXd best_m = map.matrix;
  Eigen::VectorXd best_b = map.bias;

  AdamState adam(d, d);
  EarlyStopping stopper(cfg.patience, cfg.min_improvement);
  Rng rng(cfg.seed);
  const auto n = static_cast<std::size_t>(xf.rows());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Eigen::MatrixXd gm;
  Eigen::VectorXd gb;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double weighted_loss = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, n - start);
      std::span<const std::size_t> idx(order.data() + start, len);
      const double loss =
          mean_squared_error(map.matrix, map.bias, gather_rows(xf, idx), gather_rows(xo, idx), &gm, &gb);
      check_finite_loss(loss, epoch);
      weighted_loss += loss * static_cast<double>(len);
      adam.update(map.matrix, map.bias, gm, gb, cfg.learning_rate);
    }
    const double val_loss = has_val ? mean_squared_error(map.matrix, map.bias, vf, vo)
                                    : mean_squared_error(map.matrix, map.bias, xf, xo);
    map.trace.train_loss.push_back(weighted_loss / static_cast<double>(n));
    map.trace.val_loss.push_back(val_loss);
    map.trace.epochs_run = epoch + 1;
    if (stopper.observe(epoch, val_loss)) {
      best_m = map.matrix;
      best_b = map.bias;
    } else if (stopper.should_stop(epoch)) {
      break;
    }
  }
  map.trace.best_epoch = stopper.best_epoch();
  map.matrix = std::move(best_m);
  map.bias = std::move(best_b);
  return map;
}

}  // namespace

LinearMap train_restoration_map(const Eigen::MatrixXd& train_filtered, const Eigen::MatrixXd& train_original,
                                const Eigen::MatrixXd& val_filtered, const Eigen::MatrixXd& val_original,
                                const TrainConfig& cfg) {
  cfg.validate();
  validate_pairs(train_filtered, train_original);
  if (val_filtered.rows() > 0) {
    validate_pairs(val_filtered, val_original);
    if (val_filtered.cols() != train_filtered.cols()) {
      throw Error(ErrorKind::DimMismatch, "train and validation dims differ");
    }
  }
  LinearMap map = cfg.map_optimizer == MapOptimizer::Accelerated
                      ? train_accelerated(train_filtered, train_original, val_filtered, val_original, cfg)
                      : train_adam(train_filtered, train_original, val_filtered, val_original, cfg);
  map.train_mse = mean_squared_error(map.matrix, map.bias, train_filtered, train_original);
  return map;
}

LinearMap closed_form_map(const Eigen::MatrixXd& filtered, const Eigen::MatrixXd& original, double ridge) {
  validate_pairs(filtered, original);
  const Eigen::Index n = filtered.rows();
  const Eigen::Index d = filtered.cols();
  Eigen::MatrixXd z(n, d + 1);
  z.leftCols(d) = filtered;
  z.col(d).setOnes();
  Eigen::MatrixXd gram = z.transpose() * z;
  gram.diagonal().array() += ridge;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  const Eigen::VectorXd pivots = ldlt.vectorD();
  const double tol = std::numeric_limits<double>::epsilon() * static_cast<double>(d + 1) *
                     std::max(1.0, pivots.cwiseAbs().maxCoeff());
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || pivots.minCoeff() <= tol) {
    throw Error(ErrorKind::SingularSystem, "normal equations are not positive definite");
  }
  const Eigen::MatrixXd wt = ldlt.solve(z.transpose() * original);  // (D+1) x D
  if (!wt.allFinite()) throw Error(ErrorKind::SingularSystem, "normal-equation solve produced non-finite values");
  LinearMap map = to_map(wt.transpose());
  map.train_mse = mean_squared_error(map.matrix, map.bias, filtered, original);
  return map;
}

EmbeddingStore apply_mitigation(const EmbeddingStore& store, const FilterClassifier& classifier,
                                const std::map<std::string, LinearMap>& maps, MitigationRouting routing) {
  EmbeddingStore out(store.dim());
  for (const auto& [key, vec] : store.entries()) {
    const std::string label =
        routing == MitigationRouting::ClassifierGated ? classifier.classify(vec) : key.variant.tag();
    if (label == "orig") {
      out.insert(key, vec);
      continue;
    }
    auto it = maps.find(label);
    if (it == maps.end()) {
      throw Error(ErrorKind::MissingMap, "no restoration map for class " + label + " (entry " +
                                             key.to_string() + ")");
    }
    out.insert(key, it->second.apply(vec));
  }
  return out;
}

// ---- model files ----

void save_linear_map(const LinearMap& map, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  const Eigen::Index d = map.matrix.rows();
  binary::write_magic(out, "LMAP1");
  binary::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (Eigen::Index r = 0; r < d; ++r) {
    for (Eigen::Index c = 0; c < d; ++c) binary::write_f32(out, static_cast<float>(map.matrix(r, c)));
  }
  for (Eigen::Index r = 0; r < d; ++r) binary::write_f32(out, static_cast<float>(map.bias(r)));
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

LinearMap load_linear_map(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::MissingInput, "cannot open map " + path.string());
  binary::expect_magic(in, "LMAP1");
  const auto d = static_cast<Eigen::Index>(binary::read_le<std::uint32_t>(in, "LMAP1 dim"));
  LinearMap map;
  map.matrix.resize(d, d);
  map.bias.resize(d);
  for (Eigen::Index r = 0; r < d; ++r) {
    for (Eigen::Index c = 0; c < d; ++c) map.matrix(r, c) = binary::read_f32(in, "LMAP1 matrix");
  }
  for (Eigen::Index r = 0; r < d; ++r) map.bias(r) = binary::read_f32(in, "LMAP1 bias");
  if (!map.matrix.allFinite() || !map.bias.allFinite()) {
    throw Error(ErrorKind::NonFiniteValue, path.string() + " holds non-finite parameters");
  }
  return map;
}

void save_classifier(const FilterClassifier& classifier, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  const Eigen::Index k = classifier.weights.rows();
  const Eigen::Index d = classifier.weights.cols();
  binary::write_magic(out, "LCLS1");
  binary::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(k));
  binary::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (const auto& label : classifier.classes) binary::write_short_string(out, label);
  for (Eigen::Index r = 0; r < k; ++r) {
    for (Eigen::Index c = 0; c < d; ++c) binary::write_f32(out, static_cast<float>(classifier.weights(r, c)));
  }
  for (Eigen::Index r = 0; r < k; ++r) binary::write_f32(out, static_cast<float>(classifier.bias(r)));
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

FilterClassifier load_classifier(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::MissingInput, "cannot open classifier " + path.string());
  binary::expect_magic(in, "LCLS1");
  const auto k = static_cast<Eigen::Index>(binary::read_le<std::uint32_t>(in, "LCLS1 classes"));
  const auto d = static_cast<Eigen::Index>(binary::read_le<std::uint32_t>(in, "LCLS1 dim"));
  FilterClassifier c;
  for (Eigen::Index i = 0; i < k; ++i) c.classes.push_back(binary::read_short_string(in, "LCLS1 label"));
  c.weights.resize(k, d);
  c.bias.resize(k);
  for (Eigen::Index r = 0; r < k; ++r) {
    for (Eigen::Index col = 0; col < d; ++col) c.weights(r, col) = binary::read_f32(in, "LCLS1 weights");
  }
  for (Eigen::Index r = 0; r < k; ++r) c.bias(r) = binary::read_f32(in, "LCLS1 bias");
  return c;
}

// ---- experiment ----

Eigen::MatrixXd gather(const DatasetManifest& manifest, const EmbeddingStore& store,
                       std::span<const std::string> subjects, const Variant& variant) {
  const std::set<std::string_view> wanted(subjects.begin(), subjects.end());
  std::vector<const std::vector<float>*> rows;
  for (const auto& r : manifest.records()) {
    if (wanted.count(r.subject_id)) rows.push_back(&store.at({r.image_id, variant}));
  }
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(store.dim()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < store.dim(); ++j) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (*rows[i])[j];
    }
  }
  return m;
}

namespace {

LabeledEmbeddings labeled_set(const DatasetManifest& manifest, const EmbeddingStore& store,
                              std::span<const std::string> subjects, std::span<const Variant> classes) {
  std::vector<Eigen::MatrixXd> blocks;
  Eigen::Index rows = 0;
  for (const auto& v : classes) {
    blocks.push_back(gather(manifest, store, subjects, v));
    rows += blocks.back().rows();
  }
  LabeledEmbeddings out;
  out.features.resize(rows, static_cast<Eigen::Index>(store.dim()));
  Eigen::Index at = 0;
  for (std::size_t c = 0; c < blocks.size(); ++c) {
    out.features.middleRows(at, blocks[c].rows()) = blocks[c];
    out.labels.insert(out.labels.end(), static_cast<std::size_t>(blocks[c].rows()), static_cast<int>(c));
    at += blocks[c].rows();
  }
  return out;
}

EmbeddingStore subset_store(const EmbeddingStore& store, const DatasetManifest& manifest,
                            std::span<const Variant> variants) {
  EmbeddingStore out(store.dim());
  for (const auto& r : manifest.records()) {
    for (const auto& v : variants) {
      EmbeddingKey key{r.image_id, v};
      out.insert(key, store.at(key));
    }
  }
  return out;
}

}  // namespace

MitigationReport run_mitigation(const DatasetManifest& manifest, const EmbeddingStore& store,
                                const MitigationOptions& opts) {
  if (opts.filters.empty()) throw Error(ErrorKind::Validation, "mitigation needs at least one filter");
  if (opts.splits == 0) throw Error(ErrorKind::Validation, "mitigation needs at least one split");
  opts.train.validate();

  std::vector<Variant> variants{Variant::original()};
  std::vector<std::string> class_tags{"orig"};
  for (const auto& f : opts.filters) {
    variants.push_back(Variant::filtered(f));
    class_tags.push_back(variants.back().tag());
  }

  MitigationReport report;
  report.fmr_targets = opts.fmr_targets;
  for (std::size_t s = 0; s < opts.splits; ++s) {
    const std::uint64_t split_seed = derive_seed(opts.seed, s);
    const SplitSpec split = make_splits(manifest, split_seed);

    TrainConfig cfg = opts.train;
    cfg.seed = split_seed;
    const auto train_set = labeled_set(manifest, store, split.train, variants);
    const auto val_set = labeled_set(manifest, store, split.val, variants);
    const auto test_set = labeled_set(manifest, store, split.test, variants);
    TrainedSplit models;
    models.classifier = train_filter_classifier(train_set, val_set, class_tags, cfg);

    SplitOutcome outcome;
    outcome.seed = split_seed;
    outcome.detection_accuracy = accuracy(models.classifier, test_set);

    const auto orig_train = gather(manifest, store, split.train, Variant::original());
    const auto orig_val = gather(manifest, store, split.val, Variant::original());
    std::vector<LinearMap> maps(opts.filters.size());
    std::vector<std::exception_ptr> errors(opts.filters.size());
    const auto nf = static_cast<std::int64_t>(opts.filters.size());
#pragma omp parallel for schedule(dynamic, 1)
    for (std::int64_t f = 0; f < nf; ++f) {
      const auto idx = static_cast<std::size_t>(f);
      try {
        TrainConfig map_cfg = cfg;
        map_cfg.seed = derive_seed(split_seed, idx + 1);
        maps[idx] = train_restoration_map(gather(manifest, store, split.train, variants[idx + 1]), orig_train,
                                          gather(manifest, store, split.val, variants[idx + 1]), orig_val,
                                          map_cfg);
        maps[idx].filter_id = opts.filters[idx];
      } catch (...) {
        errors[idx] = std::current_exception();
      }
    }
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    for (std::size_t f = 0; f < maps.size(); ++f) models.maps.emplace(class_tags[f + 1], std::move(maps[f]));

    const auto test_manifest = manifest.restrict_to(split.test);
    const auto test_store = subset_store(store, test_manifest, variants);
    const auto mitigated = apply_mitigation(test_store, models.classifier, models.maps, opts.routing);
    for (std::size_t f = 0; f < opts.filters.size(); ++f) {
      const auto protocol = build_protocol(test_manifest, ProtocolMode::filt_vs_orig(opts.filters[f]));
      const auto pre = score_protocol(protocol, test_store, opts.threads);
      const auto post = score_protocol(protocol, mitigated, opts.threads);
      FilterOutcome fo;
      fo.filter_id = opts.filters[f];
      fo.d_prime_pre = d_prime(pre);
      fo.d_prime_mapping = d_prime(post);
      for (double target : opts.fmr_targets) {
        fo.fnmr_pre.push_back(fnmr_at(pre.genuine, fmr_threshold(pre.impostor, target).threshold));
        fo.fnmr_mapping.push_back(fnmr_at(post.genuine, fmr_threshold(post.impostor, target).threshold));
      }
      const auto& trace = models.maps.at(class_tags[f + 1]).trace;
      fo.map_val_mse = trace.val_loss.empty() ? 0.0 : trace.val_loss[trace.best_epoch];
      outcome.filters.push_back(std::move(fo));
    }
    report.splits.push_back(std::move(outcome));
    if (opts.keep_models) report.models.push_back(std::move(models));
  }
  return report;
}

namespace {

nlohmann::json mean_std(const std::vector<double>& values) {
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  const double std = values.size() > 1 ? std::sqrt(sq / static_cast<double>(values.size() - 1)) : 0.0;
  return {{"mean", mean}, {"std", std}};
}

}  // namespace

nlohmann::json to_json(const MitigationReport& report) {
  nlohmann::json j;
  j["fmr_targets"] = report.fmr_targets;
  const std::size_t nt = report.fmr_targets.size();

  nlohmann::json splits = nlohmann::json::array();
  std::vector<double> detection;
  std::map<std::string, std::vector<const FilterOutcome*>> by_filter;
  for (const auto& s : report.splits) {
    detection.push_back(s.detection_accuracy);
    nlohmann::json sj;
    sj["seed"] = s.seed;
    sj["detection_accuracy"] = s.detection_accuracy;
    nlohmann::json fj = nlohmann::json::object();
    for (const auto& f : s.filters) {
      by_filter[f.filter_id].push_back(&f);
      nlohmann::json one;
      one["d_prime_pre"] = f.d_prime_pre;
      one["d_prime_mapping"] = f.d_prime_mapping;
      one["map_val_mse"] = f.map_val_mse;
      for (std::size_t t = 0; t < nt; ++t) {
        const auto label = fmr_label(report.fmr_targets[t]);
        one["fnmr_pre"][label] = f.fnmr_pre[t];
        one["fnmr_mapping"][label] = f.fnmr_mapping[t];
      }
      fj[f.filter_id] = one;
    }
    sj["filters"] = fj;
    splits.push_back(sj);
  }
  j["splits"] = splits;

  nlohmann::json summary;
  summary["detection_accuracy"] = mean_std(detection);
  nlohmann::json per_filter = nlohmann::json::object();
  for (const auto& [fid, outcomes] : by_filter) {
    nlohmann::json one;
    std::vector<double> dp_pre;
    std::vector<double> dp_map;
    for (const auto* o : outcomes) {
      dp_pre.push_back(o->d_prime_pre);
      dp_map.push_back(o->d_prime_mapping);
    }
    one["d_prime_pre"] = mean_std(dp_pre);
    one["d_prime_mapping"] = mean_std(dp_map);
    for (std::size_t t = 0; t < nt; ++t) {
      std::vector<double> pre;
      std::vector<double> map;
      for (const auto* o : outcomes) {
        pre.push_back(o->fnmr_pre[t]);
        map.push_back(o->fnmr_mapping[t]);
      }
      const auto label = fmr_label(report.fmr_targets[t]);
      one["fnmr_pre"][label] = mean_std(pre);
      one["fnmr_mapping"][label] = mean_std(map);
    }
    per_filter[fid] = one;
  }
  summary["filters"] = per_filter;

  // Per split, average over filters; then mean +/- std across splits.
  nlohmann::json all;
  for (std::size_t t = 0; t < nt; ++t) {
    std::vector<double> pre;
    std::vector<double> map;
    for (const auto& s : report.splits) {
      double sp = 0.0;
      double sm = 0.0;
      for (const auto& f : s.filters) {
        sp += f.fnmr_pre[t];
        sm += f.fnmr_mapping[t];
      }
      pre.push_back(sp / static_cast<double>(s.filters.size()));
      map.push_back(sm / static_cast<double>(s.filters.size()));
    }
    const auto label = fmr_label(report.fmr_targets[t]);
    all["fnmr_pre"][label] = mean_std(pre);
    all["fnmr_mapping"][label] = mean_std(map);
  }
  summary["all_filters"] = all;
  j["summary"] = summary;
  return j;
}

}  // namespace filterbench
