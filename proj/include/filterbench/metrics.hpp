#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "filterbench/pixel_analysis.hpp"
#include "filterbench/protocol.hpp"

namespace filterbench {

// Compensated (Neumaier) summation; the result does not depend on how the
// input was produced.
double compensated_sum(std::span<const float> values);
double compensated_sum(std::span<const double> values);

struct DistributionStats {
  double mean = 0.0;
  double std = 0.0;  // population (divide by n)
  std::size_t count = 0;
};

DistributionStats describe(std::span<const float> scores);

// (mean_gen - mean_imp) / sqrt((var_gen + var_imp) / 2) with population
// variances. Both variances zero: 0 when the means agree, otherwise
// +/-infinity ("separated"). Throws InsufficientData below two scores per list.
double d_prime(std::span<const float> genuine, std::span<const float> impostor);
double d_prime(const ScoreSet& scores);

struct FmrThreshold {
  float threshold = 0.0f;
  std::size_t admitted = 0;  // impostor scores >= threshold
  double fmr = 0.0;
  // Fewer than 1/target impostor scores were available.
  bool extrapolated = false;
};

// Smallest candidate threshold t (a score value, or just above the maximum)
// with #(impostor >= t) / n <= target_fmr. Rank-based, no interpolation.
// Throws EmptyScores, OutOfRange for target outside (0, 1).
FmrThreshold fmr_threshold(std::span<const float> impostor, double target_fmr);

// #(genuine < threshold) / n. Throws EmptyScores.
double fnmr_at(std::span<const float> genuine, double threshold);

struct FnmrPoint {
  double target_fmr = 0.0;
  FmrThreshold threshold;
  double fnmr = 0.0;
};

struct ScoreHistogram {
  std::vector<double> edges;  // bins + 1 edges over [-1, 1]
  std::vector<std::uint64_t> genuine;
  std::vector<std::uint64_t> impostor;
};

ScoreHistogram score_histogram(const ScoreSet& scores, std::size_t bins);

struct MetricsReport {
  std::string mode;
  std::string filter_id;
  double d_prime = 0.0;
  DistributionStats genuine;
  DistributionStats impostor;
  std::vector<FnmrPoint> fnmr;
  std::optional<ScoreHistogram> histogram;
};

MetricsReport compute_metrics(const ScoreSet& scores, std::span<const double> fmr_targets,
                              std::size_t hist_bins = 0);

// Compact decimal label for an FMR target: 1e-4 -> "1e-4".
std::string fmr_label(double target);

nlohmann::json to_json(const MetricsReport& report);
void save_histogram_csv(const ScoreHistogram& hist, const std::filesystem::path& path);

enum class Group { All, Female, Male };
std::string_view to_string(Group g) noexcept;

struct FilterDPrime {
  std::string filter_id;
  BinId bin;
  Group group = Group::All;
  double d_prime = 0.0;
};

struct BinSummary {
  BinId bin;
  Group group = Group::All;
  double mean = 0.0;
  double std = 0.0;  // sample std across filters (n - 1); 0 for one filter
  std::size_t filters = 0;
};

// Mean and sample std of d' per (bin, group), ordered by bin then
// all/female/male. Combinations without entries are omitted.
std::vector<BinSummary> summarize_bins(std::span<const FilterDPrime> per_filter);

nlohmann::json to_json(const BinSummary& summary);

}  // namespace filterbench
