#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "filterbench/image.hpp"

namespace filterbench {

// Filter-strength class by manipulated-pixel ratio. Bin k covers
// [0.2(k-1), 0.2k); bin 5 covers [0.8, 1.0].
struct BinId {
  int value = 1;

  static constexpr int kCount = 5;
  std::size_t index() const noexcept { return static_cast<std::size_t>(value - 1); }
  double lower() const noexcept { return (value - 1) / 5.0; }
  double upper() const noexcept { return value / 5.0; }

  auto operator<=>(const BinId&) const = default;
};

using Histogram256 = std::array<std::uint64_t, 256>;

GrayImage to_grayscale(const RgbImage& img);

// round(mean over channels of |orig_c - filt_c|); throws DimMismatch.
GrayImage abs_diff(const RgbImage& original, const RgbImage& filtered);

// Per-pixel rounded mean; throws EmptyInput / DimMismatch.
GrayImage mean_diff(std::span<const GrayImage> diffs);

Histogram256 histogram(const GrayImage& img);

// Level t maximizing the between-class variance of {<= t} vs {> t};
// smallest t on ties. A constant image returns its value.
std::uint8_t otsu_threshold(const Histogram256& hist);
std::uint8_t otsu_threshold(const GrayImage& img);

// Fraction of pixels strictly above t.
double manipulated_ratio(const GrayImage& img, std::uint8_t t);

// 255 where the pixel is above t, else 0.
GrayImage binarize(const GrayImage& img, std::uint8_t t);

// Throws OutOfRange outside [0, 1].
BinId assign_bin(double ratio);

enum class OtsuMode {
  MeanImage,  // one binarization of the per-filter mean difference image
  PerPair,    // binarize each pair's difference, average the ratios
};

struct DiffStats {
  std::string filter_id;
  GrayImage mean_diff;
  std::uint8_t otsu_threshold = 0;
  double manipulated_ratio = 0.0;
  BinId bin;
  OtsuMode mode = OtsuMode::MeanImage;
};

struct ImagePair {
  RgbImage original;
  RgbImage filtered;
};

// abs_diff -> mean_diff -> otsu_threshold -> manipulated_ratio -> assign_bin.
// A difference image holding one nonzero level counts as fully manipulated.
// In PerPair mode the reported threshold is the rounded mean of the
// per-pair thresholds.
DiffStats analyze_filter(std::span<const ImagePair> pairs, const std::string& filter_id,
                         OtsuMode mode = OtsuMode::MeanImage);

using BinSizes = std::array<std::size_t, BinId::kCount>;

// Per-bin selection counts: quota is the size of the smallest bin holding at
// least two filters, and every such bin contributes min(quota, size).
// Bins with 0 or 1 filters contribute nothing. Throws NoEligibleBin.
BinSizes quota_counts(const BinSizes& sizes);

struct SelectionResult {
  std::array<std::vector<std::string>, BinId::kCount> chosen;
  std::size_t quota = 0;
  std::vector<BinId> excluded_bins;
  std::uint64_t rng_seed = 0;

  std::size_t total() const noexcept;
};

// Chooses quota filters per eligible bin uniformly without replacement.
SelectionResult select_from_bins(std::array<std::vector<std::string>, BinId::kCount> bins,
                                 std::uint64_t seed);
SelectionResult select_filters(std::span<const DiffStats> stats, std::uint64_t seed);

// ---- file-level helpers ----

struct PairPaths {
  std::filesystem::path original;
  std::filesystem::path filtered;
};

// CSV `filter_id,original_path,filtered_path`; relative paths are resolved
// against the manifest's directory. Result is keyed (and ordered) by filter.
std::map<std::string, std::vector<PairPaths>> load_pairs_manifest(const std::filesystem::path& path);

struct AnalysisOptions {
  OtsuMode mode = OtsuMode::MeanImage;
  std::size_t analysis_size = 256;
};

// Loads the images of one filter; when any dimensions disagree every image
// is resized (nearest neighbor) to analysis_size x analysis_size.
DiffStats analyze_filter_files(std::span<const PairPaths> pairs, const std::string& filter_id,
                               const AnalysisOptions& opts);

// Runs analyze_filter_files for every filter in parallel; output in key order.
std::vector<DiffStats> analyze_filters(const std::map<std::string, std::vector<PairPaths>>& filters,
                                       const AnalysisOptions& opts);

}  // namespace filterbench
