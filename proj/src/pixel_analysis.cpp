#include "filterbench/pixel_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>

#include "filterbench/error.hpp"
#include "filterbench/rng.hpp"
#include "text_util.hpp"

namespace filterbench {

namespace {

// round(sum / 3) for a non-negative integer sum
constexpr std::uint8_t round_third(unsigned sum) { return static_cast<std::uint8_t>((sum + 1) / 3); }

}  // namespace

GrayImage to_grayscale(const RgbImage& img) {
  validate(img);
  GrayImage out(img.width, img.height);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const auto* p = &img.data[3 * i];
    out.pixels[i] = round_third(unsigned{p[0]} + p[1] + p[2]);
  }
  return out;
}

GrayImage abs_diff(const RgbImage& original, const RgbImage& filtered) {
  validate(original);
  validate(filtered);
  if (original.width != filtered.width || original.height != filtered.height) {
    throw Error(ErrorKind::DimMismatch,
                "original " + std::to_string(original.width) + "x" + std::to_string(original.height) +
                    " vs filtered " + std::to_string(filtered.width) + "x" +
                    std::to_string(filtered.height));
  }
  GrayImage out(original.width, original.height);
  for (std::size_t i = 0; i < original.size(); ++i) {
    unsigned sum = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      const int d = int{original.data[3 * i + c]} - int{filtered.data[3 * i + c]};
      sum += static_cast<unsigned>(std::abs(d));
    }
    out.pixels[i] = round_third(sum);
  }
  return out;
}

GrayImage mean_diff(std::span<const GrayImage> diffs) {
  if (diffs.empty()) throw Error(ErrorKind::EmptyInput, "mean_diff of no images");
  const auto w = diffs.front().width;
  const auto h = diffs.front().height;
  for (const auto& d : diffs) {
    validate(d);
    if (d.width != w || d.height != h) {
      throw Error(ErrorKind::DimMismatch, "difference images have different sizes");
    }
  }
  GrayImage out(w, h);
  const auto n = static_cast<std::uint64_t>(diffs.size());
  const auto count = static_cast<std::int64_t>(w * h);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < count; ++i) {
    std::uint64_t sum = 0;
    for (const auto& d : diffs) sum += d.pixels[static_cast<std::size_t>(i)];
    out.pixels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>((sum + n / 2) / n);
  }
  return out;
}

Histogram256 histogram(const GrayImage& img) {
  validate(img);
  Histogram256 hist{};
  for (auto v : img.pixels) ++hist[v];
  return hist;
}

std::uint8_t otsu_threshold(const Histogram256& hist) {
  std::uint64_t total = 0;
  std::uint64_t weighted = 0;
  int distinct = 0;
  int only_level = 0;
  for (int level = 0; level < 256; ++level) {
    total += hist[level];
    weighted += hist[level] * static_cast<std::uint64_t>(level);
    if (hist[level] > 0) {
      ++distinct;
      only_level = level;
    }
  }
  if (total == 0) throw Error(ErrorKind::EmptyInput, "otsu_threshold of an empty histogram");
  if (distinct == 1) return static_cast<std::uint8_t>(only_level);

  // With n0, n1 class counts and s0, s1 class sums, the between-class variance
  // w0*w1*(mu0-mu1)^2 equals (s0*n1 - s1*n0)^2 / (n0*n1*n^2). The numerator's
  // inner difference is formed exactly in 128-bit integers.
  std::uint64_t n0 = 0;
  std::uint64_t s0 = 0;
  long double best = -1.0L;
  int best_t = 0;
  for (int t = 0; t < 256; ++t) {
    n0 += hist[t];
    s0 += hist[t] * static_cast<std::uint64_t>(t);
    const std::uint64_t n1 = total - n0;
    if (n0 == 0 || n1 == 0) continue;
    const std::uint64_t s1 = weighted - s0;
    const __int128 diff = static_cast<__int128>(s0) * n1 - static_cast<__int128>(s1) * n0;
    const long double d = static_cast<long double>(diff);
    const long double score = d * d / (static_cast<long double>(n0) * static_cast<long double>(n1));
    if (score > best) {
      best = score;
      best_t = t;
    }
  }
  return static_cast<std::uint8_t>(best_t);
}

std::uint8_t otsu_threshold(const GrayImage& img) {
  if (img.size() == 0) throw Error(ErrorKind::EmptyInput, "otsu_threshold of an empty image");
  return otsu_threshold(histogram(img));
}

double manipulated_ratio(const GrayImage& img, std::uint8_t t) {
  validate(img);
  if (img.size() == 0) return 0.0;
  std::size_t above = 0;
  for (auto v : img.pixels) above += v > t ? 1 : 0;
  return static_cast<double>(above) / static_cast<double>(img.size());
}

GrayImage binarize(const GrayImage& img, std::uint8_t t) {
  validate(img);
  GrayImage out(img.width, img.height);
  for (std::size_t i = 0; i < img.size(); ++i) out.pixels[i] = img.pixels[i] > t ? 255 : 0;
  return out;
}

BinId assign_bin(double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw Error(ErrorKind::OutOfRange, "ratio " + std::to_string(ratio) + " outside [0,1]");
  }
  // Boundaries compared against the literal decimal values so that 0.2, 0.4,
  // ... land in the upper bin.
  constexpr std::array<double, 4> kLower = {0.2, 0.4, 0.6, 0.8};
  int bin = 1;
  for (double b : kLower) {
    if (ratio >= b) ++bin;
  }
  return BinId{bin};
}

namespace {

// Otsu has no split on a single-level image. For a difference image a single
// nonzero level means every pixel moved, so binarize at 0 instead.
std::uint8_t diff_threshold(const GrayImage& diff) {
  const auto [lo, hi] = std::minmax_element(diff.pixels.begin(), diff.pixels.end());
  if (*lo == *hi && *lo > 0) return 0;
  return otsu_threshold(diff);
}

}  // namespace

DiffStats analyze_filter(std::span<const ImagePair> pairs, const std::string& filter_id,
                         OtsuMode mode) {
  if (pairs.empty()) throw Error(ErrorKind::EmptyInput, "filter '" + filter_id + "' has no image pairs");
  std::vector<GrayImage> diffs;
  diffs.reserve(pairs.size());
  for (const auto& p : pairs) diffs.push_back(abs_diff(p.original, p.filtered));

  DiffStats stats;
  stats.filter_id = filter_id;
  stats.mode = mode;
  stats.mean_diff = mean_diff(diffs);
  if (mode == OtsuMode::MeanImage) {
    stats.otsu_threshold = diff_threshold(stats.mean_diff);
    stats.manipulated_ratio = manipulated_ratio(stats.mean_diff, stats.otsu_threshold);
  } else {
    double ratio_sum = 0.0;
    std::uint64_t threshold_sum = 0;
    for (const auto& d : diffs) {
      const auto t = diff_threshold(d);
      threshold_sum += t;
      ratio_sum += manipulated_ratio(d, t);
    }
    const auto n = diffs.size();
    stats.otsu_threshold = static_cast<std::uint8_t>((threshold_sum + n / 2) / n);
    stats.manipulated_ratio = ratio_sum / static_cast<double>(n);
  }
  stats.bin = assign_bin(stats.manipulated_ratio);
  return stats;
}

BinSizes quota_counts(const BinSizes& sizes) {
  std::size_t quota = std::numeric_limits<std::size_t>::max();
  for (auto s : sizes) {
    if (s >= 2) quota = std::min(quota, s);
  }
  if (quota == std::numeric_limits<std::size_t>::max()) {
    throw Error(ErrorKind::NoEligibleBin, "every bin holds at most one filter");
  }
  BinSizes counts{};
  for (std::size_t b = 0; b < sizes.size(); ++b) {
    counts[b] = sizes[b] >= 2 ? std::min(quota, sizes[b]) : 0;
  }
  return counts;
}

std::size_t SelectionResult::total() const noexcept {
  std::size_t n = 0;
  for (const auto& c : chosen) n += c.size();
  return n;
}

SelectionResult select_from_bins(std::array<std::vector<std::string>, BinId::kCount> bins,
                                 std::uint64_t seed) {
  BinSizes sizes{};
  for (std::size_t b = 0; b < bins.size(); ++b) sizes[b] = bins[b].size();
  const auto counts = quota_counts(sizes);

  SelectionResult result;
  result.rng_seed = seed;
  result.quota = *std::max_element(counts.begin(), counts.end());
  Rng rng(seed);
  for (std::size_t b = 0; b < bins.size(); ++b) {
    if (sizes[b] <= 1) {
      result.excluded_bins.push_back(BinId{static_cast<int>(b) + 1});
      continue;
    }
    auto& members = bins[b];
    std::sort(members.begin(), members.end());
    if (std::adjacent_find(members.begin(), members.end()) != members.end()) {
      throw Error(ErrorKind::DuplicateKey, "filter listed twice in bin " + std::to_string(b + 1));
    }
    rng.shuffle(std::span<std::string>(members));
    members.resize(counts[b]);
    std::sort(members.begin(), members.end());
    result.chosen[b] = std::move(members);
  }
  return result;
}

SelectionResult select_filters(std::span<const DiffStats> stats, std::uint64_t seed) {
  std::array<std::vector<std::string>, BinId::kCount> bins;
  for (const auto& s : stats) bins[s.bin.index()].push_back(s.filter_id);
  return select_from_bins(std::move(bins), seed);
}

std::map<std::string, std::vector<PairPaths>> load_pairs_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::MissingInput, "cannot open pairs manifest " + path.string());
  const auto base = path.parent_path();
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::Parse, "empty pairs manifest");
  detail::strip_cr(line);
  if (line != "filter_id,original_path,filtered_path") {
    throw Error(ErrorKind::Parse, "pairs manifest header must be filter_id,original_path,filtered_path");
  }
  std::map<std::string, std::vector<PairPaths>> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 3 || f[0].empty()) {
      throw Error(ErrorKind::Parse, "pairs manifest line " + std::to_string(line_no) + " malformed");
    }
    auto resolve = [&](std::string_view p) {
      std::filesystem::path fp(p);
      return fp.is_absolute() ? fp : base / fp;
    };
    out[std::string(f[0])].push_back({resolve(f[1]), resolve(f[2])});
  }
  return out;
}

DiffStats analyze_filter_files(std::span<const PairPaths> pairs, const std::string& filter_id,
                               const AnalysisOptions& opts) {
  std::vector<ImagePair> images;
  images.reserve(pairs.size());
  for (const auto& p : pairs) images.push_back({load_rgb(p.original), load_rgb(p.filtered)});
  if (images.empty()) throw Error(ErrorKind::EmptyInput, "filter '" + filter_id + "' has no pairs");

  const auto w = images.front().original.width;
  const auto h = images.front().original.height;
  const bool uniform = std::all_of(images.begin(), images.end(), [&](const ImagePair& p) {
    return p.original.width == w && p.original.height == h && p.filtered.width == w &&
           p.filtered.height == h;
  });
  if (!uniform) {
    for (auto& p : images) {
      p.original = resize_nearest(p.original, opts.analysis_size, opts.analysis_size);
      p.filtered = resize_nearest(p.filtered, opts.analysis_size, opts.analysis_size);
    }
  }
  return analyze_filter(images, filter_id, opts.mode);
}

std::vector<DiffStats> analyze_filters(const std::map<std::string, std::vector<PairPaths>>& filters,
                                       const AnalysisOptions& opts) {
  std::vector<const std::pair<const std::string, std::vector<PairPaths>>*> items;
  for (const auto& kv : filters) items.push_back(&kv);
  std::vector<DiffStats> out(items.size());
  std::vector<std::exception_ptr> errors(items.size());
  const auto n = static_cast<std::int64_t>(items.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::int64_t i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    try {
      out[idx] = analyze_filter_files(items[idx]->second, items[idx]->first, opts);
    } catch (...) {
      errors[idx] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

}  // namespace filterbench
