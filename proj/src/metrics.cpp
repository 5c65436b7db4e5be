#include "filterbench/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "filterbench/error.hpp"

namespace filterbench {

namespace {

template <typename T>
double neumaier(std::span<const T> values) {
  double sum = 0.0;
  double comp = 0.0;
  for (T raw : values) {
    const double v = raw;
    const double t = sum + v;
    if (std::abs(sum) >= std::abs(v)) {
      comp += (sum - t) + v;
    } else {
      comp += (v - t) + sum;
    }
    sum = t;
  }
  return sum + comp;
}

double population_variance(std::span<const float> values, double mean) {
  std::vector<double> sq(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double d = static_cast<double>(values[i]) - mean;
    sq[i] = d * d;
  }
  return neumaier<double>(sq) / static_cast<double>(values.size());
}

}  // namespace

double compensated_sum(std::span<const float> values) { return neumaier(values); }
double compensated_sum(std::span<const double> values) { return neumaier(values); }

DistributionStats describe(std::span<const float> scores) {
  DistributionStats s;
  s.count = scores.size();
  if (scores.empty()) return s;
  s.mean = compensated_sum(scores) / static_cast<double>(scores.size());
  s.std = std::sqrt(population_variance(scores, s.mean));
  return s;
}

double d_prime(std::span<const float> genuine, std::span<const float> impostor) {
  if (genuine.size() < 2 || impostor.size() < 2) {
    throw Error(ErrorKind::InsufficientData, "d-prime needs at least 2 genuine and 2 impostor scores (got " +
                                                 std::to_string(genuine.size()) + ", " +
                                                 std::to_string(impostor.size()) + ")");
  }
  const double mg = compensated_sum(genuine) / static_cast<double>(genuine.size());
  const double mi = compensated_sum(impostor) / static_cast<double>(impostor.size());
  const double vg = population_variance(genuine, mg);
  const double vi = population_variance(impostor, mi);
  const double diff = mg - mi;
  if (vg + vi == 0.0) {
    if (diff == 0.0) return 0.0;
    return std::copysign(std::numeric_limits<double>::infinity(), diff);
  }
  return diff / std::sqrt((vg + vi) / 2.0);
}

double d_prime(const ScoreSet& scores) { return d_prime(scores.genuine, scores.impostor); }

FmrThreshold fmr_threshold(std::span<const float> impostor, double target_fmr) {
  if (impostor.empty()) throw Error(ErrorKind::EmptyScores, "fmr_threshold of no impostor scores");
  if (!(target_fmr > 0.0 && target_fmr < 1.0)) {
    throw Error(ErrorKind::OutOfRange, "target FMR must lie in (0, 1)");
  }
  const std::size_t n = impostor.size();
  const double dn = static_cast<double>(n);

  // k = largest admitted count with k / n <= target.
  auto k = static_cast<std::size_t>(std::floor(target_fmr * dn));
  while (k + 1 <= n && static_cast<double>(k + 1) / dn <= target_fmr) ++k;
  while (k > 0 && static_cast<double>(k) / dn > target_fmr) --k;

  // s_k: the (k+1)-th largest score. Every admitted set must exclude it, so
  // the threshold is the smallest score value strictly above it.
  std::vector<float> sorted(impostor.begin(), impostor.end());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end(),
                   std::greater<float>());
  const float kth = sorted[k];
  float threshold = std::numeric_limits<float>::infinity();
  for (float v : impostor) {
    if (v > kth && v < threshold) threshold = v;
  }
  if (std::isinf(threshold)) threshold = std::nextafter(kth, std::numeric_limits<float>::infinity());

  FmrThreshold out;
  out.threshold = threshold;
  out.admitted = static_cast<std::size_t>(
      std::count_if(impostor.begin(), impostor.end(), [&](float v) { return v >= threshold; }));
  out.fmr = static_cast<double>(out.admitted) / dn;
  out.extrapolated = dn * target_fmr < 1.0;
  return out;
}

double fnmr_at(std::span<const float> genuine, double threshold) {
  if (genuine.empty()) throw Error(ErrorKind::EmptyScores, "fnmr_at of no genuine scores");
  const auto rejected = std::count_if(genuine.begin(), genuine.end(),
                                      [&](float v) { return static_cast<double>(v) < threshold; });
  return static_cast<double>(rejected) / static_cast<double>(genuine.size());
}

ScoreHistogram score_histogram(const ScoreSet& scores, std::size_t bins) {
  if (bins == 0) throw Error(ErrorKind::Validation, "histogram needs at least one bin");
  ScoreHistogram h;
  h.edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) {
    h.edges[i] = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(bins);
  }
  auto fill = [&](std::span<const float> values, std::vector<std::uint64_t>& counts) {
    counts.assign(bins, 0);
    for (float v : values) {
      const double pos = (static_cast<double>(v) + 1.0) / 2.0 * static_cast<double>(bins);
      auto idx = static_cast<std::int64_t>(std::floor(pos));
      idx = std::clamp<std::int64_t>(idx, 0, static_cast<std::int64_t>(bins) - 1);
      ++counts[static_cast<std::size_t>(idx)];
    }
  };
  fill(scores.genuine, h.genuine);
  fill(scores.impostor, h.impostor);
  return h;
}

MetricsReport compute_metrics(const ScoreSet& scores, std::span<const double> fmr_targets,
                              std::size_t hist_bins) {
  MetricsReport r;
  r.mode = scores.mode;
  if (const auto colon = scores.mode.find(':'); colon != std::string::npos) {
    r.filter_id = scores.mode.substr(colon + 1);
  }
  r.d_prime = d_prime(scores);
  r.genuine = describe(scores.genuine);
  r.impostor = describe(scores.impostor);
  for (double target : fmr_targets) {
    FnmrPoint p;
    p.target_fmr = target;
    p.threshold = fmr_threshold(scores.impostor, target);
    p.fnmr = fnmr_at(scores.genuine, p.threshold.threshold);
    r.fnmr.push_back(p);
  }
  if (hist_bins > 0) r.histogram = score_histogram(scores, hist_bins);
  return r;
}

std::string fmr_label(double target) {
  const int exponent = static_cast<int>(std::floor(std::log10(target)));
  const double mantissa = target / std::pow(10.0, exponent);
  std::ostringstream os;
  if (std::abs(mantissa - std::round(mantissa)) < 1e-9) {
    os << static_cast<long long>(std::llround(mantissa)) << "e" << exponent;
  } else {
    os.precision(6);
    os << target;
  }
  return os.str();
}

namespace {

nlohmann::json d_prime_json(double d) {
  if (std::isinf(d)) return d > 0 ? "separated" : "-separated";
  return d;
}

}  // namespace

nlohmann::json to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["mode"] = report.mode;
  j["filter_id"] = report.filter_id;
  j["d_prime"] = d_prime_json(report.d_prime);
  j["genuine"] = {{"mean", report.genuine.mean}, {"std", report.genuine.std}, {"count", report.genuine.count}};
  j["impostor"] = {{"mean", report.impostor.mean}, {"std", report.impostor.std}, {"count", report.impostor.count}};
  nlohmann::json fnmr = nlohmann::json::object();
  for (const auto& p : report.fnmr) {
    fnmr[fmr_label(p.target_fmr)] = {{"threshold", p.threshold.threshold},
                                     {"fnmr", p.fnmr},
                                     {"fmr", p.threshold.fmr},
                                     {"admitted", p.threshold.admitted},
                                     {"extrapolated", p.threshold.extrapolated}};
  }
  j["fnmr"] = fnmr;
  return j;
}

void save_histogram_csv(const ScoreHistogram& hist, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << "bin_left,bin_right,genuine_count,impostor_count\n";
  out.precision(17);
  for (std::size_t i = 0; i + 1 < hist.edges.size(); ++i) {
    out << hist.edges[i] << ',' << hist.edges[i + 1] << ',' << hist.genuine[i] << ','
        << hist.impostor[i] << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

std::string_view to_string(Group g) noexcept {
  switch (g) {
    case Group::All: return "all";
    case Group::Female: return "female";
    case Group::Male: return "male";
  }
  return "all";
}

std::vector<BinSummary> summarize_bins(std::span<const FilterDPrime> per_filter) {
  std::map<std::pair<int, int>, std::vector<double>> groups;
  for (const auto& f : per_filter) {
    groups[{f.bin.value, static_cast<int>(f.group)}].push_back(f.d_prime);
  }
  std::vector<BinSummary> out;
  for (const auto& [key, values] : groups) {
    BinSummary s;
    s.bin = BinId{key.first};
    s.group = static_cast<Group>(key.second);
    s.filters = values.size();
    s.mean = compensated_sum(std::span<const double>(values)) / static_cast<double>(values.size());
    if (values.size() > 1) {
      std::vector<double> sq;
      for (double v : values) sq.push_back((v - s.mean) * (v - s.mean));
      s.std = std::sqrt(compensated_sum(std::span<const double>(sq)) /
                        static_cast<double>(values.size() - 1));
    }
    out.push_back(s);
  }
  return out;
}

nlohmann::json to_json(const BinSummary& summary) {
  return {{"bin", summary.bin.value},
          {"group", std::string(to_string(summary.group))},
          {"mean_d_prime", summary.mean},
          {"std_d_prime", summary.std},
          {"filters", summary.filters}};
}

}  // namespace filterbench
