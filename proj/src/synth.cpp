#include "filterbench/synth.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>

#include "filterbench/error.hpp"
#include "filterbench/rng.hpp"
#include "text_util.hpp"

namespace filterbench {

namespace {

constexpr double kAffineMixScale = 0.3;
constexpr std::uint64_t kSharedDirectionStream = 0xC0FFEEULL;

std::vector<double> gaussian_vector(Rng& rng, std::size_t dim, double scale) {
  std::vector<double> v(dim);
  for (auto& x : v) x = rng.normal() * scale;
  return v;
}

void normalize(std::vector<double>& v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double inv = 1.0 / std::sqrt(sq);
  for (auto& x : v) x *= inv;
}

std::uint8_t clamp_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace

void SyntheticDatasetSpec::validate() const {
  if (subjects == 0 || images_per_subject < 1 || dim == 0) {
    throw Error(ErrorKind::Validation, "synthetic dataset needs subjects, images and dim > 0");
  }
  if (intra_noise < 0.0 || inter_separation < 0.0) {
    throw Error(ErrorKind::Validation, "noise and separation must be non-negative");
  }
}

SyntheticDataset gen_embeddings(const SyntheticDatasetSpec& spec) {
  spec.validate();
  const std::size_t dim = spec.dim;
  const auto images = static_cast<std::size_t>(spec.images_per_subject);

  Rng shared_rng(derive_seed(spec.seed, kSharedDirectionStream));
  auto shared = gaussian_vector(shared_rng, dim, 1.0);
  normalize(shared);

  const int width = std::max(4, static_cast<int>(std::to_string(spec.subjects - 1).size()));
  std::vector<std::string> subject_ids(spec.subjects);
  for (std::size_t s = 0; s < spec.subjects; ++s) {
    std::string digits = std::to_string(s);
    subject_ids[s] = "s" + std::string(static_cast<std::size_t>(width) - std::min<std::size_t>(width, digits.size()), '0') + digits;
  }

  std::vector<std::vector<float>> vectors(spec.subjects * images);
  const auto n = static_cast<std::int64_t>(spec.subjects);
  const double noise_scale = spec.intra_noise / std::sqrt(static_cast<double>(dim));
  const double spread_scale = spec.inter_separation / std::sqrt(static_cast<double>(dim));
#pragma omp parallel for schedule(static)
  for (std::int64_t s = 0; s < n; ++s) {
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(s)));
    auto centroid = gaussian_vector(rng, dim, spread_scale);
    for (std::size_t i = 0; i < dim; ++i) centroid[i] += shared[i];
    normalize(centroid);
    for (std::size_t img = 0; img < images; ++img) {
      // Tangent-space Gaussian at the centroid, then back onto the sphere.
      auto noise = gaussian_vector(rng, dim, noise_scale);
      double along = 0.0;
      for (std::size_t i = 0; i < dim; ++i) along += noise[i] * centroid[i];
      std::vector<double> x(dim);
      for (std::size_t i = 0; i < dim; ++i) x[i] = centroid[i] + noise[i] - along * centroid[i];
      normalize(x);
      auto& out = vectors[static_cast<std::size_t>(s) * images + img];
      out.assign(x.begin(), x.end());
    }
  }

  std::vector<ImageRecord> records;
  EmbeddingStore store(dim);
  for (std::size_t s = 0; s < spec.subjects; ++s) {
    for (std::size_t img = 0; img < images; ++img) {
      ImageRecord r;
      r.subject_id = subject_ids[s];
      r.session = static_cast<int>(img) + 1;
      r.image_id = subject_ids[s] + "_" + std::to_string(r.session);
      r.gender = s % 2 == 0 ? Gender::F : Gender::M;
      store.insert({r.image_id, Variant::original()}, std::move(vectors[s * images + img]));
      records.push_back(std::move(r));
    }
  }
  return {DatasetManifest::from_records(std::move(records), spec.images_per_subject), std::move(store)};
}

SyntheticFilterKind parse_filter_kind(std::string_view text) {
  if (text == "identity") return SyntheticFilterKind::Identity;
  if (text == "affine") return SyntheticFilterKind::AffineEmbedding;
  if (text == "color") return SyntheticFilterKind::ColorShift;
  if (text == "occlusion") return SyntheticFilterKind::OcclusionBox;
  if (text == "noise") return SyntheticFilterKind::Noise;
  throw Error(ErrorKind::Parse, "unknown filter kind '" + std::string(text) +
                                    "' (identity, affine, color, occlusion, noise)");
}

void SyntheticFilterSpec::validate() const {
  if (fraction < 0.0 || fraction > 1.0) throw Error(ErrorKind::Validation, "occlusion fraction outside [0, 1]");
  if (strength < 0.0) throw Error(ErrorKind::Validation, "affine strength must be >= 0");
  if (sigma < 0.0) throw Error(ErrorKind::Validation, "noise sigma must be >= 0");
}

SyntheticFilterSpec parse_filter_spec(std::string_view text, std::uint64_t seed) {
  SyntheticFilterSpec spec;
  spec.seed = seed;
  const auto colon = text.find(':');
  spec.kind = parse_filter_kind(text.substr(0, colon));
  const std::string_view arg = colon == std::string_view::npos ? std::string_view{} : text.substr(colon + 1);
  auto need_arg = [&] {
    if (arg.empty()) throw Error(ErrorKind::Parse, "filter '" + std::string(text) + "' needs a parameter");
  };
  switch (spec.kind) {
    case SyntheticFilterKind::Identity:
      break;
    case SyntheticFilterKind::AffineEmbedding:
      if (!arg.empty()) spec.strength = detail::parse_double(arg);
      break;
    case SyntheticFilterKind::ColorShift: {
      need_arg();
      const auto parts = detail::split(arg, ',');
      if (parts.size() != 3) throw Error(ErrorKind::Parse, "color shift needs three deltas");
      for (std::size_t c = 0; c < 3; ++c) spec.delta_rgb[c] = detail::parse_int(parts[c]);
      break;
    }
    case SyntheticFilterKind::OcclusionBox:
      need_arg();
      spec.fraction = detail::parse_double(arg);
      break;
    case SyntheticFilterKind::Noise:
      need_arg();
      spec.sigma = detail::parse_double(arg);
      break;
  }
  spec.validate();
  return spec;
}

AffineTransform affine_transform(std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  const auto d = static_cast<Eigen::Index>(dim);
  const double scale = kAffineMixScale / std::sqrt(static_cast<double>(dim));
  AffineTransform t;
  t.matrix = Eigen::MatrixXd::Identity(d, d);
  for (Eigen::Index r = 0; r < d; ++r) {
    for (Eigen::Index c = 0; c < d; ++c) t.matrix(r, c) += rng.normal() * scale;
  }
  t.offset.resize(d);
  const double offset_scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (Eigen::Index r = 0; r < d; ++r) t.offset(r) = rng.normal() * offset_scale;
  return t;
}

void apply_synthetic_filter(EmbeddingStore& store, const std::string& filter_id,
                            const SyntheticFilterSpec& spec) {
  spec.validate();
  const Variant variant = Variant::filtered(filter_id);
  std::vector<std::pair<EmbeddingKey, std::vector<float>>> added;
  if (spec.kind == SyntheticFilterKind::Identity) {
    for (const auto& [key, vec] : store.entries()) {
      if (key.variant.is_original()) added.push_back({{key.image_id, variant}, vec});
    }
  } else if (spec.kind == SyntheticFilterKind::AffineEmbedding) {
    const auto t = affine_transform(store.dim(), spec.seed);
    const auto d = static_cast<Eigen::Index>(store.dim());
    const double s = spec.strength;
    for (const auto& [key, vec] : store.entries()) {
      if (!key.variant.is_original()) continue;
      const Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXf>(vec.data(), d).cast<double>();
      const Eigen::VectorXd y = (1.0 - s) * x + s * (t.matrix * x + t.offset);
      std::vector<float> out(vec.size());
      for (Eigen::Index i = 0; i < d; ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(y(i));
      added.push_back({{key.image_id, variant}, std::move(out)});
    }
  } else {
    throw Error(ErrorKind::Validation, "image-space filter kinds cannot be applied to embeddings");
  }
  for (auto& [key, vec] : added) store.insert(std::move(key), std::move(vec));
}

RgbImage apply_synthetic_filter(const RgbImage& img, const SyntheticFilterSpec& spec) {
  spec.validate();
  validate(img);
  RgbImage out = img;
  switch (spec.kind) {
    case SyntheticFilterKind::Identity:
      break;
    case SyntheticFilterKind::ColorShift:
      for (std::size_t i = 0; i < out.size(); ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
          out.data[3 * i + c] = clamp_u8(static_cast<double>(out.data[3 * i + c]) + spec.delta_rgb[c]);
        }
      }
      break;
    case SyntheticFilterKind::OcclusionBox: {
      // Exactly round(fraction * W * H) pixels, filled row-major from the top.
      const auto count = static_cast<std::size_t>(std::llround(spec.fraction * static_cast<double>(out.size())));
      for (std::size_t i = 0; i < count; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
          out.data[3 * i + c] = out.data[3 * i + c] < 128 ? 255 : 0;
        }
      }
      break;
    }
    case SyntheticFilterKind::Noise: {
      Rng rng(spec.seed);
      for (auto& v : out.data) v = clamp_u8(static_cast<double>(v) + rng.normal() * spec.sigma);
      break;
    }
    case SyntheticFilterKind::AffineEmbedding:
      throw Error(ErrorKind::Validation, "affine filters apply to embeddings, not images");
  }
  return out;
}

RgbImage gen_face_image(std::size_t width, std::size_t height, std::uint64_t seed) {
  Rng rng(seed);
  RgbImage img(width, height);
  const double bg[3] = {60 + 80 * rng.uniform01(), 60 + 80 * rng.uniform01(), 60 + 80 * rng.uniform01()};
  const double skin[3] = {180 + 40 * rng.uniform01(), 130 + 40 * rng.uniform01(), 100 + 40 * rng.uniform01()};
  const double cx = 0.5 * static_cast<double>(width);
  const double cy = 0.5 * static_cast<double>(height);
  const double rx = (0.28 + 0.06 * rng.uniform01()) * static_cast<double>(width);
  const double ry = (0.36 + 0.06 * rng.uniform01()) * static_cast<double>(height);
  const double eye_dx = 0.35 * rx;
  const double eye_y = cy - 0.2 * ry;
  const double eye_r = 0.12 * rx;
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = static_cast<double>(x) + 0.5;
      const double fy = static_cast<double>(y) + 0.5;
      const double shade = 0.8 + 0.4 * fy / static_cast<double>(height);
      const double ex = (fx - cx) / rx;
      const double ey = (fy - cy) / ry;
      const bool face = ex * ex + ey * ey <= 1.0;
      const bool eye = std::hypot(fx - (cx - eye_dx), fy - eye_y) < eye_r ||
                       std::hypot(fx - (cx + eye_dx), fy - eye_y) < eye_r;
      const bool mouth = std::abs(fy - (cy + 0.45 * ry)) < 0.05 * ry && std::abs(fx - cx) < 0.4 * rx;
      auto* p = img.px(x, y);
      for (std::size_t c = 0; c < 3; ++c) {
        double v = face ? skin[c] : bg[c] * shade;
        if (eye || mouth) v *= 0.35;
        p[c] = clamp_u8(v);
      }
    }
  }
  return img;
}

std::filesystem::path write_synthetic_pairs(const std::filesystem::path& dir,
                                            const std::map<std::string, SyntheticFilterSpec>& filters,
                                            std::size_t count, std::size_t size, std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "orig");
  std::vector<RgbImage> originals;
  for (std::size_t i = 0; i < count; ++i) {
    originals.push_back(gen_face_image(size, size, derive_seed(seed, i)));
    save_png(originals.back(), dir / "orig" / ("img" + std::to_string(i) + ".png"));
  }
  const fs::path pairs = dir / "pairs.csv";
  std::ofstream out(pairs, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + pairs.string());
  out << "filter_id,original_path,filtered_path\n";
  for (const auto& [id, spec] : filters) {
    fs::create_directories(dir / id);
    for (std::size_t i = 0; i < count; ++i) {
      SyntheticFilterSpec per_image = spec;
      per_image.seed = derive_seed(spec.seed, i);
      const std::string name = "img" + std::to_string(i) + ".png";
      save_png(apply_synthetic_filter(originals[i], per_image), dir / id / name);
      out << id << ",orig/" << name << ',' << id << '/' << name << '\n';
    }
  }
  if (!out) throw Error(ErrorKind::Io, "write failed for " + pairs.string());
  return pairs;
}

}  // namespace filterbench
