#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "filterbench/data_model.hpp"
#include "filterbench/image.hpp"

namespace filterbench {

struct SyntheticDatasetSpec {
  std::size_t subjects = 1000;
  int images_per_subject = 3;
  std::size_t dim = 512;
  // Angular spread of a subject's images around its centroid (radians, approx).
  double intra_noise = 0.1;
  // Spread of subject centroids around a shared direction; larger values
  // approach centroids uniform on the sphere.
  double inter_separation = 1.0;
  std::uint64_t seed = 1;

  // Throws Validation for empty sizes or negative spreads.
  void validate() const;
  // intra_noise >= inter_separation: separation is not guaranteed.
  bool separation_warning() const noexcept { return intra_noise >= inter_separation; }
};

struct SyntheticDataset {
  DatasetManifest manifest;
  EmbeddingStore store;  // original variants only
};

// Subject ids "s0000".., image ids "<subject>_<session>", alternating F/M.
// Each subject draws from its own derived seed, so output is independent of
// the thread count.
SyntheticDataset gen_embeddings(const SyntheticDatasetSpec& spec);

enum class SyntheticFilterKind { Identity, AffineEmbedding, ColorShift, OcclusionBox, Noise };

SyntheticFilterKind parse_filter_kind(std::string_view text);

struct SyntheticFilterSpec {
  SyntheticFilterKind kind = SyntheticFilterKind::Identity;
  std::uint64_t seed = 0;
  double strength = 1.0;                  // AffineEmbedding; 0 is the identity
  std::array<int, 3> delta_rgb{0, 0, 0};  // ColorShift
  double fraction = 0.0;                  // OcclusionBox, in [0, 1]
  double sigma = 0.0;                     // Noise, per channel

  void validate() const;
};

// "identity", "affine:<strength>", "color:<dr>,<dg>,<db>", "occlusion:<fraction>",
// "noise:<sigma>".
SyntheticFilterSpec parse_filter_spec(std::string_view text, std::uint64_t seed = 0);

// The fixed seeded transform behind an AffineEmbedding filter:
// x <- (1 - s) x + s (A x + b), A = I + 0.3 G with G ~ N(0, 1/D), |b| ~ 1.
struct AffineTransform {
  Eigen::MatrixXd matrix;
  Eigen::VectorXd offset;
};

AffineTransform affine_transform(std::size_t dim, std::uint64_t seed);

// Adds (image, f:<filter_id>) for every original entry of the store.
// Identity copies the originals; image-space kinds are rejected.
void apply_synthetic_filter(EmbeddingStore& store, const std::string& filter_id,
                            const SyntheticFilterSpec& spec);

// Image-space kinds; AffineEmbedding is rejected.
RgbImage apply_synthetic_filter(const RgbImage& img, const SyntheticFilterSpec& spec);

// Writes <count> synthetic originals and, per filter, their filtered
// copies as PNG under dir, plus pairs.csv (filter_id,original_path,filtered_path).
// Returns the path of pairs.csv.
std::filesystem::path write_synthetic_pairs(const std::filesystem::path& dir,
                                            const std::map<std::string, SyntheticFilterSpec>& filters,
                                            std::size_t count, std::size_t size, std::uint64_t seed);

// Smooth background, a skin-toned ellipse and a few darker features.
RgbImage gen_face_image(std::size_t width, std::size_t height, std::uint64_t seed);

}  // namespace filterbench
