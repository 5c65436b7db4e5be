#include <gtest/gtest.h>

#include <cmath>
#include <omp.h>

#include "filterbench/metrics.hpp"
#include "filterbench/pixel_analysis.hpp"
#include "filterbench/protocol.hpp"
#include "filterbench/synth.hpp"
#include "test_util.hpp"

using namespace filterbench;
using testutil::kind_of;
using testutil::TempDir;

namespace {

SyntheticDatasetSpec small_spec(double sw, double sb, std::uint64_t seed = 1) {
  SyntheticDatasetSpec s;
  s.subjects = 150;
  s.dim = 64;
  s.intra_noise = sw;
  s.inter_separation = sb;
  s.seed = seed;
  return s;
}

}  // namespace

TEST(GenEmbeddings, ShapeAndUnitNorm) {
  const auto ds = gen_embeddings(small_spec(0.5, 3.0));
  EXPECT_EQ(ds.manifest.subject_count(), 150u);
  EXPECT_EQ(ds.store.size(), 450u);
  EXPECT_EQ(ds.manifest.gender_report().female, 75u);
  for (const auto& [key, v] : ds.store.entries()) {
    double sq = 0;
    for (float x : v) sq += double{x} * x;
    ASSERT_NEAR(std::sqrt(sq), 1.0, 1e-6) << key.to_string();
  }
}

TEST(GenEmbeddings, NoIntraNoiseGivesPerfectGenuine) {
  const auto ds = gen_embeddings(small_spec(0.0, 3.0));
  const auto s = score_protocol(build_protocol(ds.manifest, ProtocolMode::orig_vs_orig()), ds.store);
  for (float g : s.genuine) EXPECT_FLOAT_EQ(g, 1.0f);
}

TEST(GenEmbeddings, IdenticalCentroidsAreInseparable) {
  const auto ds = gen_embeddings(small_spec(0.5, 0.0));
  const auto s = score_protocol(build_protocol(ds.manifest, ProtocolMode::orig_vs_orig()), ds.store);
  EXPECT_LT(std::abs(d_prime(s)), 0.1);
}

TEST(GenEmbeddings, WellSeparatedBaselineAtFullScale) {
  auto spec = small_spec(0.5, 3.0);
  spec.subjects = 1000;
  spec.dim = 512;
  const auto ds = gen_embeddings(spec);
  const auto s = score_protocol(build_protocol(ds.manifest, ProtocolMode::orig_vs_orig()), ds.store);
  EXPECT_GT(d_prime(s), 10.0);
}

TEST(GenEmbeddings, DeterministicAcrossRunsAndThreads) {
  const auto spec = small_spec(0.7, 2.0, 99);
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  const auto a = gen_embeddings(spec);
  omp_set_num_threads(4);
  const auto b = gen_embeddings(spec);
  omp_set_num_threads(saved);
  EXPECT_EQ(a.store, b.store);
  EXPECT_EQ(a.manifest, b.manifest);
  EXPECT_NE(gen_embeddings(small_spec(0.7, 2.0, 100)).store, a.store);
}

TEST(GenEmbeddings, Validation) {
  auto spec = small_spec(0.5, 1.0);
  spec.subjects = 0;
  EXPECT_EQ(kind_of([&] { gen_embeddings(spec); }), ErrorKind::Validation);
  EXPECT_TRUE(small_spec(1.0, 1.0).separation_warning());
  EXPECT_FALSE(small_spec(0.5, 1.0).separation_warning());
}

TEST(AffineFilter, FvoDPrimeFallsWithStrength) {
  const auto ds = gen_embeddings(small_spec(1.0, 3.0, 4));
  const double ovo = d_prime(score_protocol(build_protocol(ds.manifest, ProtocolMode::orig_vs_orig()), ds.store));
  double prev = std::numeric_limits<double>::infinity();
  for (double strength : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    auto store = ds.store;
    apply_synthetic_filter(store, "a", {.kind = SyntheticFilterKind::AffineEmbedding, .seed = 5, .strength = strength});
    const double fvo = d_prime(score_protocol(build_protocol(ds.manifest, ProtocolMode::filt_vs_orig("a")), store));
    EXPECT_LT(fvo, prev) << strength;
    if (strength > 0) EXPECT_LT(fvo, ovo);
    prev = fvo;
  }
}

TEST(AffineFilter, IdentityCopiesAndImageKindsRejected) {
  auto ds = gen_embeddings(small_spec(0.5, 3.0));
  apply_synthetic_filter(ds.store, "id", {.kind = SyntheticFilterKind::Identity});
  EXPECT_EQ(ds.store.size(), 900u);
  const auto& rec = ds.manifest.records().front();
  EXPECT_EQ(ds.store.at({rec.image_id, Variant::filtered("id")}), ds.store.at({rec.image_id, Variant::original()}));
  EXPECT_EQ(kind_of([&] { apply_synthetic_filter(ds.store, "o", {.kind = SyntheticFilterKind::OcclusionBox}); }),
            ErrorKind::Validation);
}

TEST(AffineFilter, TransformIsSeeded) {
  const auto a = affine_transform(16, 3);
  const auto b = affine_transform(16, 3);
  EXPECT_EQ(a.matrix, b.matrix);
  EXPECT_EQ(a.offset, b.offset);
  EXPECT_NE(affine_transform(16, 4).matrix, a.matrix);
}

TEST(ParseSpec, Forms) {
  EXPECT_EQ(parse_filter_spec("affine:0.5").strength, 0.5);
  EXPECT_EQ(parse_filter_spec("color:1,-2,3").delta_rgb, (std::array<int, 3>{1, -2, 3}));
  EXPECT_EQ(parse_filter_spec("occlusion:0.3").fraction, 0.3);
  EXPECT_EQ(parse_filter_spec("noise:4", 9).sigma, 4.0);
  EXPECT_EQ(parse_filter_spec("noise:4", 9).seed, 9u);
  EXPECT_EQ(parse_filter_spec("identity").kind, SyntheticFilterKind::Identity);
  EXPECT_EQ(kind_of([] { parse_filter_spec("blur:1"); }), ErrorKind::Parse);
  EXPECT_EQ(kind_of([] { parse_filter_spec("occlusion:2"); }), ErrorKind::Validation);
  EXPECT_EQ(kind_of([] { parse_filter_spec("color:1,2"); }), ErrorKind::Parse);
}

TEST(ImageFilters, IdentityIsBinOne) {
  const auto img = gen_face_image(40, 40, 1);
  const auto out = apply_synthetic_filter(img, {.kind = SyntheticFilterKind::Identity});
  const std::vector<ImagePair> pairs{{img, out}};
  const auto stats = analyze_filter(pairs, "id");
  EXPECT_EQ(stats.manipulated_ratio, 0.0);
  EXPECT_EQ(stats.bin.value, 1);
}

TEST(ImageFilters, HalfOcclusionOnFlatImage) {
  const RgbImage flat(50, 40, 90, 120, 150);
  const auto out = apply_synthetic_filter(flat, {.kind = SyntheticFilterKind::OcclusionBox, .fraction = 0.5});
  const std::vector<ImagePair> pairs{{flat, out}};
  EXPECT_NEAR(analyze_filter(pairs, "occ").manipulated_ratio, 0.5, 0.02);
}

TEST(ImageFilters, NoiseAndColorAreDeterministic) {
  const auto img = gen_face_image(32, 32, 2);
  const SyntheticFilterSpec noise{.kind = SyntheticFilterKind::Noise, .seed = 3, .sigma = 10};
  EXPECT_EQ(apply_synthetic_filter(img, noise), apply_synthetic_filter(img, noise));
  EXPECT_NE(apply_synthetic_filter(img, noise), img);
  const SyntheticFilterSpec tint{.kind = SyntheticFilterKind::ColorShift, .delta_rgb = {300, -300, 0}};
  const auto t = apply_synthetic_filter(img, tint);
  EXPECT_EQ(t.px(0, 0)[0], 255);
  EXPECT_EQ(t.px(0, 0)[1], 0);
  EXPECT_EQ(t.px(0, 0)[2], img.px(0, 0)[2]);
  EXPECT_EQ(kind_of([&] { apply_synthetic_filter(img, {.kind = SyntheticFilterKind::AffineEmbedding}); }),
            ErrorKind::Validation);
}

TEST(ImageFilters, FaceImageSeeded) {
  EXPECT_EQ(gen_face_image(24, 30, 5), gen_face_image(24, 30, 5));
  EXPECT_NE(gen_face_image(24, 30, 5), gen_face_image(24, 30, 6));
}

TEST_F(TempDir, SyntheticPairsLayout) {
  const auto csv = write_synthetic_pairs(dir, {{"n", {.kind = SyntheticFilterKind::Noise, .sigma = 5}}}, 3, 16, 1);
  EXPECT_TRUE(std::filesystem::exists(csv));
  const auto pairs = load_pairs_manifest(csv);
  ASSERT_EQ(pairs.at("n").size(), 3u);
  for (const auto& p : pairs.at("n")) {
    EXPECT_TRUE(std::filesystem::exists(p.original));
    EXPECT_EQ(load_rgb(p.filtered).width, 16u);
  }
}
