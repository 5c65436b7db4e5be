#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <set>
#include <functional>
#include <bit>
#include <algorithm>
#include <iterator>

#include "filterbench/binary_io.hpp"
#include "filterbench/data_model.hpp"
#include "filterbench/error.hpp"
#include "filterbench/rng.hpp"
#include "test_util.hpp"

using namespace filterbench;
namespace fs = std::filesystem;
using testutil::kind_of;
using testutil::slurp;
using testutil::TempDir;

namespace {

std::string manifest_csv(int subjects, int images, bool ragged = false) {
  std::ostringstream out;
  out << "image_id,subject_id,session,gender,source_path\n";
  for (int s = 0; s < subjects; ++s) {
    const int count = ragged && s == subjects - 1 ? 1 : images;
    for (int i = 1; i <= count; ++i) {
      out << "s" << s << "_" << i << ",s" << s << "," << i << "," << (s % 2 ? "M" : "F") << ",\n";
    }
  }
  return out.str();
}

std::vector<float> random_vec(Rng& rng, std::size_t dim) {
  std::vector<float> v(dim);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

}  // namespace

TEST(Manifest, MinimalSingleSubject) {
  std::istringstream in(manifest_csv(1, 3));
  const auto m = parse_manifest(in);
  EXPECT_EQ(m.subject_count(), 1u);
  EXPECT_EQ(m.records().size(), 3u);
}

TEST(Manifest, ThousandSubjectsGenderBalanced) {
  std::istringstream in(manifest_csv(1000, 3));
  const auto m = parse_manifest(in);
  EXPECT_EQ(m.subject_count(), 1000u);
  const auto g = m.gender_report();
  EXPECT_EQ(g.male, 500u);
  EXPECT_EQ(g.female, 500u);
  EXPECT_EQ(g.unknown, 0u);
}

TEST(Manifest, RaggedSubjectRejected) {
  std::istringstream in(manifest_csv(2, 3, true));
  EXPECT_EQ(kind_of([&] { parse_manifest(in); }), ErrorKind::Validation);
}

TEST(Manifest, DuplicateImageIdRejected) {
  std::istringstream in(
      "image_id,subject_id,session,gender,source_path\n"
      "a,s,1,F,\na,s,2,F,\nb,s,3,F,\n");
  EXPECT_EQ(kind_of([&] { parse_manifest(in); }), ErrorKind::Validation);
}

TEST(Manifest, RepeatedSessionRejected) {
  std::istringstream in(
      "image_id,subject_id,session,gender,source_path\n"
      "a,s,1,F,\nb,s,1,F,\nc,s,3,F,\n");
  EXPECT_EQ(kind_of([&] { parse_manifest(in); }), ErrorKind::Validation);
}

TEST(Manifest, MalformedRowIsParseError) {
  std::istringstream in("image_id,subject_id,session,gender,source_path\na,s,x,F,\n");
  EXPECT_EQ(kind_of([&] { parse_manifest(in, 1); }), ErrorKind::Parse);
  std::istringstream bad_gender("image_id,subject_id,session,gender,source_path\na,s,1,Q,\n");
  EXPECT_EQ(kind_of([&] { parse_manifest(bad_gender, 1); }), ErrorKind::Parse);
}

TEST(Manifest, UnknownGenderAllowed) {
  std::istringstream in("image_id,subject_id,session,gender,source_path\na,s,1,U,img/a.png\n");
  const auto m = parse_manifest(in, 1);
  EXPECT_EQ(m.gender_report().unknown, 1u);
  EXPECT_EQ(m.records()[0].source_path.value(), "img/a.png");
}

TEST_F(TempDir, ManifestRoundTrip) {
  std::istringstream in(manifest_csv(7, 4));
  const auto m = parse_manifest(in, 4);
  save_manifest(m, dir / "m.csv");
  EXPECT_EQ(load_manifest(dir / "m.csv", 4), m);
}

TEST(Manifest, RecordsSortedAndRestrict) {
  std::vector<ImageRecord> recs{{"b1", "b", 1, Gender::M, {}}, {"a1", "a", 1, Gender::F, {}},
                                {"c1", "c", 1, Gender::U, {}}};
  const auto m = DatasetManifest::from_records(recs, 1);
  EXPECT_EQ(m.records()[0].image_id, "a1");
  EXPECT_EQ(m.records()[2].image_id, "c1");
  const std::vector<std::string> keep{"c", "a"};
  const auto sub = m.restrict_to(keep);
  EXPECT_EQ(sub.subject_count(), 2u);
  EXPECT_EQ(sub.gender_of_subject("a"), Gender::F);
}

TEST(Manifest, SampleSubjectsSeeded) {
  std::istringstream in(manifest_csv(50, 1));
  const auto m = parse_manifest(in, 1);
  const auto a = sample_subjects(m, 10, 3);
  EXPECT_EQ(a, sample_subjects(m, 10, 3));
  EXPECT_EQ(a.size(), 10u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(std::set<std::string>(a.begin(), a.end()).size(), 10u);
  EXPECT_EQ(kind_of([&] { sample_subjects(m, 51, 3); }), ErrorKind::TooFewSubjects);
}

TEST(Variant, TagsRoundTrip) {
  EXPECT_EQ(Variant::original().tag(), "orig");
  EXPECT_EQ(Variant::filtered("x").tag(), "f:x");
  EXPECT_EQ(Variant::parse("f:x"), Variant::filtered("x"));
  EXPECT_EQ(EmbeddingKey::parse("img|f:abc"), (EmbeddingKey{"img", Variant::filtered("abc")}));
  EXPECT_EQ(kind_of([] { Variant::filtered(""); }), ErrorKind::Validation);
  EXPECT_EQ(kind_of([] { Variant::parse("f:"); }), ErrorKind::Parse);
  EXPECT_EQ(kind_of([] { EmbeddingKey::parse("noseparator"); }), ErrorKind::Parse);
}

TEST(Filters, DuplicateIdWithinAppRejected) {
  std::vector<FilterDescriptor> ok{{"a", "insta", "A", {}}, {"a", "snap", "A", {}}};
  EXPECT_NO_THROW(validate_filters(ok));
  std::vector<FilterDescriptor> bad{{"a", "insta", "A", {}}, {"a", "insta", "B", std::string("color")}};
  EXPECT_EQ(kind_of([&] { validate_filters(bad); }), ErrorKind::Validation);
}

TEST(EmbeddingStore, InvariantsEnforced) {
  EmbeddingStore s(4);
  EXPECT_EQ(kind_of([&] { s.insert({"a", Variant::original()}, {1, 2, 3}); }), ErrorKind::DimMismatch);
  EXPECT_EQ(kind_of([&] { s.insert({"a", Variant::original()}, {1, NAN, 3, 4}); }), ErrorKind::NonFiniteValue);
  EXPECT_EQ(kind_of([&] { s.insert({"a", Variant::original()}, {0, 0, 0, 0}); }), ErrorKind::Validation);
  s.insert({"a", Variant::original()}, {1, 0, 0, 0});
  EXPECT_EQ(kind_of([&] { s.insert({"a", Variant::original()}, {0, 1, 0, 0}); }), ErrorKind::DuplicateKey);
  EXPECT_EQ(kind_of([&] { s.at({"b", Variant::original()}); }), ErrorKind::MissingEmbedding);
}

TEST(EmbeddingStore, IterationOrderIsLexicographic) {
  EmbeddingStore s(2);
  s.insert({"b", Variant::original()}, {1, 0});
  s.insert({"a", Variant::filtered("z")}, {1, 0});
  s.insert({"a", Variant::original()}, {1, 0});
  s.insert({"a", Variant::filtered("c")}, {1, 0});
  std::vector<std::string> keys;
  for (const auto& [k, _] : s.entries()) keys.push_back(k.to_string());
  EXPECT_EQ(keys, (std::vector<std::string>{"a|orig", "a|f:c", "a|f:z", "b|orig"}));
}

TEST_F(TempDir, Emb1TwoRecords) {
  EmbeddingStore s(512);
  Rng rng(1);
  s.insert({"x", Variant::original()}, random_vec(rng, 512));
  s.insert({"y", Variant::filtered("f")}, random_vec(rng, 512));
  save_embeddings(s, dir / "e.emb1");
  const auto back = load_embeddings(dir / "e.emb1", 512);
  EXPECT_EQ(back.size(), 2u);
  EXPECT_EQ(back.dim(), 512u);
  EXPECT_EQ(back, s);
  EXPECT_EQ(kind_of([&] { load_embeddings(dir / "e.emb1", 128); }), ErrorKind::DimMismatch);
}

TEST_F(TempDir, Emb1WithNanRejected) {
  std::ofstream out(dir / "nan.emb1", std::ios::binary);
  binary::write_magic(out, "EMB1");
  binary::write_le<std::uint32_t>(out, 2);
  binary::write_le<std::uint32_t>(out, 1);
  binary::write_short_string(out, "a|orig");
  binary::write_f32(out, 1.0f);
  binary::write_f32(out, std::numeric_limits<float>::quiet_NaN());
  out.close();
  EXPECT_EQ(kind_of([&] { load_embeddings(dir / "nan.emb1"); }), ErrorKind::NonFiniteValue);
}

TEST_F(TempDir, Emb1DuplicateKeyRejected) {
  std::ofstream out(dir / "dup.emb1", std::ios::binary);
  binary::write_magic(out, "EMB1");
  binary::write_le<std::uint32_t>(out, 1);
  binary::write_le<std::uint32_t>(out, 2);
  for (int i = 0; i < 2; ++i) {
    binary::write_short_string(out, "a|orig");
    binary::write_f32(out, 1.0f);
  }
  out.close();
  EXPECT_EQ(kind_of([&] { load_embeddings(dir / "dup.emb1"); }), ErrorKind::DuplicateKey);
}

TEST_F(TempDir, Emb1RoundTripIsBitExact) {
  EmbeddingStore s(64);
  Rng rng(42);
  for (int i = 0; i < 100; ++i) s.insert({"img" + std::to_string(i), Variant::original()}, random_vec(rng, 64));
  save_embeddings(s, dir / "a.emb1");
  const auto back = load_embeddings(dir / "a.emb1");
  for (const auto& [k, v] : s.entries()) {
    const auto& w = back.at(k);
    for (std::size_t i = 0; i < v.size(); ++i) {
      ASSERT_EQ(std::bit_cast<std::uint32_t>(v[i]), std::bit_cast<std::uint32_t>(w[i]));
    }
  }
  save_embeddings(back, dir / "b.emb1");
  EXPECT_EQ(slurp(dir / "a.emb1"), slurp(dir / "b.emb1"));
}

TEST_F(TempDir, EmptyStoreWritesHeaderOnly) {
  save_embeddings(EmbeddingStore(512), dir / "empty.emb1");
  EXPECT_EQ(fs::file_size(dir / "empty.emb1"), 12u);
  EXPECT_TRUE(load_embeddings(dir / "empty.emb1").empty());
}

TEST_F(TempDir, Emb1FileSizeArithmetic) {
  EmbeddingStore s(512);
  Rng rng(7);
  std::uintmax_t ids = 0;
  for (int i = 0; i < 1000; ++i) {
    EmbeddingKey key{"subject" + std::to_string(i), i % 3 ? Variant::original() : Variant::filtered("f")};
    ids += 2 + key.to_string().size();
    s.insert(key, random_vec(rng, 512));
  }
  save_embeddings(s, dir / "big.emb1");
  EXPECT_EQ(fs::file_size(dir / "big.emb1"), 12 + ids + 1000u * 512u * 4u);
}

TEST_F(TempDir, CsvEmbeddingsLoad) {
  {
    std::ofstream out(dir / "e.csv");
    out << "key,v0,v1,v2\n"
        << "a|orig,1,0,0\n"
        << "a|f:x,0.5,0.5,0\n";
  }
  const auto s = load_embeddings(dir / "e.csv");
  EXPECT_EQ(s.dim(), 3u);
  EXPECT_EQ(s.at({"a", Variant::filtered("x")})[1], 0.5f);
  save_embeddings_csv(s, dir / "back.csv");
  EXPECT_EQ(load_embeddings(dir / "back.csv"), s);
}

TEST_F(TempDir, MissingFilesAreMissingInput) {
  EXPECT_EQ(kind_of([&] { load_embeddings(dir / "nope.emb1"); }), ErrorKind::MissingInput);
  EXPECT_EQ(kind_of([&] { load_manifest(dir / "nope.csv"); }), ErrorKind::MissingInput);
  EXPECT_EQ(exit_code_for(ErrorKind::MissingInput), 2);
  EXPECT_EQ(exit_code_for(ErrorKind::Validation), 1);
  EXPECT_EQ(exit_code_for(ErrorKind::NonFiniteValue), 3);
}

TEST(EmbeddingStore, MergeRejectsDuplicates) {
  EmbeddingStore a(2);
  EmbeddingStore b(2);
  a.insert({"x", Variant::original()}, {1, 0});
  b.insert({"x", Variant::filtered("f")}, {0, 1});
  a.merge(b);
  EXPECT_EQ(a.size(), 2u);
  EXPECT_EQ(kind_of([&] { a.merge(b); }), ErrorKind::DuplicateKey);
  EXPECT_EQ(kind_of([&] { a.merge(EmbeddingStore(3)); }), ErrorKind::DimMismatch);
}
