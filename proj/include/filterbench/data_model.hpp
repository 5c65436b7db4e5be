#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace filterbench {

enum class Gender { M, F, U };

char to_char(Gender g) noexcept;
Gender parse_gender(std::string_view text);

struct ImageRecord {
  std::string image_id;
  std::string subject_id;
  int session = 1;
  Gender gender = Gender::U;
  std::optional<std::string> source_path;

  bool operator==(const ImageRecord&) const = default;
};

struct GenderReport {
  std::size_t male = 0;
  std::size_t female = 0;
  std::size_t unknown = 0;
};

// Validated set of image records. Every subject has exactly
// images_per_subject records with distinct sessions; records are kept sorted
// by image_id so that everything derived from a manifest is reproducible.
class DatasetManifest {
public:
  static constexpr int kDefaultImagesPerSubject = 3;

  DatasetManifest() = default;

  // Throws ValidationError naming the offending record.
  static DatasetManifest from_records(std::vector<ImageRecord> records,
                                      int images_per_subject = kDefaultImagesPerSubject);

  const std::vector<ImageRecord>& records() const noexcept { return records_; }
  int images_per_subject() const noexcept { return images_per_subject_; }
  const std::vector<std::string>& subjects() const noexcept { return subjects_; }
  std::size_t subject_count() const noexcept { return subjects_.size(); }

  const ImageRecord* find(std::string_view image_id) const;
  std::vector<const ImageRecord*> images_of(std::string_view subject_id) const;
  Gender gender_of_subject(std::string_view subject_id) const;

  // Subject-level counts; a subject's gender is that of its first record.
  GenderReport gender_report() const;

  // Sub-manifest containing only the listed subjects.
  DatasetManifest restrict_to(std::span<const std::string> subject_ids) const;

  bool operator==(const DatasetManifest&) const = default;

private:
  std::vector<ImageRecord> records_;
  std::vector<std::string> subjects_;
  int images_per_subject_ = kDefaultImagesPerSubject;
};

DatasetManifest parse_manifest(std::istream& in, int images_per_subject = 3);
DatasetManifest load_manifest(const std::filesystem::path& path, int images_per_subject = 3);
void write_manifest(const DatasetManifest& manifest, std::ostream& out);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// Seeded choice of `count` distinct subjects, returned sorted.
std::vector<std::string> sample_subjects(const DatasetManifest& manifest, std::size_t count,
                                         std::uint64_t seed);

// Either the original image or its counterpart produced by one filter.
struct Variant {
  std::optional<std::string> filter_id;

  static Variant original() { return {}; }
  static Variant filtered(std::string id);

  bool is_original() const noexcept { return !filter_id.has_value(); }
  // "orig" or "f:<filter_id>"
  std::string tag() const;
  static Variant parse(std::string_view tag);

  auto operator<=>(const Variant&) const = default;
};

struct EmbeddingKey {
  std::string image_id;
  Variant variant;

  // "<image_id>|<variant tag>"
  std::string to_string() const;
  static EmbeddingKey parse(std::string_view text);

  auto operator<=>(const EmbeddingKey&) const = default;
};

struct FilterDescriptor {
  std::string filter_id;
  std::string app;
  std::string display_name;
  std::optional<std::string> category;
};

// Throws ValidationError when a filter_id repeats within an app.
void validate_filters(std::span<const FilterDescriptor> filters);

// (image, variant) -> D-dimensional vector. Every stored vector has the
// store's dimension, finite components and nonzero norm.
class EmbeddingStore {
public:
  static constexpr std::size_t kDefaultDim = 512;

  explicit EmbeddingStore(std::size_t dim = kDefaultDim);

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  void insert(EmbeddingKey key, std::vector<float> vec);
  // Replaces or inserts; same validation as insert.
  void assign(const EmbeddingKey& key, std::vector<float> vec);

  bool contains(const EmbeddingKey& key) const { return entries_.count(key) != 0; }
  const std::vector<float>* find(const EmbeddingKey& key) const;
  // Throws MissingEmbedding.
  const std::vector<float>& at(const EmbeddingKey& key) const;

  // Iteration is in key order.
  const std::map<EmbeddingKey, std::vector<float>>& entries() const noexcept { return entries_; }

  // Merge another store of the same dimension; duplicate keys are rejected.
  void merge(const EmbeddingStore& other);

  bool operator==(const EmbeddingStore&) const = default;

private:
  void check_vector(const EmbeddingKey& key, std::span<const float> vec) const;

  std::size_t dim_;
  std::map<EmbeddingKey, std::vector<float>> entries_;
};

// EMB1 binary or `key,v0,...` CSV, detected by the leading magic bytes.
EmbeddingStore load_embeddings(const std::filesystem::path& path,
                               std::optional<std::size_t> expected_dim = std::nullopt);
EmbeddingStore read_emb1(std::istream& in, std::optional<std::size_t> expected_dim = std::nullopt);
EmbeddingStore read_embedding_csv(std::istream& in,
                                  std::optional<std::size_t> expected_dim = std::nullopt);

void save_embeddings(const EmbeddingStore& store, const std::filesystem::path& path);
void write_emb1(const EmbeddingStore& store, std::ostream& out);
void save_embeddings_csv(const EmbeddingStore& store, const std::filesystem::path& path);

}  // namespace filterbench
