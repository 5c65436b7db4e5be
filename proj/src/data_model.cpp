#include "filterbench/data_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "filterbench/binary_io.hpp"
#include "filterbench/error.hpp"
#include "filterbench/rng.hpp"
#include "text_util.hpp"

namespace filterbench {

namespace {

constexpr std::string_view kManifestHeader = "image_id,subject_id,session,gender,source_path";
constexpr std::string_view kEmbMagic = "EMB1";

}  // namespace

char to_char(Gender g) noexcept {
  switch (g) {
    case Gender::M: return 'M';
    case Gender::F: return 'F';
    case Gender::U: return 'U';
  }
  return 'U';
}

Gender parse_gender(std::string_view text) {
  if (text == "M") return Gender::M;
  if (text == "F") return Gender::F;
  if (text == "U" || text.empty()) return Gender::U;
  throw Error(ErrorKind::Parse, "unknown gender '" + std::string(text) + "'");
}

DatasetManifest DatasetManifest::from_records(std::vector<ImageRecord> records,
                                              int images_per_subject) {
  if (images_per_subject < 1) {
    throw Error(ErrorKind::Validation, "images_per_subject must be >= 1");
  }
  std::sort(records.begin(), records.end(),
            [](const ImageRecord& a, const ImageRecord& b) { return a.image_id < b.image_id; });

  std::map<std::string, std::vector<const ImageRecord*>> by_subject;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.image_id.empty() || r.subject_id.empty()) {
      throw Error(ErrorKind::Validation, "record with empty image_id or subject_id");
    }
    if (r.image_id.find('|') != std::string::npos) {
      throw Error(ErrorKind::Validation, "image_id '" + r.image_id + "' contains '|'");
    }
    if (r.session < 1) {
      throw Error(ErrorKind::Validation, "image '" + r.image_id + "' has session < 1");
    }
    if (i > 0 && records[i - 1].image_id == r.image_id) {
      throw Error(ErrorKind::Validation, "duplicate image_id '" + r.image_id + "'");
    }
    by_subject[r.subject_id].push_back(&r);
  }

  DatasetManifest m;
  for (const auto& [subject, imgs] : by_subject) {
    if (static_cast<int>(imgs.size()) != images_per_subject) {
      throw Error(ErrorKind::Validation,
                  "subject '" + subject + "' has " + std::to_string(imgs.size()) +
                      " images, expected " + std::to_string(images_per_subject) +
                      " (first record '" + imgs.front()->image_id + "')");
    }
    std::set<int> sessions;
    for (const auto* r : imgs) {
      if (!sessions.insert(r->session).second) {
        throw Error(ErrorKind::Validation, "subject '" + subject + "' repeats session " +
                                               std::to_string(r->session) + " at image '" +
                                               r->image_id + "'");
      }
    }
    m.subjects_.push_back(subject);
  }
  m.records_ = std::move(records);
  m.images_per_subject_ = images_per_subject;
  return m;
}

const ImageRecord* DatasetManifest::find(std::string_view image_id) const {
  auto it = std::lower_bound(records_.begin(), records_.end(), image_id,
                             [](const ImageRecord& r, std::string_view id) { return r.image_id < id; });
  if (it == records_.end() || it->image_id != image_id) return nullptr;
  return &*it;
}

std::vector<const ImageRecord*> DatasetManifest::images_of(std::string_view subject_id) const {
  std::vector<const ImageRecord*> out;
  for (const auto& r : records_) {
    if (r.subject_id == subject_id) out.push_back(&r);
  }
  return out;
}

Gender DatasetManifest::gender_of_subject(std::string_view subject_id) const {
  for (const auto& r : records_) {
    if (r.subject_id == subject_id) return r.gender;
  }
  return Gender::U;
}

GenderReport DatasetManifest::gender_report() const {
  std::map<std::string_view, Gender> first;
  for (const auto& r : records_) first.emplace(r.subject_id, r.gender);
  GenderReport report;
  for (const auto& [_, g] : first) {
    switch (g) {
      case Gender::M: ++report.male; break;
      case Gender::F: ++report.female; break;
      case Gender::U: ++report.unknown; break;
    }
  }
  return report;
}

DatasetManifest DatasetManifest::restrict_to(std::span<const std::string> subject_ids) const {
  std::set<std::string_view> keep(subject_ids.begin(), subject_ids.end());
  std::vector<ImageRecord> subset;
  for (const auto& r : records_) {
    if (keep.count(r.subject_id)) subset.push_back(r);
  }
  return from_records(std::move(subset), images_per_subject_);
}

DatasetManifest parse_manifest(std::istream& in, int images_per_subject) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::Parse, "empty manifest");
  detail::strip_cr(line);
  if (line != kManifestHeader) {
    throw Error(ErrorKind::Parse, "manifest header must be '" + std::string(kManifestHeader) + "'");
  }
  std::vector<ImageRecord> records;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.empty()) continue;
    const auto fields = detail::split(line, ',');
    if (fields.size() != 5) {
      throw Error(ErrorKind::Parse, "line " + std::to_string(line_no) + ": expected 5 fields, got " +
                                        std::to_string(fields.size()));
    }
    ImageRecord r;
    r.image_id = fields[0];
    r.subject_id = fields[1];
    try {
      r.session = detail::parse_int(fields[2]);
      r.gender = parse_gender(fields[3]);
    } catch (const Error& e) {
      throw Error(ErrorKind::Parse, "line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!fields[4].empty()) r.source_path = std::string(fields[4]);
    records.push_back(std::move(r));
  }
  return DatasetManifest::from_records(std::move(records), images_per_subject);
}

DatasetManifest load_manifest(const std::filesystem::path& path, int images_per_subject) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::MissingInput, "cannot open manifest " + path.string());
  return parse_manifest(in, images_per_subject);
}

void write_manifest(const DatasetManifest& manifest, std::ostream& out) {
  out << kManifestHeader << '\n';
  for (const auto& r : manifest.records()) {
    out << r.image_id << ',' << r.subject_id << ',' << r.session << ',' << to_char(r.gender) << ','
        << r.source_path.value_or("") << '\n';
  }
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  write_manifest(manifest, out);
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

std::vector<std::string> sample_subjects(const DatasetManifest& manifest, std::size_t count,
                                         std::uint64_t seed) {
  std::vector<std::string> subjects = manifest.subjects();
  if (count > subjects.size()) {
    throw Error(ErrorKind::TooFewSubjects, "requested " + std::to_string(count) + " of " +
                                               std::to_string(subjects.size()) + " subjects");
  }
  Rng rng(seed);
  rng.shuffle(std::span<std::string>(subjects));
  subjects.resize(count);
  std::sort(subjects.begin(), subjects.end());
  return subjects;
}

Variant Variant::filtered(std::string id) {
  if (id.empty()) throw Error(ErrorKind::Validation, "filtered variant needs a filter_id");
  return Variant{std::move(id)};
}

std::string Variant::tag() const { return filter_id ? "f:" + *filter_id : std::string("orig"); }

Variant Variant::parse(std::string_view tag) {
  if (tag == "orig") return original();
  if (tag.starts_with("f:") && tag.size() > 2) return filtered(std::string(tag.substr(2)));
  throw Error(ErrorKind::Parse, "bad variant tag '" + std::string(tag) + "'");
}

std::string EmbeddingKey::to_string() const { return image_id + "|" + variant.tag(); }

EmbeddingKey EmbeddingKey::parse(std::string_view text) {
  const auto bar = text.find('|');
  if (bar == std::string_view::npos || bar == 0) {
    throw Error(ErrorKind::Parse, "bad embedding key '" + std::string(text) + "'");
  }
  return EmbeddingKey{std::string(text.substr(0, bar)), Variant::parse(text.substr(bar + 1))};
}

void validate_filters(std::span<const FilterDescriptor> filters) {
  std::set<std::pair<std::string_view, std::string_view>> seen;
  for (const auto& f : filters) {
    if (f.filter_id.empty()) throw Error(ErrorKind::Validation, "filter with empty filter_id");
    if (!seen.emplace(f.app, f.filter_id).second) {
      throw Error(ErrorKind::Validation,
                  "filter_id '" + f.filter_id + "' repeated within app '" + f.app + "'");
    }
  }
}

EmbeddingStore::EmbeddingStore(std::size_t dim) : dim_(dim) {
  if (dim == 0) throw Error(ErrorKind::Validation, "embedding dimension must be positive");
}

void EmbeddingStore::check_vector(const EmbeddingKey& key, std::span<const float> vec) const {
  if (vec.size() != dim_) {
    throw Error(ErrorKind::DimMismatch, key.to_string() + " has length " +
                                            std::to_string(vec.size()) + ", store dim " +
                                            std::to_string(dim_));
  }
  double sq = 0.0;
  for (float v : vec) {
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::NonFiniteValue, key.to_string() + " has a non-finite component");
    }
    sq += static_cast<double>(v) * v;
  }
  if (!(sq > 0.0)) throw Error(ErrorKind::Validation, key.to_string() + " has zero norm");
}

void EmbeddingStore::insert(EmbeddingKey key, std::vector<float> vec) {
  check_vector(key, vec);
  if (entries_.count(key)) {
    throw Error(ErrorKind::DuplicateKey, "duplicate embedding key " + key.to_string());
  }
  entries_.emplace(std::move(key), std::move(vec));
}

void EmbeddingStore::assign(const EmbeddingKey& key, std::vector<float> vec) {
  check_vector(key, vec);
  entries_[key] = std::move(vec);
}

const std::vector<float>* EmbeddingStore::find(const EmbeddingKey& key) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : &it->second;
}

const std::vector<float>& EmbeddingStore::at(const EmbeddingKey& key) const {
  if (const auto* v = find(key)) return *v;
  throw Error(ErrorKind::MissingEmbedding, "no embedding for " + key.to_string());
}

void EmbeddingStore::merge(const EmbeddingStore& other) {
  if (other.dim_ != dim_) {
    throw Error(ErrorKind::DimMismatch, "cannot merge dim " + std::to_string(other.dim_) +
                                            " into dim " + std::to_string(dim_));
  }
  for (const auto& [k, v] : other.entries_) insert(k, v);
}

EmbeddingStore read_emb1(std::istream& in, std::optional<std::size_t> expected_dim) {
  binary::expect_magic(in, kEmbMagic);
  const auto dim = binary::read_le<std::uint32_t>(in, "EMB1 dim");
  const auto count = binary::read_le<std::uint32_t>(in, "EMB1 count");
  if (expected_dim && *expected_dim != dim) {
    throw Error(ErrorKind::DimMismatch, "file dim " + std::to_string(dim) + ", expected " +
                                            std::to_string(*expected_dim));
  }
  EmbeddingStore store(dim);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto key = EmbeddingKey::parse(binary::read_short_string(in, "EMB1 key"));
    std::vector<float> vec(dim);
    for (auto& v : vec) v = binary::read_f32(in, "EMB1 vector");
    store.insert(std::move(key), std::move(vec));
  }
  return store;
}

EmbeddingStore read_embedding_csv(std::istream& in, std::optional<std::size_t> expected_dim) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::Parse, "empty embedding CSV");
  detail::strip_cr(line);
  const auto header = detail::split(line, ',');
  if (header.size() < 2 || header[0] != "key") {
    throw Error(ErrorKind::Parse, "embedding CSV header must be key,v0,...");
  }
  const std::size_t dim = header.size() - 1;
  if (expected_dim && *expected_dim != dim) {
    throw Error(ErrorKind::DimMismatch, "CSV dim " + std::to_string(dim) + ", expected " +
                                            std::to_string(*expected_dim));
  }
  EmbeddingStore store(dim);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.empty()) continue;
    const auto fields = detail::split(line, ',');
    if (fields.size() != dim + 1) {
      throw Error(ErrorKind::DimMismatch, "line " + std::to_string(line_no) + " has " +
                                              std::to_string(fields.size() - 1) + " values");
    }
    std::vector<float> vec(dim);
    for (std::size_t i = 0; i < dim; ++i) vec[i] = detail::parse_float(fields[i + 1]);
    store.insert(EmbeddingKey::parse(fields[0]), std::move(vec));
  }
  return store;
}

EmbeddingStore load_embeddings(const std::filesystem::path& path,
                               std::optional<std::size_t> expected_dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::MissingInput, "cannot open embeddings " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  const bool is_emb1 = in.gcount() == 4 && std::string_view(magic, 4) == kEmbMagic;
  in.clear();
  in.seekg(0);
  return is_emb1 ? read_emb1(in, expected_dim) : read_embedding_csv(in, expected_dim);
}

void write_emb1(const EmbeddingStore& store, std::ostream& out) {
  if (store.size() > 0xFFFFFFFFull) throw Error(ErrorKind::Validation, "too many records");
  binary::write_magic(out, kEmbMagic);
  binary::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.dim()));
  binary::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& [key, vec] : store.entries()) {
    binary::write_short_string(out, key.to_string());
    for (float v : vec) binary::write_f32(out, v);
  }
}

void save_embeddings(const EmbeddingStore& store, const std::filesystem::path& path) {
  // Re-check at the boundary: nothing invalid reaches disk.
  EmbeddingStore checked(store.dim());
  for (const auto& [k, v] : store.entries()) checked.insert(k, v);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  write_emb1(store, out);
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

void save_embeddings_csv(const EmbeddingStore& store, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << "key";
  for (std::size_t i = 0; i < store.dim(); ++i) out << ",v" << i;
  out << '\n';
  char buf[32];
  for (const auto& [key, vec] : store.entries()) {
    out << key.to_string();
    for (float v : vec) {
      auto res = std::to_chars(buf, buf + sizeof buf, v);
      out << ',' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
    }
    out << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

}  // namespace filterbench
