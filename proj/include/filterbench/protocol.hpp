#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "filterbench/data_model.hpp"

namespace filterbench {

enum class Label : std::uint8_t { Genuine, Impostor };

struct ProtocolMode {
  enum class Kind { OrigVsOrig, FiltVsFilt, FiltVsOrig };

  Kind kind = Kind::OrigVsOrig;
  std::string filter_id;  // empty for OrigVsOrig

  static ProtocolMode orig_vs_orig() { return {}; }
  static ProtocolMode filt_vs_filt(std::string filter_id);
  static ProtocolMode filt_vs_orig(std::string filter_id);

  // "ovo", "fvf:<filter_id>", "fvo:<filter_id>"
  std::string to_string() const;
  static ProtocolMode parse(std::string_view text);

  bool operator==(const ProtocolMode&) const = default;
};

struct PairCounts {
  std::uint64_t genuine = 0;
  std::uint64_t impostor = 0;

  bool operator==(const PairCounts&) const = default;
};

// Closed forms for N subjects with S images each.
//   OrigVsOrig / FiltVsFilt: genuine N*C(S,2), impostor C(NS,2) - N*C(S,2)
//   FiltVsOrig:              genuine N*S*(S-1), impostor NS*(N-1)S
PairCounts expected_pair_counts(ProtocolMode::Kind kind, std::uint64_t subjects,
                                std::uint64_t images_per_subject);

// Indices refer to PairProtocol::endpoints.
struct Pair {
  std::uint32_t probe = 0;
  std::uint32_t reference = 0;
  Label label = Label::Genuine;

  bool operator==(const Pair&) const = default;
};

struct PairProtocol {
  ProtocolMode mode;
  std::vector<EmbeddingKey> endpoints;
  // Subject of each endpoint, parallel to endpoints.
  std::vector<std::string> endpoint_subjects;
  // Sorted by (probe key, reference key); no duplicates or self pairs.
  std::vector<Pair> pairs;

  PairCounts counts() const;
};

// Exact genuine/impostor enumeration. For FiltVsOrig the probe is always the
// filtered image and the reference an original of a different image.
// Throws TooFewSubjects when fewer than two subjects are present, unless
// require_impostors is false (genuine-only protocol).
PairProtocol build_protocol(const DatasetManifest& manifest, const ProtocolMode& mode,
                            bool require_impostors = true);

// dot(u,v) / (|u||v|) accumulated in double, clamped to [-1, 1].
// Throws DimMismatch / ZeroNorm.
double cosine_similarity(std::span<const float> u, std::span<const float> v);

struct ScoreSet {
  std::vector<float> genuine;
  std::vector<float> impostor;
  std::string mode;
  std::string matcher;

  bool operator==(const ScoreSet&) const = default;
};

// One score per pair, in pair order. OpenMP-parallel over disjoint pair
// ranges; each score is computed by the same fixed-order kernel, so output is
// bit-identical for every thread count. threads <= 0 uses the OpenMP default.
// Throws MissingEmbedding for the first absent endpoint.
std::vector<float> score_pairs(const PairProtocol& protocol, const EmbeddingStore& store,
                               int threads = 0);

// Serial, straightforward scorer built on cosine_similarity; kept as the
// reference for score_pairs.
std::vector<float> score_pairs_reference(const PairProtocol& protocol, const EmbeddingStore& store);

// Splits pair-order scores into genuine/impostor lists (protocol order).
// When keep_subject is given, only pairs whose endpoints both satisfy it
// are kept.
ScoreSet split_scores(const PairProtocol& protocol, std::span<const float> pair_scores,
                      const std::function<bool(const std::string&)>& keep_subject = {});

ScoreSet score_protocol(const PairProtocol& protocol, const EmbeddingStore& store, int threads = 0);

// CSV `probe_key,reference_key,label`.
void save_protocol_csv(const PairProtocol& protocol, const std::filesystem::path& path);
// Mode is inferred from the variants present; subjects are recovered from
// the manifest when given, otherwise left empty.
PairProtocol load_protocol_csv(const std::filesystem::path& path,
                               const DatasetManifest* manifest = nullptr);

// SCR1: magic, u32 genuine count, u32 impostor count, f32 genuine block,
// f32 impostor block, all little-endian.
void save_scores(const ScoreSet& scores, const std::filesystem::path& path);
ScoreSet load_scores(const std::filesystem::path& path);
// CSV `label,score`.
void save_scores_csv(const ScoreSet& scores, const std::filesystem::path& path);

}  // namespace filterbench
