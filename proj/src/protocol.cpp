#include "filterbench/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>

#include "filterbench/binary_io.hpp"
#include "filterbench/error.hpp"
#include "text_util.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace filterbench {

ProtocolMode ProtocolMode::filt_vs_filt(std::string filter_id) {
  if (filter_id.empty()) throw Error(ErrorKind::Validation, "fvf mode needs a filter_id");
  return {Kind::FiltVsFilt, std::move(filter_id)};
}

ProtocolMode ProtocolMode::filt_vs_orig(std::string filter_id) {
  if (filter_id.empty()) throw Error(ErrorKind::Validation, "fvo mode needs a filter_id");
  return {Kind::FiltVsOrig, std::move(filter_id)};
}

std::string ProtocolMode::to_string() const {
  switch (kind) {
    case Kind::OrigVsOrig: return "ovo";
    case Kind::FiltVsFilt: return "fvf:" + filter_id;
    case Kind::FiltVsOrig: return "fvo:" + filter_id;
  }
  return "ovo";
}

ProtocolMode ProtocolMode::parse(std::string_view text) {
  if (text == "ovo") return orig_vs_orig();
  if (text.starts_with("fvf:")) return filt_vs_filt(std::string(text.substr(4)));
  if (text.starts_with("fvo:")) return filt_vs_orig(std::string(text.substr(4)));
  throw Error(ErrorKind::Parse, "unknown protocol mode '" + std::string(text) +
                                    "' (expected ovo, fvf:<id> or fvo:<id>)");
}

PairCounts expected_pair_counts(ProtocolMode::Kind kind, std::uint64_t n, std::uint64_t s) {
  const std::uint64_t images = n * s;
  if (kind == ProtocolMode::Kind::FiltVsOrig) {
    return {n * s * (s - (s > 0 ? 1 : 0)), images * (n > 0 ? (n - 1) * s : 0)};
  }
  const std::uint64_t genuine = n * (s * (s - (s > 0 ? 1 : 0)) / 2);
  const std::uint64_t all = images * (images - (images > 0 ? 1 : 0)) / 2;
  return {genuine, all - genuine};
}

PairCounts PairProtocol::counts() const {
  PairCounts c;
  for (const auto& p : pairs) (p.label == Label::Genuine ? c.genuine : c.impostor)++;
  return c;
}

PairProtocol build_protocol(const DatasetManifest& manifest, const ProtocolMode& mode,
                            bool require_impostors) {
  if (require_impostors && manifest.subject_count() < 2) {
    throw Error(ErrorKind::TooFewSubjects, "impostor pairs need at least 2 subjects, manifest has " +
                                               std::to_string(manifest.subject_count()));
  }
  const auto& records = manifest.records();
  const std::size_t n = records.size();
  const auto counts = expected_pair_counts(mode.kind, manifest.subject_count(),
                                           static_cast<std::uint64_t>(manifest.images_per_subject()));
  if (counts.genuine + counts.impostor > std::numeric_limits<std::uint32_t>::max() ||
      2 * n > std::numeric_limits<std::uint32_t>::max()) {
    throw Error(ErrorKind::Validation, "protocol too large");
  }

  // Subject ids interned so the inner loops compare integers.
  std::map<std::string_view, std::uint32_t> subject_index;
  for (const auto& s : manifest.subjects()) subject_index.emplace(s, subject_index.size());
  std::vector<std::uint32_t> subject_of(n);
  for (std::size_t i = 0; i < n; ++i) subject_of[i] = subject_index.at(records[i].subject_id);

  PairProtocol protocol;
  protocol.mode = mode;
  protocol.pairs.reserve(counts.genuine + counts.impostor);

  auto add_endpoints = [&](const Variant& variant) {
    for (const auto& r : records) {
      protocol.endpoints.push_back({r.image_id, variant});
      protocol.endpoint_subjects.push_back(r.subject_id);
    }
  };

  // records are sorted by image_id, so emitting (i, j) in lexicographic index
  // order yields pairs sorted by (probe key, reference key).
  if (mode.kind == ProtocolMode::Kind::FiltVsOrig) {
    add_endpoints(Variant::filtered(mode.filter_id));
    add_endpoints(Variant::original());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const Label label = subject_of[i] == subject_of[j] ? Label::Genuine : Label::Impostor;
        protocol.pairs.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(n + j), label});
      }
    }
  } else {
    add_endpoints(mode.kind == ProtocolMode::Kind::FiltVsFilt ? Variant::filtered(mode.filter_id)
                                                              : Variant::original());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const Label label = subject_of[i] == subject_of[j] ? Label::Genuine : Label::Impostor;
        protocol.pairs.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j), label});
      }
    }
  }
  return protocol;
}

double cosine_similarity(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size()) {
    throw Error(ErrorKind::DimMismatch, "cosine of lengths " + std::to_string(u.size()) + " and " +
                                            std::to_string(v.size()));
  }
  double dot = 0.0;
  double uu = 0.0;
  double vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += static_cast<double>(u[i]) * v[i];
    uu += static_cast<double>(u[i]) * u[i];
    vv += static_cast<double>(v[i]) * v[i];
  }
  if (!(uu > 0.0) || !(vv > 0.0)) throw Error(ErrorKind::ZeroNorm, "cosine of a zero vector");
  return std::clamp(dot / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

namespace {

std::vector<const std::vector<float>*> resolve_endpoints(const PairProtocol& protocol,
                                                         const EmbeddingStore& store) {
  std::vector<const std::vector<float>*> vecs;
  vecs.reserve(protocol.endpoints.size());
  for (const auto& key : protocol.endpoints) vecs.push_back(&store.at(key));
  return vecs;
}

// Fixed-order dot product with eight independent partial sums.
inline double dot_fixed(const double* a, const double* b, std::size_t dim) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= dim; i += 8) {
    for (std::size_t k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
  }
  for (std::size_t k = 0; i < dim; ++i, ++k) acc[k] += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

}  // namespace

std::vector<float> score_pairs(const PairProtocol& protocol, const EmbeddingStore& store,
                               int threads) {
  const auto vecs = resolve_endpoints(protocol, store);
  const std::size_t dim = store.dim();
  const auto endpoints = static_cast<std::int64_t>(vecs.size());
  int workers = 1;
#ifdef _OPENMP
  workers = threads > 0 ? threads : omp_get_max_threads();
#else
  (void)threads;
#endif

  // Unit-normalized copies in double; each row is written by one thread.
  std::vector<double> unit(vecs.size() * dim);
#pragma omp parallel for schedule(static) num_threads(workers)
  for (std::int64_t e = 0; e < endpoints; ++e) {
    const auto& v = *vecs[static_cast<std::size_t>(e)];
    double* row = &unit[static_cast<std::size_t>(e) * dim];
    double sq = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      row[i] = v[i];
      sq += row[i] * row[i];
    }
    const double inv = 1.0 / std::sqrt(sq);
    for (std::size_t i = 0; i < dim; ++i) row[i] *= inv;
  }

  std::vector<float> scores(protocol.pairs.size());
  const auto pair_count = static_cast<std::int64_t>(protocol.pairs.size());
  const double* base = unit.data();
  const Pair* pairs = protocol.pairs.data();
#pragma omp parallel for schedule(static, 4096) num_threads(workers)
  for (std::int64_t k = 0; k < pair_count; ++k) {
    const Pair& p = pairs[k];
    const double s = dot_fixed(base + p.probe * dim, base + p.reference * dim, dim);
    scores[static_cast<std::size_t>(k)] = static_cast<float>(std::clamp(s, -1.0, 1.0));
  }
  return scores;
}

std::vector<float> score_pairs_reference(const PairProtocol& protocol, const EmbeddingStore& store) {
  const auto vecs = resolve_endpoints(protocol, store);
  std::vector<float> scores;
  scores.reserve(protocol.pairs.size());
  for (const auto& p : protocol.pairs) {
    scores.push_back(static_cast<float>(cosine_similarity(*vecs[p.probe], *vecs[p.reference])));
  }
  return scores;
}

ScoreSet split_scores(const PairProtocol& protocol, std::span<const float> pair_scores,
                      const std::function<bool(const std::string&)>& keep_subject) {
  if (pair_scores.size() != protocol.pairs.size()) {
    throw Error(ErrorKind::Validation, "score count does not match pair count");
  }
  std::vector<char> keep(protocol.endpoints.size(), 1);
  if (keep_subject) {
    if (protocol.endpoint_subjects.size() != protocol.endpoints.size()) {
      throw Error(ErrorKind::Validation, "protocol carries no endpoint subjects");
    }
    for (std::size_t e = 0; e < keep.size(); ++e) keep[e] = keep_subject(protocol.endpoint_subjects[e]);
  }
  ScoreSet out;
  out.mode = protocol.mode.to_string();
  const auto counts = protocol.counts();
  out.genuine.reserve(counts.genuine);
  out.impostor.reserve(counts.impostor);
  for (std::size_t k = 0; k < protocol.pairs.size(); ++k) {
    const auto& p = protocol.pairs[k];
    if (!keep[p.probe] || !keep[p.reference]) continue;
    (p.label == Label::Genuine ? out.genuine : out.impostor).push_back(pair_scores[k]);
  }
  return out;
}

ScoreSet score_protocol(const PairProtocol& protocol, const EmbeddingStore& store, int threads) {
  const auto scores = score_pairs(protocol, store, threads);
  return split_scores(protocol, scores);
}

void save_protocol_csv(const PairProtocol& protocol, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  std::vector<std::string> keys;
  keys.reserve(protocol.endpoints.size());
  for (const auto& e : protocol.endpoints) keys.push_back(e.to_string());
  out << "probe_key,reference_key,label\n";
  for (const auto& p : protocol.pairs) {
    out << keys[p.probe] << ',' << keys[p.reference] << ','
        << (p.label == Label::Genuine ? "genuine" : "impostor") << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

PairProtocol load_protocol_csv(const std::filesystem::path& path, const DatasetManifest* manifest) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::MissingInput, "cannot open protocol " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::Parse, "empty protocol file");
  detail::strip_cr(line);
  if (line != "probe_key,reference_key,label") {
    throw Error(ErrorKind::Parse, "protocol header must be probe_key,reference_key,label");
  }

  PairProtocol protocol;
  std::map<std::string, std::uint32_t> index;
  auto intern = [&](std::string_view text) {
    auto [it, inserted] = index.emplace(std::string(text), static_cast<std::uint32_t>(index.size()));
    if (inserted) protocol.endpoints.push_back(EmbeddingKey::parse(text));
    return it->second;
  };
  bool probe_filtered = false;
  bool reference_filtered = false;
  std::string filter_id;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 3) {
      throw Error(ErrorKind::Parse, "protocol line " + std::to_string(line_no) + " malformed");
    }
    Pair p;
    p.probe = intern(f[0]);
    p.reference = intern(f[1]);
    if (f[2] == "genuine") {
      p.label = Label::Genuine;
    } else if (f[2] == "impostor") {
      p.label = Label::Impostor;
    } else {
      throw Error(ErrorKind::Parse, "protocol line " + std::to_string(line_no) + ": bad label");
    }
    for (auto idx : {p.probe, p.reference}) {
      const auto& v = protocol.endpoints[idx].variant;
      if (!v.is_original()) {
        if (!filter_id.empty() && filter_id != *v.filter_id) {
          throw Error(ErrorKind::Validation, "protocol mixes filters " + filter_id + " and " +
                                                 *v.filter_id);
        }
        filter_id = *v.filter_id;
      }
    }
    probe_filtered |= !protocol.endpoints[p.probe].variant.is_original();
    reference_filtered |= !protocol.endpoints[p.reference].variant.is_original();
    protocol.pairs.push_back(p);
  }
  if (!probe_filtered && !reference_filtered) {
    protocol.mode = ProtocolMode::orig_vs_orig();
  } else if (probe_filtered && reference_filtered) {
    protocol.mode = ProtocolMode::filt_vs_filt(filter_id);
  } else {
    protocol.mode = ProtocolMode::filt_vs_orig(filter_id);
  }
  if (manifest) {
    for (const auto& e : protocol.endpoints) {
      const auto* r = manifest->find(e.image_id);
      if (!r) throw Error(ErrorKind::Validation, "protocol image '" + e.image_id + "' not in manifest");
      protocol.endpoint_subjects.push_back(r->subject_id);
    }
  }
  return protocol;
}

void save_scores(const ScoreSet& scores, const std::filesystem::path& path) {
  if (scores.genuine.size() > 0xFFFFFFFFull || scores.impostor.size() > 0xFFFFFFFFull) {
    throw Error(ErrorKind::Validation, "score set too large for SCR1");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  binary::write_magic(out, "SCR1");
  binary::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(scores.genuine.size()));
  binary::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(scores.impostor.size()));
  for (float s : scores.genuine) binary::write_f32(out, s);
  for (float s : scores.impostor) binary::write_f32(out, s);
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

ScoreSet load_scores(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::MissingInput, "cannot open scores " + path.string());
  binary::expect_magic(in, "SCR1");
  ScoreSet s;
  s.genuine.resize(binary::read_le<std::uint32_t>(in, "SCR1 genuine count"));
  s.impostor.resize(binary::read_le<std::uint32_t>(in, "SCR1 impostor count"));
  for (auto& v : s.genuine) v = binary::read_f32(in, "SCR1 scores");
  for (auto& v : s.impostor) v = binary::read_f32(in, "SCR1 scores");
  for (const auto* list : {&s.genuine, &s.impostor}) {
    for (float v : *list) {
      if (!std::isfinite(v)) throw Error(ErrorKind::NonFiniteValue, path.string() + " has a non-finite score");
    }
  }
  return s;
}

void save_scores_csv(const ScoreSet& scores, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << "label,score\n";
  char buf[32];
  auto emit = [&](const char* label, float v) {
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    out << label << ',' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf)) << '\n';
  };
  for (float v : scores.genuine) emit("genuine", v);
  for (float v : scores.impostor) emit("impostor", v);
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

}  // namespace filterbench
