#include "filterbench/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <iostream>
#include <set>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "filterbench/error.hpp"
#include "filterbench/metrics.hpp"
#include "filterbench/protocol.hpp"
#include "text_util.hpp"

namespace filterbench {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Stage s) noexcept {
  switch (s) {
    case Stage::Select: return "select";
    case Stage::Score: return "score";
    case Stage::Metrics: return "metrics";
    case Stage::Summary: return "summary";
    case Stage::Mitigate: return "mitigate";
  }
  return "select";
}

Stage parse_stage(std::string_view text) {
  for (Stage s : kAllStages) {
    if (to_string(s) == text) return s;
  }
  throw Error(ErrorKind::Parse, "unknown stage '" + std::string(text) +
                                    "' (select, score, metrics, summary, mitigate)");
}

std::uint64_t fnv1a(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_json(const json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::MissingInput, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Parse, path.string() + ": " + e.what());
  }
}

int configure_threads(int requested) {
  int cap = requested;
  if (cap <= 0) {
    if (const char* env = std::getenv("FILTERBENCH_THREADS"); env != nullptr && *env != '\0') {
      try {
        cap = detail::parse_int(env);
      } catch (const Error&) {
        throw Error(ErrorKind::Validation, "FILTERBENCH_THREADS must be an integer");
      }
      if (cap < 0) throw Error(ErrorKind::Validation, "FILTERBENCH_THREADS must be >= 0");
    }
  }
#ifdef _OPENMP
  if (cap > 0) omp_set_num_threads(cap);
#endif
  return std::max(cap, 0);
}

// ---- config ----

fs::path RunConfig::resolve(const fs::path& p) const {
  if (p.is_absolute() || base_dir.empty()) return p;
  return base_dir / p;
}

void RunConfig::validate() const {
  if (manifest.empty()) throw Error(ErrorKind::Validation, "config: manifest is required");
  if (embeddings.empty()) throw Error(ErrorKind::Validation, "config: at least one embeddings file is required");
  if (images_per_subject < 1) throw Error(ErrorKind::Validation, "config: images_per_subject must be >= 1");
  if (fmr_targets.empty()) throw Error(ErrorKind::Validation, "config: fmr_targets must not be empty");
  for (double t : fmr_targets) {
    if (!(t > 0.0 && t < 1.0)) throw Error(ErrorKind::Validation, "config: fmr targets must lie in (0, 1)");
  }
  for (const auto& [id, bin] : filter_bins) {
    if (bin < 1 || bin > BinId::kCount) {
      throw Error(ErrorKind::Validation, "config: bin for '" + id + "' must be 1..5");
    }
  }
  if (analysis.analysis_size == 0) throw Error(ErrorKind::Validation, "config: analysis_size must be > 0");
  if (threads < 0) throw Error(ErrorKind::Validation, "config: threads must be >= 0");
  train.validate();
}

namespace {

std::string optimizer_name(MapOptimizer m) { return m == MapOptimizer::Adam ? "adam" : "accelerated"; }
std::string routing_name(MitigationRouting r) {
  return r == MitigationRouting::OracleLabel ? "oracle" : "classifier";
}

std::vector<std::string> path_strings(const std::vector<fs::path>& paths) {
  std::vector<std::string> out;
  for (const auto& p : paths) out.push_back(p.generic_string());
  return out;
}

}  // namespace

json RunConfig::canonical_json() const {
  json j;
  j["manifest"] = manifest.generic_string();
  j["images_per_subject"] = images_per_subject;
  j["embeddings"] = path_strings(embeddings);
  j["pixel_pairs"] = pixel_pairs ? json(pixel_pairs->generic_string()) : json(nullptr);
  j["per_pair_otsu"] = analysis.mode == OtsuMode::PerPair;
  j["analysis_size"] = analysis.analysis_size;
  j["filters"] = filters;
  j["filter_bins"] = filter_bins;
  j["filter_apps"] = filter_apps;
  j["mitigation_filters"] = mitigation_filters;
  j["fmr_targets"] = fmr_targets;
  j["seed"] = seed;
  j["splits"] = splits;
  j["hist_bins"] = hist_bins;
  j["train"] = {{"learning_rate", train.learning_rate},
                {"batch_size", train.batch_size},
                {"max_epochs", train.max_epochs},
                {"patience", train.patience},
                {"min_improvement", train.min_improvement},
                {"optimizer", optimizer_name(train.map_optimizer)}};
  j["routing"] = routing_name(routing);
  return j;
}

std::string RunConfig::hash() const { return hex64(fnv1a(canonical_json().dump())); }

RunConfig parse_run_config(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw Error(ErrorKind::Parse, "run config must be a JSON object");
  static const std::set<std::string> known{
      "manifest",     "images_per_subject", "embeddings",  "pixel_pairs", "per_pair_otsu",
      "analysis_size", "filters",           "filter_bins", "filter_apps", "mitigation_filters",
      "fmr_targets",  "seed",               "splits",      "hist_bins",   "train",
      "routing",      "output_dir",         "threads"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw Error(ErrorKind::Validation, "config: unknown field '" + key + "'");
  }
  RunConfig cfg;
  cfg.base_dir = base_dir;
  try {
    cfg.manifest = j.at("manifest").get<std::string>();
    cfg.images_per_subject = j.value("images_per_subject", cfg.images_per_subject);
    const auto& emb = j.at("embeddings");
    if (emb.is_string()) {
      cfg.embeddings.push_back(emb.get<std::string>());
    } else {
      for (const auto& e : emb) cfg.embeddings.push_back(e.get<std::string>());
    }
    if (j.contains("pixel_pairs") && !j["pixel_pairs"].is_null()) {
      cfg.pixel_pairs = j["pixel_pairs"].get<std::string>();
    }
    if (j.value("per_pair_otsu", false)) cfg.analysis.mode = OtsuMode::PerPair;
    cfg.analysis.analysis_size = j.value("analysis_size", cfg.analysis.analysis_size);
    cfg.filters = j.value("filters", cfg.filters);
    cfg.filter_bins = j.value("filter_bins", cfg.filter_bins);
    cfg.filter_apps = j.value("filter_apps", cfg.filter_apps);
    cfg.mitigation_filters = j.value("mitigation_filters", cfg.mitigation_filters);
    cfg.fmr_targets = j.value("fmr_targets", cfg.fmr_targets);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.splits = j.value("splits", cfg.splits);
    cfg.hist_bins = j.value("hist_bins", cfg.hist_bins);
    if (j.contains("train")) {
      const auto& t = j["train"];
      cfg.train.learning_rate = t.value("learning_rate", cfg.train.learning_rate);
      cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
      cfg.train.max_epochs = t.value("max_epochs", cfg.train.max_epochs);
      cfg.train.patience = t.value("patience", cfg.train.patience);
      cfg.train.min_improvement = t.value("min_improvement", cfg.train.min_improvement);
      const auto opt = t.value("optimizer", std::string("accelerated"));
      if (opt == "adam") {
        cfg.train.map_optimizer = MapOptimizer::Adam;
      } else if (opt != "accelerated") {
        throw Error(ErrorKind::Validation, "config: train.optimizer must be accelerated or adam");
      }
    }
    const auto routing = j.value("routing", std::string("classifier"));
    if (routing == "oracle") {
      cfg.routing = MitigationRouting::OracleLabel;
    } else if (routing != "classifier") {
      throw Error(ErrorKind::Validation, "config: routing must be classifier or oracle");
    }
    cfg.output_dir = j.value("output_dir", std::string("report"));
    cfg.threads = j.value("threads", 0);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  return parse_run_config(read_json(path), path.parent_path());
}

// ---- reports ----

namespace {

std::string safe_file_name(std::string_view id) {
  std::string out;
  for (char c : id) {
    const bool safe = std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
    out += safe ? c : '_';
  }
  return out;
}

}  // namespace

std::string mode_file_stem(const ProtocolMode& mode) {
  switch (mode.kind) {
    case ProtocolMode::Kind::OrigVsOrig: return "ovo";
    case ProtocolMode::Kind::FiltVsFilt: return "fvf_" + safe_file_name(mode.filter_id);
    case ProtocolMode::Kind::FiltVsOrig: return "fvo_" + safe_file_name(mode.filter_id);
  }
  return "ovo";
}

json to_json(const DiffStats& stats) {
  return {{"filter_id", stats.filter_id},
          {"otsu_threshold", stats.otsu_threshold},
          {"manipulated_ratio", stats.manipulated_ratio},
          {"bin", stats.bin.value},
          {"otsu_mode", stats.mode == OtsuMode::PerPair ? "per_pair" : "mean_image"}};
}

json to_json(const SelectionResult& selection) {
  json bins = json::object();
  for (int b = 1; b <= BinId::kCount; ++b) bins[std::to_string(b)] = selection.chosen[BinId{b}.index()];
  std::vector<int> excluded;
  for (const auto& b : selection.excluded_bins) excluded.push_back(b.value);
  return {{"quota", selection.quota},
          {"excluded_bins", excluded},
          {"seed", selection.rng_seed},
          {"total", selection.total()},
          {"bins", bins}};
}

namespace {

struct StageFailure {
  Stage stage;
  int exit_code;
  std::string message;
};

class Runner {
 public:
  Runner(const RunConfig& cfg, const PipelineOptions& opts)
      : cfg_(cfg), opts_(opts), out_(cfg.resolve(cfg.output_dir)), hash_(cfg.hash()) {}

  PipelineResult run() {
    PipelineResult result;
    try {
      fs::create_directories(out_);
      json cj = cfg_.canonical_json();
      write_json({{"config", cj}, {"config_hash", hash_}}, out_ / "config.json");
    } catch (const std::exception& e) {
      return finish(result, StageFailure{opts_.start, 2, e.what()});
    }
    bool started = false;
    for (Stage s : kAllStages) {
      if (s == opts_.start) started = true;
      if (!started) continue;
      try {
        log(s, "start");
        run_stage(s);
        result.completed.push_back(s);
      } catch (const Error& e) {
        return finish(result, StageFailure{s, exit_code_for(e.kind()), e.what()});
      } catch (const std::bad_alloc&) {
        return finish(result, StageFailure{s, 3, "out of memory"});
      } catch (const std::exception& e) {
        return finish(result, StageFailure{s, 1, e.what()});
      }
      if (opts_.stop && *opts_.stop == s) break;
    }
    return finish(result, std::nullopt);
  }

 private:
  PipelineResult finish(PipelineResult& result, std::optional<StageFailure> failure) {
    json status;
    status["config_hash"] = hash_;
    std::vector<std::string> done;
    for (Stage s : result.completed) done.emplace_back(to_string(s));
    status["completed_stages"] = done;
    if (failure) {
      result.exit_code = failure->exit_code;
      result.failed_stage = failure->stage;
      result.message = failure->message;
      status["status"] = "failed";
      status["failed_stage"] = std::string(to_string(failure->stage));
      status["exit_code"] = failure->exit_code;
      status["message"] = failure->message;
      // Outputs of the failed stage and later ones are not trustworthy.
      status["partial"] = true;
    } else {
      status["status"] = "complete";
      status["exit_code"] = 0;
      status["partial"] = false;
    }
    try {
      write_json(status, out_ / "status.json");
    } catch (const std::exception&) {
    }
    return result;
  }

  void log(Stage s, const std::string& what) const {
    if (opts_.verbose) std::cerr << "[" << to_string(s) << "] " << what << '\n';
  }

  void run_stage(Stage s) {
    switch (s) {
      case Stage::Select: return select();
      case Stage::Score: return score();
      case Stage::Metrics: return metrics();
      case Stage::Summary: return summary();
      case Stage::Mitigate: return mitigate();
    }
  }

  json stamp(json j) const {
    j["config_hash"] = hash_;
    j["seed"] = cfg_.seed;
    return j;
  }

  fs::path input(const fs::path& p) const {
    const auto full = cfg_.resolve(p);
    if (!fs::exists(full)) throw Error(ErrorKind::MissingInput, "missing input " + full.string());
    return full;
  }

  const DatasetManifest& manifest() {
    if (!manifest_) manifest_ = load_manifest(input(cfg_.manifest), cfg_.images_per_subject);
    return *manifest_;
  }

  const EmbeddingStore& store() {
    if (!store_) {
      std::optional<EmbeddingStore> merged;
      for (const auto& p : cfg_.embeddings) {
        auto one = load_embeddings(input(p));
        if (!merged) {
          merged = std::move(one);
        } else {
          merged->merge(one);
        }
      }
      store_ = std::move(merged);
    }
    return *store_;
  }

  // ---- select ----

  void select() {
    if (!cfg_.pixel_pairs) {
      log(Stage::Select, "no pixel_pairs configured; skipped");
      fs::remove_all(out_ / "select");
      return;
    }
    const auto pairs = load_pairs_manifest(input(*cfg_.pixel_pairs));
    const auto stats = analyze_filters(pairs, cfg_.analysis);
    fs::create_directories(out_ / "select" / "mean_diff");
    fs::create_directories(out_ / "select" / "masks");
    json arr = json::array();
    for (const auto& st : stats) {
      arr.push_back(to_json(st));
      const auto name = safe_file_name(st.filter_id) + ".png";
      save_png(st.mean_diff, out_ / "select" / "mean_diff" / name);
      save_png(binarize(st.mean_diff, st.otsu_threshold), out_ / "select" / "masks" / name);
    }
    write_json(stamp({{"filters", arr}}), out_ / "select" / "diff_stats.json");
    const auto selection = select_filters(stats, cfg_.seed);
    write_json(stamp(to_json(selection)), out_ / "select" / "selection.json");
  }

  std::map<std::string, int> known_bins() const {
    std::map<std::string, int> bins;
    const auto path = out_ / "select" / "diff_stats.json";
    if (fs::exists(path)) {
      const auto stats = read_json(path);
      for (const auto& f : stats.at("filters")) {
        bins[f.at("filter_id").get<std::string>()] = f.at("bin").get<int>();
      }
    }
    for (const auto& [id, bin] : cfg_.filter_bins) bins[id] = bin;
    return bins;
  }

  std::vector<std::string> resolve_filters() {
    if (!cfg_.filters.empty()) return cfg_.filters;
    const auto sel = out_ / "select" / "selection.json";
    if (cfg_.pixel_pairs) {
      if (!fs::exists(sel)) throw Error(ErrorKind::MissingInput, "selection not found; run the select stage");
      std::vector<std::string> out;
      const auto selection = read_json(sel);
      for (const auto& [_, ids] : selection.at("bins").items()) {
        for (const auto& id : ids) out.push_back(id.get<std::string>());
      }
      std::sort(out.begin(), out.end());
      return out;
    }
    std::set<std::string> ids;
    for (const auto& [key, _] : store().entries()) {
      if (key.variant.filter_id) ids.insert(*key.variant.filter_id);
    }
    return {ids.begin(), ids.end()};
  }

  // ---- score ----

  void score() {
    const auto filters = resolve_filters();
    const auto& m = manifest();
    const auto& st = store();
    const fs::path dir = out_ / "scores";
    fs::remove_all(dir);
    fs::create_directories(dir);

    std::vector<ProtocolMode> modes{ProtocolMode::orig_vs_orig()};
    for (const auto& f : filters) {
      modes.push_back(ProtocolMode::filt_vs_filt(f));
      modes.push_back(ProtocolMode::filt_vs_orig(f));
    }

    std::map<std::string, Gender> gender;
    std::size_t female = 0;
    std::size_t male = 0;
    for (const auto& s : m.subjects()) {
      gender[s] = m.gender_of_subject(s);
      female += gender[s] == Gender::F;
      male += gender[s] == Gender::M;
    }
    std::vector<std::pair<std::string, Gender>> groups;
    if (female >= 2) groups.emplace_back("female", Gender::F);
    if (male >= 2) groups.emplace_back("male", Gender::M);

    json index;
    index["filters"] = filters;
    json mode_list = json::array();
    for (const auto& mode : modes) {
      log(Stage::Score, mode.to_string());
      const auto protocol = build_protocol(m, mode);
      const auto pair_scores = score_pairs(protocol, st, cfg_.threads);
      const std::string stem = mode_file_stem(mode);
      auto all = split_scores(protocol, pair_scores);
      all.matcher = "cosine";
      save_scores(all, dir / (stem + ".scr1"));
      json groups_written = json::array({"all"});
      for (const auto& [name, g] : groups) {
        auto part = split_scores(protocol, pair_scores,
                                 [&, g = g](const std::string& subject) { return gender.at(subject) == g; });
        part.matcher = "cosine";
        save_scores(part, dir / (stem + "." + name + ".scr1"));
        groups_written.push_back(name);
      }
      mode_list.push_back({{"mode", mode.to_string()}, {"stem", stem}, {"groups", groups_written}});
    }
    index["modes"] = mode_list;
    write_json(stamp(index), dir / "index.json");
  }

  json score_index() const {
    const auto path = out_ / "scores" / "index.json";
    if (!fs::exists(path)) throw Error(ErrorKind::MissingInput, "score index not found; run the score stage");
    return read_json(path);
  }

  static fs::path group_file(const fs::path& dir, const std::string& stem, const std::string& group,
                             const std::string& ext) {
    return dir / (group == "all" ? stem + ext : stem + "." + group + ext);
  }

  // ---- metrics ----

  void metrics() {
    const auto index = score_index();
    const fs::path dir = out_ / "metrics";
    fs::remove_all(dir);
    fs::create_directories(dir);
    for (const auto& entry : index.at("modes")) {
      const auto stem = entry.at("stem").get<std::string>();
      for (const auto& g : entry.at("groups")) {
        const auto group = g.get<std::string>();
        auto scores = load_scores(group_file(out_ / "scores", stem, group, ".scr1"));
        scores.mode = entry.at("mode").get<std::string>();
        const std::size_t bins = group == "all" ? cfg_.hist_bins : 0;
        const auto report = compute_metrics(scores, cfg_.fmr_targets, bins);
        json j = to_json(report);
        j["group"] = group;
        write_json(stamp(j), group_file(dir, stem, group, ".json"));
        if (report.histogram) save_histogram_csv(*report.histogram, dir / (stem + ".hist.csv"));
      }
    }
  }

  json metrics_report(const std::string& stem, const std::string& group) const {
    const auto path = group_file(out_ / "metrics", stem, group, ".json");
    if (!fs::exists(path)) throw Error(ErrorKind::MissingInput, "metrics not found; run the metrics stage");
    return read_json(path);
  }

  static double d_prime_value(const json& report) {
    const auto& d = report.at("d_prime");
    if (d.is_string()) {
      return d.get<std::string>().front() == '-' ? -std::numeric_limits<double>::infinity()
                                                 : std::numeric_limits<double>::infinity();
    }
    return d.get<double>();
  }

  // ---- summary ----

  void summary() {
    const auto index = score_index();
    const auto bins = known_bins();
    const fs::path dir = out_ / "summary";
    fs::remove_all(dir);
    fs::create_directories(dir);

    std::map<std::string, json> groups_of;
    for (const auto& entry : index.at("modes")) groups_of[entry.at("stem").get<std::string>()] = entry.at("groups");

    std::vector<FilterDPrime> per_filter;
    std::vector<std::string> unbinned;
    const auto baseline = metrics_report("ovo", "all");
    const double baseline_d = d_prime_value(baseline);
    json impact = json::array();
    for (const auto& f : index.at("filters")) {
      const auto id = f.get<std::string>();
      const auto stem = mode_file_stem(ProtocolMode::filt_vs_orig(id));
      const auto report = metrics_report(stem, "all");
      json row;
      row["filter_id"] = id;
      row["d_prime"] = report.at("d_prime");
      row["d_prime_drop"] = baseline_d - d_prime_value(report);
      for (const auto& [label, point] : report.at("fnmr").items()) {
        row["fnmr_increase"][label] = point.at("fnmr").get<double>() - baseline.at("fnmr").at(label).at("fnmr").get<double>();
      }
      impact.push_back(row);

      const auto bin = bins.find(id);
      if (bin == bins.end()) {
        unbinned.push_back(id);
        continue;
      }
      for (const auto& g : groups_of.at(stem)) {
        const auto group = g.get<std::string>();
        const Group grp = group == "female" ? Group::Female : group == "male" ? Group::Male : Group::All;
        per_filter.push_back({id, BinId{bin->second}, grp, d_prime_value(metrics_report(stem, group))});
      }
    }

    const auto rows = summarize_bins(per_filter);
    json table = json::array();
    std::ostringstream csv;
    csv.precision(17);
    csv << "bin,group,mean_d_prime,std_d_prime,filters\n";
    for (const auto& r : rows) {
      table.push_back(to_json(r));
      csv << r.bin.value << ',' << to_string(r.group) << ',' << r.mean << ',' << r.std << ',' << r.filters << '\n';
    }
    write_json(stamp({{"mode", "fvo"}, {"rows", table}, {"unbinned_filters", unbinned}}),
               dir / "bin_summary.json");
    std::ofstream(dir / "bin_summary.csv", std::ios::binary) << csv.str();

    // Two impact rankings: by d' drop and by FNMR increase at the first target.
    const auto first_label = fmr_label(cfg_.fmr_targets.front());
    auto by_key = [&](auto key) {
      std::vector<json> sorted(impact.begin(), impact.end());
      std::stable_sort(sorted.begin(), sorted.end(), [&](const json& a, const json& b) {
        const double ka = key(a);
        const double kb = key(b);
        if (ka != kb) return ka > kb;
        return a.at("filter_id").get<std::string>() < b.at("filter_id").get<std::string>();
      });
      json ids = json::array();
      for (const auto& r : sorted) ids.push_back(r.at("filter_id"));
      return ids;
    };
    json ranking;
    ranking["baseline_d_prime"] = baseline.at("d_prime");
    ranking["filters"] = impact;
    ranking["by_d_prime_drop"] = by_key([](const json& r) { return r.at("d_prime_drop").get<double>(); });
    ranking["by_fnmr_increase"] = by_key(
        [&](const json& r) { return r.at("fnmr_increase").at(first_label).get<double>(); });
    ranking["fnmr_ranking_target"] = first_label;
    write_json(stamp(ranking), dir / "impact_ranking.json");
  }

  // ---- mitigate ----

  void mitigate() {
    const fs::path dir = out_ / "mitigation";
    fs::remove_all(dir);
    if (cfg_.splits == 0) {
      log(Stage::Mitigate, "splits = 0; skipped");
      return;
    }
    MitigationOptions mo;
    if (!cfg_.mitigation_filters.empty()) {
      mo.filters = cfg_.mitigation_filters;
    } else {
      const auto index = score_index();
      for (const auto& f : index.at("filters")) mo.filters.push_back(f.get<std::string>());
    }
    if (mo.filters.empty()) {
      log(Stage::Mitigate, "no filters; skipped");
      return;
    }
    mo.splits = cfg_.splits;
    mo.seed = cfg_.seed;
    mo.train = cfg_.train;
    mo.fmr_targets = cfg_.fmr_targets;
    mo.routing = cfg_.routing;
    mo.threads = cfg_.threads;
    const auto report = run_mitigation(manifest(), store(), mo);
    json j = to_json(report);
    j["routing"] = routing_name(cfg_.routing);
    if (!cfg_.filter_apps.empty()) j["summary"]["apps"] = app_rows(report);
    write_json(stamp(j), dir / "mitigation.json");
  }

  // Per app: per split, average over the app's filters; then mean +/- std.
  json app_rows(const MitigationReport& report) const {
    std::map<std::string, std::set<std::string>> members;
    for (const auto& [id, app] : cfg_.filter_apps) members[app].insert(id);
    auto mean_std = [](const std::vector<double>& v) {
      double mean = 0.0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      double sq = 0.0;
      for (double x : v) sq += (x - mean) * (x - mean);
      return json{{"mean", mean}, {"std", v.size() > 1 ? std::sqrt(sq / static_cast<double>(v.size() - 1)) : 0.0}};
    };
    json out = json::object();
    for (const auto& [app, ids] : members) {
      json row;
      for (std::size_t t = 0; t < report.fmr_targets.size(); ++t) {
        std::vector<double> pre;
        std::vector<double> map;
        for (const auto& s : report.splits) {
          double sp = 0.0;
          double sm = 0.0;
          std::size_t n = 0;
          for (const auto& f : s.filters) {
            if (!ids.count(f.filter_id)) continue;
            sp += f.fnmr_pre[t];
            sm += f.fnmr_mapping[t];
            ++n;
          }
          if (n == 0) continue;
          pre.push_back(sp / static_cast<double>(n));
          map.push_back(sm / static_cast<double>(n));
        }
        if (pre.empty()) continue;
        const auto label = fmr_label(report.fmr_targets[t]);
        row["fnmr_pre"][label] = mean_std(pre);
        row["fnmr_mapping"][label] = mean_std(map);
      }
      if (!row.is_null()) out[app] = row;
    }
    return out;
  }

  const RunConfig& cfg_;
  const PipelineOptions& opts_;
  fs::path out_;
  std::string hash_;
  std::optional<DatasetManifest> manifest_;
  std::optional<EmbeddingStore> store_;
};

}  // namespace

PipelineResult run_pipeline(const RunConfig& cfg, const PipelineOptions& opts) {
  configure_threads(cfg.threads);
  return Runner(cfg, opts).run();
}

}  // namespace filterbench
