#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "filterbench/mitigation.hpp"
#include "filterbench/pixel_analysis.hpp"
#include "filterbench/protocol.hpp"

namespace filterbench {

enum class Stage { Select, Score, Metrics, Summary, Mitigate };

inline constexpr Stage kAllStages[] = {Stage::Select, Stage::Score, Stage::Metrics, Stage::Summary,
                                       Stage::Mitigate};

std::string_view to_string(Stage s) noexcept;
Stage parse_stage(std::string_view text);

// Relative paths are resolved against base_dir (the config file's directory).
struct RunConfig {
  std::filesystem::path base_dir;
  std::filesystem::path manifest;
  int images_per_subject = 3;
  std::vector<std::filesystem::path> embeddings;
  std::optional<std::filesystem::path> pixel_pairs;  // enables the select stage
  AnalysisOptions analysis;
  // Filters to evaluate; empty means the selection, else every filter in the store.
  std::vector<std::string> filters;
  // Bin per filter when no pixel analysis is run.
  std::map<std::string, int> filter_bins;
  // App/platform per filter, for grouped mitigation rows.
  std::map<std::string, std::string> filter_apps;
  // Filters for the mitigation experiment; empty means all evaluated filters.
  std::vector<std::string> mitigation_filters;
  std::vector<double> fmr_targets = {1e-4, 1e-5};
  std::uint64_t seed = 0;
  std::size_t splits = 5;  // 0 disables mitigation
  std::size_t hist_bins = 0;
  TrainConfig train;
  MitigationRouting routing = MitigationRouting::ClassifierGated;
  std::filesystem::path output_dir = "report";
  int threads = 0;

  std::filesystem::path resolve(const std::filesystem::path& p) const;
  // Throws Validation for malformed fields.
  void validate() const;
  // Fields that determine results; paths as written, no output_dir/threads.
  nlohmann::json canonical_json() const;
  std::string hash() const;  // 16 hex digits of FNV-1a over canonical_json().dump()
};

RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

struct PipelineOptions {
  Stage start = Stage::Select;
  std::optional<Stage> stop;  // inclusive
  bool verbose = false;
};

struct PipelineResult {
  int exit_code = 0;
  std::optional<Stage> failed_stage;
  std::string message;
  std::vector<Stage> completed;
};

// select -> score -> metrics -> summary -> mitigate. Each stage reads the
// previous stages' files from output_dir, so a run can resume at any stage.
// Writes status.json on success and failure; never throws for data errors.
PipelineResult run_pipeline(const RunConfig& cfg, const PipelineOptions& opts = {});

// Report file stem for a mode: "ovo", "fvf_<id>", "fvo_<id>".
std::string mode_file_stem(const ProtocolMode& mode);

nlohmann::json to_json(const DiffStats& stats);
nlohmann::json to_json(const SelectionResult& selection);

// FNV-1a 64 over the bytes of a string.
std::uint64_t fnv1a(std::string_view bytes) noexcept;
std::string hex64(std::uint64_t v);

void write_json(const nlohmann::json& j, const std::filesystem::path& path);
nlohmann::json read_json(const std::filesystem::path& path);

// Sets the OpenMP worker cap: explicit value, else FILTERBENCH_THREADS, else
// the runtime default. Returns the cap in effect (0 when left to the runtime).
int configure_threads(int requested);

}  // namespace filterbench
