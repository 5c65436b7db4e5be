#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "filterbench/data_model.hpp"
#include "filterbench/error.hpp"
#include "filterbench/metrics.hpp"
#include "filterbench/mitigation.hpp"
#include "filterbench/pipeline.hpp"
#include "filterbench/pixel_analysis.hpp"
#include "filterbench/protocol.hpp"
#include "filterbench/synth.hpp"

namespace fs = std::filesystem;
using namespace filterbench;
using nlohmann::json;

namespace {

struct Train {
  double learning_rate = 1e-3;
  std::size_t batch_size = 256;
  std::size_t max_epochs = 2000;
  std::size_t patience = 50;
  std::string optimizer = "accelerated";

  void add(CLI::App* cmd) {
    cmd->add_option("--lr", learning_rate, "Learning rate")->capture_default_str();
    cmd->add_option("--batch", batch_size, "Minibatch size")->capture_default_str();
    cmd->add_option("--max-epochs", max_epochs)->capture_default_str();
    cmd->add_option("--patience", patience, "Early-stopping patience in epochs")->capture_default_str();
    cmd->add_option("--map-optimizer", optimizer, "accelerated | adam")->capture_default_str();
  }

  TrainConfig config() const {
    TrainConfig cfg;
    cfg.learning_rate = learning_rate;
    cfg.batch_size = batch_size;
    cfg.max_epochs = max_epochs;
    cfg.patience = patience;
    if (optimizer == "adam") {
      cfg.map_optimizer = MapOptimizer::Adam;
    } else if (optimizer != "accelerated") {
      throw Error(ErrorKind::Validation, "--map-optimizer must be accelerated or adam");
    }
    cfg.validate();
    return cfg;
  }
};

MitigationRouting parse_routing(const std::string& s) {
  if (s == "classifier") return MitigationRouting::ClassifierGated;
  if (s == "oracle") return MitigationRouting::OracleLabel;
  throw Error(ErrorKind::Validation, "--routing must be classifier or oracle");
}

EmbeddingStore load_all(const std::vector<std::string>& paths) {
  std::optional<EmbeddingStore> store;
  for (const auto& p : paths) {
    auto one = load_embeddings(p);
    if (!store) {
      store = std::move(one);
    } else {
      store->merge(one);
    }
  }
  if (!store) throw Error(ErrorKind::MissingInput, "no embeddings given");
  return std::move(*store);
}

std::string safe_name(const std::string& id) {
  std::string out;
  for (char c : id) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_';
  return out;
}

void save_models(const TrainedSplit& models, std::uint64_t split_seed, const fs::path& dir) {
  fs::create_directories(dir / "maps");
  save_classifier(models.classifier, dir / "classifier.lcls1");
  json maps = json::object();
  for (const auto& [tag, map] : models.maps) {
    const std::string rel = "maps/" + safe_name(map.filter_id) + ".lmap1";
    save_linear_map(map, dir / rel);
    maps[tag] = rel;
  }
  write_json({{"classifier", "classifier.lcls1"},
              {"classes", models.classifier.classes},
              {"maps", maps},
              {"split_seed", split_seed}},
             dir / "index.json");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"filterbench: face-filter impact evaluation toolkit"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker cap (0: FILTERBENCH_THREADS or runtime default)");

  // select-filters
  auto* sel = app.add_subcommand("select-filters", "Quantify filters by difference imaging and select per bin");
  std::string sel_pairs;
  std::string sel_out;
  std::uint64_t sel_seed = 0;
  bool per_pair = false;
  std::size_t analysis_size = 256;
  sel->add_option("--pairs", sel_pairs, "CSV filter_id,original_path,filtered_path")->required();
  sel->add_option("--out", sel_out, "Output JSON")->required();
  sel->add_option("--seed", sel_seed)->capture_default_str();
  sel->add_flag("--per-pair-otsu", per_pair, "Binarize each pair, average the ratios");
  sel->add_option("--analysis-size", analysis_size, "Common size for mixed-size inputs")->capture_default_str();

  // make-protocol
  auto* mp = app.add_subcommand("make-protocol", "Emit the genuine/impostor pair list for one mode");
  std::string mp_manifest;
  std::string mp_mode;
  std::string mp_out;
  int images_per_subject = 3;
  mp->add_option("--manifest", mp_manifest)->required();
  mp->add_option("--mode", mp_mode, "ovo | fvf:<id> | fvo:<id>")->required();
  mp->add_option("--out", mp_out)->required();
  mp->add_option("--images-per-subject", images_per_subject)->capture_default_str();

  // score
  auto* sc = app.add_subcommand("score", "Cosine-score a protocol");
  std::string sc_protocol;
  std::vector<std::string> sc_emb;
  std::string sc_out;
  std::string sc_csv;
  sc->add_option("--protocol", sc_protocol)->required();
  sc->add_option("--embeddings", sc_emb, "EMB1 or CSV files, merged")->required();
  sc->add_option("--out", sc_out, "SCR1 output")->required();
  sc->add_option("--csv", sc_csv, "Also write label,score CSV");
  sc->add_option("--threads", threads);

  // metrics
  auto* mt = app.add_subcommand("metrics", "d', FMR thresholds and FNMR from a score file");
  std::string mt_scores;
  std::vector<double> fmr{1e-4, 1e-5};
  std::size_t hist_bins = 0;
  std::string mt_out;
  std::string mt_hist;
  mt->add_option("--scores", mt_scores)->required();
  mt->add_option("--fmr", fmr, "Target FMRs")->delimiter(',')->capture_default_str();
  mt->add_option("--hist-bins", hist_bins)->capture_default_str();
  mt->add_option("--out", mt_out)->required();
  mt->add_option("--hist-out", mt_hist, "Histogram CSV (default: <out>.hist.csv when --hist-bins > 0)");

  // train-mitigation
  auto* tm = app.add_subcommand("train-mitigation", "Train filter classifier and restoration maps over splits");
  std::string tm_manifest;
  std::vector<std::string> tm_emb;
  std::vector<std::string> tm_filters;
  std::size_t splits = 5;
  std::uint64_t tm_seed = 0;
  std::string tm_out;
  std::string routing = "classifier";
  Train train;
  tm->add_option("--manifest", tm_manifest)->required();
  tm->add_option("--embeddings", tm_emb)->required();
  tm->add_option("--filters", tm_filters)->delimiter(',')->required();
  tm->add_option("--splits", splits)->capture_default_str();
  tm->add_option("--seed", tm_seed)->capture_default_str();
  tm->add_option("--out", tm_out, "Model directory")->required();
  tm->add_option("--routing", routing, "classifier | oracle")->capture_default_str();
  tm->add_option("--images-per-subject", images_per_subject)->capture_default_str();
  tm->add_option("--fmr", fmr)->delimiter(',')->capture_default_str();
  train.add(tm);

  // apply-mitigation
  auto* am = app.add_subcommand("apply-mitigation", "Detect filters and restore embeddings");
  std::string am_models;
  std::vector<std::string> am_emb;
  std::string am_out;
  std::string am_routing = "classifier";
  am->add_option("--models", am_models, "Model directory (or one split_k inside it)")->required();
  am->add_option("--embeddings", am_emb)->required();
  am->add_option("--out", am_out)->required();
  am->add_option("--routing", am_routing, "classifier | oracle")->capture_default_str();

  // synth
  auto* sy = app.add_subcommand("synth", "Generate a synthetic manifest and embedding store");
  SyntheticDatasetSpec ds;
  std::string sy_manifest;
  std::string sy_emb;
  std::vector<std::string> sy_filters;
  sy->add_option("--subjects", ds.subjects)->capture_default_str();
  sy->add_option("--images", ds.images_per_subject)->capture_default_str();
  sy->add_option("--dim", ds.dim)->capture_default_str();
  sy->add_option("--sw", ds.intra_noise, "Intra-subject angular noise")->capture_default_str();
  sy->add_option("--sb", ds.inter_separation, "Inter-subject centroid spread")->capture_default_str();
  sy->add_option("--seed", ds.seed)->capture_default_str();
  sy->add_option("--out-manifest", sy_manifest)->required();
  sy->add_option("--out-emb", sy_emb)->required();
  sy->add_option("--filter", sy_filters, "id=affine:<strength>[@seed], repeatable");

  // synth-filter
  auto* sf = app.add_subcommand("synth-filter", "Apply a synthetic filter to embeddings or an image");
  std::string sf_kind = "identity";
  SyntheticFilterSpec fs_spec;
  std::vector<int> delta{0, 0, 0};
  std::string sf_id;
  std::string sf_emb;
  std::string sf_image;
  std::string sf_out;
  sf->add_option("--kind", sf_kind, "identity | affine | color | occlusion | noise")->capture_default_str();
  sf->add_option("--strength", fs_spec.strength)->capture_default_str();
  sf->add_option("--seed", fs_spec.seed)->capture_default_str();
  sf->add_option("--delta", delta, "ColorShift r,g,b")->delimiter(',')->expected(3);
  sf->add_option("--fraction", fs_spec.fraction, "Occlusion fraction");
  sf->add_option("--sigma", fs_spec.sigma, "Noise sigma");
  sf->add_option("--filter-id", sf_id, "Variant id for embedding output");
  auto* sf_in = sf->add_option("--embeddings", sf_emb, "Input store (originals are filtered)");
  sf->add_option("--image", sf_image, "Input image (PNG/BMP)")->excludes(sf_in);
  sf->add_option("--out", sf_out)->required();

  // synth-pairs
  auto* sp = app.add_subcommand("synth-pairs", "Write synthetic original/filtered PNG pairs and pairs.csv");
  std::vector<std::string> sp_filters;
  std::size_t sp_count = 8;
  std::size_t sp_size = 128;
  std::uint64_t sp_seed = 0;
  std::string sp_dir;
  sp->add_option("--filter", sp_filters, "id=kind[:param], repeatable")->required();
  sp->add_option("--count", sp_count)->capture_default_str();
  sp->add_option("--size", sp_size)->capture_default_str();
  sp->add_option("--seed", sp_seed)->capture_default_str();
  sp->add_option("--out-dir", sp_dir)->required();

  // run
  auto* rn = app.add_subcommand("run", "Run the staged pipeline from a JSON config");
  std::string rn_config;
  std::string rn_stage = "select";
  std::string rn_stop;
  std::string rn_out;
  std::optional<std::uint64_t> rn_seed;
  bool verbose = false;
  rn->add_option("--config", rn_config)->required();
  rn->add_option("--stage", rn_stage, "Resume from this stage")->capture_default_str();
  rn->add_option("--stop-after", rn_stop, "Last stage to run");
  rn->add_option("--output-dir", rn_out, "Overrides output_dir");
  rn->add_option("--seed", rn_seed, "Overrides seed");
  rn->add_option("--threads", threads);
  rn->add_flag("-v,--verbose", verbose);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*rn) {
      auto cfg = load_run_config(rn_config);
      if (!rn_out.empty()) cfg.output_dir = fs::absolute(rn_out);
      if (rn_seed) cfg.seed = *rn_seed;
      if (threads > 0) cfg.threads = threads;
      PipelineOptions opts;
      opts.start = parse_stage(rn_stage);
      if (!rn_stop.empty()) opts.stop = parse_stage(rn_stop);
      opts.verbose = verbose;
      const auto result = run_pipeline(cfg, opts);
      if (result.exit_code != 0) {
        std::cerr << "error: stage " << to_string(*result.failed_stage) << ": " << result.message << '\n';
      } else {
        std::cout << "config " << cfg.hash() << ": " << result.completed.size() << " stage(s) complete\n";
      }
      return result.exit_code;
    }

    configure_threads(threads);

    if (*sel) {
      AnalysisOptions opts;
      opts.mode = per_pair ? OtsuMode::PerPair : OtsuMode::MeanImage;
      opts.analysis_size = analysis_size;
      const auto stats = analyze_filters(load_pairs_manifest(sel_pairs), opts);
      json arr = json::array();
      for (const auto& s : stats) arr.push_back(to_json(s));
      write_json({{"filters", arr}, {"selection", to_json(select_filters(stats, sel_seed))}}, sel_out);
    } else if (*mp) {
      const auto manifest = load_manifest(mp_manifest, images_per_subject);
      const auto protocol = build_protocol(manifest, ProtocolMode::parse(mp_mode));
      save_protocol_csv(protocol, mp_out);
      const auto c = protocol.counts();
      std::cout << protocol.mode.to_string() << ": " << c.genuine << " genuine, " << c.impostor << " impostor\n";
    } else if (*sc) {
      const auto protocol = load_protocol_csv(sc_protocol);
      const auto store = load_all(sc_emb);
      auto scores = score_protocol(protocol, store, threads);
      scores.matcher = "cosine";
      save_scores(scores, sc_out);
      if (!sc_csv.empty()) save_scores_csv(scores, sc_csv);
    } else if (*mt) {
      const auto report = compute_metrics(load_scores(mt_scores), fmr, hist_bins);
      write_json(to_json(report), mt_out);
      if (report.histogram) save_histogram_csv(*report.histogram, mt_hist.empty() ? mt_out + ".hist.csv" : mt_hist);
    } else if (*tm) {
      const auto manifest = load_manifest(tm_manifest, images_per_subject);
      const auto store = load_all(tm_emb);
      MitigationOptions mo;
      mo.filters = tm_filters;
      mo.splits = splits;
      mo.seed = tm_seed;
      mo.train = train.config();
      mo.fmr_targets = fmr;
      mo.routing = parse_routing(routing);
      mo.threads = threads;
      mo.keep_models = true;
      const auto report = run_mitigation(manifest, store, mo);
      const fs::path out = tm_out;
      json splits_index = json::array();
      for (std::size_t k = 0; k < report.models.size(); ++k) {
        const std::string sub = "split_" + std::to_string(k);
        save_models(report.models[k], report.splits[k].seed, out / sub);
        splits_index.push_back(sub);
      }
      write_json({{"splits", splits_index}, {"default", splits_index.at(0)}}, out / "index.json");
      write_json(to_json(report), out / "mitigation.json");
    } else if (*am) {
      fs::path dir = am_models;
      if (!fs::exists(dir / "classifier.lcls1")) dir /= read_json(dir / "index.json").at("default").get<std::string>();
      const auto index = read_json(dir / "index.json");
      const auto classifier = load_classifier(dir / index.at("classifier").get<std::string>());
      std::map<std::string, LinearMap> maps;
      for (const auto& [tag, rel] : index.at("maps").items()) maps.emplace(tag, load_linear_map(dir / rel.get<std::string>()));
      save_embeddings(apply_mitigation(load_all(am_emb), classifier, maps, parse_routing(am_routing)), am_out);
    } else if (*sy) {
      if (ds.separation_warning()) {
        std::cerr << "warning: --sw >= --sb; genuine/impostor separation is not guaranteed\n";
      }
      auto data = gen_embeddings(ds);
      for (const auto& f : sy_filters) {
        const auto eq = f.find('=');
        if (eq == std::string::npos) throw Error(ErrorKind::Parse, "--filter expects id=spec");
        std::string spec_text = f.substr(eq + 1);
        std::uint64_t seed = fnv1a(f.substr(0, eq));
        if (const auto at = spec_text.find('@'); at != std::string::npos) {
          seed = std::stoull(spec_text.substr(at + 1));
          spec_text.resize(at);
        }
        apply_synthetic_filter(data.store, f.substr(0, eq), parse_filter_spec(spec_text, seed));
      }
      save_manifest(data.manifest, sy_manifest);
      save_embeddings(data.store, sy_emb);
    } else if (*sf) {
      fs_spec.kind = parse_filter_kind(sf_kind);
      if (delta.size() == 3) fs_spec.delta_rgb = {delta[0], delta[1], delta[2]};
      if (!sf_image.empty()) {
        save_png(apply_synthetic_filter(load_rgb(sf_image), fs_spec), sf_out);
      } else if (!sf_emb.empty()) {
        if (sf_id.empty()) throw Error(ErrorKind::Validation, "--filter-id is required for embeddings");
        auto store = load_embeddings(sf_emb);
        apply_synthetic_filter(store, sf_id, fs_spec);
        save_embeddings(store, sf_out);
      } else {
        throw Error(ErrorKind::Validation, "give --embeddings or --image");
      }
    } else if (*sp) {
      std::map<std::string, SyntheticFilterSpec> filters;
      for (const auto& f : sp_filters) {
        const auto eq = f.find('=');
        if (eq == std::string::npos) throw Error(ErrorKind::Parse, "--filter expects id=kind[:param]");
        filters[f.substr(0, eq)] = parse_filter_spec(f.substr(eq + 1), fnv1a(f.substr(0, eq)));
      }
      std::cout << write_synthetic_pairs(sp_dir, filters, sp_count, sp_size, sp_seed).string() << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
