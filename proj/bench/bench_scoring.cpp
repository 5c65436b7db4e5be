// Pair scoring throughput: OpenMP kernel vs the serial reference.
// Args: subjects, embedding dim (and threads for the parallel kernel).

#include <benchmark/benchmark.h>

#include <map>
#include <memory>
#include <utility>

#include "filterbench/protocol.hpp"
#include "filterbench/synth.hpp"

using namespace filterbench;

namespace {

struct Fixture {
  SyntheticDataset ds;
  PairProtocol protocol;
};

const Fixture& fixture(int subjects, int dim) {
  static std::map<std::pair<int, int>, std::unique_ptr<Fixture>> cache;
  auto& slot = cache[{subjects, dim}];
  if (!slot) {
    SyntheticDatasetSpec spec;
    spec.subjects = static_cast<std::size_t>(subjects);
    spec.dim = static_cast<std::size_t>(dim);
    spec.intra_noise = 1.0;
    spec.inter_separation = 3.0;
    spec.seed = 1;
    auto ds = gen_embeddings(spec);
    apply_synthetic_filter(ds.store, "a", {.kind = SyntheticFilterKind::AffineEmbedding, .seed = 2});
    auto protocol = build_protocol(ds.manifest, ProtocolMode::filt_vs_orig("a"));
    slot = std::make_unique<Fixture>(Fixture{std::move(ds), std::move(protocol)});
  }
  return *slot;
}

void BM_ScoreReference(benchmark::State& state) {
  const auto& f = fixture(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  for (auto _ : state) benchmark::DoNotOptimize(score_pairs_reference(f.protocol, f.ds.store));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(f.protocol.pairs.size()));
}

void BM_ScoreOpenMP(benchmark::State& state) {
  const auto& f = fixture(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  const int threads = static_cast<int>(state.range(2));
  for (auto _ : state) benchmark::DoNotOptimize(score_pairs(f.protocol, f.ds.store, threads));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(f.protocol.pairs.size()));
}

}  // namespace

BENCHMARK(BM_ScoreReference)->Args({200, 128})->Args({500, 512})->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_ScoreOpenMP)
    ->Args({200, 128, 1})
    ->Args({500, 512, 1})
    ->Args({500, 512, 4})
    ->Unit(benchmark::kMillisecond)
    ->UseRealTime();

BENCHMARK_MAIN();
