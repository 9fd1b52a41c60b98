// Serial vs OpenMP execution of the segment kernel, the dense matmul and the
// beam-search decoder.

#include <random>
#include <set>

#include <benchmark/benchmark.h>

#include "ramnet/address_decoder.hpp"
#include "ramnet/kernels.hpp"
#include "ramnet/segment_kernel.hpp"

using namespace ramnet;

namespace {

Exec exec_of(const benchmark::State& state) { return state.range(0) == 0 ? Exec::serial : Exec::parallel; }

// T steps, each writing and reading K random slots out of M.
struct SegmentFixture {
    std::vector<SlotSegment> segments;
    Matrix values;
    std::size_t steps;

    SegmentFixture(std::size_t T, std::size_t K, Slot M, std::size_t dv) : values(T, dv), steps(T) {
        std::mt19937_64 rng(7);
        std::uniform_int_distribution<Slot> slot(0, M - 1);
        std::uniform_real_distribution<double> w(0.01, 0.2);
        std::normal_distribution<double> g;
        for (double& x : values.flat()) x = g(rng);
        std::vector<AccessEvent> events;
        std::uint32_t entry = 0;
        for (std::size_t t = 0; t < T; ++t) {
            for (AccessKind kind : {AccessKind::write, AccessKind::read}) {
                std::set<Slot> chosen;
                while (chosen.size() < K) chosen.insert(slot(rng));
                for (Slot s : chosen) events.push_back({s, static_cast<std::int64_t>(t), kind, w(rng), entry++});
            }
        }
        segments = build_segments(events);
    }
};

void BM_RunSegments(benchmark::State& state) {
    static const SegmentFixture fx(1024, 8, 1024, 64);
    const SegmentRunConfig cfg{DecayRule{1.0}, MemoryState::kDefaultEps, 1.0 / 1024};
    for (auto _ : state) {
        auto out = run_segments(fx.segments, fx.values, fx.steps, cfg, exec_of(state));
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(event_count(fx.segments)));
}
BENCHMARK(BM_RunSegments)->Arg(0)->Arg(1)->ArgName("parallel")->Unit(benchmark::kMillisecond);

void BM_Matmul(benchmark::State& state) {
    const std::size_t n = 256;
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g;
    Matrix a(n, n), b(n, n), out(n, n);
    for (double& x : a.flat()) x = g(rng);
    for (double& x : b.flat()) x = g(rng);
    for (auto _ : state) {
        kernels::matmul(a, b, out, exec_of(state));
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(0)->Arg(1)->ArgName("parallel")->Unit(benchmark::kMillisecond);

void BM_BeamSearch(benchmark::State& state) {
    const int U = static_cast<int>(state.range(0));
    const DecoderConfig cfg(U, 4, 8);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g;
    std::vector<double> key(static_cast<std::size_t>(cfg.key_dim()));
    for (double& x : key) x = g(rng);
    for (auto _ : state) benchmark::DoNotOptimize(beam_search_topk(key, cfg));
}
BENCHMARK(BM_BeamSearch)->Arg(2)->Arg(5)->Arg(8)->ArgName("U");

}  // namespace

BENCHMARK_MAIN();
