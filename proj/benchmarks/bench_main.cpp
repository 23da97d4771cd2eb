#include <benchmark/benchmark.h>

#include <thread>

#include "bailkit/bail_methods.hpp"
#include "bailkit/random.hpp"
#include "bailkit/report.hpp"
#include "bailkit/stats.hpp"

using namespace bailkit;

namespace {

ScatterFixture tool_fixture() {
    return load_scatter_fixture(std::string(BAILKIT_SOURCE_DIR) + "/core/data/fixtures/scatter_tool.txt");
}

void BM_Wilson(benchmark::State& state) {
    std::size_t k = 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(wilson_halfwidth(k, 16300));
        k = (k + 17) % 16300;
    }
}
BENCHMARK(BM_Wilson);

void BM_DistanceCorrelation(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    SplitMix64 rng(1);
    std::vector<double> x(n), y(n);
    for (auto& v : x) v = static_cast<double>(rng.below(10000));
    for (auto& v : y) v = static_cast<double>(rng.below(10000));
    for (auto _ : state) benchmark::DoNotOptimize(distance_correlation(x, y));
}
BENCHMARK(BM_DistanceCorrelation)->Arg(32)->Arg(256);

void BM_PermutationTest(benchmark::State& state) {
    const auto f = tool_fixture();
    const auto threads = static_cast<std::size_t>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(dcor_permutation_p(f.bail_pct, f.refusal_pct, 10000, 0, threads));
}
BENCHMARK(BM_PermutationTest)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_KendallTau(benchmark::State& state) {
    const auto f = tool_fixture();
    for (auto _ : state) benchmark::DoNotOptimize(kendall_tau(f.bail_pct, f.refusal_pct));
}
BENCHMARK(BM_KendallTau);

void BM_ParseWellbeing(benchmark::State& state) {
    const GlyphBinding g;
    const std::string text = "I have thought about it for a while and my honest answer is <wellbeing>" + g.bail +
                             "/wellbeing>. The conversation felt demeaning because the user kept insulting me.";
    for (auto _ : state) benchmark::DoNotOptimize(parse_wellbeing_response(text, g));
}
BENCHMARK(BM_ParseWellbeing);

void BM_DetectString(benchmark::State& state) {
    const std::string text(2000, 'x');
    for (auto _ : state) benchmark::DoNotOptimize(detect_string_bail(text + "SwitchConversation", "SWITCHCONVERSATION"));
}
BENCHMARK(BM_DetectString);

} // namespace
BENCHMARK_MAIN();
