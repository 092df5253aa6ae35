// google-benchmark harness for the attention kernels: quadratic reference vs
// tiled, forward and backward, over sequence length and block shape.
//
// Run a focused subset with --benchmark_filter, e.g.:
//   ./bench_kernels --benchmark_filter='flash_forward/512'

#include <benchmark/benchmark.h>

#include "sigattn/attn.hpp"
#include "sigattn/core.hpp"
#include "sigattn/flash.hpp"

namespace {

using namespace sigattn;

constexpr int kHeadDim = 64;

AttnConfig bench_config() {
    AttnConfig cfg;
    cfg.activation = Activation::sigmoid;
    cfg.bias = BiasSpec::neg_log_n();
    return cfg;
}

struct Problem {
    Matrix Q, K, V, dO;
};

Problem make_problem(int n) {
    Rng rng(0xb39cULL + static_cast<std::uint64_t>(n));
    return Problem{rng_normal(rng, n, kHeadDim), rng_normal(rng, n, kHeadDim),
                   rng_normal(rng, n, kHeadDim), rng_normal(rng, n, kHeadDim)};
}

void naive_forward(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const Problem p = make_problem(n);
    const AttnConfig cfg = bench_config();
    for (auto _ : state) {
        AttnResult r = attn_forward(p.Q, p.K, p.V, cfg);
        benchmark::DoNotOptimize(r.O.data.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n) * n);
}

void naive_backward(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const Problem p = make_problem(n);
    const AttnConfig cfg = bench_config();
    for (auto _ : state) {
        GradTriple g = attn_backward(p.Q, p.K, p.V, p.dO, cfg);
        benchmark::DoNotOptimize(g.dQ.data.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n) * n);
}

void flash_forward_bench(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const int br = static_cast<int>(state.range(1));
    const int bc = static_cast<int>(state.range(2));
    const Problem p = make_problem(n);
    const AttnConfig cfg = bench_config();
    long long aux = 0;
    for (auto _ : state) {
        auto [O, mem] = flash_forward(p.Q, p.K, p.V, cfg, BlockSpec{br, bc});
        benchmark::DoNotOptimize(O.data.data());
        aux = mem.aux_floats;
    }
    state.counters["aux_floats"] = static_cast<double>(aux);
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n) * n);
}

void flash_backward_bench(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const int br = static_cast<int>(state.range(1));
    const int bc = static_cast<int>(state.range(2));
    const Problem p = make_problem(n);
    const AttnConfig cfg = bench_config();
    long long aux = 0;
    for (auto _ : state) {
        auto [g, mem] = flash_backward(p.Q, p.K, p.V, p.dO, cfg, BlockSpec{br, bc});
        benchmark::DoNotOptimize(g.dQ.data.data());
        aux = mem.aux_floats;
    }
    state.counters["aux_floats"] = static_cast<double>(aux);
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n) * n);
}

}  // namespace

BENCHMARK(naive_forward)->Arg(256)->Arg(512)->Arg(1024)->Unit(benchmark::kMillisecond);
BENCHMARK(naive_backward)->Arg(256)->Arg(512)->Arg(1024)->Unit(benchmark::kMillisecond);
BENCHMARK(flash_forward_bench)
    ->Args({256, 128, 128})
    ->Args({512, 128, 128})
    ->Args({512, 128, 64})
    ->Args({1024, 128, 128})
    ->Unit(benchmark::kMillisecond);
BENCHMARK(flash_backward_bench)
    ->Args({256, 128, 128})
    ->Args({512, 128, 128})
    ->Args({512, 128, 64})
    ->Args({1024, 128, 128})
    ->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
