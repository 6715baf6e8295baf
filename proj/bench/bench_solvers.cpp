// Serial reference solvers against the OpenMP ones on the same inputs.

#include <benchmark/benchmark.h>
#include <omp.h>

#include "ebsvie/oracles.hpp"
#include "ebsvie/reference.hpp"

using namespace ebsvie;

namespace {

constexpr RegressionBasis kBasis{BasisKind::brownian, 2};

const PathEnsemble& ensemble(std::size_t n, std::size_t m) {
    static thread_local std::size_t cached_n = 0;
    static thread_local std::size_t cached_m = 0;
    static thread_local PathEnsemble e = simulate_paths(make_grid(0.0, 1.0, 1), 1, 1, 1);
    if (cached_n != n || cached_m != m) {
        e = simulate_paths(make_grid(0.0, 1.0, n), m, 1, 17);
        cached_n = n;
        cached_m = m;
    }
    return e;
}

void BM_bsde_reference(benchmark::State& state) {
    const PathEnsemble& e = ensemble(state.range(0), state.range(1));
    const BsdeSpec spec = oracles::stationary_bsde(e, 0.5, 0.3);
    for (auto _ : state) {
        benchmark::DoNotOptimize(reference::solve_bsde(spec, e, kBasis));
    }
}

void BM_bsde_parallel(benchmark::State& state) {
    const PathEnsemble& e = ensemble(state.range(0), state.range(1));
    const BsdeSpec spec = oracles::stationary_bsde(e, 0.5, 0.3);
    omp_set_num_threads(static_cast<int>(state.range(2)));
    for (auto _ : state) {
        benchmark::DoNotOptimize(solve_bsde(spec, e, kBasis));
    }
}

void BM_ebsvie_reference(benchmark::State& state) {
    const PathEnsemble& e = ensemble(state.range(0), state.range(1));
    const EbsvieSpec spec = oracles::stationary_problem(e, 0.5, 0.3);
    for (auto _ : state) {
        benchmark::DoNotOptimize(reference::solve_ebsvie(spec, e, kBasis));
    }
}

void BM_ebsvie_parallel(benchmark::State& state) {
    const PathEnsemble& e = ensemble(state.range(0), state.range(1));
    const EbsvieSpec spec = oracles::stationary_problem(e, 0.5, 0.3);
    omp_set_num_threads(static_cast<int>(state.range(2)));
    for (auto _ : state) {
        benchmark::DoNotOptimize(solve_ebsvie(spec, e, kBasis));
    }
}

}  // namespace

BENCHMARK(BM_bsde_reference)->Args({64, 4000})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_bsde_parallel)->Args({64, 4000, 1})->Args({64, 4000, 4})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ebsvie_reference)->Args({32, 1000})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ebsvie_parallel)->Args({32, 1000, 1})->Args({32, 1000, 4})->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
