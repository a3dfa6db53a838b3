// Serial reference kernels against the OpenMP kernels at model-sized shapes.
// Thread count follows OMP_NUM_THREADS.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "crossfuse/kernels.hpp"

namespace kn = crossfuse::kernels;

namespace {

std::vector<float> random_vector(std::size_t n, unsigned seed) {
    std::mt19937 rng(seed);
    std::normal_distribution<float> d;
    std::vector<float> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

// Rows: batch * (T + 1) tokens at batch 32, T 64.
constexpr std::size_t kRows = 32 * 65;

template <bool Parallel>
void BM_Matmul(benchmark::State& state) {
    const auto k = static_cast<std::size_t>(state.range(0));
    const auto n = static_cast<std::size_t>(state.range(1));
    const auto a = random_vector(kRows * k, 1), b = random_vector(k * n, 2);
    std::vector<float> c(kRows * n);
    for (auto _ : state) {
        if constexpr (Parallel)
            kn::matmul<float>(a, b, c, kRows, k, n);
        else
            kn::reference::matmul<float>(a, b, c, kRows, k, n);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(kRows * k * n));
}

template <bool Parallel>
void BM_LayerNorm(benchmark::State& state) {
    const auto cols = static_cast<std::size_t>(state.range(0));
    const auto x = random_vector(kRows * cols, 3), gamma = random_vector(cols, 4), beta = random_vector(cols, 5);
    std::vector<float> y(x.size()), mean(kRows), rstd(kRows);
    for (auto _ : state) {
        if constexpr (Parallel)
            kn::layer_norm_forward<float>(x, gamma, beta, y, mean, rstd, kRows, cols, 1e-5f);
        else
            kn::reference::layer_norm_forward<float>(x, gamma, beta, y, mean, rstd, kRows, cols, 1e-5f);
        benchmark::DoNotOptimize(y.data());
    }
}

template <bool Parallel>
void BM_Attention(benchmark::State& state) {
    kn::AttentionShape s;
    s.batch = 32;
    s.q_len = s.kv_len = 65;
    s.heads = static_cast<std::size_t>(state.range(0));
    s.head_dim = static_cast<std::size_t>(state.range(1)) / s.heads;
    const std::size_t n = s.batch * s.q_len * s.model_dim();
    const auto q = random_vector(n, 6), k = random_vector(n, 7), v = random_vector(n, 8);
    std::vector<float> probs(s.probs_size()), ctx(n);
    for (auto _ : state) {
        if constexpr (Parallel)
            kn::attention_forward<float>(q, k, v, probs, ctx, s);
        else
            kn::reference::attention_forward<float>(q, k, v, probs, ctx, s);
        benchmark::DoNotOptimize(ctx.data());
    }
}

}  // namespace

BENCHMARK(BM_Matmul<false>)->Name("matmul/reference")->Args({32, 64})->Args({512, 512})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Matmul<true>)->Name("matmul/parallel")->Args({32, 64})->Args({512, 512})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_LayerNorm<false>)->Name("layer_norm/reference")->Arg(32)->Arg(512)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_LayerNorm<true>)->Name("layer_norm/parallel")->Arg(32)->Arg(512)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Attention<false>)->Name("attention/reference")->Args({4, 32})->Args({8, 512})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Attention<true>)->Name("attention/parallel")->Args({4, 32})->Args({8, 512})->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
