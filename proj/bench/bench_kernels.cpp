#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "linearlens/kernels.hpp"
#include "linearlens/linearity.hpp"
#include "linearlens/model.hpp"
#include "linearlens/training.hpp"

namespace {

using namespace linearlens;

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

// Decoder-shaped products: (batch*seq) × d · d × n.
template <auto Kernel>
void BM_Matmul(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  const auto a = random_vec(m * k, 1), b = random_vec(k * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    Kernel(a, b, c, m, k, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * k * n));
}
BENCHMARK(BM_Matmul<kernels::reference::matmul>)->Args({512, 64, 256})->Args({512, 256, 64})->Args({512, 64, 64});
BENCHMARK(BM_Matmul<kernels::parallel::matmul>)->Args({512, 64, 256})->Args({512, 256, 64})->Args({512, 64, 64});

template <auto Kernel>
void BM_MatmulTN(benchmark::State& state) {
  const std::size_t m = 512, k = 64, n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vec(m * k, 1), b = random_vec(m * n, 2);
  std::vector<double> c(k * n);
  for (auto _ : state) {
    Kernel(a, b, c, m, k, n, false);
    benchmark::DoNotOptimize(c.data());
  }
}
BENCHMARK(BM_MatmulTN<kernels::reference::matmul_tn>)->Arg(64)->Arg(256);
BENCHMARK(BM_MatmulTN<kernels::parallel::matmul_tn>)->Arg(64)->Arg(256);

template <auto Kernel>
void BM_Attention(benchmark::State& state) {
  const kernels::AttentionShape s{8, static_cast<std::size_t>(state.range(0)), 4, 16};
  const auto qkv = random_vec(s.batch * s.seq * 3 * s.model_dim(), 3);
  const std::vector<unsigned char> mask(s.batch * s.seq, 1);
  std::vector<double> probs(s.batch * s.heads * s.seq * s.seq), out(s.batch * s.seq * s.model_dim());
  for (auto _ : state) {
    Kernel(qkv, mask, probs, out, s);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_Attention<kernels::reference::attention_forward>)->Arg(64);
BENCHMARK(BM_Attention<kernels::parallel::attention_forward>)->Arg(64);

// Layer-pair profile of a 6-layer trace: serial reference vs OpenMP over pairs.
void BM_Profile(benchmark::State& state) {
  const std::size_t tokens = 2048, d = 64;
  EmbeddingTrace t;
  for (std::size_t l = 0; l <= 6; ++l) {
    Matrix m(tokens, d);
    const auto v = random_vec(tokens * d, 10 + l);
    std::copy(v.begin(), v.end(), m.data());
    t.layers.push_back({l, std::move(m)});
  }
  const ProfileOptions opts{.parallel = state.range(0) != 0};
  for (auto _ : state) benchmark::DoNotOptimize(profile(t, opts).pairs.data());
}
BENCHMARK(BM_Profile)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

// One optimizer step of the acceptance-size model (2 layers, d=64, batch 8 × 64).
void BM_TrainStep(benchmark::State& state) {
  TrainConfig c;
  c.model.n_layers = 2;
  c.shards = static_cast<std::size_t>(state.range(0));
  DecoderModel model(c.model, 0);
  WindowSampler sampler(story_token_stream(1, 200), 1);
  const TrainBatch batch = sampler.next(8, 64);
  AdamOptimizer opt(c.adam, model.parameter_count());
  const RegularizerConfig reg{RegularizerKind::kCosine, 0.5};
  for (auto _ : state) benchmark::DoNotOptimize(train_step(model, batch, reg, opt, {.shards = c.shards}).total);
}
BENCHMARK(BM_TrainStep)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
