// Reference vs parallel kernels on the shapes the alignment layer sees:
// 32x16x16 feature maps, 3x3 convolutions, batch 16 by default.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "casam/tensor/kernels.hpp"

namespace k = casam::tensor::kernels;

namespace {

std::vector<float> noise(std::size_t n, unsigned seed) {
  std::mt19937 gen(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(gen);
  return v;
}

k::ConvGeometry conv_geometry(std::size_t batch) {
  return {.batch = batch, .in_channels = 32, .out_channels = 32, .in_h = 16, .in_w = 16,
          .kernel = 3, .stride = 1, .padding = 1};
}

template <bool Parallel>
void conv_forward(benchmark::State& state) {
  const auto g = conv_geometry(static_cast<std::size_t>(state.range(0)));
  const auto x = noise(g.batch * g.in_channels * g.in_h * g.in_w, 1);
  const auto w = noise(g.out_channels * g.patch(), 2);
  const auto b = noise(g.out_channels, 3);
  std::vector<float> y(g.batch * g.out_channels * g.out_h() * g.out_w());
  for (auto _ : state) {
    if constexpr (Parallel)
      k::parallel::conv2d_forward(g, x, w, b, y);
    else
      k::reference::conv2d_forward(g, x, w, b, y);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(g.batch));
}

template <bool Parallel>
void conv_backward(benchmark::State& state) {
  const auto g = conv_geometry(static_cast<std::size_t>(state.range(0)));
  const auto x = noise(g.batch * g.in_channels * g.in_h * g.in_w, 1);
  const auto w = noise(g.out_channels * g.patch(), 2);
  const auto dy = noise(g.batch * g.out_channels * g.out_h() * g.out_w(), 4);
  std::vector<float> dx(x.size()), dw(w.size()), db(g.out_channels);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::conv2d_backward_input(g, dy, w, dx);
      k::parallel::conv2d_backward_weight(g, x, dy, dw, db);
    } else {
      k::reference::conv2d_backward_input(g, dy, w, dx);
      k::reference::conv2d_backward_weight(g, x, dy, dw, db);
    }
    benchmark::DoNotOptimize(dx.data());
    benchmark::DoNotOptimize(dw.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(g.batch));
}

template <bool Parallel>
void norm_round_trip(benchmark::State& state) {
  const k::NormGeometry g{.batch = static_cast<std::size_t>(state.range(0)), .channels = 32, .positions = 256};
  const std::size_t n = g.batch * g.channels * g.positions;
  const auto x = noise(n, 5), dy = noise(n, 6);
  const std::vector<float> gain(g.channels, 1.0f), bias(g.channels, 0.0f);
  std::vector<float> y(n), xhat(n), rstd(g.batch * g.positions), dx(n), dg(g.channels), db(g.channels);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::layer_norm_forward(g, x, gain, bias, 1e-5f, y, xhat, rstd);
      k::parallel::layer_norm_backward(g, dy, xhat, rstd, gain, dx, dg, db);
    } else {
      k::reference::layer_norm_forward(g, x, gain, bias, 1e-5f, y, xhat, rstd);
      k::reference::layer_norm_backward(g, dy, xhat, rstd, gain, dx, dg, db);
    }
    benchmark::DoNotOptimize(dx.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(g.batch));
}

}  // namespace

BENCHMARK(conv_forward<false>)->Name("conv2d_forward/reference")->Arg(4)->Arg(16)->Arg(64);
BENCHMARK(conv_forward<true>)->Name("conv2d_forward/parallel")->Arg(4)->Arg(16)->Arg(64);
BENCHMARK(conv_backward<false>)->Name("conv2d_backward/reference")->Arg(4)->Arg(16)->Arg(64);
BENCHMARK(conv_backward<true>)->Name("conv2d_backward/parallel")->Arg(4)->Arg(16)->Arg(64);
BENCHMARK(norm_round_trip<false>)->Name("layer_norm/reference")->Arg(16)->Arg(64);
BENCHMARK(norm_round_trip<true>)->Name("layer_norm/parallel")->Arg(16)->Arg(64);

BENCHMARK_MAIN();
