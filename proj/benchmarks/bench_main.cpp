#include <benchmark/benchmark.h>

#include "pclsr/datapipe.hpp"
#include "pclsr/losses.hpp"
#include "pclsr/nn.hpp"
#include "pclsr/rng.hpp"
#include "pclsr/sampling.hpp"
#include "pclsr/spectral.hpp"
#include "pclsr/tensor.hpp"

using namespace pclsr;

namespace {

Tensor<double> random_tensor(int n, int c, int h, int w, std::uint64_t seed) {
  Tensor<double> t(n, c, h, w);
  RandomSource rng(seed);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform01();
  return t;
}

Image random_image(int h, int w, std::uint64_t seed) {
  Image img(h, w, 3);
  RandomSource rng(seed);
  for (double& v : img.data) v = rng.uniform01();
  return img;
}

void bm_hw_stack(benchmark::State& state) {
  const Tensor<double> x = random_tensor(1, 3, 192, 192, 1);
  for (auto _ : state) benchmark::DoNotOptimize(spectral::hw_stack(x));
}
BENCHMARK(bm_hw_stack);

void bm_fft_highfreq(benchmark::State& state) {
  const Tensor<double> x = random_tensor(1, 3, 192, 192, 2);
  for (auto _ : state) benchmark::DoNotOptimize(spectral::fft_highfreq(x, nullptr));
}
BENCHMARK(bm_fft_highfreq);

void bm_conv3x3_forward(benchmark::State& state) {
  nn::Conv2d<double> c;
  c.configure(32, 32, 3, 1, 1);
  RandomSource rng(3);
  c.init_kaiming(rng);
  const Tensor<double> x = random_tensor(4, 32, 48, 48, 4);
  for (auto _ : state) benchmark::DoNotOptimize(nn::conv_forward(c, x, 1));
}
BENCHMARK(bm_conv3x3_forward);

void bm_conv3x3_backward(benchmark::State& state) {
  nn::Conv2d<double> c;
  c.configure(32, 32, 3, 1, 1);
  RandomSource rng(5);
  c.init_kaiming(rng);
  const Tensor<double> x = random_tensor(4, 32, 48, 48, 6);
  const Tensor<double> gy = random_tensor(4, 32, 48, 48, 7);
  nn::ConvGrads<double> g;
  for (auto _ : state) {
    g.zero_like(c);
    benchmark::DoNotOptimize(nn::conv_backward(c, x, gy, &g, true, 1));
  }
}
BENCHMARK(bm_conv3x3_backward);

void bm_bicubic_down4(benchmark::State& state) {
  const Image hr = random_image(192, 192, 8);
  for (auto _ : state) benchmark::DoNotOptimize(data::bicubic_resize(hr, 48, 48));
}
BENCHMARK(bm_bicubic_down4);

void bm_gaussian_blur(benchmark::State& state) {
  const Image hr = random_image(192, 192, 9);
  sampling::KernelSpec spec;
  spec.size = 11;
  spec.sigma = 1.5;
  for (auto _ : state) benchmark::DoNotOptimize(sampling::gaussian_blur(hr, spec));
}
BENCHMARK(bm_gaussian_blur);

void bm_pcl_total_loss(benchmark::State& state) {
  // Pyramid shapes of the default embedding on a 96x96 stacked input.
  const int widths[4] = {64, 128, 256, 512};
  const int sizes[4] = {48, 24, 12, 6};
  FeaturePyramid<double> anchor;
  std::vector<FeaturePyramid<double>> pos(5), neg(4);
  std::uint64_t seed = 10;
  for (int l = 0; l < 4; ++l) {
    anchor.push_back(random_tensor(2, widths[l], sizes[l], sizes[l], seed++));
    for (auto& p : pos) p.push_back(random_tensor(2, widths[l], sizes[l], sizes[l], seed++));
    for (auto& n : neg) n.push_back(random_tensor(2, widths[l], sizes[l], sizes[l], seed++));
  }
  FeaturePyramid<double> grads;
  for (auto _ : state)
    benchmark::DoNotOptimize(loss::pcl_total_loss(anchor, pos, neg, 0.5, &grads));
}
BENCHMARK(bm_pcl_total_loss);

void bm_contra_d(benchmark::State& state) {
  RandomSource rng(42);
  std::vector<double> r(16), f(16);
  for (auto& v : r) v = rng.uniform(-2.0, 2.0);
  for (auto& v : f) v = rng.uniform(-2.0, 2.0);
  std::vector<double> gr, gf;
  for (auto _ : state) benchmark::DoNotOptimize(loss::contra_d_loss<double>(r, f, &gr, &gf));
}
BENCHMARK(bm_contra_d);

}  // namespace

BENCHMARK_MAIN();
