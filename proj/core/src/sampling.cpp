#include "pclsr/sampling.hpp"

#include <cmath>

namespace pclsr::sampling {

namespace {

// Mirror across the edge pixel, numpy "reflect" style: -1 -> 1, n -> n-2.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int p = 2 * n - 2;
  i = ((i % p) + p) % p;
  return i < n ? i : p - i;
}

Image blur_separable(const Image& img, const std::vector<double>& taps) {
  const int r = static_cast<int>(taps.size()) / 2;
  const int nt = static_cast<int>(taps.size());
  const int h = img.h, w = img.w;
  Image tmp(h, w, img.c);
  std::vector<double> pad(static_cast<std::size_t>(w) + 2 * r);
  for (int c = 0; c < img.c; ++c)
    for (int y = 0; y < h; ++y) {
      const double* src = img.data.data() + (static_cast<std::size_t>(c) * h + y) * w;
      for (int i = -r; i < w + r; ++i) pad[i + r] = src[reflect_index(i, w)];
      double* dst = tmp.data.data() + (static_cast<std::size_t>(c) * h + y) * w;
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        const double* p = pad.data() + x;
        for (int t = 0; t < nt; ++t) acc += taps[t] * p[t];
        dst[x] = acc;
      }
    }
  Image out(h, w, img.c);
  std::vector<int> ridx(static_cast<std::size_t>(h) + 2 * r);
  for (int i = -r; i < h + r; ++i) ridx[i + r] = reflect_index(i, h);
  for (int c = 0; c < img.c; ++c)
    for (int y = 0; y < h; ++y) {
      double* dst = out.data.data() + (static_cast<std::size_t>(c) * h + y) * w;
      // Taps applied in ascending order per pixel, matching the horizontal pass.
      const double* srow = tmp.data.data() + (static_cast<std::size_t>(c) * h + ridx[y]) * w;
      for (int x = 0; x < w; ++x) dst[x] = taps[0] * srow[x];
      for (int t = 1; t < nt; ++t) {
        srow = tmp.data.data() + (static_cast<std::size_t>(c) * h + ridx[y + t]) * w;
        for (int x = 0; x < w; ++x) dst[x] += taps[t] * srow[x];
      }
    }
  return out;
}

}  // namespace

std::vector<double> gaussian_taps(int size, double sigma) {
  if (size <= 0 || size % 2 == 0) throw ParamError("gaussian_taps: size must be odd and positive");
  if (sigma <= 0.0) throw ParamError("gaussian_taps: sigma must be positive");
  std::vector<double> taps(size);
  const int r = size / 2;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - r;
    taps[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += taps[i];
  }
  for (double& t : taps) t /= sum;
  return taps;
}

std::vector<double> kernel_matrix(const KernelSpec& spec) {
  const std::vector<double> t = gaussian_taps(spec.size, spec.sigma);
  std::vector<double> k(static_cast<std::size_t>(spec.size) * spec.size);
  for (int i = 0; i < spec.size; ++i)
    for (int j = 0; j < spec.size; ++j) k[static_cast<std::size_t>(i) * spec.size + j] = t[i] * t[j];
  return k;
}

KernelSpec sample_blur_spec(RandomSource& rng) {
  KernelSpec spec;
  spec.kind = KernelKind::gaussian_blur;
  spec.size = 3 + 2 * static_cast<int>(rng.uniform_int(0, 4));
  spec.sigma = rng.uniform(0.3, 1.5);
  spec.strength = 0.0;
  return spec;
}

Image gaussian_blur(const Image& img, const KernelSpec& spec) {
  return blur_separable(img, gaussian_taps(spec.size, spec.sigma));
}

Image unsharp(const Image& img, const KernelSpec& spec) {
  Image blurred = gaussian_blur(img, spec);
  Image out(img.h, img.w, img.c);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    double v = img.data[i] + spec.strength * (img.data[i] - blurred.data[i]);
    out.data[i] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  }
  return out;
}

std::vector<Image> make_negatives(const Image& hr, int k, RandomSource& rng,
                                  std::vector<KernelSpec>* specs_out) {
  if (k < 0) throw ParamError("make_negatives: k must be non-negative");
  std::vector<Image> out;
  out.reserve(k);
  if (specs_out) specs_out->clear();
  for (int i = 0; i < k; ++i) {
    KernelSpec spec = sample_blur_spec(rng);
    if (specs_out) specs_out->push_back(spec);
    out.push_back(gaussian_blur(hr, spec));
  }
  return out;
}

std::vector<Image> make_positives(const Image& hr, int k, RandomSource& rng,
                                  std::vector<KernelSpec>* specs_out) {
  if (k < 0) throw ParamError("make_positives: k must be non-negative");
  std::vector<Image> out;
  out.reserve(k + 1);
  out.push_back(hr);
  if (specs_out) specs_out->clear();
  for (int i = 0; i < k; ++i) {
    KernelSpec spec = sample_blur_spec(rng);
    spec.kind = KernelKind::unsharp;
    spec.strength = rng.uniform(0.2, 1.0);
    if (specs_out) specs_out->push_back(spec);
    out.push_back(unsharp(hr, spec));
  }
  return out;
}

AugChoice sample_aug(RandomSource& rng) {
  AugChoice a;
  a.hflip = rng.bernoulli(0.5);
  a.rot90 = static_cast<int>(rng.uniform_int(0, 3));
  return a;
}

Image apply_aug(const Image& img, const AugChoice& a) {
  Image out = a.hflip ? flip_horizontal(img) : img;
  return rotate90(out, a.rot90);
}

}  // namespace pclsr::sampling
