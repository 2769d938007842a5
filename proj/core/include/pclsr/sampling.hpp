#pragma once

#include <vector>

#include "pclsr/image.hpp"
#include "pclsr/rng.hpp"

namespace pclsr::sampling {

enum class KernelKind { gaussian_blur, unsharp };

/// Description of one sampled degradation / sharpening operator.
/// `strength` is the unsharp amount; it is unused for plain blurs.
struct KernelSpec {
  KernelKind kind = KernelKind::gaussian_blur;
  int size = 3;
  double sigma = 0.5;
  double strength = 0.0;
};

/// Normalized 1-D Gaussian taps, length `size` (odd), centered.
std::vector<double> gaussian_taps(int size, double sigma);

/// Full 2-D kernel (outer product of the 1-D taps), row-major size x size.
/// Sums to 1 and is symmetric under transpose and 180-degree rotation.
std::vector<double> kernel_matrix(const KernelSpec& spec);

/// Draw a blur spec: size uniform over {3,5,7,9,11}, then sigma uniform in
/// [0.3, 1.5).
KernelSpec sample_blur_spec(RandomSource& rng);

/// Separable Gaussian blur with reflect padding (edge sample not repeated).
Image gaussian_blur(const Image& img, const KernelSpec& spec);

/// Unsharp mask: clamp(img + strength * (img - blur(img)), 0, 1).
Image unsharp(const Image& img, const KernelSpec& spec);

/// k hard negatives: independently sampled slight blurs of the ground truth.
std::vector<Image> make_negatives(const Image& hr, int k, RandomSource& rng,
                                  std::vector<KernelSpec>* specs_out = nullptr);

/// Positive set: the ground truth first, followed by k unsharp-masked
/// variants (blur spec then amount lambda in [0.2, 1.0) drawn per variant).
/// `specs_out` receives the k unsharp specs (no entry for the ground truth).
std::vector<Image> make_positives(const Image& hr, int k, RandomSource& rng,
                                  std::vector<KernelSpec>* specs_out = nullptr);

struct AugChoice {
  bool hflip = false;
  int rot90 = 0;
};

/// Identical geometric augmentation for an LR/HR pair: horizontal flip with
/// probability 1/2, then r in {0,1,2,3} counter-clockwise quarter turns.
AugChoice sample_aug(RandomSource& rng);
Image apply_aug(const Image& img, const AugChoice& a);

}  // namespace pclsr::sampling
