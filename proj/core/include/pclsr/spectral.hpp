#pragma once

#include <complex>
#include <vector>

#include "pclsr/tensor.hpp"

namespace pclsr::spectral {

/// Single-level orthonormal Haar analysis of an N x C x H x W tensor
/// (H, W even). Each subband has shape N x C x H/2 x W/2. Per 2x2 block
/// [[a,b],[c,d]]:
///   LL = (a+b+c+d)/2   LH = (a+b-c-d)/2
///   HL = (a-b+c-d)/2   HH = (a-b-c+d)/2
template <typename T>
struct SubbandSet {
  Tensor<T> ll, lh, hl, hh;
};

template <typename T>
SubbandSet<T> haar_forward(const Tensor<T>& x);

template <typename T>
Tensor<T> haar_inverse(const SubbandSet<T>& s);

/// High-frequency stack: the LH, HL, HH subbands concatenated along the
/// channel axis, in that order. N x C x H x W -> N x 3C x H/2 x W/2.
template <typename T>
Tensor<T> hw_stack(const Tensor<T>& x);

/// Adjoint of hw_stack (exact vector-Jacobian product; the dropped LL band
/// contributes nothing).
template <typename T>
Tensor<T> hw_stack_vjp(const Tensor<T>& gy, int in_h, int in_w);

/// Cached forward spectra so the backward pass can reuse them.
struct FftContext {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<std::complex<double>> spectra;  // n*c planes of h*w, unshifted
};

/// Per-channel log-magnitude spectrum: log(1 + |fftshift(FFT2(x))|).
/// Output has the input's shape. Internally double precision.
template <typename T>
Tensor<T> fft_highfreq(const Tensor<T>& x, FftContext* ctx = nullptr);

/// Vector-Jacobian product of fft_highfreq. Bins with zero magnitude get a
/// zero gradient.
template <typename T>
Tensor<T> fft_highfreq_vjp(const FftContext& ctx, const Tensor<T>& gy);

}  // namespace pclsr::spectral
