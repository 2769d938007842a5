#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "pclsr/errors.hpp"
#include "pclsr/tensor.hpp"

namespace pclsr {

/// Planar image, values nominally in [0,1], double precision.
/// Layout is channel-major (c, y, x) to match the tensor convention.
struct Image {
  int h = 0, w = 0, c = 0;
  std::vector<double> data;

  Image() = default;
  Image(int h_, int w_, int c_) : h(h_), w(w_), c(c_) {
    if (h_ < 0 || w_ < 0 || c_ < 0) throw DimensionError("Image: negative dimension");
    data.assign(static_cast<std::size_t>(h_) * w_ * c_, 0.0);
  }

  double& at(int ic, int iy, int ix) {
    return data[(static_cast<std::size_t>(ic) * h + iy) * w + ix];
  }
  double at(int ic, int iy, int ix) const {
    return data[(static_cast<std::size_t>(ic) * h + iy) * w + ix];
  }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Image& o) const { return h == o.h && w == o.w && c == o.c; }
};

/// Decode a PNG into [0,1] doubles. Grayscale is expanded to 3 channels,
/// alpha is dropped, 16-bit files are scaled by 1/65535.
Image read_png(const std::filesystem::path& path);

/// Encode as 8-bit PNG (1 or 3 channels). Values are clamped to [0,1] and
/// quantized with round-half-up.
void write_png(const std::filesystem::path& path, const Image& img);

/// Quantize to the 8-bit grid without leaving double precision:
/// v -> floor(clamp(v,0,1)*255 + 0.5)/255.
Image quantize8(const Image& img);

/// Crop so that height and width are multiples of `modulo` (keeps top-left).
Image modcrop(const Image& img, int modulo);

Image crop(const Image& img, int top, int left, int ch, int cw);

/// Horizontal mirror (x -> w-1-x).
Image flip_horizontal(const Image& img);

/// Counter-clockwise quarter turns, r in {0,1,2,3}.
Image rotate90(const Image& img, int r);

/// Batch a set of equally shaped images into an N x C x H x W tensor.
template <typename T>
Tensor<T> to_tensor(const std::vector<Image>& imgs) {
  if (imgs.empty()) throw ParamError("to_tensor: empty image list");
  const Image& f = imgs.front();
  for (const Image& im : imgs)
    if (!im.same_shape(f)) throw DimensionError("to_tensor: mixed image shapes");
  Tensor<T> t(static_cast<int>(imgs.size()), f.c, f.h, f.w);
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    T* dst = t.sample_ptr(static_cast<int>(i));
    const double* src = imgs[i].data.data();
    for (std::size_t k = 0; k < imgs[i].size(); ++k) dst[k] = static_cast<T>(src[k]);
  }
  return t;
}

template <typename T>
Image to_image(const Tensor<T>& t, int in) {
  if (in < 0 || in >= t.n()) throw DimensionError("to_image: sample index out of range");
  Image im(t.h(), t.w(), t.c());
  const T* src = t.sample_ptr(in);
  for (std::size_t k = 0; k < im.size(); ++k) im.data[k] = static_cast<double>(src[k]);
  return im;
}

}  // namespace pclsr
