#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "pclsr/errors.hpp"

namespace pclsr {

/// Rank-4 dense tensor in N x C x H x W layout, row-major, W fastest.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w) { resize(n, c, h, w); }

  void resize(int n, int c, int h, int w) {
    if (n < 0 || c < 0 || h < 0 || w < 0)
      throw DimensionError("Tensor: negative dimension");
    n_ = n; c_ = c; h_ = h; w_ = w;
    data_.assign(static_cast<std::size_t>(n) * c * h * w, T(0));
  }

  int n() const { return n_; }
  int c() const { return c_; }
  int h() const { return h_; }
  int w() const { return w_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::array<int, 4> shape() const { return {n_, c_, h_, w_}; }

  bool same_shape(const Tensor& o) const {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator()(int in, int ic, int iy, int ix) {
    return data_[offset(in, ic, iy, ix)];
  }
  const T& operator()(int in, int ic, int iy, int ix) const {
    return data_[offset(in, ic, iy, ix)];
  }

  T* sample_ptr(int in) { return data_.data() + static_cast<std::size_t>(in) * c_ * h_ * w_; }
  const T* sample_ptr(int in) const { return data_.data() + static_cast<std::size_t>(in) * c_ * h_ * w_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  std::string shape_str() const {
    return "(" + std::to_string(n_) + "," + std::to_string(c_) + "," +
           std::to_string(h_) + "," + std::to_string(w_) + ")";
  }

 private:
  std::size_t offset(int in, int ic, int iy, int ix) const {
    return ((static_cast<std::size_t>(in) * c_ + ic) * h_ + iy) * w_ + ix;
  }

  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  std::vector<T> data_;
};

/// Mutable view of one sample (C x H x W) inside a batch tensor.
template <typename T>
struct SampleView {
  T* ptr = nullptr;
  int c = 0, h = 0, w = 0;

  T& at(int ic, int iy, int ix) const {
    return ptr[(static_cast<std::size_t>(ic) * h + iy) * w + ix];
  }
  std::size_t size() const { return static_cast<std::size_t>(c) * h * w; }
};

template <typename T>
struct ConstSampleView {
  const T* ptr = nullptr;
  int c = 0, h = 0, w = 0;

  ConstSampleView() = default;
  ConstSampleView(const T* p, int c_, int h_, int w_) : ptr(p), c(c_), h(h_), w(w_) {}
  ConstSampleView(const SampleView<T>& v) : ptr(v.ptr), c(v.c), h(v.h), w(v.w) {}

  const T& at(int ic, int iy, int ix) const {
    return ptr[(static_cast<std::size_t>(ic) * h + iy) * w + ix];
  }
  std::size_t size() const { return static_cast<std::size_t>(c) * h * w; }
};

template <typename T>
SampleView<T> sample_view(Tensor<T>& t, int in) {
  return {t.sample_ptr(in), t.c(), t.h(), t.w()};
}

template <typename T>
ConstSampleView<T> sample_view(const Tensor<T>& t, int in) {
  return {t.sample_ptr(in), t.c(), t.h(), t.w()};
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* where) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(where) + ": shape mismatch " + a.shape_str() +
                         " vs " + b.shape_str());
}

}  // namespace pclsr
