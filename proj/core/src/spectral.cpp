#include "pclsr/spectral.hpp"

#include <fftw3.h>

#include <cmath>
#include <map>
#include <mutex>
#include <utility>

namespace pclsr::spectral {

namespace {

void require_even(const char* op, int h, int w) {
  if (h <= 0 || w <= 0 || h % 2 || w % 2)
    throw DimensionError(std::string(op) + ": spatial dims must be positive and even, got " +
                         std::to_string(h) + "x" + std::to_string(w));
}

// FFTW plans keyed by (h, w). Created with FFTW_ESTIMATE for run-to-run
// determinism and FFTW_UNALIGNED so they can execute on any buffer.
struct PlanPair {
  fftw_plan fwd = nullptr;
  fftw_plan bwd = nullptr;
};

std::mutex g_plan_mutex;
std::map<std::pair<int, int>, PlanPair>& plan_cache() {
  static std::map<std::pair<int, int>, PlanPair> cache;
  return cache;
}

PlanPair get_plans(int h, int w) {
  std::lock_guard<std::mutex> lock(g_plan_mutex);
  auto& cache = plan_cache();
  auto it = cache.find({h, w});
  if (it != cache.end()) return it->second;

  std::vector<std::complex<double>> a(static_cast<std::size_t>(h) * w);
  std::vector<std::complex<double>> b(a.size());
  auto* ap = reinterpret_cast<fftw_complex*>(a.data());
  auto* bp = reinterpret_cast<fftw_complex*>(b.data());
  PlanPair p;
  p.fwd = fftw_plan_dft_2d(h, w, ap, bp, FFTW_FORWARD, FFTW_ESTIMATE | FFTW_UNALIGNED);
  p.bwd = fftw_plan_dft_2d(h, w, ap, bp, FFTW_BACKWARD, FFTW_ESTIMATE | FFTW_UNALIGNED);
  cache[{h, w}] = p;
  return p;
}

inline int shift_index(int i, int n) { return (i + n / 2) % n; }

}  // namespace

template <typename T>
SubbandSet<T> haar_forward(const Tensor<T>& x) {
  require_even("haar_forward", x.h(), x.w());
  const int oh = x.h() / 2, ow = x.w() / 2;
  SubbandSet<T> s{Tensor<T>(x.n(), x.c(), oh, ow), Tensor<T>(x.n(), x.c(), oh, ow),
                  Tensor<T>(x.n(), x.c(), oh, ow), Tensor<T>(x.n(), x.c(), oh, ow)};
  for (int in = 0; in < x.n(); ++in)
    for (int ic = 0; ic < x.c(); ++ic)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          const T a = x(in, ic, 2 * y, 2 * xx);
          const T b = x(in, ic, 2 * y, 2 * xx + 1);
          const T c = x(in, ic, 2 * y + 1, 2 * xx);
          const T d = x(in, ic, 2 * y + 1, 2 * xx + 1);
          s.ll(in, ic, y, xx) = (a + b + c + d) / T(2);
          s.lh(in, ic, y, xx) = (a + b - c - d) / T(2);
          s.hl(in, ic, y, xx) = (a - b + c - d) / T(2);
          s.hh(in, ic, y, xx) = (a - b - c + d) / T(2);
        }
  return s;
}

template <typename T>
Tensor<T> haar_inverse(const SubbandSet<T>& s) {
  check_same_shape(s.ll, s.lh, "haar_inverse");
  check_same_shape(s.ll, s.hl, "haar_inverse");
  check_same_shape(s.ll, s.hh, "haar_inverse");
  Tensor<T> x(s.ll.n(), s.ll.c(), s.ll.h() * 2, s.ll.w() * 2);
  for (int in = 0; in < x.n(); ++in)
    for (int ic = 0; ic < x.c(); ++ic)
      for (int y = 0; y < s.ll.h(); ++y)
        for (int xx = 0; xx < s.ll.w(); ++xx) {
          const T ll = s.ll(in, ic, y, xx);
          const T lh = s.lh(in, ic, y, xx);
          const T hl = s.hl(in, ic, y, xx);
          const T hh = s.hh(in, ic, y, xx);
          x(in, ic, 2 * y, 2 * xx) = (ll + lh + hl + hh) / T(2);
          x(in, ic, 2 * y, 2 * xx + 1) = (ll + lh - hl - hh) / T(2);
          x(in, ic, 2 * y + 1, 2 * xx) = (ll - lh + hl - hh) / T(2);
          x(in, ic, 2 * y + 1, 2 * xx + 1) = (ll - lh - hl + hh) / T(2);
        }
  return x;
}

template <typename T>
Tensor<T> hw_stack(const Tensor<T>& x) {
  require_even("hw_stack", x.h(), x.w());
  const int oh = x.h() / 2, ow = x.w() / 2, c = x.c();
  Tensor<T> out(x.n(), 3 * c, oh, ow);
  for (int in = 0; in < x.n(); ++in)
    for (int ic = 0; ic < c; ++ic)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          const T a = x(in, ic, 2 * y, 2 * xx);
          const T b = x(in, ic, 2 * y, 2 * xx + 1);
          const T cc = x(in, ic, 2 * y + 1, 2 * xx);
          const T d = x(in, ic, 2 * y + 1, 2 * xx + 1);
          out(in, ic, y, xx) = (a + b - cc - d) / T(2);
          out(in, c + ic, y, xx) = (a - b + cc - d) / T(2);
          out(in, 2 * c + ic, y, xx) = (a - b - cc + d) / T(2);
        }
  return out;
}

template <typename T>
Tensor<T> hw_stack_vjp(const Tensor<T>& gy, int in_h, int in_w) {
  require_even("hw_stack_vjp", in_h, in_w);
  if (gy.c() % 3) throw DimensionError("hw_stack_vjp: channel count not divisible by 3");
  const int c = gy.c() / 3;
  if (gy.h() != in_h / 2 || gy.w() != in_w / 2)
    throw DimensionError("hw_stack_vjp: gradient shape does not match input dims");
  Tensor<T> gx(gy.n(), c, in_h, in_w);
  for (int in = 0; in < gy.n(); ++in)
    for (int ic = 0; ic < c; ++ic)
      for (int y = 0; y < gy.h(); ++y)
        for (int xx = 0; xx < gy.w(); ++xx) {
          const T glh = gy(in, ic, y, xx);
          const T ghl = gy(in, c + ic, y, xx);
          const T ghh = gy(in, 2 * c + ic, y, xx);
          gx(in, ic, 2 * y, 2 * xx) = (glh + ghl + ghh) / T(2);
          gx(in, ic, 2 * y, 2 * xx + 1) = (glh - ghl - ghh) / T(2);
          gx(in, ic, 2 * y + 1, 2 * xx) = (-glh + ghl - ghh) / T(2);
          gx(in, ic, 2 * y + 1, 2 * xx + 1) = (-glh - ghl + ghh) / T(2);
        }
  return gx;
}

template <typename T>
Tensor<T> fft_highfreq(const Tensor<T>& x, FftContext* ctx) {
  if (x.h() <= 0 || x.w() <= 0) throw DimensionError("fft_highfreq: empty input");
  const int h = x.h(), w = x.w();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  PlanPair plans = get_plans(h, w);

  Tensor<T> out(x.n(), x.c(), h, w);
  if (ctx) {
    ctx->n = x.n();
    ctx->c = x.c();
    ctx->h = h;
    ctx->w = w;
    ctx->spectra.assign(plane * x.n() * x.c(), {0.0, 0.0});
  }

  std::vector<std::complex<double>> in(plane), sp(plane);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          in[static_cast<std::size_t>(y) * w + xx] = {
              static_cast<double>(x(n, c, y, xx)), 0.0};
      fftw_execute_dft(plans.fwd, reinterpret_cast<fftw_complex*>(in.data()),
                       reinterpret_cast<fftw_complex*>(sp.data()));
      if (ctx) {
        std::copy(sp.begin(), sp.end(),
                  ctx->spectra.begin() + (static_cast<std::size_t>(n) * x.c() + c) * plane);
      }
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const double m = std::abs(sp[static_cast<std::size_t>(y) * w + xx]);
          out(n, c, shift_index(y, h), shift_index(xx, w)) =
              static_cast<T>(std::log1p(m));
        }
    }
  }
  return out;
}

template <typename T>
Tensor<T> fft_highfreq_vjp(const FftContext& ctx, const Tensor<T>& gy) {
  if (gy.n() != ctx.n || gy.c() != ctx.c || gy.h() != ctx.h || gy.w() != ctx.w)
    throw DimensionError("fft_highfreq_vjp: gradient shape does not match context");
  const int h = ctx.h, w = ctx.w;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  PlanPair plans = get_plans(h, w);

  Tensor<T> gx(ctx.n, ctx.c, h, w);
  std::vector<std::complex<double>> hbuf(plane), outc(plane);
  for (int n = 0; n < ctx.n; ++n) {
    for (int c = 0; c < ctx.c; ++c) {
      const std::complex<double>* sp =
          ctx.spectra.data() + (static_cast<std::size_t>(n) * ctx.c + c) * plane;
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const std::size_t k = static_cast<std::size_t>(y) * w + xx;
          const double m = std::abs(sp[k]);
          // Incoming grad is in shifted coordinates.
          const double g =
              static_cast<double>(gy(n, c, shift_index(y, h), shift_index(xx, w)));
          if (m > 0.0) {
            hbuf[k] = sp[k] * (g / ((1.0 + m) * m));
          } else {
            hbuf[k] = {0.0, 0.0};
          }
        }
      fftw_execute_dft(plans.bwd, reinterpret_cast<fftw_complex*>(hbuf.data()),
                       reinterpret_cast<fftw_complex*>(outc.data()));
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          gx(n, c, y, xx) =
              static_cast<T>(outc[static_cast<std::size_t>(y) * w + xx].real());
    }
  }
  return gx;
}

template SubbandSet<float> haar_forward<float>(const Tensor<float>&);
template SubbandSet<double> haar_forward<double>(const Tensor<double>&);
template Tensor<float> haar_inverse<float>(const SubbandSet<float>&);
template Tensor<double> haar_inverse<double>(const SubbandSet<double>&);
template Tensor<float> hw_stack<float>(const Tensor<float>&);
template Tensor<double> hw_stack<double>(const Tensor<double>&);
template Tensor<float> hw_stack_vjp<float>(const Tensor<float>&, int, int);
template Tensor<double> hw_stack_vjp<double>(const Tensor<double>&, int, int);
template Tensor<float> fft_highfreq<float>(const Tensor<float>&, FftContext*);
template Tensor<double> fft_highfreq<double>(const Tensor<double>&, FftContext*);
template Tensor<float> fft_highfreq_vjp<float>(const FftContext&, const Tensor<float>&);
template Tensor<double> fft_highfreq_vjp<double>(const FftContext&, const Tensor<double>&);

}  // namespace pclsr::spectral
