#include "pclsr/nn.hpp"

#include <omp.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstring>

namespace pclsr::nn {

namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatCM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
template <typename T>
using MapRM = Eigen::Map<const MatRM<T>>;
template <typename T>
using StridedMapRM = Eigen::Map<const MatRM<T>, 0, Eigen::OuterStride<>>;

int clamp_threads(int t) { return t < 1 ? 1 : t; }

// Columns per im2col tile, capped so the buffer stays cache-friendly.
int tile_columns(int rows, std::int64_t total_cols, std::size_t elem_size,
                 std::size_t budget = std::size_t(8) << 20) {
  std::size_t cols = budget / (static_cast<std::size_t>(rows) * elem_size);
  if (cols < 64) cols = 64;
  if (cols > static_cast<std::size_t>(total_cols)) cols = static_cast<std::size_t>(total_cols);
  return static_cast<int>(cols);
}

template <typename T>
void im2col_tile(const T* xs, int C, int H, int W, int k, int stride, int pad, int ow,
                 int m0, int m1, T* col /* rows x (m1-m0), col-major */) {
  const int rows = C * k * k;
  for (int m = m0; m < m1; ++m) {
    const int oy = m / ow, ox = m % ow;
    T* colp = col + static_cast<std::ptrdiff_t>(m - m0) * rows;
    int r = 0;
    for (int c = 0; c < C; ++c) {
      const T* xc = xs + static_cast<std::size_t>(c) * H * W;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= H) {
          for (int kx = 0; kx < k; ++kx) colp[r++] = T(0);
          continue;
        }
        const T* xrow = xc + static_cast<std::size_t>(iy) * W;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride - pad + kx;
          colp[r++] = (ix >= 0 && ix < W) ? xrow[ix] : T(0);
        }
      }
    }
  }
}

template <typename T>
void col2im_add_tile(const T* colg /* rows x (m1-m0), col-major */, int C, int H, int W,
                     int k, int stride, int pad, int ow, int m0, int m1, T* gxs) {
  const int rows = C * k * k;
  for (int m = m0; m < m1; ++m) {
    const int oy = m / ow, ox = m % ow;
    const T* colp = colg + static_cast<std::ptrdiff_t>(m - m0) * rows;
    int r = 0;
    for (int c = 0; c < C; ++c) {
      T* gc = gxs + static_cast<std::size_t>(c) * H * W;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= H) {
          r += k;
          continue;
        }
        T* grow = gc + static_cast<std::size_t>(iy) * W;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix >= 0 && ix < W) grow[ix] += colp[r];
          ++r;
        }
      }
    }
  }
}

template <typename T>
T vec_norm(const std::vector<T>& v) {
  double s = 0;
  for (T x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return static_cast<T>(std::sqrt(s));
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d

template <typename T>
void Conv2d<T>::configure(int in, int out, int k, int stride_, int pad_, bool sn) {
  if (in <= 0 || out <= 0 || k <= 0 || stride_ <= 0 || pad_ < 0)
    throw ParamError("Conv2d: invalid configuration");
  in_ch = in;
  out_ch = out;
  ksize = k;
  stride = stride_;
  pad = pad_;
  weight.assign(static_cast<std::size_t>(out) * in * k * k, T(0));
  bias.assign(out, T(0));
  use_sn = sn;
  if (sn) {
    sn_u.assign(out, T(0));
    sn_v.assign(static_cast<std::size_t>(in) * k * k, T(0));
    sn_w = weight;
    sn_sigma = T(1);
  } else {
    sn_u.clear();
    sn_v.clear();
    sn_w.clear();
    sn_sigma = T(1);
  }
}

template <typename T>
void Conv2d<T>::init_kaiming(RandomSource& rng) {
  const double fan_in = static_cast<double>(in_ch) * ksize * ksize;
  const double bound = std::sqrt(6.0 / fan_in);
  for (T& w : weight) w = static_cast<T>(rng.uniform(-bound, bound));
  std::fill(bias.begin(), bias.end(), T(0));
  if (use_sn) {
    for (T& u : sn_u) u = static_cast<T>(rng.normal());
    const T nu = vec_norm(sn_u);
    if (nu > T(0))
      for (T& u : sn_u) u /= nu;
    refresh_sn();
  }
}

// The power-iteration updates below use plain loops rather than Eigen reductions:
// Eigen's redux order depends on buffer alignment, which would couple sigma to
// heap layout and break bit-reproducibility of training runs.
template <typename T>
void Conv2d<T>::refresh_sn() {
  if (!use_sn) return;
  const int rows = in_ch * ksize * ksize;
  const T* W = weight.data();
  for (int r = 0; r < rows; ++r) {
    T s = T(0);
    for (int o = 0; o < out_ch; ++o) s += sn_u[o] * W[static_cast<std::size_t>(o) * rows + r];
    sn_v[r] = s;
  }
  const T nv = vec_norm(sn_v);
  if (nv > T(0))
    for (T& x : sn_v) x /= nv;
  for (int o = 0; o < out_ch; ++o) {
    const T* wrow = W + static_cast<std::size_t>(o) * rows;
    T s = T(0);
    for (int r = 0; r < rows; ++r) s += wrow[r] * sn_v[r];
    sn_u[o] = s;
  }
  const T nu = vec_norm(sn_u);
  if (nu > T(0))
    for (T& x : sn_u) x /= nu;
  recompute_sn_fixed_uv();
}

template <typename T>
void Conv2d<T>::recompute_sn_fixed_uv() {
  if (!use_sn) return;
  const int rows = in_ch * ksize * ksize;
  const T* W = weight.data();
  T sigma = T(0);
  for (int o = 0; o < out_ch; ++o) {
    const T* wrow = W + static_cast<std::size_t>(o) * rows;
    T s = T(0);
    for (int r = 0; r < rows; ++r) s += wrow[r] * sn_v[r];
    sigma += sn_u[o] * s;
  }
  if (!(std::abs(static_cast<double>(sigma)) > 0))
    throw NumericError("Conv2d: spectral norm estimate is zero");
  sn_sigma = sigma;
  sn_w.resize(weight.size());
  for (std::size_t i = 0; i < weight.size(); ++i) sn_w[i] = weight[i] / sigma;
}

template <typename T>
void sn_grad_transform(const Conv2d<T>& c, std::vector<T>& gw) {
  if (!c.use_sn) return;
  if (gw.size() != c.weight.size()) throw DimensionError("sn_grad_transform: bad gradient size");
  const int rows = c.in_ch * c.ksize * c.ksize;
  T dot = 0;
  for (std::size_t i = 0; i < gw.size(); ++i) dot += gw[i] * c.sn_w[i];
  for (int o = 0; o < c.out_ch; ++o)
    for (int r = 0; r < rows; ++r) {
      const std::size_t i = static_cast<std::size_t>(o) * rows + r;
      gw[i] = (gw[i] - dot * c.sn_u[o] * c.sn_v[r]) / c.sn_sigma;
    }
}

template <typename T>
Tensor<T> conv_forward(const Conv2d<T>& c, const Tensor<T>& x, int threads) {
  if (x.c() != c.in_ch)
    throw DimensionError("conv_forward: expected " + std::to_string(c.in_ch) +
                         " input channels, got " + std::to_string(x.c()));
  const int oh = c.out_h(x.h()), ow = c.out_w(x.w());
  if (oh <= 0 || ow <= 0) throw DimensionError("conv_forward: output would be empty");
  const int rows = c.in_ch * c.ksize * c.ksize;
  const int M = oh * ow;
  // Tile the GEMM over the whole batch's output columns, not per sample: narrow
  // per-sample products (small M, large weight) spend most of their time packing
  // the weight matrix.  Tile boundaries depend only on shapes, so results do not
  // vary with the thread count.
  const std::int64_t total = static_cast<std::int64_t>(x.n()) * M;
  const int tile = tile_columns(rows, total, sizeof(T), std::size_t(32) << 20);
  const std::int64_t ntiles = (total + tile - 1) / tile;
  threads = clamp_threads(threads);

  Tensor<T> y(x.n(), c.out_ch, oh, ow);
  const std::vector<T>& wv = c.effective_weight();
  MapRM<T> Wm(wv.data(), c.out_ch, rows);

#pragma omp parallel num_threads(threads)
  {
    MatCM<T> col(rows, tile);
    MatRM<T> out(c.out_ch, tile);
#pragma omp for schedule(static)
    for (std::int64_t t = 0; t < ntiles; ++t) {
      const std::int64_t c0 = t * tile;
      const std::int64_t c1 = std::min(total, c0 + tile);
      const int tc = static_cast<int>(c1 - c0);
      for (std::int64_t p = c0; p < c1;) {
        const int n = static_cast<int>(p / M);
        const int m0 = static_cast<int>(p % M);
        const int m1 = std::min<std::int64_t>(M, m0 + (c1 - p));
        im2col_tile(x.sample_ptr(n), c.in_ch, x.h(), x.w(), c.ksize, c.stride, c.pad,
                    ow, m0, m1, col.data() + static_cast<std::size_t>(p - c0) * rows);
        p += m1 - m0;
      }
      out.leftCols(tc).noalias() = Wm * col.leftCols(tc);
      for (std::int64_t p = c0; p < c1;) {
        const int n = static_cast<int>(p / M);
        const int m0 = static_cast<int>(p % M);
        const int m1 = std::min<std::int64_t>(M, m0 + (c1 - p));
        const int seg = m1 - m0;
        T* ys = y.sample_ptr(n);
        for (int oc = 0; oc < c.out_ch; ++oc) {
          const T b = c.bias[oc];
          T* yrow = ys + static_cast<std::size_t>(oc) * M + m0;
          const T* orow = out.data() + static_cast<std::size_t>(oc) * tile + (p - c0);
          for (int j = 0; j < seg; ++j) yrow[j] = orow[j] + b;
        }
        p += m1 - m0;
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> conv_backward(const Conv2d<T>& c, const Tensor<T>& x, const Tensor<T>& gy,
                        ConvGrads<T>* grads, bool want_gx, int threads) {
  const int oh = c.out_h(x.h()), ow = c.out_w(x.w());
  if (gy.n() != x.n() || gy.c() != c.out_ch || gy.h() != oh || gy.w() != ow)
    throw DimensionError("conv_backward: gradient shape mismatch");
  const int rows = c.in_ch * c.ksize * c.ksize;
  const int M = oh * ow;
  const int tile = tile_columns(rows, M, sizeof(T));
  threads = clamp_threads(threads);

  Tensor<T> gx;
  if (want_gx) gx.resize(x.n(), x.c(), x.h(), x.w());
  const std::vector<T>& wv = c.effective_weight();
  MapRM<T> Wm(wv.data(), c.out_ch, rows);

  // Weight gradients are folded into `n mod K` buckets and the buckets summed
  // in bucket order, so the addition order depends only on the shapes involved
  // and results are identical for any worker count. K is capped by a scratch
  // budget so huge layers fall back to fewer buckets.
  int K = x.n();
  if (grads) {
    const std::size_t budget = std::size_t(64) << 20;
    const std::size_t per = (c.weight.size() + c.bias.size()) * sizeof(T);
    const std::size_t cap = budget / std::max<std::size_t>(per, 1);
    if (cap < static_cast<std::size_t>(K)) K = static_cast<int>(cap);
    if (K < 1) K = 1;
  }

  std::vector<std::vector<T>> gw_acc, gb_acc;
  if (grads) {
    gw_acc.assign(K, std::vector<T>(c.weight.size(), T(0)));
    gb_acc.assign(K, std::vector<T>(c.out_ch, T(0)));
  }

#pragma omp parallel num_threads(threads)
  {
    MatCM<T> col(rows, tile), colg(rows, tile);
#pragma omp for schedule(static)
    for (int k = 0; k < K; ++k) {
      for (int n = k; n < x.n(); n += K) {
        const T* xs = x.sample_ptr(n);
        const T* gys = gy.sample_ptr(n);
        for (int m0 = 0; m0 < M; m0 += tile) {
          const int m1 = std::min(M, m0 + tile);
          const int tc = m1 - m0;
          StridedMapRM<T> gym(gys + m0, c.out_ch, tc, Eigen::OuterStride<>(M));
          if (grads) {
            im2col_tile(xs, c.in_ch, x.h(), x.w(), c.ksize, c.stride, c.pad, ow, m0, m1,
                        col.data());
            Eigen::Map<MatRM<T>> gwm(gw_acc[k].data(), c.out_ch, rows);
            gwm.noalias() += gym * col.leftCols(tc).transpose();
            // Scalar accumulation: Eigen's redux order depends on the buffer
            // address, which would make bias gradients vary with heap layout.
            for (int oc = 0; oc < c.out_ch; ++oc) {
              const T* grow = gys + static_cast<std::size_t>(oc) * M + m0;
              T s = T(0);
              for (int j = 0; j < tc; ++j) s += grow[j];
              gb_acc[k][oc] += s;
            }
          }
          if (want_gx) {
            colg.leftCols(tc).noalias() = Wm.transpose() * gym;
            col2im_add_tile(colg.data(), c.in_ch, x.h(), x.w(), c.ksize, c.stride, c.pad,
                            ow, m0, m1, gx.sample_ptr(n));
          }
        }
      }
    }
  }

  if (grads) {
    if (grads->w.size() != c.weight.size()) grads->w.assign(c.weight.size(), T(0));
    if (grads->b.size() != c.bias.size()) grads->b.assign(c.bias.size(), T(0));
    T* gw = grads->w.data();
    const std::ptrdiff_t wsz = static_cast<std::ptrdiff_t>(c.weight.size());
#pragma omp parallel for num_threads(threads) schedule(static)
    for (std::ptrdiff_t i = 0; i < wsz; ++i) {
      T s = gw[i];
      for (int k = 0; k < K; ++k) s += gw_acc[k][i];
      gw[i] = s;
    }
    for (int k = 0; k < K; ++k)
      for (int oc = 0; oc < c.out_ch; ++oc) grads->b[oc] += gb_acc[k][oc];
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename T>
void relu_forward_inplace(Tensor<T>& x) {
  T* p = x.data();
  for (std::size_t i = 0; i < x.size(); ++i)
    if (p[i] < T(0)) p[i] = T(0);
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& gy, const Tensor<T>& y) {
  check_same_shape(gy, y, "relu_backward");
  Tensor<T> gx(gy.n(), gy.c(), gy.h(), gy.w());
  const T* g = gy.data();
  const T* yp = y.data();
  T* o = gx.data();
  for (std::size_t i = 0; i < gy.size(); ++i) o[i] = yp[i] > T(0) ? g[i] : T(0);
  return gx;
}

template <typename T>
void leaky_relu_forward_inplace(Tensor<T>& x, T slope) {
  T* p = x.data();
  for (std::size_t i = 0; i < x.size(); ++i)
    if (p[i] < T(0)) p[i] *= slope;
}

template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& gy, const Tensor<T>& y, T slope) {
  check_same_shape(gy, y, "leaky_relu_backward");
  Tensor<T> gx(gy.n(), gy.c(), gy.h(), gy.w());
  const T* g = gy.data();
  const T* yp = y.data();
  T* o = gx.data();
  for (std::size_t i = 0; i < gy.size(); ++i) o[i] = yp[i] > T(0) ? g[i] : g[i] * slope;
  return gx;
}

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r) {
  if (r <= 0 || x.c() % (r * r) != 0)
    throw DimensionError("pixel_shuffle: channels not divisible by r^2");
  const int C = x.c() / (r * r);
  Tensor<T> y(x.n(), C, x.h() * r, x.w() * r);
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < C; ++c)
      for (int yy = 0; yy < y.h(); ++yy)
        for (int xx = 0; xx < y.w(); ++xx)
          y(n, c, yy, xx) = x(n, c * r * r + (yy % r) * r + (xx % r), yy / r, xx / r);
  return y;
}

template <typename T>
Tensor<T> pixel_shuffle_vjp(const Tensor<T>& gy, int r) {
  if (r <= 0 || gy.h() % r != 0 || gy.w() % r != 0)
    throw DimensionError("pixel_shuffle_vjp: spatial dims not divisible by r");
  Tensor<T> gx(gy.n(), gy.c() * r * r, gy.h() / r, gy.w() / r);
  for (int n = 0; n < gy.n(); ++n)
    for (int c = 0; c < gy.c(); ++c)
      for (int yy = 0; yy < gy.h(); ++yy)
        for (int xx = 0; xx < gy.w(); ++xx)
          gx(n, c * r * r + (yy % r) * r + (xx % r), yy / r, xx / r) = gy(n, c, yy, xx);
  return gx;
}

// ---------------------------------------------------------------------------
// SrNet

template <typename T>
void SrNet<T>::init(const SrConfig& c, RandomSource& rng) {
  if (c.scale != 2 && c.scale != 3 && c.scale != 4)
    throw ParamError("SrNet: scale must be 2, 3 or 4");
  if (c.channels < 1 || c.resblocks < 1) throw ParamError("SrNet: bad width or depth");
  cfg = c;
  head.configure(c.in_ch, c.channels, 3, 1, 1);
  body.resize(2 * static_cast<std::size_t>(c.resblocks));
  for (auto& b : body) b.configure(c.channels, c.channels, 3, 1, 1);
  up.clear();
  up_factors.clear();
  if (c.scale == 2 || c.scale == 4) {
    const int stages = c.scale == 4 ? 2 : 1;
    for (int s = 0; s < stages; ++s) {
      Conv2d<T> u;
      u.configure(c.channels, c.channels * 4, 3, 1, 1);
      up.push_back(std::move(u));
      up_factors.push_back(2);
    }
  } else {
    Conv2d<T> u;
    u.configure(c.channels, c.channels * 9, 3, 1, 1);
    up.push_back(std::move(u));
    up_factors.push_back(3);
  }
  tail.configure(c.channels, c.out_ch, 3, 1, 1);

  head.init_kaiming(rng);
  for (auto& b : body) b.init_kaiming(rng);
  for (auto& u : up) u.init_kaiming(rng);
  tail.init_kaiming(rng);
}

template <typename T>
void SrGrads<T>::zero_like(const SrNet<T>& net) {
  head.zero_like(net.head);
  body.resize(net.body.size());
  for (std::size_t i = 0; i < body.size(); ++i) body[i].zero_like(net.body[i]);
  up.resize(net.up.size());
  for (std::size_t i = 0; i < up.size(); ++i) up[i].zero_like(net.up[i]);
  tail.zero_like(net.tail);
}

namespace {
template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add_inplace");
  T* pa = a.data();
  const T* pb = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += pb[i];
}
}  // namespace

template <typename T>
Tensor<T> sr_forward(const SrNet<T>& net, const Tensor<T>& lr, SrTrace<T>* trace,
                     int threads) {
  if (trace) {
    trace->x = lr;
    trace->block_in.clear();
    trace->act1.clear();
    trace->up_in.clear();
  }
  Tensor<T> r0 = conv_forward(net.head, lr, threads);
  Tensor<T> cur = r0;
  const int blocks = net.cfg.resblocks;
  for (int b = 0; b < blocks; ++b) {
    if (trace) trace->block_in.push_back(cur);
    Tensor<T> t1 = conv_forward(net.body[2 * b], cur, threads);
    relu_forward_inplace(t1);
    Tensor<T> t2 = conv_forward(net.body[2 * b + 1], t1, threads);
    if (trace) trace->act1.push_back(std::move(t1));
    add_inplace(t2, cur);
    cur = std::move(t2);
  }
  add_inplace(cur, r0);
  if (trace) trace->body_out = cur;
  for (std::size_t s = 0; s < net.up.size(); ++s) {
    if (trace) trace->up_in.push_back(cur);
    Tensor<T> v = conv_forward(net.up[s], cur, threads);
    cur = pixel_shuffle(v, net.up_factors[s]);
  }
  if (trace) trace->tail_in = cur;
  return conv_forward(net.tail, cur, threads);
}

template <typename T>
void sr_backward(const SrNet<T>& net, const SrTrace<T>& trace, const Tensor<T>& g_out,
                 SrGrads<T>& grads, int threads) {
  Tensor<T> g = conv_backward(net.tail, trace.tail_in, g_out, &grads.tail, true, threads);
  for (int s = static_cast<int>(net.up.size()) - 1; s >= 0; --s) {
    Tensor<T> gv = pixel_shuffle_vjp(g, net.up_factors[s]);
    g = conv_backward(net.up[s], trace.up_in[s], gv, &grads.up[s], true, threads);
  }
  Tensor<T> g_r0 = g;  // global skip branch
  for (int b = net.cfg.resblocks - 1; b >= 0; --b) {
    Tensor<T> gt = conv_backward(net.body[2 * b + 1], trace.act1[b], g, &grads.body[2 * b + 1],
                                 true, threads);
    gt = relu_backward(gt, trace.act1[b]);
    Tensor<T> gin =
        conv_backward(net.body[2 * b], trace.block_in[b], gt, &grads.body[2 * b], true, threads);
    add_inplace(gin, g);  // residual skip
    g = std::move(gin);
  }
  add_inplace(g, g_r0);
  conv_backward(net.head, trace.x, g, &grads.head, false, threads);
}

// ---------------------------------------------------------------------------
// EmbedNet

template <typename T>
void EmbedNet<T>::init(const EmbedConfig& c, RandomSource& rng) {
  if (c.layers < 1) throw ParamError("EmbedNet: needs at least one stage");
  if (c.taps < 1 || c.taps > c.layers)
    throw ParamError("EmbedNet: taps must be in [1, layers]");
  if (c.in_ch < 1 || c.base < 1) throw ParamError("EmbedNet: bad channel config");
  cfg = c;
  stages.resize(c.layers);
  int in = c.in_ch;
  for (int l = 0; l < c.layers; ++l) {
    const int mult = l < 3 ? (1 << l) : 8;
    const int out = c.base * mult;
    stages[l].configure(in, out, 4, 2, 1, c.spectral_norm);
    in = out;
  }
  score_w.assign(in, T(0));
  score_b.assign(1, T(0));

  for (auto& s : stages) s.init_kaiming(rng);
  const double bound = std::sqrt(6.0 / static_cast<double>(in));
  for (T& w : score_w) w = static_cast<T>(rng.uniform(-bound, bound));
  score_b[0] = T(0);
}

template <typename T>
void EmbedNet<T>::refresh_sn() {
  for (auto& s : stages) s.refresh_sn();
}

template <typename T>
void EmbedGrads<T>::zero_like(const EmbedNet<T>& net) {
  stages.resize(net.stages.size());
  for (std::size_t i = 0; i < stages.size(); ++i) stages[i].zero_like(net.stages[i]);
  score_w.assign(net.score_w.size(), T(0));
  score_b.assign(1, T(0));
}

template <typename T>
EmbedOut<T> embed_forward(const EmbedNet<T>& net, const Tensor<T>& x, bool need_scores,
                          EmbedTrace<T>* trace, int threads) {
  EmbedOut<T> out;
  if (trace) {
    trace->x = x;
    trace->act.clear();
  }
  // Stages past the last tap only feed the score head; skip them when no
  // scores were asked for.
  const std::size_t run_stages =
      need_scores ? net.stages.size()
                  : std::min<std::size_t>(net.stages.size(), static_cast<std::size_t>(net.cfg.taps));
  Tensor<T> cur = x;
  for (std::size_t l = 0; l < run_stages; ++l) {
    cur = conv_forward(net.stages[l], cur, threads);
    leaky_relu_forward_inplace(cur, T(0.2));
    if (static_cast<int>(l) < net.cfg.taps) out.pyramid.push_back(cur);
    if (trace) trace->act.push_back(cur);
  }
  if (need_scores) {
    const int C = cur.c();
    const T inv_hw = T(1) / T(cur.h() * cur.w());
    out.scores.assign(cur.n(), T(0));
    for (int n = 0; n < cur.n(); ++n) {
      T acc = net.score_b[0];
      const T* sp = cur.sample_ptr(n);
      for (int c = 0; c < C; ++c) {
        T s = 0;
        const T* cp = sp + static_cast<std::size_t>(c) * cur.h() * cur.w();
        for (int i = 0; i < cur.h() * cur.w(); ++i) s += cp[i];
        acc += net.score_w[c] * s * inv_hw;
      }
      out.scores[n] = acc;
    }
  }
  return out;
}

template <typename T>
Tensor<T> embed_backward_input(const EmbedNet<T>& net, const EmbedTrace<T>& trace,
                               const FeaturePyramid<T>& g_pyramid, int threads) {
  if (g_pyramid.empty()) throw ParamError("embed_backward_input: empty pyramid gradient");
  if (g_pyramid.size() > trace.act.size())
    throw DimensionError("embed_backward_input: more gradients than traced stages");
  const int L = static_cast<int>(g_pyramid.size());
  Tensor<T> g;
  for (int l = L - 1; l >= 0; --l) {
    if (l == L - 1)
      g = g_pyramid[l];
    else
      add_inplace(g, g_pyramid[l]);
    Tensor<T> gpre = leaky_relu_backward(g, trace.act[l], T(0.2));
    g = conv_backward(net.stages[l], l == 0 ? trace.x : trace.act[l - 1], gpre,
                      static_cast<ConvGrads<T>*>(nullptr), true, threads);
  }
  return g;
}

template <typename T>
void embed_backward_params(const EmbedNet<T>& net, const EmbedTrace<T>& trace,
                           std::span<const T> g_scores, EmbedGrads<T>& grads, int threads) {
  if (trace.act.size() != net.stages.size())
    throw DimensionError("embed_backward_params: incomplete trace");
  const Tensor<T>& last = trace.act.back();
  if (static_cast<int>(g_scores.size()) != last.n())
    throw DimensionError("embed_backward_params: score gradient batch mismatch");
  const int C = last.c();
  const int HW = last.h() * last.w();
  const T inv_hw = T(1) / T(HW);

  for (int n = 0; n < last.n(); ++n) {
    const T* sp = last.sample_ptr(n);
    for (int c = 0; c < C; ++c) {
      T s = 0;
      const T* cp = sp + static_cast<std::size_t>(c) * HW;
      for (int i = 0; i < HW; ++i) s += cp[i];
      grads.score_w[c] += g_scores[n] * s * inv_hw;
    }
    grads.score_b[0] += g_scores[n];
  }

  Tensor<T> g(last.n(), C, last.h(), last.w());
  for (int n = 0; n < last.n(); ++n) {
    T* gp = g.sample_ptr(n);
    for (int c = 0; c < C; ++c) {
      const T v = g_scores[n] * net.score_w[c] * inv_hw;
      T* cp = gp + static_cast<std::size_t>(c) * HW;
      for (int i = 0; i < HW; ++i) cp[i] = v;
    }
  }

  for (int l = static_cast<int>(net.stages.size()) - 1; l >= 0; --l) {
    Tensor<T> gpre = leaky_relu_backward(g, trace.act[l], T(0.2));
    g = conv_backward(net.stages[l], l == 0 ? trace.x : trace.act[l - 1], gpre,
                      &grads.stages[l], l > 0, threads);
  }
}

template <typename T>
void finalize_embed_grads(const EmbedNet<T>& net, EmbedGrads<T>& grads) {
  for (std::size_t l = 0; l < net.stages.size(); ++l)
    sn_grad_transform(net.stages[l], grads.stages[l].w);
}

// ---------------------------------------------------------------------------
// Parameter sequences

template <typename T>
std::vector<std::vector<T>*> param_sequence(SrNet<T>& net) {
  std::vector<std::vector<T>*> seq;
  for_each_param(net, [&](const std::string&, std::vector<T>& v,
                          const std::vector<std::int64_t>&) { seq.push_back(&v); });
  return seq;
}

template <typename T>
std::vector<std::vector<T>*> param_sequence(EmbedNet<T>& net) {
  std::vector<std::vector<T>*> seq;
  for_each_param(net, [&](const std::string&, std::vector<T>& v,
                          const std::vector<std::int64_t>&) { seq.push_back(&v); });
  return seq;
}

template <typename T>
std::vector<std::vector<T>*> grad_sequence(SrGrads<T>& g) {
  std::vector<std::vector<T>*> seq;
  seq.push_back(&g.head.w);
  seq.push_back(&g.head.b);
  for (auto& b : g.body) {
    seq.push_back(&b.w);
    seq.push_back(&b.b);
  }
  for (auto& u : g.up) {
    seq.push_back(&u.w);
    seq.push_back(&u.b);
  }
  seq.push_back(&g.tail.w);
  seq.push_back(&g.tail.b);
  return seq;
}

template <typename T>
std::vector<std::vector<T>*> grad_sequence(EmbedGrads<T>& g) {
  std::vector<std::vector<T>*> seq;
  for (auto& s : g.stages) {
    seq.push_back(&s.w);
    seq.push_back(&s.b);
  }
  seq.push_back(&g.score_w);
  seq.push_back(&g.score_b);
  return seq;
}

template <typename T>
std::size_t param_count(SrNet<T>& net) {
  std::size_t total = 0;
  for (auto* v : param_sequence(net)) total += v->size();
  return total;
}

template <typename T>
std::size_t param_count(EmbedNet<T>& net) {
  std::size_t total = 0;
  for (auto* v : param_sequence(net)) total += v->size();
  return total;
}

// ---------------------------------------------------------------------------

#define PCLSR_INSTANTIATE_NN(T)                                                              \
  template struct Conv2d<T>;                                                                 \
  template void sn_grad_transform<T>(const Conv2d<T>&, std::vector<T>&);                     \
  template Tensor<T> conv_forward<T>(const Conv2d<T>&, const Tensor<T>&, int);               \
  template Tensor<T> conv_backward<T>(const Conv2d<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                      ConvGrads<T>*, bool, int);                             \
  template void relu_forward_inplace<T>(Tensor<T>&);                                         \
  template Tensor<T> relu_backward<T>(const Tensor<T>&, const Tensor<T>&);                   \
  template void leaky_relu_forward_inplace<T>(Tensor<T>&, T);                                \
  template Tensor<T> leaky_relu_backward<T>(const Tensor<T>&, const Tensor<T>&, T);          \
  template Tensor<T> pixel_shuffle<T>(const Tensor<T>&, int);                                \
  template Tensor<T> pixel_shuffle_vjp<T>(const Tensor<T>&, int);                            \
  template struct SrNet<T>;                                                                  \
  template struct SrGrads<T>;                                                                \
  template Tensor<T> sr_forward<T>(const SrNet<T>&, const Tensor<T>&, SrTrace<T>*, int);     \
  template void sr_backward<T>(const SrNet<T>&, const SrTrace<T>&, const Tensor<T>&,         \
                               SrGrads<T>&, int);                                            \
  template struct EmbedNet<T>;                                                               \
  template struct EmbedGrads<T>;                                                             \
  template EmbedOut<T> embed_forward<T>(const EmbedNet<T>&, const Tensor<T>&, bool,          \
                                        EmbedTrace<T>*, int);                                \
  template Tensor<T> embed_backward_input<T>(const EmbedNet<T>&, const EmbedTrace<T>&,       \
                                             const FeaturePyramid<T>&, int);                 \
  template void embed_backward_params<T>(const EmbedNet<T>&, const EmbedTrace<T>&,           \
                                         std::span<const T>, EmbedGrads<T>&, int);           \
  template void finalize_embed_grads<T>(const EmbedNet<T>&, EmbedGrads<T>&);                 \
  template std::vector<std::vector<T>*> param_sequence<T>(SrNet<T>&);                        \
  template std::vector<std::vector<T>*> param_sequence<T>(EmbedNet<T>&);                     \
  template std::vector<std::vector<T>*> grad_sequence<T>(SrGrads<T>&);                       \
  template std::vector<std::vector<T>*> grad_sequence<T>(EmbedGrads<T>&);                    \
  template std::size_t param_count<T>(SrNet<T>&);                                            \
  template std::size_t param_count<T>(EmbedNet<T>&);

PCLSR_INSTANTIATE_NN(float)
PCLSR_INSTANTIATE_NN(double)
#undef PCLSR_INSTANTIATE_NN

}  // namespace pclsr::nn
