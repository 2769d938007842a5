#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pclsr/losses.hpp"
#include "pclsr/rng.hpp"
#include "pclsr/tensor.hpp"

namespace pclsr::nn {

/// 2-D convolution with optional spectral weight normalization.
/// Weight layout: [out_ch][in_ch][ky][kx], row-major.
template <typename T>
struct Conv2d {
  int in_ch = 0, out_ch = 0, ksize = 3, stride = 1, pad = 1;
  std::vector<T> weight;
  std::vector<T> bias;

  bool use_sn = false;
  std::vector<T> sn_u, sn_v;   // power-iteration vectors
  std::vector<T> sn_w;         // weight / sigma, refreshed explicitly
  T sn_sigma = T(1);

  void configure(int in, int out, int k, int stride_, int pad_, bool sn = false);

  /// Kaiming-uniform fan-in init: U(-b, b) with b = sqrt(6 / (in*k*k)),
  /// biases zero. Consumes the rng in weight storage order.
  void init_kaiming(RandomSource& rng);

  int out_h(int h) const { return (h + 2 * pad - ksize) / stride + 1; }
  int out_w(int w) const { return (w + 2 * pad - ksize) / stride + 1; }

  const std::vector<T>& effective_weight() const { return use_sn ? sn_w : weight; }

  /// One power-iteration step on u/v, then recompute sigma and the
  /// normalized weight. No-op when spectral norm is disabled.
  void refresh_sn();

  /// Recompute sigma and the normalized weight with u/v held fixed
  /// (used by gradient checks, where u/v are treated as constants).
  void recompute_sn_fixed_uv();
};

template <typename T>
struct ConvGrads {
  std::vector<T> w, b;
  void zero_like(const Conv2d<T>& c) {
    w.assign(c.weight.size(), T(0));
    b.assign(c.bias.size(), T(0));
  }
};

/// y = conv(x) + bias over a batch; samples are distributed over `threads`.
template <typename T>
Tensor<T> conv_forward(const Conv2d<T>& c, const Tensor<T>& x, int threads = 1);

/// Backward for one conv. `x` is the forward input. Accumulates into
/// `grads` when non-null (deterministic for a fixed thread count) and
/// returns dL/dx when want_gx, otherwise an empty tensor. With spectral
/// norm enabled the weight gradient is w.r.t. the normalized weight; apply
/// sn_grad_transform once all contributions are accumulated.
template <typename T>
Tensor<T> conv_backward(const Conv2d<T>& c, const Tensor<T>& x, const Tensor<T>& gy,
                        ConvGrads<T>* grads, bool want_gx, int threads = 1);

/// Map d(loss)/d(normalized weight) to d(loss)/d(raw weight), in place.
template <typename T>
void sn_grad_transform(const Conv2d<T>& c, std::vector<T>& gw);

template <typename T>
void relu_forward_inplace(Tensor<T>& x);
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& gy, const Tensor<T>& y);

template <typename T>
void leaky_relu_forward_inplace(Tensor<T>& x, T slope);
template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& gy, const Tensor<T>& y, T slope);

/// Rearrange N x C*r^2 x H x W into N x C x H*r x W*r. Input channel
/// c*r*r + dy*r + dx lands on output pixel offset (dy, dx).
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r);
template <typename T>
Tensor<T> pixel_shuffle_vjp(const Tensor<T>& gy, int r);

// ---------------------------------------------------------------------------
// Super-resolution backbone: conv head, residual blocks (conv-ReLU-conv with
// identity skip, no normalization), global skip, pixel-shuffle upsampler,
// conv tail. Outputs are unclamped; clamp at evaluation time only.

struct SrConfig {
  int in_ch = 3, out_ch = 3;
  int channels = 32;
  int resblocks = 4;
  int scale = 4;  // 2, 3 or 4
};

template <typename T>
struct SrNet {
  SrConfig cfg;
  Conv2d<T> head;
  std::vector<Conv2d<T>> body;  // 2 convs per residual block
  std::vector<Conv2d<T>> up;    // one conv per shuffle stage
  std::vector<int> up_factors;
  Conv2d<T> tail;

  void init(const SrConfig& c, RandomSource& rng);
};

template <typename T>
struct SrTrace {
  Tensor<T> x;
  std::vector<Tensor<T>> block_in;  // r_0 (head out) .. r_B
  std::vector<Tensor<T>> act1;      // per block, output of the inner ReLU
  Tensor<T> body_out;               // r_B + r_0
  std::vector<Tensor<T>> up_in;     // input of each upsampler conv
  Tensor<T> tail_in;
};

template <typename T>
struct SrGrads {
  ConvGrads<T> head;
  std::vector<ConvGrads<T>> body;
  std::vector<ConvGrads<T>> up;
  ConvGrads<T> tail;
  void zero_like(const SrNet<T>& net);
};

template <typename T>
Tensor<T> sr_forward(const SrNet<T>& net, const Tensor<T>& lr, SrTrace<T>* trace = nullptr,
                     int threads = 1);

template <typename T>
void sr_backward(const SrNet<T>& net, const SrTrace<T>& trace, const Tensor<T>& g_out,
                 SrGrads<T>& grads, int threads = 1);

// ---------------------------------------------------------------------------
// Embedding network: strided 4x4 convs with LeakyReLU(0.2), channel widths
// base, 2*base, 4*base, 8*base, capped at 8*base. The feature pyramid taps
// the first `taps` stage outputs; the scalar score is an affine map of the
// global mean pool of the last stage.

struct EmbedConfig {
  int in_ch = 9;
  int base = 64;
  int layers = 5;
  int taps = 4;
  bool spectral_norm = false;
};

template <typename T>
struct EmbedNet {
  EmbedConfig cfg;
  std::vector<Conv2d<T>> stages;
  std::vector<T> score_w;
  std::vector<T> score_b;  // single element

  void init(const EmbedConfig& c, RandomSource& rng);
  void refresh_sn();
};

template <typename T>
struct EmbedTrace {
  Tensor<T> x;
  std::vector<Tensor<T>> act;  // post-activation output of each stage
};

template <typename T>
struct EmbedOut {
  FeaturePyramid<T> pyramid;   // first cfg.taps stage outputs
  std::vector<T> scores;       // per sample, empty unless requested
};

template <typename T>
struct EmbedGrads {
  std::vector<ConvGrads<T>> stages;
  std::vector<T> score_w;
  std::vector<T> score_b;
  void zero_like(const EmbedNet<T>& net);
};

template <typename T>
EmbedOut<T> embed_forward(const EmbedNet<T>& net, const Tensor<T>& x, bool need_scores,
                          EmbedTrace<T>* trace = nullptr, int threads = 1);

/// dL/dx from gradients flowing into the pyramid taps (anchor path of the
/// contrastive loss). Parameters receive nothing here.
template <typename T>
Tensor<T> embed_backward_input(const EmbedNet<T>& net, const EmbedTrace<T>& trace,
                               const FeaturePyramid<T>& g_pyramid, int threads = 1);

/// Parameter gradients from gradients on the scalar scores (discriminator
/// path). Accumulates into `grads`. Weight grads are w.r.t. the effective
/// (possibly normalized) weights; call finalize_embed_grads afterwards.
template <typename T>
void embed_backward_params(const EmbedNet<T>& net, const EmbedTrace<T>& trace,
                           std::span<const T> g_scores, EmbedGrads<T>& grads,
                           int threads = 1);

/// Apply the spectral-norm gradient transform where enabled.
template <typename T>
void finalize_embed_grads(const EmbedNet<T>& net, EmbedGrads<T>& grads);

// ---------------------------------------------------------------------------
// Parameter traversal in a fixed order (used by the optimizer and the
// checkpoint writer). The callback receives (name, values, logical shape).

template <typename T, typename F>
void for_each_param(SrNet<T>& net, F&& f) {
  auto conv = [&](const std::string& name, Conv2d<T>& c) {
    f(name + ".w", c.weight,
      std::vector<std::int64_t>{c.out_ch, c.in_ch, c.ksize, c.ksize});
    f(name + ".b", c.bias, std::vector<std::int64_t>{c.out_ch});
  };
  conv("head", net.head);
  for (std::size_t i = 0; i < net.body.size(); ++i) conv("body." + std::to_string(i), net.body[i]);
  for (std::size_t i = 0; i < net.up.size(); ++i) conv("up." + std::to_string(i), net.up[i]);
  conv("tail", net.tail);
}

template <typename T, typename F>
void for_each_param(EmbedNet<T>& net, F&& f) {
  for (std::size_t i = 0; i < net.stages.size(); ++i) {
    Conv2d<T>& c = net.stages[i];
    const std::string name = "stage." + std::to_string(i);
    f(name + ".w", c.weight,
      std::vector<std::int64_t>{c.out_ch, c.in_ch, c.ksize, c.ksize});
    f(name + ".b", c.bias, std::vector<std::int64_t>{c.out_ch});
  }
  f("score.w", net.score_w, std::vector<std::int64_t>{static_cast<std::int64_t>(net.score_w.size())});
  f("score.b", net.score_b, std::vector<std::int64_t>{1});
}

/// Gradient vectors flattened in the same order as for_each_param.
template <typename T>
std::vector<std::vector<T>*> grad_sequence(SrGrads<T>& g);
template <typename T>
std::vector<std::vector<T>*> grad_sequence(EmbedGrads<T>& g);
template <typename T>
std::vector<std::vector<T>*> param_sequence(SrNet<T>& net);
template <typename T>
std::vector<std::vector<T>*> param_sequence(EmbedNet<T>& net);

template <typename T>
std::size_t param_count(SrNet<T>& net);
template <typename T>
std::size_t param_count(EmbedNet<T>& net);

}  // namespace pclsr::nn
