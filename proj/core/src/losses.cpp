#include "pclsr/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace pclsr::loss {

namespace {

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw DimensionError("dot: vector length mismatch");
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void check_tau(T tau) {
  if (!(tau > T(0))) throw ParamError("contrastive loss: tau must be positive");
}

/// Per-position channel dot products and squared norms for one (f, g) pair,
/// accumulated channel-by-channel so the inner loop streams whole planes.
/// The per-position accumulation order (ascending channel) matches a direct
/// position-major loop, so values are identical either way.
template <typename T>
struct CosPlanes {
  std::vector<T> uv, uu, vv;

  void build(ConstSampleView<T> f, ConstSampleView<T> g) {
    const std::size_t hw = static_cast<std::size_t>(f.h) * f.w;
    uv.assign(hw, T(0));
    uu.assign(hw, T(0));
    vv.assign(hw, T(0));
    for (int c = 0; c < f.c; ++c) {
      const T* fp = f.ptr + c * hw;
      const T* gp = g.ptr + c * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        uv[p] += fp[p] * gp[p];
        uu[p] += fp[p] * fp[p];
        vv[p] += gp[p] * gp[p];
      }
    }
  }

  T mean_cosine() const {
    const T eps = T(1e-8);
    T acc = 0;
    for (std::size_t p = 0; p < uv.size(); ++p)
      acc += uv[p] / (std::sqrt(uu[p]) * std::sqrt(vv[p]) + eps);
    return acc / T(uv.size());
  }

  /// Accumulate scale * d mean_cosine / df into gf:
  ///   d/du [ u.v / (|u||v|+eps) ] = v/den - (u.v)|v| u / (den^2 |u|)
  void grad_f(ConstSampleView<T> f, ConstSampleView<T> g, T scale, SampleView<T> gf) const {
    const T eps = T(1e-8);
    const std::size_t hw = uv.size();
    const T inv_hw = scale / T(hw);
    std::vector<T> ga(hw), gb(hw);
    for (std::size_t p = 0; p < hw; ++p) {
      const T nu = std::sqrt(uu[p]), nv = std::sqrt(vv[p]);
      const T den = nu * nv + eps;
      if (nu == T(0)) {
        ga[p] = T(0);
        gb[p] = T(0);
        continue;
      }
      ga[p] = inv_hw / den;
      gb[p] = inv_hw * uv[p] * nv / (den * den * nu);
    }
    for (int c = 0; c < f.c; ++c) {
      const T* fp = f.ptr + c * hw;
      const T* gp = g.ptr + c * hw;
      T* out = gf.ptr + c * hw;
      for (std::size_t p = 0; p < hw; ++p) out[p] += gp[p] * ga[p] - fp[p] * gb[p];
    }
  }
};

}  // namespace

template <typename T>
T logsumexp(std::span<const T> v) {
  if (v.empty()) throw ParamError("logsumexp: empty input");
  const T m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(static_cast<double>(m))) return m;
  T s = 0;
  for (T x : v) s += std::exp(x - m);
  return m + std::log(s);
}

template <typename T>
T nce_from_similarities(std::span<const T> pos_sims, std::span<const T> neg_sims, T tau,
                        std::vector<T>* grad_pos, std::vector<T>* grad_neg) {
  check_tau(tau);
  if (pos_sims.empty()) throw ParamError("nce_from_similarities: no positives");
  const std::size_t p = pos_sims.size(), n = neg_sims.size();
  if (grad_pos) grad_pos->assign(p, T(0));
  if (grad_neg) grad_neg->assign(n, T(0));
  if (n == 0) return T(0);

  std::vector<T> z(1 + n);
  T total = 0;
  for (std::size_t j = 0; j < p; ++j) {
    z[0] = pos_sims[j] / tau;
    for (std::size_t k = 0; k < n; ++k) z[1 + k] = neg_sims[k] / tau;
    const T lse = logsumexp(std::span<const T>(z));
    total += lse - z[0];
    if (grad_pos || grad_neg) {
      const T wp = std::exp(z[0] - lse);
      if (grad_pos) (*grad_pos)[j] = (wp - T(1)) / (tau * T(p));
      if (grad_neg)
        for (std::size_t k = 0; k < n; ++k)
          (*grad_neg)[k] += std::exp(z[1 + k] - lse) / (tau * T(p));
    }
  }
  return total / T(p);
}

template <typename T>
T info_nce(std::span<const T> anchor, std::span<const T> positive,
           const std::vector<std::vector<T>>& negatives, T tau) {
  std::vector<T> ps = {dot(anchor, positive)};
  std::vector<T> ns(negatives.size());
  for (std::size_t k = 0; k < negatives.size(); ++k)
    ns[k] = dot(anchor, std::span<const T>(negatives[k]));
  return nce_from_similarities(std::span<const T>(ps), std::span<const T>(ns), tau);
}

template <typename T>
T sup_con(std::span<const T> anchor, const std::vector<std::vector<T>>& positives,
          const std::vector<std::vector<T>>& negatives, T tau) {
  std::vector<T> ps(positives.size());
  for (std::size_t j = 0; j < positives.size(); ++j)
    ps[j] = dot(anchor, std::span<const T>(positives[j]));
  std::vector<T> ns(negatives.size());
  for (std::size_t k = 0; k < negatives.size(); ++k)
    ns[k] = dot(anchor, std::span<const T>(negatives[k]));
  return nce_from_similarities(std::span<const T>(ps), std::span<const T>(ns), tau);
}

template <typename T>
T pixel_cosine(ConstSampleView<T> f, ConstSampleView<T> g) {
  if (f.c != g.c || f.h != g.h || f.w != g.w)
    throw DimensionError("pixel_cosine: feature map shape mismatch");
  CosPlanes<T> planes;
  planes.build(f, g);
  return planes.mean_cosine();
}

template <typename T>
void pixel_cosine_grad_f(ConstSampleView<T> f, ConstSampleView<T> g, T scale,
                         SampleView<T> gf) {
  if (f.c != g.c || f.h != g.h || f.w != g.w || gf.c != f.c || gf.h != f.h || gf.w != f.w)
    throw DimensionError("pixel_cosine_grad_f: feature map shape mismatch");
  CosPlanes<T> planes;
  planes.build(f, g);
  planes.grad_f(f, g, scale, gf);
}

template <typename T>
T pcl_layer_loss(ConstSampleView<T> f, const std::vector<ConstSampleView<T>>& positives,
                 const std::vector<ConstSampleView<T>>& negatives, T tau,
                 SampleView<T>* grad_f, T grad_scale) {
  check_tau(tau);
  if (positives.empty()) throw ParamError("pcl_layer_loss: no positives");
  if (negatives.empty()) return T(0);
  for (const auto& v : positives)
    if (v.c != f.c || v.h != f.h || v.w != f.w)
      throw DimensionError("pcl_layer_loss: positive shape mismatch");
  for (const auto& v : negatives)
    if (v.c != f.c || v.h != f.h || v.w != f.w)
      throw DimensionError("pcl_layer_loss: negative shape mismatch");

  // The pair planes are kept so the gradient pass does not redo the O(C*H*W)
  // accumulation.
  std::vector<CosPlanes<T>> pp(positives.size()), pn(negatives.size());
  std::vector<T> ps(positives.size()), ns(negatives.size());
  for (std::size_t j = 0; j < positives.size(); ++j) {
    pp[j].build(f, positives[j]);
    ps[j] = pp[j].mean_cosine();
  }
  for (std::size_t k = 0; k < negatives.size(); ++k) {
    pn[k].build(f, negatives[k]);
    ns[k] = pn[k].mean_cosine();
  }

  std::vector<T> gp, gn;
  const T loss = nce_from_similarities(std::span<const T>(ps), std::span<const T>(ns), tau,
                                       grad_f ? &gp : nullptr, grad_f ? &gn : nullptr);
  if (grad_f) {
    for (std::size_t j = 0; j < positives.size(); ++j)
      pp[j].grad_f(f, positives[j], grad_scale * gp[j], *grad_f);
    for (std::size_t k = 0; k < negatives.size(); ++k)
      pn[k].grad_f(f, negatives[k], grad_scale * gn[k], *grad_f);
  }
  return loss;
}

template <typename T>
T pcl_total_loss(const FeaturePyramid<T>& anchors,
                 const std::vector<FeaturePyramid<T>>& positives,
                 const std::vector<FeaturePyramid<T>>& negatives, T tau,
                 FeaturePyramid<T>* grad_anchors) {
  check_tau(tau);
  if (anchors.empty()) throw ParamError("pcl_total_loss: empty anchor pyramid");
  if (positives.empty()) throw ParamError("pcl_total_loss: no positives");
  const std::size_t layers = anchors.size();
  const int batch = anchors[0].n();
  for (const auto& pyr : positives)
    if (pyr.size() != layers) throw DimensionError("pcl_total_loss: positive pyramid depth mismatch");
  for (const auto& pyr : negatives)
    if (pyr.size() != layers) throw DimensionError("pcl_total_loss: negative pyramid depth mismatch");

  if (grad_anchors) {
    grad_anchors->resize(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      (*grad_anchors)[l].resize(anchors[l].n(), anchors[l].c(), anchors[l].h(), anchors[l].w());
    }
  }
  if (negatives.empty()) return T(0);

  // Mean over batch samples and layers; gradient scale folds the mean in.
  const T scale = T(1) / T(static_cast<double>(batch) * static_cast<double>(layers));
  T total = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    check_same_shape(anchors[l], positives[0][l], "pcl_total_loss");
    for (int i = 0; i < batch; ++i) {
      ConstSampleView<T> f = sample_view(anchors[l], i);
      std::vector<ConstSampleView<T>> pos, neg;
      pos.reserve(positives.size());
      neg.reserve(negatives.size());
      for (const auto& pyr : positives) pos.push_back(sample_view(pyr[l], i));
      for (const auto& pyr : negatives) neg.push_back(sample_view(pyr[l], i));
      if (grad_anchors) {
        SampleView<T> gf = sample_view((*grad_anchors)[l], i);
        total += pcl_layer_loss(f, pos, neg, tau, &gf, scale);
      } else {
        total += pcl_layer_loss(f, pos, neg, tau);
      }
    }
  }
  return total * scale;
}

template <typename T>
T contra_d_loss(std::span<const T> scores_real, std::span<const T> scores_fake,
                std::vector<T>* grad_real, std::vector<T>* grad_fake) {
  const std::size_t m = scores_real.size(), n = scores_fake.size();
  if (m == 0 || n == 0) throw ParamError("contra_d_loss: empty score batch");
  if (grad_real) grad_real->assign(m, T(0));
  if (grad_fake) grad_fake->assign(n, T(0));

  T total = 0;
  std::vector<T> z(1 + n);
  // Real side: each r_i against all fake scores.
  std::vector<T> lse_r(m);
  for (std::size_t i = 0; i < m; ++i) {
    z.resize(1 + n);
    z[0] = scores_real[i];
    for (std::size_t j = 0; j < n; ++j) z[1 + j] = scores_fake[j];
    lse_r[i] = logsumexp(std::span<const T>(z));
    total += (lse_r[i] - scores_real[i]) / T(m);
  }
  // Fake side: each -s_j against all negated real scores.
  std::vector<T> lse_f(n);
  for (std::size_t j = 0; j < n; ++j) {
    z.resize(1 + m);
    z[0] = -scores_fake[j];
    for (std::size_t i = 0; i < m; ++i) z[1 + i] = -scores_real[i];
    lse_f[j] = logsumexp(std::span<const T>(z));
    total += (lse_f[j] + scores_fake[j]) / T(n);
  }

  if (grad_real || grad_fake) {
    for (std::size_t i = 0; i < m; ++i) {
      const T sig = std::exp(scores_real[i] - lse_r[i]);
      if (grad_real) (*grad_real)[i] += (sig - T(1)) / T(m);
      if (grad_fake)
        for (std::size_t j = 0; j < n; ++j)
          (*grad_fake)[j] += std::exp(scores_fake[j] - lse_r[i]) / T(m);
    }
    for (std::size_t j = 0; j < n; ++j) {
      const T rho = std::exp(-scores_fake[j] - lse_f[j]);
      if (grad_fake) (*grad_fake)[j] += (T(1) - rho) / T(n);
      if (grad_real)
        for (std::size_t i = 0; i < m; ++i)
          (*grad_real)[i] -= std::exp(-scores_real[i] - lse_f[j]) / T(n);
    }
  }
  return total;
}

template <typename T>
T l1_loss(const Tensor<T>& sr, const Tensor<T>& hr, Tensor<T>* grad_sr) {
  check_same_shape(sr, hr, "l1_loss");
  if (sr.size() == 0) throw ParamError("l1_loss: empty tensors");
  const T inv = T(1) / T(static_cast<double>(sr.size()));
  if (grad_sr) grad_sr->resize(sr.n(), sr.c(), sr.h(), sr.w());
  const T* a = sr.data();
  const T* b = hr.data();
  T* g = grad_sr ? grad_sr->data() : nullptr;
  T total = 0;
  for (std::size_t i = 0; i < sr.size(); ++i) {
    const T d = a[i] - b[i];
    total += std::abs(d);
    if (g) g[i] = d > T(0) ? inv : (d < T(0) ? -inv : T(0));
  }
  return total * inv;
}

#define PCLSR_INSTANTIATE_LOSSES(T)                                                          \
  template T logsumexp<T>(std::span<const T>);                                               \
  template T nce_from_similarities<T>(std::span<const T>, std::span<const T>, T,             \
                                      std::vector<T>*, std::vector<T>*);                     \
  template T info_nce<T>(std::span<const T>, std::span<const T>,                             \
                         const std::vector<std::vector<T>>&, T);                             \
  template T sup_con<T>(std::span<const T>, const std::vector<std::vector<T>>&,              \
                        const std::vector<std::vector<T>>&, T);                              \
  template T pixel_cosine<T>(ConstSampleView<T>, ConstSampleView<T>);                        \
  template void pixel_cosine_grad_f<T>(ConstSampleView<T>, ConstSampleView<T>, T,            \
                                       SampleView<T>);                                       \
  template T pcl_layer_loss<T>(ConstSampleView<T>, const std::vector<ConstSampleView<T>>&,   \
                               const std::vector<ConstSampleView<T>>&, T, SampleView<T>*,    \
                               T);                                                           \
  template T pcl_total_loss<T>(const FeaturePyramid<T>&,                                     \
                               const std::vector<FeaturePyramid<T>>&,                        \
                               const std::vector<FeaturePyramid<T>>&, T, FeaturePyramid<T>*);\
  template T contra_d_loss<T>(std::span<const T>, std::span<const T>, std::vector<T>*,       \
                              std::vector<T>*);                                              \
  template T l1_loss<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>*);

PCLSR_INSTANTIATE_LOSSES(float)
PCLSR_INSTANTIATE_LOSSES(double)
#undef PCLSR_INSTANTIATE_LOSSES

}  // namespace pclsr::loss
