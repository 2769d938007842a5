#pragma once

#include <span>
#include <vector>

#include "pclsr/tensor.hpp"

namespace pclsr {

/// Per-layer feature maps, shallow to deep; each tensor is a batch.
template <typename T>
using FeaturePyramid = std::vector<Tensor<T>>;

}  // namespace pclsr

namespace pclsr::loss {

template <typename T>
T logsumexp(std::span<const T> v);

/// Single-positive InfoNCE on plain vectors with dot-product similarity:
///   -log( exp(a.p / tau) / (exp(a.p / tau) + sum_k exp(a.n_k / tau)) )
template <typename T>
T info_nce(std::span<const T> anchor, std::span<const T> positive,
           const std::vector<std::vector<T>>& negatives, T tau);

/// Multi-positive extension: mean over positives of the one-vs-negatives
/// term (each positive competes only against the negatives, not against the
/// other positives).
template <typename T>
T sup_con(std::span<const T> anchor, const std::vector<std::vector<T>>& positives,
          const std::vector<std::vector<T>>& negatives, T tau);

/// Softmax cross-entropy over precomputed similarities, the shared core of
/// the contrastive losses above. Optional gradients w.r.t. the similarities.
template <typename T>
T nce_from_similarities(std::span<const T> pos_sims, std::span<const T> neg_sims, T tau,
                        std::vector<T>* grad_pos = nullptr,
                        std::vector<T>* grad_neg = nullptr);

/// Mean over spatial positions of the cosine similarity between the channel
/// vectors of f and g at that position. Denominators get +1e-8.
template <typename T>
T pixel_cosine(ConstSampleView<T> f, ConstSampleView<T> g);

/// Accumulate scale * d pixel_cosine(f,g) / df into gf. Positions where f's
/// channel vector has zero norm contribute nothing.
template <typename T>
void pixel_cosine_grad_f(ConstSampleView<T> f, ConstSampleView<T> g, T scale,
                         SampleView<T> gf);

/// Contrastive loss at one layer for one sample: similarities are
/// pixel-wise cosine between the anchor map and each positive/negative map,
/// combined with nce_from_similarities. Empty negatives give 0.
/// If grad_f is non-null the gradient w.r.t. the anchor map is accumulated
/// into it, scaled by grad_scale.
template <typename T>
T pcl_layer_loss(ConstSampleView<T> f, const std::vector<ConstSampleView<T>>& positives,
                 const std::vector<ConstSampleView<T>>& negatives, T tau,
                 SampleView<T>* grad_f = nullptr, T grad_scale = T(1));

/// Full contrastive objective: mean over batch samples and pyramid layers of
/// pcl_layer_loss. positives[j] / negatives[k] are pyramids whose layer
/// tensors are batched like the anchor's. Gradients (w.r.t. the anchor
/// pyramid only) are written to grad_anchors when non-null, with the same
/// shapes as `anchors`. Empty negatives give 0 and zero gradients.
template <typename T>
T pcl_total_loss(const FeaturePyramid<T>& anchors,
                 const std::vector<FeaturePyramid<T>>& positives,
                 const std::vector<FeaturePyramid<T>>& negatives, T tau,
                 FeaturePyramid<T>* grad_anchors = nullptr);

/// Discriminator objective over batch scores: real samples are scored one
/// against the fake batch, fake samples one against the (negated) real
/// batch, both via softmax cross-entropy:
///   L = -(1/m) sum_i log( e^{r_i} / (e^{r_i} + sum_j e^{s_j}) )
///       -(1/n) sum_j log( e^{-s_j} / (e^{-s_j} + sum_i e^{-r_i}) )
template <typename T>
T contra_d_loss(std::span<const T> scores_real, std::span<const T> scores_fake,
                std::vector<T>* grad_real = nullptr, std::vector<T>* grad_fake = nullptr);

/// Mean absolute error. Optional gradient w.r.t. `sr` (sign/numel, 0 at ties).
template <typename T>
T l1_loss(const Tensor<T>& sr, const Tensor<T>& hr, Tensor<T>* grad_sr = nullptr);

template <typename T>
inline T sr_total_loss(T l1, T lcl, T alpha) {
  return l1 + alpha * lcl;
}

}  // namespace pclsr::loss
