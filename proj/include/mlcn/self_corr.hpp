#pragma once

#include <vector>

#include "mlcn/backbone.hpp"
#include "mlcn/contrastive.hpp"

namespace mlcn {

/// Per-channel softmax of a [H, W, C] map. With kSpatial every channel is a
/// distribution over the H*W positions; kChannel normalizes across channels
/// at each position instead.
template <std::floating_point T>
Tensor<T> self_attention_map(const Tensor<T>& feature, SelfSoftmaxAxis axis = SelfSoftmaxAxis::kSpatial) {
  if (feature.rank() != 3) throw ShapeError("self_attention_map expects [H,W,C], got " + shape_str(feature.shape()));
  const std::size_t hw = feature.dim(0) * feature.dim(1), c = feature.dim(2);
  const Tensor<T> flat = reshape(feature, {hw, c});
  return reshape(softmax(flat, axis == SelfSoftmaxAxis::kSpatial ? 0 : 1), feature.shape());
}

/// z[c] = (1/HW) * sum_x A[x, c] * F[x, c].
template <std::floating_point T>
Tensor<T> self_embedding(const Tensor<T>& feature, const Tensor<T>& attention) {
  if (feature.shape() != attention.shape() || feature.rank() != 3) {
    throw ShapeError("self_embedding: feature " + shape_str(feature.shape()) + " vs attention " +
                     shape_str(attention.shape()));
  }
  const std::size_t hw = feature.dim(0) * feature.dim(1), c = feature.dim(2);
  const Tensor<T> weighted = reshape(mul(attention, feature), {hw, c});
  return scale(sum(weighted, 0), T(1) / static_cast<T>(hw));
}

template <std::floating_point T>
Tensor<T> self_embedding(const Tensor<T>& feature, SelfSoftmaxAxis axis = SelfSoftmaxAxis::kSpatial) {
  return self_embedding(feature, self_attention_map(feature, axis));
}

template <std::floating_point T>
Tensor<T> loss_sc(const std::vector<Tensor<T>>& support_prototypes, const std::vector<Tensor<T>>& query_views,
                  std::size_t target, double tau1,
                  ContrastiveDenominator denominator = ContrastiveDenominator::kPaired) {
  return contrastive_loss(support_prototypes, query_views, target, tau1, denominator);
}

}  // namespace mlcn
