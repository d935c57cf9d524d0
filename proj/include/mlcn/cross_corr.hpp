#pragma once

#include <utility>
#include <vector>

#include "mlcn/backbone.hpp"
#include "mlcn/contrastive.hpp"

namespace mlcn {

/// Row-normalized [HW, C] view of an [H, W, C] map; zero columns stay zero.
template <std::floating_point T>
Tensor<T> normalized_positions(const Tensor<T>& feature) {
  if (feature.rank() != 3) throw ShapeError("expected [H,W,C], got " + shape_str(feature.shape()));
  return normalize_rows(reshape(feature, {feature.dim(0) * feature.dim(1), feature.dim(2)}));
}

/// 4D correlation flattened to [HW_q, HW_s]: entry (x_q, x_s) is the cosine
/// between the channel vectors at those positions, 0 where either is zero.
/// Takes the outputs of normalized_positions.
template <std::floating_point T>
Tensor<T> correlation_from_normalized(const Tensor<T>& query_unit, const Tensor<T>& support_unit) {
  if (query_unit.rank() != 2 || support_unit.rank() != 2 || query_unit.dim(1) != support_unit.dim(1)) {
    throw ShapeError("correlation: " + shape_str(query_unit.shape()) + " vs " + shape_str(support_unit.shape()));
  }
  return matmul(query_unit, transpose(support_unit));
}

template <std::floating_point T>
Tensor<T> correlation_tensor(const Tensor<T>& query, const Tensor<T>& support) {
  if (query.shape() != support.shape()) {
    throw ShapeError("correlation_tensor: " + shape_str(query.shape()) + " vs " + shape_str(support.shape()));
  }
  return correlation_from_normalized(normalized_positions(query), normalized_positions(support));
}

template <std::floating_point T>
struct CrossAttention {
  Tensor<T> query;    // M_q, [HW_q]
  Tensor<T> support;  // M_s, [HW_s]
};

/// M_q(x_q) = mean over x_s of softmax_{x_q'}(Cos(x_q', x_s) / gamma) at x_q,
/// and M_s symmetrically. Both sum to 1 over positions.
template <std::floating_point T>
CrossAttention<T> cross_attention_map(const Tensor<T>& correlation, double gamma) {
  if (!(gamma > 0)) throw ConfigError("cross-attention temperature must be positive");
  if (correlation.rank() != 2) throw ShapeError("cross_attention_map expects [HW_q, HW_s]");
  const Tensor<T> logits = scale(correlation, static_cast<T>(1.0 / gamma));
  return {mean(softmax(logits, 0), 1), mean(softmax(logits, 1), 0)};
}

/// c[ch] = (1/HW) * sum_x M(x) * F[x, ch].
template <std::floating_point T>
Tensor<T> cross_embedding(const Tensor<T>& feature, const Tensor<T>& attention) {
  if (feature.rank() != 3) throw ShapeError("cross_embedding expects [H,W,C], got " + shape_str(feature.shape()));
  const std::size_t hw = feature.dim(0) * feature.dim(1), c = feature.dim(2);
  if (attention.size() != hw) {
    throw ShapeError("cross_embedding: attention " + shape_str(attention.shape()) + " vs map " +
                     shape_str(feature.shape()));
  }
  const Tensor<T> pooled = matmul(reshape(attention, {1, hw}), reshape(feature, {hw, c}));
  return scale(reshape(pooled, {c}), T(1) / static_cast<T>(hw));
}

template <std::floating_point T>
struct CrossPair {
  Tensor<T> query_embedding;    // c_q
  Tensor<T> support_embedding;  // c_s
};

/// Cross embeddings of one query/support pair given their normalized views.
template <std::floating_point T>
CrossPair<T> cross_pair(const Tensor<T>& query, const Tensor<T>& query_unit, const Tensor<T>& support,
                        const Tensor<T>& support_unit, double gamma) {
  const auto att = cross_attention_map(correlation_from_normalized(query_unit, support_unit), gamma);
  return {cross_embedding(query, att.query), cross_embedding(support, att.support)};
}

template <std::floating_point T>
Tensor<T> loss_cc(const std::vector<Tensor<T>>& support_prototypes, const std::vector<Tensor<T>>& query_views,
                  std::size_t target, double tau2,
                  ContrastiveDenominator denominator = ContrastiveDenominator::kPaired) {
  return contrastive_loss(support_prototypes, query_views, target, tau2, denominator);
}

}  // namespace mlcn
