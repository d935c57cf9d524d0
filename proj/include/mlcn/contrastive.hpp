#pragma once

#include <vector>

#include "mlcn/config.hpp"
#include "mlcn/ops.hpp"

namespace mlcn {

/// Cosine similarity that maps a zero-norm operand to a constant 0 instead
/// of failing; ReLU features can legitimately be all-zero.
template <std::floating_point T>
Tensor<T> cosine_or_zero(const Tensor<T>& a, const Tensor<T>& b) {
  try {
    return cosine(a, b);
  } catch (const DegenerateVectorError&) {
    return Tensor<T>::scalar(T(0));
  }
}

/// -log softmax over classes of sim(support_n, query_n) / tau at `target`.
///
/// `supports[n]` is the class-n prototype and `queries[n]` the query view
/// attended in class-n context. With kPaired each class term pairs its own
/// prototype and view; with kFixedQuery every term uses `queries[target]`.
template <std::floating_point T>
Tensor<T> contrastive_loss(const std::vector<Tensor<T>>& supports, const std::vector<Tensor<T>>& queries,
                           std::size_t target, double tau,
                           ContrastiveDenominator denominator = ContrastiveDenominator::kPaired) {
  if (!(tau > 0)) throw ConfigError("contrastive temperature must be positive");
  const std::size_t n = supports.size();
  if (n < 2 || queries.size() != n) throw PreconditionError("contrastive loss needs N >= 2 paired prototypes");
  if (target >= n) throw PreconditionError("contrastive target out of range");
  std::vector<Tensor<T>> sims;
  sims.reserve(n);
  for (std::size_t c = 0; c < n; ++c) {
    const auto& q = denominator == ContrastiveDenominator::kPaired ? queries[c] : queries[target];
    sims.push_back(cosine_or_zero(supports[c], q));
  }
  const Tensor<T> logits = scale(reshape(concat(sims), {n}), static_cast<T>(1.0 / tau));
  return cross_entropy(logits, target);
}

/// Componentwise mean of equally sized embeddings.
template <std::floating_point T>
Tensor<T> prototype_average(const std::vector<Tensor<T>>& views) {
  if (views.empty()) throw PreconditionError("prototype_average of zero views");
  if (views.size() == 1) return views.front();
  return mean(stack(views), 0);
}

}  // namespace mlcn
