#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "mlcn/ops.hpp"
#include "mlcn/random.hpp"

namespace mlcn {

/// Fully connected layer over pooled features, one row per base class.
template <std::floating_point T>
struct ClassifierHead {
  Tensor<T> weight;  // [|C_base|, C]
  Tensor<T> bias;    // [|C_base|]

  std::size_t classes() const { return weight.dim(0); }

  std::vector<std::pair<std::string, Tensor<T>*>> trainable() {
    return {{"head.weight", &weight}, {"head.bias", &bias}};
  }
};

template <std::floating_point T>
ClassifierHead<T> init_head(std::size_t classes, std::size_t channels, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(channels));
  std::vector<T> w(classes * channels), b(classes);
  for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
  for (auto& v : b) v = static_cast<T>(rng.uniform(-bound, bound));
  return {Tensor<T>({classes, channels}, std::move(w), true), Tensor<T>({classes}, std::move(b), true)};
}

/// Mean softmax cross-entropy of W * avg_pool(F) + b over a [B, H, W, C]
/// batch (or a single [H, W, C] map) against global base-class labels.
template <std::floating_point T>
Tensor<T> loss_ce(const Tensor<T>& features, std::span<const std::size_t> global_labels, const ClassifierHead<T>& head) {
  Tensor<T> pooled = avg_pool_spatial(features);
  if (pooled.rank() == 1) pooled = reshape(pooled, {1, pooled.size()});
  for (auto l : global_labels) {
    if (l >= head.classes()) {
      throw DataError("base-class label " + std::to_string(l) + " outside classifier of " +
                      std::to_string(head.classes()) + " classes");
    }
  }
  const Tensor<T> logits = add(matmul(pooled, transpose(head.weight)), head.bias);
  return cross_entropy(logits, global_labels);
}

template <std::floating_point T>
struct LossBundle {
  Tensor<T> l_ce;
  Tensor<T> l_sc = Tensor<T>::scalar(T(0));
  Tensor<T> l_cc = Tensor<T>::scalar(T(0));
  Tensor<T> l_pc = Tensor<T>::scalar(T(0));
  Tensor<T> l_total;
  double alpha = 0, beta = 0, gamma = 0;
};

/// l_total = l_ce + alpha l_sc + beta l_cc + gamma l_pc. Absent terms were
/// never computed and contribute exactly zero.
template <std::floating_point T>
LossBundle<T> total_loss(const Tensor<T>& l_ce, const std::optional<Tensor<T>>& l_sc,
                         const std::optional<Tensor<T>>& l_cc, const std::optional<Tensor<T>>& l_pc, double alpha,
                         double beta, double gamma) {
  if (alpha < 0 || beta < 0 || gamma < 0) throw ConfigError("loss weights must be non-negative");
  LossBundle<T> b;
  b.l_ce = l_ce;
  b.alpha = alpha;
  b.beta = beta;
  b.gamma = gamma;
  Tensor<T> total = l_ce;
  if (l_sc) {
    b.l_sc = *l_sc;
    total = add(total, scale(*l_sc, static_cast<T>(alpha)));
  }
  if (l_cc) {
    b.l_cc = *l_cc;
    total = add(total, scale(*l_cc, static_cast<T>(beta)));
  }
  if (l_pc) {
    b.l_pc = *l_pc;
    total = add(total, scale(*l_pc, static_cast<T>(gamma)));
  }
  b.l_total = total;
  return b;
}

}  // namespace mlcn
