#pragma once

#include <atomic>
#include <optional>
#include <span>
#include <vector>

#include "mlcn/backbone.hpp"
#include "mlcn/config.hpp"
#include "mlcn/cross_corr.hpp"
#include "mlcn/objective.hpp"
#include "mlcn/pattern_corr.hpp"
#include "mlcn/self_corr.hpp"

namespace mlcn {

/// Backbone plus the base-class head. `base_classes[r]` is the global class id
/// predicted by head row r.
template <std::floating_point T>
struct Model {
  BackboneParams<T> backbone;
  ClassifierHead<T> head;
  std::vector<std::size_t> base_classes;

  std::vector<std::pair<std::string, Tensor<T>*>> trainable() {
    auto out = backbone.trainable();
    for (auto& p : head.trainable()) out.push_back(p);
    return out;
  }

  std::size_t head_row(std::size_t global_class) const {
    for (std::size_t r = 0; r < base_classes.size(); ++r)
      if (base_classes[r] == global_class) return r;
    throw DataError("class " + std::to_string(global_class) + " is not a base class of this model");
  }
};

template <std::floating_point T>
Model<T> init_model(const Config& cfg, std::vector<std::size_t> base_classes, Rng& rng) {
  Model<T> m;
  m.backbone = init_backbone<T>(cfg.backbone, rng);
  m.head = init_head<T>(std::max<std::size_t>(1, base_classes.size()), cfg.backbone.channels(), rng);
  m.base_classes = std::move(base_classes);
  return m;
}

struct Branches {
  bool sc = false;
  bool cc = false;
  bool pc = false;
  bool any() const { return sc || cc || pc; }
};

/// Number of times each branch has been computed by forward_episode.
struct BranchCounters {
  std::atomic<std::size_t> sc{0}, cc{0}, pc{0};
  void reset() { sc = cc = pc = 0; }
};

inline BranchCounters& branch_counters() {
  static BranchCounters c;
  return c;
}

/// Per-query, per-class inputs of one branch: `prototypes[j][n]` is the
/// class-n support prototype and `views[j][n]` the query-j embedding attended
/// in class-n context (both averaged over the K shots).
template <std::floating_point T>
struct BranchEmbeddings {
  std::vector<std::vector<Tensor<T>>> prototypes;
  std::vector<std::vector<Tensor<T>>> views;
};

/// Layout of an episode batch: N*K support images class-major (class n,
/// shot k at index n*K + k) followed by the query images.
struct EpisodeLayout {
  std::size_t way = 0;
  std::size_t shot = 0;
  std::vector<std::size_t> query_labels;  // local labels 0..N-1
  std::size_t supports() const { return way * shot; }
  std::size_t queries() const { return query_labels.size(); }
};

template <std::floating_point T>
struct EpisodeForward {
  Tensor<T> features;  // channel-shifted [B, H, W, C]
  BatchStats<T> stats;
  std::optional<BranchEmbeddings<T>> sc, cc, pc;
  std::optional<MixtureState<T>> mixture;
};

struct BranchOptions {
  SelfSoftmaxAxis self_axis = SelfSoftmaxAxis::kSpatial;
  double cross_temperature = 0.2;
  MixtureFitOptions mixture{};
};

inline BranchOptions branch_options(const Config& cfg) {
  return {cfg.loss.self_axis, cfg.loss.cross_temperature,
          {cfg.mixture.components, cfg.mixture.kappa, cfg.mixture.iters, cfg.mixture.weighted}};
}

/// Backbone, episode channel shift, and the requested correlation branches.
template <std::floating_point T>
EpisodeForward<T> forward_episode(const Model<T>& model, const Tensor<T>& images, const EpisodeLayout& layout,
                                  const Branches& branches, const BranchOptions& opt, NormMode mode, Rng& rng) {
  const std::size_t ns = layout.supports(), nq = layout.queries();
  if (images.dim(0) != ns + nq) throw ShapeError("episode batch does not match its layout");
  EpisodeForward<T> out;
  auto bb = backbone_forward(images, model.backbone, mode);
  out.stats = std::move(bb.stats);
  out.features = episode_channel_shift(bb.features);
  const Tensor<T>& F = out.features;

  std::vector<Tensor<T>> maps;
  maps.reserve(ns + nq);
  for (std::size_t i = 0; i < ns + nq; ++i) maps.push_back(select(F, i));

  // Shared layout for branches whose query view ignores the support context.
  auto per_image_branch = [&](const std::vector<Tensor<T>>& emb) {
    BranchEmbeddings<T> b;
    std::vector<Tensor<T>> protos;
    for (std::size_t n = 0; n < layout.way; ++n) {
      std::vector<Tensor<T>> shots(emb.begin() + static_cast<std::ptrdiff_t>(n * layout.shot),
                                   emb.begin() + static_cast<std::ptrdiff_t>((n + 1) * layout.shot));
      protos.push_back(prototype_average(shots));
    }
    for (std::size_t j = 0; j < nq; ++j) {
      b.prototypes.push_back(protos);
      b.views.emplace_back(layout.way, emb[ns + j]);
    }
    return b;
  };

  if (branches.sc) {
    ++branch_counters().sc;
    std::vector<Tensor<T>> z;
    z.reserve(maps.size());
    for (const auto& m : maps) z.push_back(self_embedding(m, opt.self_axis));
    out.sc = per_image_branch(z);
  }

  if (branches.cc) {
    ++branch_counters().cc;
    std::vector<Tensor<T>> unit;
    unit.reserve(maps.size());
    for (const auto& m : maps) unit.push_back(normalized_positions(m));
    BranchEmbeddings<T> b;
    for (std::size_t j = 0; j < nq; ++j) {
      const std::size_t qi = ns + j;
      std::vector<Tensor<T>> protos, views;
      for (std::size_t n = 0; n < layout.way; ++n) {
        std::vector<Tensor<T>> cs, cq;
        for (std::size_t k = 0; k < layout.shot; ++k) {
          const std::size_t si = n * layout.shot + k;
          auto pair = cross_pair(maps[qi], unit[qi], maps[si], unit[si], opt.cross_temperature);
          cq.push_back(pair.query_embedding);
          cs.push_back(pair.support_embedding);
        }
        protos.push_back(prototype_average(cs));
        views.push_back(prototype_average(cq));
      }
      b.prototypes.push_back(std::move(protos));
      b.views.push_back(std::move(views));
    }
    out.cc = std::move(b);
  }

  if (branches.pc) {
    ++branch_counters().pc;
    const std::size_t hw = F.dim(1) * F.dim(2), c = F.dim(3);
    const Tensor<T> samples = reshape(F, {F.dim(0) * hw, c});
    auto state = fit_mixture(samples, opt.mixture, rng);
    std::vector<Tensor<T>> p;
    p.reserve(maps.size());
    for (std::size_t i = 0; i < maps.size(); ++i) p.push_back(pattern_embedding(state, i, hw));
    out.pc = per_image_branch(p);
    out.mixture = std::move(state);
  }
  return out;
}

/// Mean over queries of the contrastive loss of one branch.
template <std::floating_point T>
Tensor<T> branch_loss(const BranchEmbeddings<T>& b, std::span<const std::size_t> query_labels, double tau,
                      ContrastiveDenominator denominator) {
  std::vector<Tensor<T>> per_query;
  per_query.reserve(query_labels.size());
  for (std::size_t j = 0; j < query_labels.size(); ++j) {
    per_query.push_back(contrastive_loss(b.prototypes[j], b.views[j], query_labels[j], tau, denominator));
  }
  return mean(concat(per_query));
}

/// One branch's evidence for a query: class prototypes, context-attended
/// query views, and the branch weight in the decision.
template <std::floating_point T>
struct BranchVote {
  std::span<const Tensor<T>> prototypes;
  std::span<const Tensor<T>> views;
  double weight = 0;
};

/// argmax_n sum_b weight_b * cos(prototype_b[n], view_b[n]); branches with
/// non-positive weight are disabled. Zero-norm embeddings score 0.
template <std::floating_point T>
std::size_t classify_query(std::span<const BranchVote<T>> votes) {
  std::size_t way = 0;
  bool enabled = false;
  for (const auto& v : votes) {
    if (v.weight <= 0) continue;
    if (enabled && v.prototypes.size() != way) throw ShapeError("branches disagree on the number of classes");
    way = v.prototypes.size();
    if (v.views.size() != way) throw ShapeError("branch has mismatched prototypes and views");
    enabled = true;
  }
  if (!enabled) throw ConfigError("classify_query: all branches are disabled");
  std::vector<double> score(way, 0.0);
  NoGradGuard guard;
  for (const auto& v : votes) {
    if (v.weight <= 0) continue;
    for (std::size_t n = 0; n < way; ++n) {
      score[n] += v.weight * static_cast<double>(cosine_or_zero(v.prototypes[n], v.views[n]).item());
    }
  }
  return static_cast<std::size_t>(std::max_element(score.begin(), score.end()) - score.begin());
}

struct InferenceWeights {
  double sc = 0, cc = 0, pc = 0;
  Branches branches() const { return {sc > 0, cc > 0, pc > 0}; }
};

inline InferenceWeights inference_weights(const Config& cfg) {
  return {cfg.eval.w_sc < 0 ? cfg.loss.alpha : cfg.eval.w_sc, cfg.eval.w_cc < 0 ? cfg.loss.beta : cfg.eval.w_cc,
          cfg.eval.w_pc < 0 ? cfg.loss.gamma : cfg.eval.w_pc};
}

/// Predicted local label for every query of a forward pass.
template <std::floating_point T>
std::vector<std::size_t> predict_queries(const EpisodeForward<T>& fw, std::size_t queries, const InferenceWeights& w) {
  std::vector<std::size_t> out;
  out.reserve(queries);
  for (std::size_t j = 0; j < queries; ++j) {
    std::vector<BranchVote<T>> votes;
    if (fw.sc && w.sc > 0) votes.push_back({fw.sc->prototypes[j], fw.sc->views[j], w.sc});
    if (fw.cc && w.cc > 0) votes.push_back({fw.cc->prototypes[j], fw.cc->views[j], w.cc});
    if (fw.pc && w.pc > 0) votes.push_back({fw.pc->prototypes[j], fw.pc->views[j], w.pc});
    out.push_back(classify_query<T>(votes));
  }
  return out;
}

}  // namespace mlcn
