#pragma once

#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "mlcn/episodic.hpp"

namespace mlcn {

/// Momentum buffers, one per trainable tensor in `trainable()` order.
template <std::floating_point T>
struct SgdState {
  std::vector<std::vector<T>> velocity;
};

/// v <- momentum v + g + weight_decay p;  p <- p - lr v.
template <std::floating_point T>
void sgd_step(const std::vector<std::pair<std::string, Tensor<T>*>>& params, const Gradients<T>& grads,
              SgdState<T>& state, double lr, double momentum, double weight_decay) {
  if (state.velocity.empty()) {
    for (const auto& [name, p] : params) state.velocity.emplace_back(p->size(), T(0));
  }
  if (state.velocity.size() != params.size()) throw ShapeError("optimizer state does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i].second;
    auto& v = state.velocity[i];
    if (v.size() != p.size()) throw ShapeError("velocity of " + params[i].first + " has the wrong size");
    const std::vector<T> g = grads.of(p);
    std::vector<T> next(p.values().begin(), p.values().end());
    for (std::size_t k = 0; k < next.size(); ++k) {
      v[k] = static_cast<T>(momentum) * v[k] + g[k] + static_cast<T>(weight_decay) * next[k];
      next[k] -= static_cast<T>(lr) * v[k];
    }
    p = Tensor<T>(p.shape(), std::move(next), true);
  }
}

struct LossRow {
  std::size_t step = 0;
  double l_ce = 0, l_sc = 0, l_cc = 0, l_pc = 0, l_total = 0;
};

inline constexpr const char* kLossCsvHeader = "step,l_ce,l_sc,l_cc,l_pc,l_total";

inline std::string format_loss_row(const LossRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g", r.step, r.l_ce, r.l_sc, r.l_cc, r.l_pc,
                r.l_total);
  return buf;
}

template <std::floating_point T>
struct TrainResult {
  Model<T> model;
  std::vector<LossRow> log;
};

/// Loss terms enabled for training.
inline Branches training_branches(const LossConfig& l) { return {l.use_sc, l.use_cc, l.use_pc}; }

template <std::floating_point T>
struct EpisodeLoss {
  LossBundle<T> bundle;
  EpisodeForward<T> forward;
};

/// Forward pass and LossBundle of one training episode.
template <std::floating_point T>
EpisodeLoss<T> episode_loss(const Model<T>& model, const Dataset& ds, const Episode& ep, const Config& cfg, Rng& rng) {
  const auto idx = ep.batch_indices();
  const Tensor<T> images = gather_images<T>(ds, idx);
  const auto layout = ep.layout();
  auto fw = forward_episode(model, images, layout, training_branches(cfg.loss), branch_options(cfg), NormMode::kBatch,
                            rng);
  std::vector<std::size_t> rows;
  for (auto g : ep.query_global_labels()) rows.push_back(model.head_row(g));
  const std::size_t ns = layout.supports();
  const Tensor<T> queries = slice(fw.features, ns, ns + layout.queries());
  const Tensor<T> l_ce = loss_ce(queries, rows, model.head);
  const auto labels = layout.query_labels;
  std::optional<Tensor<T>> l_sc, l_cc, l_pc;
  if (fw.sc) l_sc = branch_loss(*fw.sc, labels, cfg.loss.tau1, cfg.loss.denominator);
  if (fw.cc) l_cc = branch_loss(*fw.cc, labels, cfg.loss.tau2, cfg.loss.denominator);
  if (fw.pc) l_pc = branch_loss(*fw.pc, labels, cfg.loss.tau3, cfg.loss.denominator);
  auto bundle = total_loss(l_ce, l_sc, l_cc, l_pc, cfg.loss.alpha, cfg.loss.beta, cfg.loss.gamma);
  return {std::move(bundle), std::move(fw)};
}

/// Seed salt separating training episodes from evaluation episodes.
inline constexpr std::uint64_t kTrainSalt = 0x747261696eULL;

/// Episodic SGD over the base split. `on_step` sees every logged row.
template <std::floating_point T>
TrainResult<T> train(const Config& cfg, const Dataset& ds, const std::function<void(const LossRow&)>& on_step = {}) {
  if (cfg.optim.lr < 0) throw ConfigError("optim.lr must be non-negative");
  if (cfg.optim.momentum < 0 || cfg.optim.momentum >= 1) throw ConfigError("optim.momentum must lie in [0, 1)");
  if (cfg.optim.weight_decay < 0) throw ConfigError("optim.weight_decay must be non-negative");
  if (ds.height != cfg.backbone.image_size || ds.width != cfg.backbone.image_size ||
      ds.channels != cfg.backbone.in_channels) {
    throw DataError("dataset images are " + std::to_string(ds.height) + "x" + std::to_string(ds.width) + "x" +
                    std::to_string(ds.channels) + ", config expects " + std::to_string(cfg.backbone.image_size) + "x" +
                    std::to_string(cfg.backbone.image_size) + "x" + std::to_string(cfg.backbone.in_channels));
  }
  const EpisodeSampler sampler(ds, Split::kBase, cfg.train_shape);
  Rng init_rng(Rng::splitmix(cfg.seed));
  TrainResult<T> out{init_model<T>(cfg, sampler.classes(), init_rng), {}};
  SgdState<T> state;
  const std::size_t steps = cfg.optim.epochs * cfg.optim.episodes_per_epoch;
  for (std::size_t s = 0; s < steps; ++s) {
    const std::uint64_t seed = episode_seed(cfg.seed ^ kTrainSalt, s);
    Rng rng(seed);
    const Episode ep = sampler.sample(rng);
    LossRow row;
    row.step = s;
    try {
      auto el = episode_loss(out.model, ds, ep, cfg, rng);
      const auto& b = el.bundle;
      row.l_ce = b.l_ce.item();
      row.l_sc = b.l_sc.item();
      row.l_cc = b.l_cc.item();
      row.l_pc = b.l_pc.item();
      row.l_total = b.l_total.item();
      if (!std::isfinite(row.l_total)) throw NumericError("loss is not finite");
      const auto grads = backward(b.l_total);
      sgd_step(out.model.trainable(), grads, state, cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay);
      update_running_stats(out.model.backbone, el.forward.stats);
    } catch (const NumericError& e) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%llu", static_cast<unsigned long long>(seed));
      throw NumericError("training step " + std::to_string(s) + " (episode seed " + buf + "): " + e.what());
    }
    out.log.push_back(row);
    if (on_step) on_step(row);
  }
  return out;
}

inline void write_loss_csv(std::ostream& os, const std::vector<LossRow>& log) {
  os << kLossCsvHeader << "\n";
  for (const auto& r : log) os << format_loss_row(r) << "\n";
}

}  // namespace mlcn
