#pragma once

#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "mlcn/data_io.hpp"
#include "mlcn/model.hpp"

namespace mlcn {

/// One N-way K-shot task. Supports are class-major (`support[n*K + k]`),
/// queries likewise (`query[n*Q + q]`). `classes[n]` is the global id of
/// local label n.
struct Episode {
  std::size_t way = 0, shot = 0, query_per_class = 0;
  std::vector<std::size_t> classes;
  std::vector<std::size_t> support;
  std::vector<std::size_t> query;

  std::vector<std::size_t> query_labels() const {
    std::vector<std::size_t> out(query.size());
    for (std::size_t j = 0; j < query.size(); ++j) out[j] = j / query_per_class;
    return out;
  }
  std::vector<std::size_t> query_global_labels() const {
    std::vector<std::size_t> out(query.size());
    for (std::size_t j = 0; j < query.size(); ++j) out[j] = classes[j / query_per_class];
    return out;
  }
  EpisodeLayout layout() const { return {way, shot, query_labels()}; }
  /// Support indices followed by query indices.
  std::vector<std::size_t> batch_indices() const {
    std::vector<std::size_t> out(support);
    out.insert(out.end(), query.begin(), query.end());
    return out;
  }
};

/// Index lists per class of a split, checked against the sampler's needs.
class EpisodeSampler {
 public:
  EpisodeSampler(const Dataset& ds, Split split, EpisodeShape shape) : shape_(shape) {
    if (shape.way == 0 || shape.shot == 0 || shape.query == 0) throw ConfigError("episode way, shot and query must be >= 1");
    for (auto& [label, idx] : ds.by_class(split)) {
      classes_.push_back(label);
      pools_.push_back(idx);
    }
    if (classes_.size() < shape.way) {
      throw DataError(std::string(split_name(split)) + " split has " + std::to_string(classes_.size()) +
                      " classes, episode needs " + std::to_string(shape.way));
    }
    for (std::size_t c = 0; c < classes_.size(); ++c) {
      if (pools_[c].size() < shape.shot + shape.query) {
        throw DataError("class " + std::to_string(classes_[c]) + " has " + std::to_string(pools_[c].size()) +
                        " images, episode needs " + std::to_string(shape.shot + shape.query));
      }
    }
  }

  Episode sample(Rng& rng) const {
    Episode ep;
    ep.way = shape_.way;
    ep.shot = shape_.shot;
    ep.query_per_class = shape_.query;
    const auto picked = rng.sample_without_replacement(classes_.size(), shape_.way);
    std::vector<std::vector<std::size_t>> chosen;
    for (auto c : picked) {
      ep.classes.push_back(classes_[c]);
      const auto& pool = pools_[c];
      auto take = rng.sample_without_replacement(pool.size(), shape_.shot + shape_.query);
      for (auto& t : take) t = pool[t];
      chosen.push_back(std::move(take));
    }
    for (const auto& ch : chosen) ep.support.insert(ep.support.end(), ch.begin(), ch.begin() + static_cast<std::ptrdiff_t>(shape_.shot));
    for (const auto& ch : chosen) ep.query.insert(ep.query.end(), ch.begin() + static_cast<std::ptrdiff_t>(shape_.shot), ch.end());
    return ep;
  }

  const std::vector<std::size_t>& classes() const { return classes_; }

 private:
  EpisodeShape shape_;
  std::vector<std::size_t> classes_;
  std::vector<std::vector<std::size_t>> pools_;
};

inline Episode sample_episode(const Dataset& ds, Split split, std::size_t way, std::size_t shot, std::size_t query,
                              Rng& rng) {
  return EpisodeSampler(ds, split, {way, shot, query}).sample(rng);
}

/// Stacks dataset images into a [B, H, W, C] batch.
template <std::floating_point T>
Tensor<T> gather_images(const Dataset& ds, std::span<const std::size_t> indices) {
  const std::size_t per = ds.height * ds.width * ds.channels;
  std::vector<T> v;
  v.reserve(indices.size() * per);
  for (auto i : indices) {
    const auto& px = ds.images.at(i).pixels;
    for (float f : px) v.push_back(static_cast<T>(f));
  }
  return Tensor<T>({indices.size(), ds.height, ds.width, ds.channels}, std::move(v));
}

/// Mean accuracy and 95% half-width in percent over per-episode accuracies.
struct EvalSummary {
  double mean = 0;
  double ci95 = 0;
  std::size_t episodes = 0;
  std::vector<double> accuracies;  // fractions in [0, 1], by episode index
};

/// half-width = 1.96 * s / sqrt(n), s the sample standard deviation.
inline EvalSummary summarize(std::vector<double> accuracies) {
  if (accuracies.empty()) throw PreconditionError("summarize needs at least one episode");
  EvalSummary s;
  s.episodes = accuracies.size();
  const double n = static_cast<double>(accuracies.size());
  double sum = 0;
  for (double a : accuracies) sum += a;
  const double m = sum / n;
  double ss = 0;
  for (double a : accuracies) ss += (a - m) * (a - m);
  const double sd = accuracies.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
  s.mean = 100.0 * m;
  s.ci95 = 100.0 * 1.96 * sd / std::sqrt(n);
  s.accuracies = std::move(accuracies);
  return s;
}

/// Seed of episode `index` in a run seeded with `seed`.
inline std::uint64_t episode_seed(std::uint64_t seed, std::uint64_t index) {
  return Rng::splitmix(Rng::splitmix(seed) + index);
}

/// Predicted local labels for the queries of an episode.
using Predictor = std::function<std::vector<std::size_t>(const Episode&, Rng&)>;

/// Runs `episodes` independent episodes on up to `threads` workers. Each
/// episode draws from its own generator, so results do not depend on the
/// thread count.
inline EvalSummary evaluate_with(const Dataset& ds, Split split, EpisodeShape shape, std::size_t episodes,
                                 std::uint64_t seed, const Predictor& predict, std::size_t threads = 1) {
  if (episodes == 0) throw PreconditionError("evaluate needs at least one episode");
  const EpisodeSampler sampler(ds, split, shape);
  std::vector<double> acc(episodes, 0.0);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t e = next.fetch_add(1);
      if (e >= episodes) return;
      try {
        Rng rng(episode_seed(seed, e));
        const Episode ep = sampler.sample(rng);
        const auto pred = predict(ep, rng);
        const auto truth = ep.query_labels();
        std::size_t correct = 0;
        for (std::size_t j = 0; j < truth.size(); ++j) correct += pred.at(j) == truth[j] ? 1 : 0;
        acc[e] = static_cast<double>(correct) / static_cast<double>(truth.size());
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = episodes;
        return;
      }
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, episodes));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  return summarize(std::move(acc));
}

/// Model predictor: frozen running statistics, no gradient recording.
template <std::floating_point T>
Predictor model_predictor(const Model<T>& model, const Dataset& ds, const BranchOptions& opt,
                          const InferenceWeights& weights) {
  return [&model, &ds, opt, weights](const Episode& ep, Rng& rng) {
    NoGradGuard guard;
    const auto idx = ep.batch_indices();
    const Tensor<T> images = gather_images<T>(ds, idx);
    const auto layout = ep.layout();
    const auto fw = forward_episode(model, images, layout, weights.branches(), opt, NormMode::kRunning, rng);
    return predict_queries(fw, layout.queries(), weights);
  };
}

template <std::floating_point T>
EvalSummary evaluate(const Model<T>& model, const Dataset& ds, Split split, const Config& cfg, std::size_t episodes,
                     EpisodeShape shape, std::uint64_t seed) {
  const auto weights = inference_weights(cfg);
  if (!weights.branches().any()) throw ConfigError("inference needs at least one branch with positive weight");
  return evaluate_with(ds, split, shape, episodes, seed, model_predictor(model, ds, branch_options(cfg), weights),
                       cfg.eval.threads);
}

}  // namespace mlcn
