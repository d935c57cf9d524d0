#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "mlcn/backbone.hpp"
#include "mlcn/contrastive.hpp"
#include "mlcn/random.hpp"

namespace mlcn {

/// Flattened spatial feature vectors of every map in an episode, image-major:
/// rows [i*HW, (i+1)*HW) belong to map i.
template <std::floating_point T>
struct SampleSet {
  Tensor<T> samples;  // [N_samples, C]
  std::vector<std::size_t> owner;
  std::vector<std::size_t> labels;
  std::size_t positions_per_map = 0;
};

template <std::floating_point T>
SampleSet<T> make_sample_set(const std::vector<FeatureMap<T>>& maps) {
  if (maps.empty()) throw PreconditionError("sample set needs at least one map");
  SampleSet<T> s;
  const std::size_t hw = maps[0].height() * maps[0].width(), c = maps[0].channels();
  std::vector<Tensor<T>> rows;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].values.shape() != maps[0].values.shape()) throw ShapeError("sample set maps differ in shape");
    rows.push_back(reshape(maps[i].values, {hw, c}));
    for (std::size_t p = 0; p < hw; ++p) {
      s.owner.push_back(i);
      s.labels.push_back(maps[i].label);
    }
  }
  s.samples = concat(rows);
  s.positions_per_map = hw;
  return s;
}

template <std::floating_point T>
struct MixtureState {
  Tensor<T> means;             // [K_c, C]
  Tensor<T> weights;           // [K_c]
  Tensor<T> responsibilities;  // [N_samples, K_c]
  double kappa = 1.0;
  std::size_t components = 0;
  /// Dead components reseeded during the fit.
  std::size_t reseeds = 0;
};

/// beta * exp(-kappa * ||s - mu||^2).
template <std::floating_point T>
double component_likelihood(std::span<const T> sample, std::span<const T> mean, double kappa, double beta = 1.0) {
  if (!(kappa > 0)) throw ConfigError("mixture concentration must be positive");
  if (sample.size() != mean.size()) throw ShapeError("component_likelihood length mismatch");
  double d2 = 0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double d = static_cast<double>(sample[i]) - static_cast<double>(mean[i]);
    d2 += d * d;
  }
  return beta * std::exp(-kappa * d2);
}

/// P_ik = w_k p_k(s_i) / sum_k' w_k' p_k'(s_i) from a likelihood matrix.
/// Rows that underflow to zero fall back to the uniform distribution.
template <std::floating_point T>
Tensor<T> responsibilities(const Tensor<T>& likelihoods, const Tensor<T>& weights, bool weighted = true,
                           std::size_t* fallback_rows = nullptr) {
  if (likelihoods.rank() != 2 || weights.size() != likelihoods.dim(1)) {
    throw ShapeError("responsibilities: likelihoods " + shape_str(likelihoods.shape()) + " vs weights " +
                     shape_str(weights.shape()));
  }
  const std::size_t n = likelihoods.dim(0), k = likelihoods.dim(1);
  const Tensor<T> scored = weighted ? mul(likelihoods, reshape(weights, {k})) : likelihoods;
  const Tensor<T> totals = sum(scored, 1, true);
  std::vector<T> patch(n, T(0));
  std::vector<T> fill(n * k, T(0));
  std::size_t fallbacks = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (totals[i] > T(0)) continue;
    ++fallbacks;
    patch[i] = T(1);
    for (std::size_t j = 0; j < k; ++j) fill[i * k + j] = T(1) / static_cast<T>(k);
  }
  if (fallback_rows) *fallback_rows = fallbacks;
  if (fallbacks == 0) return div(scored, totals);
  // Underflowed rows: divide by 1 and add the uniform row.
  const Tensor<T> safe = add(totals, Tensor<T>({n, 1}, patch));
  return add(div(scored, safe), Tensor<T>({n, k}, fill));
}

/// Log-domain responsibilities, softmax_k(log w_k - kappa * ||s_i - mu_k||^2).
/// Equal to `responsibilities` on exp(-kappa d^2) but immune to underflow.
template <std::floating_point T>
Tensor<T> responsibilities_from_distances(const Tensor<T>& sq_dist, const Tensor<T>& weights, double kappa,
                                          bool weighted = true) {
  const std::size_t k = sq_dist.dim(1);
  Tensor<T> logits = scale(sq_dist, static_cast<T>(-kappa));
  if (weighted) {
    std::vector<T> lw(k);
    for (std::size_t j = 0; j < k; ++j) {
      lw[j] = weights[j] > T(0) ? std::log(weights[j]) : static_cast<T>(-1e30);
    }
    // Weights enter as constants: the first-order contract treats them as
    // outputs of the previous round.
    logits = add(logits, Tensor<T>({k}, std::move(lw)));
  }
  return softmax(logits, 1);
}

/// mu_k = sum_i P_ik s_i / sum_i P_ik. Components with total responsibility
/// below `dead_threshold` are reseeded to the worst-reconstructed sample.
template <std::floating_point T>
Tensor<T> update_means(const Tensor<T>& resp, const Tensor<T>& samples, std::size_t* reseeds = nullptr,
                       double dead_threshold = 1e-12) {
  if (resp.rank() != 2 || samples.rank() != 2 || resp.dim(0) != samples.dim(0)) {
    throw ShapeError("update_means: responsibilities " + shape_str(resp.shape()) + " vs samples " +
                     shape_str(samples.shape()));
  }
  const std::size_t n = samples.dim(0), k = resp.dim(1), c = samples.dim(1);
  const Tensor<T> num = matmul(transpose(resp), samples);
  const Tensor<T> den = sum(resp, 0);
  std::vector<bool> dead(k, false);
  std::size_t dead_count = 0;
  for (std::size_t j = 0; j < k; ++j) {
    if (static_cast<double>(den[j]) < dead_threshold) {
      dead[j] = true;
      ++dead_count;
    }
  }
  if (reseeds) *reseeds = dead_count;
  if (dead_count == 0) return div(num, reshape(den, {k, 1}));

  std::vector<T> patch(k, T(0)), keep(k * c, T(1)), seed_rows(k * c, T(0));
  for (std::size_t j = 0; j < k; ++j)
    if (dead[j]) patch[j] = T(1);
  const Tensor<T> live = div(num, reshape(add(den, Tensor<T>({k}, patch)), {k, 1}));

  // Reconstruction of each sample from the live components only.
  auto P = resp.values();
  auto S = samples.values();
  auto M = live.values();
  std::vector<double> err(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < c; ++d) {
      double r = 0;
      for (std::size_t j = 0; j < k; ++j)
        if (!dead[j]) r += static_cast<double>(P[i * k + j]) * static_cast<double>(M[j * c + d]);
      const double e = static_cast<double>(S[i * c + d]) - r;
      err[i] += e * e;
    }
  }
  std::vector<bool> taken(n, false);
  for (std::size_t j = 0; j < k; ++j) {
    if (!dead[j]) continue;
    std::size_t worst = 0;
    double best = -1;
    for (std::size_t i = 0; i < n; ++i)
      if (!taken[i] && err[i] > best) {
        best = err[i];
        worst = i;
      }
    taken[worst] = true;
    for (std::size_t d = 0; d < c; ++d) {
      keep[j * c + d] = T(0);
      seed_rows[j * c + d] = S[worst * c + d];
    }
  }
  return add(mul(live, Tensor<T>({k, c}, keep)), Tensor<T>({k, c}, seed_rows));
}

/// Distance-weighted seeding: the first mean is a uniform sample, each next
/// one is drawn with probability proportional to its squared distance from
/// the nearest chosen mean.
template <std::floating_point T>
Tensor<T> seed_means(const Tensor<T>& samples, std::size_t components, Rng& rng) {
  const std::size_t n = samples.dim(0), c = samples.dim(1);
  if (n < components) throw ConfigError("mixture needs at least as many samples as components");
  auto S = samples.values();
  std::vector<T> means;
  means.reserve(components * c);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::size_t pick = rng.below(n);
  for (std::size_t j = 0; j < components; ++j) {
    means.insert(means.end(), S.begin() + static_cast<std::ptrdiff_t>(pick * c),
                 S.begin() + static_cast<std::ptrdiff_t>((pick + 1) * c));
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double d2 = 0;
      for (std::size_t d = 0; d < c; ++d) {
        const double diff = static_cast<double>(S[i * c + d]) - static_cast<double>(S[pick * c + d]);
        d2 += diff * diff;
      }
      nearest[i] = std::min(nearest[i], d2);
      total += nearest[i];
    }
    if (j + 1 == components) break;
    if (total <= 0) {
      pick = rng.below(n);
      continue;
    }
    double u = rng.uniform() * total;
    pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      u -= nearest[i];
      if (u < 0) {
        pick = i;
        break;
      }
    }
  }
  return Tensor<T>({components, c}, std::move(means));
}

/// sum_i log sum_k w_k exp(-kappa ||s_i - mu_k||^2), the surrogate objective
/// that each detached round cannot decrease.
template <std::floating_point T>
double mixture_log_likelihood(const Tensor<T>& samples, const Tensor<T>& means, const Tensor<T>& weights,
                              double kappa) {
  NoGradGuard guard;
  const Tensor<T> d2 = pairwise_sq_dist(samples.detach(), means.detach());
  const std::size_t n = d2.dim(0), k = d2.dim(1);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> terms(k);
    for (std::size_t j = 0; j < k; ++j) {
      const double w = static_cast<double>(weights[j]);
      terms[j] = w > 0 ? std::log(w) - kappa * static_cast<double>(d2[i * k + j]) : -std::numeric_limits<double>::infinity();
      mx = std::max(mx, terms[j]);
    }
    double z = 0;
    for (double t : terms) z += std::exp(t - mx);
    total += mx + std::log(z);
  }
  return total;
}

struct MixtureFitOptions {
  std::size_t components = 25;
  double kappa = 1.0;
  std::size_t iters = 3;
  bool weighted = true;
};

/// Alternates responsibilities (inner step) and mean/weight updates (outer
/// step) for `iters` rounds from the given initial means. Only the final
/// round is recorded for differentiation; earlier rounds run on detached
/// samples and enter the final round as constants.
template <std::floating_point T>
MixtureState<T> fit_mixture(const Tensor<T>& samples, const Tensor<T>& initial_means, const MixtureFitOptions& opt,
                            std::vector<double>* log_likelihood_trace = nullptr) {
  if (opt.iters < 1) throw ConfigError("mixture iters must be at least 1");
  if (!(opt.kappa > 0)) throw ConfigError("mixture concentration must be positive");
  if (samples.rank() != 2 || initial_means.rank() != 2 || samples.dim(1) != initial_means.dim(1)) {
    throw ShapeError("fit_mixture: samples " + shape_str(samples.shape()) + " vs means " +
                     shape_str(initial_means.shape()));
  }
  const std::size_t k = initial_means.dim(0);
  if (samples.dim(0) < k) throw ConfigError("mixture needs at least as many samples as components");

  MixtureState<T> st;
  st.kappa = opt.kappa;
  st.components = k;
  Tensor<T> means = initial_means.detach();
  Tensor<T> weights = Tensor<T>::full({k}, T(1) / static_cast<T>(k));
  if (log_likelihood_trace) log_likelihood_trace->push_back(mixture_log_likelihood(samples, means, weights, opt.kappa));

  auto round = [&](const Tensor<T>& s) {
    const Tensor<T> resp = responsibilities_from_distances(pairwise_sq_dist(s, means), weights, opt.kappa, opt.weighted);
    std::size_t reseeds = 0;
    const Tensor<T> new_means = update_means(resp, s, &reseeds);
    st.reseeds += reseeds;
    return std::pair{resp, new_means};
  };

  {
    NoGradGuard guard;
    const Tensor<T> frozen = samples.detach();
    for (std::size_t r = 0; r + 1 < opt.iters; ++r) {
      auto [resp, new_means] = round(frozen);
      means = new_means;
      weights = mean(resp, 0);
      if (log_likelihood_trace)
        log_likelihood_trace->push_back(mixture_log_likelihood(samples, means, weights, opt.kappa));
    }
  }
  auto [resp, new_means] = round(samples);
  st.responsibilities = resp;
  st.means = new_means;
  st.weights = mean(resp, 0);
  if (log_likelihood_trace)
    log_likelihood_trace->push_back(mixture_log_likelihood(samples, st.means, st.weights, opt.kappa));
  return st;
}

template <std::floating_point T>
MixtureState<T> fit_mixture(const Tensor<T>& samples, const MixtureFitOptions& opt, Rng& rng,
                            std::vector<double>* log_likelihood_trace = nullptr) {
  if (samples.rank() != 2) throw ShapeError("fit_mixture expects [N, C] samples");
  if (opt.components < 1) throw ConfigError("mixture needs at least one component");
  if (samples.dim(0) < opt.components) throw ConfigError("mixture needs at least as many samples as components");
  Tensor<T> init;
  {
    NoGradGuard guard;
    init = seed_means(samples.detach(), opt.components, rng);
  }
  return fit_mixture(samples, init, opt, log_likelihood_trace);
}

/// p = (1/HW) sum_x sum_k P[x, k] mu_k over the positions of map `map_index`:
/// the spatial mean of each position's soft reconstruction.
template <std::floating_point T>
Tensor<T> pattern_embedding(const MixtureState<T>& state, std::size_t map_index, std::size_t positions_per_map) {
  const std::size_t begin = map_index * positions_per_map;
  const Tensor<T> rows = slice(state.responsibilities, begin, begin + positions_per_map);
  const Tensor<T> recon = matmul(rows, state.means);
  return mean(recon, 0);
}

template <std::floating_point T>
Tensor<T> loss_pc(const std::vector<Tensor<T>>& support_prototypes, const std::vector<Tensor<T>>& query_views,
                  std::size_t target, double tau3,
                  ContrastiveDenominator denominator = ContrastiveDenominator::kPaired) {
  return contrastive_loss(support_prototypes, query_views, target, tau3, denominator);
}

}  // namespace mlcn
