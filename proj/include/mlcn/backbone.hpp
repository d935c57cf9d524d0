#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mlcn/config.hpp"
#include "mlcn/ops.hpp"
#include "mlcn/random.hpp"

namespace mlcn {

/// Base representation of one image: an [H, W, C] map.
template <std::floating_point T>
struct FeatureMap {
  Tensor<T> values;
  std::size_t image_id = 0;
  std::size_t label = 0;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
  std::size_t channels() const { return values.dim(2); }
};

/// conv -> batch norm -> ReLU -> optional 2x2 max pool.
template <std::floating_point T>
struct ConvBlock {
  Tensor<T> kernel;  // [k, k, C_in, C_out]
  Tensor<T> bias;    // [C_out]
  Tensor<T> gamma;   // [C_out]
  Tensor<T> beta;    // [C_out]
  std::vector<T> running_mean;
  std::vector<T> running_var;
  bool downsample = false;
};

template <std::floating_point T>
struct BackboneParams {
  BackboneConfig config;
  std::vector<ConvBlock<T>> blocks;

  /// Every tensor updated by the optimizer, with its checkpoint name.
  std::vector<std::pair<std::string, Tensor<T>*>> trainable() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      out.emplace_back(p + "kernel", &blocks[b].kernel);
      out.emplace_back(p + "bias", &blocks[b].bias);
      out.emplace_back(p + "bn_gamma", &blocks[b].gamma);
      out.emplace_back(p + "bn_beta", &blocks[b].beta);
    }
    return out;
  }
};

/// Kernels and biases uniform in [-sqrt(1/fan_in), sqrt(1/fan_in)]; batch
/// norm starts as the identity.
template <std::floating_point T>
BackboneParams<T> init_backbone(const BackboneConfig& cfg, Rng& rng) {
  BackboneParams<T> p;
  p.config = cfg;
  std::size_t cin = cfg.in_channels;
  for (std::size_t b = 0; b < cfg.widths.size(); ++b) {
    const std::size_t cout = cfg.widths[b];
    const std::size_t fan_in = cfg.kernel * cfg.kernel * cin;
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    std::vector<T> k(cfg.kernel * cfg.kernel * cin * cout), bias(cout);
    for (auto& v : k) v = static_cast<T>(rng.uniform(-bound, bound));
    for (auto& v : bias) v = static_cast<T>(rng.uniform(-bound, bound));
    ConvBlock<T> blk;
    blk.kernel = Tensor<T>({cfg.kernel, cfg.kernel, cin, cout}, std::move(k), true);
    blk.bias = Tensor<T>({cout}, std::move(bias), true);
    blk.gamma = Tensor<T>::full({cout}, T(1), true);
    blk.beta = Tensor<T>::zeros({cout}, true);
    blk.running_mean.assign(cout, T(0));
    blk.running_var.assign(cout, T(1));
    blk.downsample = b < cfg.downsample_blocks;
    p.blocks.push_back(std::move(blk));
    cin = cout;
  }
  return p;
}

enum class NormMode {
  kBatch,    // normalize with the statistics of the current batch
  kRunning,  // normalize with the frozen running statistics
};

template <std::floating_point T>
struct BatchStats {
  std::vector<std::vector<T>> mean;  // per block
  std::vector<std::vector<T>> var;   // per block, unbiased
};

template <std::floating_point T>
struct BackboneOutput {
  Tensor<T> features;  // [B, H, W, C]
  BatchStats<T> stats;
};

/// Forward pass of a [B, H_img, W_img, C_in] image batch.
template <std::floating_point T>
BackboneOutput<T> backbone_forward(const Tensor<T>& images, const BackboneParams<T>& params, NormMode mode) {
  const auto& cfg = params.config;
  if (images.rank() != 4 || images.dim(1) != cfg.image_size || images.dim(2) != cfg.image_size ||
      images.dim(3) != cfg.in_channels) {
    throw ShapeError("backbone expects [B," + std::to_string(cfg.image_size) + "," + std::to_string(cfg.image_size) +
                     "," + std::to_string(cfg.in_channels) + "] images, got " + shape_str(images.shape()));
  }
  BackboneOutput<T> out;
  Tensor<T> x = images;
  const std::size_t pad = cfg.kernel / 2;
  for (const auto& blk : params.blocks) {
    x = add(conv2d(x, blk.kernel, 1, pad), blk.bias);
    const std::size_t c = x.dim(3);
    const std::size_t rows = x.size() / c;
    const Tensor<T> flat = reshape(x, {rows, c});
    Tensor<T> normed;
    if (mode == NormMode::kBatch) {
      const Tensor<T> mu = mean(flat, 0);
      const Tensor<T> centered = sub(flat, mu);
      const Tensor<T> var = mean(square(centered), 0);
      const Tensor<T> inv_std = div(Tensor<T>::full({c}, T(1)), sqrt(add_scalar(var, static_cast<T>(cfg.bn_eps))));
      normed = mul(centered, inv_std);
      std::vector<T> unbiased(var.values().begin(), var.values().end());
      if (rows > 1)
        for (auto& v : unbiased) v = v * static_cast<T>(rows) / static_cast<T>(rows - 1);
      out.stats.mean.emplace_back(mu.values().begin(), mu.values().end());
      out.stats.var.push_back(std::move(unbiased));
    } else {
      std::vector<T> shift(c), inv(c);
      for (std::size_t i = 0; i < c; ++i) {
        shift[i] = blk.running_mean[i];
        inv[i] = T(1) / std::sqrt(blk.running_var[i] + static_cast<T>(cfg.bn_eps));
      }
      normed = mul(sub(flat, Tensor<T>({c}, std::move(shift))), Tensor<T>({c}, std::move(inv)));
    }
    x = reshape(relu(add(mul(normed, blk.gamma), blk.beta)), x.shape());
    if (blk.downsample) x = max_pool2d(x, 2);
  }
  if (cfg.crop != 0) x = crop_center(x, cfg.crop);
  out.features = x;
  return out;
}

/// Blends batch statistics into the running statistics of every block.
template <std::floating_point T>
void update_running_stats(BackboneParams<T>& params, const BatchStats<T>& stats) {
  const T m = static_cast<T>(params.config.bn_momentum);
  for (std::size_t b = 0; b < params.blocks.size() && b < stats.mean.size(); ++b) {
    auto& blk = params.blocks[b];
    for (std::size_t i = 0; i < blk.running_mean.size(); ++i) {
      blk.running_mean[i] = (T(1) - m) * blk.running_mean[i] + m * stats.mean[b][i];
      blk.running_var[i] = (T(1) - m) * blk.running_var[i] + m * stats.var[b][i];
    }
  }
}

/// Splits a [B, H, W, C] batch into per-image feature maps.
template <std::floating_point T>
std::vector<FeatureMap<T>> split_feature_maps(const Tensor<T>& batch, std::span<const std::size_t> image_ids,
                                              std::span<const std::size_t> labels) {
  if (batch.rank() != 4 || batch.dim(0) != image_ids.size() || labels.size() != image_ids.size()) {
    throw ShapeError("split_feature_maps: batch " + shape_str(batch.shape()) + " vs " +
                     std::to_string(image_ids.size()) + " ids");
  }
  std::vector<FeatureMap<T>> maps;
  maps.reserve(image_ids.size());
  for (std::size_t i = 0; i < image_ids.size(); ++i) maps.push_back({select(batch, i), image_ids[i], labels[i]});
  return maps;
}

/// Feature maps for a batch of images. Differentiable w.r.t. the trainable
/// parameters in `params`.
template <std::floating_point T>
std::vector<FeatureMap<T>> extract_features(const Tensor<T>& images, const BackboneParams<T>& params, NormMode mode,
                                            std::span<const std::size_t> image_ids = {},
                                            std::span<const std::size_t> labels = {}) {
  auto out = backbone_forward(images, params, mode);
  const std::size_t b = images.dim(0);
  std::vector<std::size_t> ids(image_ids.begin(), image_ids.end()), labs(labels.begin(), labels.end());
  if (ids.empty())
    for (std::size_t i = 0; i < b; ++i) ids.push_back(i);
  if (labs.empty()) labs.assign(b, 0);
  return split_feature_maps(out.features, ids, labs);
}

/// Subtracts, per channel, the mean over every spatial position of every map
/// in the episode. Works on a stacked [B, H, W, C] batch.
template <std::floating_point T>
Tensor<T> episode_channel_shift(const Tensor<T>& batch) {
  if (batch.rank() < 2) throw ShapeError("episode_channel_shift expects channel-last maps");
  const std::size_t c = batch.shape().back();
  const Tensor<T> flat = reshape(batch, {batch.size() / c, c});
  return reshape(sub(flat, mean(flat, 0)), batch.shape());
}

template <std::floating_point T>
std::vector<FeatureMap<T>> episode_channel_shift(const std::vector<FeatureMap<T>>& maps) {
  if (maps.empty()) throw PreconditionError("episode_channel_shift needs at least one map");
  std::vector<Tensor<T>> parts;
  std::vector<std::size_t> ids, labels;
  for (const auto& m : maps) {
    parts.push_back(m.values);
    ids.push_back(m.image_id);
    labels.push_back(m.label);
  }
  return split_feature_maps(episode_channel_shift(stack(parts)), ids, labels);
}

}  // namespace mlcn
