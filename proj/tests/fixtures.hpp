#pragma once

#include "mlcn/config.hpp"
#include "mlcn/data_io.hpp"

namespace mlcn::testing {

/// 8x8 images, two blocks of width 4, 4x4 output maps.
inline Config tiny_config() {
  Config c;
  c.backbone.image_size = 8;
  c.backbone.widths = {4, 4};
  c.backbone.downsample_blocks = 1;
  c.backbone.crop = 0;
  c.train_shape = {3, 1, 2};
  c.eval.shape = {3, 1, 2};
  c.eval.episodes = 10;
  c.mixture.components = 4;
  c.optim.epochs = 1;
  c.optim.episodes_per_epoch = 3;
  c.precision = 64;
  c.seed = 11;
  return c;
}

/// 5 base classes and 3 novel classes of 8x8 images.
inline Dataset tiny_dataset(std::uint64_t seed = 3) {
  SynthSpec s;
  s.classes = 8;
  s.novel_classes = 3;
  s.images_per_class = 6;
  s.image_size = 8;
  s.seed = seed;
  return generate_synthetic(s);
}

}  // namespace mlcn::testing
