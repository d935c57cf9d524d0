#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "mlcn/grad_check.hpp"
#include "mlcn/model.hpp"

namespace mlcn {

struct NamedCheck {
  std::string name;
  GradReport report;
};

namespace detail {

inline Tensord random_tensor(const Shape& s, Rng& rng, double scale = 1.0, double offset = 0.0) {
  std::vector<double> v(shape_size(s));
  for (auto& x : v) x = offset + scale * rng.normal();
  return Tensord(s, std::move(v));
}

inline Tensord weighted_sum(const Tensord& x, const Tensord& w) { return sum(mul(x, w)); }

/// Per-image embeddings of `maps` under one branch, as prototypes and views
/// for a 1-shot episode whose last map is the query.
inline Tensord branch_episode_loss(const std::vector<Tensord>& emb, std::size_t target, double tau) {
  std::vector<Tensord> protos(emb.begin(), emb.end() - 1);
  std::vector<Tensord> views(protos.size(), emb.back());
  return contrastive_loss(protos, views, target, tau);
}

}  // namespace detail

/// Randomized finite-difference checks of every differentiable stage at
/// double precision. Deterministic for a given seed.
inline std::vector<NamedCheck> run_gradcheck_suite(std::uint64_t seed, double tolerance) {
  using detail::random_tensor;
  GradCheckOptions opt;
  opt.tolerance = tolerance;
  std::vector<NamedCheck> out;
  Rng root(seed);
  auto run = [&](const std::string& name, int idx, const ScalarFn<double>& f, const std::vector<Tensord>& in) {
    out.push_back({name + "#" + std::to_string(idx), grad_check<double>(f, in, opt)});
  };

  for (int r = 0; r < 4; ++r) {
    Rng rng(root.fork());
    const auto w = random_tensor({3, 3, 4}, rng);
    run("self_attention", r, [w](const auto& x) { return detail::weighted_sum(self_attention_map(x[0]), w); },
        {random_tensor({3, 3, 4}, rng)});
  }

  for (int r = 0; r < 4; ++r) {
    Rng rng(root.fork());
    const std::size_t target = rng.below(3);
    run("self_embedding_loss", r,
        [target](const auto& x) {
          std::vector<Tensord> z;
          for (const auto& m : x) z.push_back(self_embedding(m));
          return detail::branch_episode_loss(z, target, 0.5);
        },
        {random_tensor({3, 3, 4}, rng), random_tensor({3, 3, 4}, rng), random_tensor({3, 3, 4}, rng),
         random_tensor({3, 3, 4}, rng)});
  }

  for (int r = 0; r < 4; ++r) {
    Rng rng(root.fork());
    const auto wq = random_tensor({9}, rng), ws = random_tensor({9}, rng);
    run("cross_attention", r,
        [wq, ws](const auto& x) {
          const auto att = cross_attention_map(correlation_tensor(x[0], x[1]), 0.2);
          return add(detail::weighted_sum(att.query, wq), detail::weighted_sum(att.support, ws));
        },
        {random_tensor({3, 3, 4}, rng), random_tensor({3, 3, 4}, rng)});
  }

  for (int r = 0; r < 4; ++r) {
    Rng rng(root.fork());
    const std::size_t target = rng.below(3);
    run("cross_embedding_loss", r,
        [target](const auto& x) {
          const auto& q = x.back();
          const auto qu = normalized_positions(q);
          std::vector<Tensord> protos, views;
          for (std::size_t n = 0; n + 1 < x.size(); ++n) {
            const auto pair = cross_pair(q, qu, x[n], normalized_positions(x[n]), 0.2);
            protos.push_back(pair.support_embedding);
            views.push_back(pair.query_embedding);
          }
          return contrastive_loss(protos, views, target, 0.5);
        },
        {random_tensor({3, 3, 4}, rng), random_tensor({3, 3, 4}, rng), random_tensor({3, 3, 4}, rng),
         random_tensor({3, 3, 4}, rng)});
  }

  for (int r = 0; r < 4; ++r) {
    Rng rng(root.fork());
    const std::size_t target = rng.below(3);
    const auto init = random_tensor({3, 3}, rng);
    run("pattern_chain", r,
        [target, init](const auto& x) {
          const auto st = fit_mixture(x[0], init, MixtureFitOptions{3, 1.0, 1, true});
          std::vector<Tensord> p;
          for (std::size_t i = 0; i < 4; ++i) p.push_back(pattern_embedding(st, i, 4));
          return detail::branch_episode_loss(p, target, 0.5);
        },
        {random_tensor({16, 3}, rng)});
  }

  for (int r = 0; r < 3; ++r) {
    Rng rng(root.fork());
    std::vector<std::size_t> labels{rng.below(5), rng.below(5), rng.below(5)};
    run("classification_loss", r,
        [labels](const auto& x) {
          return loss_ce(x[0], labels, ClassifierHead<double>{x[1], x[2]});
        },
        {random_tensor({3, 2, 2, 4}, rng), random_tensor({5, 4}, rng, 0.5), random_tensor({5}, rng, 0.5)});
  }

  for (int r = 0; r < 3; ++r) {
    Rng rng(root.fork());
    const std::size_t target = rng.below(3);
    const auto init = random_tensor({3, 4}, rng);
    const std::size_t label = rng.below(4);
    run("total_loss", r,
        [target, init, label](const auto& x) {
          const auto F = episode_channel_shift(x[0]);
          std::vector<Tensord> maps;
          for (std::size_t i = 0; i < 4; ++i) maps.push_back(select(F, i));
          std::vector<Tensord> z;
          for (const auto& m : maps) z.push_back(self_embedding(m));
          const auto l_sc = detail::branch_episode_loss(z, target, 0.5);
          std::vector<Tensord> cp, cv;
          const auto qu = normalized_positions(maps[3]);
          for (std::size_t n = 0; n < 3; ++n) {
            const auto pair = cross_pair(maps[3], qu, maps[n], normalized_positions(maps[n]), 0.2);
            cp.push_back(pair.support_embedding);
            cv.push_back(pair.query_embedding);
          }
          const auto l_cc = contrastive_loss(cp, cv, target, 0.5);
          const auto st = fit_mixture(reshape(F, {16, 4}), init, MixtureFitOptions{3, 1.0, 1, true});
          std::vector<Tensord> p;
          for (std::size_t i = 0; i < 4; ++i) p.push_back(pattern_embedding(st, i, 4));
          const auto l_pc = detail::branch_episode_loss(p, target, 0.5);
          const std::vector<std::size_t> lab{label};
          const auto l_ce = loss_ce(slice(F, 3, 4), lab, ClassifierHead<double>{x[1], x[2]});
          return total_loss<double>(l_ce, l_sc, l_cc, l_pc, 1.0, 0.5, 0.25).l_total;
        },
        {random_tensor({4, 2, 2, 4}, rng), random_tensor({4, 4}, rng, 0.5), random_tensor({4}, rng, 0.5)});
  }

  for (int r = 0; r < 2; ++r) {
    Rng rng(root.fork());
    BackboneConfig bc;
    bc.image_size = 8;
    bc.in_channels = 3;
    bc.widths = {3, 4};
    bc.downsample_blocks = 1;
    bc.crop = 0;
    Rng init_rng(rng.fork());
    const auto params = init_backbone<double>(bc, init_rng);
    const auto images = random_tensor({2, 8, 8, 3}, rng, 0.5, 0.5);
    const auto w = random_tensor({2, 4, 4, 4}, rng);
    run("backbone_kernel", r,
        [params, images, w](const auto& x) {
          auto p = params;
          p.blocks[0].kernel = x[0];
          p.blocks[1].kernel = x[1];
          return detail::weighted_sum(backbone_forward(images, p, NormMode::kBatch).features, w);
        },
        {params.blocks[0].kernel.detach(), params.blocks[1].kernel.detach()});
  }
  return out;
}

inline std::string format_check(const NamedCheck& c) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s %-24s max_rel=%.3e max_abs=%.3e tol=%.1e", c.report.pass ? "PASS" : "FAIL",
                c.name.c_str(), c.report.worst_rel(), c.report.worst_abs(), c.report.tolerance);
  return buf;
}

}  // namespace mlcn
