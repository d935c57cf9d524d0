#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mlcn/ablation.hpp"
#include "mlcn/checkpoint.hpp"
#include "mlcn/gradcheck_suite.hpp"

namespace mlcn {

/// Written to `<out>/run_manifest.txt` before any other artifact.
struct RunManifest {
  std::string command;
  std::uint64_t config_digest = 0;
  std::uint64_t seed = 0;
  /// Content hash over every input (config text, dataset, checkpoint).
  std::uint64_t inputs_version = 0;
  std::string out_dir;

  std::string serialize() const {
    return "command=" + command + "\nconfig_digest=" + hex64(config_digest) + "\nseed=" + std::to_string(seed) +
           "\ninputs_version=" + hex64(inputs_version) + "\nout=" + out_dir + "\n";
  }
};

inline const char* kRunManifestName = "run_manifest.txt";

inline void write_run_manifest(const std::filesystem::path& out, const RunManifest& m) {
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory '" + out.string() + "': " + ec.message());
  std::ofstream os(out / kRunManifestName);
  if (!os) throw IoError("cannot write '" + (out / kRunManifestName).string() + "'");
  os << m.serialize();
}

inline std::uint64_t file_digest(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return Fnv1a().update(ss.str()).value();
}

inline Dataset load_dataset_for(const Config& cfg, const std::filesystem::path& manifest) {
  Dataset ds = load_dataset(manifest);
  if (ds.height != cfg.backbone.image_size || ds.width != cfg.backbone.image_size) {
    throw DataError("dataset '" + manifest.string() + "' has " + std::to_string(ds.height) + "x" +
                    std::to_string(ds.width) + " images, config expects " + std::to_string(cfg.backbone.image_size));
  }
  return ds;
}

/// Maps library errors to exit codes, printing the message to `err`.
template <class F>
int run_guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  }
}

template <class F>
auto with_precision(const Config& cfg, F&& f) {
  if (cfg.precision == 64) return f(double{});
  return f(float{});
}

struct TrainArgs {
  std::string config, data, out;
};

inline int cmd_train(const TrainArgs& a, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  return run_guarded(err, [&] {
    const Config cfg = load_config(a.config);
    const Dataset ds = load_dataset_for(cfg, a.data);
    const std::filesystem::path out(a.out);
    write_run_manifest(out, {"train", cfg.digest(), cfg.seed,
                             Fnv1a().update(cfg.serialize()).update_pod(dataset_digest(ds)).value(), out.string()});
    return with_precision(cfg, [&]<class T>(T) {
      const std::size_t every = std::max<std::size_t>(1, cfg.optim.episodes_per_epoch);
      auto result = train<T>(cfg, ds, [&](const LossRow& r) {
        if ((r.step + 1) % every == 0) {
          log << "epoch " << (r.step + 1) / every << " l_total=" << r.l_total << "\n";
        }
      });
      std::ofstream csv(out / "loss.csv");
      if (!csv) throw IoError("cannot write '" + (out / "loss.csv").string() + "'");
      write_loss_csv(csv, result.log);
      save_checkpoint(out / "model.ckpt", result.model, cfg.digest());
      log << "wrote " << (out / "model.ckpt").string() << "\n";
      return 0;
    });
  });
}

struct EvalArgs {
  std::string config, data, checkpoint, out;
  std::optional<std::size_t> episodes;
};

inline constexpr const char* kEvalSummaryHeader = "split,n_way,k_shot,n_query,mean_acc,ci95,episodes,seed";

inline int cmd_eval(const EvalArgs& a, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  return run_guarded(err, [&] {
    Config cfg = load_config(a.config);
    if (a.episodes) {
      if (*a.episodes == 0) throw ConfigError("--episodes must be positive");
      cfg.eval.episodes = *a.episodes;
    }
    const Dataset ds = load_dataset_for(cfg, a.data);
    const std::filesystem::path out(a.out);
    write_run_manifest(out, {"eval", cfg.digest(), cfg.seed,
                             Fnv1a()
                                 .update(cfg.serialize())
                                 .update_pod(dataset_digest(ds))
                                 .update_pod(file_digest(a.checkpoint))
                                 .value(),
                             out.string()});
    return with_precision(cfg, [&]<class T>(T) {
      const auto model = load_checkpoint<T>(a.checkpoint, cfg);
      const auto s = evaluate(model, ds, Split::kNovel, cfg, cfg.eval.episodes, cfg.eval.shape, cfg.seed);
      std::ofstream per(out / "eval_episodes.csv");
      per << "episode,accuracy\n";
      for (std::size_t e = 0; e < s.accuracies.size(); ++e) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%zu,%.17g", e, s.accuracies[e]);
        per << buf << "\n";
      }
      std::ofstream sum(out / "eval_summary.csv");
      char buf[256];
      std::snprintf(buf, sizeof buf, "novel,%zu,%zu,%zu,%.2f,%.2f,%zu,%llu", cfg.eval.shape.way, cfg.eval.shape.shot,
                    cfg.eval.shape.query, s.mean, s.ci95, s.episodes, static_cast<unsigned long long>(cfg.seed));
      sum << kEvalSummaryHeader << "\n" << buf << "\n";
      if (!per || !sum) throw IoError("failed writing evaluation results under '" + out.string() + "'");
      log << "accuracy " << format_mean_ci(s.mean, s.ci95) << " over " << s.episodes << " episodes\n";
      return 0;
    });
  });
}

struct AblateArgs {
  std::string config, data, out;
  std::vector<std::string> rows;  // empty: rows from the config
};

inline int cmd_ablate(const AblateArgs& a, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  return run_guarded(err, [&] {
    Config cfg = load_config(a.config);
    if (!a.rows.empty()) cfg.ablation_rows = a.rows;
    for (const auto& r : cfg.ablation_rows) parse_ablation_flags(r);
    const Dataset ds = load_dataset_for(cfg, a.data);
    const std::filesystem::path out(a.out);
    write_run_manifest(out, {"ablate", cfg.digest(), cfg.seed,
                             Fnv1a().update(cfg.serialize()).update_pod(dataset_digest(ds)).value(), out.string()});
    return with_precision(cfg, [&]<class T>(T) {
      const auto rows = run_ablation<T>(cfg, ds, cfg.ablation_rows, [&](const std::string& m) { log << m << "\n"; });
      std::ofstream csv(out / "ablation.csv");
      write_ablation_csv(csv, rows, cfg.eval.shape, cfg.seed);
      std::ofstream table(out / "ablation.txt");
      write_ablation_table(table, rows);
      if (!csv || !table) throw IoError("failed writing ablation results under '" + out.string() + "'");
      write_ablation_table(log, rows);
      return 0;
    });
  });
}

struct GradcheckArgs {
  std::uint64_t seed = 1;
  double tolerance = 1e-4;
};

inline int cmd_gradcheck(const GradcheckArgs& a, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  return run_guarded(err, [&] {
    if (!(a.tolerance > 0)) throw ConfigError("--tolerance must be positive");
    const auto checks = run_gradcheck_suite(a.seed, a.tolerance);
    std::size_t failed = 0;
    for (const auto& c : checks) {
      log << format_check(c) << "\n";
      failed += c.report.pass ? 0 : 1;
    }
    log << checks.size() - failed << "/" << checks.size() << " checks passed\n";
    return failed == 0 ? 0 : 5;
  });
}

struct SynthArgs {
  std::string spec, out;
};

inline int cmd_synth(const SynthArgs& a, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  return run_guarded(err, [&] {
    const SynthSpec spec = load_synth_spec(a.spec);
    const std::filesystem::path out(a.out);
    write_run_manifest(out, {"synth", 0, spec.seed, file_digest(a.spec), out.string()});
    const Dataset ds = generate_synthetic(spec);
    const auto manifest = save_dataset(ds, out);
    log << "wrote " << ds.images.size() << " images to " << manifest.string() << " digest "
        << hex64(dataset_digest(ds)) << "\n";
    return 0;
  });
}

struct ExportArgs {
  std::string config, data, checkpoint, out;
  std::size_t episode = 0;
};

/// Self-attention maps of every image and cross-attention maps of the first
/// query against every support of one novel episode.
inline int cmd_export_attention(const ExportArgs& a, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  return run_guarded(err, [&] {
    const Config cfg = load_config(a.config);
    const Dataset ds = load_dataset_for(cfg, a.data);
    const std::filesystem::path out(a.out);
    write_run_manifest(out, {"export-attention", cfg.digest(), cfg.seed,
                             Fnv1a()
                                 .update(cfg.serialize())
                                 .update_pod(dataset_digest(ds))
                                 .update_pod(file_digest(a.checkpoint))
                                 .value(),
                             out.string()});
    return with_precision(cfg, [&]<class T>(T) {
      NoGradGuard guard;
      const auto model = load_checkpoint<T>(a.checkpoint, cfg);
      Rng rng(episode_seed(cfg.seed, a.episode));
      const Episode ep = EpisodeSampler(ds, Split::kNovel, cfg.eval.shape).sample(rng);
      const auto idx = ep.batch_indices();
      const auto feats = episode_channel_shift(
          backbone_forward(gather_images<T>(ds, idx), model.backbone, NormMode::kRunning).features);
      const std::size_t h = feats.dim(1), w = feats.dim(2), c = feats.dim(3);
      std::vector<AttentionRecord> recs;
      auto to_record = [&](const std::string& branch, std::size_t image, const Tensor<T>& weights) {
        AttentionRecord r{branch, image, h, w, {}};
        for (T v : weights.values()) r.weights.push_back(static_cast<double>(v));
        return r;
      };
      for (std::size_t i = 0; i < idx.size(); ++i) {
        // Channel-averaged spatial attention.
        const auto att = self_attention_map(select(feats, i), cfg.loss.self_axis);
        recs.push_back(to_record("self", idx[i], mean(reshape(att, {h * w, c}), 1)));
      }
      const std::size_t q = ep.support.size();
      const auto fq = select(feats, q);
      for (std::size_t s = 0; s < ep.support.size(); ++s) {
        const auto att =
            cross_attention_map(correlation_tensor(fq, select(feats, s)), cfg.loss.cross_temperature);
        recs.push_back(to_record("cross_query", idx[q], att.query));
        recs.push_back(to_record("cross_support", idx[s], att.support));
      }
      const auto written = export_attention(recs, a.episode, out);
      log << "wrote " << written.size() << " attention maps to " << out.string() << "\n";
      return 0;
    });
  });
}

}  // namespace mlcn
