#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "mlcn/digest.hpp"
#include "mlcn/errors.hpp"

namespace mlcn {

struct BackboneConfig {
  std::size_t image_size = 32;
  std::size_t in_channels = 3;
  std::vector<std::size_t> widths{64, 64, 64, 64};
  std::size_t kernel = 3;
  /// The first `downsample_blocks` blocks end with a 2x2 max pool.
  std::size_t downsample_blocks = 2;
  /// Final centered spatial crop; 0 keeps the full map.
  std::size_t crop = 5;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  bool operator==(const BackboneConfig&) const = default;

  std::size_t channels() const { return widths.empty() ? in_channels : widths.back(); }
  std::size_t feature_size() const {
    std::size_t s = image_size;
    for (std::size_t b = 0; b < widths.size() && b < downsample_blocks; ++b) s /= 2;
    return crop == 0 ? s : crop;
  }
};

struct EpisodeShape {
  std::size_t way = 5;
  std::size_t shot = 1;
  std::size_t query = 15;

  bool operator==(const EpisodeShape&) const = default;
};

enum class SelfSoftmaxAxis { kSpatial, kChannel };
enum class ContrastiveDenominator { kPaired, kFixedQuery };

struct LossConfig {
  double alpha = 1.0;
  double beta = 0.5;
  double gamma = 0.25;
  bool use_sc = true;
  bool use_cc = true;
  bool use_pc = true;
  double tau1 = 0.5;
  double tau2 = 0.5;
  double tau3 = 0.5;
  /// Temperature of the cross-attention softmax.
  double cross_temperature = 0.2;
  SelfSoftmaxAxis self_axis = SelfSoftmaxAxis::kSpatial;
  ContrastiveDenominator denominator = ContrastiveDenominator::kPaired;

  bool operator==(const LossConfig&) const = default;
};

struct MixtureConfig {
  std::size_t components = 25;
  double kappa = 1.0;
  std::size_t iters = 3;
  bool weighted = true;

  bool operator==(const MixtureConfig&) const = default;
};

struct OptimConfig {
  double lr = 5e-2;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t epochs = 100;
  std::size_t episodes_per_epoch = 100;

  bool operator==(const OptimConfig&) const = default;
};

struct EvalConfig {
  std::size_t episodes = 600;
  EpisodeShape shape{};
  /// Inference branch weights; negative means "use the loss weight".
  double w_sc = -1;
  double w_cc = -1;
  double w_pc = -1;
  std::size_t threads = 1;

  bool operator==(const EvalConfig&) const = default;
};

struct Config {
  BackboneConfig backbone;
  EpisodeShape train_shape;
  LossConfig loss;
  MixtureConfig mixture;
  OptimConfig optim;
  EvalConfig eval;
  std::uint64_t seed = 1;
  /// 32 or 64: scalar width used for training and evaluation.
  int precision = 32;
  /// Ablation rows, each a '+'-joined subset of {ce, sc, cc, pc}.
  std::vector<std::string> ablation_rows{"ce", "ce+sc", "ce+sc+cc", "ce+sc+pc", "ce+sc+cc+pc"};

  void validate() const;
  std::string serialize() const;
  std::uint64_t digest() const { return Fnv1a().update(serialize()).value(); }
  bool operator==(const Config&) const = default;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "': expected a number, got '" + v + "'");
  }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw ConfigError("'" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("'" + key + "': expected true/false, got '" + v + "'");
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(trim(cur));
  return out;
}

/// Key table shared by parsing and serialization so the two cannot drift.
struct ConfigField {
  std::string key;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    auto add_uint = [&f](std::string key, auto getter) {
      f.push_back({key, [getter](const Config& c) { return std::to_string(getter(c)); },
                   [getter, key](Config& c, const std::string& v) {
                     getter(c) = static_cast<std::remove_cvref_t<decltype(getter(c))>>(parse_uint(key, v));
                   }});
    };
    auto add_double = [&f](std::string key, auto getter) {
      f.push_back({key, [getter](const Config& c) { return fmt_double(getter(c)); },
                   [getter, key](Config& c, const std::string& v) { getter(c) = parse_double(key, v); }});
    };
    auto add_bool = [&f](std::string key, auto getter) {
      f.push_back({key, [getter](const Config& c) { return std::string(getter(c) ? "true" : "false"); },
                   [getter, key](Config& c, const std::string& v) { getter(c) = parse_bool(key, v); }});
    };

    add_uint("seed", [](auto& c) -> auto& { return c.seed; });
    f.push_back({"precision", [](const Config& c) { return std::to_string(c.precision); },
                 [](Config& c, const std::string& v) { c.precision = static_cast<int>(parse_uint("precision", v)); }});

    add_uint("backbone.image_size", [](auto& c) -> auto& { return c.backbone.image_size; });
    add_uint("backbone.in_channels", [](auto& c) -> auto& { return c.backbone.in_channels; });
    f.push_back({"backbone.widths",
                 [](const Config& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.backbone.widths.size(); ++i)
                     s += (i ? "," : "") + std::to_string(c.backbone.widths[i]);
                   return s;
                 },
                 [](Config& c, const std::string& v) {
                   c.backbone.widths.clear();
                   for (const auto& p : split(v, ',')) c.backbone.widths.push_back(parse_uint("backbone.widths", p));
                 }});
    add_uint("backbone.kernel", [](auto& c) -> auto& { return c.backbone.kernel; });
    add_uint("backbone.downsample_blocks", [](auto& c) -> auto& { return c.backbone.downsample_blocks; });
    add_uint("backbone.crop", [](auto& c) -> auto& { return c.backbone.crop; });
    add_double("backbone.bn_momentum", [](auto& c) -> auto& { return c.backbone.bn_momentum; });
    add_double("backbone.bn_eps", [](auto& c) -> auto& { return c.backbone.bn_eps; });

    add_uint("episode.way", [](auto& c) -> auto& { return c.train_shape.way; });
    add_uint("episode.shot", [](auto& c) -> auto& { return c.train_shape.shot; });
    add_uint("episode.query", [](auto& c) -> auto& { return c.train_shape.query; });

    add_double("loss.alpha", [](auto& c) -> auto& { return c.loss.alpha; });
    add_double("loss.beta", [](auto& c) -> auto& { return c.loss.beta; });
    add_double("loss.gamma", [](auto& c) -> auto& { return c.loss.gamma; });
    add_bool("loss.sc", [](auto& c) -> auto& { return c.loss.use_sc; });
    add_bool("loss.cc", [](auto& c) -> auto& { return c.loss.use_cc; });
    add_bool("loss.pc", [](auto& c) -> auto& { return c.loss.use_pc; });
    f.push_back({"loss.denominator",
                 [](const Config& c) {
                   return std::string(c.loss.denominator == ContrastiveDenominator::kPaired ? "paired" : "fixed_query");
                 },
                 [](Config& c, const std::string& v) {
                   if (v == "paired") c.loss.denominator = ContrastiveDenominator::kPaired;
                   else if (v == "fixed_query") c.loss.denominator = ContrastiveDenominator::kFixedQuery;
                   else throw ConfigError("'loss.denominator': expected paired|fixed_query, got '" + v + "'");
                 }});
    f.push_back({"self_corr.softmax_axis",
                 [](const Config& c) {
                   return std::string(c.loss.self_axis == SelfSoftmaxAxis::kSpatial ? "spatial" : "channel");
                 },
                 [](Config& c, const std::string& v) {
                   if (v == "spatial") c.loss.self_axis = SelfSoftmaxAxis::kSpatial;
                   else if (v == "channel") c.loss.self_axis = SelfSoftmaxAxis::kChannel;
                   else throw ConfigError("'self_corr.softmax_axis': expected spatial|channel, got '" + v + "'");
                 }});

    add_double("temp.tau1", [](auto& c) -> auto& { return c.loss.tau1; });
    add_double("temp.tau2", [](auto& c) -> auto& { return c.loss.tau2; });
    add_double("temp.tau3", [](auto& c) -> auto& { return c.loss.tau3; });
    add_double("temp.cross", [](auto& c) -> auto& { return c.loss.cross_temperature; });

    add_uint("mixture.k", [](auto& c) -> auto& { return c.mixture.components; });
    add_double("mixture.kappa", [](auto& c) -> auto& { return c.mixture.kappa; });
    add_uint("mixture.iters", [](auto& c) -> auto& { return c.mixture.iters; });
    add_bool("mixture.weighted", [](auto& c) -> auto& { return c.mixture.weighted; });

    add_double("optim.lr", [](auto& c) -> auto& { return c.optim.lr; });
    add_double("optim.momentum", [](auto& c) -> auto& { return c.optim.momentum; });
    add_double("optim.weight_decay", [](auto& c) -> auto& { return c.optim.weight_decay; });
    add_uint("train.epochs", [](auto& c) -> auto& { return c.optim.epochs; });
    add_uint("train.episodes_per_epoch", [](auto& c) -> auto& { return c.optim.episodes_per_epoch; });

    add_uint("eval.episodes", [](auto& c) -> auto& { return c.eval.episodes; });
    add_uint("eval.way", [](auto& c) -> auto& { return c.eval.shape.way; });
    add_uint("eval.shot", [](auto& c) -> auto& { return c.eval.shape.shot; });
    add_uint("eval.query", [](auto& c) -> auto& { return c.eval.shape.query; });
    add_uint("eval.threads", [](auto& c) -> auto& { return c.eval.threads; });
    add_double("infer.sc", [](auto& c) -> auto& { return c.eval.w_sc; });
    add_double("infer.cc", [](auto& c) -> auto& { return c.eval.w_cc; });
    add_double("infer.pc", [](auto& c) -> auto& { return c.eval.w_pc; });

    f.push_back({"ablation.rows",
                 [](const Config& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.ablation_rows.size(); ++i) s += (i ? "," : "") + c.ablation_rows[i];
                   return s;
                 },
                 [](Config& c, const std::string& v) { c.ablation_rows = split(v, ','); }});
    return f;
  }();
  return fields;
}

}  // namespace detail

inline void Config::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(precision == 32 || precision == 64, "precision must be 32 or 64");
  need(!backbone.widths.empty(), "backbone.widths must name at least one block");
  need(backbone.kernel % 2 == 1, "backbone.kernel must be odd");
  need(backbone.image_size >= 2, "backbone.image_size too small");
  {
    std::size_t s = backbone.image_size;
    for (std::size_t b = 0; b < backbone.widths.size() && b < backbone.downsample_blocks; ++b) {
      need(s >= 2, "backbone downsampling shrinks the map below 1x1");
      s /= 2;
    }
    need(backbone.crop <= s, "backbone.crop exceeds the feature map size " + std::to_string(s));
  }
  for (const auto* shape : {&train_shape, &eval.shape}) {
    need(shape->way >= 2, "way must be at least 2");
    need(shape->shot >= 1 && shape->query >= 1, "shot and query must be positive");
  }
  need(loss.alpha >= 0 && loss.beta >= 0 && loss.gamma >= 0, "loss weights must be non-negative");
  need(loss.tau1 > 0 && loss.tau2 > 0 && loss.tau3 > 0, "temperatures must be positive");
  need(loss.cross_temperature > 0, "temp.cross must be positive");
  need(mixture.components >= 1 && mixture.iters >= 1, "mixture.k and mixture.iters must be positive");
  need(mixture.kappa > 0, "mixture.kappa must be positive");
  need(optim.lr > 0, "optim.lr must be positive");
  need(optim.momentum >= 0 && optim.momentum < 1, "optim.momentum must lie in [0, 1)");
  need(optim.weight_decay >= 0, "optim.weight_decay must be non-negative");
  need(eval.episodes >= 1, "eval.episodes must be positive");
  need(eval.threads >= 1, "eval.threads must be positive");
  for (const auto& r : ablation_rows) {
    for (const auto& part : detail::split(r, '+')) {
      need(part == "ce" || part == "sc" || part == "cc" || part == "pc", "ablation row '" + r + "' has unknown term");
    }
  }
}

inline std::string Config::serialize() const {
  std::string out;
  for (const auto& f : detail::config_fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

/// Parses `key = value` lines over the defaults. `#` starts a comment.
inline Config parse_config(const std::string& text) {
  Config c;
  std::map<std::string, const detail::ConfigField*> index;
  for (const auto& f : detail::config_fields()) index[f.key] = &f;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    auto it = index.find(key);
    if (it == index.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second->set(c, value);
  }
  c.validate();
  return c;
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace mlcn
