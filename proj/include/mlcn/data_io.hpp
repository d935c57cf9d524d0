#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mlcn/binary_io.hpp"
#include "mlcn/config.hpp"
#include "mlcn/digest.hpp"
#include "mlcn/errors.hpp"
#include "mlcn/random.hpp"

namespace mlcn {

enum class Split { kBase, kNovel };

inline const char* split_name(Split s) { return s == Split::kBase ? "base" : "novel"; }

/// One H x W x 3 image, channel-last, values in [0, 1].
struct Image {
  std::vector<float> pixels;
  std::size_t label = 0;
  Split split = Split::kBase;
  /// Background texture id used by the generator; -1 when unknown or absent.
  int background = -1;
};

struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
  std::vector<Image> images;

  /// Sorted class ids of a split.
  std::vector<std::size_t> classes(Split s) const {
    std::set<std::size_t> out;
    for (const auto& im : images)
      if (im.split == s) out.insert(im.label);
    return {out.begin(), out.end()};
  }

  /// Image indices per class of a split, in dataset order.
  std::map<std::size_t, std::vector<std::size_t>> by_class(Split s) const {
    std::map<std::size_t, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < images.size(); ++i)
      if (images[i].split == s) out[images[i].label].push_back(i);
    return out;
  }

  /// Throws if a class appears in both splits or an image has the wrong size.
  void validate() const {
    std::map<std::size_t, Split> owner;
    for (const auto& im : images) {
      if (im.pixels.size() != height * width * channels) throw DataError("image size does not match dataset header");
      auto [it, inserted] = owner.emplace(im.label, im.split);
      if (!inserted && it->second != im.split) {
        throw DataError("class " + std::to_string(im.label) + " appears in both base and novel splits");
      }
    }
  }
};

/// Order-independent content hash: the wrapping sum of per-image hashes of
/// (label, split, little-endian pixel bytes).
inline std::uint64_t dataset_digest(const Dataset& ds) {
  std::uint64_t acc = Fnv1a().update_pod(static_cast<std::uint64_t>(ds.height)).update_pod(static_cast<std::uint64_t>(ds.width)).value();
  for (const auto& im : ds.images) {
    Fnv1a h;
    const std::uint64_t label = im.label;
    const std::uint8_t split = im.split == Split::kBase ? 0 : 1;
    std::array<std::uint8_t, 9> head{};
    for (int b = 0; b < 8; ++b) head[static_cast<std::size_t>(b)] = static_cast<std::uint8_t>(label >> (8 * b));
    head[8] = split;
    h.update(head);
    for (float f : im.pixels) {
      const auto u = std::bit_cast<std::uint32_t>(f);
      const std::uint8_t bytes[4] = {static_cast<std::uint8_t>(u), static_cast<std::uint8_t>(u >> 8),
                                     static_cast<std::uint8_t>(u >> 16), static_cast<std::uint8_t>(u >> 24)};
      h.update(bytes);
    }
    acc += Rng::splitmix(h.value());
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Image files and manifest

inline constexpr char kImageMagic[4] = {'M', 'L', 'I', 'M'};

inline void write_image_file(const std::filesystem::path& path, const Image& im, std::size_t h, std::size_t w,
                             std::size_t c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write image file '" + path.string() + "'");
  os.write(kImageMagic, 4);
  bin::put_u32(os, static_cast<std::uint32_t>(h));
  bin::put_u32(os, static_cast<std::uint32_t>(w));
  bin::put_u32(os, static_cast<std::uint32_t>(c));
  for (float f : im.pixels) bin::put_f32(os, f);
  if (!os) throw IoError("failed writing image file '" + path.string() + "'");
}

inline std::vector<float> read_image_file(const std::filesystem::path& path, std::size_t h, std::size_t w,
                                          std::size_t c) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open image file '" + path.string() + "'");
  char magic[4];
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kImageMagic)) {
    throw IoError("bad image magic in '" + path.string() + "'");
  }
  const auto fh = bin::get_u32(is, path.string()), fw = bin::get_u32(is, path.string()),
             fc = bin::get_u32(is, path.string());
  if (fh != h || fw != w || fc != c) throw DataError("image '" + path.string() + "' has unexpected dimensions");
  std::vector<float> px(h * w * c);
  for (auto& v : px) v = bin::get_f32(is, path.string());
  return px;
}

/// Writes images/<n>.bin plus manifest.txt under `dir`; returns the manifest path.
inline std::filesystem::path save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  const fs::path manifest = dir / "manifest.txt";
  std::ofstream os(manifest);
  if (!os) throw IoError("cannot write manifest '" + manifest.string() + "'");
  os << "version=1 height=" << ds.height << " width=" << ds.width << "\n";
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "images/%06zu.bin", i);
    write_image_file(dir / name, ds.images[i], ds.height, ds.width, ds.channels);
    os << "file=" << name << " label=" << ds.images[i].label << " split=" << split_name(ds.images[i].split);
    if (ds.images[i].background >= 0) os << " background=" << ds.images[i].background;
    os << "\n";
  }
  if (!os) throw IoError("failed writing manifest '" + manifest.string() + "'");
  return manifest;
}

namespace detail {

inline std::map<std::string, std::string> parse_record(const std::string& line, std::size_t lineno) {
  std::map<std::string, std::string> kv;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos || eq == 0) throw ParseError("expected key=value, got '" + tok + "'", lineno);
    if (!kv.emplace(tok.substr(0, eq), tok.substr(eq + 1)).second) {
      throw ParseError("duplicate key '" + tok.substr(0, eq) + "'", lineno);
    }
  }
  return kv;
}

inline std::size_t record_uint(const std::map<std::string, std::string>& kv, const std::string& key,
                               std::size_t lineno) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ParseError("missing '" + key + "'", lineno);
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(it->second.data(), it->second.data() + it->second.size(), out);
  if (ec != std::errc{} || p != it->second.data() + it->second.size()) {
    throw ParseError("'" + key + "' is not a non-negative integer", lineno);
  }
  return out;
}

}  // namespace detail

/// Loads a manifest and its image files. Paths are relative to the manifest.
inline Dataset load_dataset(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open manifest '" + manifest.string() + "'");
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto kv = detail::parse_record(line, lineno);
    if (!have_header) {
      if (!kv.count("version")) throw ParseError("first record must be the version header", lineno);
      if (kv.at("version") != "1") throw ParseError("unsupported manifest version " + kv.at("version"), lineno);
      ds.height = detail::record_uint(kv, "height", lineno);
      ds.width = detail::record_uint(kv, "width", lineno);
      if (ds.height == 0 || ds.width == 0) throw ParseError("image dimensions must be positive", lineno);
      have_header = true;
      continue;
    }
    if (!kv.count("file")) throw ParseError("missing 'file'", lineno);
    Image im;
    im.label = detail::record_uint(kv, "label", lineno);
    auto sp = kv.find("split");
    if (sp == kv.end()) throw ParseError("missing 'split'", lineno);
    if (sp->second == "base") im.split = Split::kBase;
    else if (sp->second == "novel") im.split = Split::kNovel;
    else throw ParseError("split must be base or novel, got '" + sp->second + "'", lineno);
    if (kv.count("background")) im.background = static_cast<int>(detail::record_uint(kv, "background", lineno));
    for (const auto& [k, v] : kv) {
      if (k != "file" && k != "label" && k != "split" && k != "background") {
        throw ParseError("unknown key '" + k + "'", lineno);
      }
    }
    im.pixels = read_image_file(manifest.parent_path() / kv.at("file"), ds.height, ds.width, ds.channels);
    ds.images.push_back(std::move(im));
  }
  if (!have_header) throw ParseError("empty manifest", lineno);
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic foreground/background generator

enum class BackgroundMode { kClassCorrelated, kShuffled, kNone };

inline const char* background_mode_name(BackgroundMode m) {
  switch (m) {
    case BackgroundMode::kClassCorrelated: return "class-correlated";
    case BackgroundMode::kShuffled: return "shuffled";
    case BackgroundMode::kNone: return "none";
  }
  return "none";
}

inline BackgroundMode parse_background_mode(const std::string& s) {
  if (s == "class-correlated") return BackgroundMode::kClassCorrelated;
  if (s == "shuffled") return BackgroundMode::kShuffled;
  if (s == "none") return BackgroundMode::kNone;
  throw ConfigError("background mode must be class-correlated|shuffled|none, got '" + s + "'");
}

/// Classes [0, classes - novel_classes) form the base split, the rest the
/// novel split. Each split has its own background mode.
struct SynthSpec {
  std::size_t classes = 8;
  std::size_t novel_classes = 0;
  std::size_t images_per_class = 50;
  std::size_t image_size = 32;
  BackgroundMode background_mode = BackgroundMode::kClassCorrelated;
  BackgroundMode novel_background_mode = BackgroundMode::kShuffled;
  /// Number of distinct background textures; 0 means one per base class.
  std::size_t textures = 0;
  /// Foreground radius as a fraction of the image side.
  double fg_scale = 0.3;
  /// Background texture amplitude in [0, 1].
  double bg_contrast = 0.6;
  /// Saturation of the per-class foreground colors; 0 gives every class the same gray.
  double fg_saturation = 0.85;
  double noise = 0.05;
  std::uint64_t seed = 7;

  std::size_t base_classes() const { return classes - novel_classes; }
  std::size_t texture_count() const { return textures != 0 ? textures : std::max<std::size_t>(1, base_classes()); }

  void validate() const {
    if (classes == 0 || images_per_class == 0) throw ConfigError("synth spec needs classes and images");
    if (novel_classes > classes) throw ConfigError("novel_classes exceeds classes");
    if (image_size < 4) throw ConfigError("image_size must be at least 4");
    if (noise < 0 || fg_scale <= 0 || bg_contrast < 0) throw ConfigError("synth spec has a negative parameter");
    if (fg_saturation < 0 || fg_saturation > 1) throw ConfigError("fg_saturation must lie in [0, 1]");
  }
};

inline SynthSpec parse_synth_spec(const std::string& text) {
  SynthSpec s;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("synth spec line " + std::to_string(lineno) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    const auto v = detail::trim(line.substr(eq + 1));
    if (key == "classes") s.classes = detail::parse_uint(key, v);
    else if (key == "novel_classes") s.novel_classes = detail::parse_uint(key, v);
    else if (key == "images_per_class") s.images_per_class = detail::parse_uint(key, v);
    else if (key == "image_size") s.image_size = detail::parse_uint(key, v);
    else if (key == "background_mode") s.background_mode = parse_background_mode(v);
    else if (key == "novel_background_mode") s.novel_background_mode = parse_background_mode(v);
    else if (key == "textures") s.textures = detail::parse_uint(key, v);
    else if (key == "fg_scale") s.fg_scale = detail::parse_double(key, v);
    else if (key == "bg_contrast") s.bg_contrast = detail::parse_double(key, v);
    else if (key == "fg_saturation") s.fg_saturation = detail::parse_double(key, v);
    else if (key == "noise") s.noise = detail::parse_double(key, v);
    else if (key == "seed") s.seed = detail::parse_uint(key, v);
    else throw ConfigError("synth spec line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  s.validate();
  return s;
}

inline SynthSpec load_synth_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open synth spec '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_synth_spec(ss.str());
}

namespace detail {

using Rgb = std::array<double, 3>;

inline Rgb hsv(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s, x = c * (1 - std::abs(std::fmod(h * 6, 2.0) - 1)), m = v - c;
  const int seg = static_cast<int>(h * 6) % 6;
  Rgb r{};
  switch (seg) {
    case 0: r = {c, x, 0}; break;
    case 1: r = {x, c, 0}; break;
    case 2: r = {0, c, x}; break;
    case 3: r = {0, x, c}; break;
    case 4: r = {x, 0, c}; break;
    default: r = {c, 0, x}; break;
  }
  return {r[0] + m, r[1] + m, r[2] + m};
}

inline constexpr std::size_t kShapeKinds = 6;

/// Membership test in the unit frame of the foreground.
inline bool inside_shape(std::size_t kind, double u, double v) {
  switch (kind) {
    case 0: return u * u + (v / 0.7) * (v / 0.7) <= 1.0;                          // ellipse
    case 1: return std::abs(u) <= 0.85 && std::abs(v) <= 0.85;                     // square
    case 2: return v >= -0.8 && v <= 0.8 && std::abs(u) <= 0.55 * (v + 0.8);       // triangle
    case 3: return std::abs(u) + std::abs(v) <= 1.0;                               // diamond
    case 4: return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);  // cross
    default: {
      const double r2 = u * u + v * v;
      return r2 >= 0.45 && r2 <= 1.0;  // ring
    }
  }
}

struct TextureStyle {
  std::size_t cells;  // lattice resolution of the value noise
  Rgb low, high;
};

inline TextureStyle texture_style(std::uint64_t seed, std::size_t texture) {
  Rng r(Rng::splitmix(seed ^ (0x7e57u + texture * 0x9e37u)));
  TextureStyle t;
  t.cells = 2 + (texture % 4) * 2;
  const double hue = r.uniform();
  t.low = hsv(hue, 0.6, 0.25 + 0.15 * r.uniform());
  t.high = hsv(hue + 0.08 + 0.1 * r.uniform(), 0.5, 0.7 + 0.2 * r.uniform());
  return t;
}

/// Smoothly interpolated lattice noise in [0, 1] with a fresh lattice per image.
inline std::vector<double> value_noise(std::size_t size, std::size_t cells, Rng& rng) {
  const std::size_t n = cells + 1;
  std::vector<double> lattice(n * n);
  for (auto& v : lattice) v = rng.uniform();
  std::vector<double> out(size * size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double fy = static_cast<double>(y) / static_cast<double>(size) * static_cast<double>(cells);
      const double fx = static_cast<double>(x) / static_cast<double>(size) * static_cast<double>(cells);
      const auto iy = static_cast<std::size_t>(fy), ix = static_cast<std::size_t>(fx);
      double ty = fy - static_cast<double>(iy), tx = fx - static_cast<double>(ix);
      ty = ty * ty * (3 - 2 * ty);
      tx = tx * tx * (3 - 2 * tx);
      const double a = lattice[iy * n + ix], b = lattice[iy * n + ix + 1];
      const double c = lattice[(iy + 1) * n + ix], d = lattice[(iy + 1) * n + ix + 1];
      out[y * size + x] = (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
    }
  return out;
}

}  // namespace detail

/// Class-determined foreground shapes composited over value-noise textures.
/// In class-correlated mode texture id = class id mod texture count; in
/// shuffled mode it is drawn independently per image; in none mode the
/// background is black.
inline Dataset generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.height = ds.width = spec.image_size;
  ds.channels = 3;
  const std::size_t sz = spec.image_size;
  const std::size_t textures = spec.texture_count();
  std::vector<detail::TextureStyle> styles;
  for (std::size_t t = 0; t < textures; ++t) styles.push_back(detail::texture_style(spec.seed, t));

  Rng rng(spec.seed);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    const bool novel = c >= spec.base_classes();
    const BackgroundMode mode = novel ? spec.novel_background_mode : spec.background_mode;
    const std::size_t kind = c % detail::kShapeKinds;
    // Golden-ratio hue spacing keeps class colors apart.
    const detail::Rgb color = detail::hsv(0.11 + 0.61803398875 * static_cast<double>(c), spec.fg_saturation, 0.95);
    for (std::size_t n = 0; n < spec.images_per_class; ++n) {
      Image im;
      im.label = c;
      im.split = novel ? Split::kNovel : Split::kBase;
      std::vector<double> px(sz * sz * 3, 0.0);
      if (mode != BackgroundMode::kNone) {
        const std::size_t tex = mode == BackgroundMode::kClassCorrelated ? c % textures : rng.below(textures);
        im.background = static_cast<int>(tex);
        const auto& st = styles[tex];
        const auto noise = detail::value_noise(sz, st.cells, rng);
        for (std::size_t p = 0; p < sz * sz; ++p) {
          const double t = 0.5 + spec.bg_contrast * (noise[p] - 0.5);
          for (std::size_t ch = 0; ch < 3; ++ch) px[p * 3 + ch] = st.low[ch] * (1 - t) + st.high[ch] * t;
        }
      }
      const double radius = spec.fg_scale * static_cast<double>(sz) * rng.uniform(0.8, 1.2);
      const double jitter = 0.15 * static_cast<double>(sz);
      const double cy = static_cast<double>(sz) / 2 + rng.uniform(-jitter, jitter);
      const double cx = static_cast<double>(sz) / 2 + rng.uniform(-jitter, jitter);
      for (std::size_t y = 0; y < sz; ++y)
        for (std::size_t x = 0; x < sz; ++x) {
          const double u = (static_cast<double>(x) + 0.5 - cx) / radius;
          const double v = (static_cast<double>(y) + 0.5 - cy) / radius;
          if (!detail::inside_shape(kind, u, v)) continue;
          for (std::size_t ch = 0; ch < 3; ++ch) px[(y * sz + x) * 3 + ch] = color[ch];
        }
      im.pixels.resize(px.size());
      for (std::size_t i = 0; i < px.size(); ++i) {
        const double noisy = spec.noise > 0 ? px[i] + spec.noise * rng.normal() : px[i];
        im.pixels[i] = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
      }
      ds.images.push_back(std::move(im));
    }
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Artifact export

/// One attention map to export. `weights` is row-major H x W.
struct AttentionRecord {
  std::string branch;
  std::size_t image_id = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> weights;
};

inline std::string format_weight(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  std::string s = buf;
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

/// Writes one CSV grid per map into `dir` and appends a line per map to
/// `dir/attention_manifest.txt`. Returns the written CSV paths.
inline std::vector<std::filesystem::path> export_attention(const std::vector<AttentionRecord>& maps,
                                                           std::size_t episode_id,
                                                           const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  std::ofstream manifest(dir / "attention_manifest.txt", std::ios::app);
  if (!manifest) throw IoError("cannot write '" + (dir / "attention_manifest.txt").string() + "'");
  std::vector<fs::path> written;
  for (std::size_t m = 0; m < maps.size(); ++m) {
    const auto& rec = maps[m];
    if (rec.weights.size() != rec.height * rec.width) throw ShapeError("attention record size mismatch");
    char name[96];
    std::snprintf(name, sizeof name, "ep%zu_%s_img%zu_%zu.csv", episode_id, rec.branch.c_str(), rec.image_id, m);
    const fs::path path = dir / name;
    std::ofstream os(path);
    if (!os) throw IoError("cannot write attention map '" + path.string() + "'");
    for (std::size_t y = 0; y < rec.height; ++y) {
      for (std::size_t x = 0; x < rec.width; ++x) os << (x ? "," : "") << format_weight(rec.weights[y * rec.width + x]);
      os << "\n";
    }
    if (!os) throw IoError("failed writing attention map '" + path.string() + "'");
    manifest << "episode=" << episode_id << " image=" << rec.image_id << " branch=" << rec.branch << " file=" << name
             << "\n";
    written.push_back(path);
  }
  return written;
}

/// Reads a CSV grid written by export_attention.
inline std::vector<std::vector<double>> read_csv_grid(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    std::vector<double> row;
    for (const auto& cell : detail::split(line, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw ParseError("bad number '" + cell + "'", lineno);
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Writes a row-major matrix as CSV.
inline void write_matrix_csv(const std::filesystem::path& path, std::span<const double> values, std::size_t rows,
                             std::size_t cols) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) os << (c ? "," : "") << format_weight(values[r * cols + c]);
    os << "\n";
  }
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace mlcn
