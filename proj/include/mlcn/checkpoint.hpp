#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mlcn/binary_io.hpp"
#include "mlcn/model.hpp"

namespace mlcn {

inline constexpr char kCheckpointMagic[4] = {'M', 'L', 'C', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> dims;
  std::vector<float> values;
};

struct CheckpointFile {
  std::uint64_t config_digest = 0;
  std::vector<NamedTensor> tensors;
};

inline void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint '" + path.string() + "'");
  os.write(kCheckpointMagic, 4);
  bin::put_u32(os, kCheckpointVersion);
  bin::put_u64(os, ck.config_digest);
  bin::put_u32(os, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    bin::put_u32(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    bin::put_u32(os, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) bin::put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : t.values) bin::put_f32(os, v);
  }
  if (!os) throw IoError("failed writing checkpoint '" + path.string() + "'");
}

inline CheckpointFile read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path.string() + "'");
  const std::string what = "checkpoint '" + path.string() + "'";
  char magic[4];
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kCheckpointMagic)) throw IoError("bad magic in " + what);
  const auto version = bin::get_u32(is, what);
  if (version != kCheckpointVersion) throw IoError("unsupported version " + std::to_string(version) + " in " + what);
  CheckpointFile ck;
  ck.config_digest = bin::get_u64(is, what);
  const auto count = bin::get_u32(is, what);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = bin::get_u32(is, what);
    if (len > 4096) throw IoError("implausible tensor name length in " + what);
    t.name.resize(len);
    if (!is.read(t.name.data(), len)) throw IoError("truncated " + what);
    const auto rank = bin::get_u32(is, what);
    if (rank > 8) throw IoError("implausible tensor rank in " + what);
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.dims.push_back(bin::get_u32(is, what));
      n *= t.dims.back();
    }
    if (n > (std::size_t{1} << 30)) throw IoError("implausible tensor size in " + what);
    t.values.resize(n);
    for (auto& v : t.values) v = bin::get_f32(is, what);
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

namespace detail {

template <std::floating_point T>
NamedTensor named(const std::string& name, const Shape& dims, std::span<const T> values) {
  NamedTensor t{name, dims, {}};
  for (T v : values) t.values.push_back(static_cast<float>(v));
  return t;
}

}  // namespace detail

/// Trainable tensors, running statistics, and the base-class map.
template <std::floating_point T>
CheckpointFile model_to_checkpoint(Model<T>& model, std::uint64_t config_digest) {
  CheckpointFile ck;
  ck.config_digest = config_digest;
  for (const auto& [name, t] : model.trainable()) ck.tensors.push_back(detail::named<T>(name, t->shape(), t->values()));
  for (std::size_t b = 0; b < model.backbone.blocks.size(); ++b) {
    const auto& blk = model.backbone.blocks[b];
    const std::string p = "block" + std::to_string(b) + ".";
    ck.tensors.push_back(detail::named<T>(p + "running_mean", {blk.running_mean.size()}, blk.running_mean));
    ck.tensors.push_back(detail::named<T>(p + "running_var", {blk.running_var.size()}, blk.running_var));
  }
  NamedTensor classes{"head.classes", {model.base_classes.size()}, {}};
  for (auto c : model.base_classes) classes.values.push_back(static_cast<float>(c));
  ck.tensors.push_back(std::move(classes));
  return ck;
}

/// Rebuilds a model with the architecture of `cfg` from checkpoint tensors.
template <std::floating_point T>
Model<T> model_from_checkpoint(const CheckpointFile& ck, const Config& cfg) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : ck.tensors) by_name[t.name] = &t;
  auto find = [&](const std::string& name) -> const NamedTensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint lacks tensor '" + name + "'");
    return *it->second;
  };
  const auto& classes = find("head.classes");
  std::vector<std::size_t> base;
  for (float v : classes.values) base.push_back(static_cast<std::size_t>(v));
  Rng rng(0);
  Model<T> m = init_model<T>(cfg, base, rng);
  for (const auto& [name, t] : m.trainable()) {
    const auto& src = find(name);
    if (src.dims != t->shape()) {
      throw DataError("checkpoint tensor '" + name + "' has shape " + shape_str(src.dims) + ", config expects " +
                      shape_str(t->shape()));
    }
    *t = Tensor<T>(t->shape(), std::vector<T>(src.values.begin(), src.values.end()), true);
  }
  for (std::size_t b = 0; b < m.backbone.blocks.size(); ++b) {
    auto& blk = m.backbone.blocks[b];
    const std::string p = "block" + std::to_string(b) + ".";
    const auto& mu = find(p + "running_mean");
    const auto& var = find(p + "running_var");
    if (mu.values.size() != blk.running_mean.size() || var.values.size() != blk.running_var.size()) {
      throw DataError("checkpoint running statistics of block " + std::to_string(b) + " do not match the config");
    }
    blk.running_mean.assign(mu.values.begin(), mu.values.end());
    blk.running_var.assign(var.values.begin(), var.values.end());
  }
  return m;
}

template <std::floating_point T>
void save_checkpoint(const std::filesystem::path& path, Model<T>& model, std::uint64_t config_digest) {
  write_checkpoint_file(path, model_to_checkpoint(model, config_digest));
}

template <std::floating_point T>
Model<T> load_checkpoint(const std::filesystem::path& path, const Config& cfg) {
  return model_from_checkpoint<T>(read_checkpoint_file(path), cfg);
}

}  // namespace mlcn
