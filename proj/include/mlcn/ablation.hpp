#pragma once

#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "mlcn/trainer.hpp"

namespace mlcn {

/// Loss terms of one ablation row, written like "ce+sc+pc".
inline Branches parse_ablation_flags(const std::string& row) {
  Branches b;
  bool ce = false;
  for (const auto& part : detail::split(row, '+')) {
    if (part == "ce") ce = true;
    else if (part == "sc") b.sc = true;
    else if (part == "cc") b.cc = true;
    else if (part == "pc") b.pc = true;
    else throw ConfigError("ablation row '" + row + "' has unknown term '" + part + "'");
  }
  if (!ce) throw ConfigError("ablation row '" + row + "' must include ce");
  return b;
}

struct AblationRow {
  std::size_t row_id = 0;
  std::string flags;
  EvalSummary summary;
};

/// "65.54 ± 0.44".
inline std::string format_mean_ci(double mean, double ci) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f ± %.2f", mean, ci);
  return buf;
}

/// Trains one model per row on the base split and evaluates each on the same
/// novel episodes.
template <std::floating_point T>
std::vector<AblationRow> run_ablation(const Config& cfg, const Dataset& ds, const std::vector<std::string>& rows,
                                      const std::function<void(const std::string&)>& log = {}) {
  std::vector<AblationRow> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Branches flags = parse_ablation_flags(rows[i]);
    Config row_cfg = cfg;
    row_cfg.loss.use_sc = flags.sc;
    row_cfg.loss.use_cc = flags.cc;
    row_cfg.loss.use_pc = flags.pc;
    if (log) log("training row " + std::to_string(i + 1) + " (" + rows[i] + ")");
    auto trained = train<T>(row_cfg, ds);
    const auto summary =
        evaluate(trained.model, ds, Split::kNovel, row_cfg, row_cfg.eval.episodes, row_cfg.eval.shape, row_cfg.seed);
    if (log) log("row " + std::to_string(i + 1) + " (" + rows[i] + "): " + format_mean_ci(summary.mean, summary.ci95));
    out.push_back({i + 1, rows[i], summary});
  }
  return out;
}

inline constexpr const char* kAblationCsvHeader = "row_id,flags,n_way,k_shot,mean_acc,ci95,episodes,seed";

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows, const EpisodeShape& shape,
                               std::uint64_t seed) {
  os << kAblationCsvHeader << "\n";
  for (const auto& r : rows) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%s,%zu,%zu,%.2f,%.2f,%zu,%llu", r.row_id, r.flags.c_str(), shape.way,
                  shape.shot, r.summary.mean, r.summary.ci95, r.summary.episodes,
                  static_cast<unsigned long long>(seed));
    os << buf << "\n";
  }
}

/// Human-readable table, one "flags | mean ± ci" line per row.
inline void write_ablation_table(std::ostream& os, const std::vector<AblationRow>& rows) {
  std::size_t width = 5;
  for (const auto& r : rows) width = std::max(width, r.flags.size());
  for (const auto& r : rows) {
    std::string flags = r.flags;
    for (auto& ch : flags) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    flags.resize(width, ' ');
    os << flags << " | " << format_mean_ci(r.summary.mean, r.summary.ci95) << "\n";
  }
}

}  // namespace mlcn
