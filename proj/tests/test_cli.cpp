#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "fixtures.hpp"
#include "mlcn/checkpoint.hpp"
#include "mlcn/commands.hpp"
#include "test_util.hpp"

using namespace mlcn;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

/// Runs the CLI with stdout and stderr merged.
Run cli(const std::string& args) {
  const std::string cmd = std::string("\"") + MLCN_CLI_PATH + "\" " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p)) r.output += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

/// Scratch dir holding a tiny dataset and a tiny config.
struct Workspace {
  fs::path dir, data, config;

  explicit Workspace(const std::string& name, Config cfg = mlcn::testing::tiny_config()) {
    dir = mlcn::testing::scratch_dir("cli_" + name);
    data = save_dataset(mlcn::testing::tiny_dataset(), dir / "data");
    config = dir / "tiny.cfg";
    std::ofstream(config) << cfg.serialize();
  }

  std::string base_args(const std::string& out) const {
    return "--config " + config.string() + " --data " + data.string() + " --out " + (dir / out).string();
  }
};

}  // namespace

TEST(Config, ParseSerializeParseIsIdentity) {
  Config cfg = mlcn::testing::tiny_config();
  cfg.loss.denominator = ContrastiveDenominator::kFixedQuery;
  cfg.loss.self_axis = SelfSoftmaxAxis::kChannel;
  cfg.loss.alpha = 0.1 + 0.2;
  cfg.eval.w_pc = 2;
  cfg.ablation_rows = {"ce", "ce+pc"};
  const Config once = parse_config(cfg.serialize());
  EXPECT_EQ(once, cfg);
  EXPECT_EQ(parse_config(once.serialize()), once);
  EXPECT_EQ(parse_config(Config{}.serialize()), Config{});
}

TEST(Config, UnknownKeyAndBadValueAreConfigErrors) {
  EXPECT_THROW(parse_config("loss.delta = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("loss.alpha = abc\n"), ConfigError);
  EXPECT_THROW(parse_config("optim.lr = 0\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/x.cfg"), ConfigError);
}

TEST(CliTrain, WritesManifestCheckpointAndLoss) {
  Workspace ws("train");
  const auto r = cli("train " + ws.base_args("out"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(ws.dir / "out" / "model.ckpt"));
  EXPECT_EQ(line_count(ws.dir / "out" / "loss.csv"), 1u + 3);
  const auto manifest = slurp(ws.dir / "out" / "run_manifest.txt");
  EXPECT_NE(manifest.find("command=train"), std::string::npos);
  EXPECT_NE(manifest.find("seed=11"), std::string::npos);
  EXPECT_LE(fs::last_write_time(ws.dir / "out" / "run_manifest.txt"), fs::last_write_time(ws.dir / "out" / "loss.csv"));
}

TEST(CliTrain, RerunGivesIdenticalLossCsv) {
  Workspace ws("train_rerun");
  ASSERT_EQ(cli("train " + ws.base_args("a")).code, 0);
  ASSERT_EQ(cli("train " + ws.base_args("b")).code, 0);
  EXPECT_EQ(slurp(ws.dir / "a" / "loss.csv"), slurp(ws.dir / "b" / "loss.csv"));
  EXPECT_EQ(slurp(ws.dir / "a" / "model.ckpt"), slurp(ws.dir / "b" / "model.ckpt"));
}

TEST(CliTrain, ExitCodes) {
  Workspace ws("train_codes");
  auto r = cli("train --config " + (ws.dir / "missing.cfg").string() + " --data " + ws.data.string() + " --out " +
               (ws.dir / "o").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find((ws.dir / "missing.cfg").string()), std::string::npos) << r.output;

  r = cli("train --config " + ws.config.string() + " --data " + (ws.dir / "nope.txt").string() + " --out " +
          (ws.dir / "o").string());
  EXPECT_EQ(r.code, 3) << r.output;

  auto diverge = mlcn::testing::tiny_config();
  diverge.optim.lr = 1e30;
  diverge.optim.episodes_per_epoch = 20;
  Workspace bad("train_diverge", diverge);
  r = cli("train " + bad.base_args("o"));
  EXPECT_EQ(r.code, 4) << r.output;

  EXPECT_EQ(cli("train --config " + ws.config.string()).code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("--help").code, 0);
}

TEST(CliEval, SingleEpisodeAndDeterminism) {
  Workspace ws("eval");
  ASSERT_EQ(cli("train " + ws.base_args("t")).code, 0);
  const std::string ck = " --checkpoint " + (ws.dir / "t" / "model.ckpt").string();
  auto r = cli("eval " + ws.base_args("e1") + ck + " --episodes 1");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(line_count(ws.dir / "e1" / "eval_episodes.csv"), 2u);
  const auto summary = slurp(ws.dir / "e1" / "eval_summary.csv");
  EXPECT_EQ(summary.substr(0, summary.find('\n')), "split,n_way,k_shot,n_query,mean_acc,ci95,episodes,seed");
  EXPECT_NE(summary.find(",1,11\n"), std::string::npos) << summary;

  ASSERT_EQ(cli("eval " + ws.base_args("a") + ck + " --episodes 200").code, 0);
  ASSERT_EQ(cli("eval " + ws.base_args("b") + ck + " --episodes 200").code, 0);
  EXPECT_EQ(slurp(ws.dir / "a" / "eval_summary.csv"), slurp(ws.dir / "b" / "eval_summary.csv"));
  EXPECT_EQ(slurp(ws.dir / "a" / "eval_episodes.csv"), slurp(ws.dir / "b" / "eval_episodes.csv"));
  EXPECT_EQ(cli("eval " + ws.base_args("z") + ck + " --episodes 0").code, 2);
}

TEST(CliEval, UntrainedCheckpointIsAtChanceOnLabelFreeData) {
  // Labels assigned independently of the pixels: no predictor can beat 1/N.
  const auto dir = mlcn::testing::scratch_dir("cli_chance");
  SynthSpec s;
  s.classes = 10;
  s.novel_classes = 10;
  s.images_per_class = 40;
  s.image_size = 8;
  auto ds = generate_synthetic(s);
  Rng shuffle(99);
  std::vector<std::size_t> labels;
  for (const auto& im : ds.images) labels.push_back(im.label);
  for (std::size_t i = labels.size(); i > 1; --i) std::swap(labels[i - 1], labels[shuffle.below(i)]);
  for (std::size_t i = 0; i < labels.size(); ++i) ds.images[i].label = labels[i];
  const auto data = save_dataset(ds, dir / "data");

  auto cfg = mlcn::testing::tiny_config();
  cfg.eval.shape = {5, 1, 15};
  std::ofstream(dir / "c.cfg") << cfg.serialize();
  Rng rng(5);
  auto model = init_model<float>(cfg, {100, 101}, rng);
  save_checkpoint(dir / "m.ckpt", model, cfg.digest());
  const auto r = cli("eval --config " + (dir / "c.cfg").string() + " --data " + data.string() + " --checkpoint " +
                     (dir / "m.ckpt").string() + " --out " + (dir / "e").string() + " --episodes 300");
  ASSERT_EQ(r.code, 0) << r.output;
  std::istringstream in(slurp(dir / "e" / "eval_summary.csv"));
  std::string header, row, cell;
  std::getline(in, header);
  std::getline(in, row);
  std::vector<std::string> cells;
  std::istringstream rs(row);
  while (std::getline(rs, cell, ',')) cells.push_back(cell);
  ASSERT_EQ(cells.size(), 8u);
  EXPECT_NEAR(std::stod(cells[4]), 20.0, 4.0) << row;
}

TEST(CliAblate, FullGridSingleRowAndRerun) {
  Workspace ws("ablate");
  auto r = cli("ablate " + ws.base_args("full"));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto csv = slurp(ws.dir / "full" / "ablation.csv");
  EXPECT_EQ(line_count(ws.dir / "full" / "ablation.csv"), 1u + 5);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "row_id,flags,n_way,k_shot,mean_acc,ci95,episodes,seed");
  EXPECT_EQ(line_count(ws.dir / "full" / "ablation.txt"), 5u);

  ASSERT_EQ(cli("ablate " + ws.base_args("one") + " --rows ce+sc").code, 0);
  EXPECT_EQ(line_count(ws.dir / "one" / "ablation.csv"), 2u);

  ASSERT_EQ(cli("ablate " + ws.base_args("again")).code, 0);
  EXPECT_EQ(slurp(ws.dir / "again" / "ablation.csv"), csv);
  EXPECT_EQ(cli("ablate " + ws.base_args("bad") + " --rows sc").code, 2);
}

TEST(CliGradcheck, PassFailAndStableReport) {
  const auto a = cli("gradcheck --seed 3");
  EXPECT_EQ(a.code, 0) << a.output;
  EXPECT_NE(a.output.find("28/28 checks passed"), std::string::npos);
  EXPECT_EQ(cli("gradcheck --seed 3").output, a.output);
  EXPECT_EQ(cli("gradcheck --tolerance 1e-15").code, 5);
  EXPECT_EQ(cli("gradcheck --tolerance -1").code, 2);
}

TEST(CliSynth, ClassesModesAndDigest) {
  const auto dir = mlcn::testing::scratch_dir("cli_synth");
  std::ofstream(dir / "s.spec") << "classes = 8\nimages_per_class = 4\nimage_size = 8\nbackground_mode = none\n";
  const auto a = cli("synth --spec " + (dir / "s.spec").string() + " --out " + (dir / "a").string());
  ASSERT_EQ(a.code, 0) << a.output;
  const auto ds = load_dataset(dir / "a" / "manifest.txt");
  EXPECT_EQ(ds.classes(Split::kBase).size(), 8u);
  for (const auto& im : ds.images) EXPECT_EQ(im.background, -1);
  const auto b = cli("synth --spec " + (dir / "s.spec").string() + " --out " + (dir / "b").string());
  EXPECT_EQ(dataset_digest(load_dataset(dir / "b" / "manifest.txt")), dataset_digest(ds));
  EXPECT_EQ(a.output.substr(a.output.find("digest")), b.output.substr(b.output.find("digest")));

  std::ofstream(dir / "bad.spec") << "classes = 0\n";
  EXPECT_EQ(cli("synth --spec " + (dir / "bad.spec").string() + " --out " + (dir / "c").string()).code, 2);
}

TEST(CliExportAttention, MapsAreDistributions) {
  Workspace ws("export");
  ASSERT_EQ(cli("train " + ws.base_args("t")).code, 0);
  const auto r = cli("export-attention " + ws.base_args("x") + " --checkpoint " + (ws.dir / "t" / "model.ckpt").string());
  ASSERT_EQ(r.code, 0) << r.output;
  std::size_t maps = 0;
  for (const auto& entry : fs::directory_iterator(ws.dir / "x")) {
    if (entry.path().extension() != ".csv") continue;
    ++maps;
    const auto grid = read_csv_grid(entry.path());
    ASSERT_EQ(grid.size(), 4u);
    double total = 0;
    for (const auto& row : grid)
      for (double v : row) total += v;
    // Cross maps sum to 1; channel-averaged self maps too.
    EXPECT_NEAR(total, 1.0, 1e-6) << entry.path();
  }
  // 3 supports + 6 queries self maps, plus two cross maps per support.
  EXPECT_EQ(maps, 9u + 6u);
  EXPECT_EQ(line_count(ws.dir / "x" / "attention_manifest.txt"), 15u);
}
