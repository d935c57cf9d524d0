#include <CLI11.hpp>

#include "mlcn/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Multi-level correlation few-shot classifier"};
  app.require_subcommand(1);

  mlcn::TrainArgs train;
  auto* t = app.add_subcommand("train", "Episodic training on the base split");
  t->add_option("--config", train.config, "Config file")->required();
  t->add_option("--data", train.data, "Dataset manifest")->required();
  t->add_option("--out", train.out, "Output directory")->required();

  mlcn::EvalArgs eval;
  std::size_t episodes = 0;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on novel episodes");
  e->add_option("--config", eval.config, "Config file")->required();
  e->add_option("--data", eval.data, "Dataset manifest")->required();
  e->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
  e->add_option("--out", eval.out, "Output directory")->required();
  auto* ep_opt = e->add_option("--episodes", episodes, "Override eval.episodes");

  mlcn::AblateArgs ablate;
  auto* a = app.add_subcommand("ablate", "Train and evaluate the loss-term grid");
  a->add_option("--config", ablate.config, "Config file")->required();
  a->add_option("--data", ablate.data, "Dataset manifest")->required();
  a->add_option("--out", ablate.out, "Output directory")->required();
  a->add_option("--rows", ablate.rows, "Rows such as ce ce+sc (default: ablation.rows)");

  mlcn::GradcheckArgs grad;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  g->add_option("--seed", grad.seed, "Seed")->capture_default_str();
  g->add_option("--tolerance", grad.tolerance, "Maximum relative error")->capture_default_str();

  mlcn::SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic background-shift dataset");
  s->add_option("--spec", synth.spec, "Synth spec file")->required();
  s->add_option("--out", synth.out, "Output directory")->required();

  mlcn::ExportArgs exp;
  auto* x = app.add_subcommand("export-attention", "Export attention maps of one novel episode");
  x->add_option("--config", exp.config, "Config file")->required();
  x->add_option("--data", exp.data, "Dataset manifest")->required();
  x->add_option("--checkpoint", exp.checkpoint, "Checkpoint file")->required();
  x->add_option("--out", exp.out, "Output directory")->required();
  x->add_option("--episode", exp.episode, "Episode index")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  if (*t) return mlcn::cmd_train(train);
  if (*e) {
    if (*ep_opt) eval.episodes = episodes;
    return mlcn::cmd_eval(eval);
  }
  if (*a) return mlcn::cmd_ablate(ablate);
  if (*g) return mlcn::cmd_gradcheck(grad);
  if (*s) return mlcn::cmd_synth(synth);
  if (*x) return mlcn::cmd_export_attention(exp);
  return 2;
}
