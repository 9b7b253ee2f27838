// fairwell - command-line front end
//
//   fairwell synth    --config cfg.json --out data.jsonl
//   fairwell pretrain --config cfg.json --data data.jsonl --out run/
//   fairwell evaluate --run run/ --data data.jsonl
//   fairwell pareto   run1/ run2/ ... [--out dir]
//
// Exit codes: 0 success, 2 usage/config error, 3 numeric abort,
// 4 data precondition failure.
#include <CLI11.hpp>

#include "fairwell/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"FAIRWELL: subject-aware multimodal SSL with fairness evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(fairwell::kVersion));

  fairwell::CliOptions cli;
  uint64_t seed_flag = 0;

  std::string config_path, data_path, out_path, run_dir;
  std::vector<std::string> run_dirs;
  std::string method_flag, pooling_flag;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_flag("--quiet", cli.quiet, "suppress progress output");
    cmd->add_option("--seed", seed_flag, "seed override (beats config and FAIRWELL_SEED)");
  };

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic JSONL dataset");
  synth->add_option("--config", config_path, "SynthConfig JSON file")->required();
  synth->add_option("--out", out_path, "output JSONL path")->required();
  add_common(synth);

  CLI::App* pretrain = app.add_subcommand("pretrain", "self-supervised encoder pretraining");
  pretrain->add_option("--config", config_path, "train config JSON file")->required();
  pretrain->add_option("--data", data_path, "JSONL dataset")->required();
  pretrain->add_option("--out", out_path, "run directory")->required();
  pretrain->add_option("--method", method_flag, "method override (vicreg|m1|m2|m3|m4)");
  pretrain->add_option("--pooling", pooling_flag, "pooling override (none|single|double)");
  add_common(pretrain);

  CLI::App* evaluate = app.add_subcommand("evaluate", "probe, predict and score a run");
  evaluate->add_option("--run", run_dir, "run directory from pretrain")->required();
  evaluate->add_option("--data", data_path, "JSONL dataset")->required();
  add_common(evaluate);

  CLI::App* pareto = app.add_subcommand("pareto", "Pareto front over evaluated runs");
  pareto->add_option("runs", run_dirs, "evaluated run directories")->required();
  pareto->add_option("--out", out_path, "output directory (default .)");
  add_common(pareto);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : fairwell::kExitConfig;
  }

  if (synth->count("--seed") || pretrain->count("--seed") || evaluate->count("--seed") ||
      pareto->count("--seed"))
    cli.seed = seed_flag;
  if (!method_flag.empty()) cli.method = method_flag;
  if (!pooling_flag.empty()) cli.pooling = pooling_flag;

  if (synth->parsed()) return fairwell::cmd_synth(config_path, out_path, cli);
  if (pretrain->parsed()) return fairwell::cmd_pretrain(config_path, data_path, out_path, cli);
  if (evaluate->parsed()) return fairwell::cmd_evaluate(run_dir, data_path, cli);
  if (pareto->parsed())
    return fairwell::cmd_pareto(run_dirs, out_path.empty() ? "." : out_path, cli);
  return fairwell::kExitConfig;
}
