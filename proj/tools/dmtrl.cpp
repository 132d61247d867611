#include <string>

#include "CLI11.hpp"

#include "dmtrl/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Multi-task networks with tensor-factorised weight sharing"};
  app.require_subcommand(1);

  std::string config, out, checkpoint, data;

  auto* train = app.add_subcommand("train", "Pretrain, initialise and train one configured model");
  train->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split of a data source");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file with manifest.json beside it")->required();
  eval->add_option("--data", data, "Data source (JSON)")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", out, "Results CSV")->required();

  auto* measure = app.add_subcommand("measure", "Report per-layer sharing strength of a checkpoint");
  measure->add_option("--checkpoint", checkpoint, "Checkpoint file with manifest.json beside it")->required();
  measure->add_option("--out", out, "Report JSON")->required();

  auto* sweep = app.add_subcommand("sweep", "Run the fractions x repeats x presets grid of a config");
  sweep->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  if (*train) return dmtrl::cmd_train(config, out);
  if (*eval) return dmtrl::cmd_eval(checkpoint, data, out);
  if (*measure) return dmtrl::cmd_measure(checkpoint, out);
  return dmtrl::cmd_sweep(config);
}
