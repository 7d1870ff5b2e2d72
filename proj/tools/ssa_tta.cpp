// Command-line front end:
//   ssa-tta run <config.json> [--seeds 0,1,2] [--set path=value ...] [--dry-run]
//   ssa-tta inspect <checkpoint.json> <dataset.csv>
//
// Exit codes: 0 success, 1 configuration error, 2 divergence, 3 I/O error,
// 4 any other failure.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ssa/errors.hpp"
#include "ssa/experiment.hpp"

namespace {

enum ExitCode { kOk = 0, kConfig = 1, kDivergence = 2, kIo = 3, kInternal = 4 };

int run_command(const std::string& config_path, const std::string& seeds,
                const std::vector<std::string>& overrides, bool dry_run) {
  auto tree = ssa::load_config_file(config_path);
  for (const auto& assignment : overrides) ssa::apply_override(tree, assignment);
  if (!seeds.empty()) tree["seeds"] = ssa::parse_seed_list(seeds);
  if (const char* dir = std::getenv("SSA_TTA_OUTPUT_DIR"); dir && *dir) tree["output_dir"] = dir;

  const auto base = std::filesystem::absolute(config_path).parent_path();
  const auto cfg = ssa::parse_experiment_config(tree, base);
  if (dry_run) {
    std::cout << ssa::describe_plan(cfg);
    return kOk;
  }

  const auto result = ssa::run_experiment(cfg, true);
  std::cout << ssa::summary_csv_text(result.records);
  std::cout << "wrote " << cfg.output_dir.string() << '\n';
  return result.any_diverged ? kDivergence : kOk;
}

int inspect_command(const std::string& checkpoint, const std::string& dataset) {
  const auto model = ssa::RegressionModel::load(checkpoint);
  const auto data = ssa::read_numeric_csv(dataset, "label");
  ssa::print_inspection(ssa::inspect_model(model, data.inputs), std::cout);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Test-time adaptation for regression by significant-subspace feature alignment"};
  app.require_subcommand(1);

  std::string config_path, seeds;
  std::vector<std::string> overrides;
  bool dry_run = false;
  auto* run = app.add_subcommand("run", "Train, adapt, evaluate and write reports");
  run->add_option("config", config_path, "JSON experiment config")->required();
  run->add_option("--seeds", seeds, "Comma-separated adaptation seeds, e.g. 0,1,2");
  run->add_option("--set", overrides, "Override a config value: path.to.key=value")
      ->allow_extra_args(false);
  run->add_flag("--dry-run", dry_run, "Validate and print the resolved plan without writing");

  std::string checkpoint, dataset;
  auto* inspect = app.add_subcommand("inspect", "Feature-space diagnostics of a checkpoint");
  inspect->add_option("checkpoint", checkpoint, "Model checkpoint (JSON)")->required();
  inspect->add_option("dataset", dataset, "Numeric CSV with a header; a 'label' column is ignored")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*run) return run_command(config_path, seeds, overrides, dry_run);
    return inspect_command(checkpoint, dataset);
  } catch (const ssa::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const ssa::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kConfig;
  } catch (const ssa::DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kDivergence;
  } catch (const ssa::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInternal;
  }
}
