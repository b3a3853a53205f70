// bvme_cli run --config exp.json
// bvme_cli sweep --config exp.json --axis r
// bvme_cli report --dir results/

#include <CLI11.hpp>

#include <iostream>

#include "bvme/errors.hpp"
#include "bvme/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Bandwidth-constrained message encoding experiments"};
  app.require_subcommand(1);

  std::string config_path, axis, out_dir, report_dir;

  auto* run = app.add_subcommand("run", "train every seed of one configuration");
  run->add_option("--config", config_path, "experiment config (JSON)")->required();
  run->add_option("--out", out_dir, "override output.dir");

  auto* sweep = app.add_subcommand("sweep", "run one configuration per axis value");
  sweep->add_option("--config", config_path, "base experiment config (JSON)")->required();
  sweep->add_option("--axis", axis, "r | lambda_sigma | coupling | backbone")->required();
  sweep->add_option("--out", out_dir, "override output.dir");

  auto* rep = app.add_subcommand("report", "tabulate every summary.json under a directory");
  rep->add_option("--dir", report_dir, "results directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*rep) {
      std::cout << bvme::report(report_dir);
      return 0;
    }
    bvme::ExperimentConfig cfg = bvme::load_config(config_path);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    if (*run) {
      const auto result = bvme::run_experiment(cfg);
      std::cout << "auc " << result.auc << " +- " << result.auc_stderr << "\nfinal_success " << result.final_success
                << " +- " << result.final_stderr << '\n';
    } else {
      std::cout << bvme::sweep_csv(bvme::run_sweep(cfg, axis));
    }
  } catch (const bvme::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
