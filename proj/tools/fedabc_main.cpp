#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedabc/common.hpp"
#include "fedabc/config.hpp"
#include "fedabc/experiment.hpp"

namespace {

void run_command(const std::string& config_path, const std::vector<std::string>& overrides) {
  const fedabc::ExperimentConfig cfg = fedabc::parse_config(config_path, overrides);
  const fedabc::RunOutput out = fedabc::run_experiment(cfg);

  double pfl_sum = 0.0;
  double drift_sum = 0.0;
  for (const auto& sr : out.seed_runs) {
    pfl_sum += sr.metrics.back().pfl_accuracy;
    drift_sum += sr.metrics.back().drift_score;
  }
  const auto n = static_cast<double>(out.seed_runs.size());
  std::printf("%s alpha=%g: final pfl_acc %.4f, drift %.4f (%zu seeds x %d rounds)\n",
              cfg.strategy.name().c_str(), cfg.partition.alpha, pfl_sum / n, drift_sum / n,
              out.seed_runs.size(), cfg.federation.rounds);
  const std::filesystem::path dir(cfg.output_dir);
  std::printf("wrote %s\n", (dir / "metrics.csv").string().c_str());
  std::printf("wrote %s\n", (dir / "partition_manifest.txt").string().c_str());
  std::printf("wrote %s\n", (dir / "config_resolved.txt").string().c_str());
  for (const auto& sr : out.seed_runs) {
    std::printf(
        "wrote %s\n",
        (dir / ("checkpoint_seed" + std::to_string(sr.seed) + ".bin")).string().c_str());
  }
}

void compare_command(const std::vector<std::string>& dirs) {
  const std::vector<fedabc::ComparisonRow> rows = fedabc::compare_runs(dirs);
  std::fputs(fedabc::comparison_table(rows).c_str(), stdout);
  fedabc::detail::write_text_file("comparison.csv", fedabc::comparison_csv(rows));
  std::printf("wrote comparison.csv\n");
}

void ablation_command(const std::string& config_path,
                      const std::vector<std::string>& overrides) {
  const fedabc::ExperimentConfig cfg = fedabc::parse_config(config_path, overrides);
  const fedabc::AblationOutput out = fedabc::run_ablation(cfg);
  for (const fedabc::AblationArm& arm : out.arms) {
    double pfl_sum = 0.0;
    for (const auto& sr : arm.output.seed_runs) pfl_sum += sr.metrics.back().pfl_accuracy;
    std::printf("us%d_hm%d: final pfl_acc %.4f\n", arm.undersampling ? 1 : 0,
                arm.hard_mining ? 1 : 0,
                pfl_sum / static_cast<double>(arm.output.seed_runs.size()));
  }
  std::printf("full minus both-off (final pfl_acc): %+.6f\n", out.full_minus_off);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedabc: personalized federated learning simulator"};
  app.set_version_flag("--version", std::string(fedabc::kVersion));
  app.require_subcommand(1);

  std::string run_config_path;
  std::vector<std::string> run_overrides;
  CLI::App* run = app.add_subcommand("run", "Run the configured experiment over its seeds");
  run->add_option("--config", run_config_path, "Dotted-key config file")->required();
  run->add_option("overrides", run_overrides, "key=value overrides applied after the file");

  std::vector<std::string> compare_dirs;
  CLI::App* compare =
      app.add_subcommand("compare", "Summarize stored run directories side by side");
  compare->add_option("dirs", compare_dirs, "Run directories containing metrics.csv")
      ->required();

  std::string ablation_config_path;
  std::vector<std::string> ablation_overrides;
  CLI::App* ablation = app.add_subcommand(
      "ablation", "Run the 2x2 under-sampling x hard-mining grid for the config");
  ablation->add_option("--config", ablation_config_path, "Dotted-key config file")->required();
  ablation->add_option("overrides", ablation_overrides,
                       "key=value overrides applied after the file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // bad usage is a configuration problem
  }

  try {
    if (run->parsed()) {
      run_command(run_config_path, run_overrides);
    } else if (compare->parsed()) {
      compare_command(compare_dirs);
    } else {
      ablation_command(ablation_config_path, ablation_overrides);
    }
    return 0;
  } catch (const fedabc::ConfigError& e) {
    std::fprintf(stderr, "fedabc: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fedabc: %s\n", e.what());
    return 3;
  }
}
