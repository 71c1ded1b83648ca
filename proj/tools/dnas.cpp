#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include "dnas/errors.hpp"
#include "dnas/experiment.hpp"

namespace fs = std::filesystem;
using namespace dnas;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kDivergence = 3, kIo = 4 };

int thread_count() {
  if (const char* env = std::getenv("DNAS_THREADS")) {
    try {
      return std::max(1, std::stoi(env));
    } catch (const std::exception&) {
      throw ConfigError("DNAS_THREADS: expected a positive integer");
    }
  }
  return 1;
}

ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed, const std::string& out) {
  ExperimentConfig c = ExperimentConfig::load(path);
  if (seed) c.seed = *seed;
  if (!out.empty()) c.out = out;
  c.validate();
  return c;
}

std::ofstream open_out(const fs::path& path) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  return os;
}

void report_run(const ExperimentConfig& c, const RunOutcome& o) {
  std::cout << "wrote " << c.out << "/metrics.csv (" << o.result.metrics.size() << " epochs)\n";
  std::cout << "final val mIoU " << std::setprecision(6) << o.result.final_val_miou << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable architecture search on a synthetic segmentation task"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  std::string config_path, out_dir, checkpoint_path, fractions = "0,0.1,0.2,0.3", axis, seeds = "0,1,2",
                                                      pool = "validation";
  std::optional<std::uint64_t> seed;
  std::optional<int> finetune_budget;

  auto* search = app.add_subcommand("search", "run the single-stage protocol");
  search->add_option("--config", config_path, "experiment config (JSON)")->required();
  search->add_option("--seed", seed, "override the config seed");
  search->add_option("--out", out_dir, "output directory");

  auto* sweep = app.add_subcommand("prune-sweep", "discretization sweep over edge pruning fractions");
  sweep->add_option("--checkpoint", checkpoint_path, "trained checkpoint")->required();
  sweep->add_option("--fractions", fractions, "comma-separated fractions");
  sweep->add_option("--finetune-budget", finetune_budget, "post-decoding fine-tune epochs (0 disables)");
  sweep->add_option("--out", out_dir, "output directory (default: next to the checkpoint)");

  auto* eigen = app.add_subcommand("eigen-trace", "search with dominant-eigenvalue tracking");
  eigen->add_option("--config", config_path, "experiment config (JSON)")->required();
  eigen->add_option("--seed", seed, "override the config seed");
  eigen->add_option("--out", out_dir, "output directory");

  auto* ablate = app.add_subcommand("ablate", "grid of runs over one axis and several seeds");
  ablate->add_option("--config", config_path, "base experiment config (JSON)")->required();
  ablate->add_option("--axis", axis, "entropy-magnitudes | scaling-functions | splits")->required();
  ablate->add_option("--seeds", seeds, "comma-separated seeds");
  ablate->add_option("--out", out_dir, "output directory");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint and print its cost");
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint")->required();
  eval->add_option("--pool", pool, "fine_train | coarse_train | validation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (search->parsed() || eigen->parsed()) {
      ExperimentConfig c = load_config(config_path, seed, out_dir);
      if (eigen->parsed()) c.curvature.enabled = true;
      c.validate();
      const RunOutcome o = run_experiment(c);
      write_run_outputs(c, o);
      report_run(c, o);
      if (eigen->parsed()) std::cout << "wrote " << c.out << "/eigen.csv (" << o.trace.epochs.size() << " rows)\n";
    } else if (sweep->parsed()) {
      LoadedModel m = load_model(checkpoint_path);
      const auto fr = parse_double_list(fractions);
      const int budget = finetune_budget ? *finetune_budget : m.config.finetune_budget();
      if (budget < 0) throw ConfigError("--finetune-budget: must be >= 0");
      const DataPools data = generate(m.config.data, m.config.resolved_data_seed());
      const auto reports = run_prune_sweep(m, data, fr, budget);
      const fs::path dir = out_dir.empty() ? fs::path(checkpoint_path).parent_path() : fs::path(out_dir);
      auto os = open_out(dir / "prune_report.csv");
      write_csv_header(os, m.config, "prune-sweep");
      write_prune_csv(os, reports);
      std::cout << "wrote " << (dir / "prune_report.csv").string() << " (" << reports.size() << " rows)\n";
    } else if (ablate->parsed()) {
      ExperimentConfig c = load_config(config_path, std::nullopt, out_dir);
      const auto grid = ablation_grid(c, parse_axis(axis));
      const auto runs = run_ablation(grid, parse_seed_list(seeds), thread_count());
      auto os = open_out(fs::path(c.out) / "ablation.csv");
      write_csv_header(os, c, "ablate " + axis);
      write_ablation_csv(os, grid, runs);
      std::cout << "wrote " << (fs::path(c.out) / "ablation.csv").string() << " (" << runs.size() << " runs)\n";
    } else if (eval->parsed()) {
      if (pool != "fine_train" && pool != "coarse_train" && pool != "validation")
        throw ConfigError("--pool: expected fine_train, coarse_train or validation, got '" + pool + "'");
      LoadedModel m = load_model(checkpoint_path);
      const DataPools data = generate(m.config.data, m.config.resolved_data_seed());
      const auto& samples = pool == "fine_train" ? data.fine_train
                            : pool == "coarse_train" ? data.coarse_train
                                                     : data.validation;
      const double v = evaluate_miou(m.net, samples, m.config.train.eval_batch);
      const ModelCost cost = count_flops_params(m.config.model, m.config.data.height, m.config.data.width);
      std::cout << std::setprecision(17) << "pool " << pool << "\nmiou " << v << "\nflops " << cost.flops
                << "\nparams " << cost.params << "\narch_params " << cost.arch_params << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged at step " << e.step() << ": " << e.what() << '\n';
    return kDivergence;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kOk;
}
