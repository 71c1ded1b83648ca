#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dnas/checkpoint.hpp"
#include "dnas/curvature.hpp"
#include "dnas/data.hpp"
#include "dnas/discretization.hpp"
#include "dnas/protocol.hpp"
#include "dnas/regularizer.hpp"
#include "dnas/supernet.hpp"

namespace dnas {

inline constexpr const char* kVersion = "0.1.0";

struct CurvatureConfig {
  bool enabled = false;
  TraceConfig trace;
};

struct ExperimentConfig {
  std::string preset = "tiny";
  SupernetConfig model = SupernetConfig::preset("tiny");
  PhasePlan plan;
  EntropySchedule entropy;
  SplitPolicy split;
  TrainOptions train;
  DataConfig data;
  CurvatureConfig curvature;
  /// Post-decoding fine-tune budget in epochs; unset means 10% of total epochs.
  std::optional<int> finetune_epochs;
  std::uint64_t seed = 0;
  /// Dataset seed; unset means derived from `seed`.
  std::optional<std::uint64_t> data_seed;
  std::string out = "runs/default";

  std::uint64_t resolved_data_seed() const;

  /// Throws ConfigError naming the field.
  void validate() const;
  int finetune_budget() const;
  /// Canonical JSON text of the fully resolved configuration.
  std::string to_json() const;
  std::string to_json_line() const;

  /// Strict parse: unknown keys and wrong types raise ConfigError.
  static ExperimentConfig from_json(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
};

/// "# dnas <version>" and "# config: {...}" lines.
void write_csv_header(std::ostream& os, const ExperimentConfig& config, const std::string& kind);
void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows);
void write_timing_csv(std::ostream& os, const std::vector<MetricsRow>& rows);

struct RunOutcome {
  TrainResult result;
  EigenTrace trace;
  Checkpoint final_checkpoint;
  std::optional<Checkpoint> best_checkpoint;
  double best_val_miou = -1.0;
  double wall_seconds = 0.0;
};

/// End-to-end protocol run. `data` may be supplied to avoid regenerating pools.
RunOutcome run_experiment(const ExperimentConfig& config, const DataPools* data = nullptr,
                          const TrainHooks& extra_hooks = {});

/// Writes metrics.csv, timing.csv, final.ckpt, best.ckpt, config.json (and eigen.csv when traced).
void write_run_outputs(const ExperimentConfig& config, const RunOutcome& outcome);

struct LoadedModel {
  ExperimentConfig config;
  Supernet net;
};

LoadedModel load_model(const std::filesystem::path& checkpoint);

std::vector<PruneReport> run_prune_sweep(LoadedModel& model, const DataPools& data, std::span<const double> fractions,
                                         int finetune_epochs);

enum class AblationAxis { EntropyMagnitudes, ScalingFunctions, Splits };
AblationAxis parse_axis(std::string_view name);

struct AblationSetting {
  std::string name;
  ExperimentConfig config;
};

std::vector<AblationSetting> ablation_grid(const ExperimentConfig& base, AblationAxis axis);

struct AblationRun {
  std::string setting;
  std::uint64_t seed = 0;
  std::optional<double> miou;
  std::string status = "ok";
};

/// Runs every setting for every seed; failures are recorded and the grid continues.
/// Up to `workers` runs execute concurrently.
std::vector<AblationRun> run_ablation(const std::vector<AblationSetting>& grid, const std::vector<std::uint64_t>& seeds,
                                      int workers = 1);
void write_ablation_csv(std::ostream& os, const std::vector<AblationSetting>& grid,
                        const std::vector<AblationRun>& runs);

/// Parses "0,0.1,0.2" style lists.
std::vector<double> parse_double_list(const std::string& text);
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

}  // namespace dnas
