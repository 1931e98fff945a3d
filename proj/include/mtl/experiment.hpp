#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mtl/data.hpp"
#include "mtl/trainer.hpp"

namespace mtl {

/// Effective configuration of one experiment run; assembled from a JSON
/// config file with CLI flag overrides, then echoed into every report.
struct ExperimentConfig {
  std::optional<std::string> manifest;
  std::optional<std::string> clinical;
  std::optional<SynthSpec> synth;
  std::string target = "y";
  std::vector<std::string> aux;
  ModelConfig model;
  TrainConfig train;
  std::string balancer = "naive";  // one of the 16 names, or "baseline"
  bool all_balancers = false;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  int threads = 0;  // 0 = hardware concurrency

  void validate() const;  // throws ConfigError
};

/// Parses the JSON config file. Unknown keys are ignored; type errors and
/// invalid JSON raise ConfigError with the parser's location message.
ExperimentConfig load_experiment_config(const std::string& path);
/// Parses a synth spec JSON file.
SynthSpec load_synth_spec(const std::string& path);

/// Derives all sub-seeds from the master seed (model, trainer, synth stay
/// independent streams via distinct tags downstream).
void apply_master_seed(ExperimentConfig& cfg);

/// Loads the cohort from manifest+clinical or generates the synthetic one.
Cohort load_experiment_cohort(const ExperimentConfig& cfg);

std::string config_echo_json(const ExperimentConfig& cfg);

/// Writes report.json, predictions.csv and embeddings.csv under dir.
void write_run_outputs(const RunReport& report, const ExperimentConfig& cfg,
                       const std::string& dir);

struct SweepRow {
  std::string name;
  double auroc = 0.0;
  double auprc = 0.0;
  double silhouette = 0.0;
};

/// Baseline plus the 16 balancer configurations on one shared FoldPlan,
/// optionally across worker threads. Each run writes its outputs under
/// out_dir/<name>/; the returned rows are in table order (baseline first).
std::vector<SweepRow> run_sweep(const Cohort& cohort, const ExperimentConfig& cfg);

/// Table-shaped summary CSV: one row per balancer, columns auroc/auprc.
void write_sweep_summary(const std::vector<SweepRow>& rows,
                         const std::string& path);

}  // namespace mtl
