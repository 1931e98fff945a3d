#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mtl/balancer.hpp"
#include "mtl/data.hpp"
#include "mtl/model.hpp"
#include "mtl/tensor.hpp"

namespace mtl {

struct TrainConfig {
  double lr = 1e-4;
  int max_epochs = 32;
  int patience = 7;
  int folds = 5;
  double monitor_fraction = 0.1;  // of the training split, held out for
                                  // early stopping and autol validation
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

/// Patient-level cross-validation plan. Within each fold the train /
/// monitor / test id sets partition the cohort; the test sets across folds
/// partition the cohort. Deterministic given (patients, labels, folds,
/// seed) as a set: patient ids are sorted before the seeded shuffle.
struct FoldPlan {
  struct Fold {
    std::vector<std::string> train;
    std::vector<std::string> monitor;
    std::vector<std::string> test;
  };
  std::vector<Fold> folds;

  std::uint64_t hash() const;  // FNV-1a over the id lists
};

/// Stratified k-fold split by the main label, with a stratified monitor
/// portion carved out of each fold's training split. Throws SplitError when
/// a class has fewer members than folds.
FoldPlan kfold_split(const std::vector<std::string>& patients,
                     const std::vector<int>& labels, int folds,
                     std::uint64_t seed, double monitor_fraction);

/// AdamW with decoupled weight decay:
///   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, const TrainConfig& cfg);
  void step();
  void zero_grad();
  int steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  TrainConfig cfg_;
  int t_ = 0;
};

/// True when the monitor history shows no decrease for `patience`
/// consecutive epochs: (last index - index of the earliest minimum) >=
/// patience.
bool early_stop(const std::vector<double>& monitor_ce, int patience);

struct TaskTargets {
  int label = 0;
  std::vector<double> aux_z;  // standardized auxiliary targets
};

/// One epoch over the given bag order, batch size one bag: per bag the
/// task losses are built, balanced (balancer may be null for the
/// classification-only path) and one optimizer step is taken. Returns the
/// raw per-task epoch-mean losses.
std::vector<double> train_epoch(const ModelParams& model,
                                BalancerState* balancer, AdamW& optimizer,
                                const std::vector<const Tensor*>& bags,
                                const std::vector<TaskTargets>& targets,
                                Rng* dropout_rng);

struct AuxStats {
  double mean = 0.0;
  double stddev = 1.0;
};

struct FoldReport {
  int fold = 0;
  double auroc = 0.0;
  double auprc = 0.0;
  double silhouette = 0.0;
  int epochs = 0;
  bool early_stopped = false;
  std::vector<std::vector<double>> loss_curves;   // [task][epoch], raw losses
  std::vector<double> monitor_ce;                 // [epoch]
  std::vector<std::vector<double>> task_weights;  // [epoch][task]; empty for baseline
  std::vector<AuxStats> aux_stats;

  struct Prediction {
    std::string patient;
    double score;  // probability of the positive class
    int label;
  };
  std::vector<Prediction> predictions;            // test split
  std::vector<std::string> embedding_patients;    // test split
  std::vector<int> embedding_labels;
  std::vector<std::vector<double>> embeddings;    // model_dim vectors
};

struct RunReport {
  std::string balancer;  // "baseline" or a balancer name
  ModelConfig model_config;
  TrainConfig train_config;
  std::vector<std::string> aux_names;
  std::uint64_t fold_plan_hash = 0;
  std::vector<FoldReport> folds;
  double mean_auroc = 0.0;
  double mean_auprc = 0.0;
  double mean_silhouette = 0.0;
};

/// The full protocol: one model per fold on a shared FoldPlan, early
/// stopping on monitor cross-entropy, test-fold metrics and embeddings.
/// Pass balancer = nullptr (or a cohort without auxiliary targets) for the
/// classification-only baseline; with no auxiliary tasks the balancer is
/// never consulted, so any spec reduces to the baseline trajectory.
RunReport run_crossval(const Cohort& cohort, const ModelConfig& model_cfg,
                       const TrainConfig& train_cfg,
                       const BalancerSpec* balancer);

/// run_crossval on a caller-provided plan (used to share one plan across a
/// sweep of balancer configurations).
RunReport run_crossval_with_plan(const Cohort& cohort,
                                 const ModelConfig& model_cfg,
                                 const TrainConfig& train_cfg,
                                 const BalancerSpec* balancer,
                                 const FoldPlan& plan);

/// Builds the plan run_crossval would use.
FoldPlan crossval_plan(const Cohort& cohort, const TrainConfig& train_cfg);

struct TrainedModel {
  ModelParams params;
  std::vector<AuxStats> aux_stats;
  int epochs = 0;
  bool early_stopped = false;
  std::vector<std::vector<double>> loss_curves;
  std::vector<double> monitor_ce;
};

/// Trains one model on the whole cohort (monitor split carved out for early
/// stopping); feeds the `train` CLI command.
TrainedModel train_full(const Cohort& cohort, const ModelConfig& model_cfg,
                        const TrainConfig& train_cfg,
                        const BalancerSpec* balancer);

/// Classification-head input vectors for every patient of the cohort.
struct EmbeddingTable {
  std::vector<std::string> patients;
  std::vector<int> labels;
  std::vector<std::vector<double>> vectors;
};
EmbeddingTable export_embeddings(const ModelParams& params, const Cohort& cohort);

/// Widened row-major feature tensor for a bag.
Tensor bag_tensor(const FeatureBag& bag);

}  // namespace mtl
