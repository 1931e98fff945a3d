#include "mtl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "mtl/metrics.hpp"

namespace mtl {

namespace {

constexpr std::uint64_t kTagKfold = 0x6b666f6c64ull;      // "kfold"
constexpr std::uint64_t kTagModel = 0x6d6f64656cull;      // "model"
constexpr std::uint64_t kTagShuffle = 0x73687566666cull;  // "shuffl"
constexpr std::uint64_t kTagAutol = 0x6175746f6cull;      // "autol"
constexpr std::uint64_t kTagDropout = 0x64726f70ull;      // "drop"
constexpr std::uint64_t kTagBalancer = 0x62616cull;       // "bal"

double positive_score(const Tensor& logits) {
  const double z0 = logits.at(0), z1 = logits.at(1);
  const double m = std::max(z0, z1);
  const double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
  return e1 / (e0 + e1);
}

}  // namespace

void TrainConfig::validate() const {
  if (lr < 0.0) throw ConfigError("train: learning rate must be >= 0");
  if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
  if (patience < 1) throw ConfigError("train: patience must be >= 1");
  if (folds < 2) throw ConfigError("train: folds must be >= 2");
  if (monitor_fraction <= 0.0 || monitor_fraction >= 1.0)
    throw ConfigError("train: monitor_fraction must be in (0, 1)");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw ConfigError("train: betas must be in [0, 1)");
  if (eps <= 0.0) throw ConfigError("train: eps must be positive");
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
}

// ---------------------------------------------------------------------------
// Fold plan
// ---------------------------------------------------------------------------

std::uint64_t FoldPlan::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
  };
  for (std::size_t f = 0; f < folds.size(); ++f) {
    mix("fold" + std::to_string(f));
    for (const char* part : {"train", "monitor", "test"}) {
      mix(part);
      const auto& ids = part[0] == 't' && part[1] == 'r' ? folds[f].train
                        : part[0] == 'm'                 ? folds[f].monitor
                                                         : folds[f].test;
      for (const auto& id : ids) {
        mix(id);
        mix("|");
      }
    }
  }
  return h;
}

FoldPlan kfold_split(const std::vector<std::string>& patients,
                     const std::vector<int>& labels, int folds,
                     std::uint64_t seed, double monitor_fraction) {
  if (patients.size() != labels.size())
    throw SplitError("kfold: patients and labels differ in length");
  if (folds < 2) throw ConfigError("kfold: folds must be >= 2");
  if (monitor_fraction <= 0.0 || monitor_fraction >= 1.0)
    throw ConfigError("kfold: monitor_fraction must be in (0, 1)");
  {
    std::set<std::string> unique(patients.begin(), patients.end());
    if (unique.size() != patients.size())
      throw SplitError("kfold: duplicate patient ids");
  }

  // Sort ids per class, then apply one seeded shuffle; this makes the plan a
  // function of the cohort as a set, not of manifest order.
  std::map<int, std::vector<std::string>> by_class;
  for (std::size_t i = 0; i < patients.size(); ++i)
    by_class[labels[i]].push_back(patients[i]);
  Rng rng(mix_seed(seed, kTagKfold));
  for (auto& [label, ids] : by_class) {
    if (ids.size() < static_cast<std::size_t>(folds))
      throw SplitError("kfold: class " + std::to_string(label) + " has " +
                       std::to_string(ids.size()) + " patients, fewer than " +
                       std::to_string(folds) + " folds");
    std::sort(ids.begin(), ids.end());
    rng.shuffle(ids);
  }

  FoldPlan plan;
  plan.folds.resize(static_cast<std::size_t>(folds));
  for (const auto& [label, ids] : by_class)
    for (std::size_t i = 0; i < ids.size(); ++i)
      plan.folds[i % static_cast<std::size_t>(folds)].test.push_back(ids[i]);

  for (int f = 0; f < folds; ++f) {
    auto& fold = plan.folds[static_cast<std::size_t>(f)];
    const std::set<std::string> test_set(fold.test.begin(), fold.test.end());
    for (const auto& [label, ids] : by_class) {
      std::vector<std::string> pool;
      for (const auto& id : ids)
        if (!test_set.count(id)) pool.push_back(id);
      const std::size_t want = std::max<std::size_t>(
          1, static_cast<std::size_t>(
                 std::floor(monitor_fraction * static_cast<double>(pool.size()) + 0.5)));
      if (want >= pool.size())
        throw SplitError("kfold: monitor split would leave class " +
                         std::to_string(label) + " without training patients");
      fold.monitor.insert(fold.monitor.end(), pool.begin(),
                          pool.begin() + static_cast<std::ptrdiff_t>(want));
      fold.train.insert(fold.train.end(),
                        pool.begin() + static_cast<std::ptrdiff_t>(want),
                        pool.end());
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

AdamW::AdamW(std::vector<Tensor> params, const TrainConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
  cfg_.validate();
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& theta = params_[i].mutable_values();
    const auto& g = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      theta[j] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps) +
                  cfg_.lr * cfg_.weight_decay * theta[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Epoch loop and early stopping
// ---------------------------------------------------------------------------

bool early_stop(const std::vector<double>& monitor_ce, int patience) {
  if (monitor_ce.empty()) throw ValueError("early_stop: empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < monitor_ce.size(); ++i)
    if (monitor_ce[i] < monitor_ce[best]) best = i;  // ties: earliest minimum
  return monitor_ce.size() - 1 - best >= static_cast<std::size_t>(patience);
}

namespace {

std::vector<Tensor> build_task_losses(const ForwardOutput& out,
                                      const TaskTargets& target) {
  std::vector<Tensor> losses;
  losses.push_back(cross_entropy(out.logits, target.label));
  for (std::size_t k = 0; k < out.aux_preds.size(); ++k)
    losses.push_back(mse(out.aux_preds[k], target.aux_z[k]));
  return losses;
}

}  // namespace

std::vector<double> train_epoch(const ModelParams& model,
                                BalancerState* balancer, AdamW& optimizer,
                                const std::vector<const Tensor*>& bags,
                                const std::vector<TaskTargets>& targets,
                                Rng* dropout_rng) {
  if (bags.size() != targets.size() || bags.empty())
    throw ValueError("train_epoch: bags and targets must align and be nonempty");
  const int num_tasks = model.config.num_tasks();
  std::vector<double> sums(static_cast<std::size_t>(num_tasks), 0.0);
  for (std::size_t b = 0; b < bags.size(); ++b) {
    const ForwardOutput out = forward(model, *bags[b], dropout_rng);
    const auto losses = build_task_losses(out, targets[b]);
    if (num_tasks == 1 || balancer == nullptr) {
      optimizer.zero_grad();
      backward(losses[0]);
    } else {
      balancer->combine(losses, model);
    }
    optimizer.step();
    for (std::size_t k = 0; k < losses.size(); ++k)
      sums[k] += losses[k].item();
  }
  for (double& s : sums) s /= static_cast<double>(bags.size());
  return sums;
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

Tensor bag_tensor(const FeatureBag& bag) {
  return Tensor::from({bag.n, bag.dim}, bag.features);
}

namespace {

struct FoldData {
  std::vector<std::size_t> train;    // cohort indices, manifest order
  std::vector<std::size_t> monitor;
  std::vector<std::size_t> test;
};

FoldData resolve_fold(const Cohort& cohort, const FoldPlan::Fold& fold) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < cohort.patients.size(); ++i)
    index[cohort.patients[i].id] = i;
  auto resolve = [&](const std::vector<std::string>& ids) {
    std::vector<std::size_t> out;
    for (const auto& id : ids) {
      auto it = index.find(id);
      if (it == index.end())
        throw CohortError("fold plan references unknown patient '" + id + "'");
      out.push_back(it->second);
    }
    std::sort(out.begin(), out.end());  // manifest order
    return out;
  };
  return {resolve(fold.train), resolve(fold.monitor), resolve(fold.test)};
}

std::vector<AuxStats> aux_statistics(const Cohort& cohort,
                                     const std::vector<std::size_t>& train,
                                     int k_aux) {
  std::vector<AuxStats> stats(static_cast<std::size_t>(k_aux));
  for (int k = 0; k < k_aux; ++k) {
    double mean = 0.0;
    for (std::size_t i : train) mean += cohort.patients[i].aux[static_cast<std::size_t>(k)];
    mean /= static_cast<double>(train.size());
    double var = 0.0;
    for (std::size_t i : train) {
      const double d = cohort.patients[i].aux[static_cast<std::size_t>(k)] - mean;
      var += d * d;
    }
    var /= static_cast<double>(train.size());
    const double sd = std::sqrt(var);
    stats[static_cast<std::size_t>(k)] = {mean, sd > 1e-12 ? sd : 1.0};
  }
  return stats;
}

TaskTargets make_targets(const CohortPatient& p, const std::vector<AuxStats>& stats,
                         int k_aux) {
  TaskTargets t;
  t.label = p.label;
  for (int k = 0; k < k_aux; ++k)
    t.aux_z.push_back((p.aux[static_cast<std::size_t>(k)] -
                       stats[static_cast<std::size_t>(k)].mean) /
                      stats[static_cast<std::size_t>(k)].stddev);
  return t;
}

/// Validation objective for autol: CE plus every auxiliary MSE.
void autol_epoch_update(const ModelParams& model, BalancerState& state,
                        const Cohort& cohort, const std::vector<Tensor>& bag_cache,
                        const std::vector<AuxStats>& stats,
                        const std::vector<std::size_t>& train,
                        const std::vector<std::size_t>& monitor, double inner_lr,
                        Rng& rng) {
  if (monitor.empty())
    throw ConfigError("autol: needs a non-empty monitor split as its "
                      "validation batch");
  const int k_aux = model.config.aux_tasks;
  const std::size_t vi = monitor[rng.below(monitor.size())];
  const std::size_t ti = train[rng.below(train.size())];
  const auto all = model.all_params();

  for (const auto& p : all) const_cast<Tensor&>(p).zero_grad();
  const ForwardOutput val_out = forward(model, bag_cache[vi]);
  const auto val_losses =
      build_task_losses(val_out, make_targets(cohort.patients[vi], stats, k_aux));
  Tensor val_total = val_losses[0];
  for (std::size_t k = 1; k < val_losses.size(); ++k)
    val_total = add(val_total, val_losses[k]);
  backward(val_total);
  const auto val_grad = flatten_grads(all);

  const ForwardOutput train_out = forward(model, bag_cache[ti]);
  const auto train_losses = build_task_losses(
      train_out, make_targets(cohort.patients[ti], stats, k_aux));
  std::vector<std::vector<double>> task_grads;
  for (const auto& loss : train_losses) {
    for (const auto& p : all) const_cast<Tensor&>(p).zero_grad();
    backward(loss);
    task_grads.push_back(flatten_grads(all));
  }
  for (const auto& p : all) const_cast<Tensor&>(p).zero_grad();
  state.autol_step(val_grad, task_grads, inner_lr);
}

FoldReport run_fold(const Cohort& cohort, const FoldPlan::Fold& plan_fold,
                    const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                    const BalancerSpec* balancer_spec, int fold_idx,
                    ModelParams* trained_out = nullptr) {
  const FoldData fold = resolve_fold(cohort, plan_fold);
  const int k_aux = model_cfg.aux_tasks;

  FoldReport report;
  report.fold = fold_idx;
  report.aux_stats = aux_statistics(cohort, fold.train, k_aux);

  std::vector<Tensor> bag_cache(cohort.patients.size());
  for (const auto& group : {fold.train, fold.monitor, fold.test})
    for (std::size_t i : group)
      if (!bag_cache[i].defined()) bag_cache[i] = bag_tensor(cohort.patients[i].bag);

  ModelConfig cfg = model_cfg;
  cfg.seed = mix_seed(model_cfg.seed, kTagModel, static_cast<std::uint64_t>(fold_idx));
  ModelParams model = init_params(cfg);

  const bool use_balancer = balancer_spec != nullptr && k_aux > 0;
  std::optional<BalancerState> state;
  if (use_balancer) {
    BalancerSpec spec = *balancer_spec;
    spec.seed = mix_seed(spec.seed, kTagBalancer, static_cast<std::uint64_t>(fold_idx));
    state.emplace(spec, 1 + k_aux);
  }

  std::vector<Tensor> opt_params = model.all_params();
  if (use_balancer)
    for (const auto& s : state->trainable()) opt_params.push_back(s);
  AdamW optimizer(std::move(opt_params), train_cfg);

  Rng shuffle_rng(mix_seed(train_cfg.seed, kTagShuffle, static_cast<std::uint64_t>(fold_idx)));
  Rng autol_rng(mix_seed(train_cfg.seed, kTagAutol, static_cast<std::uint64_t>(fold_idx)));
  Rng dropout_rng(mix_seed(cfg.seed, kTagDropout));
  Rng* drop = cfg.dropout > 0.0 ? &dropout_rng : nullptr;

  report.loss_curves.assign(static_cast<std::size_t>(1 + k_aux), {});
  std::vector<std::size_t> order = fold.train;  // epoch 1: manifest order
  for (int epoch = 1; epoch <= train_cfg.max_epochs; ++epoch) {
    if (use_balancer) {
      state->begin_epoch(epoch);
      report.task_weights.push_back(state->task_weights());
    }
    if (epoch > 1) shuffle_rng.shuffle(order);

    std::vector<const Tensor*> bags;
    std::vector<TaskTargets> targets;
    for (std::size_t i : order) {
      bags.push_back(&bag_cache[i]);
      targets.push_back(make_targets(cohort.patients[i], report.aux_stats, k_aux));
    }
    const auto means = train_epoch(model, use_balancer ? &*state : nullptr,
                                   optimizer, bags, targets, drop);
    for (std::size_t k = 0; k < means.size(); ++k)
      report.loss_curves[k].push_back(means[k]);
    if (use_balancer) {
      state->record_epoch_losses(means);
      if (state->spec().weighting == Weighting::Autol)
        autol_epoch_update(model, *state, cohort, bag_cache, report.aux_stats,
                           fold.train, fold.monitor, train_cfg.lr, autol_rng);
    }

    double monitor_ce = 0.0;
    for (std::size_t i : fold.monitor) {
      const ForwardOutput out = forward(model, bag_cache[i]);
      monitor_ce += cross_entropy(out.logits, cohort.patients[i].label).item();
    }
    monitor_ce /= static_cast<double>(fold.monitor.size());
    report.monitor_ce.push_back(monitor_ce);
    report.epochs = epoch;
    if (early_stop(report.monitor_ce, train_cfg.patience)) {
      report.early_stopped = true;
      break;
    }
  }

  // Test-split evaluation: scores, metrics, embeddings.
  ScoredCohort scored;
  for (std::size_t i : fold.test) {
    const ForwardOutput out = forward(model, bag_cache[i]);
    const double score = positive_score(out.logits);
    scored.scores.push_back(score);
    scored.labels.push_back(cohort.patients[i].label);
    report.predictions.push_back(
        {cohort.patients[i].id, score, cohort.patients[i].label});
    report.embedding_patients.push_back(cohort.patients[i].id);
    report.embedding_labels.push_back(cohort.patients[i].label);
    report.embeddings.push_back(out.cls_embedding.values());
  }
  report.auroc = auroc(scored);
  report.auprc = auprc(scored);
  report.silhouette = silhouette(report.embeddings, report.embedding_labels);
  if (trained_out != nullptr) *trained_out = std::move(model);
  return report;
}

void validate_cohort_labels(const Cohort& cohort, int k_aux) {
  if (k_aux == 0) return;
  std::string offenders;
  for (const auto& p : cohort.patients)
    if (p.aux.size() < static_cast<std::size_t>(k_aux)) {
      if (!offenders.empty()) offenders += ", ";
      offenders += p.id;
    }
  if (!offenders.empty())
    throw CohortError("missing auxiliary labels for: " + offenders);
}

}  // namespace

FoldPlan crossval_plan(const Cohort& cohort, const TrainConfig& train_cfg) {
  std::vector<std::string> ids;
  std::vector<int> labels;
  for (const auto& p : cohort.patients) {
    ids.push_back(p.id);
    labels.push_back(p.label);
  }
  return kfold_split(ids, labels, train_cfg.folds, train_cfg.seed,
                     train_cfg.monitor_fraction);
}

RunReport run_crossval_with_plan(const Cohort& cohort,
                                 const ModelConfig& model_cfg,
                                 const TrainConfig& train_cfg,
                                 const BalancerSpec* balancer,
                                 const FoldPlan& plan) {
  train_cfg.validate();
  const int k_aux =
      balancer != nullptr ? static_cast<int>(cohort.aux_names.size()) : 0;
  validate_cohort_labels(cohort, k_aux);
  ModelConfig cfg = model_cfg;
  cfg.aux_tasks = k_aux;
  cfg.validate();
  if (balancer != nullptr) balancer->validate();

  RunReport report;
  report.balancer =
      balancer != nullptr && k_aux > 0 ? balancer->name() : "baseline";
  report.model_config = cfg;
  report.train_config = train_cfg;
  report.aux_names.assign(cohort.aux_names.begin(),
                          cohort.aux_names.begin() + k_aux);
  report.fold_plan_hash = plan.hash();
  for (std::size_t f = 0; f < plan.folds.size(); ++f)
    report.folds.push_back(run_fold(cohort, plan.folds[f], cfg, train_cfg,
                                    balancer, static_cast<int>(f)));
  for (const auto& fr : report.folds) {
    report.mean_auroc += fr.auroc;
    report.mean_auprc += fr.auprc;
    report.mean_silhouette += fr.silhouette;
  }
  const double n = static_cast<double>(report.folds.size());
  report.mean_auroc /= n;
  report.mean_auprc /= n;
  report.mean_silhouette /= n;
  return report;
}

RunReport run_crossval(const Cohort& cohort, const ModelConfig& model_cfg,
                       const TrainConfig& train_cfg,
                       const BalancerSpec* balancer) {
  return run_crossval_with_plan(cohort, model_cfg, train_cfg, balancer,
                                crossval_plan(cohort, train_cfg));
}

// ---------------------------------------------------------------------------
// Full-cohort training
// ---------------------------------------------------------------------------

TrainedModel train_full(const Cohort& cohort, const ModelConfig& model_cfg,
                        const TrainConfig& train_cfg,
                        const BalancerSpec* balancer) {
  train_cfg.validate();
  const int k_aux =
      balancer != nullptr ? static_cast<int>(cohort.aux_names.size()) : 0;
  validate_cohort_labels(cohort, k_aux);
  ModelConfig cfg = model_cfg;
  cfg.aux_tasks = k_aux;
  cfg.validate();

  // Stratified monitor carve over the whole cohort, mirroring the per-fold
  // monitor split of cross-validation.
  std::map<int, std::vector<std::string>> by_class;
  for (const auto& p : cohort.patients) by_class[p.label].push_back(p.id);
  if (by_class.size() < 2)
    throw CohortError("train: cohort has a single class");
  Rng rng(mix_seed(train_cfg.seed, kTagKfold));
  FoldPlan::Fold fold;
  for (auto& [label, ids] : by_class) {
    std::sort(ids.begin(), ids.end());
    rng.shuffle(ids);
    const std::size_t want = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(
               train_cfg.monitor_fraction * static_cast<double>(ids.size()) + 0.5)));
    if (want >= ids.size())
      throw SplitError("train: monitor split would leave class " +
                       std::to_string(label) + " without training patients");
    fold.monitor.insert(fold.monitor.end(), ids.begin(),
                        ids.begin() + static_cast<std::ptrdiff_t>(want));
    fold.train.insert(fold.train.end(),
                      ids.begin() + static_cast<std::ptrdiff_t>(want), ids.end());
  }
  // The fold runner does all the work; the monitor split stands in for the
  // test split so its metrics are computable, then discarded.
  fold.test = fold.monitor;

  TrainedModel out;
  FoldReport fr = run_fold(cohort, fold, cfg, train_cfg, balancer, 0, &out.params);
  out.aux_stats = std::move(fr.aux_stats);
  out.epochs = fr.epochs;
  out.early_stopped = fr.early_stopped;
  out.loss_curves = std::move(fr.loss_curves);
  out.monitor_ce = std::move(fr.monitor_ce);
  return out;
}

EmbeddingTable export_embeddings(const ModelParams& params, const Cohort& cohort) {
  EmbeddingTable table;
  for (const auto& p : cohort.patients) {
    const ForwardOutput out = forward(params, bag_tensor(p.bag));
    table.patients.push_back(p.id);
    table.labels.push_back(p.label);
    table.vectors.push_back(out.cls_embedding.values());
  }
  return table;
}

}  // namespace mtl
