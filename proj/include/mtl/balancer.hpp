#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtl/model.hpp"
#include "mtl/rng.hpp"
#include "mtl/tensor.hpp"

namespace mtl {

enum class Weighting { None, Naive, Dwa, Uncert, Autol };
enum class GradMethod { None, GradDrop, PcGrad, CaGrad };

/// One of the 16 task-balancing configurations: the four weighting schemes
/// (naive, dwa, uncert, autol), the three gradient schemes (graddrop,
/// pcgrad, cagrad) with equal loss weights, and the nine
/// {dwa,uncert,autol} x {graddrop,pcgrad,cagrad} combinations. naive never
/// combines with a gradient scheme.
struct BalancerSpec {
  Weighting weighting = Weighting::Naive;
  GradMethod grad_method = GradMethod::None;
  double dwa_temperature = 2.0;
  double cagrad_c = 0.4;
  double graddrop_leak = 0.0;
  double autol_init = 0.1;
  double autol_meta_lr = 1e-4;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError for combinations outside the 16
  std::string name() const;

  /// Parses the config grammar: a weighting name, a gradient name, or
  /// "weighting+gradient" with no spaces. Throws ConfigError listing the
  /// 16 valid names.
  static BalancerSpec parse(const std::string& name);
  /// Exactly the 16 valid configurations, in table order.
  static std::vector<BalancerSpec> enumerate_all();
};

/// Mutable per-run balancing state: loss history for dwa, trainable
/// log-variances for uncert, lambda weights for autol, and the RNG that
/// drives graddrop draws and pcgrad shuffles. Single owner per training run.
class BalancerState {
 public:
  BalancerState(const BalancerSpec& spec, int num_tasks);

  const BalancerSpec& spec() const { return spec_; }
  int num_tasks() const { return num_tasks_; }

  /// Call at the start of each 1-based epoch; fixes the loss weights the
  /// epoch will train with (dwa weights change here, autol lambdas are
  /// whatever autol_step left behind).
  void begin_epoch(int epoch);
  /// Feed the raw per-task epoch-mean losses after the epoch (dwa history).
  void record_epoch_losses(const std::vector<double>& epoch_means);
  /// Weights applied to the task losses this epoch (for reporting).
  const std::vector<double>& task_weights() const { return current_weights_; }

  /// dwa weights for the given epoch: w_k = K exp(r_k/T) / sum_j exp(r_j/T)
  /// with r_k = L_k(t-1)/L_k(t-2); all ones while fewer than two epochs of
  /// history exist. A zero prior loss is treated as r_k = 1.
  std::vector<double> dwa_weights(int epoch) const;

  /// uncert log-variance parameters s_k; register these with the optimizer,
  /// they are trained jointly with the model.
  std::vector<Tensor> trainable() const { return log_vars_; }

  const std::vector<double>& lambdas() const { return lambdas_; }
  /// First-order Auto-Lambda update from a validation gradient and the raw
  /// per-task training gradients (all over the same flat parameter view).
  void autol_step(const std::vector<double>& val_grad,
                  const std::vector<std::vector<double>>& task_grads,
                  double inner_lr);

  /// The full balancing step for one bag: weights the task losses, runs one
  /// backward pass per task, merges the shared-subset gradients with the
  /// configured gradient method, and installs the result — shared
  /// parameters get the merged gradient, each task token/head gets only its
  /// own task's weighted gradient. The optimizer can step afterwards.
  void combine(const std::vector<Tensor>& task_losses, const ModelParams& model);

 private:
  BalancerSpec spec_;
  int num_tasks_;
  std::vector<std::vector<double>> loss_history_;  // per task, oldest first, <= 2
  std::vector<Tensor> log_vars_;
  std::vector<double> lambdas_;
  std::vector<double> current_weights_;
  Rng rng_;
};

BalancerState make_balancer(const BalancerSpec& spec, int num_tasks);

/// sum_k 0.5 exp(-s_k) L_k + 0.5 s_k, differentiable in both the losses and
/// the log-variances.
Tensor uncert_loss(const std::vector<Tensor>& losses,
                   const std::vector<Tensor>& log_vars);

/// Meta-gradients d L_val / d lambda_k ~= -inner_lr * <val_grad, task_grad_k>.
std::vector<double> autol_meta_grads(
    const std::vector<double>& val_grad,
    const std::vector<std::vector<double>>& task_grads, double inner_lr);

/// Per-task projected gradients: each task's gradient is projected against
/// the original gradients of conflicting tasks, visited in seeded random
/// order. Zero-norm opponents are skipped.
std::vector<std::vector<double>> pcgrad_project(
    const std::vector<std::vector<double>>& grads, Rng& rng);
/// Sum of the projected per-task gradients.
std::vector<double> pcgrad_combine(const std::vector<std::vector<double>>& grads,
                                   Rng& rng);

/// Per coordinate: purity P = (1 + sum g / sum |g|) / 2; with probability P
/// keep only the positive contributions, otherwise only the negative ones;
/// leak in [0,1] blends the dropped mass back. All-zero coordinates emit 0
/// without consuming a draw.
std::vector<double> graddrop_combine(
    const std::vector<std::vector<double>>& grads, Rng& rng, double leak);

/// Simplex weights minimizing F(w) = g_w . g0 + c |g0| |g_w| (projected
/// gradient descent, 200 iterations, step 0.25/L-hat with backtracking).
std::vector<double> cagrad_solve_weights(
    const std::vector<std::vector<double>>& grads, double c);
/// d = g0 + (c |g0| / |g_w|) g_w, rescaled by 1/(1+c^2). c = 0 returns the
/// mean gradient exactly; a zero-norm g_w yields g0/(1+c^2).
std::vector<double> cagrad_combine(const std::vector<std::vector<double>>& grads,
                                   double c);

}  // namespace mtl
