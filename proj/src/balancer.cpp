#include "mtl/balancer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mtl {

namespace {

const char* weighting_name(Weighting w) {
  switch (w) {
    case Weighting::None: return "";
    case Weighting::Naive: return "naive";
    case Weighting::Dwa: return "dwa";
    case Weighting::Uncert: return "uncert";
    case Weighting::Autol: return "autol";
  }
  return "";
}

const char* grad_name(GradMethod g) {
  switch (g) {
    case GradMethod::None: return "";
    case GradMethod::GradDrop: return "graddrop";
    case GradMethod::PcGrad: return "pcgrad";
    case GradMethod::CaGrad: return "cagrad";
  }
  return "";
}

std::string valid_names_list() {
  std::string out;
  for (const auto& s : BalancerSpec::enumerate_all()) {
    if (!out.empty()) out += ", ";
    out += s.name();
  }
  return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

void check_equal_lengths(const std::vector<std::vector<double>>& grads,
                         const char* op) {
  if (grads.empty()) throw ValueError(std::string(op) + ": no gradients");
  for (const auto& g : grads)
    if (g.size() != grads[0].size())
      throw ShapeError(std::string(op) + ": gradient length mismatch");
}

}  // namespace

// ---------------------------------------------------------------------------
// Spec
// ---------------------------------------------------------------------------

void BalancerSpec::validate() const {
  const bool has_w = weighting != Weighting::None;
  const bool has_g = grad_method != GradMethod::None;
  if (!has_w && !has_g)
    throw ConfigError("balancer: empty configuration; valid names: " +
                      valid_names_list());
  if (weighting == Weighting::Naive && has_g)
    throw ConfigError("balancer: 'naive+" + std::string(grad_name(grad_method)) +
                      "' is not a valid configuration; valid names: " +
                      valid_names_list());
  if (dwa_temperature <= 0.0)
    throw ConfigError("balancer: dwa temperature must be positive");
  if (cagrad_c < 0.0) throw ConfigError("balancer: cagrad c must be >= 0");
  if (graddrop_leak < 0.0 || graddrop_leak > 1.0)
    throw ConfigError("balancer: graddrop leak must be in [0, 1]");
  if (autol_init <= 0.0)
    throw ConfigError("balancer: autol lambda init must be positive");
  if (autol_meta_lr <= 0.0)
    throw ConfigError("balancer: autol meta learning rate must be positive");
}

std::string BalancerSpec::name() const {
  const std::string w = weighting_name(weighting);
  const std::string g = grad_name(grad_method);
  if (!w.empty() && !g.empty()) return w + "+" + g;
  return w.empty() ? g : w;
}

BalancerSpec BalancerSpec::parse(const std::string& name) {
  auto weighting_of = [](const std::string& s) {
    if (s == "naive") return Weighting::Naive;
    if (s == "dwa") return Weighting::Dwa;
    if (s == "uncert") return Weighting::Uncert;
    if (s == "autol") return Weighting::Autol;
    return Weighting::None;
  };
  auto grad_of = [](const std::string& s) {
    if (s == "graddrop") return GradMethod::GradDrop;
    if (s == "pcgrad") return GradMethod::PcGrad;
    if (s == "cagrad") return GradMethod::CaGrad;
    return GradMethod::None;
  };
  BalancerSpec spec;
  const auto plus = name.find('+');
  if (plus == std::string::npos) {
    spec.weighting = weighting_of(name);
    spec.grad_method = grad_of(name);
    if (spec.weighting == Weighting::None && spec.grad_method == GradMethod::None)
      throw ConfigError("balancer: unknown name '" + name +
                        "'; valid names: " + valid_names_list());
  } else {
    spec.weighting = weighting_of(name.substr(0, plus));
    spec.grad_method = grad_of(name.substr(plus + 1));
    if (spec.weighting == Weighting::None || spec.grad_method == GradMethod::None)
      throw ConfigError("balancer: unknown name '" + name +
                        "'; valid names: " + valid_names_list());
  }
  spec.validate();
  return spec;
}

std::vector<BalancerSpec> BalancerSpec::enumerate_all() {
  std::vector<BalancerSpec> all;
  auto add = [&](Weighting w, GradMethod g) {
    BalancerSpec s;
    s.weighting = w;
    s.grad_method = g;
    all.push_back(s);
  };
  add(Weighting::Naive, GradMethod::None);
  add(Weighting::Dwa, GradMethod::None);
  add(Weighting::Uncert, GradMethod::None);
  add(Weighting::Autol, GradMethod::None);
  add(Weighting::None, GradMethod::GradDrop);
  add(Weighting::None, GradMethod::PcGrad);
  add(Weighting::None, GradMethod::CaGrad);
  for (Weighting w : {Weighting::Dwa, Weighting::Uncert, Weighting::Autol})
    for (GradMethod g :
         {GradMethod::GradDrop, GradMethod::PcGrad, GradMethod::CaGrad})
      add(w, g);
  return all;
}

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

BalancerState::BalancerState(const BalancerSpec& spec, int num_tasks)
    : spec_(spec),
      num_tasks_(num_tasks),
      loss_history_(static_cast<std::size_t>(num_tasks)),
      current_weights_(static_cast<std::size_t>(num_tasks), 1.0),
      rng_(mix_seed(spec.seed, 0x62616c616e636572ull)) {  // "balancer"
  spec_.validate();
  if (num_tasks < 1) throw ValueError("balancer: need at least one task");
  if (spec_.weighting == Weighting::Uncert)
    for (int k = 0; k < num_tasks; ++k)
      log_vars_.push_back(Tensor::scalar(0.0, true));
  if (spec_.weighting == Weighting::Autol)
    lambdas_.assign(static_cast<std::size_t>(num_tasks), spec_.autol_init);
}

BalancerState make_balancer(const BalancerSpec& spec, int num_tasks) {
  return BalancerState(spec, num_tasks);
}

void BalancerState::begin_epoch(int epoch) {
  switch (spec_.weighting) {
    case Weighting::Dwa:
      current_weights_ = dwa_weights(epoch);
      break;
    case Weighting::Autol:
      current_weights_ = lambdas_;
      break;
    case Weighting::Uncert: {
      // report the effective multiplier on each task loss
      for (int k = 0; k < num_tasks_; ++k)
        current_weights_[static_cast<std::size_t>(k)] =
            0.5 * std::exp(-log_vars_[static_cast<std::size_t>(k)].item());
      break;
    }
    default:
      std::fill(current_weights_.begin(), current_weights_.end(), 1.0);
  }
}

void BalancerState::record_epoch_losses(const std::vector<double>& epoch_means) {
  if (epoch_means.size() != static_cast<std::size_t>(num_tasks_))
    throw ValueError("balancer: loss vector size mismatch");
  for (int k = 0; k < num_tasks_; ++k) {
    auto& h = loss_history_[static_cast<std::size_t>(k)];
    h.push_back(epoch_means[static_cast<std::size_t>(k)]);
    if (h.size() > 2) h.erase(h.begin());
  }
}

std::vector<double> BalancerState::dwa_weights(int epoch) const {
  if (epoch < 1) throw ValueError("dwa_weights: epoch must be >= 1");
  const std::size_t k_tasks = static_cast<std::size_t>(num_tasks_);
  std::vector<double> w(k_tasks, 1.0);
  if (epoch <= 2) return w;
  for (const auto& h : loss_history_)
    if (h.size() < 2) return w;

  std::vector<double> ratios(k_tasks);
  for (std::size_t k = 0; k < k_tasks; ++k) {
    const double prev2 = loss_history_[k][0];  // L(t-2)
    const double prev1 = loss_history_[k][1];  // L(t-1)
    ratios[k] = prev2 == 0.0 ? 1.0 : prev1 / prev2;
  }
  double denom = 0.0;
  for (std::size_t k = 0; k < k_tasks; ++k) {
    ratios[k] = std::exp(ratios[k] / spec_.dwa_temperature);
    denom += ratios[k];
  }
  for (std::size_t k = 0; k < k_tasks; ++k)
    w[k] = static_cast<double>(num_tasks_) * ratios[k] / denom;
  return w;
}

Tensor uncert_loss(const std::vector<Tensor>& losses,
                   const std::vector<Tensor>& log_vars) {
  if (losses.size() != log_vars.size() || losses.empty())
    throw ValueError("uncert_loss: need one log-variance per task");
  Tensor total;
  for (std::size_t k = 0; k < losses.size(); ++k) {
    Tensor term = add(scale(mul(exp(neg(log_vars[k])), losses[k]), 0.5),
                      scale(log_vars[k], 0.5));
    total = k == 0 ? term : add(total, term);
  }
  return total;
}

std::vector<double> autol_meta_grads(
    const std::vector<double>& val_grad,
    const std::vector<std::vector<double>>& task_grads, double inner_lr) {
  std::vector<double> meta(task_grads.size());
  for (std::size_t k = 0; k < task_grads.size(); ++k) {
    if (task_grads[k].size() != val_grad.size())
      throw ShapeError("autol_meta_grads: gradient length mismatch");
    meta[k] = -inner_lr * dot(val_grad, task_grads[k]);
  }
  return meta;
}

void BalancerState::autol_step(const std::vector<double>& val_grad,
                               const std::vector<std::vector<double>>& task_grads,
                               double inner_lr) {
  if (spec_.weighting != Weighting::Autol)
    throw ValueError("autol_step: balancer is not autol");
  const auto meta = autol_meta_grads(val_grad, task_grads, inner_lr);
  for (std::size_t k = 0; k < lambdas_.size(); ++k)
    lambdas_[k] = std::max(1e-4, lambdas_[k] - spec_.autol_meta_lr * meta[k]);
}

// ---------------------------------------------------------------------------
// Gradient surgery
// ---------------------------------------------------------------------------

std::vector<std::vector<double>> pcgrad_project(
    const std::vector<std::vector<double>>& grads, Rng& rng) {
  check_equal_lengths(grads, "pcgrad");
  const std::size_t k_tasks = grads.size();
  std::vector<std::vector<double>> projected(k_tasks);
  for (std::size_t i = 0; i < k_tasks; ++i) {
    std::vector<double> gi = grads[i];
    std::vector<std::size_t> order;
    for (std::size_t j = 0; j < k_tasks; ++j)
      if (j != i) order.push_back(j);
    rng.shuffle(order);
    for (std::size_t j : order) {
      const double d = dot(gi, grads[j]);
      if (d >= 0.0) continue;
      const double n2 = dot(grads[j], grads[j]);
      if (n2 == 0.0) continue;
      const double coef = d / n2;
      for (std::size_t p = 0; p < gi.size(); ++p) gi[p] -= coef * grads[j][p];
    }
    projected[i] = std::move(gi);
  }
  return projected;
}

std::vector<double> pcgrad_combine(const std::vector<std::vector<double>>& grads,
                                   Rng& rng) {
  const auto projected = pcgrad_project(grads, rng);
  std::vector<double> out(projected[0].size(), 0.0);
  for (const auto& g : projected)
    for (std::size_t p = 0; p < out.size(); ++p) out[p] += g[p];
  return out;
}

std::vector<double> graddrop_combine(
    const std::vector<std::vector<double>>& grads, Rng& rng, double leak) {
  check_equal_lengths(grads, "graddrop");
  if (leak < 0.0 || leak > 1.0)
    throw ValueError("graddrop: leak must be in [0, 1]");
  const std::size_t n = grads[0].size();
  std::vector<double> out(n, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    double total = 0.0, abs_total = 0.0, pos = 0.0, neg = 0.0;
    for (const auto& g : grads) {
      total += g[p];
      abs_total += std::abs(g[p]);
      if (g[p] > 0.0)
        pos += g[p];
      else
        neg += g[p];
    }
    if (abs_total == 0.0) continue;  // output 0, no draw consumed
    const double purity = 0.5 * (1.0 + total / abs_total);
    const bool keep_positive = rng.uniform() < purity;
    const double kept = keep_positive ? pos : neg;
    const double dropped = keep_positive ? neg : pos;
    out[p] = kept + leak * dropped;
  }
  return out;
}

namespace {

/// Projection onto the probability simplex (Duchi et al. sort-based rule).
void project_simplex(std::vector<double>& w) {
  const std::size_t n = w.size();
  std::vector<double> u = w;
  std::sort(u.begin(), u.end(), std::greater<double>());
  double css = 0.0, tau = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    css += u[i];
    const double t = (css - 1.0) / static_cast<double>(i + 1);
    if (u[i] - t > 0.0) tau = t;
  }
  for (double& v : w) v = std::max(0.0, v - tau);
}

struct CagradProblem {
  std::vector<std::vector<double>> gram;  // K x K
  std::vector<double> mean_dots;          // g_i . g0
  double g0_norm = 0.0;
  double beta = 0.0;  // c * |g0|

  double objective(const std::vector<double>& w) const {
    const std::size_t k = w.size();
    double lin = 0.0, quad = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      lin += w[i] * mean_dots[i];
      for (std::size_t j = 0; j < k; ++j) quad += w[i] * gram[i][j] * w[j];
    }
    return lin + beta * std::sqrt(std::max(0.0, quad));
  }

  std::vector<double> gradient(const std::vector<double>& w) const {
    const std::size_t k = w.size();
    std::vector<double> mw(k, 0.0);
    double quad = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) mw[i] += gram[i][j] * w[j];
      quad += w[i] * mw[i];
    }
    const double norm = std::sqrt(std::max(0.0, quad));
    std::vector<double> g(k);
    for (std::size_t i = 0; i < k; ++i)
      g[i] = mean_dots[i] + (norm > 1e-15 ? beta * mw[i] / norm : 0.0);
    return g;
  }
};

CagradProblem build_cagrad(const std::vector<std::vector<double>>& grads,
                           double c) {
  const std::size_t k = grads.size();
  CagradProblem prob;
  prob.gram.assign(k, std::vector<double>(k, 0.0));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i; j < k; ++j)
      prob.gram[i][j] = prob.gram[j][i] = dot(grads[i], grads[j]);
  double g0_sq = 0.0;
  prob.mean_dots.assign(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      prob.mean_dots[i] += prob.gram[i][j];
      g0_sq += prob.gram[i][j];
    }
    prob.mean_dots[i] /= static_cast<double>(k);
  }
  g0_sq /= static_cast<double>(k * k);
  prob.g0_norm = std::sqrt(std::max(0.0, g0_sq));
  prob.beta = c * prob.g0_norm;
  return prob;
}

}  // namespace

std::vector<double> cagrad_solve_weights(
    const std::vector<std::vector<double>>& grads, double c) {
  check_equal_lengths(grads, "cagrad");
  const std::size_t k = grads.size();
  std::vector<double> w(k, 1.0 / static_cast<double>(k));
  if (k == 1 || c == 0.0) return w;
  const CagradProblem prob = build_cagrad(grads, c);

  // L-hat: curvature bound of F is beta * lmax(M) / |g_w|; at the uniform
  // start |g_w| = |g0| and beta = c |g0|, so L-hat = c * lmax(M). The row-sum
  // bound over-estimates lmax, which only makes the initial step smaller.
  double lmax = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < k; ++j) row += std::abs(prob.gram[i][j]);
    lmax = std::max(lmax, row);
  }
  if (lmax <= 0.0 || prob.beta == 0.0) return w;
  double step = 0.25 / (c * lmax);

  double f = prob.objective(w);
  for (int iter = 0; iter < 200; ++iter) {
    const auto g = prob.gradient(w);
    double trial_step = step;
    bool accepted = false;
    for (int half = 0; half < 50; ++half) {
      std::vector<double> w_new(k);
      for (std::size_t i = 0; i < k; ++i) w_new[i] = w[i] - trial_step * g[i];
      project_simplex(w_new);
      const double f_new = prob.objective(w_new);
      if (f_new <= f) {
        w = std::move(w_new);
        f = f_new;
        accepted = true;
        break;
      }
      trial_step *= 0.5;
    }
    if (!accepted) break;          // stationary to machine precision
    step = std::min(trial_step * 1.3, 1e6 / lmax);
  }
  return w;
}

std::vector<double> cagrad_combine(const std::vector<std::vector<double>>& grads,
                                   double c) {
  check_equal_lengths(grads, "cagrad");
  if (c < 0.0) throw ValueError("cagrad: c must be >= 0");
  const std::size_t k = grads.size();
  const std::size_t n = grads[0].size();

  std::vector<double> g0(n, 0.0);
  for (const auto& g : grads)
    for (std::size_t p = 0; p < n; ++p) g0[p] += g[p];
  for (double& v : g0) v /= static_cast<double>(k);
  if (c == 0.0) return g0;  // exact: no correction term

  const auto w = cagrad_solve_weights(grads, c);
  std::vector<double> gw(n, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t p = 0; p < n; ++p) gw[p] += w[i] * grads[i][p];

  double g0_norm = std::sqrt(dot(g0, g0));
  double gw_norm = std::sqrt(dot(gw, gw));
  const double rescale = 1.0 / (1.0 + c * c);
  if (gw_norm == 0.0) {
    for (double& v : g0) v *= rescale;
    return g0;
  }
  const double coef = c * g0_norm / gw_norm;
  std::vector<double> out(n);
  for (std::size_t p = 0; p < n; ++p) out[p] = (g0[p] + coef * gw[p]) * rescale;
  return out;
}

// ---------------------------------------------------------------------------
// Combine
// ---------------------------------------------------------------------------

void BalancerState::combine(const std::vector<Tensor>& task_losses,
                            const ModelParams& model) {
  const std::size_t k_tasks = static_cast<std::size_t>(num_tasks_);
  if (task_losses.size() != k_tasks)
    throw ValueError("combine: expected " + std::to_string(num_tasks_) +
                     " task losses, got " + std::to_string(task_losses.size()));

  // 1. weighting
  std::vector<Tensor> weighted(k_tasks);
  if (spec_.weighting == Weighting::Uncert) {
    for (std::size_t k = 0; k < k_tasks; ++k)
      weighted[k] = uncert_loss({task_losses[k]}, {log_vars_[k]});
  } else {
    for (std::size_t k = 0; k < k_tasks; ++k)
      weighted[k] = scale(task_losses[k], current_weights_[k]);
  }

  // 2. per-task backward passes
  const auto shared = model.shared_params();
  const auto all = model.all_params();
  std::vector<std::vector<double>> shared_grads(k_tasks);
  std::vector<std::vector<double>> task_grads(k_tasks);
  std::vector<double> log_var_grads(k_tasks, 0.0);
  for (std::size_t k = 0; k < k_tasks; ++k) {
    for (const auto& p : all) const_cast<Tensor&>(p).zero_grad();
    for (auto& s : log_vars_) s.zero_grad();
    backward(weighted[k]);
    shared_grads[k] = flatten_grads(shared);
    task_grads[k] = flatten_grads(model.task_params(static_cast<int>(k)));
    if (!log_vars_.empty()) log_var_grads[k] = log_vars_[k].grad()[0];
  }

  // 3. merge the shared subset only
  std::vector<double> merged;
  switch (spec_.grad_method) {
    case GradMethod::None: {
      merged.assign(shared_grads[0].size(), 0.0);
      for (const auto& g : shared_grads)
        for (std::size_t p = 0; p < merged.size(); ++p) merged[p] += g[p];
      break;
    }
    case GradMethod::PcGrad:
      merged = pcgrad_combine(shared_grads, rng_);
      break;
    case GradMethod::GradDrop:
      merged = graddrop_combine(shared_grads, rng_, spec_.graddrop_leak);
      break;
    case GradMethod::CaGrad:
      merged = cagrad_combine(shared_grads, spec_.cagrad_c);
      break;
  }

  // 4.-5. install: merged shared, each task its own weighted gradient
  install_grads(shared, merged);
  for (std::size_t k = 0; k < k_tasks; ++k)
    install_grads(model.task_params(static_cast<int>(k)), task_grads[k]);
  for (std::size_t k = 0; k < log_vars_.size(); ++k)
    log_vars_[k].set_grad({log_var_grads[k]});
}

}  // namespace mtl
