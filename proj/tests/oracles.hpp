// Independent reference implementations used to check the library: finite
// differences for gradients, brute-force pair counting / threshold sweeps /
// per-point formulas for the metrics, and a grid search for the cagrad
// inner problem. These deliberately avoid the code paths they verify.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <vector>

#include "mtl/tensor.hpp"

namespace oracles {

/// Mixed absolute/relative error with unit scale floor.
inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

/// Central finite differences against the autodiff gradients of a scalar
/// loss rebuilt by loss_fn from the current parameter values. Returns the
/// maximum per-element error.
inline double max_grad_error(const std::vector<mtl::Tensor>& params,
                             const std::function<mtl::Tensor()>& loss_fn,
                             double h = 1e-5) {
  for (const auto& p : params) const_cast<mtl::Tensor&>(p).zero_grad();
  mtl::backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& values = const_cast<mtl::Tensor&>(params[i]).mutable_values();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      values[j] = saved + h;
      const double fp = loss_fn().item();
      values[j] = saved - h;
      const double fm = loss_fn().item();
      values[j] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      worst = std::max(worst, rel_err(analytic[i][j], fd));
    }
  }
  return worst;
}

/// AUROC by exhaustive positive/negative pair counting; ties count 1/2.
inline double auroc_pairs(const std::vector<double>& scores,
                          const std::vector<int>& labels) {
  double num = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    ++n_pos;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] == 1) continue;
      if (scores[i] > scores[j])
        num += 1.0;
      else if (scores[i] == scores[j])
        num += 0.5;
    }
  }
  for (int l : labels) n_neg += static_cast<std::size_t>(l != 1);
  return num / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

/// Average precision by re-counting true/false positives at every distinct
/// threshold of the descending sweep.
inline double auprc_sweep(const std::vector<double>& scores,
                          const std::vector<int>& labels) {
  std::set<double, std::greater<double>> thresholds(scores.begin(), scores.end());
  std::size_t n_pos = 0;
  for (int l : labels) n_pos += static_cast<std::size_t>(l == 1);
  double ap = 0.0, prev_recall = 0.0;
  for (double t : thresholds) {
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] < t) continue;
      if (labels[i] == 1)
        ++tp;
      else
        ++fp;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision =
        static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

/// Per-point silhouette from an explicit distance matrix.
inline double silhouette_direct(const std::vector<std::vector<double>>& rows,
                                const std::vector<int>& labels) {
  const std::size_t n = rows.size();
  std::vector<std::vector<double>> dist(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t d = 0; d < rows[i].size(); ++d) {
        const double diff = rows[i][d] - rows[j][d];
        acc += diff * diff;
      }
      dist[i][j] = std::sqrt(acc);
    }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t same = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && labels[j] == labels[i]) ++same;
    if (same == 0) continue;  // singleton
    double a = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && labels[j] == labels[i]) a += dist[i][j];
    a /= static_cast<double>(same);
    double b = std::numeric_limits<double>::infinity();
    std::set<int> others(labels.begin(), labels.end());
    for (int cluster : others) {
      if (cluster == labels[i]) continue;
      double sum = 0.0;
      std::size_t count = 0;
      for (std::size_t j = 0; j < n; ++j)
        if (labels[j] == cluster) {
          sum += dist[i][j];
          ++count;
        }
      b = std::min(b, sum / static_cast<double>(count));
    }
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

/// cagrad inner objective evaluated directly on the gradient vectors.
inline double cagrad_objective_direct(const std::vector<double>& g1,
                                      const std::vector<double>& g2, double c,
                                      double w) {
  const std::size_t n = g1.size();
  std::vector<double> gw(n), g0(n);
  for (std::size_t i = 0; i < n; ++i) {
    gw[i] = w * g1[i] + (1.0 - w) * g2[i];
    g0[i] = 0.5 * (g1[i] + g2[i]);
  }
  double dot_wg0 = 0.0, n0 = 0.0, nw = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot_wg0 += gw[i] * g0[i];
    n0 += g0[i] * g0[i];
    nw += gw[i] * gw[i];
  }
  return dot_wg0 + c * std::sqrt(n0) * std::sqrt(nw);
}

/// Minimum of the cagrad objective over the w grid [0, 1] with the given step.
inline double cagrad_grid_min(const std::vector<double>& g1,
                              const std::vector<double>& g2, double c,
                              double step = 1e-3) {
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0;; ++i) {
    const double w = i * step;
    if (w > 1.0 + 1e-12) break;
    best = std::min(best, cagrad_objective_direct(g1, g2, c, std::min(w, 1.0)));
  }
  return best;
}

}  // namespace oracles
